//! Finite-difference check of every decoder parameter and the structure tokens
//! for each extraction module and the per-pixel baseline.
//!
//! `cargo run --release --example gradient_check`

use structtoken::cli::{gradcheck_rows, GRADCHECK_TOLERANCE};
use structtoken::config::{HeadKind, RunConfig};
use structtoken::{Result, Variant};

fn main() -> Result<()> {
    let mut configs = Vec::new();
    for v in Variant::ALL {
        let mut cfg = RunConfig::default();
        cfg.variant = v;
        configs.push(cfg);
    }
    let mut cfg = RunConfig::default();
    cfg.head = HeadKind::Baseline;
    configs.push(cfg);
    for cfg in &configs {
        let rows = gradcheck_rows(cfg)?;
        let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let verdict = if worst < GRADCHECK_TOLERANCE { "pass" } else { "FAIL" };
        println!("{:<8} {:>3} tensors  max rel err {worst:.2e}  {verdict}", rows[0].head, rows.len());
    }
    Ok(())
}
