//! Trains every extraction module and the per-pixel baseline with the bundled
//! recipes on the same data and prints a comparison table.
//!
//! `cargo run --release --example compare_heads -- [iters]`

use structtoken::cli::train_and_score;
use structtoken::config::parse_config;
use structtoken::data::{Dataset, Split};

const RECIPE: &str = include_str!("../configs/shapes.cfg");
const BASELINE: &str = include_str!("../configs/baseline.cfg");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters: Option<usize> = std::env::args().nth(1).map(|s| s.parse()).transpose()?;
    let base = parse_config(RECIPE)?;
    let train = Dataset::generate(&base.synth_config(), Split::Train)?;
    let val = Dataset::generate(&base.synth_config(), Split::Val)?;
    println!("{:>9}  {:>8}  {:>10}  {:>7}", "head", "val mIoU", "final loss", "seconds");
    for (label, overlay) in [
        ("CSE", "variant = CSE"),
        ("SSE", "variant = SSE"),
        ("PWE", "variant = PWE"),
        ("baseline", BASELINE),
    ] {
        let mut cfg = parse_config(&format!("{RECIPE}\n{overlay}"))?;
        if let Some(n) = iters {
            cfg.total_iters = n;
        }
        let run = train_and_score(&cfg, &train, &val)?;
        let last = run.losses.last().copied().unwrap_or(f64::NAN);
        println!("{label:>9}  {:>8.4}  {last:>10.4}  {:>7.1}", run.val_miou, run.seconds);
    }
    Ok(())
}
