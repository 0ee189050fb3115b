//! Analytic decoder FLOPs and parameter counts, broken down per component,
//! at the two reference backbone geometries.
//!
//! `cargo run --example cost_model`

use structtoken::decoder::cost::estimate_cost;
use structtoken::{DecoderConfig, Variant};

fn main() {
    for (c, hw) in [(192, 32), (1024, 40)] {
        println!("== C={c} K=150 L=4 H=W={hw}");
        for v in Variant::ALL {
            let cfg = DecoderConfig::new(c, 150, 4, v, (hw, hw));
            let report = estimate_cost(&cfg, hw, hw);
            println!("{}", report.to_table(&v.to_string()));
        }
    }
}
