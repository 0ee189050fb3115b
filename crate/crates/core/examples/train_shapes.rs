//! Trains one head on the synthetic shapes task with the bundled recipe,
//! reports validation mIoU and saves a checkpoint.
//!
//! `cargo run --release --example train_shapes -- [CSE|SSE|PWE|baseline] [iters]`

use structtoken::cli::cmd_train;
use structtoken::config::parse_config;
use structtoken::data::{Dataset, Split};
use structtoken::eval::{evaluate, InferConfig};

const RECIPE: &str = include_str!("../configs/shapes.cfg");
const BASELINE: &str = include_str!("../configs/baseline.cfg");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut cfg = parse_config(RECIPE)?;
    match args.next().as_deref() {
        Some("baseline") => cfg = parse_config(&format!("{RECIPE}\n{BASELINE}"))?,
        Some(v) => cfg.variant = v.parse()?,
        None => {}
    }
    if let Some(iters) = args.next() {
        cfg.total_iters = iters.parse()?;
    }
    let out = std::env::temp_dir().join("structtoken-train-example.stkn");
    let model = cmd_train(&cfg, &out, &mut std::io::stdout())?;
    let val = Dataset::generate(&cfg.synth_config(), Split::Val)?;
    let report = evaluate(&model, &val, &InferConfig::default(), cfg.ignore_label)?.miou()?;
    println!("{report}");
    Ok(())
}
