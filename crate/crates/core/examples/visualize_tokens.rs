//! Trains a point-wise model briefly and writes the target-class token map of
//! every decoder stage as PGM images.
//!
//! `cargo run --release --example visualize_tokens -- [outdir] [iters]`

use std::path::PathBuf;

use structtoken::checkpoint;
use structtoken::cli::{cmd_visualize, train_and_score};
use structtoken::config::parse_config;
use structtoken::data::{Dataset, Split};

const RECIPE: &str = include_str!("../configs/shapes.cfg");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let outdir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("structtoken-tokens"));
    let mut cfg = parse_config(RECIPE)?;
    cfg.total_iters = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let train = Dataset::generate(&cfg.synth_config(), Split::Train)?;
    let val = Dataset::generate(&cfg.synth_config(), Split::Val)?;
    let run = train_and_score(&cfg, &train, &val)?;
    println!("trained {} iterations, val mIoU {:.4}", cfg.total_iters, run.val_miou);

    let ckpt = outdir.join("model.stkn");
    std::fs::create_dir_all(&outdir)?;
    checkpoint::save(&ckpt, &run.model.params, &cfg)?;
    cmd_visualize(&cfg, &ckpt, &outdir, &mut std::io::stdout())?;
    Ok(())
}
