//! Single-scale, multi-scale (optionally mirrored) and slide-window inference
//! on a briefly trained model.
//!
//! `cargo run --release --example inference_modes -- [iters]`

use structtoken::cli::train_and_score;
use structtoken::config::parse_config;
use structtoken::data::{Dataset, Split};
use structtoken::eval::{evaluate, slide_infer, InferConfig, MULTI_SCALES};

const RECIPE: &str = include_str!("../configs/shapes.cfg");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = parse_config(RECIPE)?;
    cfg.total_iters = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let train = Dataset::generate(&cfg.synth_config(), Split::Train)?;
    let val = Dataset::generate(&cfg.synth_config(), Split::Val)?;
    let model = train_and_score(&cfg, &train, &val)?.model;

    let modes = [
        ("single scale", InferConfig::default()),
        (
            "six scales",
            InferConfig {
                scales: MULTI_SCALES.to_vec(),
                ..InferConfig::default()
            },
        ),
        (
            "six scales + flip",
            InferConfig {
                scales: MULTI_SCALES.to_vec(),
                flip: true,
                ..InferConfig::default()
            },
        ),
        (
            "slide 16×16 stride 8",
            InferConfig {
                crop: Some((16, 16)),
                stride: Some((8, 8)),
                ..InferConfig::default()
            },
        ),
    ];
    for (name, infer) in modes {
        let miou = evaluate(&model, &val, &infer, cfg.ignore_label)?.miou()?.miou;
        println!("{name:<22} mIoU {miou:.4}");
    }

    let image = &val.samples[0].image;
    let full = model.predict_logits(image)?;
    let slid = slide_infer(&model, image, (32, 32), (32, 32))?;
    println!("slide with crop = image, max |Δ| vs full forward: {:e}", slid.max_abs_diff(&full));
    Ok(())
}
