//! Subcommand implementations behind the `structtoken` binary.
//!
//! Each command takes a parsed [`RunConfig`] and writes its human-readable
//! output to `out`, so the binary stays a thin argument parser.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{HeadKind, RunConfig};
use crate::data::{Dataset, Split};
use crate::decoder::cost::{estimate_baseline_cost, estimate_cost, CostReport};
use crate::decoder::{decoder_forward, BaselineConfig, DecoderConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{evaluate, InferConfig};
use crate::gradcheck::{check_param_grads, DEFAULT_EPS};
use crate::model::{Head, Segmenter};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::train::{cross_entropy_loss, train};
use crate::viz::write_token_stages;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<output>", e))
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let path = match split {
        Split::Train => &cfg.train_data,
        Split::Val => &cfg.val_data,
    };
    let data = match path {
        Some(p) => Dataset::load(p)?,
        None => Dataset::generate(&cfg.synth_config(), split)?,
    };
    if data.classes != cfg.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, configuration K={}",
            data.classes, cfg.classes
        )));
    }
    Ok(data)
}

/// A trained model with its loss trace and validation score.
pub struct RunOutcome {
    pub model: Segmenter<f32>,
    pub losses: Vec<f64>,
    pub val_miou: f64,
    pub seconds: f64,
}

/// Trains `cfg` on `train_data` and scores single-scale mIoU on `val`.
pub fn train_and_score(cfg: &RunConfig, train_data: &Dataset, val: &Dataset) -> Result<RunOutcome> {
    cfg.validate_for_training()?;
    let start = std::time::Instant::now();
    let mut model = Segmenter::new(cfg.model_config())?;
    let mut losses = Vec::with_capacity(cfg.total_iters);
    train(&mut model, train_data, &cfg.train_config(), |r| losses.push(r.loss))?;
    let cm = evaluate(&model, val, &InferConfig::default(), cfg.ignore_label)?;
    Ok(RunOutcome {
        model,
        losses,
        val_miou: cm.miou()?.miou,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Restores a model, preferring the checkpoint's own configuration.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(RunConfig, Segmenter<f32>)> {
    let (params, saved) = checkpoint::load(checkpoint)?;
    let run = match saved {
        Some(mut saved) => {
            // evaluation options come from the caller
            saved.scales = cfg.scales.clone();
            saved.flip = cfg.flip;
            saved.crop = cfg.crop;
            saved.stride = cfg.stride;
            saved.val_data = cfg.val_data.clone();
            saved.val_count = cfg.val_count;
            saved.class_index = cfg.class_index;
            saved.image_index = cfg.image_index;
            saved
        }
        None => cfg.clone(),
    };
    let model = Segmenter::with_params(run.model_config(), params)?;
    Ok((run, model))
}

/// Trains from scratch, saves `checkpoint` (plus its `.cfg` sidecar and a
/// `.log` with one `iter= lr= loss=` line per iteration).
pub fn cmd_train(cfg: &RunConfig, checkpoint_path: &Path, out: &mut dyn Write) -> Result<Segmenter<f32>> {
    cfg.validate_for_training()?;
    let data = dataset(cfg, Split::Train)?;
    let mut model = Segmenter::new(cfg.model_config())?;
    let log_path = {
        let mut s = checkpoint_path.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    };
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let every = (cfg.total_iters / 20).max(1);
    train(&mut model, &data, &cfg.train_config(), |r| {
        let line = format!("{r}\n");
        if let Err(e) = log.write_all(line.as_bytes()) {
            io_err.get_or_insert(Error::io(&log_path, e));
        }
        if r.iter % every == 0 || r.iter + 1 == cfg.total_iters {
            let _ = out.write_all(line.as_bytes());
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    checkpoint::save(checkpoint_path, &model.params, cfg)?;
    write_out(out, &format!("saved {}\n", checkpoint_path.display()))?;
    Ok(model)
}

/// Validation mIoU report of a saved model.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, out: &mut dyn Write) -> Result<f64> {
    let (run, model) = load_model(cfg, checkpoint_path)?;
    let data = dataset(&run, Split::Val)?;
    let infer = run.infer_config();
    let cm = evaluate(&model, &data, &infer, run.ignore_label)?;
    let report = cm.miou()?;
    let scales: Vec<String> = infer.scales.iter().map(|s| s.to_string()).collect();
    write_out(
        out,
        &format!(
            "images {}  scales [{}]  flip {}\n{report}\n",
            data.len(),
            scales.join(", "),
            infer.flip
        ),
    )?;
    Ok(report.miou)
}

/// One row of the gradient-check table.
#[derive(Clone, Debug)]
pub struct GradRow {
    pub head: String,
    pub param: String,
    pub max_rel_err: f64,
}

/// Finite-difference check of every parameter of the configured head (and the
/// encoder) at a tiny double-precision geometry: C=6, K=3, 4×4 features.
pub fn gradcheck_rows(cfg: &RunConfig) -> Result<Vec<GradRow>> {
    let (c, k, hw) = (6, 3, 4);
    let mut rows = Vec::new();
    let target: Vec<usize> = (0..hw * hw).map(|i| (i * 7 + 1) % k).collect();
    let feature = Tensor::from_fn(&[c, hw, hw], |i| ((i as f64 + 1.0) * 0.61).sin());
    let heads: Vec<(String, Head)> = match cfg.head {
        HeadKind::Baseline => vec![("baseline".into(), Head::Baseline(BaselineConfig { channels: c, classes: k }))],
        HeadKind::StructToken => {
            let dc = cfg.decoder_config();
            let mut d = DecoderConfig::new(c, k, dc.blocks.min(2), dc.variant, (3, 3));
            d.token_norm = dc.token_norm;
            vec![(dc.variant.to_string(), Head::StructToken(d))]
        }
    };
    for (label, head) in heads {
        let specs: Vec<_> = match &head {
            Head::StructToken(d) => d.param_specs(),
            Head::Baseline(b) => b.param_specs(),
        }
        .into_iter()
        .map(|mut s| {
            s.init = Init::TruncNormal(0.3);
            s
        })
        .collect();
        let store = ParamStore::<f64>::init(&specs, cfg.seed);
        let checks = check_param_grads(
            &store,
            |g, p| {
                let f = g.constant(feature.clone());
                let logits = match &head {
                    Head::StructToken(d) => decoder_forward(g, p, d, f)?,
                    Head::Baseline(_) => crate::decoder::baseline_forward(g, p, f)?,
                };
                cross_entropy_loss(g, logits, &target, (hw, hw), usize::MAX)
            },
            DEFAULT_EPS,
        )?;
        rows.extend(checks.into_iter().map(|r| GradRow {
            head: label.clone(),
            param: r.name,
            max_rel_err: r.max_rel_err,
        }));
    }
    Ok(rows)
}

/// Prints the gradient-check table; errors when any entry fails.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let rows = gradcheck_rows(cfg)?;
    let mut s = format!("{:<8} {:<28} {:>12}  result\n", "head", "parameter", "max rel err");
    let mut failed = 0;
    for r in &rows {
        let ok = r.max_rel_err < GRADCHECK_TOLERANCE;
        failed += usize::from(!ok);
        let _ = writeln!(
            s,
            "{:<8} {:<28} {:>12.3e}  {}",
            r.head,
            r.param,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "{} checks, {failed} failed", rows.len());
    write_out(out, &s)?;
    if failed > 0 {
        return Err(Error::Invalid(format!(
            "{failed} gradient checks exceed {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

/// Analytic decoder cost of every variant and the baseline at the configured
/// geometry.
pub fn cost_reports(cfg: &RunConfig) -> Result<Vec<(String, CostReport)>> {
    cfg.validate()?;
    let (h, w) = (cfg.height / cfg.patch, cfg.width / cfg.patch);
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let mut d = cfg.decoder_config();
        d.variant = v;
        reports.push((v.to_string(), estimate_cost(&d, h, w)));
    }
    let b = BaselineConfig {
        channels: cfg.channels,
        classes: cfg.classes,
    };
    reports.push(("baseline".into(), estimate_baseline_cost(&b, h, w)));
    Ok(reports)
}

pub fn cmd_flops(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let reports = cost_reports(cfg)?;
    let (h, w) = (cfg.height / cfg.patch, cfg.width / cfg.patch);
    let mut s = format!(
        "decoder cost at C={} K={} L={} H×W={h}×{w}\n{:<9} {:>14} {:>10} {:>12}\n",
        cfg.channels, cfg.classes, cfg.blocks, "head", "GFLOPs", "MParams", "FLOPs"
    );
    for (name, r) in &reports {
        let _ = writeln!(
            s,
            "{name:<9} {:>14.4} {:>10.4} {:>12}",
            r.flops() as f64 / 1e9,
            r.params() as f64 / 1e6,
            r.flops()
        );
    }
    let mut order: Vec<_> = reports[..3].iter().collect();
    order.sort_by_key(|(_, r)| r.flops());
    let names: Vec<&str> = order.iter().map(|(n, _)| n.as_str()).collect();
    let _ = writeln!(s, "FLOPs order: {}", names.join(" < "));
    order.sort_by_key(|(_, r)| r.params());
    let names: Vec<&str> = order.iter().map(|(n, _)| n.as_str()).collect();
    let _ = writeln!(s, "params order: {}", names.join(" < "));
    write_out(out, &s)
}

/// Writes the training and validation splits as `train.stds` and `val.stds`
/// under `outdir`.
pub fn cmd_synth(cfg: &RunConfig, outdir: &Path, out: &mut dyn Write) -> Result<[PathBuf; 2]> {
    cfg.validate()?;
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let synth = cfg.synth_config();
    let paths = [outdir.join("train.stds"), outdir.join("val.stds")];
    for (split, path) in [Split::Train, Split::Val].into_iter().zip(&paths) {
        let data = Dataset::generate(&synth, split)?;
        data.save(path)?;
        write_out(out, &format!("wrote {} samples to {}\n", data.len(), path.display()))?;
    }
    Ok(paths)
}

/// Writes the token-stage PGMs of validation image `image_index` for
/// `class_index`.
pub fn cmd_visualize(cfg: &RunConfig, checkpoint_path: &Path, outdir: &Path, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let (run, model) = load_model(cfg, checkpoint_path)?;
    if run.class_index >= model.classes() {
        return Err(Error::Invalid(format!(
            "class index {} is outside [0, {})",
            run.class_index,
            model.classes()
        )));
    }
    let data = dataset(&run, Split::Val)?;
    let sample = data.samples.get(run.image_index).ok_or_else(|| {
        Error::Invalid(format!(
            "image index {} is outside the {}-image validation set",
            run.image_index,
            data.len()
        ))
    })?;
    let paths = write_token_stages(&model, &sample.image, run.class_index, outdir)?;
    for p in &paths {
        write_out(out, &format!("wrote {}\n", p.display()))?;
    }
    Ok(paths)
}

/// Infer configuration with every scale of the multi-scale protocol.
pub fn multiscale(cfg: &InferConfig) -> InferConfig {
    InferConfig {
        scales: crate::eval::MULTI_SCALES.to_vec(),
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn quick() -> RunConfig {
        parse_config(
            "C = 8\nL = 1\nstages = 1\nheight = 16\nwidth = 16\ntrain_count = 4\nval_count = 2\ntotal_iters = 2\nbatch_size = 1",
        )
        .unwrap()
    }

    #[test]
    fn train_eval_visualize_round() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.stkn");
        let cfg = quick();
        let mut out = Vec::new();
        cmd_train(&cfg, &ckpt, &mut out).unwrap();
        let log = std::fs::read_to_string(dir.path().join("m.stkn.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.starts_with("iter=0 lr="));
        let miou = cmd_eval(&cfg, &ckpt, &mut out).unwrap();
        assert!((0.0..=1.0).contains(&miou));
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.contains("mIoU"));
        let paths = cmd_visualize(&cfg, &ckpt, &dir.path().join("viz"), &mut out).unwrap();
        assert_eq!(paths.len(), 3);
        let mut bad = cfg.clone();
        bad.class_index = 9;
        assert!(cmd_visualize(&bad, &ckpt, dir.path(), &mut out).is_err());
    }

    #[test]
    fn training_rejects_zero_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick();
        cfg.blocks = 0;
        assert!(cmd_train(&cfg, &dir.path().join("m"), &mut Vec::new()).is_err());
    }

    #[test]
    fn gradcheck_passes_for_every_head() {
        for text in ["variant = cse", "variant = sse", "variant = pwe\ntoken_norm = true", "head = baseline"] {
            let cfg = parse_config(text).unwrap();
            let mut out = Vec::new();
            cmd_gradcheck(&cfg, &mut out).unwrap();
            assert!(String::from_utf8(out).unwrap().contains("0 failed"));
        }
    }

    #[test]
    fn flops_table_orders_variants() {
        let cfg = parse_config("C = 192\nK = 150\nheight = 128\nwidth = 128\nclass_index = 1").unwrap();
        let mut out = Vec::new();
        cmd_flops(&cfg, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("FLOPs order: CSE < PWE < SSE"), "{text}");
        assert!(text.contains("params order: CSE < PWE < SSE"), "{text}");
    }

    #[test]
    fn synth_writes_both_splits() {
        let dir = tempfile::tempdir().unwrap();
        let paths = cmd_synth(&quick(), dir.path(), &mut Vec::new()).unwrap();
        assert_eq!(Dataset::load(&paths[0]).unwrap().len(), 4);
        assert_eq!(Dataset::load(&paths[1]).unwrap().len(), 2);
    }
}
