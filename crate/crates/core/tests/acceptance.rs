//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full training experiments (about an hour on one core). A failing
//! criterion is reported, not hidden; set `ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a non-zero exit status.

use std::process::ExitCode;
use std::time::Instant;

use structtoken::checkpoint;
use structtoken::cli::{self, RunOutcome, GRADCHECK_TOLERANCE};
use structtoken::config::{parse_config, HeadKind, RunConfig};
use structtoken::data::{Dataset, Split};
use structtoken::decoder::cost::estimate_cost;
use structtoken::decoder::extraction::{cse_specs, pwe_specs, sse_specs};
use structtoken::decoder::layers::{convblock_specs, ffn_specs};
use structtoken::decoder::{
    convblock_forward, cse_forward, ffn_forward, pwe_forward, slice_projection, sse_forward,
    DecoderConfig, FfnGroups, Variant,
};
use structtoken::eval::{default_stride, evaluate, multiscale_infer, slide_infer, InferConfig, MULTI_SCALES};
use structtoken::kernels::bilinear_resize;
use structtoken::model::{argmax_classes, Segmenter};
use structtoken::params::{Init, ParamSpec};
use structtoken::train::train;
use structtoken::viz::token_stages;
use structtoken::{Graph, ParamStore, Tensor};

const RECIPE: &str = include_str!("../configs/shapes.cfg");
const BASELINE: &str = include_str!("../configs/baseline.cfg");
const TREND_SEEDS: [u64; 3] = [42, 43, 44];
const TREND_TOLERANCE: f64 = 0.02;

type Outcome = Result<String, String>;

fn recipe() -> RunConfig {
    parse_config(RECIPE).expect("recipe parses")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut failures = Vec::new();
    for v in Variant::ALL {
        let mut cfg = RunConfig::default();
        cfg.variant = v;
        cfg.blocks = 2;
        let rows = match cli::gradcheck_rows(&cfg) {
            Ok(r) => r,
            Err(e) => return Err(format!("{v}: {e}")),
        };
        if !rows.iter().any(|r| r.param == "tokens") {
            failures.push(format!("{v}: tokens not checked"));
        }
        for r in rows {
            count += 1;
            worst = worst.max(r.max_rel_err);
            if !(r.max_rel_err < GRADCHECK_TOLERANCE) {
                failures.push(format!("{v} {} {:.2e}", r.param, r.max_rel_err));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 60.0,
        format!(
            "{count} parameter checks over CSE/SSE/PWE, max rel err {worst:.2e}, {secs:.1} s{}",
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

fn random_params(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let specs: Vec<_> = specs
        .iter()
        .cloned()
        .map(|mut s| {
            s.init = Init::TruncNormal(0.5);
            s
        })
        .collect();
    ParamStore::init(&specs, seed)
}

fn input(shape: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + phase) * 0.37).sin())
}

fn algebraic_suite() -> Outcome {
    let (c, k, h, w) = (6, 3, 4, 5);
    let mut notes = Vec::new();
    let mut ok = true;

    // attention rows and CSE feature pass-through
    let mut row_err = 0.0f64;
    let mut cse_bitwise = true;
    for (specs, is_cse) in [(cse_specs("x", c, k), true), (sse_specs("x", c, k), false)] {
        let store = random_params(&specs, 11);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let s = g.constant(input(&[k, h, w], 0.0));
        let f_in = input(&[c, h, w], 3.0);
        let f = g.constant(f_in.clone());
        let out = if is_cse {
            cse_forward(&mut g, &p, "x", s, f, false)
        } else {
            sse_forward(&mut g, &p, "x", s, f, false)
        }
        .map_err(|e| e.to_string())?;
        let a = g.value(out.attention.ok_or("missing attention")?);
        let cols = a.shape()[1];
        for row in a.data().chunks(cols) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if is_cse {
            cse_bitwise = g
                .value(out.features)
                .data()
                .iter()
                .zip(f_in.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    ok &= row_err <= 1e-6 && cse_bitwise;
    notes.push(format!("row-sum err {row_err:.1e}"));
    notes.push(format!("CSE features bitwise {}", if cse_bitwise { "unchanged" } else { "CHANGED" }));

    // split after concat
    let mut g = Graph::<f64>::new();
    let (a0, b0) = (input(&[k, h, w], 1.0), input(&[c, h, w], 2.0));
    let (a, b) = (g.constant(a0.clone()), g.constant(b0.clone()));
    let joint = g.concat_channels(&[a, b]).map_err(|e| e.to_string())?;
    let parts = g.split_channels(joint, &[k, c]).map_err(|e| e.to_string())?;
    let split_ok = g.value(parts[0]) == &a0 && g.value(parts[1]) == &b0;
    ok &= split_ok;
    notes.push(format!("split∘concat {}", if split_ok { "identity" } else { "BROKEN" }));

    // point-wise extraction against explicit dense mixing, single precision
    let n = c + k;
    let store = random_params(&pwe_specs("x", c, k), 12).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g, false);
    let s = g.constant(input(&[k, h, w], 4.0).cast());
    let f = g.constant(input(&[c, h, w], 5.0).cast());
    let out = pwe_forward(&mut g, &p, "x", s, f, false).map_err(|e| e.to_string())?;
    let joint = g.concat_channels(&[s, f]).map_err(|e| e.to_string())?;
    let projected = slice_projection(&mut g, &p, "x.upsilon", joint).map_err(|e| e.to_string())?;
    let proj = g.value(projected).clone();
    let omega = store.get("x.omega.w").map_err(|e| e.to_string())?;
    let bias = store.get("x.omega.b").map_err(|e| e.to_string())?;
    let hw = h * w;
    let mut pwe_err = 0.0f64;
    for i in 0..n {
        for px in 0..hw {
            let mut acc = bias.data()[i] as f64;
            for j in 0..n {
                acc += omega.data()[i * n + j] as f64 * proj.data()[j * hw + px] as f64;
            }
            let got = if i < k {
                g.value(out.tokens).data()[i * hw + px]
            } else {
                g.value(out.features).data()[(i - k) * hw + px]
            };
            pwe_err = pwe_err.max((got as f64 - acc).abs());
        }
    }
    ok &= pwe_err <= 1e-6;
    notes.push(format!("PWE vs dense oracle {pwe_err:.1e}"));

    // zero-weight residual layers
    let x0 = input(&[n, h, w], 6.0);
    let mut ident_ok = true;
    for (specs, kind) in [
        (ffn_specs("x", n, 4, FfnGroups::Depthwise), "ffn"),
        (convblock_specs("x", n), "convblock"),
    ] {
        let zero: Vec<_> = specs
            .into_iter()
            .map(|mut s| {
                s.init = Init::Zeros;
                s
            })
            .collect();
        let store = ParamStore::<f64>::init(&zero, 0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(x0.clone());
        let y = if kind == "ffn" {
            ffn_forward(&mut g, &p, "x", FfnGroups::Depthwise, x)
        } else {
            convblock_forward(&mut g, &p, "x", x)
        }
        .map_err(|e| e.to_string())?;
        ident_ok &= g.value(y) == &x0;
    }
    ok &= ident_ok;
    notes.push(format!("zero FFN/ConvBlock {}", if ident_ok { "identity" } else { "NOT identity" }));
    check(ok, notes.join(", "))
}

fn cost_orderings() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (c, hw) in [(1024, 40), (192, 32)] {
        let r: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| estimate_cost(&DecoderConfig::new(c, 150, 4, v, (hw, hw)), hw, hw))
            .collect();
        let (cse, sse, pwe) = (&r[0], &r[1], &r[2]);
        let flops_ok = cse.flops() < pwe.flops() && pwe.flops() < sse.flops();
        let params_ok = cse.params() < pwe.params() && pwe.params() < sse.params();
        ok &= flops_ok && params_ok;
        notes.push(format!(
            "C={c} H=W={hw}: GFLOPs CSE {:.2} PWE {:.2} SSE {:.2} [{}], MParams CSE {:.2} PWE {:.2} SSE {:.2} [{}]",
            cse.flops() as f64 / 1e9,
            pwe.flops() as f64 / 1e9,
            sse.flops() as f64 / 1e9,
            if flops_ok { "ordered" } else { "NOT ordered" },
            cse.params() as f64 / 1e6,
            pwe.params() as f64 / 1e6,
            sse.params() as f64 / 1e6,
            if params_ok { "ordered" } else { "NOT ordered" },
        ));
    }
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------

struct Trained {
    label: String,
    cfg: RunConfig,
    outcome: RunOutcome,
}

fn learning(train_data: &Dataset, val: &Dataset, runs: &mut Vec<Trained>) -> Outcome {
    let mut table = String::from("\n      head   val mIoU   time\n");
    for (label, text) in [
        ("CSE", "variant = CSE"),
        ("SSE", "variant = SSE"),
        ("PWE", "variant = PWE"),
        ("baseline", BASELINE),
    ] {
        let cfg = parse_config(&format!("{RECIPE}\n{text}")).map_err(|e| e.to_string())?;
        let outcome = cli::train_and_score(&cfg, train_data, val).map_err(|e| format!("{label}: {e}"))?;
        table += &format!("  {label:>9}   {:.4}   {:>5.0} s\n", outcome.val_miou, outcome.seconds);
        runs.push(Trained {
            label: label.into(),
            cfg,
            outcome,
        });
    }
    let variant_scores: Vec<f64> = runs[..3].iter().map(|r| r.outcome.val_miou).collect();
    let best = variant_scores.iter().cloned().fold(f64::MIN, f64::max);
    let baseline = runs[3].outcome.val_miou;
    let slowest = runs[..3].iter().map(|r| r.outcome.seconds).fold(0.0, f64::max);
    let ok = variant_scores.iter().all(|&m| m >= 0.75) && best >= 0.80 && baseline >= 0.70 && slowest < 900.0;
    check(
        ok,
        format!(
            "variants ≥ 0.75: {}, best {best:.4} (≥ 0.80), baseline {baseline:.4} (≥ 0.70), slowest variant {slowest:.0} s{table}",
            variant_scores.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join("/")
        )
        .trim_end()
        .to_string(),
    )
}

fn block_trend(train_data: &Dataset, val: &Dataset, runs: &[Trained]) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for v in Variant::ALL {
        let mut means = Vec::new();
        let mut per_seed = Vec::new();
        for blocks in 1..=4 {
            let mut scores = Vec::new();
            for seed in TREND_SEEDS {
                let mut cfg = recipe();
                cfg.variant = v;
                cfg.blocks = blocks;
                cfg.seed = seed;
                let reuse = runs
                    .iter()
                    .find(|r| r.cfg.head == HeadKind::StructToken && r.cfg.same_settings(&cfg));
                let m = match reuse {
                    Some(r) => r.outcome.val_miou,
                    None => {
                        cli::train_and_score(&cfg, train_data, val)
                            .map_err(|e| format!("{v} L={blocks} seed={seed}: {e}"))?
                            .val_miou
                    }
                };
                scores.push(m);
            }
            means.push(scores.iter().sum::<f64>() / scores.len() as f64);
            let listed: Vec<String> = scores.iter().map(|m| format!("{m:.3}")).collect();
            per_seed.push(format!("L={blocks} [{}]", listed.join(" ")));
        }
        let monotone = means.windows(2).all(|p| p[1] >= p[0] - TREND_TOLERANCE);
        ok &= monotone;
        lines.push(format!(
            "  {v}: L=1..4 mean mIoU {} [{}]; per seed {}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" → "),
            if monotone { "non-decreasing" } else { "DECREASES" },
            per_seed.join(", ")
        ));
    }
    check(
        ok,
        format!("{} seeds, tolerance {TREND_TOLERANCE}\n{}", TREND_SEEDS.len(), lines.join("\n")),
    )
}

fn inference_protocol(model: &Segmenter<f32>, val: &Dataset) -> Outcome {
    let single = InferConfig::default();
    let mut exact = true;
    let mut slide_err = 0.0f64;
    for s in &val.samples {
        let direct = model.predict_logits(&s.image).map_err(|e| e.to_string())?;
        let probs = multiscale_infer(model, &s.image, &single).map_err(|e| e.to_string())?;
        exact &= argmax_classes(&probs) == argmax_classes(&direct);
        let crop = (s.height(), s.width());
        let slid = slide_infer(model, &s.image, crop, default_stride(crop)).map_err(|e| e.to_string())?;
        slide_err = slide_err.max(slid.max_abs_diff(&direct));
    }
    let base = evaluate(model, val, &single, 255)
        .and_then(|cm| cm.miou())
        .map_err(|e| e.to_string())?
        .miou;
    let full = InferConfig {
        scales: MULTI_SCALES.to_vec(),
        ..single
    };
    let multi = evaluate(model, val, &full, 255)
        .and_then(|cm| cm.miou())
        .map_err(|e| e.to_string())?
        .miou;
    let delta = multi - base;
    check(
        exact && delta.is_finite() && slide_err == 0.0,
        format!(
            "scale {{1.0}} argmax {} single-scale; scales 0.5–1.75 mIoU {multi:.4} vs {base:.4} (Δ {delta:+.4}); slide crop=image max diff {slide_err:.1e}",
            if exact { "equals" } else { "DIFFERS from" }
        ),
    )
}

fn reproducibility() -> Outcome {
    let cfg = parse_config(&format!("{RECIPE}\nL = 2\ntotal_iters = 25\ntrain_count = 32\nval_count = 4"))
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = Dataset::generate(&cfg.synth_config(), Split::Train).map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    let mut blobs = Vec::new();
    let mut models = Vec::new();
    for run in 0..2 {
        let mut m = Segmenter::new(cfg.model_config()).map_err(|e| e.to_string())?;
        let mut trace = Vec::new();
        train(&mut m, &data, &cfg.train_config(), |r| trace.push(r.loss.to_bits())).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{run}.stkn"));
        checkpoint::save(&path, &m.params, &cfg).map_err(|e| e.to_string())?;
        traces.push(trace);
        blobs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        models.push((m, path));
    }
    let same_trace = traces[0] == traces[1];
    let same_ckpt = blobs[0] == blobs[1];
    let (m, path) = &models[0];
    let (params, _) = checkpoint::load(path).map_err(|e| e.to_string())?;
    let restored = Segmenter::with_params(cfg.model_config(), params).map_err(|e| e.to_string())?;
    let image = &data.samples[0].image;
    let a = m.predict_logits(image).map_err(|e| e.to_string())?;
    let b = restored.predict_logits(image).map_err(|e| e.to_string())?;
    let same_out = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        same_trace && same_ckpt && same_out,
        format!(
            "loss traces {}, checkpoints {}, restored outputs {}",
            if same_trace { "bitwise equal" } else { "DIFFER" },
            if same_ckpt { "bitwise equal" } else { "DIFFER" },
            if same_out { "bitwise equal" } else { "DIFFER" }
        ),
    )
}

fn visualization(pwe: &Trained, val: &Dataset) -> Outcome {
    let model = &pwe.outcome.model;
    let class = pwe.cfg.class_index;
    let mut best = (0.0f64, 0usize);
    for (i, s) in val.samples.iter().enumerate() {
        let gt: Vec<bool> = s.mask.iter().map(|&m| m as usize == class).collect();
        if !gt.iter().any(|&b| b) {
            continue;
        }
        let stages = token_stages(model, &s.image).map_err(|e| e.to_string())?;
        let last = stages.last().ok_or("no stages")?;
        let up = bilinear_resize(last, s.height(), s.width()).map_err(|e| e.to_string())?;
        let pred = argmax_classes(&up);
        let inter = pred.iter().zip(&gt).filter(|(&p, &g)| p == class && g).count();
        let union = pred.iter().zip(&gt).filter(|(&p, &g)| p == class || g).count();
        let iou = inter as f64 / union as f64;
        if iou > best.0 {
            best = (iou, i);
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("pwe.stkn");
    checkpoint::save(&ckpt, &model.params, &pwe.cfg).map_err(|e| e.to_string())?;
    let mut cfg = pwe.cfg.clone();
    cfg.image_index = best.1;
    let files = cli::cmd_visualize(&cfg, &ckpt, &dir.path().join("viz"), &mut std::io::sink())
        .map_err(|e| e.to_string())?;
    let expected = cfg.blocks + 2;
    let pgm_ok = files.len() == expected
        && files
            .iter()
            .all(|p| std::fs::read(p).map(|b| b.starts_with(b"P5\n")).unwrap_or(false));
    check(
        pgm_ok && best.0 >= 0.5,
        format!(
            "{} PGM files (expected {expected}); best final-stage IoU for class {class}: {:.4} on validation image {}",
            files.len(),
            best.0,
            best.1
        ),
    )
}

// ---------------------------------------------------------------------------

fn report(results: &mut Vec<Outcome>, n: usize, name: &str, o: Outcome) {
    match &o {
        Ok(d) => println!("PASS [{n}] {name}: {d}"),
        Err(d) => println!("FAIL [{n}] {name}: {d}"),
    }
    results.push(o);
}

fn main() -> ExitCode {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let mut results = Vec::new();
    report(&mut results, 1, "gradient suite", gradient_suite());
    report(&mut results, 2, "algebraic suite", algebraic_suite());
    report(&mut results, 3, "cost-model orderings", cost_orderings());

    let synth = recipe().synth_config();
    let data = Dataset::generate(&synth, Split::Train).and_then(|t| Ok((t, Dataset::generate(&synth, Split::Val)?)));
    let (train_data, val) = match data {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL dataset generation: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut runs = Vec::new();
    report(&mut results, 4, "learning", learning(&train_data, &val, &mut runs));
    let pwe = runs.iter().find(|r| r.label == "PWE");
    match pwe {
        Some(pwe) => {
            report(&mut results, 6, "inference protocol", inference_protocol(&pwe.outcome.model, &val));
            report(&mut results, 7, "reproducibility", reproducibility());
            report(&mut results, 8, "visualization", visualization(pwe, &val));
        }
        None => {
            for (n, name) in [(6, "inference protocol"), (7, "reproducibility"), (8, "visualization")] {
                report(&mut results, n, name, Err("no trained PWE model".into()));
            }
        }
    }
    report(&mut results, 5, "block-count trend", block_trend(&train_data, &val, &runs));

    let passed = results.iter().filter(|r| r.is_ok()).count();
    println!("acceptance: {passed}/{} criteria met", results.len());
    if strict && passed < results.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
