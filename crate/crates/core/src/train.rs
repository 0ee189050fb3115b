//! Cross-entropy training with AdamW and a polynomial learning-rate decay.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::params::ParamStore;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_IGNORE_LABEL: usize = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub ignore_label: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            base_lr: 1e-3,
            poly_power: 0.9,
            batch_size: 8,
            weight_decay: 0.01,
            seed: 42,
            ignore_label: DEFAULT_IGNORE_LABEL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.poly_power >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("poly_power and weight_decay must be ≥ 0"));
        }
        Ok(())
    }
}

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - iter.min(total) as f64 / total as f64;
    base * frac.powf(power)
}

/// Mean cross-entropy of logits against `target`, after upsampling the logits
/// to the target's `h×w` when they are smaller.
pub fn cross_entropy_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    target: &[usize],
    target_hw: (usize, usize),
    ignore_label: usize,
) -> Result<Var> {
    let logits = if g.shape(logits)[1..] == [target_hw.0, target_hw.1] {
        logits
    } else {
        g.resize(logits, target_hw.0, target_hw.1)?
    };
    g.cross_entropy(logits, target, ignore_label)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let (lr_t, eps) = (T::lit(lr), T::lit(self.eps));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));

        for (name, grad) in grads {
            let theta = params.get_mut(name)?;
            if theta.shape() != grad.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: theta.shape().to_vec(),
                    found: grad.shape().to_vec(),
                });
            }
            let n = theta.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n {
                return Err(Error::shape(format!(
                    "optimizer state for `{name}` has {} entries, parameter has {n}",
                    m.len()
                )));
            }
            for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} lr={:.6e} loss={:.6}", self.iter, self.lr, self.loss)
    }
}

/// Trains `model` in place, calling `on_record` after every iteration.
pub fn train<T: Element>(
    model: &mut Segmenter<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let images: Vec<Tensor<T>> = data.samples.iter().map(|s| s.image.cast()).collect();
    let masks: Vec<Vec<usize>> = data.samples.iter().map(|s| s.mask_usize()).collect();
    let hw = (data.height, data.width);

    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 0xBA7C));
    let mut opt = AdamW::<T>::new(cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.total_iters);
    let inv_batch = T::lit(1.0 / cfg.batch_size as f64);

    for iter in 0..cfg.total_iters {
        let lr = poly_lr(iter, cfg.total_iters, cfg.base_lr, cfg.poly_power);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..images.len());
            let x = g.constant(images[i].clone());
            let out = model.forward(&mut g, &p, x)?;
            let l = cross_entropy_loss(&mut g, out.logits, &masks[i], hw, cfg.ignore_label)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch_size ≥ 1"), inv_batch)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value} at iteration {iter}")));
        }
        g.backward(loss)?;
        let grads = model.params.grads(&g, &p);
        opt.step(&mut model.params, &grads, lr)?;

        let rec = LogRecord { iter, lr, loss: value };
        on_record(&rec);
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SynthConfig};
    use crate::decoder::{DecoderConfig, Variant};
    use crate::encoder::EncoderConfig;
    use crate::model::{Head, ModelConfig};

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.1, 0.9), 0.1);
        assert_eq!(poly_lr(100, 100, 0.1, 0.9), 0.0);
        assert!((poly_lr(50, 100, 0.1, 1.0) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|i| poly_lr(i, 100, 1e-3, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("x".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut p = scalar_store(0.0);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut p, &grad(1.0), 0.1).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_without_decay_is_still() {
        let mut p = scalar_store(0.7);
        let mut opt = AdamW::new(0.0);
        for _ in 0..3 {
            opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adamw_matches_scalar_recurrence() {
        // independent scalar evaluation of three AdamW steps
        let (lr, wd, b1, b2, eps) = (0.05f64, 0.01, 0.9f64, 0.999f64, 1e-8);
        let gs = [0.3, -1.2, 0.5];
        let (mut th, mut m, mut v) = (0.4f64, 0.0, 0.0);
        for (t, g) in gs.iter().enumerate() {
            let t = t as i32 + 1;
            th -= lr * wd * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = scalar_store(0.4);
        let mut opt = AdamW::new(wd);
        for g in gs {
            opt.step(&mut p, &grad(g), lr).unwrap();
        }
        assert!((p.get("x").unwrap().data()[0] - th).abs() < 1e-14);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn adamw_rejects_mismatched_grad() {
        let mut p = scalar_store(0.0);
        let mut opt = AdamW::new(0.0);
        let bad = BTreeMap::from([("x".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(opt.step(&mut p, &bad, 0.1), Err(Error::ParamShape { .. })));
        let missing = BTreeMap::from([("y".to_string(), Tensor::zeros(&[1]))]);
        assert!(matches!(opt.step(&mut p, &missing, 0.1), Err(Error::MissingParam(_))));
    }

    #[test]
    fn loss_closed_forms() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[4, 2, 2]));
        let l = cross_entropy_loss(&mut g, uniform, &[0, 1, 2, 3], (2, 2), 255).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        let two = g.constant(Tensor::zeros(&[2, 1, 1]));
        let l = cross_entropy_loss(&mut g, two, &[0], (1, 1), 255).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
        // logits are upsampled to the target size
        let small = g.constant(Tensor::zeros(&[3, 2, 2]));
        let l = cross_entropy_loss(&mut g, small, &[1; 16], (4, 4), 255).unwrap();
        assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&mut g, two, &[255], (1, 1), 255).is_err());
        assert!(cross_entropy_loss(&mut g, two, &[5], (1, 1), 255).is_err());
    }

    fn tiny_model() -> Segmenter<f32> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                channels: 8,
                stages: 1,
                ..EncoderConfig::default()
            },
            head: Head::StructToken(DecoderConfig::new(8, 4, 1, Variant::Pwe, (4, 4))),
            seed: 1,
            weight_init: Default::default(),
        };
        Segmenter::new(cfg).unwrap()
    }

    fn tiny_data() -> Dataset {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            train_count: 8,
            ..SynthConfig::default()
        };
        Dataset::generate(&cfg, Split::Train).unwrap()
    }

    #[test]
    fn zero_iterations_leave_parameters() {
        let mut m = tiny_model();
        let before = m.params.clone();
        let cfg = TrainConfig {
            total_iters: 0,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &tiny_data(), &cfg, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(m.params, before);
    }

    #[test]
    fn training_is_deterministic_and_starts_near_uniform() {
        let cfg = TrainConfig {
            total_iters: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let data = tiny_data();
        let mut a = tiny_model();
        let mut lines = Vec::new();
        let la = train(&mut a, &data, &cfg, |r| lines.push(r.to_string())).unwrap();
        let mut b = tiny_model();
        let lb = train(&mut b, &data, &cfg, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert!(la.iter().zip(&lb).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));
        assert!((la[0].loss - 4f64.ln()).abs() < 0.1 * 4f64.ln());
        assert!(lines[0].starts_with("iter=0 lr=1.000000e-3 loss="));
        assert!(train(&mut a, &Dataset { samples: vec![], ..data }, &cfg, |_| {}).is_err());
    }
}
