//! Small convolutional encoder producing the `C×H×W` feature map the decoder
//! consumes: a strided patch embedding followed by residual ConvBlocks.

use crate::autograd::{Graph, Var};
use crate::decoder::layers::{conv_layer, conv_specs, convblock_forward, convblock_specs};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{Bound, ParamSpec};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Patch size `p`; the feature map is `h/p × w/p`.
    pub patch: usize,
    /// Output channels `C`.
    pub channels: usize,
    /// Number of ConvBlock mixing stages.
    pub stages: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            patch: 4,
            channels: 32,
            stages: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::config("encoder in_channels, patch and C must be ≥ 1"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs: Vec<ParamSpec> =
            conv_specs("enc.patch", self.channels, self.in_channels, self.patch).into();
        for j in 0..self.stages {
            specs.extend(convblock_specs(&format!("enc.stage{j}"), self.channels));
        }
        specs
    }

    /// Feature size for an `h×w` image.
    pub fn feature_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image size {h}×{w} is not a positive multiple of patch size {}",
                self.patch
            )));
        }
        Ok((h / self.patch, w / self.patch))
    }
}

/// `p×p` convolution with stride `p`, channels `in_channels → C`.
pub fn patch_embed<T: Element>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, image: Var) -> Result<Var> {
    let &[c, h, w] = g.shape(image) else {
        return Err(Error::shape(format!("image must be 3×h×w, got {:?}", g.shape(image))));
    };
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "image has {c} channels, encoder expects {}",
            cfg.in_channels
        )));
    }
    cfg.feature_size(h, w)?;
    let spec = ConvSpec {
        groups: 1,
        stride: cfg.patch,
        padding: 0,
    };
    conv_layer(g, p, "enc.patch", image, spec)
}

pub fn encode<T: Element>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, image: Var) -> Result<Var> {
    let mut x = patch_embed(g, p, cfg, image)?;
    for j in 0..cfg.stages {
        x = convblock_forward(g, p, &format!("enc.stage{j}"), x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, finite_diff_check, DEFAULT_EPS};
    use crate::params::{Init, ParamStore};
    use crate::tensor::Tensor;

    fn specs_with(cfg: &EncoderConfig, std: f64) -> Vec<ParamSpec> {
        cfg.param_specs()
            .into_iter()
            .map(|mut s| {
                s.init = Init::TruncNormal(std);
                s
            })
            .collect()
    }

    #[test]
    fn patch_embed_shapes_and_constants() {
        let cfg = EncoderConfig::default();
        let store = ParamStore::<f32>::init(&specs_with(&cfg, 0.3), 5);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let img = g.constant(Tensor::full(&[3, 32, 32], 0.7));
        let f = patch_embed(&mut g, &p, &cfg, img).unwrap();
        assert_eq!(g.shape(f), &[32, 8, 8]);
        for c in 0..32 {
            let plane = g.value(f).channel(c);
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
        let bad = g.constant(Tensor::zeros(&[3, 30, 32]));
        assert!(matches!(patch_embed(&mut g, &p, &cfg, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_stage_weights_reduce_to_patch_embed() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f32>::init(&specs_with(&cfg, 0.3), 5);
        for (name, t) in store.iter_mut() {
            if name.starts_with("enc.stage") {
                t.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let img = g.constant(Tensor::from_fn(&[3, 16, 24], |i| (i as f32 * 0.37).sin()));
        let pe = patch_embed(&mut g, &p, &cfg, img).unwrap();
        let enc = encode(&mut g, &p, &cfg, img).unwrap();
        assert_eq!(g.shape(enc), &[32, 4, 6]);
        assert_eq!(g.value(pe), g.value(enc));
    }

    #[test]
    fn encode_is_deterministic_under_seed() {
        let cfg = EncoderConfig::default();
        let run = || {
            let store = ParamStore::<f32>::init(&cfg.param_specs(), 11);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let img = g.constant(Tensor::from_fn(&[3, 32, 32], |i| (i % 13) as f32 / 13.0));
            let f = encode(&mut g, &p, &cfg, img).unwrap();
            g.value(f).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            in_channels: 3,
            patch: 2,
            channels: 4,
            stages: 1,
        };
        let store = ParamStore::<f64>::init(&specs_with(&cfg, 0.4), 3);
        let image = Tensor::from_fn(&[3, 4, 4], |i| ((i * 7 % 11) as f64) / 11.0);
        let target = Tensor::from_fn(&[4, 2, 2], |i| ((i * 5 % 7) as f64) / 7.0 - 0.5);
        let report = check_param_grads(
            &store,
            |g, p| {
                let img = g.constant(image.clone());
                let f = encode(g, p, &cfg, img)?;
                let t = g.constant(target.clone());
                let prod = g.mul(f, t)?;
                let sq = g.mul(f, f)?;
                let s = g.add(prod, sq)?;
                g.sum(s)
            },
            DEFAULT_EPS,
        )
        .unwrap();
        for r in report {
            assert!(r.max_rel_err < 1e-5, "{}: {}", r.name, r.max_rel_err);
        }
        // patch_embed input gradient
        let store = store.clone();
        let err = finite_diff_check(
            |g, x| {
                let p = store.bind(g, false);
                let f = patch_embed(g, &p, &cfg, x)?;
                let sq = g.mul(f, f)?;
                g.sum(sq)
            },
            &image,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
