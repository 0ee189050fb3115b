//! Encoder plus segmentation head, with parameters owned in one store.

use crate::autograd::{Graph, Var};
use crate::decoder::{
    baseline_forward, decoder_forward_traced, BaselineConfig, DecoderConfig, DecoderTrace,
};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec, ParamStore, WeightInit};
use crate::tensor::{Element, Tensor};

/// Which head sits on top of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    StructToken(DecoderConfig),
    /// Per-pixel counterpart with the same class count.
    Baseline(BaselineConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: Head,
    /// Seed for the initial parameter draw.
    pub seed: u64,
    pub weight_init: WeightInit,
}

impl ModelConfig {
    pub fn classes(&self) -> usize {
        match &self.head {
            Head::StructToken(d) => d.classes,
            Head::Baseline(b) => b.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = match &self.head {
            Head::StructToken(d) => {
                d.validate()?;
                d.channels
            }
            Head::Baseline(b) => {
                if b.classes == 0 {
                    return Err(Error::config("K must be ≥ 1"));
                }
                b.channels
            }
        };
        if c != self.encoder.channels {
            return Err(Error::config(format!(
                "head expects C={c} but the encoder produces {}",
                self.encoder.channels
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder.param_specs();
        specs.extend(match &self.head {
            Head::StructToken(d) => d.param_specs(),
            Head::Baseline(b) => b.param_specs(),
        });
        self.weight_init.apply(&mut specs);
        specs
    }
}

/// Logits at feature resolution together with decoder intermediates.
pub struct Forward {
    pub logits: Var,
    /// `None` for the baseline head.
    pub trace: Option<DecoderTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Segmenter<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.param_specs(), config.seed);
        Ok(Segmenter { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.validate(&config.param_specs())?;
        Ok(Segmenter { config, params })
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    /// Records the forward pass for a `3×h×w` image; logits are `K×h/p×w/p`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Forward> {
        let f = encode(g, p, &self.config.encoder, image)?;
        match &self.config.head {
            Head::StructToken(d) => {
                let (logits, trace) = decoder_forward_traced(g, p, d, f)?;
                Ok(Forward {
                    logits,
                    trace: Some(trace),
                })
            }
            Head::Baseline(_) => Ok(Forward {
                logits: baseline_forward(g, p, f)?,
                trace: None,
            }),
        }
    }

    /// Class logits upsampled to the image size, `K×h×w`.
    pub fn predict_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let logits = if g.shape(out.logits)[1..] == [h, w] {
            out.logits
        } else {
            g.resize(out.logits, h, w)?
        };
        Ok(g.value(logits).clone())
    }
}

/// Per-pixel argmax over the leading class axis of a `K×h×w` map.
pub fn argmax_classes<T: Element>(scores: &Tensor<T>) -> Vec<usize> {
    let &[k, h, w] = scores.shape() else {
        panic!("argmax_classes expects K×h×w, got {:?}", scores.shape());
    };
    let plane = h * w;
    let d = scores.data();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
