//! Structure-token decoder and its per-pixel baseline counterpart.
//!
//! The decoder keeps one learnable `H_s×W_s` slice per class. `L` blocks each
//! run an extraction module (CSE, SSE or PWE) followed by two FFNs, one on the
//! token stream and one on the feature stream; the last block drops the
//! feature FFN. A ConvBlock over the final tokens yields the class score maps.

pub mod cost;
pub mod extraction;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{Bound, Init, ParamSpec, ParamStore, INIT_STD};
use crate::tensor::Element;

pub use extraction::{cse_forward, pwe_forward, sse_forward, Extracted};
pub use layers::{convblock_forward, ffn_forward, slice_projection, FfnGroups};

/// Which extraction module every block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-slice extraction (channel-wise cross-attention).
    Cse,
    /// Self-slice extraction (channel-wise self-attention on `[S; F]`).
    Sse,
    /// Point-wise extraction (learned 1×1 mixing of `[S; F]`).
    Pwe,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cse, Variant::Sse, Variant::Pwe];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cse => "CSE",
            Variant::Sse => "SSE",
            Variant::Pwe => "PWE",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CSE" => Ok(Variant::Cse),
            "SSE" => Ok(Variant::Sse),
            "PWE" => Ok(Variant::Pwe),
            _ => Err(Error::config(format!("unknown variant `{s}` (expected CSE, SSE or PWE)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Class count `K`.
    pub classes: usize,
    /// Block count `L`.
    pub blocks: usize,
    pub variant: Variant,
    /// Stored token size `(H_s, W_s)`.
    pub token_size: (usize, usize),
    pub ffn_ratio: usize,
    pub ffn_groups: FfnGroups,
    /// Per-slice standardization before every projection.
    pub token_norm: bool,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn new(channels: usize, classes: usize, blocks: usize, variant: Variant, token_size: (usize, usize)) -> Self {
        DecoderConfig {
            channels,
            classes,
            blocks,
            variant,
            token_size,
            ffn_ratio: 4,
            ffn_groups: FfnGroups::Depthwise,
            token_norm: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes == 0 {
            return Err(Error::config("C and K must be ≥ 1"));
        }
        if self.token_size.0 == 0 || self.token_size.1 == 0 {
            return Err(Error::config("token size Hs, Ws must be ≥ 1"));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio must be ≥ 1"));
        }
        if let FfnGroups::Fixed(g) = self.ffn_groups {
            for n in [self.channels, self.classes] {
                let hidden = n * self.ffn_ratio;
                if g == 0 || !hidden.is_multiple_of(g) {
                    return Err(Error::config(format!(
                        "ffn_groups={g} does not divide FFN hidden width {hidden}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, k) = (self.channels, self.classes);
        let mut specs = vec![ParamSpec::new(
            "tokens",
            &[k, self.token_size.0, self.token_size.1],
            Init::TruncNormal(INIT_STD),
        )];
        for i in 0..self.blocks {
            let ext = format!("block{i}.ext");
            specs.extend(match self.variant {
                Variant::Cse => extraction::cse_specs(&ext, c, k),
                Variant::Sse => extraction::sse_specs(&ext, c, k),
                Variant::Pwe => extraction::pwe_specs(&ext, c, k),
            });
            specs.extend(layers::ffn_specs(&format!("block{i}.ffn_s"), k, self.ffn_ratio, self.ffn_groups));
            if i + 1 < self.blocks {
                specs.extend(layers::ffn_specs(&format!("block{i}.ffn_f"), c, self.ffn_ratio, self.ffn_groups));
            }
        }
        specs.extend(layers::convblock_specs("head", k));
        specs
    }

    pub fn init_params<T: Element>(&self) -> ParamStore<T> {
        ParamStore::init(&self.param_specs(), self.seed)
    }
}

/// Output of one decoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub tokens: Var,
    pub features: Var,
    pub attention: Option<Var>,
}

/// Extraction, then `FFN_S` on the tokens and (except in the last block)
/// `FFN_F` on the features.
pub fn decoder_block_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DecoderConfig,
    index: usize,
    s: Var,
    f: Var,
) -> Result<BlockOutput> {
    let ext = format!("block{index}.ext");
    let e = match cfg.variant {
        Variant::Cse => cse_forward(g, p, &ext, s, f, cfg.token_norm)?,
        Variant::Sse => sse_forward(g, p, &ext, s, f, cfg.token_norm)?,
        Variant::Pwe => pwe_forward(g, p, &ext, s, f, cfg.token_norm)?,
    };
    let tokens = ffn_forward(g, p, &format!("block{index}.ffn_s"), cfg.ffn_groups, e.tokens)?;
    let last = index + 1 == cfg.blocks;
    let features = if last {
        e.features
    } else {
        ffn_forward(g, p, &format!("block{index}.ffn_f"), cfg.ffn_groups, e.features)?
    };
    Ok(BlockOutput {
        tokens,
        features,
        attention: e.attention,
    })
}

/// Intermediate tokens of a decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// `tokens[0]` is the learned slice stack resized to `H×W`; `tokens[i]` is
    /// the output of block `i`.
    pub tokens: Vec<Var>,
    pub attention: Vec<Var>,
    pub features: Var,
}

/// Resizes the learned tokens to the feature size and runs every block.
pub fn decoder_blocks<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DecoderConfig,
    f: Var,
) -> Result<DecoderTrace> {
    let &[c, h, w] = g.shape(f) else {
        return Err(Error::shape(format!("feature map must be C×H×W, got {:?}", g.shape(f))));
    };
    if c != cfg.channels {
        return Err(Error::shape(format!(
            "feature map has {c} channels, decoder expects C={}",
            cfg.channels
        )));
    }
    let tokens = p.get("tokens")?;
    let stored = g.shape(tokens).to_vec();
    if stored[0] != cfg.classes {
        return Err(Error::shape(format!(
            "structure tokens {stored:?} do not match K={}",
            cfg.classes
        )));
    }
    let mut s = if (stored[1], stored[2]) == (h, w) {
        tokens
    } else {
        g.resize(tokens, h, w)?
    };
    let mut trace = DecoderTrace {
        tokens: vec![s],
        attention: Vec::new(),
        features: f,
    };
    let mut feat = f;
    for i in 0..cfg.blocks {
        let out = decoder_block_forward(g, p, cfg, i, s, feat)?;
        s = out.tokens;
        feat = out.features;
        trace.tokens.push(s);
        trace.attention.extend(out.attention);
    }
    trace.features = feat;
    Ok(trace)
}

/// Class logits `K×H×W` from a `C×H×W` feature map.
pub fn decoder_forward<T: Element>(g: &mut Graph<T>, p: &Bound, cfg: &DecoderConfig, f: Var) -> Result<Var> {
    decoder_forward_traced(g, p, cfg, f).map(|(logits, _)| logits)
}

pub fn decoder_forward_traced<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DecoderConfig,
    f: Var,
) -> Result<(Var, DecoderTrace)> {
    let trace = decoder_blocks(g, p, cfg, f)?;
    let last = *trace.tokens.last().expect("trace holds the initial tokens");
    let logits = convblock_forward(g, p, "head", last)?;
    Ok((logits, trace))
}

// ---------------------------------------------------------------------------
// per-pixel baseline counterpart

/// Residual blocks in the baseline head.
pub const BASELINE_RES_BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub channels: usize,
    pub classes: usize,
}

impl BaselineConfig {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        specs.extend(layers::conv_specs("base.in", self.classes, self.channels, 1));
        for j in 0..BASELINE_RES_BLOCKS {
            specs.extend(layers::convblock_specs(&format!("base.res{j}"), self.classes));
        }
        specs.extend(layers::conv_specs("base.out", self.classes, self.classes, 1));
        specs
    }
}

/// 1×1 conv `C→K`, four residual ConvBlocks on `K` channels, 1×1 conv `K→K`.
pub fn baseline_forward<T: Element>(g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
    let mut x = layers::conv_layer(g, p, "base.in", f, ConvSpec::same(1, 1))?;
    for j in 0..BASELINE_RES_BLOCKS {
        x = convblock_forward(g, p, &format!("base.res{j}"), x)?;
    }
    layers::conv_layer(g, p, "base.out", x, ConvSpec::same(1, 1))
}
