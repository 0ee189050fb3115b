//! The three extraction modules that move information from the feature map
//! into the structure tokens.
//!
//! All attention here is channel-wise: every slice (channel) of an `N×H×W`
//! stack is one token whose feature vector is the flattened `H·W` map.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec};
use crate::tensor::Element;

use super::layers::{conv_layer, conv_specs, projection_specs, slice_projection};
use crate::kernels::ConvSpec;

const TOKEN_NORM_EPS: f64 = 1e-5;

/// Outputs of one extraction step.
#[derive(Clone, Copy, Debug)]
pub struct Extracted {
    /// Updated structure tokens, `K×H×W`.
    pub tokens: Var,
    /// Updated feature map, `C×H×W`. The input map itself for cross-slice
    /// extraction.
    pub features: Var,
    /// Attention matrix (`K×C` for cross-slice, `(K+C)×(K+C)` for self-slice).
    pub attention: Option<Var>,
}

fn spatial(g: &Graph<impl Element>, s: Var, f: Var) -> Result<(usize, usize, usize, usize)> {
    match (g.shape(s), g.shape(f)) {
        (&[k, h, w], &[c, h2, w2]) if (h, w) == (h2, w2) => Ok((k, c, h, w)),
        (a, b) => Err(Error::shape(format!(
            "structure tokens {a:?} and feature map {b:?} must be K×H×W and C×H×W with equal H×W"
        ))),
    }
}

fn maybe_norm<T: Element>(g: &mut Graph<T>, x: Var, on: bool) -> Result<Var> {
    if on {
        g.standardize_planes(x, TOKEN_NORM_EPS)
    } else {
        Ok(x)
    }
}

/// `softmax(Q·Kᵀ / √C) · V` over flattened slices. Returns `(A·V, A)`.
fn channel_attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    scale_channels: usize,
) -> Result<(Var, Var)> {
    let flat = |g: &mut Graph<T>, x: Var| {
        let s = g.shape(x).to_vec();
        g.reshape(x, &[s[0], s[1] * s[2]])
    };
    let out_shape = g.shape(q).to_vec();
    let (q2, k2, v2) = (flat(g, q)?, flat(g, k)?, flat(g, v)?);
    let kt = g.transpose(k2)?;
    let scores = g.matmul(q2, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / (scale_channels as f64).sqrt()))?;
    let attn = g.softmax(scores, 1)?;
    let mixed = g.matmul(attn, v2)?;
    let out = g.reshape(mixed, &[out_shape[0], out_shape[1], out_shape[2]])?;
    Ok((out, attn))
}

pub fn cse_specs(prefix: &str, channels: usize, classes: usize) -> Vec<ParamSpec> {
    let mut v = projection_specs(&format!("{prefix}.q"), classes);
    v.extend(projection_specs(&format!("{prefix}.k"), channels));
    v.extend(projection_specs(&format!("{prefix}.v"), channels));
    v
}

/// Cross-slice extraction: queries from the tokens, keys and values from the
/// feature map. The feature map passes through untouched.
pub fn cse_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    s: Var,
    f: Var,
    token_norm: bool,
) -> Result<Extracted> {
    let (_, c, _, _) = spatial(g, s, f)?;
    let sn = maybe_norm(g, s, token_norm)?;
    let fn_ = maybe_norm(g, f, token_norm)?;
    let q = slice_projection(g, p, &format!("{prefix}.q"), sn)?;
    let k = slice_projection(g, p, &format!("{prefix}.k"), fn_)?;
    let v = slice_projection(g, p, &format!("{prefix}.v"), fn_)?;
    let (tokens, attn) = channel_attention(g, q, k, v, c)?;
    Ok(Extracted {
        tokens,
        features: f,
        attention: Some(attn),
    })
}

pub fn sse_specs(prefix: &str, channels: usize, classes: usize) -> Vec<ParamSpec> {
    let n = channels + classes;
    let mut v = projection_specs(&format!("{prefix}.q"), n);
    v.extend(projection_specs(&format!("{prefix}.k"), n));
    v.extend(projection_specs(&format!("{prefix}.v"), n));
    v
}

/// Self-slice extraction: self-attention over the `K + C` slices of
/// `concat(S, F)`, then split back into tokens and features.
pub fn sse_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    s: Var,
    f: Var,
    token_norm: bool,
) -> Result<Extracted> {
    sse_forward_inner(g, p, prefix, s, f, token_norm, false)
}

/// [`sse_forward`] with the attention step replaced by the identity, leaving
/// only concat followed by split.
#[doc(hidden)]
pub fn sse_forward_bypassed<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    s: Var,
    f: Var,
) -> Result<Extracted> {
    sse_forward_inner(g, p, prefix, s, f, false, true)
}

fn sse_forward_inner<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    s: Var,
    f: Var,
    token_norm: bool,
    bypass: bool,
) -> Result<Extracted> {
    let (k, c, _, _) = spatial(g, s, f)?;
    let joint = g.concat_channels(&[s, f])?;
    let (mixed, attention) = if bypass {
        (joint, None)
    } else {
        let gn = maybe_norm(g, joint, token_norm)?;
        let q = slice_projection(g, p, &format!("{prefix}.q"), gn)?;
        let kk = slice_projection(g, p, &format!("{prefix}.k"), gn)?;
        let v = slice_projection(g, p, &format!("{prefix}.v"), gn)?;
        let (out, attn) = channel_attention(g, q, kk, v, c)?;
        (out, Some(attn))
    };
    let parts = g.split_channels(mixed, &[k, c])?;
    Ok(Extracted {
        tokens: parts[0],
        features: parts[1],
        attention,
    })
}

pub fn pwe_specs(prefix: &str, channels: usize, classes: usize) -> Vec<ParamSpec> {
    let n = channels + classes;
    let mut v = projection_specs(&format!("{prefix}.upsilon"), n);
    v.extend(conv_specs(&format!("{prefix}.omega"), n, n, 1));
    v
}

/// Point-wise extraction: a learned 1×1 convolution mixes all `K + C` slices of
/// the projected concatenation.
pub fn pwe_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    s: Var,
    f: Var,
    token_norm: bool,
) -> Result<Extracted> {
    let (k, c, _, _) = spatial(g, s, f)?;
    let joint = g.concat_channels(&[s, f])?;
    let gn = maybe_norm(g, joint, token_norm)?;
    let projected = slice_projection(g, p, &format!("{prefix}.upsilon"), gn)?;
    let mixed = conv_layer(g, p, &format!("{prefix}.omega"), projected, ConvSpec::same(1, 1))?;
    let parts = g.split_channels(mixed, &[k, c])?;
    Ok(Extracted {
        tokens: parts[0],
        features: parts[1],
        attention: None,
    })
}
