//! Convolutional building blocks shared by the decoder, the baseline head and
//! the encoder stub.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::{Bound, Init, ParamSpec, INIT_STD};
use crate::tensor::Element;

/// Weight and bias specs of a conv layer named `prefix`.
pub fn conv_specs(prefix: &str, cout: usize, cin_per_group: usize, kernel: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(
            format!("{prefix}.w"),
            &[cout, cin_per_group, kernel, kernel],
            Init::TruncNormal(INIT_STD),
        ),
        ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

pub fn conv_layer<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    g.conv2d(x, w, Some(b), spec)
}

fn slices(g: &Graph<impl Element>, x: Var) -> Result<usize> {
    match *g.shape(x) {
        [n, _, _] => Ok(n),
        ref s => Err(Error::shape(format!("expected an N×H×W slice stack, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// slice projection ζ(φ(ξ(x)))

pub fn projection_specs(prefix: &str, n: usize) -> Vec<ParamSpec> {
    let mut v = Vec::with_capacity(6);
    v.extend(conv_specs(&format!("{prefix}.xi"), n, n, 1));
    v.extend(conv_specs(&format!("{prefix}.phi"), n, 1, 3));
    v.extend(conv_specs(&format!("{prefix}.zeta"), n, n, 1));
    v
}

/// 1×1 slice mixing, 3×3 depthwise, 1×1 slice mixing. Keeps `N×H×W`.
pub fn slice_projection<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = slices(g, x)?;
    let expected = g.shape(p.get(&format!("{prefix}.xi.w"))?)[0];
    if n != expected {
        return Err(Error::shape(format!(
            "projection `{prefix}` maps {expected} slices, input has {n}"
        )));
    }
    let x = conv_layer(g, p, &format!("{prefix}.xi"), x, ConvSpec::same(1, 1))?;
    let x = conv_layer(g, p, &format!("{prefix}.phi"), x, ConvSpec::same(n, 3))?;
    conv_layer(g, p, &format!("{prefix}.zeta"), x, ConvSpec::same(1, 1))
}

// ---------------------------------------------------------------------------
// FFN with a 3×3 group convolution between the two linear layers

/// Grouping of the FFN's 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnGroups {
    /// One group per hidden channel.
    Depthwise,
    Fixed(usize),
}

impl FfnGroups {
    pub fn groups(self, hidden: usize) -> usize {
        match self {
            FfnGroups::Depthwise => hidden,
            FfnGroups::Fixed(g) => g,
        }
    }
}

pub fn ffn_specs(prefix: &str, n: usize, ratio: usize, groups: FfnGroups) -> Vec<ParamSpec> {
    let hidden = n * ratio;
    let g = groups.groups(hidden);
    let mut v = Vec::with_capacity(6);
    v.extend(conv_specs(&format!("{prefix}.fc1"), hidden, n, 1));
    v.extend(conv_specs(&format!("{prefix}.gconv"), hidden, hidden / g, 3));
    v.extend(conv_specs(&format!("{prefix}.fc2"), n, hidden, 1));
    v
}

/// `x + fc2(gelu(gconv3×3(gelu(fc1(x)))))`.
pub fn ffn_forward<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    groups: FfnGroups,
    x: Var,
) -> Result<Var> {
    let n = slices(g, x)?;
    let fc1 = p.get(&format!("{prefix}.fc1.w"))?;
    if g.shape(fc1)[1] != n {
        return Err(Error::shape(format!(
            "ffn `{prefix}` expects {} slices, input has {n}",
            g.shape(fc1)[1]
        )));
    }
    let hidden = g.shape(fc1)[0];
    let h = conv_layer(g, p, &format!("{prefix}.fc1"), x, ConvSpec::same(1, 1))?;
    let h = g.gelu(h)?;
    let h = conv_layer(
        g,
        p,
        &format!("{prefix}.gconv"),
        h,
        ConvSpec::same(groups.groups(hidden), 3),
    )?;
    let h = g.gelu(h)?;
    let h = conv_layer(g, p, &format!("{prefix}.fc2"), h, ConvSpec::same(1, 1))?;
    g.add(x, h)
}

// ---------------------------------------------------------------------------
// ConvBlock: two 3×3 convolutions with a skip connection

pub fn convblock_specs(prefix: &str, n: usize) -> Vec<ParamSpec> {
    let mut v = Vec::with_capacity(4);
    v.extend(conv_specs(&format!("{prefix}.conv1"), n, n, 3));
    v.extend(conv_specs(&format!("{prefix}.conv2"), n, n, 3));
    v
}

/// `x + conv3×3(relu(conv3×3(x)))`. Accepts `N×H×W` or `B×N×H×W`.
pub fn convblock_forward<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = conv_layer(g, p, &format!("{prefix}.conv1"), x, ConvSpec::same(1, 3))?;
    let h = g.relu(h)?;
    let h = conv_layer(g, p, &format!("{prefix}.conv2"), h, ConvSpec::same(1, 3))?;
    g.add(x, h)
}
