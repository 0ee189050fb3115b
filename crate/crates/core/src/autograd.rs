//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed operation in execution order, which is a
//! topological order by construction. [`Graph::backward`] walks the tape once in
//! reverse and accumulates adjoints for every node that requires a gradient.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvSpec, ResizeAxis};
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Resize {
        x: Var,
        ys: ResizeAxis,
        xs: ResizeAxis,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Standardize {
        x: Var,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// GELU, tanh approximation.
const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let inner = c * (x + T::lit(GELU_COEFF) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_COEFF);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when `v` did not influence the loss.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Multiply-accumulates executed by the recorded convolutions and matrix
    /// products (forward pass only).
    pub fn forward_macs(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv2d { geom, .. } => geom.macs(),
                &Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    (sa[0] * sa[1] * sb[1]) as u64
                }
                _ => 0,
            })
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, n], &[n2, p]) = (sa, sb) else {
            return Err(Error::shape(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if n != n2 {
            return Err(Error::shape(format!("matmul inner dimensions differ: {sa:?} · {sb:?}")));
        }
        let mut out = vec![T::zero(); m * p];
        T::gemm(m, n, p, self.value(a).data(), (n, 1), self.value(b).data(), (p, 1), &mut out, false);
        let value = Tensor::new(&[m, p], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[m, n] = self.shape(a) else {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", self.shape(a))));
        };
        let src = self.value(a).data();
        let value = Tensor::from_fn(&[n, m], |i| src[(i % m) * n + i / m]);
        self.push(value, Op::Transpose(a), &[a], "transpose")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let y = kernels::softmax_forward(self.value(x).data(), &shape, axis);
        self.push(Tensor::new(&shape, y)?, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Grouped 2-D cross-correlation. `input` is `C×H×W` or `B×C×H×W`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?} does not match Cout={}",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let batched = self.shape(input).len() == 4;
        let value = Tensor::new(&geom.out_shape(batched), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(value, Op::Conv2d { input, weight, bias, geom }, &inputs, "conv2d")
    }

    fn channel_axis(shape: &[usize]) -> Result<usize> {
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "channel ops need at least rank 3 (C×H×W), got {shape:?}"
            )));
        }
        Ok(shape.len() - 3)
    }

    /// Concatenates along the channel axis (`C` of `…×C×H×W`).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat of an empty list"));
        };
        let base = self.shape(first).to_vec();
        let axis = Self::channel_axis(&base)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(Error::shape(format!(
                    "concat: {s:?} does not match {base:?} outside the channel axis"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::lane_layout(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let c = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat { inputs: xs.to_vec(), axis }, xs, "concat")
    }

    /// Channels `start..start + len` of `x`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let base = self.shape(x).to_vec();
        let axis = Self::channel_axis(&base)?;
        if len == 0 || start + len > base[axis] {
            return Err(Error::shape(format!(
                "channel range {start}..{} out of bounds for {base:?}",
                start + len
            )));
        }
        let (outer, c, inner) = kernels::lane_layout(&base, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * c * inner + start * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = base;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Narrow { x, axis, start }, &[x], "narrow")
    }

    /// Splits along the channel axis into contiguous ranges of the given sizes.
    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        let axis = Self::channel_axis(&shape)?;
        let total: usize = sizes.iter().sum();
        if total != shape[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} sum to {total}, channel dim of {shape:?} is {}",
                shape[axis]
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow_channels(x, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Bilinear resize (half-pixel centers) of an `N×H×W` tensor.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let &[n, h, w] = self.shape(x) else {
            return Err(Error::shape(format!("resize expects N×H×W, got {:?}", self.shape(x))));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize output size must be ≥ 1"));
        }
        let (ys, xs) = (ResizeAxis::new(h, out_h), ResizeAxis::new(w, out_w));
        let out = kernels::resize_forward(self.value(x).data(), n, (h, w), &ys, &xs);
        let value = Tensor::new(&[n, out_h, out_w], out)?;
        self.push(value, Op::Resize { x, ys, xs }, &[x], "resize")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x], "gelu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x], "mean")
    }

    /// Mean per-pixel cross-entropy of `K×h×w` logits against class indices.
    /// Pixels labelled `ignore_label` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize], ignore_label: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let &[k, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!("cross_entropy expects K×h×w logits, got {shape:?}")));
        };
        if target.len() != h * w {
            return Err(Error::shape(format!(
                "cross_entropy target has {} pixels, logits cover {h}×{w}",
                target.len()
            )));
        }
        let mut targets = Vec::with_capacity(h * w);
        for (i, &t) in target.iter().enumerate() {
            if t == ignore_label {
                targets.push(None);
            } else if t < k {
                targets.push(Some(t));
            } else {
                return Err(Error::Invalid(format!(
                    "target class {t} at pixel {i} is outside [0, {k})"
                )));
            }
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every pixel is ignored".into()));
        }
        let probs = kernels::softmax_forward(self.value(logits).data(), &shape, 0);
        let x = self.value(logits).data();
        let plane = h * w;
        let mut total = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let max = (0..k).map(|c| x[c * plane + i]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..k).map(|c| (x[c * plane + i] - max).exp()).sum::<T>().ln();
                total += (lse - x[t * plane + i]).as_f64();
            }
        }
        let value = Tensor::scalar(T::lit(total / count as f64));
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets,
            count,
        };
        self.push(value, op, &[logits], "cross_entropy")
    }

    /// Standardizes every `H×W` plane of an `N×H×W` tensor to zero mean and
    /// unit variance.
    pub fn standardize_planes(&mut self, x: Var, eps: f64) -> Result<Var> {
        let &[n, h, w] = self.shape(x) else {
            return Err(Error::shape(format!(
                "standardize_planes expects N×H×W, got {:?}",
                self.shape(x)
            )));
        };
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * plane];
        let mut inv_std = Vec::with_capacity(n);
        for c in 0..n {
            let p = &src[c * plane..(c + 1) * plane];
            let mean = p.iter().copied().sum::<T>() / T::lit(plane as f64);
            let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit(plane as f64);
            let r = T::one() / (var + T::lit(eps)).sqrt();
            for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(p) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::new(&[n, h, w], out)?;
        self.push(value, Op::Standardize { x, inv_std }, &[x], "standardize_planes")
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.adjoint(i, &g);
            self.grads[i] = Some(g);
            for (v, c) in contributions {
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.value(v).numel()]
    }

    /// Input adjoints of node `i` given its output adjoint `g`.
    fn adjoint(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let p = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * n];
                    T::gemm(m, p, n, g, (p, 1), self.value(b).data(), (1, p), &mut da, false);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); n * p];
                    T::gemm(n, m, p, self.value(a).data(), (1, n), g, (p, 1), &mut db, false);
                    out.push((b, db));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                // g is n×m
                let da = (0..m * n).map(|idx| g[(idx % n) * m + idx / n]).collect();
                out.push((a, da));
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::lane_layout(node.value.shape(), axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                ref geom,
            } => {
                let mut di = self.needs(input).then(|| self.zeros_like(input));
                let mut dw = self.needs(weight).then(|| self.zeros_like(weight));
                let mut db = bias.filter(|&b| self.needs(b)).map(|b| self.zeros_like(b));
                kernels::conv2d_backward(
                    geom,
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    di.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(di.map(|d| (input, d)));
                out.extend(dw.map(|d| (weight, d)));
                if let (Some(b), Some(d)) = (bias, db) {
                    out.push((b, d));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::lane_layout(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in inputs {
                    let c = self.shape(x)[*axis];
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let off = o * total * inner + offset * inner;
                            dx.extend_from_slice(&g[off..off + c * inner]);
                        }
                        out.push((x, dx));
                    }
                    offset += c;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, c, inner) = kernels::lane_layout(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let mut dx = self.zeros_like(x);
                for o in 0..outer {
                    let dst = o * c * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out.push((x, dx));
            }
            Op::Resize { x, ys, xs } => {
                let s = self.shape(*x);
                let mut dx = self.zeros_like(*x);
                kernels::resize_backward(g, s[0], (s[1], s[2]), ys, xs, &mut dx);
                out.push((*x, dx));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            &Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    out.push((a, g.iter().zip(vb).map(|(&d, &v)| d * v).collect()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().zip(va).map(|(&d, &v)| d * v).collect()));
                }
            }
            &Op::Scale(x, c) => out.push((x, g.iter().map(|&d| d * c).collect())),
            &Op::Relu(x) => {
                let v = self.value(x).data();
                let dx = g
                    .iter()
                    .zip(v)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((x, dx));
            }
            &Op::Gelu(x) => {
                let v = self.value(x).data();
                out.push((x, g.iter().zip(v).map(|(&d, &v)| d * gelu_grad(v)).collect()));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).numel()])),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                out.push((x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                let k = self.shape(*logits)[0];
                let plane = targets.len();
                let scale = g[0] / T::lit(*count as f64);
                let mut dx = vec![T::zero(); probs.len()];
                for (p, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..k {
                            let idx = c * plane + p;
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dx[idx] = (probs[idx] - onehot) * scale;
                        }
                    }
                }
                out.push((*logits, dx));
            }
            Op::Standardize { x, inv_std } => {
                let plane = y.len() / inv_std.len();
                let pf = T::lit(plane as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (c, &r) in inv_std.iter().enumerate() {
                    let range = c * plane..(c + 1) * plane;
                    let (gp, yp) = (&g[range.clone()], &y[range.clone()]);
                    let mg = gp.iter().copied().sum::<T>() / pf;
                    let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / pf;
                    for ((d, &gv), &yv) in dx[range].iter_mut().zip(gp).zip(yp) {
                        *d = r * (gv - mg - yv * mgy);
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}
