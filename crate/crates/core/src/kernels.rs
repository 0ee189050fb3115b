//! Raw numeric kernels shared by the autograd graph and graph-free inference.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Grouping, stride and zero padding of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(groups: usize, kernel: usize) -> Self {
        ConvSpec {
            groups,
            stride: 1,
            padding: kernel / 2,
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], spec: ConvSpec) -> Result<Self> {
        let (batch, cin, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d input must be C×H×W or B×C×H×W, got {input:?}"
                )))
            }
        };
        let [cout, cin_g, kh, kw] = *weight else {
            return Err(Error::shape(format!(
                "conv2d weight must be Cout×(Cin/g)×kh×kw, got {weight:?}"
            )));
        };
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::config(format!(
                "conv2d groups={g} must divide Cin={cin} and Cout={cout}"
            )));
        }
        if spec.stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if cin / g != cin_g {
            return Err(Error::shape(format!(
                "conv2d weight {weight:?} expects {} input channels per group, input {input:?} with groups={g} has {}",
                cin_g,
                cin / g
            )));
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            )));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            out_h: (ph - kh) / spec.stride + 1,
            out_w: (pw - kw) / spec.stride + 1,
            spec,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.cout, self.out_h, self.out_w]
        } else {
            vec![self.cout, self.out_h, self.out_w]
        }
    }

    /// Multiply-accumulate count of the forward pass (bias adds excluded).
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.out_h * self.out_w * self.cin_g() * self.kh * self.kw) as u64
    }
}

fn im2col<T: Element>(src: &[T], g: &ConvGeom, c0: usize, col: &mut [T]) {
    let p = g.out_h * g.out_w;
    let (s, pad) = (g.spec.stride as isize, g.spec.padding as isize);
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &src[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, c0: usize, dst: &mut [T]) {
    let p = g.out_h * g.out_w;
    let (s, pad) = (g.spec.stride as isize, g.spec.padding as isize);
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &mut dst[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Grouped cross-correlation with zero padding.
pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let r = cin_g * g.kh * g.kw;
    let mut col = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); r * p]
    };
    for b in 0..g.batch {
        let src = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if g.is_depthwise() {
            depthwise_forward(g, src, weight, dst);
        } else {
            for grp in 0..g.spec.groups {
                let w_g = &weight[grp * cout_g * r..(grp + 1) * cout_g * r];
                let o_g = &mut dst[grp * cout_g * p..(grp + 1) * cout_g * p];
                if g.is_pointwise() {
                    let x_g = &src[grp * cin_g * p..(grp + 1) * cin_g * p];
                    T::gemm(cout_g, r, p, w_g, (r, 1), x_g, (p, 1), o_g, false);
                } else {
                    im2col(src, g, grp * cin_g, &mut col);
                    T::gemm(cout_g, r, p, w_g, (r, 1), &col, (p, 1), o_g, false);
                }
            }
        }
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(p).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn depthwise_forward<T: Element>(g: &ConvGeom, src: &[T], weight: &[T], dst: &mut [T]) {
    let (s, pad) = (g.spec.stride as isize, g.spec.padding as isize);
    let kk = g.kh * g.kw;
    for c in 0..g.cin {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        let k = &weight[c * kk..(c + 1) * kk];
        let o = &mut dst[c * g.out_h * g.out_w..(c + 1) * g.out_h * g.out_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for ky in 0..g.kh {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            acc += k[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                o[oy * g.out_w + ox] = acc;
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
/// Each output buffer is filled only when requested.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    mut d_input: Option<&mut [T]>,
    mut d_weight: Option<&mut [T]>,
    d_bias: Option<&mut [T]>,
) {
    let p = g.out_h * g.out_w;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let r = cin_g * g.kh * g.kw;
    if let Some(db) = d_bias {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let off = (b * g.cout + co) * p;
                db[co] += d_out[off..off + p].iter().copied().sum::<T>();
            }
        }
    }
    if d_input.is_none() && d_weight.is_none() {
        return;
    }
    let mut col = vec![T::zero(); if g.is_depthwise() { 0 } else { r * p }];
    for b in 0..g.batch {
        let src = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let dy = &d_out[b * g.cout * p..(b + 1) * g.cout * p];
        if g.is_depthwise() {
            let dx = d_input
                .as_deref_mut()
                .map(|d| &mut d[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w]);
            depthwise_backward(g, src, weight, dy, dx, d_weight.as_deref_mut());
            continue;
        }
        for grp in 0..g.spec.groups {
            let dy_g = &dy[grp * cout_g * p..(grp + 1) * cout_g * p];
            let w_g = &weight[grp * cout_g * r..(grp + 1) * cout_g * r];
            if let Some(dw) = d_weight.as_deref_mut() {
                let dw_g = &mut dw[grp * cout_g * r..(grp + 1) * cout_g * r];
                if g.is_pointwise() {
                    let x_g = &src[grp * cin_g * p..(grp + 1) * cin_g * p];
                    T::gemm(cout_g, p, r, dy_g, (p, 1), x_g, (1, p), dw_g, true);
                } else {
                    im2col(src, g, grp * cin_g, &mut col);
                    T::gemm(cout_g, p, r, dy_g, (p, 1), &col, (1, p), dw_g, true);
                }
            }
            if let Some(dx) = d_input.as_deref_mut() {
                let dx_b = &mut dx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
                if g.is_pointwise() {
                    let dx_g = &mut dx_b[grp * cin_g * p..(grp + 1) * cin_g * p];
                    T::gemm(r, cout_g, p, w_g, (1, r), dy_g, (p, 1), dx_g, true);
                } else {
                    T::gemm(r, cout_g, p, w_g, (1, r), dy_g, (p, 1), &mut col, false);
                    col2im(&col, g, grp * cin_g, dx_b);
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    g: &ConvGeom,
    src: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (s, pad) = (g.spec.stride as isize, g.spec.padding as isize);
    let kk = g.kh * g.kw;
    for c in 0..g.cin {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        let k = &weight[c * kk..(c + 1) * kk];
        let d = &dy[c * g.out_h * g.out_w..(c + 1) * g.out_h * g.out_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gy = d[oy * g.out_w + ox];
                if gy == T::zero() {
                    continue;
                }
                for ky in 0..g.kh {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = iy as usize * g.w + ix as usize;
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[c * kk + ky * g.kw + kx] += gy * plane[idx];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * g.h * g.w + idx] += gy * k[ky * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps of a half-pixel bilinear resize along one axis.
#[derive(Clone, Debug)]
pub(crate) struct ResizeAxis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl ResizeAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut axis = ResizeAxis {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = if lo + 1 < input { lo + 1 } else { lo };
            axis.lo.push(lo);
            axis.hi.push(hi);
            axis.frac.push(src - lo as f64);
        }
        axis
    }
}

/// Bilinear resize of every plane of an `N×H×W` buffer.
pub(crate) fn resize_forward<T: Element>(
    x: &[T],
    n: usize,
    (h, w): (usize, usize),
    ys: &ResizeAxis,
    xs: &ResizeAxis,
) -> Vec<T> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut out = vec![T::zero(); n * oh * ow];
    for c in 0..n {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], T::lit(ys.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], T::lit(xs.frac[ox]));
                // lerp form: constant inputs are reproduced exactly
                let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                let top = a + (b - a) * fx;
                let (a, b) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                let bot = a + (b - a) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Element>(
    dy: &[T],
    n: usize,
    (h, w): (usize, usize),
    ys: &ResizeAxis,
    xs: &ResizeAxis,
    dx: &mut [T],
) {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    for c in 0..n {
        let src = &dy[c * oh * ow..(c + 1) * oh * ow];
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], T::lit(ys.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], T::lit(xs.frac[ox]));
                let gv = src[oy * ow + ox];
                let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                plane[y0 * w + x0] += gt * (T::one() - fx);
                plane[y0 * w + x1] += gt * fx;
                plane[y1 * w + x0] += gb * (T::one() - fx);
                plane[y1 * w + x1] += gb * fx;
            }
        }
    }
}

/// Bilinear (half-pixel, `align_corners = false`) resize of an `N×H×W` tensor.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[n, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "bilinear_resize expects N×H×W, got {:?}",
            x.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize output size must be ≥ 1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (ys, xs) = (ResizeAxis::new(h, out_h), ResizeAxis::new(w, out_w));
    Tensor::new(
        &[n, out_h, out_w],
        resize_forward(x.data(), n, (h, w), &ys, &xs),
    )
}

/// `(outer, len, inner)` strides of a lane along `axis`.
pub(crate) fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = lane_layout(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                y[base + j * inner] = y[base + j * inner] / sum;
            }
        }
    }
    y
}

/// Softmax along `axis` of a tensor (graph-free).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    Tensor::new(x.shape(), softmax_forward(x.data(), x.shape(), axis))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        (cin, h, w): (usize, usize, usize),
        wt: &[f64],
        (cout, kh, kw): (usize, usize, usize),
        spec: ConvSpec,
    ) -> Vec<f64> {
        let cin_g = cin / spec.groups;
        let cout_g = cout / spec.groups;
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let c = grp * cin_g + ci;
                                acc += wt[((co * cin_g + ci) * kh + ky) * kw + kx]
                                    * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_paths_agree_with_direct_loops() {
        let cases = [
            (4, 5, 6, 4, 3, ConvSpec::same(1, 3)),
            (4, 5, 6, 8, 3, ConvSpec::same(2, 3)),
            (4, 5, 6, 4, 3, ConvSpec::same(4, 3)),
            (4, 5, 6, 6, 1, ConvSpec::same(1, 1)),
            (
                3,
                8,
                8,
                5,
                4,
                ConvSpec {
                    groups: 1,
                    stride: 4,
                    padding: 0,
                },
            ),
        ];
        for (cin, h, w, cout, k, spec) in cases {
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let wt: Vec<f64> = (0..cout * (cin / spec.groups) * k * k)
                .map(|i| ((i * 5) % 7) as f64 - 3.0)
                .collect();
            let g = ConvGeom::new(&[cin, h, w], &[cout, cin / spec.groups, k, k], spec).unwrap();
            let fast = conv2d_forward(&g, &x, &wt, None);
            let slow = naive_conv(&x, (cin, h, w), &wt, (cout, k, k), spec);
            assert_eq!(fast, slow, "case cin={cin} cout={cout} k={k} {spec:?}");
        }
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let g = ConvGeom::new(&[1, 4, 4], &[1, 1, 3, 3], ConvSpec::same(1, 3)).unwrap();
        let out = conv2d_forward(&g, &[1.0f64; 16], &[1.0; 9], None);
        #[rustfmt::skip]
        let expect = [4.0, 6.0, 6.0, 4.0,
                      6.0, 9.0, 9.0, 6.0,
                      6.0, 9.0, 9.0, 6.0,
                      4.0, 6.0, 6.0, 4.0];
        assert_eq!(out, expect);
    }

    #[test]
    fn group_divisibility_is_a_config_error() {
        let err = ConvGeom::new(&[6, 4, 4], &[4, 2, 3, 3], ConvSpec::same(4, 3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn resize_identity_and_constants() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 5], |i| i as f64);
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 3, 3], 2.5);
        let up = bilinear_resize(&c, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let one = Tensor::<f64>::full(&[1, 1, 1], -1.25);
        let up = bilinear_resize(&one, 4, 6).unwrap();
        assert!(up.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn resize_doubling_matches_half_pixel_taps() {
        // 2 → 4: taps at src = -0.25 (clamped 0), 0.25, 0.75, 1.25 (hi clamped)
        let x = Tensor::<f64>::new(&[1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
