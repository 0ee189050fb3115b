//! Confusion-matrix mIoU plus slide-window and multi-scale inference.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{bilinear_resize, softmax};
use crate::model::{argmax_classes, Segmenter};
use crate::tensor::{Element, Tensor};

/// Scale factors averaged by the full multi-scale protocol.
pub const MULTI_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// `counts[g·K + p]` = pixels of ground-truth class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one label map. Pixels whose ground truth is `ignore_label` are
    /// skipped; the matrix is unchanged on error.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize], ignore_label: usize) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if p >= k {
                return Err(Error::Invalid(format!("predicted class {p} at pixel {i} is outside [0, {k})")));
            }
            if g != ignore_label && g >= k {
                return Err(Error::Invalid(format!("ground-truth class {g} at pixel {i} is outside [0, {k})")));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore_label {
                self.counts[g * k + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` when the class has zero union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<MiouReport> {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("mIoU of an empty confusion matrix".into()));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, miou })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl fmt::Display for MiouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  IoU")?;
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "{k:>5}  {v:.4}")?,
                None => writeln!(f, "{k:>5}  n/a")?,
            }
        }
        write!(f, "mIoU   {:.4}", self.miou)
    }
}

/// Averages the logits of overlapping `crop` windows. Windows are clipped to
/// the image by shifting them inwards, so every pixel is covered.
pub fn slide_infer<T: Element>(
    model: &Segmenter<T>,
    image: &Tensor<T>,
    crop: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("image must be 3×h×w, got {:?}", image.shape())));
    };
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Invalid("slide stride must be ≥ 1".into()));
    }
    if crop.0 == 0 || crop.1 == 0 || crop.0 > h || crop.1 > w {
        return Err(Error::Invalid(format!(
            "crop {crop:?} must be non-empty and fit inside the {h}×{w} image"
        )));
    }
    let k = model.classes();
    let starts = |len: usize, crop: usize, stride: usize| -> Vec<usize> {
        let n = (len - crop).div_ceil(stride) + 1;
        (0..n).map(|i| (i * stride).min(len - crop)).collect()
    };
    let mut canvas = vec![T::zero(); k * h * w];
    let mut hits = vec![0u32; h * w];
    let src = image.data();
    for &y0 in &starts(h, crop.0, stride.0) {
        for &x0 in &starts(w, crop.1, stride.1) {
            let window = Tensor::from_fn(&[c, crop.0, crop.1], |i| {
                let (ch, rem) = (i / (crop.0 * crop.1), i % (crop.0 * crop.1));
                let (y, x) = (rem / crop.1, rem % crop.1);
                src[ch * h * w + (y0 + y) * w + x0 + x]
            });
            let logits = model.predict_logits(&window)?;
            let l = logits.data();
            for y in 0..crop.0 {
                for x in 0..crop.1 {
                    let p = (y0 + y) * w + x0 + x;
                    hits[p] += 1;
                    for kk in 0..k {
                        canvas[kk * h * w + p] += l[kk * crop.0 * crop.1 + y * crop.1 + x];
                    }
                }
            }
        }
    }
    for (i, v) in canvas.iter_mut().enumerate() {
        *v = *v / T::lit(hits[i % (h * w)] as f64);
    }
    Tensor::new(&[k, h, w], canvas)
}

/// Default slide stride `⌈2/3 · crop⌉` per axis.
pub fn default_stride(crop: (usize, usize)) -> (usize, usize) {
    ((2 * crop.0).div_ceil(3), (2 * crop.1).div_ceil(3))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Inputs larger than this run through [`slide_infer`]; `None` disables
    /// sliding.
    pub crop: Option<(usize, usize)>,
    /// Defaults to [`default_stride`] of the crop.
    pub stride: Option<(usize, usize)>,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            scales: vec![1.0],
            flip: false,
            crop: None,
            stride: None,
        }
    }
}

/// Mirrors the last axis.
fn flip_horizontal<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().expect("rank ≥ 1");
    let d = x.data();
    Tensor::from_fn(x.shape(), |i| d[i - i % w + (w - 1 - i % w)])
}

fn logits_at<T: Element>(model: &Segmenter<T>, image: &Tensor<T>, cfg: &InferConfig) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    match cfg.crop {
        Some(crop) if h > crop.0 || w > crop.1 => {
            let crop = (crop.0.min(h), crop.1.min(w));
            slide_infer(model, image, crop, cfg.stride.unwrap_or_else(|| default_stride(crop)))
        }
        _ => model.predict_logits(image),
    }
}

/// Class probabilities `K×h×w` averaged over resized (and optionally
/// mirrored) copies of `image`.
pub fn multiscale_infer<T: Element>(model: &Segmenter<T>, image: &Tensor<T>, cfg: &InferConfig) -> Result<Tensor<T>> {
    if cfg.scales.is_empty() {
        return Err(Error::Invalid("multi-scale inference needs at least one scale".into()));
    }
    let &[_, h, w] = image.shape() else {
        return Err(Error::shape(format!("image must be 3×h×w, got {:?}", image.shape())));
    };
    let patch = model.config.encoder.patch;
    let snap = |len: usize, s: f64| (((len as f64 * s) / patch as f64).round() as usize).max(1) * patch;
    let k = model.classes();
    let mut acc = vec![T::zero(); k * h * w];
    let mut terms = 0usize;
    for &s in &cfg.scales {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Invalid(format!("scale {s} must be positive")));
        }
        let resized = bilinear_resize(image, snap(h, s), snap(w, s))?;
        let mut views = vec![(resized.clone(), false)];
        if cfg.flip {
            views.push((flip_horizontal(&resized), true));
        }
        for (view, flipped) in views {
            let logits = logits_at(model, &view, cfg)?;
            let mut probs = softmax(&logits, 0)?;
            if flipped {
                probs = flip_horizontal(&probs);
            }
            let probs = bilinear_resize(&probs, h, w)?;
            for (a, &p) in acc.iter_mut().zip(probs.data()) {
                *a += p;
            }
            terms += 1;
        }
    }
    let inv = T::lit(1.0 / terms as f64);
    Tensor::new(&[k, h, w], acc.into_iter().map(|v| v * inv).collect())
}

/// Scores `model` on every sample of `data`.
pub fn evaluate<T: Element>(
    model: &Segmenter<T>,
    data: &Dataset,
    cfg: &InferConfig,
    ignore_label: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.classes());
    for s in &data.samples {
        let probs = multiscale_infer(model, &s.image.cast(), cfg)?;
        cm.accumulate(&argmax_classes(&probs), &s.mask_usize(), ignore_label)?;
    }
    Ok(cm)
}
