//! Synthetic "shapes world" segmentation data and its `STDS` file format.
//!
//! Every sample is a pure function of `(seed, split, index)`: a noisy flat
//! background (class 0) with one to three non-overlapping filled shapes. Class
//! `k ≥ 1` always draws the same kind of shape (circle, rectangle, upright
//! triangle, cycling), so classes differ by structure and not by colour.

use std::path::Path;

use rand::Rng;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub const BACKGROUND_NOISE: f32 = 0.05;
const MAGIC: [u8; 4] = *b"STDS";
const VERSION: u32 = 1;
/// Validation indices live in a separate stream from training indices.
const VAL_STREAM: u64 = 1 << 40;
/// Minimum mean per-channel distance between a fill colour and the background.
const MIN_CONTRAST: f32 = 0.25;
/// Empty margin kept around every shape.
const GAP: f32 = 1.0;
const PLACEMENT_TRIES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Classes including background; at least 2.
    pub classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            classes: 4,
            train_count: 512,
            val_count: 64,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::config(format!("classes must be in 2..=255, got {}", self.classes)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(format!(
                "images must be at least 8×8, got {}×{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A filled region in continuous pixel coordinates; pixel `(x, y)` is sampled
/// at its centre `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Circle { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    /// Apex at `(cx, top)`, horizontal base of half-width `half` at `bottom`.
    Triangle { cx: f32, top: f32, bottom: f32, half: f32 },
}

impl Shape {
    pub fn contains(&self, px: f32, py: f32) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px <= x1 && py >= y0 && py <= y1,
            Shape::Triangle { cx, top, bottom, half } => {
                if py < top || py > bottom {
                    return false;
                }
                let t = (py - top) / (bottom - top);
                (px - cx).abs() <= t * half
            }
        }
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f32, f32, f32, f32) {
        match *self {
            Shape::Circle { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Triangle { cx, top, bottom, half } => (cx - half, top, cx + half, bottom),
        }
    }

    /// Kind drawn for foreground class `class ≥ 1`, centred at the origin.
    fn random_for_class(class: usize, scale: f32, rng: &mut SplitMix64) -> Shape {
        match (class - 1) % 3 {
            0 => Shape::Circle {
                cx: 0.0,
                cy: 0.0,
                r: rng.random_range(4.5..8.0) * scale,
            },
            1 => {
                // elongated so that structure, not area, separates it from a circle
                let short = rng.random_range(3.0..5.0) * scale;
                let long = short * rng.random_range(1.8..2.6);
                let (hw, hh) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
                Shape::Rect {
                    x0: -hw,
                    y0: -hh,
                    x1: hw,
                    y1: hh,
                }
            }
            _ => {
                let height = rng.random_range(10.0..16.0) * scale;
                Shape::Triangle {
                    cx: 0.0,
                    top: -height / 2.0,
                    bottom: height / 2.0,
                    half: rng.random_range(0.5..0.8) * height,
                }
            }
        }
    }

    fn shifted(&self, dx: f32, dy: f32) -> Shape {
        match *self {
            Shape::Circle { cx, cy, r } => Shape::Circle {
                cx: cx + dx,
                cy: cy + dy,
                r,
            },
            Shape::Rect { x0, y0, x1, y1 } => Shape::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
            Shape::Triangle { cx, top, bottom, half } => Shape::Triangle {
                cx: cx + dx,
                top: top + dy,
                bottom: bottom + dy,
                half,
            },
        }
    }
}

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×h×w`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `h×w` class indices, row-major.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask_usize(&self) -> Vec<usize> {
        self.mask.iter().map(|&m| m as usize).collect()
    }
}

/// Paints `shape` with `color` into `image` and `class` into `mask`.
pub fn paint(image: &mut Tensor<f32>, mask: &mut [u8], shape: &Shape, class: u8, color: [f32; 3]) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data_mut();
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                let i = y * w + x;
                mask[i] = class;
                for (c, &v) in color.iter().enumerate() {
                    data[c * h * w + i] = v;
                }
            }
        }
    }
}

fn random_color(rng: &mut SplitMix64) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Deterministic sample `index` of `split`.
pub fn generate_sample(cfg: &SynthConfig, split: Split, index: usize) -> Sample {
    let stream = match split {
        Split::Train => index as u64,
        Split::Val => VAL_STREAM + index as u64,
    };
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, stream));
    let (h, w) = (cfg.height, cfg.width);

    let bg = random_color(&mut rng);
    let mut image = Tensor::from_fn(&[3, h, w], |i| bg[i / (h * w)]);
    let mut mask = vec![0u8; h * w];

    let n_shapes = rng.random_range(1..=3);
    let scale = h.min(w) as f32 / 32.0;
    let mut placed: Vec<(f32, f32, f32, f32)> = Vec::new();
    for _ in 0..n_shapes {
        let class = rng.random_range(1..cfg.classes);
        let template = Shape::random_for_class(class, scale, &mut rng);
        let color = loop {
            let c = random_color(&mut rng);
            let diff = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
            if diff >= MIN_CONTRAST {
                break c;
            }
        };
        // rejection placement: fully inside the image, apart from earlier shapes
        let (bx0, by0, bx1, by1) = template.bounds();
        let (lo_x, hi_x) = (1.0 - bx0, w as f32 - 1.0 - bx1);
        let (lo_y, hi_y) = (1.0 - by0, h as f32 - 1.0 - by1);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        for _ in 0..PLACEMENT_TRIES {
            let (dx, dy) = (rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y));
            let b = (bx0 + dx - GAP, by0 + dy - GAP, bx1 + dx + GAP, by1 + dy + GAP);
            let clear = placed
                .iter()
                .all(|p| b.2 <= p.0 || p.2 <= b.0 || b.3 <= p.1 || p.3 <= b.1);
            if clear {
                placed.push(b);
                paint(&mut image, &mut mask, &template.shifted(dx, dy), class as u8, color);
                break;
            }
        }
    }
    let plane = h * w;
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        if mask[i % plane] == 0 {
            let noise = rng.random_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
            *v = (*v + noise).clamp(0.0, 1.0);
        }
    }
    Sample { image, mask }
}

/// A set of equally sized samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig, split: Split) -> Result<Self> {
        cfg.validate()?;
        let count = match split {
            Split::Train => cfg.train_count,
            Split::Val => cfg.val_count,
        };
        Ok(Dataset {
            height: cfg.height,
            width: cfg.width,
            classes: cfg.classes,
            samples: (0..count).map(|i| generate_sample(cfg, split, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(24 + self.samples.len() * plane * 13);
        out.extend_from_slice(&MAGIC);
        binio::put_u32(&mut out, VERSION);
        binio::put_u32(&mut out, binio::to_u32(self.height, "height")?);
        binio::put_u32(&mut out, binio::to_u32(self.width, "width")?);
        binio::put_u32(&mut out, binio::to_u32(self.classes, "classes")?);
        binio::put_u32(&mut out, binio::to_u32(self.samples.len(), "count")?);
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != [3, self.height, self.width] || s.mask.len() != plane {
                return Err(Error::shape(format!(
                    "sample {i} is {:?}, dataset is 3×{}×{}",
                    s.image.shape(),
                    self.height,
                    self.width
                )));
            }
            binio::put_f32s(&mut out, s.image.data());
            out.extend_from_slice(&s.mask);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let classes = r.u32("classes")? as usize;
        let count = r.u32("count")? as usize;
        let plane = height * width;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let data = r.f32s(3 * plane, &format!("sample {i} image"))?;
            let mask = r.bytes(plane, &format!("sample {i} mask"))?.to_vec();
            if let Some(&bad) = mask.iter().find(|&&m| m as usize >= classes) {
                return Err(Error::Invalid(format!(
                    "sample {i} mask holds class {bad}, dataset has {classes}"
                )));
            }
            samples.push(Sample {
                image: Tensor::new(&[3, height, width], data)?,
                mask,
            });
        }
        r.finish()?;
        Ok(Dataset {
            height,
            width,
            classes,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}
