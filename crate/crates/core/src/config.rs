//! `key = value` run configuration shared by every subcommand.
//!
//! Blank lines and `#` comments are skipped; unknown keys are rejected. Every
//! error names the offending line. Absent keys take these defaults:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `head` | `structtoken` | `structtoken` or `baseline` |
//! | `variant` | `PWE` | extraction module: `CSE`, `SSE` or `PWE` |
//! | `C` | 32 | feature channels |
//! | `K` | 4 | classes, background included |
//! | `L` | 4 | decoder blocks |
//! | `Hs`, `Ws` | feature size of `height`, `width` | stored token size |
//! | `ffn_ratio` | 4 | FFN expansion |
//! | `ffn_groups` | `depthwise` | `depthwise` or a group count |
//! | `token_norm` | `false` | per-slice standardization before projections |
//! | `weight_init` | `fixed` | conv weights: `fixed` (std 0.02) or `fan_in` (std 1/√fan-in) |
//! | `patch` | 4 | encoder patch size |
//! | `stages` | 2 | encoder ConvBlocks |
//! | `height`, `width` | 32 | synthetic image size |
//! | `train_count`, `val_count` | 512, 64 | synthetic split sizes |
//! | `total_iters` | 2000 | training iterations |
//! | `base_lr` | 1e-3 | peak learning rate |
//! | `poly_power` | 0.9 | learning-rate decay exponent |
//! | `batch_size` | 8 | images per iteration |
//! | `weight_decay` | 0.01 | decoupled weight decay |
//! | `ignore_label` | 255 | label excluded from loss and metrics |
//! | `scales` | `1.0` | comma-separated inference scales |
//! | `flip` | `false` | add mirrored views at inference |
//! | `crop` | none | slide-window size, `N` or `HxW` |
//! | `stride` | ⌈2/3·crop⌉ | slide-window step, `N` or `HxW` |
//! | `train_data`, `val_data` | none | dataset files; generated when absent |
//! | `class_index`, `image_index` | 1, 0 | visualization target |
//! | `seed` | 42 | initialization, data and batch order |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::decoder::{BaselineConfig, DecoderConfig, FfnGroups, Variant};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::InferConfig;
use crate::model::{Head, ModelConfig};
use crate::params::WeightInit;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    StructToken,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub head: HeadKind,
    pub variant: Variant,
    pub channels: usize,
    pub classes: usize,
    pub blocks: usize,
    pub token_size: Option<(usize, usize)>,
    pub ffn_ratio: usize,
    pub ffn_groups: FfnGroups,
    pub token_norm: bool,
    pub weight_init: WeightInit,
    pub patch: usize,
    pub stages: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub total_iters: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub ignore_label: usize,
    pub scales: Vec<f64>,
    pub flip: bool,
    pub crop: Option<(usize, usize)>,
    pub stride: Option<(usize, usize)>,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub class_index: usize,
    pub image_index: usize,
    pub seed: u64,
    /// Line on which each key was set, for cross-key diagnostics.
    lines: HashMap<&'static str, usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        let enc = EncoderConfig::default();
        RunConfig {
            head: HeadKind::StructToken,
            variant: Variant::Pwe,
            channels: enc.channels,
            classes: synth.classes,
            blocks: 4,
            token_size: None,
            ffn_ratio: 4,
            ffn_groups: FfnGroups::Depthwise,
            token_norm: false,
            weight_init: WeightInit::Fixed,
            patch: enc.patch,
            stages: enc.stages,
            height: synth.height,
            width: synth.width,
            train_count: synth.train_count,
            val_count: synth.val_count,
            total_iters: train.total_iters,
            base_lr: train.base_lr,
            poly_power: train.poly_power,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            ignore_label: train.ignore_label,
            scales: vec![1.0],
            flip: false,
            crop: None,
            stride: None,
            train_data: None,
            val_data: None,
            class_index: 1,
            image_index: 0,
            seed: 42,
            lines: HashMap::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "head", "variant", "C", "K", "L", "Hs", "Ws", "ffn_ratio", "ffn_groups", "token_norm", "weight_init",
    "patch",
    "stages", "height", "width", "train_count", "val_count", "total_iters", "base_lr", "poly_power",
    "batch_size", "weight_decay", "ignore_label", "scales", "flip", "crop", "stride", "train_data",
    "val_data", "class_index", "image_index", "seed",
];

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| Error::MalformedValue {
        line,
        key: key.to_owned(),
        detail: format!("`{v}`: {e}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::MalformedValue {
            line,
            key: key.to_owned(),
            detail: format!("`{v}` is not a boolean"),
        }),
    }
}

/// `N` or `HxW`.
fn parse_size(line: usize, key: &str, v: &str) -> Result<(usize, usize)> {
    let (h, w) = match v.split_once(['x', 'X', '×']) {
        Some((h, w)) => (parse(line, key, h.trim())?, parse(line, key, w.trim())?),
        None => {
            let n = parse(line, key, v)?;
            (n, n)
        }
    };
    positive(line, key, h)?;
    positive(line, key, w)?;
    Ok((h, w))
}

fn positive(line: usize, key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::InvalidValue {
            line,
            detail: format!("`{key}` must be ≥ 1"),
        });
    }
    Ok(v)
}

fn size_text((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

impl RunConfig {
    fn line_of(&self, keys: &[&str]) -> usize {
        keys.iter().filter_map(|k| self.lines.get(k)).copied().max().unwrap_or(0)
    }

    fn set(&mut self, line: usize, key: &'static str, v: &str) -> Result<()> {
        match key {
            "head" => {
                self.head = match v.to_ascii_lowercase().as_str() {
                    "structtoken" => HeadKind::StructToken,
                    "baseline" => HeadKind::Baseline,
                    _ => {
                        return Err(Error::MalformedValue {
                            line,
                            key: key.into(),
                            detail: format!("`{v}` is not `structtoken` or `baseline`"),
                        })
                    }
                }
            }
            "variant" => self.variant = parse(line, key, v)?,
            "C" => self.channels = positive(line, key, parse(line, key, v)?)?,
            "K" => {
                self.classes = parse(line, key, v)?;
                if !(2..=255).contains(&self.classes) {
                    return Err(Error::InvalidValue {
                        line,
                        detail: format!("`K` must be in 2..=255, got {}", self.classes),
                    });
                }
            }
            "L" => self.blocks = parse(line, key, v)?,
            "Hs" => {
                let hs = positive(line, key, parse(line, key, v)?)?;
                self.token_size = Some((hs, self.token_size.map_or(hs, |t| t.1)));
            }
            "Ws" => {
                let ws = positive(line, key, parse(line, key, v)?)?;
                self.token_size = Some((self.token_size.map_or(ws, |t| t.0), ws));
            }
            "ffn_ratio" => self.ffn_ratio = positive(line, key, parse(line, key, v)?)?,
            "ffn_groups" => {
                self.ffn_groups = if v.eq_ignore_ascii_case("depthwise") {
                    FfnGroups::Depthwise
                } else {
                    FfnGroups::Fixed(positive(line, key, parse(line, key, v)?)?)
                }
            }
            "token_norm" => self.token_norm = parse_bool(line, key, v)?,
            "weight_init" => self.weight_init = parse(line, key, v)?,
            "patch" => self.patch = positive(line, key, parse(line, key, v)?)?,
            "stages" => self.stages = parse(line, key, v)?,
            "height" => self.height = positive(line, key, parse(line, key, v)?)?,
            "width" => self.width = positive(line, key, parse(line, key, v)?)?,
            "train_count" => self.train_count = parse(line, key, v)?,
            "val_count" => self.val_count = parse(line, key, v)?,
            "total_iters" => self.total_iters = parse(line, key, v)?,
            "base_lr" => {
                self.base_lr = parse(line, key, v)?;
                if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
                    return Err(Error::InvalidValue {
                        line,
                        detail: format!("`base_lr` must be > 0, got {v}"),
                    });
                }
            }
            "poly_power" | "weight_decay" => {
                let x: f64 = parse(line, key, v)?;
                if !(x >= 0.0 && x.is_finite()) {
                    return Err(Error::InvalidValue {
                        line,
                        detail: format!("`{key}` must be ≥ 0, got {v}"),
                    });
                }
                if key == "poly_power" {
                    self.poly_power = x;
                } else {
                    self.weight_decay = x;
                }
            }
            "batch_size" => self.batch_size = positive(line, key, parse(line, key, v)?)?,
            "ignore_label" => self.ignore_label = parse(line, key, v)?,
            "scales" => {
                let scales = v
                    .split(',')
                    .map(|s| parse::<f64>(line, key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(Error::InvalidValue {
                        line,
                        detail: format!("`scales` must be positive numbers, got `{v}`"),
                    });
                }
                self.scales = scales;
            }
            "flip" => self.flip = parse_bool(line, key, v)?,
            "crop" => self.crop = Some(parse_size(line, key, v)?),
            "stride" => self.stride = Some(parse_size(line, key, v)?),
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "val_data" => self.val_data = Some(PathBuf::from(v)),
            "class_index" => self.class_index = parse(line, key, v)?,
            "image_index" => self.image_index = parse(line, key, v)?,
            "seed" => self.seed = parse(line, key, v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        self.lines.insert(key, line);
        Ok(())
    }

    /// Cross-key invariants shared by every use of the configuration.
    pub fn validate(&self) -> Result<()> {
        let err = |keys: &[&str], detail: String| Error::InvalidValue {
            line: self.line_of(keys),
            detail,
        };
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(err(
                &["height", "width", "patch"],
                format!(
                    "image size {}×{} is not divisible by patch {}",
                    self.height, self.width, self.patch
                ),
            ));
        }
        if let FfnGroups::Fixed(g) = self.ffn_groups {
            for n in [self.channels, self.classes] {
                if !(n * self.ffn_ratio).is_multiple_of(g) {
                    return Err(err(
                        &["ffn_groups", "ffn_ratio", "C", "K"],
                        format!("ffn_groups={g} does not divide FFN width {}", n * self.ffn_ratio),
                    ));
                }
            }
        }
        if self.class_index >= self.classes {
            return Err(err(
                &["class_index", "K"],
                format!("class_index {} is outside [0, {})", self.class_index, self.classes),
            ));
        }
        if self.ignore_label < self.classes {
            return Err(err(
                &["ignore_label", "K"],
                format!("ignore_label {} collides with a class index", self.ignore_label),
            ));
        }
        if let Some(crop) = self.crop {
            if crop.0 % self.patch != 0 || crop.1 % self.patch != 0 {
                return Err(err(
                    &["crop", "patch"],
                    format!("crop {crop:?} is not divisible by patch {}", self.patch),
                ));
            }
        }
        if let (Some(crop), Some(stride)) = (self.crop, self.stride) {
            if stride.0 > crop.0 || stride.1 > crop.1 {
                return Err(err(&["stride", "crop"], format!("stride {stride:?} exceeds crop {crop:?}")));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the constraints of a training run.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.head == HeadKind::StructToken && self.blocks == 0 {
            return Err(Error::InvalidValue {
                line: self.line_of(&["L"]),
                detail: "`L` must be ≥ 1 for training".into(),
            });
        }
        if self.total_iters == 0 {
            return Err(Error::InvalidValue {
                line: self.line_of(&["total_iters"]),
                detail: "`total_iters` must be ≥ 1 for training".into(),
            });
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            patch: self.patch,
            channels: self.channels,
            stages: self.stages,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let size = self
            .token_size
            .unwrap_or((self.height / self.patch, self.width / self.patch));
        DecoderConfig {
            ffn_ratio: self.ffn_ratio,
            ffn_groups: self.ffn_groups,
            token_norm: self.token_norm,
            seed: self.seed,
            ..DecoderConfig::new(self.channels, self.classes, self.blocks, self.variant, size)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let head = match self.head {
            HeadKind::StructToken => Head::StructToken(self.decoder_config()),
            HeadKind::Baseline => Head::Baseline(BaselineConfig {
                channels: self.channels,
                classes: self.classes,
            }),
        };
        ModelConfig {
            encoder: self.encoder_config(),
            head,
            seed: self.seed,
            weight_init: self.weight_init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_iters: self.total_iters,
            base_lr: self.base_lr,
            poly_power: self.poly_power,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ignore_label: self.ignore_label,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            classes: self.classes,
            train_count: self.train_count,
            val_count: self.val_count,
            seed: self.seed,
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            scales: self.scales.clone(),
            flip: self.flip,
            crop: self.crop,
            stride: self.stride,
        }
    }

    /// Text form accepted by [`parse_config`], every key written out.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "head",
            match self.head {
                HeadKind::StructToken => "structtoken".into(),
                HeadKind::Baseline => "baseline".into(),
            },
        );
        kv("variant", self.variant.to_string());
        kv("C", self.channels.to_string());
        kv("K", self.classes.to_string());
        kv("L", self.blocks.to_string());
        if let Some((hs, ws)) = self.token_size {
            kv("Hs", hs.to_string());
            kv("Ws", ws.to_string());
        }
        kv("ffn_ratio", self.ffn_ratio.to_string());
        kv(
            "ffn_groups",
            match self.ffn_groups {
                FfnGroups::Depthwise => "depthwise".into(),
                FfnGroups::Fixed(g) => g.to_string(),
            },
        );
        kv("token_norm", self.token_norm.to_string());
        kv("weight_init", self.weight_init.to_string());
        kv("patch", self.patch.to_string());
        kv("stages", self.stages.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("train_count", self.train_count.to_string());
        kv("val_count", self.val_count.to_string());
        kv("total_iters", self.total_iters.to_string());
        kv("base_lr", format!("{:e}", self.base_lr));
        kv("poly_power", self.poly_power.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("ignore_label", self.ignore_label.to_string());
        kv(
            "scales",
            self.scales.iter().map(f64::to_string).collect::<Vec<_>>().join(", "),
        );
        kv("flip", self.flip.to_string());
        if let Some(c) = self.crop {
            kv("crop", size_text(c));
        }
        if let Some(c) = self.stride {
            kv("stride", size_text(c));
        }
        if let Some(p) = &self.train_data {
            kv("train_data", p.display().to_string());
        }
        if let Some(p) = &self.val_data {
            kv("val_data", p.display().to_string());
        }
        kv("class_index", self.class_index.to_string());
        kv("image_index", self.image_index.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Equality of every setting, ignoring where keys were written.
    pub fn same_settings(&self, other: &RunConfig) -> bool {
        let strip = |c: &RunConfig| RunConfig {
            lines: HashMap::new(),
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Parses configuration text and checks the cross-key invariants.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::InvalidValue {
                line,
                detail: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(&key) = KEYS.iter().find(|&&k| k == key) else {
            return Err(Error::UnknownKey {
                line,
                key: key.to_owned(),
            });
        };
        cfg.set(line, key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert!(cfg.same_settings(&RunConfig::default()));
        assert_eq!(cfg.decoder_config().token_size, (8, 8));
        assert_eq!(cfg.variant, Variant::Pwe);
        assert_eq!(cfg.blocks, 4);
        let t = cfg.train_config();
        assert_eq!((t.base_lr, t.poly_power, t.batch_size, t.total_iters), (1e-3, 0.9, 8, 2000));
    }

    #[test]
    fn keys_comments_and_values() {
        let cfg = parse_config(
            "# a run\nvariant = cse   # trailing\n\nK=6\nffn_groups = 4\ncrop = 16x24\nscales = 0.5, 1.0\nflip = on\nHs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Cse);
        assert_eq!(cfg.classes, 6);
        assert_eq!(cfg.ffn_groups, FfnGroups::Fixed(4));
        assert_eq!(cfg.crop, Some((16, 24)));
        assert_eq!(cfg.scales, vec![0.5, 1.0]);
        assert!(cfg.flip);
        assert_eq!(cfg.token_size, Some((3, 3)));
        assert_eq!(parse_config("variant = PWE").unwrap().variant, Variant::Pwe);
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(parse_config("\n\nfoo = 1"), Err(Error::UnknownKey { line: 3, .. })));
        assert!(matches!(
            parse_config("L = 2\nC = many"),
            Err(Error::MalformedValue { line: 2, ref key, .. }) if key == "C"
        ));
        assert!(matches!(parse_config("batch_size = 0"), Err(Error::InvalidValue { line: 1, .. })));
        assert!(matches!(parse_config("just words"), Err(Error::InvalidValue { line: 1, .. })));
        assert!(matches!(
            parse_config("K = 4\npatch = 5"),
            Err(Error::InvalidValue { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("class_index = 9"),
            Err(Error::InvalidValue { line: 1, .. })
        ));
    }

    #[test]
    fn zero_blocks_only_fail_for_training() {
        let cfg = parse_config("L = 0").unwrap();
        assert_eq!(cfg.decoder_config().blocks, 0);
        assert!(matches!(cfg.validate_for_training(), Err(Error::InvalidValue { line: 1, .. })));
        let base = parse_config("L = 0\nhead = baseline").unwrap();
        assert!(base.validate_for_training().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let cfg = parse_config(
            "variant = sse\nffn_groups = 2\ncrop = 16\nstride = 8x4\ntrain_data = /tmp/a.stds\nHs = 4\nWs = 2\nbase_lr = 2e-5\n",
        )
        .unwrap();
        let back = parse_config(&cfg.to_text()).unwrap();
        assert!(back.same_settings(&cfg));
        let d = parse_config(&RunConfig::default().to_text()).unwrap();
        assert!(d.same_settings(&RunConfig::default()));
    }
}
