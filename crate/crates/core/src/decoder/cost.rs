//! Analytic multiply-accumulate and parameter counts.
//!
//! Counts cover convolutions and matrix products; one MAC is two FLOPs. Bias
//! additions, activations, softmax and interpolation are not counted.

use std::fmt::Write as _;

use super::{BaselineConfig, DecoderConfig, Variant, BASELINE_RES_BLOCKS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCost {
    pub name: &'static str,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub components: Vec<ComponentCost>,
}

impl CostReport {
    pub fn macs(&self) -> u64 {
        self.components.iter().map(|c| c.macs).sum()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    pub fn params(&self) -> u64 {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCost> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self, title: &str) -> String {
        let mut s = format!("{title}\n{:<14} {:>16} {:>12}\n", "component", "FLOPs", "params");
        for c in &self.components {
            let _ = writeln!(s, "{:<14} {:>16} {:>12}", c.name, 2 * c.macs, c.params);
        }
        let _ = writeln!(s, "{:<14} {:>16} {:>12}", "total", self.flops(), self.params());
        s
    }
}

#[derive(Default, Clone, Copy)]
struct Count {
    macs: u64,
    params: u64,
}

impl std::ops::AddAssign for Count {
    fn add_assign(&mut self, o: Count) {
        self.macs += o.macs;
        self.params += o.params;
    }
}

fn conv(cin_per_group: u64, cout: u64, kernel: u64, hw: u64) -> Count {
    let weights = cout * cin_per_group * kernel * kernel;
    Count {
        macs: weights * hw,
        params: weights + cout,
    }
}

fn projection(n: u64, hw: u64) -> Count {
    let mut c = conv(n, n, 1, hw);
    c += conv(1, n, 3, hw);
    c += conv(n, n, 1, hw);
    c
}

fn ffn(n: u64, cfg: &DecoderConfig, hw: u64) -> Count {
    let hidden = n * cfg.ffn_ratio as u64;
    let groups = cfg.ffn_groups.groups(hidden as usize) as u64;
    let mut c = conv(n, hidden, 1, hw);
    c += conv(hidden / groups, hidden, 3, hw);
    c += conv(hidden, n, 1, hw);
    c
}

fn convblock(n: u64, hw: u64) -> Count {
    let mut c = conv(n, n, 3, hw);
    c += conv(n, n, 3, hw);
    c
}

fn extraction(cfg: &DecoderConfig, hw: u64) -> Count {
    let (c, k) = (cfg.channels as u64, cfg.classes as u64);
    let n = c + k;
    match cfg.variant {
        Variant::Cse => {
            let mut t = projection(k, hw);
            t += projection(c, hw);
            t += projection(c, hw);
            // Q·Kᵀ (K×HW · HW×C) and A·V (K×C · C×HW)
            t += Count {
                macs: 2 * k * c * hw,
                params: 0,
            };
            t
        }
        Variant::Sse => {
            let mut t = Count::default();
            for _ in 0..3 {
                t += projection(n, hw);
            }
            t += Count {
                macs: 2 * n * n * hw,
                params: 0,
            };
            t
        }
        Variant::Pwe => {
            let mut t = projection(n, hw);
            t += conv(n, n, 1, hw);
            t
        }
    }
}

/// Cost of a decoder pass on an `H×W` feature map.
pub fn estimate_cost(cfg: &DecoderConfig, h: usize, w: usize) -> CostReport {
    let hw = (h * w) as u64;
    let (c, k) = (cfg.channels as u64, cfg.classes as u64);
    let (mut ext, mut ffn_s, mut ffn_f) = (Count::default(), Count::default(), Count::default());
    for i in 0..cfg.blocks {
        ext += extraction(cfg, hw);
        ffn_s += ffn(k, cfg, hw);
        if i + 1 < cfg.blocks {
            ffn_f += ffn(c, cfg, hw);
        }
    }
    let head = convblock(k, hw);
    let tokens = Count {
        macs: 0,
        params: k * (cfg.token_size.0 * cfg.token_size.1) as u64,
    };
    let mk = |name, c: Count| ComponentCost {
        name,
        macs: c.macs,
        params: c.params,
    };
    CostReport {
        components: vec![
            mk("tokens", tokens),
            mk("extraction", ext),
            mk("ffn_tokens", ffn_s),
            mk("ffn_features", ffn_f),
            mk("head", head),
        ],
    }
}

/// Cost of the per-pixel baseline head on an `H×W` feature map.
pub fn estimate_baseline_cost(cfg: &BaselineConfig, h: usize, w: usize) -> CostReport {
    let hw = (h * w) as u64;
    let (c, k) = (cfg.channels as u64, cfg.classes as u64);
    let mut res = Count::default();
    for _ in 0..BASELINE_RES_BLOCKS {
        res += convblock(k, hw);
    }
    let proj_in = conv(c, k, 1, hw);
    let proj_out = conv(k, k, 1, hw);
    CostReport {
        components: vec![
            ComponentCost {
                name: "proj_in",
                macs: proj_in.macs,
                params: proj_in.params,
            },
            ComponentCost {
                name: "res_blocks",
                macs: res.macs,
                params: res.params,
            },
            ComponentCost {
                name: "proj_out",
                macs: proj_out.macs,
                params: proj_out.params,
            },
        ],
    }
}
