//! Closed-form FLOPs, parameter and receptive-field accounting.
//!
//! Block counts follow the closed forms for window attention: they count
//! multiply-accumulates of the linear layers and of the two attention
//! products, and leave out softmax, normalization and bias additions.
//! Convolutions are reported separately at 2 FLOPs per multiply-accumulate.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::arch::{ArchConfig, Task, MLP_RATIO, MSG_SEED_GRID};
use crate::error::{config_err, Error, Result};

pub type Rational = Ratio<i128>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexitySpec {
    pub height: u64,
    pub width: u64,
    pub window: u64,
    pub channels: u64,
    pub with_msg: bool,
}

impl ComplexitySpec {
    pub fn new(height: u64, width: u64, window: u64, channels: u64, with_msg: bool) -> Self {
        Self { height, width, window, channels, with_msg }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.window == 0 || self.channels == 0 {
            return Err(config_err!("all extents must be positive: {self:?}"));
        }
        let area = self.height * self.width;
        if !area.is_multiple_of(self.window * self.window) {
            return Err(config_err!(
                "grid {}×{} is not divisible into {}×{} windows",
                self.height,
                self.width,
                self.window,
                self.window
            ));
        }
        Ok(())
    }

    pub fn windows(&self) -> u64 {
        self.height * self.width / (self.window * self.window)
    }

    /// Tokens per window.
    pub fn seq_len(&self) -> u64 {
        self.window * self.window + u64::from(self.with_msg)
    }
}

/// Per-block count: `nW·(4NC² + 2N²C) + 2·nW·N·4C²` with `N = w²` or `w²+1`.
pub fn flops_block(spec: &ComplexitySpec) -> Result<u64> {
    spec.validate()?;
    let (nw, n, c) = (spec.windows(), spec.seq_len(), spec.channels);
    let attn = 4 * n * c * c + 2 * n * n * c;
    let mlp = 2 * n * MLP_RATIO as u64 * c * c;
    Ok(nw * attn + nw * mlp)
}

/// Relative FLOPs increase from messengers as the closed form states it:
/// `(6C + w² + 1) / (6w²C + w⁴)`.
pub fn flops_ratio(w: u64, c: u64) -> Rational {
    let (w, c) = (i128::from(w), i128::from(c));
    Ratio::new(6 * c + w * w + 1, 6 * w * w * c + w.pow(4))
}

/// Exact `(with − without) / without` from the two block counts:
/// `(6C + 2w² + 1) / (6w²C + w⁴)`.
pub fn flops_ratio_exact(w: u64, c: u64) -> Rational {
    let (w, c) = (i128::from(w), i128::from(c));
    Ratio::new(6 * c + 2 * w * w + 1, 6 * w * w * c + w.pow(4))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    MsgShuffle,
    SwinShift,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msg_shuffle" | "msg-shuffle" => Ok(Scheme::MsgShuffle),
            "swin_shift" | "swin-shift" => Ok(Scheme::SwinShift),
            other => Err(config_err!("unknown receptive-field scheme {other:?}")),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::MsgShuffle => "msg_shuffle",
            Scheme::SwinShift => "swin_shift",
        })
    }
}

/// Receptive-field area in patches after two attention computations.
///
/// Shifted windows reach `(3w/2)²`; messenger shuffle over an `S×S` region reaches `(S·w)²`.
/// `s` is ignored for the shifted scheme.
pub fn receptive_field(scheme: Scheme, w: u64, s: u64) -> Result<Rational> {
    if w == 0 {
        return Err(config_err!("window size must be positive"));
    }
    let w = i128::from(w);
    Ok(match scheme {
        Scheme::SwinShift => {
            let side = Ratio::new(3 * w, 2);
            side * side
        }
        Scheme::MsgShuffle => {
            if s == 0 {
                return Err(config_err!("shuffle size must be at least 1"));
            }
            let side = i128::from(s) * w;
            Ratio::from_integer(side * side)
        }
    })
}

pub fn conv_flops(kernel: u64, c_in: u64, c_out: u64, out_h: u64, out_w: u64) -> u64 {
    2 * kernel * kernel * c_in * c_out * out_h * out_w
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageFlops {
    /// Padded patch grid the blocks run on.
    pub grid: (u64, u64),
    pub channels: u64,
    pub blocks: u64,
    /// Block closed form summed over the stage.
    pub blocks_raw: u64,
    /// Merge convolution into the next stage, patch plus messenger grids.
    pub merge_conv: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFlops {
    pub stages: Vec<StageFlops>,
    pub patch_embed_conv: u64,
    /// Classifier linear layer, in multiply-accumulates.
    pub head_macs: u64,
}

impl ModelFlops {
    /// Block closed forms only.
    pub fn raw_total(&self) -> u64 {
        self.stages.iter().map(|s| s.blocks_raw).sum()
    }

    /// Block closed forms plus every convolution and the classifier.
    pub fn conv_inclusive_total(&self) -> u64 {
        self.raw_total()
            + self.patch_embed_conv
            + self.stages.iter().map(|s| s.merge_conv).sum::<u64>()
            + 2 * self.head_macs
    }
}

pub fn model_flops(cfg: &ArchConfig) -> Result<ModelFlops> {
    cfg.validate()?;
    let (h, w) = cfg.input_size;
    let res = cfg.stage_resolutions(h, w);
    let grids = cfg.window_grids(h, w);
    let u = |v: usize| v as u64;
    let pk = u(cfg.patch_kernel);
    let c1 = u(cfg.stages[0].dim);
    let patch_embed_conv = conv_flops(pk, u(cfg.in_channels), c1, u(res[0].0), u(res[0].1));
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (i, st) in cfg.stages.iter().enumerate() {
        let ws = u(st.window_size);
        let grid = (u(grids[i].0) * ws, u(grids[i].1) * ws);
        let spec = ComplexitySpec::new(grid.0, grid.1, ws, u(st.dim), cfg.use_msg);
        let blocks_raw = u(st.num_blocks) * flops_block(&spec)?;
        let merge_conv = match cfg.stages.get(i + 1) {
            Some(next) => {
                let mk = u(cfg.merge_kernel);
                let out = |n: u64| (n + 2 * u(cfg.merge_padding())).saturating_sub(mk) / u(cfg.merge_stride) + 1;
                let (oh, ow) = res[i + 1];
                let mut f = conv_flops(mk, u(st.dim), u(next.dim), u(oh), u(ow));
                if cfg.use_msg {
                    let (gh, gw) = grids[i];
                    f += conv_flops(mk, u(st.dim), u(next.dim), out(u(gh)), out(u(gw)));
                }
                f
            }
            None => 0,
        };
        stages.push(StageFlops { grid, channels: u(st.dim), blocks: u(st.num_blocks), blocks_raw, merge_conv });
    }
    let head_macs = match cfg.task {
        Task::Classification => u(cfg.stages[3].dim) * u(cfg.num_classes),
        Task::DetectionBackbone => 0,
    };
    Ok(ModelFlops { stages, patch_embed_conv, head_macs })
}

/// Learned messenger seed parameters: a `4×4` grid of first-stage tokens.
pub fn msg_init_params(c1: u64) -> u64 {
    (MSG_SEED_GRID * MSG_SEED_GRID) as u64 * c1
}

pub fn ratio_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
