//! Architecture presets, parameter construction and the full forward pass.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{
    block_forward, AttentionParams, BlockParams, ForwardCtx, LayerNormParams, Manipulation, MlpParams, MsgTokens,
    RelPosBias, LAYER_NORM_EPS,
};
use crate::error::{config_err, dim_err, Error, Result};
use crate::init::trunc_normal;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::window::{
    crop, group_regions, merge_tokens, pad_to_window_multiple, partition_windows, resize_grid, reverse_windows,
    Anchor, FeatureMap, MapDims,
};

/// Side length of the learned messenger seed grid tiled over the first stage.
pub const MSG_SEED_GRID: usize = 4;
pub const MLP_RATIO: usize = 4;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification,
    DetectionBackbone,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Classification),
            "det" => Ok(Task::DetectionBackbone),
            other => Err(config_err!("unknown task {other:?} (expected cls or det)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub shuffle_size: usize,
    pub window_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub name: String,
    pub stages: Vec<StageConfig>,
    /// Input image `(height, width)`.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub merge_kernel: usize,
    pub merge_stride: usize,
    pub num_classes: usize,
    pub task: Task,
    /// Without messengers every window attends over its `w²` patch tokens only.
    pub use_msg: bool,
    pub manipulation: Manipulation,
    pub drop_path: f64,
}

struct Variant {
    dims: [usize; 4],
    heads: [usize; 4],
    blocks: [usize; 4],
}

const CLS_SHUFFLE: [usize; 4] = [4, 4, 2, 1];
const DET_SHUFFLE: [usize; 4] = [4, 4, 8, 4];

impl ArchConfig {
    fn from_parts(name: &str, v: Variant, shuffle: [usize; 4], window: usize, input: usize, num_classes: usize) -> Self {
        let stages = (0..4)
            .map(|i| StageConfig {
                dim: v.dims[i],
                num_heads: v.heads[i],
                num_blocks: v.blocks[i],
                shuffle_size: shuffle[i],
                window_size: window,
            })
            .collect();
        Self {
            name: name.to_string(),
            stages,
            input_size: (input, input),
            in_channels: 3,
            patch_kernel: 7,
            patch_stride: 4,
            merge_kernel: 3,
            merge_stride: 2,
            num_classes,
            task: Task::Classification,
            use_msg: true,
            manipulation: Manipulation::Shuffle,
            drop_path: 0.0,
        }
    }

    pub fn msg_t(num_classes: usize) -> Self {
        let v = Variant { dims: [64, 128, 256, 512], heads: [2, 4, 8, 16], blocks: [2, 4, 12, 4] };
        Self::from_parts("msg-t", v, CLS_SHUFFLE, 7, 224, num_classes)
    }

    pub fn msg_s(num_classes: usize) -> Self {
        let v = Variant { dims: [96, 192, 384, 768], heads: [3, 6, 12, 24], blocks: [2, 4, 12, 4] };
        Self::from_parts("msg-s", v, CLS_SHUFFLE, 7, 224, num_classes)
    }

    pub fn msg_b(num_classes: usize) -> Self {
        let v = Variant { dims: [96, 192, 384, 768], heads: [3, 6, 12, 24], blocks: [2, 4, 28, 4] };
        Self::from_parts("msg-b", v, CLS_SHUFFLE, 7, 224, num_classes)
    }

    /// Desk-scale configuration: 128×128 input, window 4, one window at stage 4.
    pub fn micro(num_classes: usize) -> Self {
        let v = Variant { dims: [16, 32, 64, 128], heads: [1, 2, 4, 8], blocks: [1, 1, 2, 1] };
        Self::from_parts("micro", v, [2, 2, 2, 1], 4, 128, num_classes)
    }

    /// Smallest useful configuration: 64×64 input, window 2.
    pub fn nano(num_classes: usize) -> Self {
        let v = Variant { dims: [8, 16, 32, 64], heads: [1, 1, 2, 2], blocks: [1, 1, 1, 1] };
        Self::from_parts("nano", v, [2, 2, 2, 1], 2, 64, num_classes)
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "msg-t" => Ok(Self::msg_t(num_classes)),
            "msg-s" => Ok(Self::msg_s(num_classes)),
            "msg-b" => Ok(Self::msg_b(num_classes)),
            "micro" => Ok(Self::micro(num_classes)),
            "nano" => Ok(Self::nano(num_classes)),
            other => Err(config_err!("unknown architecture preset {other:?} (msg-t, msg-s, msg-b, micro, nano)")),
        }
    }

    /// Switches to the detection backbone; the tiny, small and base presets also take the detection shuffle sizes.
    pub fn into_detection(mut self) -> Self {
        if matches!(self.name.as_str(), "msg-t" | "msg-s" | "msg-b") {
            for (s, r) in self.stages.iter_mut().zip(DET_SHUFFLE) {
                s.shuffle_size = r;
            }
        }
        self.task = Task::DetectionBackbone;
        self
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_size = (height, width);
        self
    }

    pub fn with_shuffle_sizes(mut self, sizes: &[usize]) -> Self {
        for (s, &r) in self.stages.iter_mut().zip(sizes) {
            s.shuffle_size = r;
        }
        self
    }

    pub fn patch_padding(&self) -> usize {
        self.patch_kernel / 2
    }

    pub fn merge_padding(&self) -> usize {
        self.merge_kernel / 2
    }

    /// Patch-token grid `(H, W)` of every stage for an input of the given size.
    pub fn stage_resolutions(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let conv = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p).saturating_sub(k) / s + 1;
        let (pk, ps, pp) = (self.patch_kernel, self.patch_stride, self.patch_padding());
        let (mk, ms, mp) = (self.merge_kernel, self.merge_stride, self.merge_padding());
        let mut res = vec![(conv(height, pk, ps, pp), conv(width, pk, ps, pp))];
        for _ in 1..self.stages.len() {
            let (h, w) = *res.last().expect("non-empty");
            res.push((conv(h, mk, ms, mp), conv(w, mk, ms, mp)));
        }
        res
    }

    /// Window grid of every stage (after padding to whole windows).
    pub fn window_grids(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        self.stage_resolutions(height, width)
            .into_iter()
            .zip(&self.stages)
            .map(|((h, w), s)| (h.div_ceil(s.window_size), w.div_ceil(s.window_size)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(config_err!("expected 4 stages, got {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.num_heads == 0 || s.dim % s.num_heads != 0 {
                return Err(config_err!("stage {n}: dim {} is not divisible by {} heads", s.dim, s.num_heads));
            }
            if s.shuffle_size == 0 {
                return Err(config_err!("stage {n}: shuffle size must be at least 1"));
            }
            if self.use_msg && s.dim % (s.shuffle_size * s.shuffle_size) != 0 {
                return Err(config_err!(
                    "stage {n}: dim {} is not divisible by shuffle group count {}",
                    s.dim,
                    s.shuffle_size * s.shuffle_size
                ));
            }
            if s.window_size == 0 {
                return Err(config_err!("stage {n}: window size must be positive"));
            }
            if s.num_blocks == 0 {
                return Err(config_err!("stage {n}: needs at least one block"));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return Err(config_err!("stage {n}: dim {} is not double {}", s.dim, self.stages[i - 1].dim));
            }
        }
        if self.in_channels == 0 {
            return Err(config_err!("input channels must be positive"));
        }
        let (h, w) = self.input_size;
        if h < self.patch_kernel || w < self.patch_kernel {
            return Err(config_err!("input {h}×{w} is smaller than the {0}×{0} patch kernel", self.patch_kernel));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(config_err!("drop-path rate {} outside [0, 1)", self.drop_path));
        }
        if self.task == Task::Classification {
            if self.num_classes == 0 {
                return Err(config_err!("classification needs at least one class"));
            }
            for (i, (grid, s)) in self.window_grids(h, w).iter().zip(&self.stages).enumerate() {
                if s.shuffle_size > grid.0 && s.shuffle_size > grid.1 {
                    return Err(config_err!(
                        "stage {}: shuffle size {} exceeds the {}×{} window grid",
                        i + 1,
                        s.shuffle_size,
                        grid.0,
                        grid.1
                    ));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |g: fn(&StageConfig) -> usize| self.stages.iter().map(g).map(|v| v.to_string()).collect::<Vec<_>>().join("/");
        write!(
            f,
            "{} ({}×{}): dims {} heads {} blocks {} shuffle {} window {}",
            self.name,
            self.input_size.0,
            self.input_size.1,
            list(|s| s.dim),
            list(|s| s.num_heads),
            list(|s| s.num_blocks),
            list(|s| s.shuffle_size),
            list(|s| s.window_size),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    table: ParamId,
    theta: Option<ParamId>,
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct StageIds {
    blocks: Vec<BlockIds>,
    merge: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct ModelIds {
    patch_embed: (ParamId, ParamId),
    msg_init: Option<ParamId>,
    stages: Vec<StageIds>,
    head: Option<HeadIds>,
}

#[derive(Clone, Debug)]
struct HeadIds {
    norm: (ParamId, ParamId),
    proj: (ParamId, ParamId),
}

/// Parameter counts reported by [`Model::count_params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Learned messenger seed tokens.
    pub msg_init: usize,
    /// Seed tokens plus the messenger bias scalars θ1/θ2.
    pub msg_related: usize,
}

impl ParamCount {
    pub fn without_msg_init(&self) -> usize {
        self.total - self.msg_init
    }
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub enum ForwardOutput {
    /// `[B×num_classes]`.
    Logits(Var),
    /// Cropped patch-token maps of the four stages.
    Features(Vec<FeatureMap>),
}

impl ForwardOutput {
    pub fn logits(&self) -> Result<Var> {
        match self {
            ForwardOutput::Logits(v) => Ok(*v),
            ForwardOutput::Features(_) => Err(Error::Contract("detection backbone produces no logits".into())),
        }
    }
}

/// Model parameters bound to a concrete architecture.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ArchConfig,
    params: Vec<Param<T>>,
    ids: ModelIds,
    msg_trainable: bool,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, tensor: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name, tensor: tensor.with_grad(), decay });
        ParamId(self.params.len() - 1)
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = trunc_normal(shape, INIT_STD, self.rng);
        self.add(name, t, true)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), false)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        (self.weight(format!("{prefix}.weight"), &[fan_in, fan_out]), self.zeros(format!("{prefix}.bias"), &[fan_out]))
    }

    fn norm(&mut self, prefix: &str, c: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.gamma"), Tensor::ones(&[c]), false),
            self.zeros(format!("{prefix}.beta"), &[c]),
        )
    }
}

/// Builds parameters for `cfg`, initialized deterministically from `seed`.
pub fn build_model<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { params: Vec::new(), rng: &mut rng };
    let c1 = cfg.stages[0].dim;
    let k = cfg.patch_kernel;
    let patch_embed = (
        b.weight("patch_embed.weight".into(), &[k, k, cfg.in_channels, c1]),
        b.zeros("patch_embed.bias".into(), &[c1]),
    );
    let msg_init = cfg.use_msg.then(|| {
        let t = trunc_normal(&[MSG_SEED_GRID, MSG_SEED_GRID, c1], INIT_STD, b.rng);
        b.add("msg_init".into(), t, false)
    });
    let mut stages = Vec::new();
    for (si, s) in cfg.stages.iter().enumerate() {
        let c = s.dim;
        let span = 2 * s.window_size - 1;
        let mut blocks = Vec::new();
        for bi in 0..s.num_blocks {
            let p = format!("stages.{si}.blocks.{bi}");
            blocks.push(BlockIds {
                norm1: b.norm(&format!("{p}.norm1"), c),
                qkv: b.linear(&format!("{p}.attn.qkv"), c, 3 * c),
                proj: b.linear(&format!("{p}.attn.proj"), c, c),
                table: b.zeros(format!("{p}.attn.rel_bias"), &[s.num_heads, span, span]),
                theta: cfg.use_msg.then(|| b.zeros(format!("{p}.attn.msg_bias"), &[s.num_heads, 2])),
                norm2: b.norm(&format!("{p}.norm2"), c),
                fc1: b.linear(&format!("{p}.mlp.fc1"), c, MLP_RATIO * c),
                fc2: b.linear(&format!("{p}.mlp.fc2"), MLP_RATIO * c, c),
            });
        }
        let merge = cfg.stages.get(si + 1).map(|next| {
            let mk = cfg.merge_kernel;
            (
                b.weight(format!("stages.{si}.merge.weight"), &[mk, mk, c, next.dim]),
                b.zeros(format!("stages.{si}.merge.bias"), &[next.dim]),
            )
        });
        stages.push(StageIds { blocks, merge });
    }
    let head = (cfg.task == Task::Classification).then(|| {
        let c = cfg.stages[3].dim;
        HeadIds { norm: b.norm("head.norm", c), proj: b.linear("head.proj", c, cfg.num_classes) }
    });
    let params = b.params;
    Ok(Model {
        config: cfg.clone(),
        params,
        ids: ModelIds { patch_embed, msg_init, stages, head },
        msg_trainable: true,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn msg_init(&self) -> Option<&Tensor<T>> {
        self.ids.msg_init.map(|id| &self.params[id.0].tensor)
    }

    /// Freezes or unfreezes the messenger seed tokens.
    pub fn set_msg_trainable(&mut self, on: bool) {
        self.msg_trainable = on;
        if let Some(id) = self.ids.msg_init {
            self.params[id.0].tensor.set_requires_grad(on);
        }
    }

    pub fn msg_trainable(&self) -> bool {
        self.msg_trainable
    }

    /// Redraws the messenger seed tokens from the initialization distribution.
    pub fn rerandomize_msg_init(&mut self, seed: u64) {
        if let Some(id) = self.ids.msg_init {
            let shape = self.params[id.0].tensor.shape().to_vec();
            let mut t = trunc_normal(&shape, INIT_STD, &mut ChaCha8Rng::seed_from_u64(seed));
            t.set_requires_grad(self.msg_trainable);
            self.params[id.0].tensor = t;
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let total = self.params.iter().map(|p| p.tensor.numel()).sum();
        let msg_init = self.msg_init().map_or(0, Tensor::numel);
        let theta: usize = self
            .ids
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .filter_map(|b| b.theta)
            .map(|id| self.params[id.0].tensor.numel())
            .sum();
        ParamCount { total, msg_init, msg_related: msg_init + theta }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), decay: p.decay })
                .collect(),
            ids: self.ids.clone(),
            msg_trainable: self.msg_trainable,
        }
    }

    /// Replaces parameter values by name, validating every shape.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut by_name: HashMap<String, Tensor<T>> = HashMap::with_capacity(tensors.len());
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(config_err!("tensor {name:?} appears twice"));
            }
        }
        for p in &self.params {
            match by_name.get(&p.name) {
                None => return Err(config_err!("missing tensor {:?}", p.name)),
                Some(t) if t.shape() != p.tensor.shape() => {
                    return Err(dim_err!(
                        "tensor {:?} has shape {:?}, model expects {:?}",
                        p.name,
                        t.shape(),
                        p.tensor.shape()
                    ))
                }
                Some(_) => {}
            }
        }
        if by_name.len() != self.params.len() {
            let extra = by_name.keys().find(|k| self.param(k).is_none()).cloned().unwrap_or_default();
            return Err(config_err!("unexpected tensor {extra:?}"));
        }
        for p in &mut self.params {
            let requires = p.tensor.requires_grad();
            let mut t = by_name.remove(&p.name).expect("checked above");
            t.zero_grad();
            t.set_requires_grad(requires);
            p.tensor = t;
        }
        Ok(())
    }

    /// Records every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect()
    }

    /// Converts `[B×H×W×C]` images to patch tokens at stride 4.
    pub fn patch_embed(&self, tape: &mut Tape<T>, vars: &[Var], images: Var) -> Result<FeatureMap> {
        let d = MapDims::of(tape.shape(images))?;
        let k = self.config.patch_kernel;
        if d.height < k || d.width < k {
            return Err(config_err!("input {}×{} is smaller than the {k}×{k} patch kernel", d.height, d.width));
        }
        if d.channels != self.config.in_channels {
            return Err(dim_err!("images have {} channels, model expects {}", d.channels, self.config.in_channels));
        }
        let (w, b) = self.ids.patch_embed;
        let tokens = tape.conv2d(images, vars[w.0], vars[b.0], self.config.patch_stride, self.config.patch_padding())?;
        Ok(FeatureMap { tokens, stage: 1 })
    }

    fn block_params(&self, vars: &[Var], ids: &BlockIds, stage: &StageConfig) -> BlockParams {
        let v = |id: ParamId| vars[id.0];
        BlockParams {
            norm1: LayerNormParams { gamma: v(ids.norm1.0), beta: v(ids.norm1.1) },
            attn: AttentionParams {
                qkv_weight: v(ids.qkv.0),
                qkv_bias: v(ids.qkv.1),
                proj_weight: v(ids.proj.0),
                proj_bias: v(ids.proj.1),
                num_heads: stage.num_heads,
            },
            bias: RelPosBias { table: v(ids.table), theta: ids.theta.map(v), window_size: stage.window_size },
            norm2: LayerNormParams { gamma: v(ids.norm2.0), beta: v(ids.norm2.1) },
            mlp: MlpParams { fc1_weight: v(ids.fc1.0), fc1_bias: v(ids.fc1.1), fc2_weight: v(ids.fc2.0), fc2_bias: v(ids.fc2.1) },
            manipulation: self.config.manipulation,
            drop_path: self.config.drop_path,
        }
    }

    /// Tiles the messenger seed grid over a `gh×gw` window grid for every image.
    fn seed_messengers(&self, tape: &mut Tape<T>, vars: &[Var], batch: usize, gh: usize, gw: usize) -> Result<MsgTokens> {
        let id = self.ids.msg_init.ok_or_else(|| Error::Contract("model has no messenger tokens".into()))?;
        let c = self.config.stages[0].dim;
        let mut idx = Vec::with_capacity(batch * gh * gw * c);
        for _ in 0..batch {
            for y in 0..gh {
                for x in 0..gw {
                    let base = ((y % MSG_SEED_GRID) * MSG_SEED_GRID + x % MSG_SEED_GRID) * c;
                    idx.extend(base..base + c);
                }
            }
        }
        Ok(MsgTokens { grid: tape.gather(vars[id.0], idx.into(), &[batch, gh, gw, c])? })
    }

    /// Full forward pass over parameters previously recorded with [`Model::bind`].
    pub fn forward_with(&self, tape: &mut Tape<T>, vars: &[Var], images: Var, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!("{} bound parameters for a model with {}", vars.len(), self.params.len())));
        }
        let cls = self.config.task == Task::Classification;
        let mut fm = self.patch_embed(tape, vars, images)?;
        let mut msg: Option<MsgTokens> = None;
        let mut features = Vec::new();
        for (si, (stage, ids)) in self.config.stages.iter().zip(&self.ids.stages).enumerate() {
            let w = stage.window_size;
            let (padded, orig) = pad_to_window_multiple(tape, fm, w)?;
            let mut wt = partition_windows(tape, padded, w)?;
            let (batch, gh, gw, _, _) = wt.dims(tape)?;
            if self.config.use_msg {
                msg = Some(match msg {
                    None => self.seed_messengers(tape, vars, batch, gh, gw)?,
                    Some(m) => MsgTokens { grid: resize_grid(tape, m.grid, gh, gw)? },
                });
            }
            for (bi, block) in ids.blocks.iter().enumerate() {
                let anchor = if !cls && bi % 2 == 1 { Anchor::BottomRight } else { Anchor::TopLeft };
                let region = group_regions((gh, gw), stage.shuffle_size, anchor, cls)?;
                let params = self.block_params(vars, block, stage);
                let (next, next_msg) = block_forward(tape, wt, msg, &params, &region, ctx)?;
                wt = next;
                msg = next_msg;
            }
            let out = reverse_windows(tape, wt, si + 1)?;
            fm = crop(tape, out, orig)?;
            if !cls {
                features.push(fm);
            }
            if let Some((mw, mb)) = ids.merge {
                let (next, next_msg) = merge_tokens(tape, fm, msg, vars[mw.0], vars[mb.0])?;
                fm = next;
                msg = next_msg;
            }
        }
        if !cls {
            return Ok(ForwardOutput::Features(features));
        }
        let head = self.ids.head.as_ref().expect("classification models have a head");
        let pooled = match msg {
            Some(m) => {
                let d = MapDims::of(tape.shape(m.grid))?;
                let flat = tape.reshape(m.grid, &[d.batch, d.height * d.width, d.channels])?;
                tape.mean(flat, 1)?
            }
            None => {
                let d = fm.dims(tape)?;
                let flat = tape.reshape(fm.tokens, &[d.batch, d.height * d.width, d.channels])?;
                tape.mean(flat, 1)?
            }
        };
        let normed = tape.layer_norm(pooled, vars[head.norm.0 .0], vars[head.norm.1 .0], LAYER_NORM_EPS)?;
        Ok(ForwardOutput::Logits(tape.linear(normed, vars[head.proj.0 .0], Some(vars[head.proj.1 .0]))?))
    }

    /// Binds parameters and runs the forward pass; returns the bound leaves too.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<(Vec<Var>, ForwardOutput)> {
        let vars = self.bind(tape);
        let x = tape.constant(images.clone());
        let out = self.forward_with(tape, &vars, x, ctx)?;
        Ok((vars, out))
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, images, &mut ForwardCtx::eval())?;
        Ok(tape.value(out.logits()?).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_presets_validate() {
        for cfg in [ArchConfig::msg_t(1000), ArchConfig::msg_s(1000), ArchConfig::msg_b(1000)] {
            cfg.validate().unwrap();
            cfg.clone().into_detection().validate().unwrap();
        }
        ArchConfig::micro(4).validate().unwrap();
        ArchConfig::nano(4).validate().unwrap();
    }

    #[test]
    fn msg_t_stage_geometry() {
        let cfg = ArchConfig::msg_t(1000);
        assert_eq!(cfg.stage_resolutions(224, 224), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
        assert_eq!(cfg.window_grids(224, 224), vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
        let det = cfg.into_detection();
        assert_eq!(det.stages.iter().map(|s| s.shuffle_size).collect::<Vec<_>>(), vec![4, 4, 8, 4]);
    }

    #[test]
    fn micro_stage_four_is_one_window() {
        let cfg = ArchConfig::micro(4);
        assert_eq!(cfg.stage_resolutions(128, 128)[3], (4, 4));
        assert_eq!(cfg.window_grids(128, 128)[3], (1, 1));
    }

    #[test]
    fn validation_names_failed_constraint() {
        let mut cfg = ArchConfig::micro(4);
        cfg.stages[1].num_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("heads")));

        let mut cfg = ArchConfig::micro(4);
        cfg.stages[2].dim = 96;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("double")));

        let cfg = ArchConfig::micro(4).with_shuffle_sizes(&[2, 2, 2, 4]);
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("shuffle")));

        let cfg = ArchConfig::nano(4).with_shuffle_sizes(&[4, 2, 2, 1]);
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("divisible")));

        let cfg = ArchConfig::micro(4).with_input(6, 6);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn msg_init_scalars() {
        let mut cfg = ArchConfig::micro(4);
        for (s, d) in cfg.stages.iter_mut().zip([96, 192, 384, 768]) {
            s.dim = d;
            s.num_heads = 1;
        }
        let model: Model<f32> = build_model(&cfg, 0).unwrap();
        assert_eq!(model.count_params().msg_init, 1536);
    }
}
