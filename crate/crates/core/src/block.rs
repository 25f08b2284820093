//! The messenger-token transformer block.
//!
//! One block runs, in order:
//! 1. prepend each window's messenger token to its patch tokens,
//! 2. layer norm, local multi-head attention, residual add,
//! 3. manipulate the messenger tokens across their shuffle region,
//! 4. layer norm, two-layer MLP, residual add (messengers included),
//! 5. split messengers and patch tokens apart again.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::window::{MapDims, ShuffleRegionView, WindowedTokens};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One messenger token per window, laid out on the window grid: `[B×gh×gw×C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsgTokens {
    pub grid: Var,
}

/// How messenger tokens of a region are combined between attention rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Manipulation {
    Shuffle,
    Average,
    Shift,
    None,
}

impl FromStr for Manipulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(Self::Shuffle),
            "average" => Ok(Self::Average),
            "shift" => Ok(Self::Shift),
            "none" => Ok(Self::None),
            other => Err(config_err!("unknown messenger manipulation {other:?} (expected shuffle, average, shift or none)")),
        }
    }
}

impl fmt::Display for Manipulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shuffle => "shuffle",
            Self::Average => "average",
            Self::Shift => "shift",
            Self::None => "none",
        })
    }
}

/// Source of one entry of the attention bias matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasSource {
    /// Messenger query row (including the messenger–messenger entry).
    Theta1,
    /// Patch query attending to the messenger key.
    Theta2,
    /// Relative-offset table entry `b_rel[i'][j']`.
    Table(usize, usize),
}

/// Bias source for query slot `i` and key slot `j` of a `w²+1` sequence,
/// slot 0 being the messenger.
///
/// Patch slots map to 0-based patch positions `p = slot − 1`, then
/// `i' = p mod w − q mod w + w − 1` and `j' = p / w − q / w + w − 1`.
pub fn bias_index(i: usize, j: usize, w: usize) -> Result<BiasSource> {
    let n = w * w + 1;
    if i >= n || j >= n {
        return Err(Error::Index(format!("bias slot ({i}, {j}) out of range for window size {w}")));
    }
    if i == 0 {
        return Ok(BiasSource::Theta1);
    }
    if j == 0 {
        return Ok(BiasSource::Theta2);
    }
    let (di, dj) = relative_offset(i - 1, j - 1, w);
    Ok(BiasSource::Table(di, dj))
}

fn relative_offset(p: usize, q: usize, w: usize) -> (usize, usize) {
    (p % w + w - 1 - q % w, p / w + w - 1 - q / w)
}

/// Gather index assembling `[h×N×N]` biases from a per-head parameter row laid
/// out as `(2w−1)²` table entries followed by θ1, θ2 (when messengers are on).
fn bias_gather_index(heads: usize, w: usize, with_msg: bool) -> Vec<usize> {
    let span = 2 * w - 1;
    let row = span * span + if with_msg { 2 } else { 0 };
    let n = w * w + usize::from(with_msg);
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let local = if with_msg {
                    match bias_index(i, j, w).expect("slots are in range") {
                        BiasSource::Theta1 => span * span,
                        BiasSource::Theta2 => span * span + 1,
                        BiasSource::Table(a, b) => a * span + b,
                    }
                } else {
                    let (a, b) = relative_offset(i, j, w);
                    a * span + b
                };
                idx.push(h * row + local);
            }
        }
    }
    idx
}

/// Learned relative position bias of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelPosBias {
    /// `[h×(2w−1)×(2w−1)]`.
    pub table: Var,
    /// `[h×2]` holding θ1, θ2 per head; absent without messenger tokens.
    pub theta: Option<Var>,
    pub window_size: usize,
}

impl RelPosBias {
    /// Assembles the `[h×N×N]` bias matrix.
    pub fn matrix<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let w = self.window_size;
        let span = 2 * w - 1;
        let heads = match *tape.shape(self.table) {
            [h, a, b] if a == span && b == span => h,
            ref s => return Err(dim_err!("bias table {s:?} is not [h, {span}, {span}]")),
        };
        let flat = tape.reshape(self.table, &[heads, span * span])?;
        let params = match self.theta {
            Some(theta) => {
                if tape.shape(theta) != [heads, 2] {
                    return Err(dim_err!("theta {:?} is not [{heads}, 2]", tape.shape(theta)));
                }
                tape.concat(&[flat, theta], 1)?
            }
            None => flat,
        };
        let with_msg = self.theta.is_some();
        let n = w * w + usize::from(with_msg);
        let idx = bias_gather_index(heads, w, with_msg);
        tape.gather(params, idx.into(), &[heads, n, n])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// `[C×3C]`, output columns ordered q | k | v, heads contiguous within each.
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub num_heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub bias: RelPosBias,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
    pub manipulation: Manipulation,
    pub drop_path: f64,
}

/// Per-forward state: training flag and the stochastic-depth RNG.
#[derive(Debug)]
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { training: true, rng }
    }
}

/// Prepends each window's messenger token at slot 0.
pub fn attach_msg<T: Scalar>(tape: &mut Tape<T>, wt: WindowedTokens, msg: MsgTokens) -> Result<WindowedTokens> {
    if wt.with_msg {
        return Err(Error::Contract("attach_msg: messengers are already attached".into()));
    }
    let (b, gh, gw, _, c) = wt.dims(tape)?;
    let m = MapDims::of(tape.shape(msg.grid))?;
    if (m.batch, m.height, m.width, m.channels) != (b, gh, gw, c) {
        return Err(dim_err!(
            "attach_msg: messenger grid {:?} does not match {b}×{gh}×{gw} windows of {c} channels",
            tape.shape(msg.grid)
        ));
    }
    let slot = tape.reshape(msg.grid, &[b, gh, gw, 1, c])?;
    let windows = tape.concat(&[slot, wt.windows], 3)?;
    Ok(WindowedTokens { windows, window_size: wt.window_size, with_msg: true })
}

/// Splits slot 0 back out of every window.
pub fn detach_msg<T: Scalar>(tape: &mut Tape<T>, wt: WindowedTokens) -> Result<(WindowedTokens, MsgTokens)> {
    if !wt.with_msg {
        return Err(Error::Contract("detach_msg: no messengers attached".into()));
    }
    let (b, gh, gw, n, c) = wt.dims(tape)?;
    let slot = tape.narrow(wt.windows, 3, 0, 1)?;
    let grid = tape.reshape(slot, &[b, gh, gw, c])?;
    let windows = tape.narrow(wt.windows, 3, 1, n - 1)?;
    Ok((WindowedTokens { windows, window_size: wt.window_size, with_msg: false }, MsgTokens { grid }))
}

/// Output of [`local_msa_with_probs`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub tokens: WindowedTokens,
    /// Softmax weights `[B·gh·gw×h×N×N]`.
    pub probs: Var,
}

/// Multi-head attention computed independently inside every window.
pub fn local_msa<T: Scalar>(
    tape: &mut Tape<T>,
    wt: WindowedTokens,
    params: &AttentionParams,
    bias: &RelPosBias,
) -> Result<WindowedTokens> {
    Ok(local_msa_with_probs(tape, wt, params, bias)?.tokens)
}

pub fn local_msa_with_probs<T: Scalar>(
    tape: &mut Tape<T>,
    wt: WindowedTokens,
    params: &AttentionParams,
    bias: &RelPosBias,
) -> Result<AttentionOutput> {
    let (b, gh, gw, n, c) = wt.dims(tape)?;
    let h = params.num_heads;
    if h == 0 || c % h != 0 {
        return Err(config_err!("{c} channels cannot be split across {h} heads"));
    }
    if bias.theta.is_some() != wt.with_msg {
        return Err(Error::Contract("bias θ parameters must be present exactly when messengers are attached".into()));
    }
    let d = c / h;
    let bw = b * gh * gw;
    let x = tape.reshape(wt.windows, &[bw, n, c])?;
    let qkv = tape.linear(x, params.qkv_weight, Some(params.qkv_bias))?;
    let qkv = tape.reshape(qkv, &[bw, n, 3, h, d])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = [qkv; 3];
    for (i, part) in split.iter_mut().enumerate() {
        let s = tape.narrow(qkv, 0, i, 1)?;
        *part = tape.reshape(s, &[bw, h, n, d])?;
    }
    let [q, k, v] = split;
    let q = tape.scale(q, T::of(1.0 / (d as f64).sqrt()));
    let scores = tape.matmul_nt(q, k)?;
    let bias_matrix = bias.matrix(tape)?;
    let scores = tape.add(scores, bias_matrix)?;
    let probs = tape.softmax(scores, 3)?;
    let out = tape.matmul(probs, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b, gh, gw, n, c])?;
    let out = tape.linear(out, params.proj_weight, Some(params.proj_bias))?;
    Ok(AttentionOutput { tokens: WindowedTokens { windows: out, ..wt }, probs })
}

fn msg_dims<T: Scalar>(tape: &Tape<T>, msg: MsgTokens, region: &ShuffleRegionView) -> Result<MapDims> {
    let d = MapDims::of(tape.shape(msg.grid))?;
    if (d.height, d.width) != region.grid {
        return Err(dim_err!(
            "messenger grid {}×{} does not match region view over {}×{}",
            d.height,
            d.width,
            region.grid.0,
            region.grid.1
        ));
    }
    Ok(d)
}

/// Scalar-level permutation performing the channel-group transpose of every region.
///
/// Within a region of `n` tokens, output token `a` group `g` is input token `g`
/// group `a`, each group holding `C / n` channels. A region whose size does not
/// divide `C` is an error on strict views; otherwise the trailing `C mod n`
/// channels stay in place.
pub fn shuffle_index(batch: usize, channels: usize, region: &ShuffleRegionView) -> Result<Vec<usize>> {
    let (gh, gw) = region.grid;
    let c = channels;
    let mut per_image: Vec<usize> = (0..gh * gw * c).collect();
    for tokens in region.regions() {
        let n = tokens.len();
        if !c.is_multiple_of(n) && region.strict {
            return Err(config_err!("cannot shuffle {c} channels across a region of {n} messenger tokens"));
        }
        let group = c / n;
        for (a, &(ya, xa)) in tokens.iter().enumerate() {
            let dst = (ya * gw + xa) * c;
            for (g, &(yg, xg)) in tokens.iter().enumerate() {
                let src = (yg * gw + xg) * c;
                for r in 0..group {
                    per_image[dst + g * group + r] = src + a * group + r;
                }
            }
        }
    }
    let stride = gh * gw * c;
    Ok((0..batch).flat_map(|b| per_image.iter().map(move |&i| b * stride + i)).collect())
}

fn shift_index(batch: usize, channels: usize, region: &ShuffleRegionView) -> Vec<usize> {
    let (gh, gw) = region.grid;
    let c = channels;
    let mut per_image: Vec<usize> = (0..gh * gw * c).collect();
    for tokens in region.regions() {
        let n = tokens.len();
        for (i, &(y, x)) in tokens.iter().enumerate() {
            let (sy, sx) = tokens[(i + n - 1) % n];
            for ch in 0..c {
                per_image[(y * gw + x) * c + ch] = (sy * gw + sx) * c + ch;
            }
        }
    }
    let stride = gh * gw * c;
    (0..batch).flat_map(|b| per_image.iter().map(move |&i| b * stride + i)).collect()
}

/// Channel-group transpose of messenger tokens inside each shuffle region.
pub fn shuffle_msg<T: Scalar>(tape: &mut Tape<T>, msg: MsgTokens, region: &ShuffleRegionView) -> Result<MsgTokens> {
    let d = msg_dims(tape, msg, region)?;
    let idx = shuffle_index(d.batch, d.channels, region)?;
    let shape = tape.shape(msg.grid).to_vec();
    Ok(MsgTokens { grid: tape.gather(msg.grid, idx.into(), &shape)? })
}

/// [`shuffle_msg`] on a plain `[B×gh×gw×C]` tensor.
pub fn shuffle_tensor<T: Scalar>(grid: &Tensor<T>, region: &ShuffleRegionView) -> Result<Tensor<T>> {
    let d = MapDims::of(grid.shape())?;
    if (d.height, d.width) != region.grid {
        return Err(dim_err!("messenger grid {:?} does not match region view over {:?}", grid.shape(), region.grid));
    }
    let idx = shuffle_index(d.batch, d.channels, region)?;
    Tensor::new(grid.shape(), idx.iter().map(|&i| grid.data()[i]).collect())
}

/// Applies `mode` to the messenger tokens of every region.
pub fn manipulate_msg<T: Scalar>(
    tape: &mut Tape<T>,
    msg: MsgTokens,
    region: &ShuffleRegionView,
    mode: Manipulation,
) -> Result<MsgTokens> {
    let d = msg_dims(tape, msg, region)?;
    let shape = tape.shape(msg.grid).to_vec();
    let grid = match mode {
        Manipulation::None => msg.grid,
        Manipulation::Shuffle => return shuffle_msg(tape, msg, region),
        Manipulation::Shift => {
            let idx = shift_index(d.batch, d.channels, region);
            tape.gather(msg.grid, idx.into(), &shape)?
        }
        Manipulation::Average => {
            let per_image = region.region_of();
            let regions = region.regions().len();
            let segments: Rc<[usize]> =
                (0..d.batch).flat_map(|b| per_image.iter().map(move |&r| b * regions + r)).collect();
            tape.segment_mean(msg.grid, segments, d.channels)?
        }
    };
    Ok(MsgTokens { grid })
}

fn drop_path<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if !ctx.training || rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 - rate;
    let mut mask_shape = vec![1; shape.len()];
    mask_shape[0] = shape[0];
    let mask = Tensor::from_fn(&mask_shape, |_| {
        if ctx.rng.gen::<f64>() < keep {
            T::of(1.0 / keep)
        } else {
            T::zero()
        }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &MlpParams) -> Result<Var> {
    let hidden = tape.linear(x, p.fc1_weight, Some(p.fc1_bias))?;
    let hidden = tape.gelu(hidden);
    tape.linear(hidden, p.fc2_weight, Some(p.fc2_bias))
}

/// One block over windowed patch tokens and (optionally) their messengers.
///
/// Without messengers the block is plain window attention over `w²` tokens
/// and the manipulation step is skipped.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    wt: WindowedTokens,
    msg: Option<MsgTokens>,
    params: &BlockParams,
    region: &ShuffleRegionView,
    ctx: &mut ForwardCtx,
) -> Result<(WindowedTokens, Option<MsgTokens>)> {
    let x = match msg {
        Some(m) => attach_msg(tape, wt, m)?,
        None => wt,
    };
    let (b, gh, gw, n, c) = x.dims(tape)?;
    let normed = tape.layer_norm(x.windows, params.norm1.gamma, params.norm1.beta, LAYER_NORM_EPS)?;
    let attn = local_msa(tape, WindowedTokens { windows: normed, ..x }, &params.attn, &params.bias)?;
    let attn = drop_path(tape, attn.windows, params.drop_path, ctx)?;
    let mut windows = tape.add(x.windows, attn)?;

    if msg.is_some() {
        let (patches, m) = detach_msg(tape, WindowedTokens { windows, ..x })?;
        let m = manipulate_msg(tape, m, region, params.manipulation)?;
        let slot = tape.reshape(m.grid, &[b, gh, gw, 1, c])?;
        windows = tape.concat(&[slot, patches.windows], 3)?;
    }
    debug_assert_eq!(tape.shape(windows)[3], n);

    let normed = tape.layer_norm(windows, params.norm2.gamma, params.norm2.beta, LAYER_NORM_EPS)?;
    let y = mlp(tape, normed, &params.mlp)?;
    let y = drop_path(tape, y, params.drop_path, ctx)?;
    let windows = tape.add(windows, y)?;
    let out = WindowedTokens { windows, ..x };
    match msg {
        Some(_) => {
            let (patches, m) = detach_msg(tape, out)?;
            Ok((patches, Some(m)))
        }
        None => Ok((out, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::{group_regions, Anchor};

    #[test]
    fn bias_index_cases() {
        assert_eq!(bias_index(0, 0, 3).unwrap(), BiasSource::Theta1);
        assert_eq!(bias_index(0, 5, 3).unwrap(), BiasSource::Theta1);
        assert_eq!(bias_index(4, 0, 3).unwrap(), BiasSource::Theta2);
        for s in 1..=9 {
            assert_eq!(bias_index(s, s, 3).unwrap(), BiasSource::Table(2, 2));
        }
        // w = 2: query patch 0 (slot 1), key patch 3 (slot 4)
        assert_eq!(bias_index(1, 4, 2).unwrap(), BiasSource::Table(0, 0));
        assert!(matches!(bias_index(10, 1, 3), Err(Error::Index(_))));
    }

    #[test]
    fn bias_index_swap_reflects_offsets() {
        let w = 4;
        for i in 1..=w * w {
            for j in 1..=w * w {
                let (BiasSource::Table(a, b), BiasSource::Table(c, d)) =
                    (bias_index(i, j, w).unwrap(), bias_index(j, i, w).unwrap())
                else {
                    panic!("patch slots must use the table");
                };
                assert_eq!((c, d), (2 * w - 2 - a, 2 * w - 2 - b));
            }
        }
    }

    #[test]
    fn manipulation_parsing() {
        assert_eq!("shift".parse::<Manipulation>().unwrap(), Manipulation::Shift);
        assert!(matches!("rotate".parse::<Manipulation>(), Err(Error::Config(_))));
    }

    fn grid_tape(values: &[f64], shape: &[usize]) -> (Tape<f64>, MsgTokens) {
        let mut tape = Tape::new();
        let grid = tape.constant(Tensor::from_f64(shape, values).unwrap());
        (tape, MsgTokens { grid })
    }

    #[test]
    fn shuffle_hand_example() {
        let values: Vec<f64> = (0..16).map(f64::from).collect();
        let (mut tape, msg) = grid_tape(&values, &[1, 2, 2, 4]);
        let view = group_regions((2, 2), 2, Anchor::TopLeft, true).unwrap();
        let out = shuffle_msg(&mut tape, msg, &view).unwrap();
        let want = [0., 4., 8., 12., 1., 5., 9., 13., 2., 6., 10., 14., 3., 7., 11., 15.];
        assert_eq!(tape.value(out.grid).data(), &want);
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let (mut tape, msg) = grid_tape(&[0.0; 24], &[1, 2, 2, 6]);
        let view = group_regions((2, 2), 2, Anchor::TopLeft, true).unwrap();
        let err = shuffle_msg(&mut tape, msg, &view).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains('6') && m.contains('4')), "{err}");
    }

    #[test]
    fn partial_region_keeps_remainder_channels() {
        // 1×3 grid, one non-strict region of 3 tokens, 4 channels: groups of 1, channel 3 fixed
        let values: Vec<f64> = (0..12).map(f64::from).collect();
        let (mut tape, msg) = grid_tape(&values, &[1, 1, 3, 4]);
        let view = group_regions((1, 3), 4, Anchor::TopLeft, false).unwrap();
        let out = shuffle_msg(&mut tape, msg, &view).unwrap();
        assert_eq!(tape.value(out.grid).data(), &[0., 4., 8., 3., 1., 5., 9., 7., 2., 6., 10., 11.]);
    }

    #[test]
    fn average_and_shift_and_none() {
        let (mut tape, msg) = grid_tape(&[1.0, 1.0, 3.0, 3.0], &[1, 1, 2, 2]);
        let view = group_regions((1, 2), 2, Anchor::TopLeft, false).unwrap();
        let avg = manipulate_msg(&mut tape, msg, &view, Manipulation::Average).unwrap();
        assert_eq!(tape.value(avg.grid).data(), &[2.0, 2.0, 2.0, 2.0]);
        let same = manipulate_msg(&mut tape, msg, &view, Manipulation::None).unwrap();
        assert_eq!(same, msg);

        // region tokens a, b, c, d in row-major order
        let (mut tape, msg) = grid_tape(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1]);
        let view = group_regions((2, 2), 2, Anchor::TopLeft, true).unwrap();
        let shifted = manipulate_msg(&mut tape, msg, &view, Manipulation::Shift).unwrap();
        assert_eq!(tape.value(shifted.grid).data(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn every_mode_is_identity_for_unit_regions() {
        let values: Vec<f64> = (0..32).map(|i| f64::from(i) * 0.3 - 2.0).collect();
        let view = group_regions((2, 4), 1, Anchor::TopLeft, true).unwrap();
        for mode in [Manipulation::Shuffle, Manipulation::Average, Manipulation::Shift, Manipulation::None] {
            let (mut tape, msg) = grid_tape(&values, &[1, 2, 4, 4]);
            let out = manipulate_msg(&mut tape, msg, &view, mode).unwrap();
            assert_eq!(tape.value(out.grid).data(), &values[..], "{mode}");
        }
    }

    #[test]
    fn attach_detach_round_trip() {
        let mut tape = Tape::<f64>::new();
        let windows = tape.constant(Tensor::from_fn(&[2, 8, 8, 49, 3], |i| i as f64));
        let grid = tape.constant(Tensor::from_fn(&[2, 8, 8, 3], |i| -(i as f64)));
        let wt = WindowedTokens { windows, window_size: 7, with_msg: false };
        let attached = attach_msg(&mut tape, wt, MsgTokens { grid }).unwrap();
        assert_eq!(tape.shape(attached.windows), &[2, 8, 8, 50, 3]);
        let (back, msg) = detach_msg(&mut tape, attached).unwrap();
        assert_eq!(tape.value(back.windows), tape.value(windows));
        assert_eq!(tape.value(msg.grid), tape.value(grid));

        let bad = tape.constant(Tensor::zeros(&[2, 4, 8, 3]));
        assert!(matches!(attach_msg(&mut tape, wt, MsgTokens { grid: bad }), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_window_sequence_length() {
        let mut tape = Tape::<f32>::new();
        let windows = tape.constant(Tensor::zeros(&[1, 1, 1, 16, 2]));
        let grid = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let wt = WindowedTokens { windows, window_size: 4, with_msg: false };
        let attached = attach_msg(&mut tape, wt, MsgTokens { grid }).unwrap();
        assert_eq!(tape.shape(attached.windows)[3], 17);
    }
}
