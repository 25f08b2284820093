//! Cross-window communication analysis: receptive fields and perturbation reachability.

use msgt_core::block::{
    block_forward, AttentionParams, BlockParams, ForwardCtx, LayerNormParams, Manipulation, MlpParams, MsgTokens,
    RelPosBias,
};
use msgt_core::complexity::{receptive_field, Rational, Scheme};
use msgt_core::window::{group_regions, partition_windows, Anchor, FeatureMap};
use msgt_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldRow {
    pub shuffle: u64,
    pub swin: Rational,
    pub msg: Rational,
}

/// Receptive fields of both schemes for shuffle sizes `1..=max_shuffle`.
pub fn field_table(window: u64, max_shuffle: u64) -> Result<Vec<FieldRow>> {
    (1..=max_shuffle)
        .map(|s| {
            Ok(FieldRow {
                shuffle: s,
                swin: receptive_field(Scheme::SwinShift, window, s)?,
                msg: receptive_field(Scheme::MsgShuffle, window, s)?,
            })
        })
        .collect()
}

/// Outcome of perturbing one patch of window (0, 0) and running two blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Reach {
    pub grid: (usize, usize),
    /// Largest absolute output change per window, row-major.
    pub max_change: Vec<f64>,
    /// Windows sharing the perturbed window's shuffle region.
    pub region: Vec<(usize, usize)>,
}

impl Reach {
    pub fn change(&self, y: usize, x: usize) -> f64 {
        self.max_change[y * self.grid.1 + x]
    }

    /// Every window of the region other than the source changed.
    pub fn fills_region(&self) -> bool {
        self.region.iter().all(|&(y, x)| self.change(y, x) > 0.0)
    }

    /// Windows other than the source that changed.
    pub fn reached(&self) -> Vec<(usize, usize)> {
        let gw = self.grid.1;
        (0..self.max_change.len())
            .filter(|&i| i != 0 && self.max_change[i] > 0.0)
            .map(|i| (i / gw, i % gw))
            .collect()
    }
}

fn random_tensor(shape: &[usize], scale: f64, offset: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| offset + scale * rng.gen_range(-1.0..1.0))
}

/// Random 64-bit block parameters bound as constants, in binding order.
pub fn random_block(tape: &mut Tape<f64>, c: usize, heads: usize, w: usize, msg: bool, rng: &mut ChaCha8Rng) -> Vec<Var> {
    let fan = 1.0 / (c as f64).sqrt();
    let span = 2 * w - 1;
    let mut shapes: Vec<(Vec<usize>, f64, f64)> = vec![
        (vec![c], 0.1, 1.0),
        (vec![c], 0.1, 0.0),
        (vec![c, 3 * c], fan, 0.0),
        (vec![3 * c], 0.1, 0.0),
        (vec![c, c], fan, 0.0),
        (vec![c], 0.1, 0.0),
        (vec![heads, span, span], 0.5, 0.0),
    ];
    if msg {
        shapes.push((vec![heads, 2], 0.5, 0.0));
    }
    shapes.extend([
        (vec![c], 0.1, 1.0),
        (vec![c], 0.1, 0.0),
        (vec![c, 4 * c], fan, 0.0),
        (vec![4 * c], 0.1, 0.0),
        (vec![4 * c, c], 0.5 * fan, 0.0),
        (vec![c], 0.1, 0.0),
    ]);
    shapes.into_iter().map(|(s, scale, off)| tape.constant(random_tensor(&s, scale, off, rng))).collect()
}

/// Assembles [`BlockParams`] from vars returned by [`random_block`].
pub fn block_params(v: &[Var], heads: usize, w: usize, mode: Manipulation) -> BlockParams {
    let (theta, r) = if v.len() == 14 { (Some(v[7]), &v[8..]) } else { (None, &v[7..]) };
    BlockParams {
        norm1: LayerNormParams { gamma: v[0], beta: v[1] },
        attn: AttentionParams { qkv_weight: v[2], qkv_bias: v[3], proj_weight: v[4], proj_bias: v[5], num_heads: heads },
        bias: RelPosBias { table: v[6], theta, window_size: w },
        norm2: LayerNormParams { gamma: r[0], beta: r[1] },
        mlp: MlpParams { fc1_weight: r[2], fc1_bias: r[3], fc2_weight: r[4], fc2_bias: r[5] },
        manipulation: mode,
        drop_path: 0.0,
    }
}

/// Perturbs one patch token of window (0, 0) and measures every window's change
/// after two blocks on a `2R×2R` window grid with random 64-bit parameters.
///
/// `mode` of `None` with `use_msg` false is plain window attention.
pub fn perturbation_reach(window: usize, shuffle: usize, use_msg: bool, mode: Manipulation, seed: u64) -> Result<Reach> {
    let r = shuffle.max(1);
    let g = 2 * r;
    let c = (r * r).max(4) * 2;
    let heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let blocks: Vec<Vec<Var>> = (0..2).map(|_| random_block(&mut tape, c, heads, window, use_msg, &mut rng)).collect();
    let side = g * window;
    let x = random_tensor(&[1, side, side, c], 1.0, 0.0, &mut rng);
    let msg = random_tensor(&[1, g, g, c], 1.0, 0.0, &mut rng);
    let mut bumped = x.clone();
    bumped.data_mut()[0] += 0.5;
    let region = group_regions((g, g), r, Anchor::TopLeft, true)?;
    let mut outputs = Vec::new();
    for input in [&x, &bumped] {
        let fm = FeatureMap { tokens: tape.constant(input.clone()), stage: 1 };
        let mut wt = partition_windows(&mut tape, fm, window)?;
        let mut m = use_msg.then(|| MsgTokens { grid: tape.constant(msg.clone()) });
        for b in &blocks {
            let p = block_params(b, heads, window, mode);
            (wt, m) = block_forward(&mut tape, wt, m, &p, &region, &mut ForwardCtx::eval())?;
        }
        outputs.push(tape.value(wt.windows).clone());
    }
    let per = window * window * c;
    let max_change = outputs[0]
        .data()
        .chunks(per)
        .zip(outputs[1].data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
        .collect();
    let region_windows = region.regions().iter().find(|rg| rg.contains(&(0, 0))).cloned().unwrap_or_default();
    Ok(Reach { grid: (g, g), max_change, region: region_windows })
}
