#![allow(dead_code)]

use msgt_core::block::{AttentionParams, BlockParams, LayerNormParams, Manipulation, MlpParams, RelPosBias};
use msgt_core::{Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn scaled(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.gen_range(-1.0..1.0))
}

/// Random block parameters in binding order; every entry is nonzero with probability 1.
pub fn block_tensors(c: usize, heads: usize, w: usize, with_theta: bool, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let span = 2 * w - 1;
    let fan = 1.0 / (c as f64).sqrt();
    let mut out = vec![
        Tensor::from_fn(&[c], |_| 1.0 + 0.1 * rng.gen_range(-1.0..1.0)),
        scaled(&[c], 0.1, rng),
        scaled(&[c, 3 * c], fan, rng),
        scaled(&[3 * c], 0.1, rng),
        scaled(&[c, c], fan, rng),
        scaled(&[c], 0.1, rng),
        scaled(&[heads, span, span], 0.5, rng),
    ];
    if with_theta {
        out.push(scaled(&[heads, 2], 0.5, rng));
    }
    out.extend([
        Tensor::from_fn(&[c], |_| 1.0 + 0.1 * rng.gen_range(-1.0..1.0)),
        scaled(&[c], 0.1, rng),
        scaled(&[c, 4 * c], fan, rng),
        scaled(&[4 * c], 0.1, rng),
        scaled(&[4 * c, c], 0.5 * fan, rng),
        scaled(&[c], 0.1, rng),
    ]);
    out
}

/// Assembles [`BlockParams`] from vars bound in [`block_tensors`] order.
pub fn block_params(v: &[Var], heads: usize, w: usize, manipulation: Manipulation) -> BlockParams {
    let (theta, rest) = if v.len() == 14 { (Some(v[7]), &v[8..]) } else { (None, &v[7..]) };
    BlockParams {
        norm1: LayerNormParams { gamma: v[0], beta: v[1] },
        attn: AttentionParams {
            qkv_weight: v[2],
            qkv_bias: v[3],
            proj_weight: v[4],
            proj_bias: v[5],
            num_heads: heads,
        },
        bias: RelPosBias { table: v[6], theta, window_size: w },
        norm2: LayerNormParams { gamma: rest[0], beta: rest[1] },
        mlp: MlpParams { fc1_weight: rest[2], fc1_bias: rest[3], fc2_weight: rest[4], fc2_bias: rest[5] },
        manipulation,
        drop_path: 0.0,
    }
}
