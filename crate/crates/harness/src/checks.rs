//! 64-bit finite-difference gradient checks for single ops and whole models.

use msgt_core::arch::{build_model, ArchConfig, Model};
use msgt_core::block::ForwardCtx;
use msgt_core::tensor::{grad_check, GradCheckReport, Sampling};
use msgt_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Sums `y` against fixed random weights so every output entry matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> msgt_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> msgt_core::Result<Var>;

/// Named single-op objectives with their parameter shapes.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, 2)
        }),
        ("linear", vec![vec![6, 4], vec![4, 3], vec![3]], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 3)
        }),
        ("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 4)
        }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 5)
        }),
        ("gelu", vec![vec![10]], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 6)
        }),
        ("conv2d", vec![vec![1, 5, 5, 2], vec![3, 3, 2, 3], vec![3]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(t, y, 7)
        }),
        ("cross_entropy", vec![vec![3, 4]], |t, v| t.cross_entropy(v[0], &[0, 3, 1], 0.1)),
    ]
}

/// Checks every single op at random inputs, probing all entries.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let params: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            Ok((name, grad_check(f, &params, STEP, Sampling::All)?))
        })
        .collect()
}

/// Cross-entropy of a full model on one random image, checked over every
/// parameter tensor with `entries` sampled entries each.
///
/// Block biases, relative-position tables and messenger scalars start at zero
/// after initialization; they are randomized here so the check exercises
/// generic values.
pub fn model_gradcheck(cfg: &ArchConfig, entries: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model: Model<f64> = build_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c);
    for p in model.params_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.02 * rng.gen_range(-1.0..1.0);
        }
    }
    let (h, w) = cfg.input_size;
    let image = Tensor::from_fn(&[1, h, w, cfg.in_channels], |_| rng.gen_range(0.0..1.0));
    let label = rng.gen_range(0..cfg.num_classes);
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let x = tape.constant(image.clone());
            let logits = model.forward_with(tape, vars, x, &mut ForwardCtx::eval())?.logits()?;
            tape.cross_entropy(logits, &[label], 0.1)
        },
        &params,
        STEP,
        Sampling::PerTensor { entries, seed },
    )?;
    Ok(report)
}
