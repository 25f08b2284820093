mod common;

use common::{block_params, block_tensors, random};
use msgt_core::block::{
    attach_msg, block_forward, detach_msg, local_msa_with_probs, manipulate_msg, shuffle_tensor, ForwardCtx,
    Manipulation, MsgTokens,
};
use msgt_core::tensor::{grad_check, Sampling};
use msgt_core::window::{group_regions, partition_windows, Anchor, FeatureMap, ShuffleRegionView, WindowedTokens};
use msgt_core::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const C: usize = 8;
const W: usize = 2;

struct Setup {
    tape: Tape<f64>,
    vars: Vec<Var>,
}

fn setup(heads: usize, with_theta: bool, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars = block_tensors(C, heads, W, with_theta, &mut rng).into_iter().map(|t| tape.constant(t)).collect();
    Setup { tape, vars }
}

fn windows(tape: &mut Tape<f64>, x: &Tensor<f64>) -> WindowedTokens {
    let fm = FeatureMap { tokens: tape.constant(x.clone()), stage: 1 };
    partition_windows(tape, fm, W).unwrap()
}

/// Patch and messenger outputs after `blocks` consecutive blocks sharing one parameter set.
fn run(
    s: &mut Setup,
    x: &Tensor<f64>,
    msg: Option<&Tensor<f64>>,
    mode: Manipulation,
    region: &ShuffleRegionView,
    blocks: usize,
) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let params = block_params(&s.vars, 2, W, mode);
    let mut wt = windows(&mut s.tape, x);
    let mut m = msg.map(|t| MsgTokens { grid: s.tape.constant(t.clone()) });
    for _ in 0..blocks {
        let out = block_forward(&mut s.tape, wt, m, &params, region, &mut ForwardCtx::eval()).unwrap();
        wt = out.0;
        m = out.1;
    }
    (s.tape.value(wt.windows).clone(), m.map(|m| s.tape.value(m.grid).clone()))
}

/// Largest absolute difference inside window `(y, x)` of `[1×gh×gw×N×C]` outputs.
fn window_diff(a: &Tensor<f64>, b: &Tensor<f64>, gw: usize, y: usize, x: usize) -> f64 {
    let per = a.shape()[3] * a.shape()[4];
    let start = (y * gw + x) * per;
    a.data()[start..start + per].iter().zip(&b.data()[start..start + per]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

#[test]
fn attach_detach_round_trip() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 16, 16, 3], &mut rng);
    let wt = windows(&mut tape, &x);
    let grid = random(&[1, 8, 8, 3], &mut rng);
    let msg = MsgTokens { grid: tape.constant(grid.clone()) };
    let joined = attach_msg(&mut tape, wt, msg).unwrap();
    assert_eq!(tape.shape(joined.windows), &[1, 8, 8, 5, 3]);
    let (back, m) = detach_msg(&mut tape, joined).unwrap();
    assert_eq!(tape.value(back.windows).data(), tape.value(wt.windows).data());
    assert_eq!(tape.value(m.grid).data(), grid.data());
}

#[test]
fn attention_rows_are_distributions() {
    let mut s = setup(2, true, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 4, C], &mut rng);
    let wt = windows(&mut s.tape, &x);
    let m = MsgTokens { grid: s.tape.constant(random(&[2, 2, 2, C], &mut rng)) };
    let joined = attach_msg(&mut s.tape, wt, m).unwrap();
    let p = block_params(&s.vars, 2, W, Manipulation::Shuffle);
    let out = local_msa_with_probs(&mut s.tape, joined, &p.attn, &p.bias).unwrap();
    let probs = s.tape.value(out.probs);
    assert_eq!(probs.shape(), &[8, 2, 5, 5]);
    for row in probs.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = block_tensors(C, 1, W, true, &mut rng);
    t[6] = Tensor::zeros(t[6].shape());
    t[7] = Tensor::zeros(t[7].shape());
    let vars: Vec<Var> = t.into_iter().map(|t| tape.constant(t)).collect();
    let p = block_params(&vars, 1, W, Manipulation::None);
    let token: Vec<f64> = (0..C).map(|i| i as f64 * 0.1).collect();
    let x = Tensor::from_fn(&[1, W, W, C], |i| token[i % C]);
    let wt = windows(&mut tape, &x);
    let m = MsgTokens { grid: tape.constant(Tensor::from_fn(&[1, 1, 1, C], |i| token[i])) };
    let joined = attach_msg(&mut tape, wt, m).unwrap();
    let out = local_msa_with_probs(&mut tape, joined, &p.attn, &p.bias).unwrap();
    for &v in tape.value(out.probs).data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let y = tape.value(out.tokens.windows).data();
    for tok in y.chunks(C) {
        for (a, b) in tok.iter().zip(&y[..C]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn local_attention_ignores_other_windows() {
    let mut s = setup(2, true, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 2, 4, C], &mut rng);
    let mut zeroed = x.clone();
    for y in 0..2 {
        for xx in 2..4 {
            for c in 0..C {
                zeroed.data_mut()[(y * 4 + xx) * C + c] = 0.0;
            }
        }
    }
    let p = block_params(&s.vars, 2, W, Manipulation::None);
    let mut outs = Vec::new();
    for input in [&x, &zeroed] {
        let wt = windows(&mut s.tape, input);
        let m = MsgTokens { grid: s.tape.constant(Tensor::ones(&[1, 1, 2, C])) };
        let joined = attach_msg(&mut s.tape, wt, m).unwrap();
        let out = local_msa_with_probs(&mut s.tape, joined, &p.attn, &p.bias).unwrap();
        outs.push(s.tape.value(out.tokens.windows).clone());
    }
    assert_eq!(window_diff(&outs[0], &outs[1], 2, 0, 0), 0.0);
    assert!(window_diff(&outs[0], &outs[1], 2, 0, 1) > 0.0);
}

#[test]
fn zero_output_projections_leave_tokens_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = block_tensors(C, 2, W, true, &mut rng);
    for i in [4, 5, 12, 13] {
        t[i] = Tensor::zeros(t[i].shape());
    }
    let mut tape = Tape::new();
    let vars = t.into_iter().map(|t| tape.constant(t)).collect();
    let mut s = Setup { tape, vars };
    let x = random(&[1, 8, 8, C], &mut rng);
    let msg = random(&[1, 4, 4, C], &mut rng);
    let region = group_regions((4, 4), 2, Anchor::TopLeft, true).unwrap();
    let (out, m) = run(&mut s, &x, Some(&msg), Manipulation::Shuffle, &region, 1);
    let wt = windows(&mut s.tape, &x);
    assert_eq!(out.data(), s.tape.value(wt.windows).data());
    assert_eq!(m.unwrap().data(), shuffle_tensor(&msg, &region).unwrap().data());
}

#[test]
fn unit_regions_make_every_manipulation_the_identity() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = random(&[2, 3, 3, C], &mut rng);
    let region = group_regions((3, 3), 1, Anchor::TopLeft, true).unwrap();
    for mode in [Manipulation::Shuffle, Manipulation::Average, Manipulation::Shift, Manipulation::None] {
        let m = MsgTokens { grid: tape.constant(grid.clone()) };
        let out = manipulate_msg(&mut tape, m, &region, mode).unwrap();
        assert_eq!(tape.value(out.grid).data(), grid.data(), "{mode}");
    }
}

#[test]
fn without_exchange_windows_stay_isolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 8, 8, C], &mut rng);
    let msg = random(&[1, 4, 4, C], &mut rng);
    let mut bumped = x.clone();
    bumped.data_mut()[0] += 0.5;
    let region = group_regions((4, 4), 2, Anchor::TopLeft, true).unwrap();
    for with_msg in [true, false] {
        let mut s = setup(2, with_msg, 10);
        let m = with_msg.then_some(&msg);
        let (a, _) = run(&mut s, &x, m, Manipulation::None, &region, 2);
        let (b, _) = run(&mut s, &bumped, m, Manipulation::None, &region, 2);
        assert!(window_diff(&a, &b, 4, 0, 0) > 0.0);
        for y in 0..4 {
            for xx in 0..4 {
                if (y, xx) != (0, 0) {
                    assert_eq!(window_diff(&a, &b, 4, y, xx), 0.0);
                }
            }
        }
    }
}

#[test]
fn shuffle_spreads_a_perturbation_across_its_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[1, 8, 8, C], &mut rng);
    let msg = random(&[1, 4, 4, C], &mut rng);
    let mut bumped = x.clone();
    bumped.data_mut()[0] += 0.5;
    let region = group_regions((4, 4), 2, Anchor::TopLeft, true).unwrap();
    let mut s = setup(2, true, 13);
    let (a, _) = run(&mut s, &x, Some(&msg), Manipulation::Shuffle, &region, 2);
    let (b, _) = run(&mut s, &bumped, Some(&msg), Manipulation::Shuffle, &region, 2);
    for y in 0..4 {
        for xx in 0..4 {
            let d = window_diff(&a, &b, 4, y, xx);
            if y < 2 && xx < 2 {
                assert!(d > 0.0, "window ({y},{xx}) saw nothing");
            } else {
                assert_eq!(d, 0.0, "window ({y},{xx}) is outside the region");
            }
        }
    }
}

#[test]
fn single_block_gradients_match_finite_differences() {
    let (c, heads, w) = (4, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut params = block_tensors(c, heads, w, true, &mut rng);
    params.push(random(&[1, 4, 4, c], &mut rng));
    params.push(random(&[1, 2, 2, c], &mut rng));
    let weights = random(&[1, 2, 2, w * w, c], &mut rng);
    let msg_weights = random(&[1, 2, 2, c], &mut rng);
    let region = group_regions((2, 2), 2, Anchor::TopLeft, true).unwrap();
    let report = grad_check(
        |tape, v| {
            let p = block_params(&v[..14], heads, w, Manipulation::Shuffle);
            let wt = partition_windows(tape, FeatureMap { tokens: v[14], stage: 1 }, w)?;
            let (out, m) = block_forward(tape, wt, Some(MsgTokens { grid: v[15] }), &p, &region, &mut ForwardCtx::eval())?;
            let wa = tape.constant(weights.clone());
            let wb = tape.constant(msg_weights.clone());
            let a = tape.mul(out.windows, wa)?;
            let b = tape.mul(m.expect("messengers").grid, wb)?;
            let (a, b) = (tape.sum(a), tape.sum(b));
            tape.add(a, b)
        },
        &params,
        1e-5,
        Sampling::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
