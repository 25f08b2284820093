mod common;

use common::{block_params, block_tensors, random};
use msgt_core::arch::{build_model, ArchConfig, Model};
use msgt_core::block::{block_forward, ForwardCtx, Manipulation, MsgTokens};
use msgt_core::complexity::{
    flops_block, flops_ratio, flops_ratio_exact, model_flops, msg_init_params, receptive_field, ratio_to_f64,
    ComplexitySpec, Scheme,
};
use msgt_core::tensor::counter;
use msgt_core::window::{group_regions, partition_windows, Anchor, FeatureMap};
use msgt_core::{Tape, Tensor};
use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Multiply-accumulates of one block, counted layer by layer.
fn block_macs(h: u64, w: u64, win: u64, c: u64, msg: bool) -> u64 {
    let windows = h * w / (win * win);
    let n = win * win + u64::from(msg);
    let qkv = n * c * 3 * c;
    let scores = n * n * c;
    let mix = n * n * c;
    let proj = n * c * c;
    let mlp = n * c * 4 * c + n * 4 * c * c;
    windows * (qkv + scores + mix + proj + mlp)
}

#[test]
fn block_counts_match_layer_sums() {
    for (h, w, win, c) in [(7, 7, 7, 384), (56, 56, 7, 64), (32, 32, 4, 16), (12, 8, 2, 3)] {
        for msg in [false, true] {
            let spec = ComplexitySpec::new(h, w, win, c, msg);
            assert_eq!(flops_block(&spec).unwrap(), block_macs(h, w, win, c, msg));
        }
    }
    assert_eq!(flops_block(&ComplexitySpec::new(7, 7, 7, 384, false)).unwrap(), 88_548_096);
}

#[test]
fn closed_form_ratio_values() {
    assert_eq!(flops_ratio(7, 384), Ratio::new(2354, 115297));
    assert!((ratio_to_f64(flops_ratio(7, 384)) - 0.020417).abs() < 5e-7);
    assert_eq!(flops_ratio(7, 96), Ratio::new(626, 30625));
}

#[test]
fn ratio_sweep_against_block_counts() {
    for w in [2u64, 4, 7, 14] {
        for c in [16u64, 96, 384, 768] {
            for (h, wd) in [(w, w), (4 * w, 2 * w)] {
                let without = flops_block(&ComplexitySpec::new(h, wd, w, c, false)).unwrap() as i128;
                let with = flops_block(&ComplexitySpec::new(h, wd, w, c, true)).unwrap() as i128;
                assert_eq!(flops_ratio_exact(w, c) * without, Ratio::from_integer(with - without));
                let gap = flops_ratio_exact(w, c) - flops_ratio(w, c);
                let (w, c) = (w as i128, c as i128);
                assert_eq!(gap, Ratio::new(w * w, 6 * w * w * c + w.pow(4)));
            }
        }
    }
}

#[test]
fn ratio_is_independent_of_grid_size() {
    let r = |h| {
        let a = flops_block(&ComplexitySpec::new(h, h, 7, 96, false)).unwrap() as i128;
        let b = flops_block(&ComplexitySpec::new(h, h, 7, 96, true)).unwrap() as i128;
        Ratio::new(b - a, a)
    };
    assert_eq!(r(56), r(14));
}

#[test]
fn channel_doubling_scales_quadratic_terms() {
    let quad = |c: u64| 4 * 49 * c * c + 2 * 49 * 4 * c * c;
    let f = |c| flops_block(&ComplexitySpec::new(7, 7, 7, c, false)).unwrap();
    assert_eq!(4 * f(384) - f(768), 4 * 2 * 2401 * 384 - 2 * 2401 * 768);
    assert_eq!(quad(768), 4 * quad(384));
}

#[test]
fn receptive_fields() {
    assert_eq!(receptive_field(Scheme::SwinShift, 7, 0).unwrap(), Ratio::new(11025, 100));
    assert_eq!(receptive_field(Scheme::MsgShuffle, 7, 4).unwrap(), Ratio::from_integer(784));
    for w in 1..=14 {
        assert_eq!(receptive_field(Scheme::MsgShuffle, w, 1).unwrap(), Ratio::from_integer((w * w) as i128));
        for s in 2..=8 {
            assert!(receptive_field(Scheme::MsgShuffle, w, s).unwrap() >= receptive_field(Scheme::SwinShift, w, s).unwrap());
        }
    }
}

#[test]
fn msg_t_model_flops_near_published_total() {
    let f = model_flops(&ArchConfig::msg_t(1000)).unwrap();
    for total in [f.raw_total(), f.conv_inclusive_total()] {
        assert!((total as f64 - 3.8e9).abs() / 3.8e9 < 0.1, "{total}");
    }
    assert_eq!(msg_init_params(96), 1536);
}

#[test]
fn doubling_resolution_quadruples_stage_counts() {
    let small = model_flops(&ArchConfig::msg_t(1000)).unwrap();
    let large = model_flops(&ArchConfig::msg_t(1000).with_input(448, 448)).unwrap();
    for (a, b) in small.stages.iter().zip(&large.stages) {
        assert_eq!(b.blocks_raw, 4 * a.blocks_raw);
    }
}

#[test]
fn instrumented_block_matches_closed_form() {
    let (h, w, c, heads) = (32usize, 4usize, 16usize, 1usize);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for msg in [false, true] {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<_> = block_tensors(c, heads, w, msg, &mut rng).into_iter().map(|t| tape.constant(t)).collect();
        let p = block_params(&vars, heads, w, Manipulation::Shuffle);
        let fm = FeatureMap { tokens: tape.constant(random(&[1, h, h, c], &mut rng)), stage: 1 };
        let wt = partition_windows(&mut tape, fm, w).unwrap();
        let m = msg.then(|| MsgTokens { grid: tape.constant(Tensor::zeros(&[1, h / w, h / w, c])) });
        let region = group_regions((h / w, h / w), 2, Anchor::TopLeft, true).unwrap();
        counter::reset();
        block_forward(&mut tape, wt, m, &p, &region, &mut ForwardCtx::eval()).unwrap();
        let counts = counter::snapshot();
        let spec = ComplexitySpec::new(h as u64, h as u64, w as u64, c as u64, msg);
        assert_eq!(counts.matmul_macs, flops_block(&spec).unwrap());
        assert_eq!(counts.conv_macs, 0);
        assert!(counts.unmodeled > 0);
    }
}

#[test]
fn instrumented_micro_model_matches_model_flops() {
    let cfg = ArchConfig::micro(4);
    let model: Model<f32> = build_model(&cfg, 0).unwrap();
    counter::reset();
    model.predict(&Tensor::zeros(&[1, 128, 128, 3])).unwrap();
    let counts = counter::snapshot();
    let f = model_flops(&cfg).unwrap();
    assert_eq!(counts.matmul_macs, f.raw_total() + f.head_macs);
    let convs = f.patch_embed_conv + f.stages.iter().map(|s| s.merge_conv).sum::<u64>();
    assert_eq!(2 * counts.conv_macs, convs);
}
