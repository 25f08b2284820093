use msgt_harness::ablate::{check_knob, run_ablation, variants, AblationMode, SWEEP_SIZES};
use msgt_harness::config::{StageOverride, TrainConfig};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.train = 4;
    cfg.data.val = 4;
    cfg.schedule.batch_size = 2;
    cfg.schedule.total_steps = 2;
    cfg.schedule.warmup_steps = 1;
    cfg.schedule.eval_every = 2;
    cfg
}

#[test]
fn every_variant_changes_only_its_knob() {
    let base = tiny();
    let reference = base.arch_config().unwrap();
    for mode in AblationMode::ALL {
        for (label, cfg) in variants(mode, &base) {
            check_knob(mode, &reference, &cfg.arch_config().unwrap()).unwrap_or_else(|e| panic!("{mode} {label}: {e}"));
        }
    }
}

#[test]
fn knob_check_rejects_extra_changes() {
    let base = tiny();
    let reference = base.arch_config().unwrap();
    let mut deeper = base.clone();
    deeper.use_msg = false;
    deeper.stages = Some(vec![
        StageOverride { dim: 16, heads: 1, blocks: 2 },
        StageOverride { dim: 32, heads: 2, blocks: 1 },
        StageOverride { dim: 64, heads: 4, blocks: 2 },
        StageOverride { dim: 128, heads: 8, blocks: 1 },
    ]);
    let deeper = deeper.arch_config().unwrap();
    assert!(check_knob(AblationMode::NoMsg, &reference, &deeper).is_err());
    let mut shuffled = base.clone();
    shuffled.manipulation = "none".into();
    shuffled.shuffle_sizes = Some(vec![4, 2, 2, 1]);
    assert!(check_knob(AblationMode::MsgNoShuffle, &reference, &shuffled.arch_config().unwrap()).is_err());
}

#[test]
fn no_msg_row_has_no_messenger_parameters() {
    let base = tiny();
    let (tr, va) = base.datasets().unwrap();
    let rows = run_ablation(AblationMode::NoMsg, &base, &tr, &va, None).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].msg_params, 0);
    assert_eq!(rows[0].seq_len, 16);
}

#[test]
fn sweep_emits_one_row_per_size() {
    let base = tiny();
    let (tr, va) = base.datasets().unwrap();
    let rows = run_ablation(AblationMode::ShuffleSizeSweep, &base, &tr, &va, None).unwrap();
    assert_eq!(rows.len(), SWEEP_SIZES.len());
    assert_eq!(rows[0].variant, "2/2/2/1");
    assert!(rows.iter().all(|r| r.seq_len == 17 && r.msg_params > 0));
}

#[test]
fn mode_names_round_trip() {
    for mode in AblationMode::ALL {
        assert_eq!(mode.name().parse::<AblationMode>().unwrap(), mode);
    }
    assert!("msg-spin".parse::<AblationMode>().is_err());
}
