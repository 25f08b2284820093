use msgt_harness::config::{MsgInputPolicy, StageOverride, TrainConfig};
use msgt_harness::HarnessError;

fn rejects(f: impl Fn(&mut TrainConfig), needle: &str) {
    let mut cfg = TrainConfig::default();
    f(&mut cfg);
    let err = cfg.validate().unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert!(err.to_string().contains(needle), "{err} should mention {needle:?}");
}

#[test]
fn default_is_valid_and_round_trips_through_json() {
    let cfg = TrainConfig::default();
    cfg.validate().unwrap();
    assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn partial_json_fills_defaults() {
    let cfg = TrainConfig::from_json(r#"{"arch":"nano","msg_input_policy":"frozen-random","data":{"size":64}}"#).unwrap();
    assert_eq!(cfg.arch, "nano");
    assert_eq!(cfg.msg_input_policy, MsgInputPolicy::FrozenRandom);
    assert_eq!(cfg.data.train, TrainConfig::default().data.train);
    assert_eq!(cfg.arch_config().unwrap().input_size, (64, 64));
}

#[test]
fn padded_window_sizes_are_accepted() {
    let cfg = TrainConfig { window_size: Some(5), ..Default::default() };
    cfg.validate().unwrap();
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(matches!(TrainConfig::from_json(r#"{"lr":1}"#), Err(HarnessError::Config(_))));
}

#[test]
fn invalid_settings_name_the_constraint() {
    rejects(|c| c.schedule.batch_size = 0, "batch size");
    rejects(|c| c.schedule.warmup_steps = c.schedule.total_steps, "warmup");
    rejects(|c| c.schedule.label_smoothing = 1.0, "smoothing");
    rejects(|c| c.optimizer.beta1 = 1.0, "betas");
    rejects(|c| c.data.num_classes = 10, "classes");
    rejects(|c| c.arch = "huge".into(), "huge");
    rejects(|c| c.shuffle_sizes = Some(vec![2, 2]), "shuffle sizes");
    rejects(|c| c.manipulation = "spin".into(), "spin");
    rejects(
        |c| {
            c.stages = Some(
                [(16, 1), (32, 3), (64, 4), (128, 8)]
                    .map(|(dim, heads)| StageOverride { dim, heads, blocks: 1 })
                    .to_vec(),
            )
        },
        "heads",
    );
    rejects(|c| c.stages = Some(vec![StageOverride { dim: 16, heads: 1, blocks: 1 }]), "stages");
}
