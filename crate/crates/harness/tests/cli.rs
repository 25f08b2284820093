use std::process::Command;

use msgt_harness::cli::run;

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("msgt").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn flops_prints_ratio_and_totals() {
    let (code, out, _) = call(&["flops", "--window", "7", "--dim", "384"]);
    assert_eq!(code, 0);
    assert!(out.contains("2354/115297"), "{out}");
    assert!(out.contains("2.0417%"), "{out}");
    assert!(out.contains("25084196"), "{out}");
}

#[test]
fn analyze_comm_prints_fields() {
    let (code, out, err) = call(&["analyze-comm", "--window", "7", "--shuffle", "4"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("110.25") && out.contains("784.00"), "{out}");
    assert!(out.contains("reached 15 of 15"), "{out}");
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(call(&[]).0, 1);
    assert_eq!(call(&["flops", "--bogus"]).0, 1);
    assert_eq!(call(&["ablate", "--mode", "spin"]).0, 1);
    assert_eq!(call(&["flops", "--window", "0"]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"schedule":{"batch_size":0}}"#).unwrap();
    let (code, _, err) = call(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(code, 1);
    assert!(err.contains("batch size"), "{err}");
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let (code, _, err) = call(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("none.ckpt"), "{err}");
}

#[test]
fn train_twice_without_timing_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("nano.json");
    std::fs::write(
        &cfg,
        r#"{"arch":"nano","data":{"size":64,"train":8,"val":8},
            "schedule":{"batch_size":4,"total_steps":3,"warmup_steps":1,"eval_every":3}}"#,
    )
    .unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let (code, _, err) = call(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "train", "--no-timing"]);
        assert_eq!(code, 0, "{err}");
        runs.push((std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("model.ckpt")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let ckpt = dir.path().join("a/model.ckpt");
    let (code, out, err) = call(&["--config", cfg.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("over 8 images"), "{out}");
}

#[test]
fn binary_exits_one_without_arguments() {
    let status = Command::new(env!("CARGO_BIN_EXE_msgt")).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = Command::new(env!("CARGO_BIN_EXE_msgt")).env("MSGT_THREADS", "zero").args(["flops"]).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
}
