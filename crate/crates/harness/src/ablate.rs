//! Ablation driver: trains one variant per configuration with a shared seed
//! and reports the comparison.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use msgt_core::arch::{build_model, ArchConfig, Model};
use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{HarnessError, Result};
use crate::train::{evaluate, train, EvalResult, Progress};

/// Printed with every ablation report.
pub const SCOPE_NOTE: &str = "desk-scale comparison on synthetic textures only; large-scale classification \
accuracies, detection AP, hardware latencies and the full-scale ordering of the messenger manipulations are \
not reproduced";

pub const SWEEP_SIZES: [[usize; 4]; 3] = [[2, 2, 2, 1], [4, 2, 2, 1], [4, 4, 2, 1]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    NoMsg,
    MsgNoShuffle,
    MsgShuffle,
    MsgAverage,
    MsgShift,
    RerandomizeInputMsg,
    ShuffleSizeSweep,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::NoMsg,
        AblationMode::MsgNoShuffle,
        AblationMode::MsgShuffle,
        AblationMode::MsgAverage,
        AblationMode::MsgShift,
        AblationMode::RerandomizeInputMsg,
        AblationMode::ShuffleSizeSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::NoMsg => "no-msg",
            AblationMode::MsgNoShuffle => "msg-noshuffle",
            AblationMode::MsgShuffle => "msg-shuffle",
            AblationMode::MsgAverage => "msg-average",
            AblationMode::MsgShift => "msg-shift",
            AblationMode::RerandomizeInputMsg => "rerandomize-input-msg",
            AblationMode::ShuffleSizeSweep => "shuffle-size-sweep",
        }
    }
}

impl FromStr for AblationMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            HarnessError::Config(format!("unknown ablation mode {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter and shape differences of a variant against the reference model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuralDiff {
    pub reference_params: usize,
    pub variant_params: usize,
    /// Tensors missing from one side or with different shapes.
    pub differing: Vec<String>,
}

pub fn structural_diff(reference: &ArchConfig, variant: &ArchConfig) -> Result<StructuralDiff> {
    let a: Model<f32> = build_model(reference, 0)?;
    let b: Model<f32> = build_model(variant, 0)?;
    let mut differing = Vec::new();
    for p in a.params() {
        match b.param(&p.name) {
            Some(q) if q.tensor.shape() == p.tensor.shape() => {}
            _ => differing.push(p.name.clone()),
        }
    }
    differing.extend(b.params().iter().filter(|q| a.param(&q.name).is_none()).map(|q| q.name.clone()));
    Ok(StructuralDiff {
        reference_params: a.count_params().total,
        variant_params: b.count_params().total,
        differing,
    })
}

fn is_msg_tensor(name: &str) -> bool {
    name == "msg_init" || name.ends_with(".attn.msg_bias")
}

/// Asserts that `variant` differs from `reference` only through the named knob.
pub fn check_knob(mode: AblationMode, reference: &ArchConfig, variant: &ArchConfig) -> Result<StructuralDiff> {
    let mut reset = variant.clone();
    match mode {
        AblationMode::NoMsg => reset.use_msg = reference.use_msg,
        AblationMode::MsgNoShuffle | AblationMode::MsgShuffle | AblationMode::MsgAverage | AblationMode::MsgShift => {
            reset.manipulation = reference.manipulation
        }
        AblationMode::ShuffleSizeSweep => {
            for (s, r) in reset.stages.iter_mut().zip(&reference.stages) {
                s.shuffle_size = r.shuffle_size;
            }
        }
        AblationMode::RerandomizeInputMsg => {}
    }
    if reset != *reference {
        return Err(HarnessError::Check(format!("{mode} changes configuration beyond its knob")));
    }
    let diff = structural_diff(reference, variant)?;
    let ok = match mode {
        AblationMode::NoMsg => {
            let reference_model: Model<f32> = build_model(reference, 0)?;
            diff.differing.iter().all(|n| is_msg_tensor(n))
                && diff.reference_params - diff.variant_params == reference_model.count_params().msg_related
        }
        _ => diff.differing.is_empty(),
    };
    if !ok {
        return Err(HarnessError::Check(format!(
            "{mode} changes more than its knob: {} vs {} parameters, differing tensors {:?}",
            diff.reference_params, diff.variant_params, diff.differing
        )));
    }
    Ok(diff)
}

/// Configurations trained for `mode`, labelled.
pub fn variants(mode: AblationMode, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match mode {
        AblationMode::NoMsg => vec![("no-msg".into(), with(&|c| c.use_msg = false))],
        AblationMode::MsgNoShuffle => vec![("none".into(), with(&|c| c.manipulation = "none".into()))],
        AblationMode::MsgShuffle => vec![("shuffle".into(), with(&|c| c.manipulation = "shuffle".into()))],
        AblationMode::MsgAverage => vec![("average".into(), with(&|c| c.manipulation = "average".into()))],
        AblationMode::MsgShift => vec![("shift".into(), with(&|c| c.manipulation = "shift".into()))],
        AblationMode::RerandomizeInputMsg => vec![("trained".into(), base.clone())],
        AblationMode::ShuffleSizeSweep => SWEEP_SIZES
            .iter()
            .map(|s| {
                let label = s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/");
                (label, with(&|c| c.shuffle_sizes = Some(s.to_vec())))
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub variant: String,
    pub params: usize,
    pub msg_params: usize,
    pub seq_len: usize,
    pub val_loss: f64,
    pub val_top1: f64,
}

/// Evaluates `model` as trained and with its messenger seed tokens redrawn from each seed.
pub fn rerandomize_report(model: &Model<f32>, val: &Dataset, seeds: &[u64]) -> Result<(EvalResult, Vec<EvalResult>)> {
    let base = evaluate(model, val)?;
    let mut out = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut m = model.clone();
        m.rerandomize_msg_init(s);
        out.push(evaluate(&m, val)?);
    }
    Ok((base, out))
}

fn row(mode: AblationMode, variant: &str, model: &Model<f32>, r: EvalResult) -> AblationRow {
    let cfg = model.config();
    let w = cfg.stages[0].window_size;
    let count = model.count_params();
    AblationRow {
        mode: mode.name().into(),
        variant: variant.into(),
        params: count.total,
        msg_params: count.msg_related,
        seq_len: w * w + usize::from(cfg.use_msg),
        val_loss: r.loss,
        val_top1: r.top1,
    }
}

pub fn run_ablation(
    mode: AblationMode,
    base: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    mut progress: Option<Progress>,
) -> Result<Vec<AblationRow>> {
    let reference = base.arch_config()?;
    let mut rows = Vec::new();
    for (label, cfg) in variants(mode, base) {
        check_knob(mode, &reference, &cfg.arch_config()?)?;
        let outcome = train(&cfg, train_set, val, progress.as_mut().map(|p| &mut **p as Progress))?;
        rows.push(row(mode, &label, &outcome.model, outcome.final_val));
        if mode == AblationMode::RerandomizeInputMsg {
            let seeds: Vec<u64> = (1..=3).map(|i| cfg.seed.wrapping_add(1000 * i)).collect();
            let (_, redrawn) = rerandomize_report(&outcome.model, val, &seeds)?;
            for (s, r) in seeds.iter().zip(redrawn) {
                rows.push(row(mode, &format!("rerandomized seed {s}"), &outcome.model, r));
            }
        }
    }
    Ok(rows)
}

pub fn write_rows(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}
