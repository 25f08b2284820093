//! Training and evaluation loops.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use msgt_core::arch::{build_model, Model};
use msgt_core::block::ForwardCtx;
use msgt_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{MsgInputPolicy, TrainConfig};
use crate::data::{BatchSampler, Dataset};
use crate::error::{HarnessError, Result};
use crate::optim::AdamW;

pub const METRICS_HEADER: [&str; 7] = ["epoch", "step", "split", "loss", "top1", "lr", "seconds"];
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean unsmoothed cross-entropy and top-1 accuracy in eval mode.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<EvalResult> {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let (_, out) = model.forward(&mut tape, &images, &mut ForwardCtx::eval())?;
        let logits = out.logits()?;
        let loss = tape.cross_entropy(logits, &labels, 0.0)?;
        loss_sum += f64::from(tape.value(loss).data()[0]) * chunk.len() as f64;
        let k = tape.shape(logits)[1];
        for (row, &l) in tape.value(logits).data().chunks(k).zip(&labels) {
            correct += usize::from(argmax(row) == l);
        }
    }
    Ok(EvalResult { loss: loss_sum / data.len() as f64, top1: correct as f64 / data.len() as f64 })
}

/// Loss of one optimization step, or the batch gradients only.
pub struct StepOutput {
    pub loss: f32,
    pub correct: usize,
    pub grads: Vec<Option<Vec<f32>>>,
}

pub fn train_step(
    model: &Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    smoothing: f64,
    ctx: &mut ForwardCtx,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let (vars, out) = model.forward(&mut tape, images, ctx)?;
    let logits = out.logits()?;
    let loss = tape.cross_entropy(logits, labels, smoothing)?;
    let k = tape.shape(logits)[1];
    let correct = tape.value(logits).data().chunks(k).zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    let mut grads = tape.backward(loss)?;
    let grads = vars.iter().map(|&v| grads.take(v)).collect();
    Ok(StepOutput { loss: tape.value(loss).data()[0], correct, grads })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub rows: Vec<MetricsRow>,
    pub final_val: EvalResult,
    pub seconds: f64,
}

/// Progress callback receiving every metrics row as it is produced.
pub type Progress<'a> = &'a mut dyn FnMut(&MetricsRow);

/// Trains on `train`, evaluating on `val` every `eval_every` steps and at the end.
pub fn train(cfg: &TrainConfig, train: &Dataset, val: &Dataset, mut progress: Option<Progress>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.arch_config()?;
    if (train.height, train.width) != arch.input_size {
        return Err(HarnessError::Config(format!(
            "images are {}×{}, the architecture expects {:?}",
            train.height, train.width, arch.input_size
        )));
    }
    let mut model: Model<f32> = build_model(&arch, cfg.seed)?;
    if cfg.msg_input_policy == MsgInputPolicy::FrozenRandom {
        model.set_msg_trainable(false);
    }
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let schedule = cfg.lr_schedule();
    let s = &cfg.schedule;
    let mut sampler = BatchSampler::new(train.len(), s.batch_size, cfg.seed ^ 0x5eed);
    let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd5));
    let start = Instant::now();
    let clock = |start: &Instant| if s.record_wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
    let steps_per_epoch = train.len().div_ceil(s.batch_size);
    let mut rows = Vec::new();
    let (mut loss_acc, mut correct_acc, mut seen) = (0.0f64, 0usize, 0usize);
    let mut emit = |row: MetricsRow, rows: &mut Vec<MetricsRow>| {
        if let Some(p) = progress.as_mut() {
            p(&row);
        }
        rows.push(row);
    };
    let mut final_val = EvalResult { loss: f64::NAN, top1: 0.0 };
    for step in 0..s.total_steps {
        let lr = schedule.lr(step);
        let idx = sampler.next_batch();
        let (images, labels) = train.batch(&idx);
        let out = train_step(&model, &images, &labels, s.label_smoothing, &mut ctx)?;
        if !out.loss.is_finite() {
            return Err(HarnessError::Diverged { step: step + 1, loss: out.loss });
        }
        opt.step(model.params_mut(), &out.grads, lr);
        loss_acc += f64::from(out.loss);
        correct_acc += out.correct;
        seen += labels.len();
        let done = step + 1;
        if done % s.eval_every == 0 || done == s.total_steps {
            let epoch = (done - 1) / steps_per_epoch;
            let batches = seen / s.batch_size;
            let train_row = MetricsRow {
                epoch,
                step: done,
                split: "train".into(),
                loss: loss_acc / batches as f64,
                top1: correct_acc as f64 / seen as f64,
                lr,
                seconds: clock(&start),
            };
            emit(train_row, &mut rows);
            (loss_acc, correct_acc, seen) = (0.0, 0, 0);
            let mut eval_model = model.clone();
            if cfg.msg_input_policy == MsgInputPolicy::RerandomizeAtEval {
                eval_model.rerandomize_msg_init(cfg.seed ^ 0xe7a1);
            }
            final_val = evaluate(&eval_model, val)?;
            let val_row = MetricsRow {
                epoch,
                step: done,
                split: "val".into(),
                loss: final_val.loss,
                top1: final_val.top1,
                lr,
                seconds: clock(&start),
            };
            emit(val_row, &mut rows);
        }
    }
    Ok(TrainOutcome { model, rows, final_val, seconds: start.elapsed().as_secs_f64() })
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}

/// Writes `metrics.csv`, `model.ckpt` and `config.json` into `out`.
pub fn write_run(outcome: &TrainOutcome, cfg: &TrainConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    write_metrics(&outcome.rows, &out.join("metrics.csv"))?;
    checkpoint::save(&outcome.model, &out.join("model.ckpt"))?;
    let path = out.join("config.json");
    let mut f = fs::File::create(&path).map_err(HarnessError::io(&path))?;
    writeln!(f, "{}", cfg.to_json()).map_err(HarnessError::io(&path))
}
