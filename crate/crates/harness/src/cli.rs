//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use msgt_core::arch::{build_model, ArchConfig, Model};
use msgt_core::block::Manipulation;
use msgt_core::complexity::{flops_block, flops_ratio, flops_ratio_exact, model_flops, ratio_to_f64, ComplexitySpec};

use crate::ablate::{run_ablation, write_rows, AblationMode, SCOPE_NOTE};
use crate::checkpoint;
use crate::checks::{model_gradcheck, op_gradchecks};
use crate::comm::{field_table, perturbation_reach};
use crate::config::TrainConfig;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::error::{HarnessError, Result};
use crate::idx::write_idx;
use crate::train::{evaluate, train, write_run, MetricsRow};

#[derive(Debug, Parser)]
#[command(name = "msgt", version, about = "Messenger-token window transformer: training, ablation and analysis")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics.csv, model.ckpt and config.json.
    Train {
        /// Write 0 in the seconds column so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the variants of one ablation and write ablation.csv.
    Ablate {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Closed-form block and model FLOPs.
    Flops {
        #[arg(long, default_value_t = 7)]
        window: u64,
        #[arg(long, default_value_t = 384)]
        dim: u64,
        /// Token grid side for the block counts; defaults to one window.
        #[arg(long)]
        grid: Option<u64>,
        /// Preset for the model totals; defaults to the configured architecture.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Receptive-field table and perturbation reachability.
    AnalyzeComm {
        #[arg(long, default_value_t = 7)]
        window: u64,
        #[arg(long, default_value_t = 4)]
        shuffle: u64,
    },
    /// 64-bit finite-difference checks of every op and the configured model.
    Gradcheck {
        /// Entries probed per parameter tensor of the model.
        #[arg(long, default_value_t = 4)]
        entries: usize,
    },
    /// Write the synthetic dataset as IDX files.
    GenData {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    Ok(dir)
}

fn fmt_row(r: &MetricsRow) -> String {
    format!(
        "epoch {:>3} step {:>5} {:<5} loss {:.4} top1 {:.4} lr {:.2e} {:.1}s",
        r.epoch, r.step, r.split, r.loss, r.top1, r.lr, r.seconds
    )
}

fn check_threads() -> Result<Option<usize>> {
    match std::env::var("MSGT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| HarnessError::Config(format!("MSGT_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    check_threads()?;
    let mut cfg = load_config(cli)?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(HarnessError::io("<stdout>"));
    match &cli.command {
        Command::Train { no_timing, steps } => {
            if *no_timing {
                cfg.schedule.record_wall_clock = false;
            }
            if let Some(s) = steps {
                cfg.schedule.total_steps = *s;
            }
            cfg.validate()?;
            let dir = out_dir(cli, "runs/train")?;
            let (tr, va) = cfg.datasets()?;
            w(out, format!("{}", cfg.arch_config()?))?;
            let mut lines = Vec::new();
            let outcome = train(&cfg, &tr, &va, Some(&mut |r: &MetricsRow| lines.push(fmt_row(r))))?;
            for l in lines {
                w(out, l)?;
            }
            write_run(&outcome, &cfg, &dir)?;
            w(out, format!("val top1 {:.4} loss {:.4}; wrote {}", outcome.final_val.top1, outcome.final_val.loss, dir.display()))?;
        }
        Command::Eval { checkpoint: path } => {
            cfg.validate()?;
            let arch = cfg.arch_config()?;
            let mut model: Model<f32> = build_model(&arch, cfg.seed)?;
            checkpoint::load_into(&mut model, path)?;
            let (_, va) = cfg.datasets()?;
            let r = evaluate(&model, &va)?;
            w(out, format!("val loss {:.4} top1 {:.4} over {} images", r.loss, r.top1, va.len()))?;
        }
        Command::Ablate { mode, steps } => {
            let mode: AblationMode = mode.parse()?;
            if let Some(s) = steps {
                cfg.schedule.total_steps = *s;
            }
            cfg.validate()?;
            let dir = out_dir(cli, "runs/ablate")?;
            let (tr, va) = cfg.datasets()?;
            w(out, format!("note: {SCOPE_NOTE}"))?;
            let rows = run_ablation(mode, &cfg, &tr, &va, None)?;
            w(out, "mode,variant,params,msg_params,seq_len,val_loss,val_top1".into())?;
            for r in &rows {
                w(
                    out,
                    format!(
                        "{},{},{},{},{},{:.4},{:.4}",
                        r.mode, r.variant, r.params, r.msg_params, r.seq_len, r.val_loss, r.val_top1
                    ),
                )?;
            }
            write_rows(&rows, &dir.join("ablation.csv"))?;
        }
        Command::Flops { window, dim, grid, arch } => {
            let side = grid.unwrap_or(*window);
            let without = flops_block(&ComplexitySpec::new(side, side, *window, *dim, false))?;
            let with = flops_block(&ComplexitySpec::new(side, side, *window, *dim, true))?;
            let r = flops_ratio(*window, *dim);
            let exact = flops_ratio_exact(*window, *dim);
            w(out, format!("block on {side}x{side} tokens, window {window}, {dim} channels"))?;
            w(out, format!("  without messengers: {without}"))?;
            w(out, format!("  with messengers:    {with}"))?;
            w(out, format!("  increase ratio (closed form): {r} ≈ {:.4}%", 100.0 * ratio_to_f64(r)))?;
            w(out, format!("  increase ratio (exact count): {exact} ≈ {:.4}%", 100.0 * ratio_to_f64(exact)))?;
            let arch_cfg = match arch {
                Some(name) => ArchConfig::preset(name, 1000)?,
                None if cli.config.is_some() => cfg.arch_config()?,
                None => ArchConfig::msg_t(1000),
            };
            let f = model_flops(&arch_cfg)?;
            w(out, format!("model {arch_cfg}"))?;
            for (i, s) in f.stages.iter().enumerate() {
                w(out, format!("  stage {}: {}x{} grid, {} blocks: {} (merge conv {})", i + 1, s.grid.0, s.grid.1, s.blocks, s.blocks_raw, s.merge_conv))?;
            }
            w(out, format!("  patch embed conv: {}", f.patch_embed_conv))?;
            w(out, format!("  block closed forms: {:.3} G", f.raw_total() as f64 / 1e9))?;
            w(out, format!("  with convolutions and head: {:.3} G", f.conv_inclusive_total() as f64 / 1e9))?;
            let model: Model<f32> = build_model(&arch_cfg, 0)?;
            let c = model.count_params();
            w(out, format!("  parameters: {} ({} messenger seed, {} messenger-related)", c.total, c.msg_init, c.msg_related))?;
        }
        Command::AnalyzeComm { window, shuffle } => {
            w(out, format!("receptive field after two attention rounds, window {window}"))?;
            w(out, "  S  shifted-window  messenger-shuffle".into())?;
            for row in field_table(*window, (*shuffle).max(8))? {
                w(out, format!("  {:<2} {:>14.2} {:>18.2}", row.shuffle, ratio_to_f64(row.swin), ratio_to_f64(row.msg)))?;
            }
            let reach_w = (*window as usize).min(4);
            let s = *shuffle as usize;
            let shuffled = perturbation_reach(reach_w, s, true, Manipulation::Shuffle, cli.seed.unwrap_or(0))?;
            let isolated = perturbation_reach(reach_w, s, false, Manipulation::None, cli.seed.unwrap_or(0))?;
            w(out, format!("perturbation of window (0,0), two blocks, window {reach_w}, shuffle {s}:"))?;
            w(
                out,
                format!(
                    "  shuffle: reached {} of {} other region windows; windows outside the region unchanged: {}",
                    shuffled.reached().iter().filter(|p| shuffled.region.contains(p)).count(),
                    shuffled.region.len() - 1,
                    shuffled.reached().iter().all(|p| shuffled.region.contains(p))
                ),
            )?;
            w(out, format!("  no messengers: reached {} other windows", isolated.reached().len()))?;
            if !shuffled.fills_region() || !isolated.reached().is_empty() {
                return Err(HarnessError::Check("reachability property violated".into()));
            }
        }
        Command::Gradcheck { entries } => {
            let mut worst_op = 0.0f64;
            for (name, r) in op_gradchecks(cfg.seed)? {
                w(out, format!("  {name:<14} max rel error {:.3e} over {} entries", r.max_rel_error, r.checked))?;
                worst_op = worst_op.max(r.max_rel_error);
            }
            let arch = cfg.arch_config()?;
            let r = model_gradcheck(&arch, *entries, cfg.seed)?;
            w(out, format!("  model {:<8} max rel error {:.3e} over {} entries", arch.name, r.max_rel_error, r.checked))?;
            if worst_op >= 1e-6 || r.max_rel_error >= 1e-3 {
                return Err(HarnessError::Check("gradient check exceeded its tolerance".into()));
            }
        }
        Command::GenData { n, size, noise } => {
            let dir = out_dir(cli, "data")?;
            let spec = SyntheticSpec {
                n: *n,
                size: size.unwrap_or(cfg.data.size),
                noise: noise.unwrap_or(cfg.data.noise),
                seed: cfg.data.seed,
            };
            let ds = generate_synthetic(&spec)?;
            let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
            write_idx(&ds, &images, &labels)?;
            w(out, format!("wrote {} images of {}x{} to {}", ds.len(), spec.size, spec.size, dir.display()))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = write!(out, "{}", e.render());
            } else {
                let _ = write!(err, "{}", e.render());
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
