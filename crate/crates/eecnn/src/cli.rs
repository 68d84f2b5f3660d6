//! Command-line surface: dataset generation and splitting, the two
//! training stages, early-exit attachment, model splitting, evaluation,
//! benchmarking, and frame inference.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::{benchmark, BenchTarget};
use crate::cascade::{
    calibrate_exit_threshold, process_frame_impl, CascadeConfig, PatchDecision,
};
use crate::data::{
    read_dataset, records_to_batch, split_dataset, write_dataset, PatchRecord,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cascade, evaluate_model, EvalReport};
use crate::graph::build_ball_cnn;
use crate::loss::LossWeights;
use crate::synth::{generate_with, GenConfig};
use crate::train::{train_early_exit, train_main, TrainConfig};
use crate::weights_io::{load_weights, save_weights};

#[derive(Parser)]
#[command(name = "eecnn", version, about = "Early-exit patch classifier: train, split, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared across subcommands; file config values are overridden by
/// explicit flags.
#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// Seed for all deterministic randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Early-exit continuation threshold.
    #[arg(long)]
    tau_ee: Option<f32>,
    /// Stop-on-detection threshold.
    #[arg(long)]
    tau_detect: Option<f32>,
    /// Final classification threshold.
    #[arg(long)]
    tau_accept: Option<f32>,
    /// False-positive quadrant weight.
    #[arg(long)]
    wfp: Option<f32>,
    /// False-negative quadrant weight.
    #[arg(long)]
    wfn: Option<f32>,
    /// Focal exponent.
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Optimizer step size.
    #[arg(long)]
    lr: Option<f32>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic patch dataset.
    GenData {
        #[arg(long)]
        n: usize,
        /// Positive (ball) fraction.
        #[arg(long, default_value_t = 0.43)]
        pos: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Split a dataset into train and validation files.
    SplitData {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        frac: f64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        val_out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train the full network on the composite loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Separate validation file; without it, --frac splits --data.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        frac: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write per-epoch history CSV here.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        no_augment: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Attach the early-exit branch to a trained model.
    AttachEe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Freeze the trunk and train the early-exit head.
    TrainEe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        frac: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        no_augment: bool,
        /// Calibrate tau_ee on the validation set afterwards, allowing at
        /// most this recall drop in percentage points.
        #[arg(long)]
        calibrate_max_recall_drop: Option<f64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Split an exit-enhanced model into head and tail files.
    SplitModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        head_out: PathBuf,
        #[arg(long)]
        tail_out: PathBuf,
    },
    /// Evaluate a model (or its cascade) on a labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the early-exit cascade instead of the plain model.
        #[arg(long)]
        cascade: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Benchmark an inference path on a dataset's patches.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// full-cnn | full-ee-cnn | head-only | cascade
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Use at most this many patches.
        #[arg(long, default_value_t = 256)]
        limit: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Classify a hypothesis list (a PTCH file in frame order).
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

/// Merged tunables from defaults, config file, and flags.
struct Settings {
    seed: u64,
    cascade: CascadeConfig,
    main_weights: LossWeights,
    ee_weights: LossWeights,
    train: TrainConfig,
    gen_blur_prob: f64,
    gen_occlusion_prob: f64,
    gen_noise: f32,
}

impl Settings {
    fn resolve(common: &CommonOpts) -> Result<Settings> {
        let mut s = Settings {
            seed: 0,
            cascade: CascadeConfig::default(),
            main_weights: LossWeights::main_stage(),
            ee_weights: LossWeights::ee_stage(),
            train: TrainConfig::default(),
            gen_blur_prob: 0.3,
            gen_occlusion_prob: 0.25,
            gen_noise: 0.02,
        };
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::format(lineno as u64 + 1, format!("config line {}: expected key=value", lineno + 1))
                })?;
                s.apply(key.trim(), value.trim())
                    .map_err(|e| Error::format(lineno as u64 + 1, format!("config line {}: {e}", lineno + 1)))?;
            }
        }
        if let Some(v) = common.seed {
            s.seed = v;
            s.train.seed = v;
        }
        if let Some(v) = common.tau_ee {
            s.cascade.tau_ee = v;
        }
        if let Some(v) = common.tau_detect {
            s.cascade.tau_detect = v;
        }
        if let Some(v) = common.tau_accept {
            s.cascade.tau_accept = v;
        }
        if let Some(v) = common.wfp {
            s.main_weights.w_fp = v;
            s.ee_weights.w_fp = v;
        }
        if let Some(v) = common.wfn {
            s.main_weights.w_fn = v;
            s.ee_weights.w_fn = v;
        }
        if let Some(v) = common.gamma {
            s.main_weights.gamma = v;
            s.ee_weights.gamma = v;
        }
        if let Some(v) = common.epochs {
            s.train.epochs = v;
        }
        if let Some(v) = common.batch {
            s.train.batch_size = v;
        }
        if let Some(v) = common.lr {
            s.train.optimizer.learning_rate = v;
        }
        if let Some(v) = common.patience {
            s.train.patience = v;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let bad = |v: &str| format!("cannot parse value '{v}' for key");
        match key {
            "seed" => {
                self.seed = value.parse().map_err(|_| bad(value))?;
                self.train.seed = self.seed;
            }
            "tau_ee" => self.cascade.tau_ee = value.parse().map_err(|_| bad(value))?,
            "tau_detect" => self.cascade.tau_detect = value.parse().map_err(|_| bad(value))?,
            "tau_accept" => self.cascade.tau_accept = value.parse().map_err(|_| bad(value))?,
            "wfp" => {
                let v = value.parse().map_err(|_| bad(value))?;
                self.main_weights.w_fp = v;
                self.ee_weights.w_fp = v;
            }
            "wfn" => {
                let v = value.parse().map_err(|_| bad(value))?;
                self.main_weights.w_fn = v;
                self.ee_weights.w_fn = v;
            }
            "wc" => {
                let v = value.parse().map_err(|_| bad(value))?;
                self.main_weights.w_c = v;
                self.ee_weights.w_c = v;
            }
            "wp" => self.main_weights.w_p = value.parse().map_err(|_| bad(value))?,
            "gamma" => {
                let v = value.parse().map_err(|_| bad(value))?;
                self.main_weights.gamma = v;
                self.ee_weights.gamma = v;
            }
            "epochs" => self.train.epochs = value.parse().map_err(|_| bad(value))?,
            "batch" => self.train.batch_size = value.parse().map_err(|_| bad(value))?,
            "lr" => self.train.optimizer.learning_rate = value.parse().map_err(|_| bad(value))?,
            "beta1" => self.train.optimizer.beta1 = value.parse().map_err(|_| bad(value))?,
            "beta2" => self.train.optimizer.beta2 = value.parse().map_err(|_| bad(value))?,
            "clip_norm" => self.train.optimizer.clip_norm = value.parse().map_err(|_| bad(value))?,
            "patience" => self.train.patience = value.parse().map_err(|_| bad(value))?,
            "bn_momentum" => self.train.bn_momentum = value.parse().map_err(|_| bad(value))?,
            "phase_boundary" => {
                self.train.phase_boundary = Some(value.parse().map_err(|_| bad(value))?)
            }
            "augment" => self.train.augment = value.parse().map_err(|_| bad(value))?,
            "blur_prob" => self.gen_blur_prob = value.parse().map_err(|_| bad(value))?,
            "occlusion_prob" => self.gen_occlusion_prob = value.parse().map_err(|_| bad(value))?,
            "noise" => self.gen_noise = value.parse().map_err(|_| bad(value))?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }
}

/// Parse arguments (program name excluded) and run. Returns the process
/// exit code.
pub fn cli_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv = std::iter::once("eecnn".to_string()).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Parameter(_) => 1,
                Error::Format { .. } | Error::Io(_) => 2,
            }
        }
    }
}

fn load_train_val(
    data: &PathBuf,
    val: &Option<PathBuf>,
    frac: f64,
    seed: u64,
) -> Result<(Vec<PatchRecord>, Vec<PatchRecord>)> {
    let records = read_dataset(data)?;
    match val {
        Some(path) => Ok((records, read_dataset(path)?)),
        None => split_dataset(&records, frac, seed),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { n, pos, out, common } => {
            let s = Settings::resolve(&common)?;
            let mut cfg = GenConfig::new(pos, s.seed);
            cfg.blur_prob = s.gen_blur_prob;
            cfg.occlusion_prob = s.gen_occlusion_prob;
            cfg.noise = s.gen_noise;
            let records = generate_with(n, cfg);
            write_dataset(&records, &out)?;
            let positives = records.iter().filter(|r| r.label.is_ball()).count();
            println!("wrote {} records ({} positive) to {}", records.len(), positives, out.display());
            println!("records={} positives={} seed={}", records.len(), positives, s.seed);
            Ok(())
        }
        Cmd::SplitData { data, frac, train_out, val_out, common } => {
            let s = Settings::resolve(&common)?;
            let records = read_dataset(&data)?;
            let (train, val) = split_dataset(&records, frac, s.seed)?;
            write_dataset(&train, &train_out)?;
            write_dataset(&val, &val_out)?;
            println!(
                "split {} records into {} train / {} val",
                records.len(),
                train.len(),
                val.len()
            );
            println!("train={} val={} seed={}", train.len(), val.len(), s.seed);
            Ok(())
        }
        Cmd::Train { data, val, frac, out, history, no_augment, common } => {
            let mut s = Settings::resolve(&common)?;
            if no_augment {
                s.train.augment = false;
            }
            let (train, val) = load_train_val(&data, &val, frac, s.seed)?;
            let mut g = build_ball_cnn(s.seed);
            let h = train_main(&mut g, &train, &val, &s.main_weights, &s.train)?;
            save_weights(&g, &out)?;
            print_history(&h);
            if let Some(path) = history {
                h.write_csv(path)?;
            }
            println!("model={} params={} macs={}", out.display(), g.total_param_count(), g.trunk_mac_count([1, 32, 32, 3])?);
            Ok(())
        }
        Cmd::AttachEe { model, out, common } => {
            let s = Settings::resolve(&common)?;
            let mut g = load_weights(&model)?;
            let before = g.total_param_count();
            g.attach_early_exit(s.seed)?;
            save_weights(&g, &out)?;
            let delta = g.total_param_count() - before;
            println!(
                "attached early exit: {} -> {} params (+{})",
                before,
                g.total_param_count(),
                delta
            );
            println!("params_before={before} params_after={} param_delta={delta}", g.total_param_count());
            Ok(())
        }
        Cmd::TrainEe {
            model, data, val, frac, out, history, no_augment, calibrate_max_recall_drop, common,
        } => {
            let mut s = Settings::resolve(&common)?;
            if no_augment {
                s.train.augment = false;
            }
            let (train, val) = load_train_val(&data, &val, frac, s.seed)?;
            let mut g = load_weights(&model)?;
            g.freeze_trunk();
            let h = train_early_exit(&mut g, &train, &val, &s.ee_weights, &s.train)?;
            print_history(&h);
            if let Some(path) = history {
                h.write_csv(path)?;
            }
            if let Some(max_drop) = calibrate_max_recall_drop {
                let split = g.split_at_exit()?;
                let cal = calibrate_exit_threshold(&split, &val, max_drop, &s.cascade)?;
                println!(
                    "calibrated tau_ee={:.6} exit_rate={:.4} recall_drop_pp={:.4}",
                    cal.tau_ee, cal.exit_rate, cal.recall_drop_pp
                );
            }
            save_weights(&g, &out)?;
            println!("model={} ee_params={}", out.display(), g.ee_param_count());
            Ok(())
        }
        Cmd::SplitModel { model, head_out, tail_out } => {
            let g = load_weights(&model)?;
            let split = g.split_at_exit()?;
            save_weights(&split.head, &head_out)?;
            save_weights(&split.tail, &tail_out)?;
            println!(
                "head: {} params -> {}; tail: {} params -> {}",
                split.head.total_param_count(),
                head_out.display(),
                split.tail.total_param_count(),
                tail_out.display()
            );
            Ok(())
        }
        Cmd::Eval { model, data, cascade, common } => {
            let s = Settings::resolve(&common)?;
            let g = load_weights(&model)?;
            let records = read_dataset(&data)?;
            let report = if cascade {
                let split = g.split_at_exit()?;
                evaluate_cascade(&split, &records, &s.cascade)?
            } else {
                evaluate_model(&g, &records, s.cascade.tau_accept)?
            };
            print_eval(&report, records.len());
            Ok(())
        }
        Cmd::Bench { model, data, target, runs, warmup, limit, common } => {
            let s = Settings::resolve(&common)?;
            let g = load_weights(&model)?;
            let records = read_dataset(&data)?;
            let take = records.len().min(limit.max(1));
            let refs: Vec<&PatchRecord> = records.iter().take(take).collect();
            let batch = records_to_batch(&refs);
            let target: BenchTarget = target.parse()?;
            let report = benchmark(&g, target, &batch, runs, warmup, &s.cascade)?;
            let st = report.stats;
            println!(
                "{}: mean {:.4} ms, std {:.4} ms, min {:.4} ms, max {:.4} ms over {} samples",
                target.as_str(), st.mean_ms, st.std_ms, st.min_ms, st.max_ms, st.samples
            );
            println!(
                "target={} mean_ms={:.6} std_ms={:.6} min_ms={:.6} max_ms={:.6} samples={}",
                target.as_str(), st.mean_ms, st.std_ms, st.min_ms, st.max_ms, st.samples
            );
            if let Some(c) = report.cascade {
                println!(
                    "cascade mixture: exit_rate {:.4}, head {:.4} ms, full {:.4} ms, expected {:.4} ms",
                    c.exit_rate, c.head.mean_ms, c.full.mean_ms, c.expected_mean_ms
                );
                println!(
                    "exit_rate={:.6} head_mean_ms={:.6} full_mean_ms={:.6} expected_mean_ms={:.6}",
                    c.exit_rate, c.head.mean_ms, c.full.mean_ms, c.expected_mean_ms
                );
            }
            Ok(())
        }
        Cmd::Infer { model, data, common } => {
            let s = Settings::resolve(&common)?;
            let g = load_weights(&model)?;
            let records = read_dataset(&data)?;
            let refs: Vec<&PatchRecord> = records.iter().collect();
            let batch = records_to_batch(&refs);
            let result = if g.has_early_exit() {
                let split = g.split_at_exit()?;
                crate::cascade::process_frame(&split, &batch, &s.cascade)?
            } else {
                // No exit branch: every hypothesis takes the full pass.
                let preds = g.forward_main(&batch)?;
                process_frame_impl(records.len(), &s.cascade, |i| {
                    let p = preds[i];
                    let is_ball = p.confidence >= s.cascade.tau_accept;
                    Ok(PatchDecision {
                        is_ball,
                        confidence: p.confidence,
                        center: is_ball.then_some((p.x, p.y)),
                        exited_early: false,
                        head_evaluated: true,
                        tail_evaluated: true,
                    })
                })?
            };
            match &result.detection {
                Some((index, d)) => {
                    let (x, y) = d.center.unwrap_or((f32::NAN, f32::NAN));
                    println!(
                        "ball at hypothesis {} with confidence {:.4} center ({:.2}, {:.2})",
                        index, d.confidence, x, y
                    );
                    println!(
                        "detected=1 index={} confidence={:.6} x={:.4} y={:.4} processed={} ee_triggers={} stopped_on_detect={}",
                        index, d.confidence, x, y,
                        result.patches_processed, result.ee_trigger_count,
                        result.stopped_on_detect as u8
                    );
                }
                None => {
                    println!("no ball in {} hypotheses", result.patches_processed);
                    println!(
                        "detected=0 processed={} ee_triggers={} stopped_on_detect=0",
                        result.patches_processed, result.ee_trigger_count
                    );
                }
            }
            Ok(())
        }
    }
}

fn print_history(h: &crate::train::TrainHistory) {
    for e in &h.epochs {
        println!(
            "epoch {:>3}: train_loss {:.6}, val_loss {:.6}, val_p {:.4}, val_r {:.4}, phase {}",
            e.epoch, e.train_loss, e.val_loss, e.val_precision, e.val_recall, e.phase
        );
    }
}

fn print_eval(report: &EvalReport, records: usize) {
    let cm = &report.cm;
    println!("records: {records}");
    println!(
        "confusion: tp {} fp {} tn {} fn {}",
        cm.tp, cm.fp, cm.tn, cm.fn_
    );
    let flag = if cm.precision_undefined() { " (no positive predictions)" } else { "" };
    println!(
        "precision: {:.2}%{}  recall: {:.2}%",
        cm.precision() * 100.0,
        flag,
        cm.recall() * 100.0
    );
    println!(
        "center deviation (euclidean): {:.3} +/- {:.3} px over {} true positives",
        report.center.euclid_mean, report.center.euclid_std, report.center.count
    );
    println!(
        "center deviation (manhattan): {:.3} +/- {:.3} px",
        report.center.manhattan_mean, report.center.manhattan_std
    );
    if let Some(ee) = &report.ee {
        println!("early exits: {} of {} ({:.2}%)", ee.triggers, ee.total, ee.rate() * 100.0);
    }
    println!(
        "records={} tp={} fp={} tn={} fn={} precision={:.6} precision_defined={} recall={:.6} center_euclid_mean={:.6} center_euclid_std={:.6} center_manhattan_mean={:.6} center_manhattan_std={:.6} center_count={}",
        records, cm.tp, cm.fp, cm.tn, cm.fn_,
        cm.precision(), !cm.precision_undefined(), cm.recall(),
        report.center.euclid_mean, report.center.euclid_std,
        report.center.manhattan_mean, report.center.manhattan_std,
        report.center.count
    );
    if let Some(ee) = &report.ee {
        println!("ee_triggers={} ee_rate={:.6}", ee.triggers, ee.rate());
    }
}
