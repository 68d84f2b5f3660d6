//! Wall-clock microbenchmarks of the inference paths, single-threaded,
//! with warm-up iterations excluded and per-patch statistics.

use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use crate::cascade::{expected_cost, CascadeConfig};
use crate::error::{Error, Result};
use crate::eval::mean_std;
use crate::graph::{ModelGraph, SplitModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTarget {
    /// Trunk only, ignoring any attached exit.
    FullCnn,
    /// Trunk plus the exit branch, unconditionally.
    FullEeCnn,
    /// First block plus the exit branch.
    HeadOnly,
    /// Exit-gated two-stage inference.
    Cascade,
}

impl FromStr for BenchTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-cnn" => Ok(BenchTarget::FullCnn),
            "full-ee-cnn" => Ok(BenchTarget::FullEeCnn),
            "head-only" => Ok(BenchTarget::HeadOnly),
            "cascade" => Ok(BenchTarget::Cascade),
            other => Err(Error::usage(format!(
                "unknown benchmark target '{other}' (expected full-cnn, full-ee-cnn, head-only, cascade)"
            ))),
        }
    }
}

impl BenchTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchTarget::FullCnn => "full-cnn",
            BenchTarget::FullEeCnn => "full-ee-cnn",
            BenchTarget::HeadOnly => "head-only",
            BenchTarget::Cascade => "cascade",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
}

impl BenchStats {
    fn from_times(times_ms: &[f64]) -> Self {
        let (mean, std) = mean_std(times_ms);
        BenchStats {
            mean_ms: mean,
            std_ms: std,
            min_ms: times_ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: times_ms.iter().copied().fold(0.0, f64::max),
            samples: times_ms.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CascadeBenchInfo {
    pub exit_rate: f64,
    pub head: BenchStats,
    pub full: BenchStats,
    /// Mixture prediction from the same run's measured stage times.
    pub expected_mean_ms: f64,
}

#[derive(Debug)]
pub struct BenchReport {
    pub target: BenchTarget,
    pub stats: BenchStats,
    pub cascade: Option<CascadeBenchInfo>,
}

fn single_patches(patches: &Tensor) -> Vec<Tensor> {
    let [n, h, w, c] = patches.shape();
    (0..n)
        .map(|i| {
            Tensor::from_vec([1, h, w, c], patches.sample(i).to_vec())
                .expect("sample slicing is shape-exact")
        })
        .collect()
}

fn time_loop(
    patches: &[Tensor],
    n_runs: usize,
    warmup: usize,
    mut work: impl FnMut(&Tensor) -> Result<f32>,
) -> Result<Vec<f64>> {
    for i in 0..warmup {
        black_box(work(&patches[i % patches.len()])?);
    }
    let mut times = Vec::with_capacity(n_runs * patches.len());
    for _ in 0..n_runs {
        for patch in patches {
            let start = Instant::now();
            let sink = work(patch)?;
            let elapsed = start.elapsed();
            black_box(sink);
            times.push(elapsed.as_secs_f64() * 1e3);
        }
    }
    Ok(times)
}

/// Benchmark one inference path over the given patches. `n_runs` passes
/// over the whole set are measured per patch; `warmup` single-patch
/// evaluations run first and are excluded.
pub fn benchmark(
    g: &ModelGraph,
    target: BenchTarget,
    patches: &Tensor,
    n_runs: usize,
    warmup: usize,
    cascade_cfg: &CascadeConfig,
) -> Result<BenchReport> {
    if patches.batch() == 0 {
        return Err(Error::usage("benchmark needs at least one patch"));
    }
    if n_runs == 0 {
        return Err(Error::usage("benchmark needs at least one run"));
    }
    if target != BenchTarget::FullCnn && !g.has_early_exit() {
        return Err(Error::usage(format!(
            "target {} requires a model with an early exit",
            target.as_str()
        )));
    }
    let singles = single_patches(patches);
    let split = if target == BenchTarget::FullCnn {
        None
    } else {
        Some(g.split_at_exit()?)
    };

    let report = match target {
        BenchTarget::FullCnn => {
            let times = time_loop(&singles, n_runs, warmup, |p| {
                Ok(g.forward_raw(p)?.data()[0])
            })?;
            BenchReport {
                target,
                stats: BenchStats::from_times(&times),
                cascade: None,
            }
        }
        BenchTarget::FullEeCnn => {
            let split = split.as_ref().expect("split built for ee targets");
            let times = time_loop(&singles, n_runs, warmup, |p| full_ee_pass(split, p))?;
            BenchReport {
                target,
                stats: BenchStats::from_times(&times),
                cascade: None,
            }
        }
        BenchTarget::HeadOnly => {
            let split = split.as_ref().expect("split built for ee targets");
            let times = time_loop(&singles, n_runs, warmup, |p| {
                let (_, conf) = split.head_forward(p)?;
                Ok(conf[0])
            })?;
            BenchReport {
                target,
                stats: BenchStats::from_times(&times),
                cascade: None,
            }
        }
        BenchTarget::Cascade => {
            let split = split.as_ref().expect("split built for ee targets");
            cascade_cfg.validate()?;
            // Exit rate is deterministic; count it in an untimed pass.
            let mut exits = 0usize;
            for p in &singles {
                let (_, conf) = split.head_forward(p)?;
                if conf[0] < cascade_cfg.tau_ee {
                    exits += 1;
                }
            }
            let exit_rate = exits as f64 / singles.len() as f64;
            let times = time_loop(&singles, n_runs, warmup, |p| {
                let (features, conf) = split.head_forward(p)?;
                if conf[0] < cascade_cfg.tau_ee {
                    Ok(conf[0])
                } else {
                    let preds = split.tail_forward(&features)?;
                    Ok(preds[0].confidence)
                }
            })?;
            let stats = BenchStats::from_times(&times);
            // Stage baselines measured in the same process, same patches.
            let head_times = time_loop(&singles, n_runs, warmup, |p| {
                let (_, conf) = split.head_forward(p)?;
                Ok(conf[0])
            })?;
            let full_times = time_loop(&singles, n_runs, warmup, |p| full_ee_pass(split, p))?;
            let head = BenchStats::from_times(&head_times);
            let full = BenchStats::from_times(&full_times);
            BenchReport {
                target,
                stats,
                cascade: Some(CascadeBenchInfo {
                    exit_rate,
                    head,
                    full,
                    expected_mean_ms: expected_cost(exit_rate, head.mean_ms, full.mean_ms),
                }),
            }
        }
    };
    Ok(report)
}

fn full_ee_pass(split: &SplitModel, patch: &Tensor) -> Result<f32> {
    let (features, conf) = split.head_forward(patch)?;
    let preds = split.tail_forward(&features)?;
    Ok(preds[0].confidence + conf[0])
}
