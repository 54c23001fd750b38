//! Multi-seed training runs comparing stable and unconstrained policies.
//!
//! Each (seed, mode) run splits the windows 0.8/0.2, trains on the first part,
//! and records test MSE, demonstration DTW, training time and whether a pushed
//! rollout still reaches the target.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use snds_core::dataio::{generate_synthetic, load_dataset, split_dataset, SyntheticShape};
use snds_core::objective::DEFAULT_HORIZON;
use snds_core::simeval::{demo_dtw, mean_std, mse_metric, rollout, PerturbationSchedule};
use snds_core::{Dataset, Error, ModelConfig, PolicyMode, Result, RolloutConfig, TrainConfig};

pub const REPORT_FILE: &str = "report.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const METRICS: [&str; 4] = ["final_loss", "mse", "dtw", "train_seconds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic {
        shape: SyntheticShape,
        demos: usize,
        samples: usize,
        noise: f64,
        seed: u64,
    },
    Directory(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { shape, demos, samples, noise, seed } => {
                generate_synthetic(*shape, *demos, *samples, *noise, *seed)
            }
            DataSource::Directory(dir) => load_dataset(dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub data: DataSource,
    pub seeds: Vec<u64>,
    pub modes: Vec<PolicyMode>,
    pub model: ModelConfig,
    pub epochs: usize,
    pub split_ratio: f64,
    /// Displacement in units of the data extent.
    pub push: Vec<f64>,
    /// Step of the push; defaults to half the first demonstration.
    pub push_step: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl BenchPlan {
    /// Single noiseless sine demonstration, both modes, seeds as given.
    pub fn single_demo(seeds: Vec<u64>) -> Self {
        Self {
            data: DataSource::Synthetic { shape: SyntheticShape::Sine, demos: 1, samples: 300, noise: 0.0, seed: 0 },
            seeds,
            modes: vec![PolicyMode::Stable, PolicyMode::Unconstrained],
            model: ModelConfig::default(),
            epochs: 500,
            split_ratio: 0.8,
            push: vec![0.0, 1.0],
            push_step: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("bench needs at least one seed".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("bench needs at least one mode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mode: PolicyMode,
    pub final_loss: f64,
    pub mse: f64,
    pub dtw: f64,
    pub train_seconds: f64,
    pub recovered: bool,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "final_loss" => Some(self.final_loss),
            "mse" => Some(self.mse),
            "dtw" => Some(self.dtw),
            "train_seconds" => Some(self.train_seconds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mode: PolicyMode,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
}

/// Mean and sample standard deviation of every metric per mode, over rows in order.
pub fn aggregate(rows: &[RunRecord], modes: &[PolicyMode]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for &mode in modes {
        let of_mode: Vec<&RunRecord> = rows.iter().filter(|r| r.mode == mode).collect();
        for name in METRICS {
            let values: Vec<f64> = of_mode.iter().filter_map(|r| r.metric(name)).collect();
            let (mean, std) = mean_std(&values);
            out.push(AggregateRow { mode, metric: name.to_string(), runs: values.len(), mean, std });
        }
    }
    out
}

fn run_one(ds: &Dataset, plan: &BenchPlan, seed: u64, mode: PolicyMode) -> Result<RunRecord> {
    let split = split_dataset(ds, DEFAULT_HORIZON, plan.split_ratio, seed)?;
    let config = ModelConfig { mode, ..plan.model.clone() }.with_dim(ds.dim());
    let init = config.build(&ds.target, seed)?;
    let mut cfg = TrainConfig::new(ds.dt());
    cfg.max_epochs = plan.epochs;
    cfg.seed = seed;
    cfg.checkpoint_every = 0;
    let start = Instant::now();
    let (model, report) = snds_core::train(ds, &split.train, init, &cfg)?;
    let train_seconds = start.elapsed().as_secs_f64();

    let mse = mse_metric(&model, ds, &split.test)?;
    let rollout_cfg = RolloutConfig::for_dataset(ds);
    let dtws = demo_dtw(&model, ds, &rollout_cfg, 2.0)?;
    let dtw = mean_std(&dtws).0;

    let extent = ds.bounds().extent();
    let step = plan.push_step.unwrap_or(ds.demos[0].len() / 2);
    let push: Vec<f64> = plan.push.iter().map(|p| p * extent).collect();
    let pushed = RolloutConfig { schedule: PerturbationSchedule::new(vec![(step, push)])?, ..rollout_cfg };
    let recovered = match rollout(&model, &ds.demos[0].state(0), &pushed) {
        Ok(t) => t.converged(),
        Err(Error::RolloutDiverged { .. }) => false,
        Err(e) => return Err(e),
    };
    Ok(RunRecord { seed, mode, final_loss: report.final_loss, mse, dtw, train_seconds, recovered })
}

/// Trains every (seed, mode) pair, in parallel when threads are available,
/// and writes the report files when an output directory is set.
///
/// Rows come back ordered by seed, then mode, whatever the scheduling.
pub fn run_bench(plan: &BenchPlan) -> Result<BenchReport> {
    plan.validate()?;
    let ds = plan.data.load()?;
    let jobs: Vec<(u64, PolicyMode)> =
        plan.seeds.iter().flat_map(|&s| plan.modes.iter().map(move |&m| (s, m))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, mode)| run_one(&ds, plan, seed, mode))
        .collect::<Result<Vec<_>>>()?;
    let report = BenchReport { aggregate: aggregate(&rows, &plan.modes), rows };
    if let Some(dir) = &plan.output_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub fn report_csv(rows: &[RunRecord]) -> String {
    let mut out = String::from("seed,mode,final_loss,mse,dtw,train_seconds,recovered\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{}",
            r.seed,
            r.mode.name(),
            r.final_loss,
            r.mse,
            r.dtw,
            r.train_seconds,
            r.recovered
        );
    }
    out
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("mode,metric,runs,mean,std\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:e},{:e}", r.mode.name(), r.metric, r.runs, r.mean, r.std);
    }
    out
}

pub fn write_report(report: &BenchReport, dir: &Path) -> Result<()> {
    let io = |path: &Path, e| Error::Io { path: path.to_path_buf(), source: e };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, text) in [(REPORT_FILE, report_csv(&report.rows)), (AGGREGATE_FILE, aggregate_csv(&report.aggregate))] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, mode: PolicyMode, mse: f64) -> RunRecord {
        RunRecord { seed, mode, final_loss: 1.0, mse, dtw: 2.0 * mse, train_seconds: 0.5, recovered: true }
    }

    #[test]
    fn aggregate_recomputes_from_rows() {
        let rows = vec![
            record(1, PolicyMode::Stable, 1.0),
            record(1, PolicyMode::Unconstrained, 5.0),
            record(2, PolicyMode::Stable, 3.0),
            record(2, PolicyMode::Unconstrained, 5.0),
        ];
        let agg = aggregate(&rows, &[PolicyMode::Stable, PolicyMode::Unconstrained]);
        assert_eq!(agg.len(), 2 * METRICS.len());
        let mse = agg.iter().find(|a| a.mode == PolicyMode::Stable && a.metric == "mse").unwrap();
        assert_eq!((mse.runs, mse.mean, mse.std), (2, 2.0, 2f64.sqrt()));
        let other = agg.iter().find(|a| a.mode == PolicyMode::Unconstrained && a.metric == "dtw").unwrap();
        assert_eq!((other.mean, other.std), (10.0, 0.0));
    }

    #[test]
    fn report_has_the_documented_columns() {
        let csv = report_csv(&[record(4, PolicyMode::Stable, 0.25)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("seed,mode,final_loss,mse,dtw,train_seconds,recovered"));
        assert_eq!(lines.next(), Some("4,stable,1e0,2.5e-1,5e-1,5e-1,true"));
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        assert!(matches!(BenchPlan::single_demo(vec![]).validate(), Err(Error::Config(_))));
    }
}
