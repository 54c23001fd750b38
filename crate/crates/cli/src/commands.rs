//! Subcommand bodies. Each returns `Err(Failure)` to pick the exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use snds_core::certify::{certify as run_certify, CertifyConfig, CertifyReport};
use snds_core::dataio::{generate_synthetic_with_dt, load_dataset, load_model, save_dataset, save_model};
use snds_core::simeval::{
    demo_dtw, export_field as field_rows, mean_std, mse_metric, rollout as run_rollout, write_field_csv,
    write_trajectory_csv, FieldGrid, PerturbationSchedule,
};
use snds_core::{
    Bounds, Dataset, Error, LossConfig, ModelConfig, PolicyMode, ProjectionActivation, RolloutConfig,
    StablePolicyModel, TrainConfig, TrainReport,
};

use crate::config::{parse_list, ConfigFile};
use crate::{CertifyArgs, EvalArgs, Failure, FieldArgs, GenDataArgs, MetricArg, RolloutArgs, RolloutFlags, TrainArgs};

type Outcome = std::result::Result<(), Failure>;

/// DTW ground-cost exponent used for every reported DTW value.
const DTW_EXPONENT: f64 = 2.0;

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

/// `dir/stem<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn pick_list<T: FromStr>(flag: Option<Vec<T>>, file: &ConfigFile, key: &str) -> Result<Option<Vec<T>>, Failure>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => file.get_list(key)?,
    })
}

fn parse_mode(s: &str) -> Result<PolicyMode, String> {
    match s {
        "stable" => Ok(PolicyMode::Stable),
        "unconstrained" => Ok(PolicyMode::Unconstrained),
        _ => Err(format!("unknown mode {s:?}, expected stable or unconstrained")),
    }
}

fn parse_projection(s: &str) -> Result<ProjectionActivation, String> {
    match s {
        "relu" => Ok(ProjectionActivation::Relu),
        "softplus" => Ok(ProjectionActivation::Softplus),
        _ => Err(format!("unknown projection {s:?}, expected relu or softplus")),
    }
}

/// Enum value from the flag, else from the file, else the default.
fn pick_enum<T>(flag: Option<T>, file: &ConfigFile, key: &str, parse: fn(&str) -> Result<T, String>, default: T) -> Result<T, Failure> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get::<String>(key)? {
        Some(raw) => parse(&raw).map_err(Failure::Operational),
        None => Ok(default),
    }
}

fn check_sizes(name: &str, sizes: &[usize], dim: usize, out: usize) -> Result<(), Failure> {
    if sizes.len() < 2 || sizes[0] != dim || sizes[sizes.len() - 1] != out || sizes.contains(&0) {
        return Err(Failure::Operational(format!(
            "{name} sizes {sizes:?} must start with {dim}, end with {out} and have no zero width"
        )));
    }
    Ok(())
}

struct TrainPlan {
    model: ModelConfig,
    train: TrainConfig,
    seeds: Vec<u64>,
}

fn plan_training(args: &TrainArgs, ds: &Dataset) -> Result<TrainPlan, Failure> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let defaults = ModelConfig::default().with_dim(ds.dim());
    let dim = ds.dim();
    let policy_sizes = pick_list(args.policy_sizes.clone(), &file, "policy_sizes")?.unwrap_or(defaults.policy_sizes.clone());
    let icnn_sizes = pick_list(args.icnn_sizes.clone(), &file, "icnn_sizes")?.unwrap_or(defaults.icnn_sizes.clone());
    check_sizes("policy", &policy_sizes, dim, dim)?;
    check_sizes("icnn", &icnn_sizes, dim, 1)?;
    let model = ModelConfig {
        policy_sizes,
        icnn_sizes,
        mode: pick_enum(args.mode.map(Into::into), &file, "mode", parse_mode, defaults.mode)?,
        projection: pick_enum(args.projection.map(Into::into), &file, "projection", parse_projection, defaults.projection)?,
        alpha: pick(args.alpha, &file, "alpha", defaults.alpha)?,
        regularizer: pick(args.regularizer, &file, "regularizer", defaults.regularizer)?,
        delta: pick(args.delta, &file, "delta", defaults.delta)?,
        ..defaults
    };

    let mut train = TrainConfig::new(ds.dt());
    let horizon = pick(args.horizon, &file, "horizon", train.loss.horizon)?;
    train.loss = LossConfig { srvf_term: pick(args.srvf, &file, "srvf", false)?, ..LossConfig::with_horizon(horizon, ds.dt()) };
    train.max_epochs = pick(args.epochs, &file, "epochs", train.max_epochs)?;
    train.batch_size = pick(args.batch_size, &file, "batch_size", train.batch_size)?;
    train.adam.learning_rate = pick(args.learning_rate, &file, "learning_rate", train.adam.learning_rate)?;
    let clip = pick(args.clip, &file, "clip", train.grad_clip_norm.unwrap_or(0.0))?;
    train.grad_clip_norm = (clip > 0.0).then_some(clip);
    train.early_stopping_patience = match args.patience {
        Some(p) => Some(p),
        None => file.get("patience")?,
    };

    let seeds = match (&args.seeds, args.seed) {
        (Some(list), _) => list.clone(),
        (None, Some(seed)) => vec![seed],
        (None, None) => match file.get_list::<u64>("seeds")? {
            Some(list) => list,
            None => vec![file.get("seed")?.unwrap_or(0)],
        },
    };
    if seeds.is_empty() {
        return Err(Failure::Operational("no seeds given".into()));
    }
    train.validate()?;
    Ok(TrainPlan { model, train, seeds })
}

#[derive(Debug, Serialize)]
struct SeedRun {
    seed: u64,
    model: PathBuf,
    final_loss: f64,
    mse: f64,
    dtw: f64,
}

#[derive(Debug, Serialize)]
struct MetricSummary {
    metric: &'static str,
    mean: f64,
    std: f64,
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    runs: Vec<SeedRun>,
    summary: Vec<MetricSummary>,
}

fn losses_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss,seconds\n");
    for (k, (loss, secs)) in report.epoch_losses.iter().zip(&report.epoch_seconds).enumerate() {
        let _ = writeln!(out, "{},{loss:e},{secs:e}", k + 1);
    }
    out
}

fn train_one(ds: &Dataset, plan: &TrainPlan, seed: u64, out: &Path) -> Result<TrainReport, Failure> {
    let init = plan.model.build(&ds.target, seed)?;
    let cfg = TrainConfig { seed, ..plan.train.clone() };
    let windows = ds.windows(cfg.loss.horizon);
    let (model, report) = match snds_core::train(ds, &windows, init, &cfg) {
        Ok(done) => done,
        Err(Error::Diverged { epoch, stage, checkpoint }) => {
            let rescue = sibling(out, ".diverged.json");
            save_model(&checkpoint, &rescue)?;
            return Err(Failure::Operational(format!(
                "training diverged at epoch {epoch} (non-finite {stage}); last finite model saved to {}",
                rescue.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    save_model(&model, out)?;
    write_text(&sibling(out, ".report.json"), &to_json(&report))?;
    write_text(&sibling(out, ".losses.csv"), &losses_csv(&report))?;
    println!(
        "seed {seed}: {} epochs, loss {:.6e} -> {:.6e}, model {}",
        report.epoch_losses.len(),
        report.initial_loss,
        report.final_loss,
        out.display()
    );
    Ok(report)
}

pub fn train(args: &TrainArgs) -> Outcome {
    let ds = load_dataset(&args.data)?;
    let plan = plan_training(args, &ds)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    if args.seeds.is_none() && plan.seeds.len() == 1 {
        train_one(&ds, &plan, plan.seeds[0], &args.out)?;
        return Ok(());
    }

    let rollout_cfg = RolloutConfig::for_dataset(&ds);
    let mut runs = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        let out = sibling(&args.out, &format!(".seed{seed}.json"));
        let report = train_one(&ds, &plan, seed, &out)?;
        let model = load_model(&out)?;
        let mse = mse_metric(&model, &ds, &ds.windows(0))?;
        let dtw = mean_std(&demo_dtw(&model, &ds, &rollout_cfg, DTW_EXPONENT)?).0;
        runs.push(SeedRun { seed, model: out, final_loss: report.final_loss, mse, dtw });
    }
    let column = |f: fn(&SeedRun) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let summary: Vec<MetricSummary> = [
        ("final_loss", column(|r| r.final_loss)),
        ("mse", column(|r| r.mse)),
        ("dtw", column(|r| r.dtw)),
    ]
    .into_iter()
    .map(|(metric, (mean, std))| MetricSummary { metric, mean, std })
    .collect();

    let mut csv = String::from("row,seed,final_loss,mse,dtw\n");
    for r in &runs {
        let _ = writeln!(csv, "run,{},{:e},{:e},{:e}", r.seed, r.final_loss, r.mse, r.dtw);
    }
    let _ = writeln!(csv, "mean,,{:e},{:e},{:e}", summary[0].mean, summary[1].mean, summary[2].mean);
    let _ = writeln!(csv, "std,,{:e},{:e},{:e}", summary[0].std, summary[1].std, summary[2].std);
    for m in &summary {
        println!("{}: mean {:.6e} std {:.6e}", m.metric, m.mean, m.std);
    }
    let result = SeedSummary { runs, summary };
    write_text(&sibling(&args.out, ".summary.json"), &to_json(&result))?;
    write_text(&sibling(&args.out, ".summary.csv"), &csv)
}

fn rollout_config(flags: &RolloutFlags, ds: Option<&Dataset>, model: &StablePolicyModel) -> Result<RolloutConfig, Failure> {
    let mut cfg = match ds {
        Some(ds) => RolloutConfig::for_dataset(ds),
        None => RolloutConfig {
            dt: snds_core::dataio::DEFAULT_DT,
            max_steps: 1000,
            conv_radius: 1e-2 * model.bounds.as_ref().map_or(1.0, Bounds::extent),
            schedule: PerturbationSchedule::default(),
        },
    };
    if let Some(dt) = flags.dt {
        cfg.dt = dt;
    }
    if let Some(steps) = flags.max_steps {
        cfg.max_steps = steps;
    }
    if let Some(r) = flags.radius {
        cfg.conv_radius = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct DemoScore {
    demo: usize,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    /// `null` when the rollout diverged.
    #[serde(skip_serializing_if = "Option::is_none")]
    dtw: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalAggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dtw_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dtw_std: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    model: PathBuf,
    data: PathBuf,
    per_demo: Vec<DemoScore>,
    aggregate: EvalAggregate,
}

pub fn eval(args: &EvalArgs) -> Outcome {
    let model = load_model(&args.model)?;
    let ds = load_dataset(&args.data)?;
    Error::check_dim(model.dim(), ds.dim())?;
    let want_mse = args.metric != MetricArg::Dtw;
    let want_dtw = args.metric != MetricArg::Mse;
    let all = ds.windows(0);

    let dtws = if want_dtw {
        let cfg = rollout_config(&args.rollout, Some(&ds), &model)?;
        Some(demo_dtw(&model, &ds, &cfg, DTW_EXPONENT)?)
    } else {
        None
    };
    let mut per_demo = Vec::with_capacity(ds.len());
    for (d, demo) in ds.demos.iter().enumerate() {
        let mse = if want_mse {
            let own: Vec<_> = all.iter().copied().filter(|w| w.demo == d).collect();
            Some(mse_metric(&model, &ds, &own)?)
        } else {
            None
        };
        per_demo.push(DemoScore { demo: d, samples: demo.len(), mse, dtw: dtws.as_ref().map(|v| v[d]) });
    }
    let (dtw_mean, dtw_std) = match &dtws {
        Some(v) => {
            let (m, s) = mean_std(v);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let aggregate = EvalAggregate { mse: if want_mse { Some(mse_metric(&model, &ds, &all)?) } else { None }, dtw_mean, dtw_std };
    let report = EvalReport { model: args.model.clone(), data: args.data.clone(), per_demo, aggregate };

    if args.json {
        print!("{}", to_json(&report));
        return Ok(());
    }
    for s in &report.per_demo {
        let mut line = format!("demo {} ({} samples)", s.demo, s.samples);
        if let Some(m) = s.mse {
            let _ = write!(line, " mse {m:.6e}");
        }
        if let Some(d) = s.dtw {
            let _ = write!(line, " dtw {d:.6e}");
        }
        println!("{line}");
    }
    if let Some(m) = report.aggregate.mse {
        println!("mse {m:.6e}");
    }
    if let (Some(m), Some(s)) = (report.aggregate.dtw_mean, report.aggregate.dtw_std) {
        println!("dtw mean {m:.6e} std {s:.6e}");
    }
    Ok(())
}

/// `step:dx1,dx2,...`
fn parse_perturbation(raw: &str, dim: usize) -> Result<(usize, Vec<f64>), Failure> {
    let bad = |why: String| Failure::Operational(format!("bad --perturb {raw:?}: {why}"));
    let (step, delta) = raw.split_once(':').ok_or_else(|| bad("expected step:dx1,dx2".into()))?;
    let step = step.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?;
    let delta: Vec<f64> = parse_list(delta).map_err(bad)?;
    if delta.len() != dim {
        return Err(bad(format!("expected {dim} components, got {}", delta.len())));
    }
    Ok((step, delta))
}

pub fn rollout(args: &RolloutArgs) -> Outcome {
    let model = load_model(&args.model)?;
    let ds = args.data.as_deref().map(load_dataset).transpose()?;
    if let Some(ds) = &ds {
        Error::check_dim(model.dim(), ds.dim())?;
    }
    let x0 = match (&args.x0, &ds) {
        (Some(x0), _) => x0.clone(),
        (None, Some(ds)) => ds.demos[0].state(0),
        (None, None) => return Err(Failure::Operational("give --x0 or --data for the initial state".into())),
    };
    Error::check_dim(model.dim(), x0.len())?;
    let mut cfg = rollout_config(&args.rollout, ds.as_ref(), &model)?;
    let events = args.perturb.iter().map(|p| parse_perturbation(p, model.dim())).collect::<Result<Vec<_>, _>>()?;
    cfg.schedule = PerturbationSchedule::new(events)?;

    match run_rollout(&model, &x0, &cfg) {
        Ok(traj) => {
            write_trajectory_csv(&traj, &args.out)?;
            let state = if traj.converged() { "converged" } else { "reached the step limit" };
            println!("{state} after {} steps, final state {:?}", traj.steps(), traj.last_state());
            Ok(())
        }
        Err(Error::RolloutDiverged { step, partial }) => {
            write_trajectory_csv(&partial, &args.out)?;
            Err(Failure::Operational(format!(
                "rollout diverged at step {step}; partial trajectory written to {}",
                args.out.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn planar(name: &str, v: &[f64]) -> Result<[f64; 2], Failure> {
    <[f64; 2]>::try_from(v).map_err(|_| Failure::Operational(format!("--{name} needs 2 values, got {}", v.len())))
}

pub fn export_field(args: &FieldArgs) -> Outcome {
    let model = load_model(&args.model)?;
    let (min, max) = match (&args.min, &args.max) {
        (Some(lo), Some(hi)) => (planar("min", lo)?, planar("max", hi)?),
        _ => {
            let bounds = model
                .bounds
                .as_ref()
                .ok_or_else(|| Failure::Operational("model stores no data box; give --min and --max".into()))?
                .scaled_box(args.scale);
            (planar("min", &bounds.min)?, planar("max", &bounds.max)?)
        }
    };
    if args.resolution.len() != 2 {
        return Err(Failure::Operational(format!("--resolution needs 2 values, got {}", args.resolution.len())));
    }
    let grid = FieldGrid { min, max, resolution: [args.resolution[0], args.resolution[1]] };
    let rows = field_rows(&model, &grid)?;
    write_field_csv(&rows, &args.out)?;
    println!("{} grid points written to {}", rows.len(), args.out.display());
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Outcome {
    let ds = generate_synthetic_with_dt(args.shape.into(), args.demos, args.samples, args.noise, args.seed, args.dt)?;
    save_dataset(&ds, &args.out)?;
    println!("{} demonstrations of {} samples written to {}", ds.len(), args.samples, args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct CertifyOutput<'a> {
    ok: bool,
    config: &'a CertifyConfig,
    #[serde(flatten)]
    report: &'a CertifyReport,
}

pub fn certify(args: &CertifyArgs) -> Outcome {
    let model = load_model(&args.model)?;
    let bounds = match &args.data {
        Some(dir) => load_dataset(dir)?.bounds(),
        None => model
            .bounds
            .clone()
            .ok_or_else(|| Failure::Operational("model stores no data box; give --data".into()))?,
    };
    let cfg = CertifyConfig {
        samples: args.samples,
        convexity_triples: args.triples,
        rollouts: args.rollouts,
        box_factor: args.box_factor,
        seed: args.seed,
        dt: args.dt,
        max_steps: args.max_steps,
        conv_radius: args.radius,
    };
    let report = run_certify(&model, &bounds, &cfg)?;
    if args.json {
        print!("{}", to_json(&CertifyOutput { ok: report.ok(), config: &cfg, report: &report }));
    } else {
        for c in &report.checks {
            let verdict = if c.ok() { "ok" } else { "FAILED" };
            println!("{}: {}/{} passed, worst {:.3e} {verdict}", c.name, c.passed, c.passed + c.failed, c.worst);
        }
    }
    if report.ok() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.ok()).map(|c| c.name.as_str()).collect();
        Err(Failure::Certification(failed.join(", ")))
    }
}
