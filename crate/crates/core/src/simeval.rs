//! Euler rollouts, imitation metrics, and vector-field export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Window};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::stablepolicy::StablePolicyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    StepLimit,
}

/// `states[k+1] = states[k] + dt * actions[k]`, except that a state listed in
/// `perturbed_at` already includes its injected displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub dt: f64,
    pub terminated: Termination,
    pub perturbed_at: Vec<usize>,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has a start state")
    }

    pub fn converged(&self) -> bool {
        self.terminated == Termination::Converged
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerturbationSchedule {
    events: Vec<(usize, Vec<f64>)>,
}

impl PerturbationSchedule {
    pub fn new(events: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        if events.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("perturbation steps must be strictly increasing".into()));
        }
        if let Some((_, first)) = events.first() {
            if events.iter().any(|(_, d)| d.len() != first.len()) {
                return Err(Error::Config("perturbations differ in dimension".into()));
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[(usize, Vec<f64>)] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn at(&self, step: usize) -> Option<&[f64]> {
        self.events.iter().find(|(k, _)| *k == step).map(|(_, d)| d.as_slice())
    }

    fn last_step(&self) -> Option<usize> {
        self.events.last().map(|(k, _)| *k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub conv_radius: f64,
    pub schedule: PerturbationSchedule,
}

impl RolloutConfig {
    /// Radius `1e-2 × extent` and `10 ×` the longest demonstration in steps.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let longest = ds.demos.iter().map(|d| d.len()).max().unwrap_or(1);
        Self {
            dt: ds.dt(),
            max_steps: 10 * longest,
            conv_radius: 1e-2 * ds.bounds().extent(),
            schedule: PerturbationSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("rollout dt must be positive, got {}", self.dt)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max steps must be at least 1".into()));
        }
        if !(self.conv_radius >= 0.0) {
            return Err(Error::Config("convergence radius must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn rollout(model: &StablePolicyModel, x0: &[f64], cfg: &RolloutConfig) -> Result<Trajectory> {
    let x0 = Matrix::from_shape_vec((1, x0.len()), x0.to_vec()).expect("row shape");
    rollout_many(model, &x0, cfg)?.pop().expect("one trajectory per row")
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One rollout per row of `x0s`, stepped together so each step is one batched
/// model evaluation. Each entry fails independently.
pub fn rollout_many(model: &StablePolicyModel, x0s: &Matrix, cfg: &RolloutConfig) -> Result<Vec<Result<Trajectory>>> {
    let schedules = vec![cfg.schedule.clone(); x0s.nrows()];
    rollout_many_scheduled(model, x0s, cfg, &schedules)
}

/// Like [`rollout_many`], with row `i` perturbed by `schedules[i]` instead of
/// `cfg.schedule`.
pub fn rollout_many_scheduled(
    model: &StablePolicyModel,
    x0s: &Matrix,
    cfg: &RolloutConfig,
    schedules: &[PerturbationSchedule],
) -> Result<Vec<Result<Trajectory>>> {
    cfg.validate()?;
    Error::check_dim(model.dim(), x0s.ncols())?;
    Error::check_dim(x0s.nrows(), schedules.len())?;
    for schedule in schedules {
        if let Some((_, d)) = schedule.events().first() {
            Error::check_dim(model.dim(), d.len())?;
        }
    }
    let target = model.target().to_vec();
    let n = model.dim();

    let mut trajs: Vec<Trajectory> = x0s
        .rows()
        .into_iter()
        .map(|r| Trajectory {
            states: vec![r.to_vec()],
            actions: Vec::new(),
            dt: cfg.dt,
            terminated: Termination::StepLimit,
            perturbed_at: Vec::new(),
        })
        .collect();
    let mut outcome: Vec<Option<Result<Trajectory>>> = trajs.iter().map(|_| None).collect();
    let mut active: Vec<usize> = (0..trajs.len()).collect();

    for step in 0..=cfg.max_steps {
        for &i in &active {
            if let Some(d) = schedules[i].at(step) {
                let x = trajs[i].states.last_mut().expect("start state");
                for (xk, dk) in x.iter_mut().zip(d) {
                    *xk += dk;
                }
                trajs[i].perturbed_at.push(step);
            }
        }
        let mut still = Vec::with_capacity(active.len());
        for &i in &active {
            let pending = schedules[i].last_step().is_some_and(|k| k > step);
            let x = trajs[i].last_state();
            if x.iter().any(|v| !v.is_finite()) {
                let mut partial = std::mem::replace(&mut trajs[i], empty(cfg.dt));
                partial.states.pop();
                partial.actions.pop();
                outcome[i] = Some(Err(Error::RolloutDiverged { step, partial: Box::new(partial) }));
            } else if !pending && distance(x, &target) < cfg.conv_radius {
                trajs[i].terminated = Termination::Converged;
                outcome[i] = Some(Ok(std::mem::replace(&mut trajs[i], empty(cfg.dt))));
            } else if step == cfg.max_steps {
                outcome[i] = Some(Ok(std::mem::replace(&mut trajs[i], empty(cfg.dt))));
            } else {
                still.push(i);
            }
        }
        active = still;
        if active.is_empty() {
            break;
        }

        let mut xs = Matrix::zeros((active.len(), n));
        for (r, &i) in active.iter().enumerate() {
            for (k, v) in trajs[i].last_state().iter().enumerate() {
                xs[[r, k]] = *v;
            }
        }
        let actions = match model.actions(&xs) {
            Ok(a) => a,
            Err(Error::NonFinite { .. }) => {
                // fall back to rows one at a time to isolate the bad ones
                let mut a = Matrix::from_elem((active.len(), n), f64::NAN);
                for r in 0..active.len() {
                    if let Ok(row) = model.action(&xs.row(r).to_vec()) {
                        a.row_mut(r).assign(&ndarray::ArrayView1::from(&row));
                    }
                }
                a
            }
            Err(e) => return Err(e),
        };
        for (r, &i) in active.iter().enumerate() {
            let a = actions.row(r).to_vec();
            let x = trajs[i].last_state();
            let next: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + cfg.dt * a).collect();
            trajs[i].actions.push(a);
            trajs[i].states.push(next);
        }
    }
    Ok(outcome.into_iter().map(|o| o.expect("every rollout terminates")).collect())
}

fn empty(dt: f64) -> Trajectory {
    Trajectory {
        states: Vec::new(),
        actions: Vec::new(),
        dt,
        terminated: Termination::StepLimit,
        perturbed_at: Vec::new(),
    }
}

/// `v(x[k])` along a trajectory.
pub fn energy_profile(model: &StablePolicyModel, traj: &Trajectory) -> Result<Vec<f64>> {
    let n = model.dim();
    let flat: Vec<f64> = traj.states.iter().flatten().copied().collect();
    let xs = Matrix::from_shape_vec((traj.states.len(), n), flat)
        .map_err(|_| Error::Dimension { expected: n, got: traj.states.first().map_or(0, Vec::len) })?;
    Ok(model.lpf.value_batch(&xs)?.into_iter().collect())
}

/// Mean squared component error between two equally shaped matrices.
pub fn mean_squared_error(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    Error::check_dim(truth.ncols(), pred.ncols())?;
    Error::check_dim(truth.nrows(), pred.nrows())?;
    if pred.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    Ok((pred - truth).mapv(|e| e * e).sum() / pred.len() as f64)
}

/// Velocity imitation error over the given samples; divisor `n × samples`.
pub fn mse_metric(model: &StablePolicyModel, ds: &Dataset, samples: &[Window]) -> Result<f64> {
    Error::check_dim(model.dim(), ds.dim())?;
    if samples.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let (xs, vs) = ds.samples(samples);
    mean_squared_error(&model.actions(&xs)?, &vs)
}

/// Per-pair ground cost `‖a − b‖^q`.
pub fn ground_cost(a: &[f64], b: &[f64], q: f64) -> f64 {
    distance(a, b).powf(q)
}

/// Dynamic time warping with steps (1,0), (0,1), (1,1) and matched endpoints:
/// the minimum over alignment paths of `(Σ ‖a_i − b_j‖^q)^(1/q)`.
pub fn dtw_metric(a: &[Vec<f64>], b: &[Vec<f64>], q: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Dataset("dtw needs two non-empty sequences".into()));
    }
    if !(q > 0.0) {
        return Err(Error::Config(format!("dtw exponent must be positive, got {q}")));
    }
    let n = a[0].len();
    for x in a.iter().chain(b) {
        Error::check_dim(n, x.len())?;
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = best + ground_cost(ai, bj, q);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1].powf(1.0 / q))
}

/// DTW between each demonstration and a rollout from its first state.
///
/// A rollout that leaves the finite range scores `+∞`.
pub fn demo_dtw(model: &StablePolicyModel, ds: &Dataset, cfg: &RolloutConfig, q: f64) -> Result<Vec<f64>> {
    Error::check_dim(model.dim(), ds.dim())?;
    let mut x0s = Matrix::zeros((ds.len(), ds.dim()));
    for (d, demo) in ds.demos.iter().enumerate() {
        x0s.row_mut(d).assign(&demo.states.row(0));
    }
    let mut out = Vec::with_capacity(ds.len());
    for (demo, traj) in ds.demos.iter().zip(rollout_many(model, &x0s, cfg)?) {
        let reference: Vec<Vec<f64>> = demo.states.rows().into_iter().map(|r| r.to_vec()).collect();
        out.push(match traj {
            Ok(t) => dtw_metric(&t.states, &reference, q)?,
            Err(Error::RolloutDiverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (divisor `n − 1`, zero for one value),
/// summed in slice order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Axis-aligned planar grid with `resolution[k] ≥ 2` points per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub resolution: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub x: [f64; 2],
    pub action: [f64; 2],
    pub v: f64,
    pub vdot: f64,
}

/// Samples the field row by row: `x2` is the slow index, `x1` the fast one.
pub fn export_field(model: &StablePolicyModel, grid: &FieldGrid) -> Result<Vec<FieldRow>> {
    if model.dim() != 2 {
        return Err(Error::Config(format!("field export is planar only, model has dimension {}", model.dim())));
    }
    let [nx, ny] = grid.resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::Config(format!("grid resolution must be at least 2 per axis, got {nx}x{ny}")));
    }
    let coord = |k: usize, i: usize, count: usize| {
        grid.min[k] + (grid.max[k] - grid.min[k]) * i as f64 / (count - 1) as f64
    };
    let mut xs = Matrix::zeros((nx * ny, 2));
    for j in 0..ny {
        for i in 0..nx {
            xs[[j * nx + i, 0]] = coord(0, i, nx);
            xs[[j * nx + i, 1]] = coord(1, j, ny);
        }
    }
    let actions = model.actions(&xs)?;
    let values = model.lpf.value_batch(&xs)?;
    let grads = model.lpf.gradient_batch(&xs)?;
    Ok((0..nx * ny)
        .map(|r| FieldRow {
            x: [xs[[r, 0]], xs[[r, 1]]],
            action: [actions[[r, 0]], actions[[r, 1]]],
            v: values[[r, 0]],
            vdot: grads[[r, 0]] * actions[[r, 0]] + grads[[r, 1]] * actions[[r, 1]],
        })
        .collect())
}

pub fn write_field_csv(rows: &[FieldRow], path: &Path) -> Result<()> {
    let mut out = String::from("x1,x2,a1,a2,v,vdot\n");
    for r in rows {
        writeln!(
            out,
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            r.x[0], r.x[1], r.action[0], r.action[1], r.v, r.vdot
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `k,x1..xn,a1..an`; the final state has no action, so its action fields are empty.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states.first().map_or(0, Vec::len);
    let mut out = String::from("k");
    for i in 1..=n {
        write!(out, ",x{i}").unwrap();
    }
    for i in 1..=n {
        write!(out, ",a{i}").unwrap();
    }
    out.push('\n');
    for (k, x) in traj.states.iter().enumerate() {
        write!(out, "{k}").unwrap();
        for v in x {
            write!(out, ",{v:e}").unwrap();
        }
        match traj.actions.get(k) {
            Some(a) => a.iter().for_each(|v| write!(out, ",{v:e}").unwrap()),
            None => (0..n).for_each(|_| out.push(',')),
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    fs::write(path, trajectory_csv(traj)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::Potential;
    use crate::nets::{Activation, IcnnParams, MlpParams};
    use crate::stablepolicy::{ModelConfig, PolicyMode, ProjectionActivation};
    use ndarray::array;

    /// Constant raw action `c`, potential `δ‖x − (5,5)‖²`, unconstrained so the action is exactly `c`.
    fn constant_model(c: [f64; 2]) -> StablePolicyModel {
        let mut policy = MlpParams::zeros(&[2, 2], Activation::LeakyRelu).unwrap();
        policy.biases[0] = array![[c[0], c[1]]];
        let icnn = IcnnParams::zeros(&[2, 2, 1]).unwrap();
        let lpf = Potential::new(icnn, vec![5.0, 5.0], 1.0).unwrap();
        StablePolicyModel::new(policy, lpf, ProjectionActivation::Relu, 1e-9, PolicyMode::Unconstrained).unwrap()
    }

    fn cfg(dt: f64, max_steps: usize) -> RolloutConfig {
        RolloutConfig { dt, max_steps, conv_radius: 1e-3, schedule: PerturbationSchedule::default() }
    }

    #[test]
    fn zero_action_stays_put() {
        let t = rollout(&constant_model([0.0, 0.0]), &[1.0, 2.0], &cfg(0.1, 5)).unwrap();
        assert_eq!(t.terminated, Termination::StepLimit);
        assert_eq!(t.states.len(), 6);
        assert!(t.states.iter().all(|x| x == &vec![1.0, 2.0]));
    }

    #[test]
    fn one_euler_step() {
        let t = rollout(&constant_model([1.0, 2.0]), &[0.0, 0.0], &cfg(0.1, 1)).unwrap();
        assert_eq!(t.states[1], vec![0.1, 0.2]);
        assert_eq!(t.actions, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn euler_reconstruction_is_exact() {
        let model = ModelConfig { policy_sizes: vec![2, 8, 2], icnn_sizes: vec![2, 8, 1], ..Default::default() }
            .build(&[0.0, 0.0], 3)
            .unwrap();
        let t = rollout(&model, &[0.7, -0.4], &cfg(0.01, 50)).unwrap();
        for k in 0..t.actions.len() {
            for i in 0..2 {
                assert_eq!(t.states[k + 1][i], t.states[k][i] + 0.01 * t.actions[k][i]);
            }
        }
    }

    #[test]
    fn perturbation_applies_before_the_step() {
        let schedule = PerturbationSchedule::new(vec![(2, vec![1.0, 0.0])]).unwrap();
        let c = RolloutConfig { schedule, ..cfg(0.1, 4) };
        let t = rollout(&constant_model([0.0, 0.0]), &[0.0, 0.0], &c).unwrap();
        assert_eq!(t.perturbed_at, vec![2]);
        assert_eq!(t.states[1], vec![0.0, 0.0]);
        assert_eq!(t.states[2], vec![1.0, 0.0]);
        assert_eq!(t.states[4], vec![1.0, 0.0]);
    }

    #[test]
    fn pending_perturbation_delays_convergence() {
        let schedule = PerturbationSchedule::new(vec![(3, vec![0.5, 0.0])]).unwrap();
        let c = RolloutConfig { schedule, ..cfg(0.1, 10) };
        let t = rollout(&constant_model([0.0, 0.0]), &[0.0, 0.0], &c).unwrap();
        assert_eq!(t.perturbed_at, vec![3]);
        assert_eq!(t.terminated, Termination::StepLimit);
    }

    #[test]
    fn rows_follow_their_own_schedules() {
        let schedules = vec![
            PerturbationSchedule::new(vec![(1, vec![1.0, 0.0])]).unwrap(),
            PerturbationSchedule::default(),
            PerturbationSchedule::new(vec![(2, vec![0.0, -1.0])]).unwrap(),
        ];
        let x0s = Matrix::zeros((3, 2));
        let out = rollout_many_scheduled(&constant_model([0.0, 0.0]), &x0s, &cfg(0.1, 3), &schedules).unwrap();
        let ts: Vec<Trajectory> = out.into_iter().map(|t| t.unwrap()).collect();
        assert_eq!(ts[0].perturbed_at, vec![1]);
        assert_eq!(ts[0].last_state(), &[1.0, 0.0]);
        assert!(ts[1].perturbed_at.is_empty());
        assert_eq!(ts[2].perturbed_at, vec![2]);
        assert_eq!(ts[2].last_state(), &[0.0, -1.0]);
        assert!(rollout_many_scheduled(&constant_model([0.0, 0.0]), &x0s, &cfg(0.1, 3), &schedules[..2]).is_err());
    }

    #[test]
    fn schedule_must_increase() {
        assert!(PerturbationSchedule::new(vec![(3, vec![0.0]), (3, vec![1.0])]).is_err());
        assert!(PerturbationSchedule::new(vec![(4, vec![0.0]), (3, vec![1.0])]).is_err());
    }

    #[test]
    fn divergence_returns_partial_trajectory() {
        let t = rollout(&constant_model([f64::MAX, 0.0]), &[f64::MAX, 0.0], &cfg(1.0, 10));
        match t {
            Err(Error::RolloutDiverged { step, partial }) => {
                assert_eq!(step, 1);
                assert_eq!(partial.states.len(), 1);
                assert!(partial.actions.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mse_examples() {
        let truth = array![[1.0, 2.0]];
        assert_eq!(mean_squared_error(&truth, &truth).unwrap(), 0.0);
        assert_eq!(mean_squared_error(&array![[2.0, 2.0]], &truth).unwrap(), 0.5);
        let a = array![[1.0, 0.0], [0.0, 3.0]];
        let b = array![[0.0, 3.0], [1.0, 0.0]];
        let zeros = Matrix::zeros((2, 2));
        assert_eq!(
            mean_squared_error(&a, &zeros).unwrap(),
            mean_squared_error(&b, &zeros).unwrap()
        );
    }

    #[test]
    fn dtw_examples() {
        let a = vec![vec![0.0], vec![2.0]];
        let b = vec![vec![0.0], vec![1.0]];
        assert_eq!(dtw_metric(&a, &b, 2.0).unwrap(), 1.0);
        assert_eq!(dtw_metric(&a, &a, 2.0).unwrap(), 0.0);
        assert!(dtw_metric(&a, &[], 2.0).is_err());
    }

    #[test]
    fn field_grid_corners() {
        let grid = FieldGrid { min: [-1.0, -2.0], max: [1.0, 2.0], resolution: [2, 2] };
        let rows = export_field(&constant_model([0.0, 0.0]), &grid).unwrap();
        let corners: Vec<[f64; 2]> = rows.iter().map(|r| r.x).collect();
        assert_eq!(corners, vec![[-1.0, -2.0], [1.0, -2.0], [-1.0, 2.0], [1.0, 2.0]]);
        let bad = FieldGrid { resolution: [1, 2], ..grid };
        assert!(export_field(&constant_model([0.0, 0.0]), &bad).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let t = rollout(&constant_model([1.0, 2.0]), &[0.0, 0.0], &cfg(0.5, 1)).unwrap();
        let text = trajectory_csv(&t);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,x1,x2,a1,a2");
        assert_eq!(lines[1], "0,0e0,0e0,1e0,2e0");
        assert_eq!(lines[2], "1,5e-1,1e0,,");
    }

    #[test]
    fn mean_std_of_small_samples() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, sd) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

}
