//! Joint optimization of the policy network and the convex potential.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Bounds, Dataset, Window};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::objective::{horizon_loss, loss_and_gradients, LossConfig, WindowBatch};
use crate::stablepolicy::{PolicyMode, StablePolicyModel};

/// States sampled for the half-space check at each checkpoint.
const CHECKPOINT_SAMPLES: usize = 256;
const FINAL_CHECK_SAMPLES: usize = 2000;
/// Tolerance on `∇vᵀπ` for the half-space check.
pub const HALF_SPACE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one matrix per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.dim())).collect();
        Self { second: first.clone(), first, step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Config(format!(
            "adam: {} params, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return Err(Error::Config(format!(
                "adam: shape mismatch {:?} / {:?} / {:?}",
                p.dim(),
                g.dim(),
                m.dim()
            )));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { stage: "gradient" });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            });
    }
    Ok(())
}

/// Global L2 norm over every gradient matrix.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Run invariant checks every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Stop after this many epochs without improvement on a held-out tenth
    /// of the training windows.
    pub early_stopping_patience: Option<usize>,
}

impl TrainConfig {
    pub fn new(dt: f64) -> Self {
        Self {
            loss: LossConfig::new(dt),
            adam: AdamConfig::default(),
            batch_size: 128,
            max_epochs: 500,
            grad_clip_norm: Some(1.0),
            seed: 0,
            checkpoint_every: 50,
            early_stopping_patience: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub loss: f64,
    pub half_space_violations: usize,
    pub max_decrease: f64,
    pub min_recursion_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSummary {
    pub samples: usize,
    pub half_space_violations: usize,
    pub max_decrease: f64,
    pub positivity_violations: usize,
    pub min_recursion_weight: f64,
}

impl InvariantSummary {
    pub fn holds(&self) -> bool {
        self.half_space_violations == 0 && self.positivity_violations == 0 && self.min_recursion_weight >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub mode: PolicyMode,
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    /// Training-set loss of the returned model.
    pub final_loss: f64,
    /// Mean batch loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub invariants: InvariantSummary,
    pub stopped_early: bool,
    pub config: TrainConfig,
}

/// Loss over `windows` evaluated in chunks; equals the single-batch loss.
pub fn dataset_loss(
    model: &StablePolicyModel,
    ds: &Dataset,
    windows: &[Window],
    cfg: &LossConfig,
    chunk: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Dataset("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for part in windows.chunks(chunk.max(1)) {
        let batch = WindowBatch::from_windows(ds, part, cfg.horizon)?;
        total += horizon_loss(model, &batch, cfg)? * part.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Uniform states in `bounds`.
pub fn sample_states<R: Rng>(bounds: &Bounds, count: usize, rng: &mut R) -> Matrix {
    let n = bounds.dim();
    let mut xs = Matrix::zeros((count, n));
    for mut row in xs.rows_mut() {
        for k in 0..n {
            row[k] = rng.random_range(bounds.min[k]..=bounds.max[k]);
        }
    }
    xs
}

fn min_recursion_weight(model: &StablePolicyModel) -> f64 {
    model
        .lpf
        .icnn
        .effective_weights()
        .iter()
        .flat_map(|w| w.iter().copied())
        .fold(f64::INFINITY, f64::min)
}

/// Half-space and positivity checks on `count` states in the 3x data box.
pub fn check_invariants(model: &StablePolicyModel, bounds: &Bounds, count: usize, seed: u64) -> Result<InvariantSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = sample_states(&bounds.scaled_box(3.0), count, &mut rng);
    let min_dist = 1e-6 * bounds.extent();
    let target = model.target();
    let far: Vec<bool> = xs
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() > min_dist)
        .collect();

    let (half_space_violations, max_decrease) = if model.mode == PolicyMode::Stable {
        let dec = model.lyapunov_decrease_batch(&xs)?;
        let relevant = dec.iter().zip(&far).filter(|(_, &f)| f).map(|(d, _)| *d);
        let max = relevant.clone().fold(f64::NEG_INFINITY, f64::max);
        (relevant.filter(|&d| d > HALF_SPACE_TOLERANCE).count(), max)
    } else {
        (0, f64::NAN)
    };
    let values = model.lpf.value_batch(&xs)?;
    let positivity_violations = values
        .iter()
        .zip(&far)
        .filter(|(v, &f)| f && !(**v > 0.0))
        .count();
    Ok(InvariantSummary {
        samples: count,
        half_space_violations,
        max_decrease,
        positivity_violations,
        min_recursion_weight: min_recursion_weight(model),
    })
}

pub fn train(
    ds: &Dataset,
    windows: &[Window],
    model: StablePolicyModel,
    cfg: &TrainConfig,
) -> Result<(StablePolicyModel, TrainReport)> {
    train_with_checkpoints(ds, windows, model, cfg, |_, _| {})
}

/// Trains and calls `on_checkpoint(epoch, model)` every `cfg.checkpoint_every` epochs.
///
/// Identical data, model, and configuration give bitwise-identical results:
/// shuffling draws from a stream derived from `cfg.seed` and all reductions
/// run in a fixed order.
pub fn train_with_checkpoints(
    ds: &Dataset,
    windows: &[Window],
    mut model: StablePolicyModel,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &StablePolicyModel),
) -> Result<(StablePolicyModel, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    if windows.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    Error::check_dim(model.dim(), ds.dim())?;
    let bounds = ds.bounds();
    model.bounds = Some(bounds.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut train_windows = windows.to_vec();
    let mut holdout: Vec<Window> = Vec::new();
    if cfg.early_stopping_patience.is_some() && windows.len() >= 10 {
        train_windows.shuffle(&mut rng);
        holdout = train_windows.split_off(train_windows.len() - train_windows.len() / 10);
        train_windows.sort();
    }

    let chunk = cfg.batch_size.max(256);
    let initial_loss = dataset_loss(&model, ds, &train_windows, &cfg.loss, chunk)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite { stage: "initial loss" });
    }

    let mut state = AdamState::for_params(model.parameters());
    let mut epoch_losses = Vec::with_capacity(cfg.max_epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.max_epochs);
    let mut checkpoints = Vec::new();
    let mut last_good = model.clone();
    let mut best: Option<(f64, StablePolicyModel)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        train_windows.shuffle(&mut rng);
        let mut total = 0.0;
        for part in train_windows.chunks(cfg.batch_size) {
            let batch = WindowBatch::from_windows(ds, part, cfg.loss.horizon)?;
            let (loss, mut grads) = loss_and_gradients(&model, &batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, stage: "loss", checkpoint: Box::new(last_good) });
            }
            if let Some(max) = cfg.grad_clip_norm {
                clip_gradients(&mut grads, max);
            }
            let mut params = model.parameters_mut();
            if let Err(e) = adam_step(&mut params, &grads, &mut state, &cfg.adam) {
                return match e {
                    Error::NonFinite { stage } => {
                        Err(Error::Diverged { epoch, stage, checkpoint: Box::new(last_good) })
                    }
                    other => Err(other),
                };
            }
            total += loss * part.len() as f64;
        }
        let epoch_loss = total / train_windows.len() as f64;
        epoch_losses.push(epoch_loss);
        epoch_seconds.push(started.elapsed().as_secs_f64());
        last_good = model.clone();

        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let inv = check_invariants(&model, &bounds, CHECKPOINT_SAMPLES, cfg.seed ^ done as u64)?;
            checkpoints.push(CheckpointRecord {
                epoch: done,
                loss: epoch_loss,
                half_space_violations: inv.half_space_violations,
                max_decrease: inv.max_decrease,
                min_recursion_weight: inv.min_recursion_weight,
            });
            on_checkpoint(done, &model);
        }

        if let Some(patience) = cfg.early_stopping_patience {
            if !holdout.is_empty() {
                let val = dataset_loss(&model, ds, &holdout, &cfg.loss, chunk)?;
                if best.as_ref().is_none_or(|(b, _)| val < *b) {
                    best = Some((val, model.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    if stopped_early {
        if let Some((_, m)) = best {
            model = m;
        }
    }
    train_windows.sort();
    let final_loss = dataset_loss(&model, ds, &train_windows, &cfg.loss, chunk)?;
    let invariants = check_invariants(&model, &bounds, FINAL_CHECK_SAMPLES, cfg.seed)?;
    let report = TrainReport {
        seed: cfg.seed,
        mode: model.mode,
        initial_loss,
        final_loss,
        epoch_losses,
        epoch_seconds,
        checkpoints,
        invariants,
        stopped_early,
        config: cfg.clone(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = array![[1.5, -2.0]];
        let mut state = AdamState::for_params([&p]);
        adam_step(&mut [&mut p], &[Matrix::zeros((1, 2))], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, array![[1.5, -2.0]]);
        assert_eq!(state.first[0], Matrix::zeros((1, 2)));
        assert_eq!(state.second[0], Matrix::zeros((1, 2)));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = array![[0.0]];
        let mut state = AdamState::for_params([&p]);
        adam_step(&mut [&mut p], &[array![[1.0]]], &mut state, &AdamConfig::default()).unwrap();
        assert!((p[[0, 0]] - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18);
        assert!((p[[0, 0]] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn two_steps_follow_moment_recursion() {
        let cfg = AdamConfig::default();
        let mut p = array![[0.0]];
        let mut state = AdamState::for_params([&p]);
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[array![[1.0]]], &mut state, &cfg).unwrap();
        }
        // hand recursion
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[[0, 0]] - x).abs() < 1e-12);
        assert!((state.first[0][[0, 0]] - 0.19).abs() < 1e-12);
        assert!((state.second[0][[0, 0]] - 0.001999).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = array![[0.0]];
        let mut state = AdamState::for_params([&p]);
        let err = adam_step(&mut [&mut p], &[array![[f64::NAN]]], &mut state, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite { stage: "gradient" })));
        assert_eq!(p[[0, 0]], 0.0);
    }

    #[test]
    fn clipping() {
        let mut small = vec![array![[0.3, 0.4]]];
        assert_eq!(clip_gradients(&mut small, 1.0), 0.5);
        assert_eq!(small[0], array![[0.3, 0.4]]);

        let mut big = vec![array![[3.0, 4.0]]];
        assert_eq!(clip_gradients(&mut big, 1.0), 5.0);
        assert!((big[0][[0, 0]] - 0.6).abs() < 1e-15 && (big[0][[0, 1]] - 0.8).abs() < 1e-15);

        let mut zero = vec![Matrix::zeros((2, 2)), Matrix::zeros((1, 3))];
        clip_gradients(&mut zero, 1.0);
        assert!(zero.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(0.01);
        cfg.validate().unwrap();
        cfg.adam.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(0.01);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(0.01);
        cfg.grad_clip_norm = Some(0.0);
        assert!(cfg.validate().is_err());
    }
}
