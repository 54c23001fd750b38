//! Short-horizon imitation loss and the square-root velocity transform.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Window};
use crate::diffcore::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::stablepolicy::{ModelBinding, StablePolicyModel};

pub const DEFAULT_HORIZON: usize = 2;
pub const DEFAULT_SRVF_WEIGHT: f64 = 0.1;
/// Segments shorter than this are treated as stationary.
pub const SRVF_MIN_SEGMENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Number of Euler steps N_w checked against the demonstration.
    pub horizon: usize,
    /// γ_0..γ_{N_w}.
    pub discounts: Vec<f64>,
    pub dt: f64,
    pub srvf_term: bool,
    pub srvf_weight: f64,
}

impl LossConfig {
    /// Horizon 2 with discounts `2^-i`.
    pub fn new(dt: f64) -> Self {
        Self::with_horizon(DEFAULT_HORIZON, dt)
    }

    pub fn with_horizon(horizon: usize, dt: f64) -> Self {
        Self {
            horizon,
            discounts: (0..=horizon).map(|i| 0.5f64.powi(i as i32)).collect(),
            dt,
            srvf_term: false,
            srvf_weight: DEFAULT_SRVF_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("loss horizon must be at least 1".into()));
        }
        if self.discounts.len() != self.horizon + 1 {
            return Err(Error::Config(format!(
                "expected {} discounts for horizon {}, got {}",
                self.horizon + 1,
                self.horizon,
                self.discounts.len()
            )));
        }
        if self.discounts.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("discounts must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// SRVF vectors of a polyline; `degenerate[s]` marks stationary segments,
/// whose vector is set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SrvfSequence {
    pub q: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

/// `q[s] = Δx[s] / ‖Δx[s]‖^½` with `Δx[s] = x[s+1] − x[s]`.
pub fn srvf_transform(states: &[Vec<f64>]) -> Result<SrvfSequence> {
    if states.len() < 2 {
        return Err(Error::Config(format!(
            "srvf needs at least two points, got {}",
            states.len()
        )));
    }
    let n = states[0].len();
    let mut q = Vec::with_capacity(states.len() - 1);
    let mut degenerate = Vec::with_capacity(states.len() - 1);
    for pair in states.windows(2) {
        Error::check_dim(n, pair[1].len())?;
        let (v, stationary) = srvf_segment(pair[0].iter().zip(&pair[1]).map(|(a, b)| b - a));
        q.push(v);
        degenerate.push(stationary);
    }
    Ok(SrvfSequence { q, degenerate })
}

fn srvf_segment(delta: impl Iterator<Item = f64>) -> (Vec<f64>, bool) {
    let delta: Vec<f64> = delta.collect();
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm < SRVF_MIN_SEGMENT {
        (vec![0.0; delta.len()], true)
    } else {
        let s = norm.sqrt();
        (delta.into_iter().map(|d| d / s).collect(), false)
    }
}

/// Windows of `horizon + 1` consecutive states stacked by offset:
/// `states[i]` holds `x[s + i]` for every window start `s`, one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub states: Vec<Matrix>,
    /// Expert velocity at each window's first state.
    pub velocities: Matrix,
}

impl WindowBatch {
    pub fn from_windows(ds: &Dataset, windows: &[Window], horizon: usize) -> Result<Self> {
        let n = ds.dim();
        let b = windows.len();
        let mut states = vec![Matrix::zeros((b, n)); horizon + 1];
        let mut velocities = Matrix::zeros((b, n));
        for (row, w) in windows.iter().enumerate() {
            let demo = ds.demos.get(w.demo).ok_or_else(|| {
                Error::Dataset(format!("window refers to missing demonstration {}", w.demo))
            })?;
            if w.start + horizon >= demo.len() {
                return Err(Error::Dataset(format!(
                    "window at {}:{} with horizon {} crosses the end of its demonstration ({} samples)",
                    w.demo,
                    w.start,
                    horizon,
                    demo.len()
                )));
            }
            for (i, m) in states.iter_mut().enumerate() {
                m.row_mut(row).assign(&demo.states.row(w.start + i));
            }
            velocities.row_mut(row).assign(&demo.velocities.row(w.start));
        }
        Ok(Self { states, velocities })
    }

    pub fn len(&self) -> usize {
        self.velocities.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

/// Records the loss on `tape` and returns its 1x1 node.
///
/// ```text
/// γ_0·mean[(π(x[s]) − ẋ[s])²] + Σ_{i=1..N_w} γ_i·mean[(x[s+i−1] + Δt·π(x[s+i−1]) − x[s+i])²]
/// ```
pub fn horizon_loss_on_tape(
    tape: &mut Tape,
    model: &ModelBinding,
    batch: &WindowBatch,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Dataset("empty window batch".into()));
    }
    if batch.horizon() < cfg.horizon {
        return Err(Error::Config(format!(
            "batch horizon {} shorter than loss horizon {}",
            batch.horizon(),
            cfg.horizon
        )));
    }
    let b = batch.len();
    let n = batch.velocities.ncols();

    // every state the policy is queried at, grouped by window offset
    let mut stacked = Matrix::zeros((b * cfg.horizon, n));
    for i in 0..cfg.horizon {
        stacked
            .slice_mut(ndarray::s![i * b..(i + 1) * b, ..])
            .assign(&batch.states[i]);
    }
    let x_all = tape.constant(stacked);
    let actions = model.action(tape, x_all)?;

    let labels = tape.constant(batch.velocities.clone());
    let a0 = tape.slice_rows(actions, 0, b)?;
    let diff = tape.sub(a0, labels)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq)?;
    let mut loss = tape.scale(mse, cfg.discounts[0])?;

    for i in 1..=cfg.horizon {
        let prev = tape.constant(batch.states[i - 1].clone());
        let next = tape.constant(batch.states[i].clone());
        let a = tape.slice_rows(actions, (i - 1) * b, i * b)?;
        let step = tape.scale(a, cfg.dt)?;
        let pred = tape.add(prev, step)?;
        let resid = tape.sub(pred, next)?;
        let sq = tape.square(resid)?;
        let term = tape.mean(sq)?;
        let weighted = tape.scale(term, cfg.discounts[i])?;
        loss = tape.add(loss, weighted)?;

        if cfg.srvf_term {
            let q_pred = srvf_on_tape(tape, step)?;
            let expert = &batch.states[i] - &batch.states[i - 1];
            let mut q_exp = Matrix::zeros(expert.dim());
            for (mut out, seg) in q_exp.rows_mut().into_iter().zip(expert.rows()) {
                let (q, _) = srvf_segment(seg.iter().copied());
                out.assign(&ndarray::Array1::from(q));
            }
            let q_exp = tape.constant(q_exp);
            let d = tape.sub(q_pred, q_exp)?;
            let sq = tape.square(d)?;
            let term = tape.mean(sq)?;
            let weighted = tape.scale(term, cfg.srvf_weight)?;
            loss = tape.add(loss, weighted)?;
        }
    }
    Ok(loss)
}

/// Row-wise `d / ‖d‖^½`, smoothed at the origin so it stays differentiable.
fn srvf_on_tape(tape: &mut Tape, d: NodeId) -> Result<NodeId> {
    let sq = tape.square(d)?;
    let norm_sq = tape.row_sum(sq)?;
    let eps = tape.add_scalar(norm_sq, SRVF_MIN_SEGMENT * SRVF_MIN_SEGMENT)?;
    let norm = tape.sqrt(eps)?;
    let root = tape.sqrt(norm)?;
    Ok(tape.div(d, root)?)
}

pub fn horizon_loss(model: &StablePolicyModel, batch: &WindowBatch, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let loss = horizon_loss_on_tape(&mut tape, &binding, batch, cfg)?;
    Ok(tape.scalar_value(loss)?)
}

/// Loss value and its gradient for every matrix in [`StablePolicyModel::parameters`].
pub fn loss_and_gradients(
    model: &StablePolicyModel,
    batch: &WindowBatch,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let loss = horizon_loss_on_tape(&mut tape, &binding, batch, cfg)?;
    let value = tape.scalar_value(loss)?;
    let mut grads = tape.backward(loss)?;
    let out = binding
        .parameter_ids()
        .into_iter()
        .map(|id| grads.take(id).expect("every parameter is a tape leaf"))
        .collect();
    Ok((value, out))
}
