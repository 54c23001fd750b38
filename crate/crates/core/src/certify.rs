//! Sampled checks of the stability certificate of a trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Bounds;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::simeval::{rollout_many, PerturbationSchedule, RolloutConfig};
use crate::stablepolicy::StablePolicyModel;
use crate::trainer::{sample_states, HALF_SPACE_TOLERANCE};

pub const CONVEXITY_SLACK: f64 = 1e-9;
pub const TARGET_VALUE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub samples: usize,
    pub convexity_triples: usize,
    pub rollouts: usize,
    pub box_factor: f64,
    pub seed: u64,
    pub dt: f64,
    pub max_steps: usize,
    /// Relative to the data extent.
    pub conv_radius: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            convexity_triples: 1000,
            rollouts: 100,
            box_factor: 3.0,
            seed: 0,
            dt: 0.005,
            max_steps: 3000,
            conv_radius: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    /// Largest violation seen, in the units of the check.
    pub worst: f64,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl CertifyReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(CheckOutcome::ok)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn far_from(xs: &Matrix, target: &[f64], min_dist: f64) -> Vec<bool> {
    xs.rows()
        .into_iter()
        .map(|r| r.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() > min_dist)
        .collect()
}

/// `v > 0` away from the target and `|v(x*)| < 1e-12`.
pub fn check_positivity(model: &StablePolicyModel, xs: &Matrix, min_dist: f64) -> Result<CheckOutcome> {
    let target = model.target();
    let far = far_from(xs, target, min_dist);
    let values = model.lpf.value_batch(xs)?;
    let mut out = CheckOutcome { name: "positivity".into(), passed: 0, failed: 0, worst: 0.0 };
    for (v, f) in values.iter().zip(far) {
        if !f {
            continue;
        }
        if *v > 0.0 {
            out.passed += 1;
        } else {
            out.failed += 1;
            out.worst = out.worst.max(-v);
        }
    }
    let at_target = model.lpf.value(target)?.abs();
    if at_target < TARGET_VALUE_TOLERANCE {
        out.passed += 1;
    } else {
        out.failed += 1;
        out.worst = out.worst.max(at_target);
    }
    Ok(out)
}

/// Midpoint inequality `v̂((a+b)/2) ≤ (v̂(a)+v̂(b))/2 + slack` on the convex network.
pub fn check_convexity(model: &StablePolicyModel, a: &Matrix, b: &Matrix) -> Result<CheckOutcome> {
    let mid = (a + b) * 0.5;
    let icnn = &model.lpf.icnn;
    let (va, vb, vm) = (icnn.forward_batch(a)?, icnn.forward_batch(b)?, icnn.forward_batch(&mid)?);
    let mut out = CheckOutcome { name: "convexity".into(), passed: 0, failed: 0, worst: 0.0 };
    for r in 0..a.nrows() {
        let gap = vm[[r, 0]] - 0.5 * (va[[r, 0]] + vb[[r, 0]]);
        if gap <= CONVEXITY_SLACK {
            out.passed += 1;
        } else {
            out.failed += 1;
            out.worst = out.worst.max(gap);
        }
    }
    Ok(out)
}

/// `∇v(x)ᵀπ(x) ≤ 1e-8` away from the target.
pub fn check_half_space(model: &StablePolicyModel, xs: &Matrix, min_dist: f64) -> Result<CheckOutcome> {
    let far = far_from(xs, model.target(), min_dist);
    let dec = model.lyapunov_decrease_batch(xs)?;
    let mut out = CheckOutcome { name: "half_space".into(), passed: 0, failed: 0, worst: 0.0 };
    for (d, f) in dec.iter().zip(far) {
        if !f {
            continue;
        }
        if *d <= HALF_SPACE_TOLERANCE {
            out.passed += 1;
        } else {
            out.failed += 1;
            out.worst = out.worst.max(*d);
        }
    }
    Ok(out)
}

/// Every rollout from `x0s` reaches the convergence radius.
pub fn check_convergence(model: &StablePolicyModel, x0s: &Matrix, cfg: &RolloutConfig) -> Result<CheckOutcome> {
    let mut out = CheckOutcome { name: "convergence".into(), passed: 0, failed: 0, worst: 0.0 };
    let target = model.target();
    for t in rollout_many(model, x0s, cfg)? {
        match t {
            Ok(t) if t.converged() => out.passed += 1,
            Ok(t) => {
                out.failed += 1;
                let d = t.last_state().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                out.worst = out.worst.max(d);
            }
            Err(Error::RolloutDiverged { .. }) => {
                out.failed += 1;
                out.worst = f64::INFINITY;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Runs all four checks on states drawn from `bounds` scaled by `box_factor`.
pub fn certify(model: &StablePolicyModel, bounds: &Bounds, cfg: &CertifyConfig) -> Result<CertifyReport> {
    Error::check_dim(model.dim(), bounds.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let region = bounds.scaled_box(cfg.box_factor);
    let extent = bounds.extent();
    let min_dist = 1e-6 * extent;

    let xs = sample_states(&region, cfg.samples, &mut rng);
    let positivity = check_positivity(model, &xs, min_dist)?;
    let half_space = check_half_space(model, &xs, min_dist)?;

    let a = sample_states(&region, cfg.convexity_triples, &mut rng);
    let b = sample_states(&region, cfg.convexity_triples, &mut rng);
    let convexity = check_convexity(model, &a, &b)?;

    let x0s = sample_states(&region, cfg.rollouts, &mut rng);
    let rollout_cfg = RolloutConfig {
        dt: cfg.dt,
        max_steps: cfg.max_steps,
        conv_radius: cfg.conv_radius * extent,
        schedule: PerturbationSchedule::default(),
    };
    let convergence = check_convergence(model, &x0s, &rollout_cfg)?;
    Ok(CertifyReport { checks: vec![positivity, convexity, half_space, convergence] })
}
