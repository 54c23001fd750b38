//! Demonstration datasets, window splits, synthetic data, and model files.

mod csv;
mod model_file;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub use self::csv::{load_dataset, read_demonstration, save_dataset, write_demonstration, MANIFEST};
pub use model_file::{load_model, model_from_json, model_to_json, save_model, FORMAT_MAGIC, FORMAT_VERSION};
pub use synthetic::{generate_synthetic, generate_synthetic_with_dt, SyntheticShape};

/// Sampling period assumed when a source does not provide one.
pub const DEFAULT_DT: f64 = 0.01;
/// Endpoint agreement tolerance, relative to the data extent.
pub const ENDPOINT_TOLERANCE: f64 = 1e-6;
const TERMINAL_VELOCITY_TOLERANCE: f64 = 1e-12;

/// One expert trajectory: `N_s x n` states and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub states: Matrix,
    pub velocities: Matrix,
    pub dt: f64,
}

impl Demonstration {
    pub fn new(states: Matrix, velocities: Matrix, dt: f64) -> Result<Self> {
        if states.dim() != velocities.dim() {
            return Err(Error::Dataset(format!(
                "states {:?} and velocities {:?} differ in shape",
                states.dim(),
                velocities.dim()
            )));
        }
        if states.nrows() < 2 {
            return Err(Error::Dataset(format!(
                "a demonstration needs at least 2 samples, got {}",
                states.nrows()
            )));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Dataset(format!("dt must be positive, got {dt}")));
        }
        if states.iter().chain(velocities.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite sample".into()));
        }
        let last = velocities.row(velocities.nrows() - 1);
        if last.iter().any(|v| v.abs() > TERMINAL_VELOCITY_TOLERANCE) {
            return Err(Error::Dataset(format!(
                "terminal velocity must be zero, got {:?}",
                last.to_vec()
            )));
        }
        Ok(Self { states, velocities, dt })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn endpoint(&self) -> Vec<f64> {
        self.states.row(self.len() - 1).to_vec()
    }

    pub fn state(&self, s: usize) -> Vec<f64> {
        self.states.row(s).to_vec()
    }
}

/// Axis-aligned box around a set of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Bounds {
    pub fn of_states<'a>(rows: impl IntoIterator<Item = ndarray::ArrayView1<'a, f64>>) -> Option<Self> {
        let mut it = rows.into_iter();
        let first = it.next()?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for r in it {
            for (k, &v) in r.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Some(Self { min, max })
    }

    /// Longest side; 1 for a degenerate single-point box.
    pub fn extent(&self) -> f64 {
        let e = self
            .min
            .iter()
            .zip(&self.max)
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max);
        if e > 0.0 {
            e
        } else {
            1.0
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Cube of side `factor × extent` around the center.
    pub fn scaled_box(&self, factor: f64) -> Bounds {
        let half = 0.5 * factor * self.extent();
        let c = self.center();
        Bounds {
            min: c.iter().map(|v| v - half).collect(),
            max: c.iter().map(|v| v + half).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }
}

/// Validated demonstrations sharing one target endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
    pub target: Vec<f64>,
}

/// Window start: `horizon + 1` consecutive samples of one demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub demo: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self> {
        let first = demos
            .first()
            .ok_or_else(|| Error::Dataset("no demonstrations".into()))?;
        let n = first.dim();
        for (d, demo) in demos.iter().enumerate() {
            if demo.dim() != n {
                return Err(Error::Dataset(format!(
                    "demonstration {d} has dimension {}, expected {n}",
                    demo.dim()
                )));
            }
        }
        let bounds = Bounds::of_states(demos.iter().flat_map(|d| d.states.rows()))
            .expect("non-empty demonstrations");
        let tol = ENDPOINT_TOLERANCE * bounds.extent();
        let target = first.endpoint();
        for (d, demo) in demos.iter().enumerate().skip(1) {
            let end = demo.endpoint();
            let gap = end
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if gap > tol {
                return Err(Error::Dataset(format!(
                    "demonstration {d} ends at {end:?}, {gap:e} away from the shared target {target:?}"
                )));
            }
        }
        Ok(Self { demos, target })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.demos.iter().map(Demonstration::len).sum()
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::of_states(self.demos.iter().flat_map(|d| d.states.rows())).expect("non-empty dataset")
    }

    /// Sampling period of the first demonstration.
    pub fn dt(&self) -> f64 {
        self.demos[0].dt
    }

    /// Every window that fits inside its demonstration, in demonstration order.
    pub fn windows(&self, horizon: usize) -> Vec<Window> {
        self.demos
            .iter()
            .enumerate()
            .flat_map(|(d, demo)| {
                (0..demo.len().saturating_sub(horizon)).map(move |s| Window { demo: d, start: s })
            })
            .collect()
    }

    /// Stacked states and velocities at the given window starts.
    pub fn samples(&self, windows: &[Window]) -> (Matrix, Matrix) {
        let n = self.dim();
        let mut xs = Matrix::zeros((windows.len(), n));
        let mut vs = Matrix::zeros((windows.len(), n));
        for (row, w) in windows.iter().enumerate() {
            xs.row_mut(row).assign(&self.demos[w.demo].states.row(w.start));
            vs.row_mut(row).assign(&self.demos[w.demo].velocities.row(w.start));
        }
        (xs, vs)
    }
}

/// Random window-level split; `round(ratio × windows)` go to training.
pub fn split_windows(windows: &[Window], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut shuffled = windows.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * windows.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train.min(shuffled.len()));
    let mut train = shuffled;
    train.sort();
    let mut test = test;
    test.sort();
    Ok(Split { train, test })
}

pub fn split_dataset(ds: &Dataset, horizon: usize, ratio: f64, seed: u64) -> Result<Split> {
    split_windows(&ds.windows(horizon), ratio, seed)
}
