use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

use super::{Dataset, Demonstration, DEFAULT_DT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticShape {
    Line,
    Sine,
    Spiral,
}

impl FromStr for SyntheticShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Self::Line),
            "sine" => Ok(Self::Sine),
            "spiral" => Ok(Self::Spiral),
            other => Err(Error::Config(format!("unknown shape {other:?} (line, sine, spiral)"))),
        }
    }
}

impl SyntheticShape {
    /// Point on the curve at `u ∈ [0, 1]`; `u = 0` is the origin.
    fn point(self, u: f64) -> [f64; 2] {
        use std::f64::consts::PI;
        match self {
            SyntheticShape::Line => [-u, 0.6 * u],
            SyntheticShape::Sine => [-u, 0.35 * (2.0 * PI * u).sin()],
            SyntheticShape::Spiral => {
                let theta = 3.0 * PI * u;
                [u * theta.cos(), u * theta.sin()]
            }
        }
    }

    /// Curve parameter at normalized time `tau ∈ [0, 1]`. The line moves at
    /// constant speed; the curved shapes decelerate smoothly into the origin.
    fn parameter(self, tau: f64) -> f64 {
        match self {
            SyntheticShape::Line => 1.0 - tau,
            SyntheticShape::Sine | SyntheticShape::Spiral => (1.0 - tau) * (1.0 - tau),
        }
    }
}

pub fn generate_synthetic(
    shape: SyntheticShape,
    n_demos: usize,
    n_samples: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic_with_dt(shape, n_demos, n_samples, noise, seed, DEFAULT_DT)
}

/// Planar demonstrations ending at the origin.
///
/// Demonstration 0 is the nominal curve; later ones are randomly rotated and
/// scaled copies. Gaussian noise perturbs every state except the endpoint, and
/// velocities are forward differences of the final states, so every sample
/// satisfies `x[s+1] = x[s] + dt·ẋ[s]` and the last velocity is zero.
pub fn generate_synthetic_with_dt(
    shape: SyntheticShape,
    n_demos: usize,
    n_samples: usize,
    noise: f64,
    seed: u64,
    dt: f64,
) -> Result<Dataset> {
    if n_samples < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {n_samples}")));
    }
    if n_demos == 0 {
        return Err(Error::Config("need at least one demonstration".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config(format!("noise scale must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut demos = Vec::with_capacity(n_demos);
    for d in 0..n_demos {
        let (angle, scale) = if d == 0 {
            (0.0, 1.0)
        } else {
            (rng.random_range(-0.25..0.25), rng.random_range(0.85..1.15))
        };
        let (sin, cos) = f64::sin_cos(angle);
        let mut states = Matrix::zeros((n_samples, 2));
        for s in 0..n_samples {
            let tau = s as f64 / (n_samples - 1) as f64;
            let [px, py] = shape.point(shape.parameter(tau));
            let (mut x, mut y) = (scale * (cos * px - sin * py), scale * (sin * px + cos * py));
            if noise > 0.0 && s + 1 < n_samples {
                x += jitter.sample(&mut rng);
                y += jitter.sample(&mut rng);
            }
            states[[s, 0]] = x;
            states[[s, 1]] = y;
        }
        states.row_mut(n_samples - 1).fill(0.0);
        let mut velocities = Matrix::zeros((n_samples, 2));
        for s in 0..n_samples - 1 {
            for k in 0..2 {
                velocities[[s, k]] = (states[[s + 1, k]] - states[[s, k]]) / dt;
            }
        }
        demos.push(Demonstration::new(states, velocities, dt)?);
    }
    Dataset::new(demos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_to_origin() {
        let ds = generate_synthetic(SyntheticShape::Line, 1, 11, 0.0, 0).unwrap();
        let demo = &ds.demos[0];
        assert_eq!(ds.target, vec![0.0, 0.0]);
        for s in 0..11 {
            let (x, y) = (demo.states[[s, 0]], demo.states[[s, 1]]);
            assert!((y + 0.6 * x).abs() < 1e-12, "off the segment at {s}");
        }
        let v0 = demo.velocities.row(0).to_vec();
        for s in 0..10 {
            let v = demo.velocities.row(s);
            assert!((v[0] - v0[0]).abs() < 1e-9 && (v[1] - v0[1]).abs() < 1e-9);
        }
        assert_eq!(demo.velocities.row(10).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn sine_velocities_match_finite_differences() {
        let ds = generate_synthetic(SyntheticShape::Sine, 1, 200, 0.0, 0).unwrap();
        let demo = &ds.demos[0];
        for s in 1..199 {
            for k in 0..2 {
                let fd = (demo.states[[s + 1, k]] - demo.states[[s, k]]) / demo.dt;
                assert!((fd - demo.velocities[[s, k]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn euler_consistent_even_with_noise() {
        let ds = generate_synthetic(SyntheticShape::Spiral, 3, 80, 0.02, 5).unwrap();
        for demo in &ds.demos {
            for s in 0..demo.len() - 1 {
                for k in 0..2 {
                    let next = demo.states[[s, k]] + demo.dt * demo.velocities[[s, k]];
                    assert!((next - demo.states[[s + 1, k]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic(SyntheticShape::Sine, 3, 50, 0.01, 42).unwrap();
        let b = generate_synthetic(SyntheticShape::Sine, 3, 50, 0.01, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(SyntheticShape::Sine, 3, 50, 0.01, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate_synthetic(SyntheticShape::Line, 1, 1, 0.0, 0).is_err());
        assert!(generate_synthetic(SyntheticShape::Line, 0, 10, 0.0, 0).is_err());
        assert!("circle".parse::<SyntheticShape>().is_err());
    }
}
