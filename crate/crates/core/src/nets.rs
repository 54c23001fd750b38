//! The unconstrained policy network and the input-convex network.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{softplus_scalar, Matrix, NodeId, Tape, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Default policy layer sizes for planar tasks.
pub const DEFAULT_POLICY_SIZES: [usize; 6] = [2, 256, 256, 128, 128, 2];
/// Default convex-network layer sizes for planar tasks.
pub const DEFAULT_ICNN_SIZES: [usize; 5] = [2, 128, 128, 128, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, a: NodeId) -> Result<NodeId> {
        Ok(match self {
            Activation::LeakyRelu => tape.leaky_relu(a, LEAKY_SLOPE)?,
            Activation::Relu => tape.relu(a)?,
            Activation::Softplus => tape.softplus(a)?,
        })
    }

    pub fn eval(self, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if a > 0.0 {
                    a
                } else {
                    LEAKY_SLOPE * a
                }
            }
            Activation::Relu => a.max(0.0),
            Activation::Softplus => softplus_scalar(a),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "layer sizes must list at least two positive widths, got {sizes:?}"
        )));
    }
    Ok(())
}

/// Glorot-uniform matrix with `fan_in` rows and `fan_out` columns.
fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

fn row_input(x: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// Feed-forward network with an activation on hidden layers and a linear output.
///
/// Weights are stored `fan_in x fan_out` so a batch of row-vector inputs maps
/// as `X W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub activation: Activation,
}

/// Tape nodes holding one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let weights = sizes.windows(2).map(|w| glorot(w[0], w[1], rng)).collect();
        let biases = sizes[1..].iter().map(|&n| Matrix::zeros((1, n))).collect();
        Ok(Self { sizes: sizes.to_vec(), weights, biases, activation })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        let weights = sizes.windows(2).map(|w| Matrix::zeros((w[0], w[1]))).collect();
        let biases = sizes[1..].iter().map(|&n| Matrix::zeros((1, n))).collect();
        Ok(Self { sizes: sizes.to_vec(), weights, biases, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpBinding {
        MlpBinding {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
            activation: self.activation,
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    pub fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.input_dim(), xs.ncols())?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let x = tape.constant(xs.clone());
        let out = binding.forward(&mut tape, x)?;
        Ok(tape.value(out)?.clone())
    }

    /// Network output for a single state.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.input_dim(), x.len())?;
        Ok(self.forward_batch(&row_input(x))?.into_iter().collect())
    }
}

impl MlpBinding {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add(lin, b)?;
            if l < last {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn parameter_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b])
    }
}

/// Input-convex network `z_{l+1} = σ_l(x U_l + z_l W_l + b_l)`.
///
/// `recursion_raw[l - 1]` parameterizes `W_l` through softplus so the effective
/// recursion weights stay strictly positive under unconstrained updates. The
/// input-skip weights `U_l` are free. With convex non-decreasing activations
/// the output is convex in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnParams {
    pub sizes: Vec<usize>,
    pub input_weights: Vec<Matrix>,
    pub recursion_raw: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

#[derive(Debug, Clone)]
pub struct IcnnBinding {
    pub input_weights: Vec<NodeId>,
    pub recursion_raw: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl IcnnParams {
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check(sizes)?;
        let n = sizes[0];
        let input_weights = sizes[1..].iter().map(|&m| glorot(n, m, rng)).collect();
        // shifted so softplus(raw) starts near 1/fan_in and hidden scales stay O(1)
        let recursion_raw = sizes[1..]
            .windows(2)
            .map(|w| glorot(w[0], w[1], rng) - (w[0] as f64).ln())
            .collect();
        let biases = sizes[1..].iter().map(|&m| Matrix::zeros((1, m))).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            input_weights,
            recursion_raw,
            biases,
            hidden_activation: Activation::LeakyRelu,
            output_activation: Activation::Softplus,
        })
    }

    /// All-zero input weights and biases; raw recursion weights are zero too,
    /// so the effective recursion weights are `ln 2`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check(sizes)?;
        let n = sizes[0];
        Ok(Self {
            sizes: sizes.to_vec(),
            input_weights: sizes[1..].iter().map(|&m| Matrix::zeros((n, m))).collect(),
            recursion_raw: sizes[1..].windows(2).map(|w| Matrix::zeros((w[0], w[1]))).collect(),
            biases: sizes[1..].iter().map(|&m| Matrix::zeros((1, m))).collect(),
            hidden_activation: Activation::LeakyRelu,
            output_activation: Activation::Softplus,
        })
    }

    fn check(sizes: &[usize]) -> Result<()> {
        check_sizes(sizes)?;
        if *sizes.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "convex network must end in a single output, got {sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Effective nonnegative recursion weights, one matrix per layer after the first.
    pub fn effective_weights(&self) -> Vec<Matrix> {
        self.recursion_raw.iter().map(|w| w.mapv(softplus_scalar)).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> IcnnBinding {
        IcnnBinding {
            input_weights: self.input_weights.iter().map(|u| tape.param(u.clone())).collect(),
            recursion_raw: self.recursion_raw.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Matrix> {
        self.input_weights.iter().chain(&self.recursion_raw).chain(&self.biases)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.input_weights
            .iter_mut()
            .chain(self.recursion_raw.iter_mut())
            .chain(self.biases.iter_mut())
    }

    pub fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.input_dim(), xs.ncols())?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let x = tape.constant(xs.clone());
        let out = binding.forward(&mut tape, x)?;
        Ok(tape.value(out)?.clone())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Error::check_dim(self.input_dim(), x.len())?;
        Ok(self.forward_batch(&row_input(x))?[[0, 0]])
    }
}

impl IcnnBinding {
    /// Batch of row inputs `B x n` to a `B x 1` column of outputs.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let layers = self.input_weights.len();
        let mut z: Option<NodeId> = None;
        for l in 0..layers {
            let skip = tape.matmul(x, self.input_weights[l])?;
            let mut pre = tape.add(skip, self.biases[l])?;
            if let Some(prev) = z {
                let w = tape.softplus(self.recursion_raw[l - 1])?;
                let rec = tape.matmul(prev, w)?;
                pre = tape.add(pre, rec)?;
            }
            let act = if l + 1 == layers { self.output_activation } else { self.hidden_activation };
            z = Some(act.apply(tape, pre)?);
        }
        Ok(z.expect("at least one layer"))
    }

    pub fn parameter_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.input_weights
            .iter()
            .chain(&self.recursion_raw)
            .chain(&self.biases)
            .copied()
    }
}
