//! Policy projected onto the Lyapunov-decrease half space.
//!
//! ```text
//! π(x) = π̂(x) − ∇v(x) · σ(∇v(x)ᵀπ̂(x) + α v(x)) / (‖∇v(x)‖² + λ)
//! ```
//!
//! In unconstrained mode the raw network output is returned as is.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Bounds;
use crate::diffcore::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::lyapunov::{LpfBinding, Potential, DEFAULT_DELTA};
use crate::nets::{Activation, IcnnParams, MlpBinding, MlpParams, DEFAULT_ICNN_SIZES, DEFAULT_POLICY_SIZES};

pub const DEFAULT_REGULARIZER: f64 = 0.0;
/// Decrease margin: the projected field satisfies `∇vᵀπ ≤ −αv`.
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionActivation {
    Relu,
    Softplus,
}

impl ProjectionActivation {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionActivation::Relu => "relu",
            ProjectionActivation::Softplus => "softplus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Stable,
    Unconstrained,
}

impl PolicyMode {
    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::Stable => "stable",
            PolicyMode::Unconstrained => "unconstrained",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StablePolicyModel {
    pub policy: MlpParams,
    pub lpf: Potential,
    pub projection: ProjectionActivation,
    /// Denominator regularizer λ.
    pub regularizer: f64,
    pub mode: PolicyMode,
    /// Optional exponential-decrease margin inside σ; 0 disables it.
    pub alpha: f64,
    /// Box around the training states, recorded for evaluation defaults.
    pub bounds: Option<Bounds>,
}

/// Nodes of one policy evaluation on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PolicyNodes {
    pub raw: NodeId,
    /// Present in stable mode only.
    pub gradient: Option<NodeId>,
    pub action: NodeId,
}

/// Tape-side view of a model; parameter ids follow [`StablePolicyModel::parameters`].
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub policy: MlpBinding,
    pub lpf: LpfBinding,
    projection: ProjectionActivation,
    regularizer: f64,
    mode: PolicyMode,
    alpha: f64,
    target: Vec<f64>,
}

impl StablePolicyModel {
    pub fn new(
        policy: MlpParams,
        lpf: Potential,
        projection: ProjectionActivation,
        regularizer: f64,
        mode: PolicyMode,
    ) -> Result<Self> {
        let model = Self { policy, lpf, projection, regularizer, mode, alpha: 0.0, bounds: None };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.regularizer >= 0.0) {
            return Err(Error::Config(format!("regularizer must be >= 0, got {}", self.regularizer)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        let n = self.lpf.dim();
        Error::check_dim(n, self.policy.input_dim())?;
        Error::check_dim(n, self.policy.output_dim())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lpf.dim()
    }

    pub fn target(&self) -> &[f64] {
        &self.lpf.target
    }

    /// Every trainable matrix: policy weights and biases, then the convex network.
    pub fn parameters(&self) -> Vec<&Matrix> {
        self.policy.parameters().chain(self.lpf.icnn.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.policy
            .parameters_mut()
            .chain(self.lpf.icnn.parameters_mut())
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        ModelBinding {
            policy: self.policy.bind(tape),
            lpf: self.lpf.bind(tape),
            projection: self.projection,
            regularizer: self.regularizer,
            mode: self.mode,
            alpha: self.alpha,
            target: self.lpf.target.clone(),
        }
    }

    /// Actions for a `B x n` batch of states.
    pub fn actions(&self, xs: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.dim(), xs.ncols())?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let x = tape.constant(xs.clone());
        let nodes = binding.evaluate(&mut tape, x)?;
        check_finite(&tape, nodes.raw, "policy network")?;
        if let Some(g) = nodes.gradient {
            check_finite(&tape, g, "lyapunov gradient")?;
        }
        check_finite(&tape, nodes.action, "projection")?;
        Ok(tape.value(nodes.action)?.clone())
    }

    pub fn action(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), x.len())?;
        Ok(self.actions(&row(x))?.into_iter().collect())
    }

    /// `∇v(x)ᵀπ(x)` for every row of a batch.
    pub fn lyapunov_decrease_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), xs.ncols())?;
        let actions = self.actions(xs)?;
        let grads = self.lpf.gradient_batch(xs)?;
        Ok((&grads * &actions).rows().into_iter().map(|r| r.sum()).collect())
    }

    pub fn lyapunov_decrease(&self, x: &[f64]) -> Result<f64> {
        Error::check_dim(self.dim(), x.len())?;
        Ok(self.lyapunov_decrease_batch(&row(x))?[0])
    }
}

/// Architecture and projection settings used to build a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub policy_sizes: Vec<usize>,
    pub icnn_sizes: Vec<usize>,
    pub policy_activation: Activation,
    pub icnn_hidden_activation: Activation,
    pub projection: ProjectionActivation,
    pub delta: f64,
    pub regularizer: f64,
    pub mode: PolicyMode,
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            policy_sizes: DEFAULT_POLICY_SIZES.to_vec(),
            icnn_sizes: DEFAULT_ICNN_SIZES.to_vec(),
            policy_activation: Activation::LeakyRelu,
            icnn_hidden_activation: Activation::Softplus,
            projection: ProjectionActivation::Relu,
            delta: DEFAULT_DELTA,
            regularizer: DEFAULT_REGULARIZER,
            mode: PolicyMode::Stable,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl ModelConfig {
    /// Replaces the input/output widths with `n`.
    pub fn with_dim(mut self, n: usize) -> Self {
        if let Some(first) = self.policy_sizes.first_mut() {
            *first = n;
        }
        if let Some(last) = self.policy_sizes.last_mut() {
            *last = n;
        }
        if let Some(first) = self.icnn_sizes.first_mut() {
            *first = n;
        }
        self
    }

    /// Fresh model with weights drawn from `seed`.
    pub fn build(&self, target: &[f64], seed: u64) -> Result<StablePolicyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = MlpParams::init(&self.policy_sizes, self.policy_activation, &mut rng)?;
        let mut icnn = IcnnParams::init(&self.icnn_sizes, &mut rng)?;
        icnn.hidden_activation = self.icnn_hidden_activation;
        let lpf = Potential::new(icnn, target.to_vec(), self.delta)?;
        let mut model = StablePolicyModel::new(policy, lpf, self.projection, self.regularizer, self.mode)?;
        model.alpha = self.alpha;
        model.validate()?;
        Ok(model)
    }
}

fn row(x: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

fn check_finite(tape: &Tape, id: NodeId, stage: &'static str) -> Result<()> {
    if tape.value(id)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

impl ModelBinding {
    pub fn parameter_ids(&self) -> Vec<NodeId> {
        self.policy
            .parameter_ids()
            .chain(self.lpf.icnn.parameter_ids())
            .collect()
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    /// Policy evaluation on a `B x n` batch node.
    pub fn evaluate(&self, tape: &mut Tape, x: NodeId) -> Result<PolicyNodes> {
        let raw = self.policy.forward(tape, x)?;
        if self.mode == PolicyMode::Unconstrained {
            return Ok(PolicyNodes { raw, gradient: None, action: raw });
        }
        let (projected, gradient) = self.project(tape, x, raw)?;
        Ok(PolicyNodes { raw, gradient: Some(gradient), action: projected })
    }

    pub fn action(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        Ok(self.evaluate(tape, x)?.action)
    }

    fn project(&self, tape: &mut Tape, x: NodeId, raw: NodeId) -> Result<(NodeId, NodeId)> {
        let lpf = self.lpf.gradient_nodes(tape, x)?;
        let grad = lpf.gradient;

        // rows on the target, or with a vanishing denominator, get the zero action
        let gv = tape.value(grad)?;
        let at_target: Vec<f64> = tape
            .value(x)?
            .rows()
            .into_iter()
            .zip(gv.rows())
            .map(|(r, g)| {
                let flat = g.iter().map(|v| v * v).sum::<f64>() + self.regularizer == 0.0;
                if flat || r.iter().eq(self.target.iter()) { 1.0 } else { 0.0 }
            })
            .collect();
        let any_at_target = at_target.iter().any(|&m| m == 1.0);

        let prod = tape.mul(grad, raw)?;
        let mut inner = tape.row_sum(prod)?;
        if self.alpha > 0.0 {
            let v = self.lpf.value(tape, x, &lpf)?;
            let margin = tape.scale(v, self.alpha)?;
            inner = tape.add(inner, margin)?;
        }
        let gate = match self.projection {
            ProjectionActivation::Relu => tape.relu(inner)?,
            ProjectionActivation::Softplus => tape.softplus(inner)?,
        };
        let gsq = tape.mul(grad, grad)?;
        let norm_sq = tape.row_sum(gsq)?;
        let mut denom = tape.add_scalar(norm_sq, self.regularizer)?;
        if any_at_target {
            let guard = tape.constant(column(&at_target));
            denom = tape.add(denom, guard)?;
        }
        let coef = tape.div(gate, denom)?;
        let correction = tape.mul(grad, coef)?;
        let mut action = tape.sub(raw, correction)?;
        if any_at_target {
            let keep = tape.constant(column(&at_target.iter().map(|m| 1.0 - m).collect::<Vec<_>>()));
            action = tape.mul(action, keep)?;
        }
        Ok((action, grad))
    }
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}
