//! Lyapunov potential built on the input-convex network.
//!
//! ```text
//! v(x) = v̂(x) − v̂(x*) − ∇v̂(x*)ᵀ(x − x*) + δ‖x − x*‖²
//! ```
//!
//! The linear correction makes `x*` a stationary point of the convex part, so
//! `v(x) ≥ δ‖x − x*‖²` holds for any network weights, with equality only at
//! the target. Both `v` and `∇v` are available as tape expressions that stay
//! differentiable in the network parameters.

use crate::diffcore::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nets::{IcnnBinding, IcnnParams};

pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub icnn: IcnnParams,
    pub target: Vec<f64>,
    pub delta: f64,
}

/// Tape-side view of a [`Potential`].
#[derive(Debug, Clone)]
pub struct LpfBinding {
    pub icnn: IcnnBinding,
    pub target: NodeId,
    pub delta: f64,
}

/// Nodes produced when the potential is evaluated on a batch.
#[derive(Debug, Clone, Copy)]
pub struct LpfNodes {
    /// `B x n` offsets `x − x*`.
    pub offset: NodeId,
    /// `B x n` gradients `∇v(x)`.
    pub gradient: NodeId,
    /// `1 x n` convex-network gradient at the target.
    pub target_gradient: NodeId,
}

impl Potential {
    pub fn new(icnn: IcnnParams, target: Vec<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("delta must be positive, got {delta}")));
        }
        Error::check_dim(icnn.input_dim(), target.len())?;
        Ok(Self { icnn, target, delta })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> LpfBinding {
        LpfBinding {
            icnn: self.icnn.bind(tape),
            target: tape.constant_row(&self.target),
            delta: self.delta,
        }
    }

    pub fn value_batch(&self, xs: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.dim(), xs.ncols())?;
        let mut tape = Tape::new();
        let lpf = self.bind(&mut tape);
        let x = tape.constant(xs.clone());
        let nodes = lpf.gradient_nodes(&mut tape, x)?;
        let v = lpf.value(&mut tape, x, &nodes)?;
        Ok(tape.value(v)?.clone())
    }

    pub fn gradient_batch(&self, xs: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.dim(), xs.ncols())?;
        let mut tape = Tape::new();
        let lpf = self.bind(&mut tape);
        let x = tape.constant(xs.clone());
        let nodes = lpf.gradient_nodes(&mut tape, x)?;
        Ok(tape.value(nodes.gradient)?.clone())
    }

    /// `v(x)` for one state.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Error::check_dim(self.dim(), x.len())?;
        Ok(self.value_batch(&row(x))?[[0, 0]])
    }

    /// `∇v(x)` for one state.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), x.len())?;
        Ok(self.gradient_batch(&row(x))?.into_iter().collect())
    }
}

fn row(x: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

impl LpfBinding {
    /// Convex-network gradient `∇v̂` at each row of `x`, as tape nodes.
    pub fn icnn_gradient(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let out = self.icnn.forward(tape, x)?;
        let total = tape.sum(out)?;
        Ok(tape.input_gradient(total, x)?)
    }

    /// `∇v(x) = ∇v̂(x) − ∇v̂(x*) + 2δ(x − x*)` for a `B x n` batch.
    pub fn gradient_nodes(&self, tape: &mut Tape, x: NodeId) -> Result<LpfNodes> {
        let grad_x = self.icnn_gradient(tape, x)?;
        let target_gradient = self.icnn_gradient(tape, self.target)?;
        let offset = tape.sub(x, self.target)?;
        let quad = tape.scale(offset, 2.0 * self.delta)?;
        let centered = tape.sub(grad_x, target_gradient)?;
        let gradient = tape.add(centered, quad)?;
        Ok(LpfNodes { offset, gradient, target_gradient })
    }

    /// `B x 1` column of `v(x)`.
    pub fn value(&self, tape: &mut Tape, x: NodeId, nodes: &LpfNodes) -> Result<NodeId> {
        let vx = self.icnn.forward(tape, x)?;
        let vt = self.icnn.forward(tape, self.target)?;
        let rise = tape.sub(vx, vt)?;
        let gt = tape.transpose(nodes.target_gradient)?;
        let linear = tape.matmul(nodes.offset, gt)?;
        let bregman = tape.sub(rise, linear)?;
        let sq = tape.square(nodes.offset)?;
        let dist = tape.row_sum(sq)?;
        let quad = tape.scale(dist, self.delta)?;
        Ok(tape.add(bregman, quad)?)
    }
}
