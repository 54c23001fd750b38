//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly (define-by-run). Values are
//! computed when a node is pushed, so the tape is always in topological order.
//! [`Tape::backward`] replays it in reverse and returns the gradient of a
//! scalar root with respect to every parameter leaf.
//!
//! Binary elementwise operations broadcast along any axis of length one, which
//! covers matrix/row-vector/column-vector/scalar combinations and nothing more.
//!
//! [`Tape::input_gradient`] builds the gradient of a scalar node with respect to
//! an input node *as new nodes on the same tape*, so a later `backward` can
//! differentiate through it. That is what lets parameter gradients flow through
//! `∇v(x)` inside the projected policy.

mod symbolic;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

pub type Matrix = Array2<f64>;

/// Default negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape conflict in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("root must be 1x1 to differentiate, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("node {0} is not on this tape")]
    UnknownNode(NodeId),
    #[error("{0} has no registered input-derivative rule")]
    NoInputDerivative(&'static str),
    #[error("row range {start}..{end} out of bounds for {rows} rows")]
    RowRange { start: usize, end: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Primitive operations. Operand ids always refer to earlier nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Trainable leaf.
    Param,
    /// Non-trainable leaf (inputs, targets, constants).
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// Sum of all entries, 1x1.
    Sum(NodeId),
    /// Mean of all entries, 1x1.
    Mean(NodeId),
    /// Sum along each row, r x 1.
    RowSum(NodeId),
    BroadcastTo(NodeId, (usize, usize)),
    /// Sum over the axes where the target shape has length one.
    ReduceTo(NodeId, (usize, usize)),
    SliceRows(NodeId, usize, usize),
    /// Zero-pads a block of rows into a taller matrix: (operand, total rows, start row).
    PadRows(NodeId, usize, usize),
    Square(NodeId),
    Sqrt(NodeId),
    Dot(NodeId, NodeId),
    NormSq(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    Sigmoid(NodeId),
    /// Derivative of relu: 1 where the operand is positive, 0 elsewhere.
    Step(NodeId),
    /// Derivative of leaky relu.
    LeakyStep(NodeId, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::ReduceTo(..) => "reduce_to",
            Op::SliceRows(..) => "slice_rows",
            Op::PadRows(..) => "pad_rows",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Dot(..) => "dot",
            Op::NormSq(..) => "norm_sq",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Step(..) => "step",
            Op::LeakyStep(..) => "leaky_step",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::BroadcastTo(a, _)
            | Op::ReduceTo(a, _)
            | Op::SliceRows(a, _, _)
            | Op::PadRows(a, _, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::NormSq(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Step(a)
            | Op::LeakyStep(a, _) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub value: Matrix,
    pub op: Op,
}

/// Gradients of a scalar root keyed by parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    /// Removes and returns the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(a: f64) -> f64 {
    // ln(1 + e^a) without overflow for large a
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Scalar softplus, shared with code that evaluates outside a tape.
pub fn softplus_scalar(a: f64) -> f64 {
    softplus(a)
}

pub fn sigmoid_scalar(a: f64) -> f64 {
    sigmoid(a)
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(AutodiffError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

fn broadcast_value(m: &Matrix, target: (usize, usize)) -> Matrix {
    if m.dim() == target {
        m.clone()
    } else {
        m.broadcast(target)
            .expect("broadcast shape validated at construction")
            .to_owned()
    }
}

fn reduce_value(m: &Matrix, target: (usize, usize)) -> Matrix {
    let mut out = m.clone();
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_elem((1, 1), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id))
    }

    pub fn value(&self, id: NodeId) -> Result<&Matrix> {
        Ok(&self.node(id)?.value)
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.dim() != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(v.dim()));
        }
        Ok(v[[0, 0]])
    }

    pub fn shape(&self, id: NodeId) -> Result<(usize, usize)> {
        Ok(self.value(id)?.dim())
    }

    /// Identifiers of every trainable leaf, in insertion order.
    pub fn leaf_set(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Param)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Param)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(scalar(v))
    }

    /// 1 x n row vector.
    pub fn constant_row(&mut self, v: &[f64]) -> NodeId {
        self.constant(Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape"))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a)?.t().to_owned();
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let target = broadcast_shape(name, va.dim(), vb.dim())?;
        let mut out = broadcast_value(va, target);
        let rhs = vb.broadcast(target).expect("validated");
        Zip::from(&mut out).and(&rhs).for_each(|o, &r| *o = f(*o, r));
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out = self.value(a)?.mapv(f);
        Ok(self.push(out, op))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = scalar(self.value(a)?.sum());
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a)?;
        let out = scalar(v.sum() / v.len() as f64);
        Ok(self.push(out, Op::Mean(a)))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a)?.sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(out, Op::RowSum(a)))
    }

    pub fn broadcast_to(&mut self, a: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let v = self.value(a)?;
        let ok = broadcast_shape("broadcast_to", target, v.dim())? == target;
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: v.dim(),
                rhs: target,
            });
        }
        if v.dim() == target {
            return Ok(a);
        }
        let out = broadcast_value(v, target);
        Ok(self.push(out, Op::BroadcastTo(a, target)))
    }

    pub fn reduce_to(&mut self, a: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let v = self.value(a)?;
        if v.dim() == target {
            return Ok(a);
        }
        if broadcast_shape("reduce_to", v.dim(), target)? != v.dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reduce_to",
                lhs: v.dim(),
                rhs: target,
            });
        }
        let out = reduce_value(v, target);
        Ok(self.push(out, Op::ReduceTo(a, target)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a)?;
        if start > end || end > v.nrows() {
            return Err(AutodiffError::RowRange { start, end, rows: v.nrows() });
        }
        let out = v.slice(s![start..end, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start, end)))
    }

    pub fn pad_rows(&mut self, a: NodeId, total: usize, start: usize) -> Result<NodeId> {
        let v = self.value(a)?;
        let end = start + v.nrows();
        if end > total {
            return Err(AutodiffError::RowRange { start, end, rows: total });
        }
        let mut out = Matrix::zeros((total, v.ncols()));
        out.slice_mut(s![start..end, ..]).assign(v);
        Ok(self.push(out, Op::PadRows(a, total, start)))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Frobenius inner product of two equally shaped nodes, 1x1.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.dim() != vb.dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        let out = scalar(Zip::from(va).and(vb).fold(0.0, |acc, &x, &y| acc + x * y));
        Ok(self.push(out, Op::Dot(a, b)))
    }

    /// Squared L2 (Frobenius) norm, 1x1.
    pub fn norm_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let out = scalar(self.value(a)?.iter().map(|x| x * x).sum());
        Ok(self.push(out, Op::NormSq(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Same primitive as [`Tape::relu`].
    pub fn clamp_min_zero(&mut self, a: NodeId) -> Result<NodeId> {
        self.relu(a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| if x > 0.0 { 1.0 } else { 0.0 }, Op::Step(a))
    }

    pub fn leaky_step(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(a, |x| if x > 0.0 { 1.0 } else { slope }, Op::LeakyStep(a, slope))
    }

    /// Gradient of the scalar `root` with respect to every parameter leaf that
    /// precedes it. Leaves the root does not depend on get a zero gradient.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_shape = self.shape(root)?;
        if root_shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        let mut adjoints: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adjoints[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param | Op::Constant) {
                adjoints[idx] = Some(g);
                continue;
            }
            for (parent, contrib) in self.local_vjp(node, &g) {
                match &mut adjoints[parent.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes[..=root.0].iter().enumerate() {
            if node.op == Op::Param {
                let g = adjoints[idx]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(node.value.dim()));
                grads.insert(NodeId(idx), g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Numeric vector-Jacobian products of one node's op.
    fn local_vjp(&self, node: &Node, g: &Matrix) -> Vec<(NodeId, Matrix)> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match node.op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) => vec![(a, g.dot(&val(b).t())), (b, val(a).t().dot(g))],
            Op::Transpose(a) => vec![(a, g.t().to_owned())],
            Op::Add(a, b) => vec![
                (a, reduce_value(g, val(a).dim())),
                (b, reduce_value(g, val(b).dim())),
            ],
            Op::Sub(a, b) => vec![
                (a, reduce_value(g, val(a).dim())),
                (b, -reduce_value(g, val(b).dim())),
            ],
            Op::Mul(a, b) => {
                let ga = g * &val(b).broadcast(g.dim()).expect("validated");
                let gb = g * &val(a).broadcast(g.dim()).expect("validated");
                vec![(a, reduce_value(&ga, val(a).dim())), (b, reduce_value(&gb, val(b).dim()))]
            }
            Op::Div(a, b) => {
                let vb = val(b).broadcast(g.dim()).expect("validated");
                let ga = g / &vb;
                let gb = -(&ga * &node.value) ;
                vec![(a, reduce_value(&ga, val(a).dim())), (b, reduce_value(&gb, val(b).dim()))]
            }
            Op::Neg(a) => vec![(a, -g)],
            Op::Scale(a, c) => vec![(a, g * c)],
            Op::AddScalar(a, _) => vec![(a, g.clone())],
            Op::Sum(a) => vec![(a, Matrix::from_elem(val(a).dim(), g[[0, 0]]))],
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                vec![(a, Matrix::from_elem(val(a).dim(), g[[0, 0]] / n))]
            }
            Op::RowSum(a) => vec![(a, broadcast_value(g, val(a).dim()))],
            Op::BroadcastTo(a, _) => vec![(a, reduce_value(g, val(a).dim()))],
            Op::ReduceTo(a, _) => vec![(a, broadcast_value(g, val(a).dim()))],
            Op::SliceRows(a, start, end) => {
                let mut ga = Matrix::zeros(val(a).dim());
                ga.slice_mut(s![start..end, ..]).assign(g);
                vec![(a, ga)]
            }
            Op::PadRows(a, _, start) => {
                let rows = val(a).nrows();
                vec![(a, g.slice(s![start..start + rows, ..]).to_owned())]
            }
            Op::Square(a) => vec![(a, g * &val(a).mapv(|x| 2.0 * x))],
            Op::Sqrt(a) => vec![(a, g * &node.value.mapv(|r| 0.5 / r))],
            Op::Dot(a, b) => vec![(a, val(b) * g[[0, 0]]), (b, val(a) * g[[0, 0]])],
            Op::NormSq(a) => vec![(a, val(a) * (2.0 * g[[0, 0]]))],
            Op::Relu(a) => vec![(a, g * &val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))],
            Op::LeakyRelu(a, slope) => {
                vec![(a, g * &val(a).mapv(|x| if x > 0.0 { 1.0 } else { slope }))]
            }
            Op::Softplus(a) => vec![(a, g * &val(a).mapv(sigmoid))],
            Op::Sigmoid(a) => vec![(a, g * &node.value.mapv(|s| s * (1.0 - s)))],
            // piecewise constant: zero almost everywhere
            Op::Step(a) | Op::LeakyStep(a, _) => vec![(a, Matrix::zeros(val(a).dim()))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.constant(array![[-1.0, 2.0]]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).unwrap(), &array![[0.0, 2.0]]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant_scalar(0.0);
        let y = t.softplus(x).unwrap();
        assert!((t.scalar_value(y).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((t.scalar_value(y).unwrap() - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(10.0) - 10.000_045_398_899_218).abs() < 1e-12);
    }

    #[test]
    fn dot_of_unit_and_vector() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 0.0]]);
        let b = t.constant(array![[2.0, 3.0]]);
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.scalar_value(d).unwrap(), 2.0);
    }

    #[test]
    fn shape_conflicts_are_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros((2, 3)));
        let b = t.constant(Matrix::zeros((2, 2)));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        assert!(matches!(t.add(a, b), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
        assert!(matches!(t.dot(a, b), Err(AutodiffError::ShapeMismatch { op: "dot", .. })));
        let row = t.constant(Matrix::zeros((1, 3)));
        let col = t.constant(Matrix::zeros((2, 1)));
        let r = t.add(a, row).unwrap();
        let c = t.add(a, col).unwrap();
        assert_eq!(t.shape(r).unwrap(), (2, 3));
        assert_eq!(t.shape(c).unwrap(), (2, 3));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut t = Tape::new();
        let w = t.param(array![[3.0]]);
        let sq = t.square(w).unwrap();
        let root = t.sum(sq).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(w).unwrap(), &array![[6.0]]);
    }

    #[test]
    fn gradient_of_bilinear_form() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        let b = t.param(array![[5.0, 7.0]]);
        let root = t.dot(a, b).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(a).unwrap(), &array![[5.0, 7.0]]);
        assert_eq!(g.get(b).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn backward_rejects_non_scalar_root_and_foreign_nodes() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        assert_eq!(t.backward(a).unwrap_err(), AutodiffError::NonScalarRoot((1, 2)));
        assert_eq!(
            t.backward(NodeId(99)).unwrap_err(),
            AutodiffError::UnknownNode(NodeId(99))
        );
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        let b = t.param(array![[4.0]]);
        let root = t.sum(a).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(b).unwrap(), &array![[0.0]]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.param(array![[0.0]]);
        let r = t.relu(a).unwrap();
        let root = t.sum(r).unwrap();
        assert_eq!(t.backward(root).unwrap().get(a).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn broadcast_gradients_reduce_back() {
        let mut t = Tape::new();
        let m = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let row = t.param(array![[10.0, 20.0]]);
        let col = t.param(array![[2.0], [3.0]]);
        let s = t.add(m, row).unwrap();
        let p = t.mul(s, col).unwrap();
        let root = t.sum(p).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(row).unwrap(), &array![[5.0, 5.0]]);
        assert_eq!(g.get(col).unwrap(), &array![[33.0], [37.0]]);
        assert_eq!(g.get(m).unwrap(), &array![[2.0, 2.0], [3.0, 3.0]]);
    }

    #[test]
    fn slicing_and_padding_are_adjoint() {
        let mut t = Tape::new();
        let m = t.param(array![[1.0], [2.0], [3.0]]);
        let mid = t.slice_rows(m, 1, 3).unwrap();
        let padded = t.pad_rows(mid, 4, 2).unwrap();
        assert_eq!(t.value(padded).unwrap(), &array![[0.0], [0.0], [2.0], [3.0]]);
        let w = t.constant(array![[1.0], [1.0], [5.0], [7.0]]);
        let d = t.dot(padded, w).unwrap();
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(m).unwrap(), &array![[0.0], [5.0], [7.0]]);
        assert!(t.slice_rows(m, 2, 5).is_err());
    }
}
