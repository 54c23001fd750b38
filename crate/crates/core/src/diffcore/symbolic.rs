//! Gradients recorded as tape nodes, so they can themselves be differentiated.

use super::{AutodiffError, NodeId, Op, Result, Tape};

impl Tape {
    /// Records `∇_x f` as new nodes and returns the node holding it.
    ///
    /// `f` must be 1x1. Only nodes that both depend on `x` and feed `f` are
    /// differentiated; everything else is treated as constant. The result has
    /// the shape of `x`, and because it is built from ordinary primitives a
    /// subsequent [`Tape::backward`] propagates through it to any parameter
    /// that appears in `f`.
    ///
    /// Fails with [`AutodiffError::NoInputDerivative`] if the path from `x` to
    /// `f` crosses a primitive whose derivative cannot be expressed on the tape
    /// (the rectifier derivative steps).
    pub fn input_gradient(&mut self, f: NodeId, x: NodeId) -> Result<NodeId> {
        let f_shape = self.shape(f)?;
        let x_shape = self.shape(x)?;
        if f_shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(f_shape));
        }
        if x.0 > f.0 {
            return Ok(self.constant(super::Matrix::zeros(x_shape)));
        }

        // forward reachability from x
        let mut depends = vec![false; f.0 + 1];
        depends[x.0] = true;
        for idx in x.0 + 1..=f.0 {
            depends[idx] = self.nodes[idx].op.parents().iter().any(|p| p.0 >= x.0 && depends[p.0]);
        }
        // backward reachability from f, restricted to x-dependent nodes
        let mut active = vec![false; f.0 + 1];
        active[f.0] = depends[f.0];
        for idx in (x.0..=f.0).rev() {
            if !active[idx] {
                continue;
            }
            for p in self.nodes[idx].op.parents() {
                if depends[p.0] {
                    active[p.0] = true;
                }
            }
        }
        if !active[x.0] {
            return Ok(self.constant(super::Matrix::zeros(x_shape)));
        }

        let mut adjoints: Vec<Option<NodeId>> = vec![None; f.0 + 1];
        adjoints[f.0] = Some(self.constant_scalar(1.0));
        for idx in (x.0 + 1..=f.0).rev() {
            if !active[idx] {
                continue;
            }
            let Some(g) = adjoints[idx] else { continue };
            let node_id = NodeId(idx);
            let op = self.nodes[idx].op.clone();
            for (parent, contrib) in self.symbolic_vjp(node_id, &op, g, &active)? {
                let merged = match adjoints[parent.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                };
                adjoints[parent.0] = Some(merged);
            }
        }
        match adjoints[x.0] {
            Some(g) => Ok(g),
            None => Ok(self.constant(super::Matrix::zeros(x_shape))),
        }
    }

    /// Vector-Jacobian products of `op` at `node`, expressed as tape nodes.
    /// Contributions are only emitted for parents in `active`.
    fn symbolic_vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        active: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let on = |p: NodeId| active[p.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                if on(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if on(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate_b = matches!(op, Op::Sub(..));
                if on(a) {
                    let sa = self.shape(a)?;
                    out.push((a, self.reduce_to(g, sa)?));
                }
                if on(b) {
                    let sb = self.shape(b)?;
                    let r = self.reduce_to(g, sb)?;
                    out.push((b, if negate_b { self.neg(r)? } else { r }));
                }
            }
            Op::Mul(a, b) => {
                if on(a) {
                    let sa = self.shape(a)?;
                    let m = self.mul(g, b)?;
                    out.push((a, self.reduce_to(m, sa)?));
                }
                if on(b) {
                    let sb = self.shape(b)?;
                    let m = self.mul(g, a)?;
                    out.push((b, self.reduce_to(m, sb)?));
                }
            }
            Op::Div(a, b) => {
                let ga = self.div(g, b)?;
                if on(a) {
                    let sa = self.shape(a)?;
                    out.push((a, self.reduce_to(ga, sa)?));
                }
                if on(b) {
                    let sb = self.shape(b)?;
                    let m = self.mul(ga, node)?;
                    let n = self.neg(m)?;
                    out.push((b, self.reduce_to(n, sb)?));
                }
            }
            Op::Neg(a) => out.push((a, self.neg(g)?)),
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a, _) => out.push((a, g)),
            Op::Sum(a) => {
                let sa = self.shape(a)?;
                out.push((a, self.broadcast_to(g, sa)?));
            }
            Op::Mean(a) => {
                let sa = self.shape(a)?;
                let b = self.broadcast_to(g, sa)?;
                out.push((a, self.scale(b, 1.0 / (sa.0 * sa.1) as f64)?));
            }
            Op::RowSum(a) | Op::ReduceTo(a, _) => {
                let sa = self.shape(a)?;
                out.push((a, self.broadcast_to(g, sa)?));
            }
            Op::BroadcastTo(a, _) => {
                let sa = self.shape(a)?;
                out.push((a, self.reduce_to(g, sa)?));
            }
            Op::SliceRows(a, start, _) => {
                let rows = self.shape(a)?.0;
                out.push((a, self.pad_rows(g, rows, start)?));
            }
            Op::PadRows(a, _, start) => {
                let rows = self.shape(a)?.0;
                out.push((a, self.slice_rows(g, start, start + rows)?));
            }
            Op::Square(a) => {
                let m = self.mul(g, a)?;
                out.push((a, self.scale(m, 2.0)?));
            }
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5)?;
                out.push((a, self.div(half, node)?));
            }
            Op::Dot(a, b) => {
                if on(a) {
                    out.push((a, self.mul(b, g)?));
                }
                if on(b) {
                    out.push((b, self.mul(a, g)?));
                }
            }
            Op::NormSq(a) => {
                let m = self.mul(a, g)?;
                out.push((a, self.scale(m, 2.0)?));
            }
            Op::Relu(a) => {
                let d = self.step(a)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::LeakyRelu(a, slope) => {
                let d = self.leaky_step(a, slope)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Softplus(a) => {
                let d = self.sigmoid(a)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Sigmoid(a) => {
                // s(1 - s)
                let neg = self.neg(node)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(node, one_minus)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Step(_) | Op::LeakyStep(..) => {
                return Err(AutodiffError::NoInputDerivative(op.name()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use ndarray::array;

    #[test]
    fn gradient_of_squared_norm() {
        let mut t = Tape::new();
        let x = t.constant(array![[3.0, 4.0]]);
        let f = t.norm_sq(x).unwrap();
        let g = t.input_gradient(f, x).unwrap();
        assert_eq!(t.value(g).unwrap(), &array![[6.0, 8.0]]);
    }

    #[test]
    fn gradient_of_linear_form_flows_to_weights() {
        let mut t = Tape::new();
        let w = t.param(array![[2.0, -1.0]]);
        let x = t.constant(array![[0.5, 0.25]]);
        let f = t.dot(w, x).unwrap();
        let g = t.input_gradient(f, x).unwrap();
        assert_eq!(t.value(g).unwrap(), &array![[2.0, -1.0]]);
        // first component of ∇f as a function of w
        let pick = t.constant(array![[1.0, 0.0]]);
        let first = t.dot(g, pick).unwrap();
        let grads = t.backward(first).unwrap();
        assert_eq!(grads.get(w).unwrap(), &array![[1.0, 0.0]]);
    }

    #[test]
    fn gradient_of_independent_root_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]);
        let y = t.constant(array![[1.0]]);
        let f = t.sum(y).unwrap();
        let g = t.input_gradient(f, x).unwrap();
        assert_eq!(t.value(g).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn second_input_gradient_through_rectifier_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, -2.0]]);
        let r = t.relu(x).unwrap();
        let f = t.sum(r).unwrap();
        let g = t.input_gradient(f, x).unwrap();
        let g_sum = t.norm_sq(g).unwrap();
        assert_eq!(
            t.input_gradient(g_sum, x).unwrap_err(),
            AutodiffError::NoInputDerivative("step")
        );
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]);
        let y = t.square(x).unwrap();
        assert!(matches!(t.input_gradient(y, x), Err(AutodiffError::NonScalarRoot(_))));
    }
}
