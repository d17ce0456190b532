//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Operations append nodes to a linear tape during the forward pass;
//! `backward` replays the tape in reverse, accumulating adjoints via the
//! chain rule. Parents always precede children, so reverse index order is a
//! topological order. One tape per computation; independent tapes share no
//! state and may run on different threads.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node, with references to its parents.
#[derive(Debug, Clone)]
enum Op {
    /// Input node. `param` marks trainable leaves whose gradients are
    /// collected by `backward`.
    Leaf { param: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a constant mask (dropout).
    MulMask(NodeId, DenseMatrix),
    /// Row-wise log-softmax, computed with a shift by the row maximum.
    LogSoftmaxRows(NodeId),
    Exp(NodeId),
    /// Row-wise softmax over a strict causal mask: row `i` mixes columns
    /// `0..=i` only; masked entries are exactly zero.
    CausalSoftmax(NodeId),
    RowSelect(NodeId, usize),
    MeanRows(NodeId),
    Entry(NodeId, usize, usize),
    ConcatScalars(Vec<NodeId>),
    /// bias + sum_i coeffs[i] * parents[i], all parents scalar.
    AffineCombination { parents: Vec<NodeId>, coeffs: Vec<f64> },
    /// Max over a vector; the full adjoint is routed to `index` only.
    MaxElement { parent: NodeId, index: usize },
    MinElement { parent: NodeId, index: usize },
}

struct Node {
    op: Op,
    value: DenseMatrix,
    adjoint: DenseMatrix,
}

/// Gradients of a scalar root with respect to every `param` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &DenseMatrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        let adjoint = DenseMatrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { op, value, adjoint });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.node(id).value
    }

    /// Forward value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.node(id).value.as_scalar()
    }

    /// Accumulated adjoint of a node (zero before `backward`).
    pub fn adjoint(&self, id: NodeId) -> &DenseMatrix {
        &self.node(id).adjoint
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf { param: false }, value)
    }

    /// Trainable input; its gradient appears in the `backward` result.
    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf { param: true }, value)
    }

    /// 1x1 constant.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(DenseMatrix::scalar(v))
    }

    /// 1x1 trainable scalar.
    pub fn scalar_param(&mut self, v: f64) -> NodeId {
        self.param(DenseMatrix::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.node(a).value.matmul(&self.node(b).value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.node(a).value.transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if !va.same_shape(vb) {
            return Err(Error::contract(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = DenseMatrix::from_raw(va.rows(), va.cols(), data);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if !va.same_shape(vb) {
            return Err(Error::contract(format!(
                "sub shape mismatch: {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = DenseMatrix::from_raw(va.rows(), va.cols(), data);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.node(a).value;
        let data = va.data().iter().map(|x| c * x).collect();
        let value = DenseMatrix::from_raw(va.rows(), va.cols(), data);
        self.push(Op::Scale(a, c), value)
    }

    /// Elementwise product with a fixed mask of the same shape.
    pub fn mul_mask(&mut self, a: NodeId, mask: DenseMatrix) -> Result<NodeId> {
        let va = &self.node(a).value;
        if !va.same_shape(&mask) {
            return Err(Error::contract(format!(
                "mask shape mismatch: {}x{} vs {}x{}",
                va.rows(),
                va.cols(),
                mask.rows(),
                mask.cols()
            )));
        }
        let data = va.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = DenseMatrix::from_raw(va.rows(), va.cols(), data);
        Ok(self.push(Op::MulMask(a, mask), value))
    }

    /// Row-wise log-softmax. `exp` of each output row sums to one.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.node(a).value;
        if va.cols() == 0 || va.rows() == 0 {
            return Err(Error::contract("log_softmax of empty matrix"));
        }
        let mut data = Vec::with_capacity(va.len());
        for i in 0..va.rows() {
            let row = va.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            data.extend(row.iter().map(|z| z - lse));
        }
        let value = DenseMatrix::from_raw(va.rows(), va.cols(), data);
        Ok(self.push(Op::LogSoftmaxRows(a), value))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = &self.node(a).value;
        let data = va.data().iter().map(|x| x.exp()).collect();
        let value = DenseMatrix::from_raw(va.rows(), va.cols(), data);
        self.push(Op::Exp(a), value)
    }

    /// Softmax of square attention scores under a strict causal mask: output
    /// row `i` is a distribution over columns `0..=i`, zeros elsewhere.
    pub fn causal_softmax(&mut self, scores: NodeId) -> Result<NodeId> {
        let vs = &self.node(scores).value;
        if vs.rows() != vs.cols() || vs.rows() == 0 {
            return Err(Error::contract(format!(
                "causal_softmax needs a non-empty square matrix, got {}x{}",
                vs.rows(),
                vs.cols()
            )));
        }
        let n = vs.rows();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = &vs.row(i)[..=i];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, s) in row.iter().enumerate() {
                let w = (s - max).exp();
                data[i * n + j] = w;
                sum += w;
            }
            for j in 0..=i {
                data[i * n + j] /= sum;
            }
        }
        let value = DenseMatrix::from_raw(n, n, data);
        Ok(self.push(Op::CausalSoftmax(scores), value))
    }

    /// Select row `i` as a 1xC matrix.
    pub fn row_select(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let va = &self.node(a).value;
        if i >= va.rows() {
            return Err(Error::contract(format!("row {} out of range for {} rows", i, va.rows())));
        }
        let value = DenseMatrix::from_raw(1, va.cols(), va.row(i).to_vec());
        Ok(self.push(Op::RowSelect(a, i), value))
    }

    /// Column-wise mean over rows, as a 1xC matrix.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.node(a).value;
        if va.rows() == 0 {
            return Err(Error::contract("mean_rows of empty matrix"));
        }
        let n = va.rows() as f64;
        let mut out = vec![0.0; va.cols()];
        for i in 0..va.rows() {
            for (o, v) in out.iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n;
        }
        let value = DenseMatrix::from_raw(1, va.cols(), out);
        Ok(self.push(Op::MeanRows(a), value))
    }

    /// Single entry `(i, j)` as a scalar node.
    pub fn entry(&mut self, a: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let va = &self.node(a).value;
        if i >= va.rows() || j >= va.cols() {
            return Err(Error::contract(format!(
                "entry ({}, {}) out of range for {}x{}",
                i,
                j,
                va.rows(),
                va.cols()
            )));
        }
        let value = DenseMatrix::scalar(va.get(i, j));
        Ok(self.push(Op::Entry(a, i, j), value))
    }

    /// Pack scalar nodes into a 1xN row vector.
    pub fn concat_scalars(&mut self, parents: &[NodeId]) -> Result<NodeId> {
        if parents.is_empty() {
            return Err(Error::contract("concat_scalars of empty list"));
        }
        let mut data = Vec::with_capacity(parents.len());
        for &p in parents {
            data.push(self.node(p).value.as_scalar()?);
        }
        let value = DenseMatrix::from_raw(1, parents.len(), data);
        Ok(self.push(Op::ConcatScalars(parents.to_vec()), value))
    }

    /// `bias + sum_i coeffs[i] * parents[i]` over scalar nodes.
    pub fn affine_combination(
        &mut self,
        parents: &[NodeId],
        coeffs: &[f64],
        bias: f64,
    ) -> Result<NodeId> {
        if parents.len() != coeffs.len() {
            return Err(Error::contract(format!(
                "affine_combination arity mismatch: {} parents, {} coeffs",
                parents.len(),
                coeffs.len()
            )));
        }
        let mut acc = bias;
        for (&p, &c) in parents.iter().zip(coeffs) {
            acc += c * self.node(p).value.as_scalar()?;
        }
        Ok(self.push(
            Op::AffineCombination { parents: parents.to_vec(), coeffs: coeffs.to_vec() },
            DenseMatrix::scalar(acc),
        ))
    }

    fn extreme_element(&mut self, a: NodeId, want_max: bool) -> Result<(NodeId, usize)> {
        let va = &self.node(a).value;
        if va.is_empty() {
            return Err(Error::contract("max/min of empty vector"));
        }
        if va.rows() != 1 && va.cols() != 1 {
            return Err(Error::contract(format!(
                "max/min expects a vector, got {}x{}",
                va.rows(),
                va.cols()
            )));
        }
        // Strict comparison keeps the lowest index on ties.
        let mut idx = 0;
        let mut best = va.data()[0];
        for (i, &v) in va.data().iter().enumerate().skip(1) {
            if (want_max && v > best) || (!want_max && v < best) {
                best = v;
                idx = i;
            }
        }
        let op = if want_max {
            Op::MaxElement { parent: a, index: idx }
        } else {
            Op::MinElement { parent: a, index: idx }
        };
        Ok((self.push(op, DenseMatrix::scalar(best)), idx))
    }

    /// Maximum of a vector node. Backward routes the whole adjoint to the
    /// selected element; ties select the lowest index.
    pub fn max_element(&mut self, a: NodeId) -> Result<(NodeId, usize)> {
        self.extreme_element(a, true)
    }

    /// Minimum of a vector node; same subgradient convention as `max_element`.
    pub fn min_element(&mut self, a: NodeId) -> Result<(NodeId, usize)> {
        self.extreme_element(a, false)
    }

    /// Reverse pass from a scalar root. Resets all adjoints, seeds the root
    /// with 1, and accumulates `d(root)/d(leaf)` for every `param` leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.node(root).value.is_scalar() {
            let v = &self.node(root).value;
            return Err(Error::contract(format!(
                "backward root must be scalar, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.adjoint = DenseMatrix::zeros(node.value.rows(), node.value.cols());
        }
        self.nodes[root.0].adjoint.set(0, 0, 1.0);

        for i in (0..=root.0).rev() {
            let adjoint = self.nodes[i].adjoint.clone();
            // Fast path: nothing flowed into this node.
            if adjoint.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    // d(AB) -> dA += G . B^T ; dB += A^T . G
                    let bt = self.nodes[b.0].value.transpose();
                    let ga = adjoint.matmul(&bt)?;
                    self.nodes[a.0].adjoint.add_scaled(&ga, 1.0);
                    let at = self.nodes[a.0].value.transpose();
                    let gb = at.matmul(&adjoint)?;
                    self.nodes[b.0].adjoint.add_scaled(&gb, 1.0);
                }
                Op::Transpose(a) => {
                    let g = adjoint.transpose();
                    self.nodes[a.0].adjoint.add_scaled(&g, 1.0);
                }
                Op::Add(a, b) => {
                    self.nodes[a.0].adjoint.add_scaled(&adjoint, 1.0);
                    self.nodes[b.0].adjoint.add_scaled(&adjoint, 1.0);
                }
                Op::Sub(a, b) => {
                    self.nodes[a.0].adjoint.add_scaled(&adjoint, 1.0);
                    self.nodes[b.0].adjoint.add_scaled(&adjoint, -1.0);
                }
                Op::Scale(a, c) => {
                    self.nodes[a.0].adjoint.add_scaled(&adjoint, c);
                }
                Op::MulMask(a, ref mask) => {
                    let data = adjoint
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(g, m)| g * m)
                        .collect();
                    let g = DenseMatrix::from_raw(adjoint.rows(), adjoint.cols(), data);
                    self.nodes[a.0].adjoint.add_scaled(&g, 1.0);
                }
                Op::LogSoftmaxRows(a) => {
                    // dz_j = g_j - softmax(z)_j * sum_k g_k, per row.
                    let out = &self.nodes[i].value;
                    let mut data = Vec::with_capacity(out.len());
                    for r in 0..out.rows() {
                        let grow = adjoint.row(r);
                        let gsum: f64 = grow.iter().sum();
                        for (g, lp) in grow.iter().zip(out.row(r)) {
                            data.push(g - lp.exp() * gsum);
                        }
                    }
                    let g = DenseMatrix::from_raw(out.rows(), out.cols(), data);
                    self.nodes[a.0].adjoint.add_scaled(&g, 1.0);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[i].value;
                    let data = adjoint
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    let g = DenseMatrix::from_raw(out.rows(), out.cols(), data);
                    self.nodes[a.0].adjoint.add_scaled(&g, 1.0);
                }
                Op::CausalSoftmax(a) => {
                    // dS_ij = P_ij * (G_ij - sum_k G_ik P_ik) over the
                    // unmasked prefix of each row.
                    let p = &self.nodes[i].value;
                    let n = p.rows();
                    let mut data = vec![0.0; n * n];
                    for r in 0..n {
                        let prow = p.row(r);
                        let grow = adjoint.row(r);
                        let dot: f64 =
                            prow[..=r].iter().zip(&grow[..=r]).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..=r {
                            data[r * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    let g = DenseMatrix::from_raw(n, n, data);
                    self.nodes[a.0].adjoint.add_scaled(&g, 1.0);
                }
                Op::RowSelect(a, row) => {
                    let cols = adjoint.cols();
                    let target = &mut self.nodes[a.0].adjoint;
                    for j in 0..cols {
                        let cur = target.get(row, j);
                        target.set(row, j, cur + adjoint.get(0, j));
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].value.rows();
                    let inv = 1.0 / rows as f64;
                    let target = &mut self.nodes[a.0].adjoint;
                    for r in 0..rows {
                        for j in 0..adjoint.cols() {
                            let cur = target.get(r, j);
                            target.set(r, j, cur + adjoint.get(0, j) * inv);
                        }
                    }
                }
                Op::Entry(a, r, c) => {
                    let g = adjoint.get(0, 0);
                    let target = &mut self.nodes[a.0].adjoint;
                    let cur = target.get(r, c);
                    target.set(r, c, cur + g);
                }
                Op::ConcatScalars(parents) => {
                    for (j, p) in parents.iter().enumerate() {
                        let g = adjoint.get(0, j);
                        let target = &mut self.nodes[p.0].adjoint;
                        let cur = target.get(0, 0);
                        target.set(0, 0, cur + g);
                    }
                }
                Op::AffineCombination { parents, coeffs } => {
                    let g = adjoint.get(0, 0);
                    for (p, c) in parents.iter().zip(coeffs) {
                        let target = &mut self.nodes[p.0].adjoint;
                        let cur = target.get(0, 0);
                        target.set(0, 0, cur + c * g);
                    }
                }
                Op::MaxElement { parent, index } | Op::MinElement { parent, index } => {
                    let g = adjoint.get(0, 0);
                    let target = &mut self.nodes[parent.0].adjoint;
                    target.data_mut()[index] += g;
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: true } = node.op {
                grads.insert(NodeId(idx), node.adjoint.clone());
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, GradCheckConfig};

    fn ln(x: f64) -> f64 {
        x.ln()
    }

    #[test]
    fn matmul_registers_and_evaluates() {
        let mut tape = Tape::new();
        let a = tape.param(DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_is_contract_violation() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::zeros(2, 3));
        let b = tape.constant(DenseMatrix::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn log_softmax_symmetry() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::row_vector(&[0.0, 0.0]));
        let lp = tape.log_softmax_rows(z).unwrap();
        let expect = ln(0.5);
        for &v in tape.value(lp).data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_closed_form() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::row_vector(&[ln(2.0), 0.0]));
        let lp = tape.log_softmax_rows(z).unwrap();
        assert!((tape.value(lp).get(0, 0) - ln(2.0 / 3.0)).abs() < 1e-14);
        assert!((tape.value(lp).get(0, 1) - ln(1.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn log_softmax_extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::row_vector(&[1000.0, 0.0]));
        let lp = tape.log_softmax_rows(z).unwrap();
        assert!(tape.value(lp).get(0, 0).abs() <= 1e-12);
        assert!((tape.value(lp).get(0, 1) + 1000.0).abs() <= 1e-9);
    }

    #[test]
    fn exp_log_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::row_vector(&[3.2, -1.7, 0.4, 12.0]));
        let lp = tape.log_softmax_rows(z).unwrap();
        let p = tape.exp(lp);
        let sum: f64 = tape.value(p).data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn backward_square_matches_hand_gradient() {
        let mut tape = Tape::new();
        let x = tape.scalar_param(3.0);
        let y = tape.matmul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().get(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_square_matches_central_differences() {
        let f = |p: &[DenseMatrix]| Ok(p[0].get(0, 0) * p[0].get(0, 0));
        let numeric = central_diff(f, &[DenseMatrix::scalar(3.0)], 1e-5).unwrap();
        assert!((numeric[0].get(0, 0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn backward_of_constant_root_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.scalar_param(3.0);
        let c = tape.scalar_const(7.0);
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn backward_product_gradients() {
        let mut tape = Tape::new();
        let x = tape.scalar_param(2.0);
        let y = tape.scalar_param(5.0);
        let z = tape.matmul(x, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert!((grads.get(x).unwrap().get(0, 0) - 5.0).abs() < 1e-12);
        assert!((grads.get(y).unwrap().get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let m = tape.param(DenseMatrix::zeros(2, 2));
        assert!(matches!(tape.backward(m), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn max_element_value_and_index() {
        let mut tape = Tape::new();
        let v = tape.constant(DenseMatrix::row_vector(&[0.3, 0.7, 0.5]));
        let (m, idx) = tape.max_element(v).unwrap();
        assert_eq!(tape.scalar_value(m).unwrap(), 0.7);
        assert_eq!(idx, 1);
    }

    #[test]
    fn max_tie_breaks_to_lowest_index() {
        let mut tape = Tape::new();
        let v = tape.constant(DenseMatrix::row_vector(&[0.5, 0.5]));
        let (m, idx) = tape.max_element(v).unwrap();
        assert_eq!(tape.scalar_value(m).unwrap(), 0.5);
        assert_eq!(idx, 0);
        let mut tape = Tape::new();
        let v = tape.constant(DenseMatrix::row_vector(&[0.5, 0.5]));
        let (_, idx) = tape.min_element(v).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn max_of_empty_vector_is_contract_violation() {
        let mut tape = Tape::new();
        let v = tape.constant(DenseMatrix::zeros(1, 0));
        assert!(tape.max_element(v).is_err());
    }

    #[test]
    fn max_routes_adjoint_to_single_element() {
        let mut tape = Tape::new();
        let a = tape.scalar_param(1.0);
        let b = tape.scalar_param(0.0);
        let v = tape.concat_scalars(&[a, b]).unwrap();
        let (m, _) = tape.max_element(v).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().get(0, 0), 1.0);
        assert_eq!(grads.get(b).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn max_gradient_matches_central_differences_away_from_ties() {
        let f = |p: &[DenseMatrix]| {
            let mut tape = Tape::new();
            let a = tape.param(p[0].clone());
            let b = tape.param(p[1].clone());
            let v = tape.concat_scalars(&[a, b]).unwrap();
            let (m, _) = tape.max_element(v).unwrap();
            tape.scalar_value(m)
        };
        let params = vec![DenseMatrix::scalar(1.0), DenseMatrix::scalar(0.0)];
        let numeric = central_diff(f, &params, 1e-5).unwrap();
        assert!((numeric[0].get(0, 0) - 1.0).abs() < 1e-8);
        assert!(numeric[1].get(0, 0).abs() < 1e-8);
    }

    #[test]
    fn adjoints_finite_after_backward() {
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::row_vector(&[0.3, -2.0, 5.5]));
        let lp = tape.log_softmax_rows(x).unwrap();
        let e = tape.entry(lp, 0, 1).unwrap();
        tape.backward(e).unwrap();
        for i in 0..tape.len() {
            assert!(tape.adjoint(NodeId(i)).all_finite());
        }
    }

    #[test]
    fn tape_evaluation_is_bitwise_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape.param(DenseMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.37));
            let b = tape.constant(DenseMatrix::from_fn(3, 3, |i, j| ((i + j) as f64).sin()));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.causal_softmax(c).unwrap();
            let m = tape.mean_rows(s).unwrap();
            let lp = tape.log_softmax_rows(m).unwrap();
            let e = tape.entry(lp, 0, 0).unwrap();
            let grads = tape.backward(e).unwrap();
            (tape.value(e).clone(), grads.get(a).unwrap().clone())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert!(v1.bit_eq(&v2));
        assert!(g1.bit_eq(&g2));
    }

    /// Every differentiable op, checked against central finite differences on
    /// randomized 3x3 (or compatible) inputs.
    #[test]
    fn all_ops_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cfg = GradCheckConfig::default();

        // Reduce an arbitrary output matrix to a scalar through a fixed
        // linear functional so FD applies to matrix-valued ops.
        fn reduce(tape: &mut Tape, out: NodeId, probe: &DenseMatrix) -> NodeId {
            let mask = tape.mul_mask(out, probe.clone()).unwrap();
            let meaned = tape.mean_rows(mask).unwrap();
            let t = tape.transpose(meaned);
            let m2 = tape.mean_rows(t).unwrap();
            tape.scale(m2, (probe.rows() * probe.cols()) as f64)
        }

        type Builder = fn(&mut Tape, &[NodeId], &DenseMatrix) -> NodeId;
        let cases: Vec<(&str, usize, Builder)> = vec![
            ("matmul", 2, |t, ids, probe| {
                let c = t.matmul(ids[0], ids[1]).unwrap();
                reduce(t, c, probe)
            }),
            ("transpose", 1, |t, ids, probe| {
                let c = t.transpose(ids[0]);
                reduce(t, c, probe)
            }),
            ("add", 2, |t, ids, probe| {
                let c = t.add(ids[0], ids[1]).unwrap();
                reduce(t, c, probe)
            }),
            ("sub", 2, |t, ids, probe| {
                let c = t.sub(ids[0], ids[1]).unwrap();
                reduce(t, c, probe)
            }),
            ("scale", 1, |t, ids, probe| {
                let c = t.scale(ids[0], -1.7);
                reduce(t, c, probe)
            }),
            ("log_softmax_rows", 1, |t, ids, probe| {
                let c = t.log_softmax_rows(ids[0]).unwrap();
                reduce(t, c, probe)
            }),
            ("exp", 1, |t, ids, probe| {
                let c = t.exp(ids[0]);
                reduce(t, c, probe)
            }),
            ("causal_softmax", 1, |t, ids, probe| {
                let c = t.causal_softmax(ids[0]).unwrap();
                reduce(t, c, probe)
            }),
            ("row_select", 1, |t, ids, probe| {
                let c = t.row_select(ids[0], 1).unwrap();
                let row = DenseMatrix::from_raw(1, 3, probe.row(0).to_vec());
                let masked = t.mul_mask(c, row).unwrap();
                let tr = t.transpose(masked);
                let m = t.mean_rows(tr).unwrap();
                t.scale(m, 3.0)
            }),
            ("mean_rows", 1, |t, ids, probe| {
                let c = t.mean_rows(ids[0]).unwrap();
                let row = DenseMatrix::from_raw(1, 3, probe.row(0).to_vec());
                let masked = t.mul_mask(c, row).unwrap();
                let tr = t.transpose(masked);
                let m = t.mean_rows(tr).unwrap();
                t.scale(m, 3.0)
            }),
            ("entry_affine", 1, |t, ids, _| {
                let e1 = t.entry(ids[0], 0, 1).unwrap();
                let e2 = t.entry(ids[0], 2, 2).unwrap();
                t.affine_combination(&[e1, e2], &[2.0, -0.5], 0.25).unwrap()
            }),
            ("concat_max_min", 1, |t, ids, _| {
                let e0 = t.entry(ids[0], 0, 0).unwrap();
                let e1 = t.entry(ids[0], 1, 1).unwrap();
                let e2 = t.entry(ids[0], 2, 0).unwrap();
                let v = t.concat_scalars(&[e0, e1, e2]).unwrap();
                let (mx, _) = t.max_element(v).unwrap();
                let (mn, _) = t.min_element(v).unwrap();
                t.sub(mx, mn).unwrap()
            }),
        ];

        for (name, arity, builder) in cases {
            for _ in 0..100 {
                let params: Vec<DenseMatrix> = (0..arity)
                    .map(|_| DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-2.0..2.0)))
                    .collect();
                let probe = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));

                let analytic = {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> =
                        params.iter().map(|p| tape.param(p.clone())).collect();
                    let root = builder(&mut tape, &ids, &probe);
                    let grads = tape.backward(root).unwrap();
                    ids.iter().map(|&id| grads.get(id).unwrap().clone()).collect::<Vec<_>>()
                };
                let eval = |p: &[DenseMatrix]| {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = p.iter().map(|m| tape.param(m.clone())).collect();
                    let root = builder(&mut tape, &ids, &probe);
                    tape.scalar_value(root)
                };
                let numeric = central_diff(eval, &params, cfg.step).unwrap();
                for (a, n) in analytic.iter().zip(&numeric) {
                    for (x, y) in a.data().iter().zip(n.data()) {
                        let denom = x.abs().max(y.abs());
                        let err = (x - y).abs();
                        assert!(
                            err <= cfg.abs_tol || err / denom <= cfg.rel_tol,
                            "{name}: analytic {x} vs numeric {y}"
                        );
                    }
                }
            }
        }
    }
}
