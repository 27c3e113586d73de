//! Tape-based reverse-mode differentiation over a closed matrix-op vocabulary.
//!
//! A [`Tape`] records every differentiable operation of one forward pass into
//! an arena of nodes. [`Tape::backward`] replays the records in strict reverse
//! execution order, accumulating gradients additively into every node that was
//! created with `requires_grad`. Sparse operands are graph structure and never
//! receive gradients.

use std::sync::Arc;

use super::dense::{self, DenseMatrix};
use super::sparse::{self, SparseMatrix};
use super::NumError;

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Spmm(Arc<SparseMatrix>, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    RowSelect(NodeId, Vec<usize>),
    RowSum(NodeId),
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: DenseMatrix,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node; zeros if unreachable.
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> DenseMatrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => DenseMatrix::zeros(shape.0, shape.1),
        }
    }
}

/// Arena of one forward pass's operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a differentiable leaf (a parameter).
    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Register a non-differentiable leaf (an input or mask).
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let value = dense::matmul(self.value(a), self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn spmm(&mut self, s: Arc<SparseMatrix>, d: NodeId) -> Result<NodeId, NumError> {
        let value = sparse::spmm(&s, self.value(d))?;
        let rg = self.needs_grad(d);
        Ok(self.push(Op::Spmm(s, d), value, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = dense::relu(self.value(a));
        let rg = self.needs_grad(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = dense::sigmoid(self.value(a));
        let rg = self.needs_grad(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = dense::log_sigmoid(self.value(a));
        let rg = self.needs_grad(a);
        self.push(Op::LogSigmoid(a), value, rg)
    }

    /// Elementwise add; `b` may be a 1xC bias row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let value = dense::add(self.value(a), self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = dense::scale(self.value(a), s);
        let rg = self.needs_grad(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let value = dense::hadamard(self.value(a), self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Hadamard(a, b), value, rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let value = dense::concat_cols(self.value(a), self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    pub fn row_select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, NumError> {
        let value = dense::row_select(self.value(a), indices)?;
        let rg = self.needs_grad(a);
        Ok(self.push(Op::RowSelect(a, indices.to_vec()), value, rg))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let value = dense::row_sum(self.value(a));
        let rg = self.needs_grad(a);
        self.push(Op::RowSum(a), value, rg)
    }

    /// Reduce to a 1x1 scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::from_vec(1, 1, vec![dense::sum_all(self.value(a))])
            .expect("sum of finite matrix is finite");
        let rg = self.needs_grad(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64, NumError> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(NumError::Contract(format!(
                "expected scalar node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.get(0, 0))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        if self.shape(loss) != (1, 1) {
            return Err(NumError::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                self.shape(loss).0,
                self.shape(loss).1
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = dense::matmul_nt(&g, self.value(*b))?;
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = dense::matmul_tn(self.value(*a), &g)?;
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Spmm(s, d) => {
                    if self.needs_grad(*d) {
                        let gd = sparse::spmm_t(s, &g)?;
                        accumulate(&mut grads[d.0], gd);
                    }
                }
                Op::Relu(a) => {
                    if self.needs_grad(*a) {
                        let x = self.value(*a);
                        let mut ga = g.clone();
                        for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                            if xv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs_grad(*a) {
                        let y = &node.value;
                        let mut ga = g.clone();
                        for (gv, &yv) in ga.data_mut().iter_mut().zip(y.data()) {
                            *gv *= yv * (1.0 - yv);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::LogSigmoid(a) => {
                    if self.needs_grad(*a) {
                        // d/dx ln σ(x) = σ(-x)
                        let x = self.value(*a);
                        let mut ga = g.clone();
                        for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                            *gv *= dense::sigmoid_scalar(-xv);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs_grad(*b) {
                        let bshape = self.shape(*b);
                        if bshape == g.shape() {
                            accumulate(&mut grads[b.0], g.clone());
                        } else {
                            // bias row: column sums
                            let mut gb = DenseMatrix::zeros(1, bshape.1);
                            for r in 0..g.rows() {
                                for (acc, &gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                    *acc += gv;
                                }
                            }
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads[a.0], dense::scale(&g, *s));
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads[a.0], dense::hadamard(&g, self.value(*b))?);
                    }
                    if self.needs_grad(*b) {
                        accumulate(&mut grads[b.0], dense::hadamard(&g, self.value(*a))?);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (rows, acols) = self.shape(*a);
                    let bcols = self.shape(*b).1;
                    if self.needs_grad(*a) {
                        let mut ga = DenseMatrix::zeros(rows, acols);
                        for r in 0..rows {
                            ga.data_mut()[r * acols..(r + 1) * acols]
                                .copy_from_slice(&g.row(r)[..acols]);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs_grad(*b) {
                        let mut gb = DenseMatrix::zeros(rows, bcols);
                        for r in 0..rows {
                            gb.data_mut()[r * bcols..(r + 1) * bcols]
                                .copy_from_slice(&g.row(r)[acols..]);
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::RowSelect(a, indices) => {
                    if self.needs_grad(*a) {
                        let (arows, acols) = self.shape(*a);
                        let mut ga = DenseMatrix::zeros(arows, acols);
                        for (r, &idx) in indices.iter().enumerate() {
                            let dst = &mut ga.data_mut()[idx * acols..(idx + 1) * acols];
                            for (dv, &gv) in dst.iter_mut().zip(g.row(r)) {
                                *dv += gv;
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::RowSum(a) => {
                    if self.needs_grad(*a) {
                        let (arows, acols) = self.shape(*a);
                        let mut ga = DenseMatrix::zeros(arows, acols);
                        for r in 0..arows {
                            let gv = g.get(r, 0);
                            for dv in &mut ga.data_mut()[r * acols..(r + 1) * acols] {
                                *dv = gv;
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Sum(a) => {
                    if self.needs_grad(*a) {
                        let (arows, acols) = self.shape(*a);
                        let gv = g.get(0, 0);
                        let ga = DenseMatrix::from_vec(arows, acols, vec![gv; arows * acols])
                            .expect("finite");
                        accumulate(&mut grads[a.0], ga);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, g: DenseMatrix) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w, (2, 2)).data(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let w = tape.param(DenseMatrix::zeros(3, 2));
        let s = tape.sigmoid(w);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        for &g in grads.get(w, (3, 2)).data() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        // loss = sum(W) + sum(2W) => dW = 3
        let mut tape = Tape::new();
        let w = tape.param(DenseMatrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap());
        let a = tape.sum(w);
        let wb = tape.scale(w, 2.0);
        let b = tape.sum(wb);
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w, (1, 2)).data(), &[3.0, 3.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut tape = Tape::new();
        let w = tape.param(DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap());
        let v = tape.param(DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(v, (1, 1)).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(DenseMatrix::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(NumError::Contract(_))));
    }

    /// Central finite differences of an arbitrary taped function.
    pub(crate) fn finite_diff_grad(
        build: &dyn Fn(&mut Tape, &[DenseMatrix]) -> NodeId,
        params: &[DenseMatrix],
        h: f64,
    ) -> Vec<DenseMatrix> {
        let eval = |params: &[DenseMatrix]| -> f64 {
            let mut tape = Tape::new();
            let loss = build(&mut tape, params);
            tape.scalar_value(loss).unwrap()
        };
        params
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let mut grad = DenseMatrix::zeros(p.rows(), p.cols());
                for i in 0..p.data().len() {
                    let mut plus = params.to_vec();
                    plus[pi].data_mut()[i] += h;
                    let mut minus = params.to_vec();
                    minus[pi].data_mut()[i] -= h;
                    grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
                }
                grad
            })
            .collect()
    }

    fn assert_grads_close(analytic: &DenseMatrix, numeric: &DenseMatrix, rel_tol: f64) {
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / denom < rel_tol,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn random_composition_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..4usize);
            let d = rng.gen_range(1..4usize);
            let k = rng.gen_range(1..4usize);
            let w0 = random_matrix(&mut rng, n, d);
            let w1 = random_matrix(&mut rng, d, k);
            let w2 = random_matrix(&mut rng, 1, k);
            let params = vec![w0, w1, w2];

            // loss = sum(log_sigmoid(relu(W0 W1) + b) ∘ sigmoid(W0 W1))
            let build = |tape: &mut Tape, p: &[DenseMatrix]| {
                let w0 = tape.param(p[0].clone());
                let w1 = tape.param(p[1].clone());
                let w2 = tape.param(p[2].clone());
                let prod = tape.matmul(w0, w1).unwrap();
                let r = tape.relu(prod);
                let biased = tape.add(r, w2).unwrap();
                let ls = tape.log_sigmoid(biased);
                let sg = tape.sigmoid(prod);
                let m = tape.hadamard(ls, sg).unwrap();
                tape.sum(m)
            };

            let mut tape = Tape::new();
            let loss = {
                let w0 = tape.param(params[0].clone());
                let w1 = tape.param(params[1].clone());
                let w2 = tape.param(params[2].clone());
                let prod = tape.matmul(w0, w1).unwrap();
                let r = tape.relu(prod);
                let biased = tape.add(r, w2).unwrap();
                let ls = tape.log_sigmoid(biased);
                let sg = tape.sigmoid(prod);
                let m = tape.hadamard(ls, sg).unwrap();
                let loss = tape.sum(m);
                let grads = tape.backward(loss).unwrap();
                let numeric = finite_diff_grad(&build, &params, 1e-6);
                assert_grads_close(&grads.get(w0, (n, d)), &numeric[0], 1e-4);
                assert_grads_close(&grads.get(w1, (d, k)), &numeric[1], 1e-4);
                assert_grads_close(&grads.get(w2, (1, k)), &numeric[2], 1e-4);
                loss
            };
            let _ = loss;
        }
    }

    fn random_matrix(rng: &mut StdRng, r: usize, c: usize) -> DenseMatrix {
        // offset away from 0 keeps relu kinks off the finite-difference path
        DenseMatrix::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.1..1.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap()
    }
}
