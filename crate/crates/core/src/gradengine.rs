//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A `Tape` is rebuilt for every objective evaluation; values are computed
//! eagerly as nodes are pushed, and `backward` replays the recorded ops in
//! reverse. Backward never mutates the tape, so two backward passes give
//! identical gradients.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Matrix};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// Broadcast a 1 x n row over every row of a batch matrix.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Scale(NodeId, f64),
    // The scalar is baked into the forward value; backward is identity.
    AddScalar(NodeId, #[allow(dead_code)] f64),
    SumAll(NodeId),
    // Backward deliberately never visits the argument.
    StopGrad(#[allow(dead_code)] NodeId),
    /// Sum over batch rows of log-softmax(logits) at the target class.
    LogSoftmaxNll(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Matmul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::SumAll(..) => "sum_all",
            Op::StopGrad(..) => "stop_gradient",
            Op::LogSoftmaxNll(..) => "log_softmax_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Record of one objective evaluation.
#[derive(Debug, Default)]
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("tape add shapes");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b)).expect("tape sub shapes");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mul_elem(self.value(b))
            .expect("tape mul shapes");
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x / y)
            .expect("tape div shapes");
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).expect("tape matmul shapes");
        self.push(v, Op::Matmul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "tape add_row shapes");
        let row_data = self.value(row).row(0).to_vec();
        let v = Matrix::from_fn(m, n, |i, j| self.value(a).get(i, j) + row_data[j]);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]).unwrap();
        self.push(v, Op::SumAll(a))
    }

    /// Forward identity whose backward contributes zero: the prior
    /// parameters are constants within a gradient step.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad(a))
    }

    /// Scalar node holding sum_m log softmax(logits_m)[targets_m].
    pub fn log_softmax_nll(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "tape log_softmax_nll rows");
        let mut total = 0.0;
        for (m, &y) in targets.iter().enumerate() {
            let row = l.row(m);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += row[y] - lse;
        }
        let v = Matrix::from_vec(1, 1, vec![total]).unwrap();
        self.push(v, Op::LogSoftmaxNll(logits, targets.to_vec()))
    }

    fn check_finite(&self, phase: &'static str) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: node.op.name().to_string(),
                    phase,
                });
            }
        }
        Ok(())
    }

    /// Gradient of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Matrix>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        self.check_finite("forward")?;

        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss].set(0, 0, 1.0);

        for id in (0..=loss).rev() {
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate_scaled(&mut grads[*b], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let da = g.mul_elem(self.value(*b)).unwrap();
                    let db = g.mul_elem(self.value(*a)).unwrap();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = g.zip_map(bv, |gi, bi| gi / bi).unwrap();
                    let av = self.value(*a);
                    let db = Matrix::from_fn(bv.rows(), bv.cols(), |i, j| {
                        -g.get(i, j) * av.get(i, j) / (bv.get(i, j) * bv.get(i, j))
                    });
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose()).unwrap();
                    let db = self.value(*a).transpose().matmul(&g).unwrap();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[*a], &g);
                    let n = g.cols();
                    let mut row_grad = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for j in 0..n {
                            row_grad.set(0, j, row_grad.get(0, j) + g.get(i, j));
                        }
                    }
                    accumulate(&mut grads[*row], &row_grad);
                }
                Op::Relu(a) => {
                    // Derivative at exactly 0 is defined as 0.
                    let da = g
                        .zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })
                        .unwrap();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Softplus(a) => {
                    let da = g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x)).unwrap();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Log(a) => {
                    let da = g.zip_map(self.value(*a), |gi, x| gi / x).unwrap();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[id].value;
                    let da = g.zip_map(y, |gi, yi| gi / (2.0 * yi)).unwrap();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Scale(a, c) => {
                    accumulate_scaled(&mut grads[*a], &g, *c);
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut grads[*a], &g);
                }
                Op::SumAll(a) => {
                    let gs = g.get(0, 0);
                    let shape = self.value(*a).shape();
                    let da = Matrix::filled(shape.0, shape.1, gs);
                    accumulate(&mut grads[*a], &da);
                }
                Op::LogSoftmaxNll(logits, targets) => {
                    let gs = g.get(0, 0);
                    let l = self.value(*logits);
                    let mut dl = Matrix::zeros(l.rows(), l.cols());
                    for (m, &y) in targets.iter().enumerate() {
                        let row = l.row(m);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for (j, &e) in exps.iter().enumerate() {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl.set(m, j, gs * (onehot - e / z));
                        }
                    }
                    accumulate(&mut grads[*logits], &dl);
                }
            }
        }

        for (id, grad) in grads.iter().enumerate() {
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: self.nodes[id].op.name().to_string(),
                    phase: "backward",
                });
            }
        }
        Ok(grads)
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn accumulate_scaled(dst: &mut Matrix, src: &Matrix, c: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += c * s;
    }
}

/// Which trainable array a parameter entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    WeightMu,
    WeightRho,
    Bias,
}

/// One trainable array plus its gradient slot.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub layer: usize,
    pub role: ParamRole,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamEntry {
    pub fn new(layer: usize, role: ParamRole, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamEntry {
            layer,
            role,
            value,
            grad,
        }
    }
}

/// Flat list of all trainable parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Matrix::zeros(e.value.rows(), e.value.cols());
        }
    }
}

/// A built tape together with its scalar loss node and the mapping from
/// parameter index to the leaf holding that parameter's value.
pub struct BoundObjective {
    pub tape: Tape,
    pub loss: NodeId,
    pub bindings: Vec<(usize, NodeId)>,
}

/// Runs backward on a bound objective and stores the gradient of the loss
/// into each parameter's gradient slot. Returns the loss value.
pub fn forward_and_backward(obj: &BoundObjective, params: &mut ParamSet) -> Result<f64> {
    let grads = obj.tape.backward(obj.loss)?;
    params.zero_grads();
    for &(pidx, node) in &obj.bindings {
        accumulate(&mut params.entries[pidx].grad, &grads[node]);
    }
    Ok(obj.tape.value(obj.loss).get(0, 0))
}
