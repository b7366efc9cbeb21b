use std::collections::BTreeMap;

use super::tensor::{dot, matmul_raw, normalize_rows, transpose_raw, Shape, Tensor};
use super::NORM_EPS;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Ids are handed out in creation order, so
/// every input of a node has a smaller id than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    MulScalar,
    Exp,
    Log,
    Tanh,
    Transpose,
    Reshape,
    AddRowBias,
    RowL2Normalize,
    RowSoftmax,
    RowLogSoftmaxCe,
    Sum,
    Mean,
    RowSum,
    TimeMean,
    TimeWeightedSum,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddConst,
        OpKind::MulScalar,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::AddRowBias,
        OpKind::RowL2Normalize,
        OpKind::RowSoftmax,
        OpKind::RowLogSoftmaxCe,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::RowSum,
        OpKind::TimeMean,
        OpKind::TimeWeightedSum,
    ];
}

/// Parses the variant name, ignoring case and underscores.
impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('_', "").to_ascii_lowercase();
        OpKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown op {s:?}")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    AddRowBias(NodeId, NodeId),
    RowL2Normalize(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmaxCe(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    TimeMean(NodeId),
    TimeWeightedSum(NodeId, NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(_) => OpKind::AddConst,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::RowL2Normalize(_) => OpKind::RowL2Normalize,
            Op::RowSoftmax(_) => OpKind::RowSoftmax,
            Op::RowLogSoftmaxCe(..) => OpKind::RowLogSoftmaxCe,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::RowSum(_) => OpKind::RowSum,
            Op::TimeMean(_) => OpKind::TimeMean,
            Op::TimeWeightedSum(..) => OpKind::TimeWeightedSum,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::AddRowBias(a, b)
            | Op::TimeWeightedSum(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::RowL2Normalize(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmaxCe(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::TimeMean(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct ComputeNode {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
}

/// Gradients of the backward root with respect to every leaf that was
/// created with `requires_grad`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// Records a computation graph for one forward pass. Build a fresh tape per
/// batch; it is single-threaded and never reused across batches.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<ComputeNode>,
    fault: Option<OpKind>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    /// Gradient buffer left by the last [`Tape::backward`] call. Zero for
    /// nodes the root does not depend on.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Test hook: skews the backward rule of one op kind so gradient checks
    /// can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?} produced a non-finite value", op.kind())));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        let grad = vec![0.0; value.numel()];
        self.nodes.push(ComputeNode {
            op,
            value,
            grad,
            requires_grad,
        });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf tensor".into()));
        }
        let id = NodeId(self.nodes.len());
        let grad = vec![0.0; value.numel()];
        self.nodes.push(ComputeNode {
            op: Op::Leaf,
            value,
            grad,
            requires_grad,
        });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn tensor_from(&mut self, data: Vec<f64>, dims: &[usize], requires_grad: bool) -> Result<NodeId> {
        let t = Tensor::new(data, dims)?;
        self.leaf(t, requires_grad)
    }

    fn matrix_dims(&self, id: NodeId) -> Result<(usize, usize)> {
        self.value(id)
            .shape()
            .matrix()
            .ok_or_else(|| Error::ShapeMismatch(format!("expected matrix, got {:?}", self.value(id).dims())))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(x.shape().clone(), data);
        self.push(op, value)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        let value = Tensor::from_parts(x.shape().clone(), data);
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul ({m},{k}) x ({k2},{n})")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(Shape::new(&[m, n])?, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Add(a, b), |u, v| u + v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Sub(a, b), |u, v| u - v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Mul(a, b), |u, v| u * v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map(a, Op::AddConst(a), |v| v + c)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).shape().is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "mul_scalar expects a scalar, got {:?}",
                self.value(s).dims()
            )));
        }
        let c = self.scalar(s);
        self.map(a, Op::MulScalar(a, s), |v| v * c)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::LogDomain(bad));
        }
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix_dims(a)?;
        let data = transpose_raw(self.value(a).data(), m, n);
        self.push(Op::Transpose(a), Tensor::from_parts(Shape::new(&[n, m])?, data))
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(dims)?;
        self.push(Op::Reshape(a), value)
    }

    /// Adds a length-d bias to every row of an (n, d) matrix.
    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims(m)?;
        if self.value(bias).numel() != d {
            return Err(Error::ShapeMismatch(format!(
                "bias of {} elements for {d} columns",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(m).data().to_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        self.push(Op::AddRowBias(m, bias), Tensor::from_parts(Shape::new(&[n, d])?, data))
    }

    pub fn row_l2_normalize(&mut self, m: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims(m)?;
        let data = normalize_rows(self.value(m).data(), n, d)?;
        self.push(Op::RowL2Normalize(m), Tensor::from_parts(Shape::new(&[n, d])?, data))
    }

    /// Entry (i, j) is the cosine of row i of `a` and row j of `b`.
    pub fn cosine_sim_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, d) = self.matrix_dims(a)?;
        let (_, d2) = self.matrix_dims(b)?;
        if d != d2 {
            return Err(Error::ShapeMismatch(format!("cosine feature dims {d} vs {d2}")));
        }
        let an = self.row_l2_normalize(a)?;
        let bn = if a == b { an } else { self.row_l2_normalize(b)? };
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    pub fn row_softmax(&mut self, m: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims(m)?;
        let mut data = self.value(m).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(Op::RowSoftmax(m), Tensor::from_parts(Shape::new(&[n, d])?, data))
    }

    /// Mean over rows of `-log softmax(row)[target]`, computed in the
    /// max-subtracted form.
    pub fn row_log_softmax_ce(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.matrix_dims(logits)?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { index: bad, classes: c });
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (row, &t) in x.chunks(c).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(Op::RowLogSoftmaxCe(logits, targets.to_vec()), value)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// (n, d) -> (n,)
    pub fn row_sum(&mut self, m: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims(m)?;
        let data = self.value(m).data().chunks(d).map(|r| r.iter().sum()).collect();
        self.push(Op::RowSum(m), Tensor::from_parts(Shape::new(&[n])?, data))
    }

    /// (n, t, e) -> (n, e), averaging over the middle axis.
    pub fn time_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, t, e) = self.rank3_dims(x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * e];
        for i in 0..n {
            let out = &mut data[i * e..(i + 1) * e];
            for frame in src[i * t * e..(i + 1) * t * e].chunks(e) {
                out.iter_mut().zip(frame).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= t as f64);
        }
        self.push(Op::TimeMean(x), Tensor::from_parts(Shape::new(&[n, e])?, data))
    }

    /// out[i, :] = sum_t w[i, t] * x[i, t, :]
    pub fn time_weighted_sum(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (n, t, e) = self.rank3_dims(x)?;
        if self.value(w).dims() != [n, t] {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} for sequence batch ({n},{t},{e})",
                self.value(w).dims()
            )));
        }
        let (wv, xv) = (self.value(w).data(), self.value(x).data());
        let mut data = vec![0.0; n * e];
        for i in 0..n {
            let out = &mut data[i * e..(i + 1) * e];
            for s in 0..t {
                let a = wv[i * t + s];
                let frame = &xv[(i * t + s) * e..(i * t + s + 1) * e];
                out.iter_mut().zip(frame).for_each(|(o, v)| *o += a * v);
            }
        }
        self.push(Op::TimeWeightedSum(w, x), Tensor::from_parts(Shape::new(&[n, e])?, data))
    }

    fn rank3_dims(&self, x: NodeId) -> Result<(usize, usize, usize)> {
        match *self.value(x).dims() {
            [n, t, e] => Ok((n, t, e)),
            ref d => Err(Error::ShapeMismatch(format!("expected (n,t,e), got {d:?}"))),
        }
    }

    /// Reverse sweep from a scalar root. Returns the gradients of every leaf
    /// created with `requires_grad`; per-node buffers stay readable through
    /// [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.shape().is_scalar() {
            return Err(Error::NonScalarRoot(root_value.dims().to_vec()));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients::default());
        }
        self.nodes[root.0].grad[0] = 1.0;

        for k in (0..=root.0).rev() {
            if !self.nodes[k].requires_grad || matches!(self.nodes[k].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[k].grad);
            if g.iter().all(|&v| v == 0.0) {
                self.nodes[k].grad = g;
                continue;
            }
            let mut contributions = self.backward_rule(k, &g);
            if self.fault == Some(self.nodes[k].op.kind()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v *= 1.05);
                }
            }
            self.nodes[k].grad = g;
            for (input, c) in contributions {
                let node = &mut self.nodes[input.0];
                if node.requires_grad {
                    node.grad.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                (NodeId(i), Tensor::from_parts(n.value.shape().clone(), n.grad.clone()))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `k` for upstream gradient `g`.
    fn backward_rule(&self, k: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[k];
        let y = node.value.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, kk) = self.nodes[a.0].value.shape().matrix().unwrap();
                let (_, n) = self.nodes[b.0].value.shape().matrix().unwrap();
                let bt = transpose_raw(val(b), kk, n);
                let at = transpose_raw(val(a), m, kk);
                vec![
                    (a, matmul_raw(g, &bt, m, n, kk)),
                    (b, matmul_raw(&at, g, kk, m, n)),
                ]
            }
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (a, g.iter().zip(val(b)).map(|(g, v)| g * v).collect()),
                (b, g.iter().zip(val(a)).map(|(g, v)| g * v).collect()),
            ],
            Op::Scale(a, c) => vec![(a, g.iter().map(|v| v * c).collect())],
            Op::AddConst(a) => vec![(a, g.to_vec())],
            Op::MulScalar(a, s) => {
                let c = val(s)[0];
                vec![
                    (a, g.iter().map(|v| v * c).collect()),
                    (s, vec![dot(g, val(a))]),
                ]
            }
            Op::Exp(a) => vec![(a, g.iter().zip(y).map(|(g, y)| g * y).collect())],
            Op::Log(a) => vec![(a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect())],
            Op::Tanh(a) => vec![(a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Transpose(a) => {
                let (m, n) = node.value.shape().matrix().unwrap();
                vec![(a, transpose_raw(g, m, n))]
            }
            Op::Reshape(a) => vec![(a, g.to_vec())],
            Op::AddRowBias(m, b) => {
                let d = self.nodes[b.0].value.numel();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(m, g.to_vec()), (b, gb)]
            }
            Op::RowL2Normalize(a) => {
                let d = node.value.cols();
                let x = val(a);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), (xr, out)) in g
                    .chunks(d)
                    .zip(y.chunks(d))
                    .zip(x.chunks(d).zip(gx.chunks_mut(d)))
                {
                    let norm = dot(xr, xr).sqrt().max(NORM_EPS);
                    let proj = dot(gr, yr);
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * proj) / norm;
                    }
                }
                vec![(a, gx)]
            }
            Op::RowSoftmax(a) => {
                let d = node.value.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let s = dot(gr, yr);
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                vec![(a, gx)]
            }
            Op::RowLogSoftmaxCe(a, ref targets) => {
                let x = &self.nodes[a.0].value;
                let c = x.cols();
                let n = targets.len();
                let scale = g[0] / n as f64;
                let mut gx = x.data().to_vec();
                for (row, &t) in gx.chunks_mut(c).zip(targets) {
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(a, gx)]
            }
            Op::Sum(a) => vec![(a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                vec![(a, vec![g[0] / n as f64; n])]
            }
            Op::RowSum(a) => {
                let d = self.nodes[a.0].value.cols();
                vec![(a, g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect())]
            }
            Op::TimeMean(x) => {
                let dims = self.nodes[x.0].value.dims();
                let (n, t, e) = (dims[0], dims[1], dims[2]);
                let mut gx = vec![0.0; n * t * e];
                for i in 0..n {
                    let gi = &g[i * e..(i + 1) * e];
                    for frame in gx[i * t * e..(i + 1) * t * e].chunks_mut(e) {
                        frame.iter_mut().zip(gi).for_each(|(o, v)| *o = v / t as f64);
                    }
                }
                vec![(x, gx)]
            }
            Op::TimeWeightedSum(w, x) => {
                let dims = self.nodes[x.0].value.dims();
                let (n, t, e) = (dims[0], dims[1], dims[2]);
                let (wv, xv) = (val(w), val(x));
                let mut gw = vec![0.0; n * t];
                let mut gx = vec![0.0; n * t * e];
                for i in 0..n {
                    let gi = &g[i * e..(i + 1) * e];
                    for s in 0..t {
                        let off = (i * t + s) * e;
                        gw[i * t + s] = dot(gi, &xv[off..off + e]);
                        let a = wv[i * t + s];
                        gx[off..off + e].iter_mut().zip(gi).for_each(|(o, v)| *o = a * v);
                    }
                }
                vec![(w, gw), (x, gx)]
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tensor_from_stores_row_major() {
        let mut tape = Tape::new();
        let x = tape.tensor_from(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        assert_eq!(tape.value(x).row(1), &[3.0, 4.0]);
        let s = tape.tensor_from(vec![0.0], &[1], false).unwrap();
        assert!(tape.value(s).shape().is_scalar());
        assert!(matches!(
            tape.tensor_from(vec![1.0, f64::NAN], &[2], false),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            tape.tensor_from(vec![1.0, 2.0, 3.0], &[2, 2], false),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2).unwrap()).unwrap();
        let m = tape.tensor_from(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.tensor_from(vec![1.0, 1.0], &[1, 2], false).unwrap();
        let c = tape.tensor_from(vec![1.0, 1.0], &[2, 1], false).unwrap();
        let s = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0]);

        let b = tape.tensor_from(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], false).unwrap();
        let p = tape.matmul(m, b).unwrap();
        assert_eq!(tape.value(p).data(), &[19.0, 22.0, 43.0, 50.0]);

        assert!(matches!(tape.matmul(r, m).map(|_| ()), Ok(())));
        assert!(matches!(tape.matmul(c, m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.tensor_from(vec![0.0], &[1], false).unwrap();
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.scalar(e), 1.0);
        let r = tape.tensor_from(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let s = tape.scale(r, 3.0).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 6.0]);
        let h = tape.tensor_from(vec![0.5], &[1], false).unwrap();
        let t = tape.tanh(h).unwrap();
        assert!(close(tape.scalar(t), 0.462117, 1e-6));

        let neg = tape.tensor_from(vec![1.0, 0.0], &[2], false).unwrap();
        assert!(matches!(tape.log(neg), Err(Error::LogDomain(_))));
        let other = tape.tensor_from(vec![1.0, 2.0, 3.0], &[3], false).unwrap();
        assert!(matches!(tape.add(neg, other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let a = tape.tensor_from(vec![3.0, 4.0], &[1, 2], false).unwrap();
        let n = tape.row_l2_normalize(a).unwrap();
        assert!(close(tape.value(n).data()[0], 0.6, 1e-15));
        assert!(close(tape.value(n).data()[1], 0.8, 1e-15));
        let b = tape.tensor_from(vec![1.0, 0.0, 0.0, 2.0], &[2, 2], false).unwrap();
        let n = tape.row_l2_normalize(b).unwrap();
        assert_eq!(tape.value(n).data(), &[1.0, 0.0, 0.0, 1.0]);
        let z = tape.tensor_from(vec![0.0, 0.0], &[1, 2], false).unwrap();
        assert!(matches!(tape.row_l2_normalize(z), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::identity(2).unwrap()).unwrap();
        let s = tape.cosine_sim_matrix(e, e).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.tensor_from(vec![1.0, 1.0], &[1, 2], false).unwrap();
        let b = tape.tensor_from(vec![1.0, 0.0], &[1, 2], false).unwrap();
        let s = tape.cosine_sim_matrix(a, b).unwrap();
        assert!(close(tape.scalar(s), 0.70711, 1e-5));

        let b5 = tape.scale(b, 5.0).unwrap();
        let s5 = tape.cosine_sim_matrix(a, b5).unwrap();
        assert!(close(tape.scalar(s5), tape.scalar(s), 1e-12));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let one = tape.tensor_from(vec![7.5], &[1, 1], false).unwrap();
        let ce = tape.row_log_softmax_ce(one, &[0]).unwrap();
        assert_eq!(tape.scalar(ce), 0.0);

        let eye = tape.constant(Tensor::identity(2).unwrap()).unwrap();
        let ce = tape.row_log_softmax_ce(eye, &[0, 1]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!(close(tape.scalar(ce), expected, 1e-15));
        assert!(close(tape.scalar(ce), 0.313262, 1e-6));

        let zeros = tape.constant(Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        let ce = tape.row_log_softmax_ce(zeros, &[0, 1]).unwrap();
        assert!(close(tape.scalar(ce), std::f64::consts::LN_2, 1e-15));

        assert!(matches!(
            tape.row_log_softmax_ce(zeros, &[0, 2]),
            Err(Error::TargetOutOfRange { index: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.tensor_from(vec![1000.0, 0.0, 0.0, 1000.0], &[2, 2], true).unwrap();
        let ce = tape.row_log_softmax_ce(x, &[0, 1]).unwrap();
        assert_eq!(tape.scalar(ce), 0.0);
        let g = tape.backward(ce).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let a = tape.tensor_from(vec![1.0, 3.0], &[1, 2], false).unwrap();
        let m = tape.mean(a).unwrap();
        assert_eq!(tape.scalar(m), 2.0);
        let i3 = tape.constant(Tensor::identity(3).unwrap()).unwrap();
        let s = tape.sum(i3).unwrap();
        assert_eq!(tape.scalar(s), 3.0);
        let b = tape.tensor_from(vec![0.2, 0.4, 0.6, 0.8], &[2, 2], false).unwrap();
        let m = tape.mean(b).unwrap();
        assert!(close(tape.scalar(m), 0.5, 1e-15));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.tensor_from(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.tensor_from(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.tensor_from(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let s = tape.sum(x).unwrap();
        assert!(tape.backward(s).unwrap().is_empty());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::new();
        let x = tape
            .tensor_from(vec![3.0, -1.0, 0.5, 20.0, 20.0, -20.0], &[2, 3], false)
            .unwrap();
        let s = tape.row_softmax(x).unwrap();
        for row in tape.value(s).data().chunks(3) {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn ids_are_topological() {
        let mut tape = Tape::new();
        let a = tape.tensor_from(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let b = tape.tanh(a).unwrap();
        let c = tape.mul(a, b).unwrap();
        let d = tape.sum(c).unwrap();
        for id in [b, c, d] {
            assert!(tape.inputs(id).iter().all(|i| i < &id));
        }
        assert_eq!(tape.op_kind(c), OpKind::Mul);
    }
}
