use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LogSoftmax(NodeId),
    CausalSoftmax(NodeId),
    Exp(NodeId),
    Gather {
        src: NodeId,
        index: Vec<usize>,
        k: usize,
    },
    SliceRows {
        src: NodeId,
        start: usize,
        end: usize,
    },
    SliceCols {
        src: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<NodeId>),
    Mean(NodeId),
    Sum(NodeId),
    StopGradient(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Gather { src, .. } | Op::SliceRows { src, .. } | Op::SliceCols { src, .. } => vec![*src],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::LogSoftmax(a)
            | Op::CausalSoftmax(a)
            | Op::Exp(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::StopGradient(a) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Per-row (mean, rstd) for layer norm.
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Values are computed eagerly as nodes are recorded. Nodes are stored in
/// creation order, which is a topological order of the graph, so
/// [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn new() -> Self {
        Gradients(BTreeMap::new())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.0.insert(name, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds `other` into `self`; missing keys are inserted.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Shape(format!("gradient {name} shape changed")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Forward rule for every non-leaf op. Shared by recording and replay.
fn eval_op<'a>(op: &Op, val: &dyn Fn(NodeId) -> &'a Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut saved = Vec::new();
    let out = match op {
        Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = dims2(a);
            let (k2, n) = dims2(b);
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
            }
            Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))?
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = dims2(a);
            let (n, k2) = dims2(b);
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(Error::Shape(format!("matmul_nt {:?} x {:?}^T", a.shape(), b.shape())));
            }
            Tensor::matrix(m, n, kernels::matmul_nt(a.data(), b.data(), m, k, n))?
        }
        Op::Add(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::AddRow(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if b.shape().len() != 1 || b.len() != a.cols() {
                return Err(Error::Shape(format!("add_row {:?} + {:?}", a.shape(), b.shape())));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(b.len()) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            out
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("mul {:?} * {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::Scale(a, c) => {
            let a = val(*a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())?
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (x, g, b) = (val(*x), val(*gamma), val(*beta));
            let d = x.cols();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm {:?} with scale {:?} offset {:?}",
                    x.shape(),
                    g.shape(),
                    b.shape()
                )));
            }
            let mut out = vec![0.0; x.len()];
            kernels::layer_norm_rows(x.data(), g.data(), b.data(), &mut out, &mut saved);
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::Gelu(a) => {
            let a = val(*a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| kernels::gelu(x)).collect())?
        }
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let (v, d) = dims2(t);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Contract(format!("embedding id {id} >= {v}")));
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), d, out)?
        }
        Op::LogSoftmax(a) => {
            let a = val(*a);
            if a.cols() == 0 {
                return Err(Error::Contract("log_softmax over empty dimension".into()));
            }
            if !a.is_finite() {
                return Err(Error::NumericDomain("log_softmax input is not finite".into()));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(a.cols()) {
                kernels::log_softmax_in_place(row);
            }
            out
        }
        Op::CausalSoftmax(a) => {
            let a = val(*a);
            let (m, n) = dims2(a);
            if a.shape().len() != 2 || m != n {
                return Err(Error::Shape(format!("causal_softmax needs square input, got {:?}", a.shape())));
            }
            if !a.is_finite() {
                return Err(Error::NumericDomain("causal_softmax input is not finite".into()));
            }
            let mut out = a.clone();
            for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
                kernels::masked_softmax_in_place(row, i + 1);
            }
            out
        }
        Op::Exp(a) => {
            let a = val(*a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.exp()).collect())?
        }
        Op::Gather { src, index, k } => {
            let s = val(*src);
            let (m, n) = dims2(s);
            if index.len() != m * k {
                return Err(Error::Shape(format!("gather needs {} indices, got {}", m * k, index.len())));
            }
            let mut out = Vec::with_capacity(m * k);
            for (i, chunk) in index.chunks(*k).enumerate() {
                for &j in chunk {
                    if j >= n {
                        return Err(Error::Contract(format!("gather index {j} >= {n}")));
                    }
                    out.push(s.data()[i * n + j]);
                }
            }
            Tensor::matrix(m, *k, out)?
        }
        Op::SliceRows { src, start, end } => {
            let s = val(*src);
            let (m, n) = dims2(s);
            if s.shape().len() != 2 || start >= end || *end > m {
                return Err(Error::Contract(format!("slice_rows {start}..{end} of {m}")));
            }
            Tensor::matrix(end - start, n, s.data()[start * n..end * n].to_vec())?
        }
        Op::SliceCols { src, start, end } => {
            let s = val(*src);
            let (m, n) = dims2(s);
            if s.shape().len() != 2 || start >= end || *end > n {
                return Err(Error::Contract(format!("slice_cols {start}..{end} of {n}")));
            }
            let mut out = Vec::with_capacity(m * (end - start));
            for i in 0..m {
                out.extend_from_slice(&s.data()[i * n + start..i * n + end]);
            }
            Tensor::matrix(m, end - start, out)?
        }
        Op::ConcatCols(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
            let m = vals[0].rows();
            if vals.iter().any(|v| v.shape().len() != 2 || v.rows() != m) {
                return Err(Error::Shape("concat_cols needs matrices with equal row counts".into()));
            }
            let n: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for v in &vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            Tensor::matrix(m, n, out)?
        }
        Op::Mean(a) => {
            let a = val(*a);
            if a.is_empty() {
                return Err(Error::Contract("mean of empty tensor".into()));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Op::StopGradient(a) => val(*a).clone(),
    };
    Ok((out, saved))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", id.0)))
    }

    pub fn requires_grad(&self, id: NodeId) -> Result<bool> {
        self.nodes
            .get(id.0)
            .map(|n| n.requires_grad)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", id.0)))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("unknown node {}", id.0)))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        let nodes = &self.nodes;
        let (value, saved) = eval_op(&op, &|id: NodeId| &nodes[id.0].value)?;
        let requires_grad =
            !matches!(op, Op::StopGradient(_)) && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            saved: Vec::new(),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named trainable leaf. Names are unique per tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if self.nodes.iter().any(|n| matches!(&n.op, Op::Param(p) if *p == name)) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.nodes.push(Node {
            op: Op::Param(name),
            value,
            saved: Vec::new(),
            requires_grad: true,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// Adds row vector `b` (shape `[n]`) to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::CausalSoftmax(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    /// Picks `k` columns per row; `index` is row-major `[rows * k]`.
    pub fn gather(&mut self, src: NodeId, index: Vec<usize>, k: usize) -> Result<NodeId> {
        self.push(Op::Gather { src, index, k })
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { src, start, end })
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { src, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    /// Identity in the forward pass; blocks all gradient in the backward pass.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGradient(a))
    }

    /// Names of all trainable leaves on the tape.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                _ => {
                    let done = &vals;
                    eval_op(&node.op, &|id: NodeId| &done[id.0])?.0
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Reverse sweep from a scalar node. Every trainable leaf gets an entry,
    /// zero if it does not influence `seed`.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        self.check(seed)?;
        if !self.nodes[seed.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }

        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if out.get(name).is_none() {
                    out.insert(name.clone(), Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |id: NodeId| nodes[id.0].requires_grad;
        let value = |id: NodeId| &nodes[id.0].value;

        match &node.op {
            Op::Constant => {}
            Op::Param(name) => {
                out.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (value(*a), value(*b));
                let (m, k) = dims2(av);
                let n = bv.cols();
                if needs(*a) {
                    accumulate(grads, *a, kernels::matmul_nt(&g, bv.data(), m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(av.data(), &g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (value(*a), value(*b));
                let (m, k) = dims2(av);
                let n = bv.rows();
                if needs(*a) {
                    accumulate(grads, *a, kernels::matmul(&g, bv.data(), m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(&g, av.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRow(a, b) => {
                if needs(*b) {
                    let n = value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = g.iter().zip(value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let gb = g.iter().zip(value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = value(*x);
                let gam = value(*gamma).data();
                let d = gam.len();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (xr, gr)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = node.saved[2 * r];
                    let rstd = node.saved[2 * r + 1];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                        gg[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    let mean_dxhat = sum_dxhat / d as f64;
                    let mean_dxhat_xhat = sum_dxhat_xhat / d as f64;
                    let row = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        row[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, gx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, gg);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, gbeta);
                }
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(value(*a).data())
                    .map(|(gv, &x)| gv * kernels::gelu_grad(x))
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Embedding { table, ids } => {
                let t = value(*table);
                let d = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
                accumulate(grads, *table, gt);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), outr) in g.chunks(n).zip(node.value.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        outr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::CausalSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for (i, ((gr, pr), outr)) in g
                    .chunks(n)
                    .zip(node.value.data().chunks(n))
                    .zip(ga.chunks_mut(n))
                    .enumerate()
                {
                    let active = i + 1;
                    let s = kernels::dot(&gr[..active], &pr[..active]);
                    for j in 0..active {
                        outr[j] = pr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, ga);
            }
            Op::Gather { src, index, k } => {
                let s = value(*src);
                let n = s.cols();
                let mut gs = vec![0.0; s.len()];
                for (i, chunk) in index.chunks(*k).enumerate() {
                    for (c, &j) in chunk.iter().enumerate() {
                        gs[i * n + j] += g[i * k + c];
                    }
                }
                accumulate(grads, *src, gs);
            }
            Op::SliceRows { src, start, .. } => {
                let s = value(*src);
                let n = s.cols();
                let mut gs = vec![0.0; s.len()];
                gs[start * n..start * n + g.len()].copy_from_slice(&g);
                accumulate(grads, *src, gs);
            }
            Op::SliceCols { src, start, end } => {
                let s = value(*src);
                let n = s.cols();
                let w = end - start;
                let mut gs = vec![0.0; s.len()];
                for i in 0..s.rows() {
                    gs[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *src, gs);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = value(*p).cols();
                    if needs(*p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::Mean(a) => {
                let len = value(*a).len();
                accumulate(grads, *a, vec![g[0] / len as f64; len]);
            }
            Op::Sum(a) => {
                let len = value(*a).len();
                accumulate(grads, *a, vec![g[0]; len]);
            }
            Op::StopGradient(_) => {}
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
