//! Static computation graph with staged forward evaluation and reverse-mode
//! gradients.
//!
//! A [`Graph`] is built once through [`GraphBuilder`] and is immutable
//! afterwards. Evaluation state lives in a [`Session`], so one graph can back
//! many independent passes. Nodes are stored in topological order by
//! construction: every op can only reference nodes created before it.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    /// Scales every row to unit L2 norm.
    L2NormalizeRows(NodeId),
    SoftmaxRows(NodeId),
    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::L2NormalizeRows(_) => "l2norm",
            Op::SoftmaxRows(_) => "softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatCols(_) => "concat",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::L2NormalizeRows(a)
            | Op::SoftmaxRows(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

#[derive(Clone, Debug)]
struct InputDecl {
    /// `None` entries accept any size.
    dims: Vec<Option<usize>>,
    node: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, InputDecl>,
    params: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input. Re-declaring a name returns the existing node.
    pub fn input(&mut self, name: &str, dims: &[Option<usize>]) -> NodeId {
        if let Some(decl) = self.inputs.get(name) {
            return decl.node;
        }
        let node = self.push(Op::Input(name.to_string()));
        self.inputs.insert(
            name.to_string(),
            InputDecl {
                dims: dims.to_vec(),
                node,
            },
        );
        node
    }

    /// References a parameter by name; repeated references share one node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2NormalizeRows(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// `x · W + b` with `W` of shape `[in, out]` and `b` of shape `[out]`.
    pub fn linear(&mut self, x: NodeId, weight: &str, bias: Option<&str>) -> NodeId {
        let w = self.param(weight);
        let y = self.matmul(x, w);
        match bias {
            Some(b) => {
                let b = self.param(b);
                self.add(y, b)
            }
            None => y,
        }
    }

    pub fn label(&mut self, id: NodeId, label: &str) -> NodeId {
        self.nodes[id.0].label = Some(label.to_string());
        id
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.label(id, name);
        self.outputs.insert(name.to_string(), id);
    }

    pub fn build(self) -> Graph {
        let mut needs_grad = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs_grad[i] = match &node.op {
                Op::Param(_) => true,
                op => op.operands().iter().any(|o| needs_grad[o.0]),
            };
        }
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            params: self.params,
            outputs: self.outputs,
            needs_grad,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, InputDecl>,
    params: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    needs_grad: Vec<bool>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn outputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.outputs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(l) => format!("#{} {} `{}`", id.0, node.op.name(), l),
            None => match &node.op {
                Op::Input(n) | Op::Param(n) => format!("#{} {} `{}`", id.0, node.op.name(), n),
                op => format!("#{} {}", id.0, op.name()),
            },
        }
    }

    fn shape_err(&self, id: NodeId, detail: String) -> Error {
        Error::Shape {
            node: self.describe(id),
            detail,
        }
    }

    /// Mask of the nodes `target` depends on, itself included.
    fn ancestors(&self, target: NodeId) -> Vec<bool> {
        let mut mark = vec![false; target.0 + 1];
        mark[target.0] = true;
        for i in (0..=target.0).rev() {
            if mark[i] {
                for o in self.nodes[i].op.operands() {
                    mark[o.0] = true;
                }
            }
        }
        mark
    }
}

/// Evaluation state for one pass over a [`Graph`].
///
/// Inputs may be fed in stages: nodes are computed on demand and cached, so a
/// caller can read intermediate outputs, derive further inputs from them and
/// continue the same pass.
pub struct Session<'g> {
    graph: &'g Graph,
    values: Vec<Option<Tensor>>,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Self {
            graph,
            values: vec![None; graph.len()],
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn feed(&mut self, name: &str, t: Tensor) -> Result<()> {
        let decl = self
            .graph
            .inputs
            .get(name)
            .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
        let ok = decl.dims.len() == t.shape().len()
            && decl
                .dims
                .iter()
                .zip(t.shape())
                .all(|(d, &s)| d.is_none_or(|d| d == s));
        if !ok {
            return Err(self.graph.shape_err(
                decl.node,
                format!("declared {:?}, fed {:?}", decl.dims, t.shape()),
            ));
        }
        if !t.is_finite() {
            return Err(self.graph.shape_err(decl.node, "non-finite input".into()));
        }
        self.values[decl.node.0] = Some(t);
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Computes `target` and any of its missing dependencies.
    pub fn compute(&mut self, params: &ParamStore, target: NodeId) -> Result<&Tensor> {
        let mark = self.graph.ancestors(target);
        for (i, &marked) in mark.iter().enumerate().take(target.0 + 1) {
            if marked && self.values[i].is_none() {
                let v = self.eval_node(params, NodeId(i))?;
                self.values[i] = Some(v);
            }
        }
        Ok(self.values[target.0].as_ref().expect("computed above"))
    }

    pub fn compute_output(&mut self, params: &ParamStore, name: &str) -> Result<&Tensor> {
        let id = self
            .graph
            .output(name)
            .ok_or_else(|| Error::InvalidArgument(format!("graph has no output `{name}`")))?;
        self.compute(params, id)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("operands are computed before their users")
    }

    fn eval_node(&self, params: &ParamStore, id: NodeId) -> Result<Tensor> {
        let g = self.graph;
        let err = |detail: String| g.shape_err(id, detail);
        let out = match &g.nodes[id.0].op {
            Op::Input(name) => return Err(Error::MissingInput(name.clone())),
            Op::Param(name) => params.value(name)?.clone(),
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let ((m, k), (k2, n)) = match (a.dims2(), b.dims2()) {
                    (Some(x), Some(y)) => (x, y),
                    _ => {
                        return Err(err(format!(
                            "matmul needs rank 2, got {:?} and {:?}",
                            a.shape(),
                            b.shape()
                        )))
                    }
                };
                if k != k2 {
                    return Err(err(format!(
                        "inner dims differ: {:?} · {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                Tensor::matrix(m, n, matmul(a.data(), b.data(), m, k, n))?
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_add = matches!(g.nodes[id.0].op, Op::Add(..));
                let (a, b) = (self.val(*a), self.val(*b));
                let bc = broadcast_kind(a, b).ok_or_else(|| {
                    err(format!(
                        "cannot broadcast {:?} with {:?}",
                        a.shape(),
                        b.shape()
                    ))
                })?;
                let cols = a.cols();
                let mut data = a.data().to_vec();
                for (i, x) in data.iter_mut().enumerate() {
                    let y = bc.pick(b.data(), i, cols);
                    if is_add {
                        *x += y;
                    } else {
                        *x *= y;
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Relu(a) => map(self.val(*a), |x| x.max(0.0)),
            Op::Log(a) => map(self.val(*a), |x| x.max(LOG_FLOOR).ln()),
            Op::L2NormalizeRows(a) => {
                let a = self.val(*a);
                if a.dims2().is_none() {
                    return Err(err(format!("l2norm needs rank 2, got {:?}", a.shape())));
                }
                let cols = a.cols();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(cols) {
                    let n = row
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                        .max(NORM_FLOOR);
                    row.iter_mut().for_each(|x| *x /= n);
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::SoftmaxRows(a) => {
                let a = self.val(*a);
                if a.dims2().is_none() {
                    return Err(err(format!("softmax needs rank 2, got {:?}", a.shape())));
                }
                let cols = a.cols();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(cols) {
                    softmax_in_place(row);
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::ConcatCols(parts) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let rows = ts.first().map(|t| t.rows()).unwrap_or(0);
                if ts.is_empty() || ts.iter().any(|t| t.dims2().is_none() || t.rows() != rows) {
                    let shapes: Vec<_> = ts.iter().map(|t| t.shape().to_vec()).collect();
                    return Err(err(format!(
                        "concat needs rank-2 parts with equal rows, got {shapes:?}"
                    )));
                }
                let cols: usize = ts.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &ts {
                        data.extend_from_slice(t.row_slice(r));
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
        };
        Ok(out)
    }

    /// Back-propagates from the scalar node `output` and *adds* the resulting
    /// gradients to the parameter gradient slots.
    pub fn backward(&self, params: &mut ParamStore, output: NodeId) -> Result<()> {
        let g = self.graph;
        let out = self.value(output).ok_or_else(|| {
            Error::InvalidArgument(format!("{} was not computed", g.describe(output)))
        })?;
        if out.len() != 1 {
            return Err(Error::NonScalarOutput {
                node: g.describe(output),
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if !g.needs_grad[i] {
                continue;
            }
            let y = self.val(NodeId(i));
            let mut acc = |node: NodeId, contrib: Vec<f64>| {
                if !g.needs_grad[node.0] {
                    return;
                }
                match &mut grads[node.0] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot => *slot = Some(contrib),
                }
            };
            match &g.nodes[i].op {
                Op::Input(_) | Op::Constant(_) => {}
                Op::Param(name) => {
                    let slot = params.grad_mut(name)?;
                    slot.data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(s, d)| *s += d);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let (m, k) = av.dims2().expect("checked in forward");
                    let n = bv.cols();
                    if g.needs_grad[a.0] {
                        acc(*a, matmul_nt(&grad, bv.data(), m, n, k));
                    }
                    if g.needs_grad[b.0] {
                        acc(*b, matmul_tn(av.data(), &grad, m, k, n));
                    }
                }
                Op::Add(a, b) | Op::Mul(a, b) => {
                    let is_add = matches!(g.nodes[i].op, Op::Add(..));
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let bc = broadcast_kind(av, bv).expect("checked in forward");
                    let cols = av.cols();
                    if g.needs_grad[a.0] {
                        let ga = if is_add {
                            grad.clone()
                        } else {
                            grad.iter()
                                .enumerate()
                                .map(|(j, d)| d * bc.pick(bv.data(), j, cols))
                                .collect()
                        };
                        acc(*a, ga);
                    }
                    if g.needs_grad[b.0] {
                        let mut gb = vec![0.0; bv.len()];
                        for (j, d) in grad.iter().enumerate() {
                            let contrib = if is_add { *d } else { d * av.data()[j] };
                            gb[bc.index(j, cols)] += contrib;
                        }
                        acc(*b, gb);
                    }
                }
                Op::Relu(a) => {
                    let av = self.val(*a);
                    acc(
                        *a,
                        grad.iter()
                            .zip(av.data())
                            .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Log(a) => {
                    let av = self.val(*a);
                    acc(
                        *a,
                        grad.iter()
                            .zip(av.data())
                            .map(|(d, &x)| if x > LOG_FLOOR { d / x } else { 0.0 })
                            .collect(),
                    );
                }
                Op::L2NormalizeRows(a) => {
                    let av = self.val(*a);
                    let cols = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    for r in 0..av.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let x = &av.data()[span.clone()];
                        let yr = &y.data()[span.clone()];
                        let dr = &grad[span.clone()];
                        let raw = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let out = &mut ga[span];
                        if raw < NORM_FLOOR {
                            out.iter_mut()
                                .zip(dr)
                                .for_each(|(o, d)| *o = d / NORM_FLOOR);
                            continue;
                        }
                        let dot: f64 = dr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        for c in 0..cols {
                            out[c] = (dr[c] - yr[c] * dot) / raw;
                        }
                    }
                    acc(*a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let cols = y.cols();
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let yr = &y.data()[span.clone()];
                        let dr = &grad[span.clone()];
                        let dot: f64 = dr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        for (o, (d, v)) in ga[span].iter_mut().zip(dr.iter().zip(yr)) {
                            *o = v * (d - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::Sum(a) => {
                    let n = self.val(*a).len();
                    acc(*a, vec![grad[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.val(*a).len();
                    acc(*a, vec![grad[0] / n as f64; n]);
                }
                Op::ConcatCols(parts) => {
                    let total = y.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.val(*p);
                        let pc = pv.cols();
                        if g.needs_grad[p.0] {
                            let mut gp = Vec::with_capacity(pv.len());
                            for r in 0..pv.rows() {
                                gp.extend_from_slice(
                                    &grad[r * total + offset..r * total + offset + pc],
                                );
                            }
                            acc(*p, gp);
                        }
                        offset += pc;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Evaluates every named output of `graph` for the given inputs.
pub fn forward(
    graph: &Graph,
    params: &ParamStore,
    inputs: &[(&str, Tensor)],
) -> Result<BTreeMap<String, Tensor>> {
    let mut session = Session::new(graph);
    for (name, t) in inputs {
        session.feed(name, t.clone())?;
    }
    let mut out = BTreeMap::new();
    for (name, id) in graph.outputs() {
        out.insert(name.to_string(), session.compute(params, id)?.clone());
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

impl Broadcast {
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Scalar => 0,
        }
    }

    fn pick(self, b: &[f64], i: usize, cols: usize) -> f64 {
        b[self.index(i, cols)]
    }
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.len() == 1 {
        Some(Broadcast::Scalar)
    } else if a.dims2().is_some() && b.len() == a.cols() && matches!(b.shape(), [_] | [1, _]) {
        Some(Broadcast::Row)
    } else {
        None
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// `[m,k] · [k,n]`. Zero entries of the left operand are skipped, which keeps
/// products with sparse constant operators (neighbour averaging) cheap.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `[m,n] · [k,n]ᵀ`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            out[i * k + kk] = grow
                .iter()
                .zip(&b[kk * n..(kk + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `[m,k]ᵀ · [m,n]`, skipping zeros of the left operand.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &gv) in out[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
    out
}
