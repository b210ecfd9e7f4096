//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from named leaves and a fixed set of dense
//! operations, then evaluated against any number of [`Bindings`]. Shapes are
//! checked while the graph is built, so evaluation only has to confirm that
//! the bound tensors match the declared leaf shapes.
//!
//! Row-wise operations (`softmax`, `log_softmax`, the `*_rows` losses) treat
//! the last extent as columns; per-row losses produce an `n x 1` column.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { input: NodeId, scale: f64, shift: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MseRows(NodeId, NodeId),
    CrossEntropyRows { logits: NodeId, targets: NodeId },
    KlRows { p: NodeId, q: NodeId },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf(_) => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | MseRows(a, b) => {
                vec![a, b]
            }
            CrossEntropyRows { logits, targets } => vec![logits, targets],
            KlRows { p, q } => vec![p, q],
            Affine { input, .. } => vec![input],
            Relu(a) | Sigmoid(a) | Exp(a) | Log(a) | Abs(a) | Softmax(a) | LogSoftmax(a)
            | SumRows(a) | Sum(a) | Mean(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Smallest positive value used inside logarithms and divisions by probabilities.
const TINY: f64 = f64::MIN_POSITIVE;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Designates the node returned by [`evaluate`] and differentiated by [`gradient`].
    pub fn set_output(&mut self, id: NodeId) {
        assert!(id.0 < self.nodes.len(), "node {id:?} is not part of this graph");
        self.output = Some(id);
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| shape_err(format!("node {id:?} is not part of this graph")))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("leaf `{name}` has invalid shape {shape:?}")));
        }
        if self.leaves.contains_key(&name) {
            return Err(Error::Config(format!("leaf `{name}` declared twice")));
        }
        let id = self.push(Op::Leaf(name.clone()), shape.to_vec());
        self.leaves.insert(name, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa != sb {
            return Err(shape_err(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(bias)?.to_vec());
        let (brows, bcols) = rows_cols(&sb);
        if brows != 1 || bcols != *sa.last().unwrap() {
            return Err(shape_err(format!("bias {sb:?} does not fit rows of {sa:?}")));
        }
        Ok(self.push(Op::AddRow(a, bias), sa))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Affine { input: a, scale, shift }, s))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(op, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Abs(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::LogSoftmax(a))
    }

    /// Sums each row into an `n x 1` column.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, _) = rows_cols(self.check(a)?);
        Ok(self.push(Op::SumRows(a), vec![r, 1]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), vec![1]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Mean(a), vec![1]))
    }

    /// Mean squared difference of each row pair, as an `n x 1` column.
    pub fn mse_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mse")?;
        let (r, _) = rows_cols(&s);
        Ok(self.push(Op::MseRows(a, b), vec![r, 1]))
    }

    /// `-sum_j t_j log softmax(z)_j` per row; targets are probability rows.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let s = self.same_shape(logits, targets, "cross_entropy")?;
        let (r, _) = rows_cols(&s);
        Ok(self.push(Op::CrossEntropyRows { logits, targets }, vec![r, 1]))
    }

    /// `KL(p || q) = sum_j p_j (ln p_j - ln q_j)` per row, with `0 ln 0 = 0`.
    pub fn kl_rows(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let s = self.same_shape(p, q, "kl_divergence")?;
        let (r, _) = rows_cols(&s);
        Ok(self.push(Op::KlRows { p, q }, vec![r, 1]))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let rows = self.mse_rows(a, b)?;
        self.mean(rows)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let rows = self.cross_entropy_rows(logits, targets)?;
        self.mean(rows)
    }

    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let rows = self.kl_rows(p, q)?;
        self.mean(rows)
    }
}

/// Leaf name to tensor assignments for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Gradients of a scalar objective keyed by leaf name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.entries
    }
}

/// All node values from one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    values: Vec<Tensor>,
    output: Option<NodeId>,
}

impl Trace {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Value of the graph's designated output.
    pub fn output(&self) -> &Tensor {
        &self.values[self.output.expect("graph has no output").0]
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p.ln() - q.max(TINY).ln())
    }
}

fn compute(op: &Op, shape: &[usize], vals: &[Tensor]) -> Vec<f64> {
    let v = |id: NodeId| vals[id.0].data();
    let (rows, cols) = rows_cols(shape);
    match *op {
        Op::Leaf(_) => unreachable!("leaves are bound, not computed"),
        Op::MatMul(a, b) => {
            let (sa, sb) = (vals[a.0].shape(), vals[b.0].shape());
            let mut out = vec![0.0; sa[0] * sb[1]];
            matmul_into(v(a), v(b), &mut out, sa[0], sa[1], sb[1]);
            out
        }
        Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
        Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
        Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
        Op::AddRow(a, bias) => {
            let bias = v(bias);
            v(a).chunks(cols).flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b)).collect()
        }
        Op::Affine { input, scale, shift } => v(input).iter().map(|x| scale * x + shift).collect(),
        Op::Relu(a) => v(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        Op::Sigmoid(a) => v(a).iter().map(|&x| sigmoid(x)).collect(),
        Op::Exp(a) => v(a).iter().map(|x| x.exp()).collect(),
        Op::Log(a) => v(a).iter().map(|x| x.max(TINY).ln()).collect(),
        Op::Abs(a) => v(a).iter().map(|x| x.abs()).collect(),
        Op::Softmax(a) => {
            let mut out = vec![0.0; rows * cols];
            for (z, o) in v(a).chunks(cols).zip(out.chunks_mut(cols)) {
                softmax_row(z, o);
            }
            out
        }
        Op::LogSoftmax(a) => {
            let mut out = vec![0.0; rows * cols];
            for (z, o) in v(a).chunks(cols).zip(out.chunks_mut(cols)) {
                log_softmax_row(z, o);
            }
            out
        }
        Op::SumRows(a) => {
            let c = vals[a.0].cols();
            v(a).chunks(c).map(|r| r.iter().sum()).collect()
        }
        Op::Sum(a) => vec![v(a).iter().sum()],
        Op::Mean(a) => vec![v(a).iter().sum::<f64>() / v(a).len() as f64],
        Op::MseRows(a, b) => {
            let c = vals[a.0].cols();
            v(a).chunks(c)
                .zip(v(b).chunks(c))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / c as f64)
                .collect()
        }
        Op::CrossEntropyRows { logits, targets } => {
            let c = vals[logits.0].cols();
            let mut ls = vec![0.0; c];
            v(logits)
                .chunks(c)
                .zip(v(targets).chunks(c))
                .map(|(z, t)| {
                    log_softmax_row(z, &mut ls);
                    -t.iter().zip(&ls).map(|(ti, li)| ti * li).sum::<f64>()
                })
                .collect()
        }
        Op::KlRows { p, q } => {
            let c = vals[p.0].cols();
            v(p).chunks(c)
                .zip(v(q).chunks(c))
                .map(|(pr, qr)| pr.iter().zip(qr).map(|(&a, &b)| kl_term(a, b)).sum())
                .collect()
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the forward pass and keeps every intermediate value.
pub fn forward(graph: &Graph, bindings: &Bindings) -> Result<Trace> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let t = match &node.op {
            Op::Leaf(name) => {
                let bound = bindings.get(name).ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(shape_err(format!(
                        "leaf `{name}` declared {:?}, bound {:?}",
                        node.shape,
                        bound.shape()
                    )));
                }
                bound.clone()
            }
            op => Tensor::new(node.shape.clone(), compute(op, &node.shape, &values))?,
        };
        values.push(t);
    }
    Ok(Trace { values, output: graph.output })
}

/// Value of the graph's output node.
pub fn evaluate(graph: &Graph, bindings: &Bindings) -> Result<Tensor> {
    let out = graph.output.ok_or_else(|| Error::Config("graph has no output".into()))?;
    let mut trace = forward(graph, bindings)?;
    Ok(trace.values.swap_remove(out.0))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass over an existing trace.
pub fn backward(graph: &Graph, trace: &Trace, wrt: &[&str]) -> Result<GradientMap> {
    let out = graph.output.ok_or_else(|| Error::Config("graph has no output".into()))?;
    let out_shape = &graph.nodes[out.0].shape;
    if out_shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarObjective(out_shape.clone()));
    }
    let mut targets = Vec::with_capacity(wrt.len());
    for name in wrt {
        targets.push(graph.leaf_id(name).ok_or_else(|| Error::UnknownLeaf(name.to_string()))?);
    }

    // Only propagate through nodes that lead to a requested leaf.
    let n = graph.nodes.len();
    let mut needs = vec![false; n];
    for t in &targets {
        needs[t.0] = true;
    }
    for i in 0..n {
        if !needs[i] && graph.nodes[i].op.operands().iter().any(|o| needs[o.0]) {
            needs[i] = true;
        }
    }

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[out.0] = Some(vec![1.0]);
    let vals = &trace.values;
    for i in (0..n).rev() {
        if !needs[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let node = &graph.nodes[i];
        if let Op::Leaf(_) = node.op {
            grads[i] = Some(g);
            continue;
        }
        let y = vals[i].data();
        let (rows, cols) = rows_cols(&node.shape);
        let mut send = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if needs[id.0] {
                let len = vals[id.0].len();
                f(accumulate(&mut grads[id.0], len));
            }
        };
        match node.op {
            Op::Leaf(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (vals[a.0].shape().to_vec(), vals[b.0].shape().to_vec());
                let (nr, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                send(a, &mut |da| {
                    for i in 0..nr {
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            let grow = &g[i * m..(i + 1) * m];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                send(b, &mut |db| {
                    for i in 0..nr {
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[i * m..(i + 1) * m];
                            for (d, gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(a, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g));
                send(b, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                send(a, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g));
                send(b, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                send(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                send(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                send(a, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += g));
                send(bias, &mut |d| {
                    for r in g.chunks(cols) {
                        d.iter_mut().zip(r).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Affine { input, scale, .. } => {
                send(input, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += scale * g));
            }
            Op::Relu(a) => {
                let x = vals[a.0].data();
                send(a, &mut |d| {
                    for j in 0..d.len() {
                        if x[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => send(a, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            Op::Exp(a) => send(a, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * y[j];
                }
            }),
            Op::Log(a) => {
                let x = vals[a.0].data();
                send(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / x[j].max(TINY);
                    }
                });
            }
            Op::Abs(a) => {
                let x = vals[a.0].data();
                send(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * sign(x[j]);
                    }
                });
            }
            Op::Softmax(a) => send(a, &mut |d| {
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LogSoftmax(a) => send(a, &mut |d| {
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d[r * cols + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }),
            Op::SumRows(a) => {
                let c = vals[a.0].cols();
                send(a, &mut |d| {
                    for (r, dr) in d.chunks_mut(c).enumerate() {
                        dr.iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
            Op::Sum(a) => send(a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / vals[a.0].len() as f64;
                send(a, &mut |d| d.iter_mut().for_each(|v| *v += scale));
            }
            Op::MseRows(a, b) => {
                let c = vals[a.0].cols();
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                let coef = |j: usize| 2.0 * g[j / c] * (av[j] - bv[j]) / c as f64;
                send(a, &mut |d| (0..d.len()).for_each(|j| d[j] += coef(j)));
                send(b, &mut |d| (0..d.len()).for_each(|j| d[j] -= coef(j)));
            }
            Op::CrossEntropyRows { logits, targets } => {
                let c = vals[logits.0].cols();
                let (zv, tv) = (vals[logits.0].data(), vals[targets.0].data());
                let mut ls = vec![0.0; c];
                let mut dz = vec![0.0; zv.len()];
                let mut dt = vec![0.0; zv.len()];
                for r in 0..zv.len() / c {
                    let z = &zv[r * c..(r + 1) * c];
                    let t = &tv[r * c..(r + 1) * c];
                    log_softmax_row(z, &mut ls);
                    let tsum: f64 = t.iter().sum();
                    for j in 0..c {
                        dz[r * c + j] = g[r] * (ls[j].exp() * tsum - t[j]);
                        dt[r * c + j] = -g[r] * ls[j];
                    }
                }
                send(logits, &mut |d| d.iter_mut().zip(&dz).for_each(|(d, v)| *d += v));
                send(targets, &mut |d| d.iter_mut().zip(&dt).for_each(|(d, v)| *d += v));
            }
            Op::KlRows { p, q } => {
                let c = vals[p.0].cols();
                let (pv, qv) = (vals[p.0].data(), vals[q.0].data());
                send(p, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j / c] * (pv[j].max(TINY).ln() - qv[j].max(TINY).ln() + 1.0);
                    }
                });
                send(q, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j / c] * pv[j] / qv[j].max(TINY);
                    }
                });
            }
        }
    }

    let mut entries = BTreeMap::new();
    for (name, id) in wrt.iter().zip(&targets) {
        let shape = graph.nodes[id.0].shape.clone();
        let data = grads[id.0].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        entries.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    Ok(GradientMap { entries })
}

/// Forward and reverse pass in one call.
pub fn value_and_gradient(
    graph: &Graph,
    bindings: &Bindings,
    wrt: &[&str],
) -> Result<(Trace, GradientMap)> {
    let trace = forward(graph, bindings)?;
    let grads = backward(graph, &trace, wrt)?;
    Ok((trace, grads))
}

/// Exact reverse-mode gradients of the scalar output with respect to `wrt`.
pub fn gradient(graph: &Graph, bindings: &Bindings, wrt: &[&str]) -> Result<GradientMap> {
    value_and_gradient(graph, bindings, wrt).map(|(_, g)| g)
}

/// Largest relative disagreement between reverse-mode gradients and
/// central differences with step `h`, over every component of `wrt`.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings,
    wrt: &[&str],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = gradient(graph, bindings, wrt)?;
    let mut worst: f64 = 0.0;
    for name in wrt {
        let base = bindings.get(name).ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
        let grad = analytic.get(name).expect("requested gradient present");
        for k in 0..base.len() {
            let mut probe = base.clone();
            probe.data_mut()[k] = base.data()[k] + h;
            let plus = {
                let mut b = bindings.clone();
                b.bind(*name, &probe);
                evaluate(graph, &b)?.item()
            };
            probe.data_mut()[k] = base.data()[k] - h;
            let minus = {
                let mut b = bindings.clone();
                b.bind(*name, &probe);
                evaluate(graph, &b)?.item()
            };
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[k] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let z = g.leaf("z", &[2]).unwrap();
        let s = g.softmax(z).unwrap();
        g.set_output(s);
        let zt = t(&[2], &[0.0, 0.0]);
        let mut b = Bindings::new();
        b.bind("z", &zt);
        assert_eq!(evaluate(&g, &b).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut g = Graph::new();
        let p = g.leaf("p", &[2, 3]).unwrap();
        let q = g.leaf("q", &[2, 3]).unwrap();
        let kl = g.kl_divergence(p, q).unwrap();
        g.set_output(kl);
        let pt = t(&[2, 3], &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let mut b = Bindings::new();
        b.bind("p", &pt).bind("q", &pt);
        assert_eq!(evaluate(&g, &b).unwrap().item(), 0.0);
    }

    #[test]
    fn mse_with_itself_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 2]).unwrap();
        let l = g.mse(x, x).unwrap();
        g.set_output(l);
        let xt = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let mut b = Bindings::new();
        b.bind("x", &xt);
        let grads = gradient(&g, &b, &["x"]).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 3]).unwrap();
        let w = g.leaf("w", &[3, 1]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.set_output(s);
        let (xt, wt) = (t(&[1, 3], &[1.0, 2.0, 3.0]), t(&[3, 1], &[0.3, -0.1, 0.7]));
        let mut b = Bindings::new();
        b.bind("x", &xt).bind("w", &wt);
        let grads = gradient(&g, &b, &["w"]).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(finite_difference_check(&g, &b, &["w", "x"], 1e-2).unwrap() < 1e-8);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.leaf("a", &[2, 3]).unwrap();
        let b = g.leaf("b", &[2, 3]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(g.leaf("a", &[1]).is_err());
        let s = g.add(a, b).unwrap();
        g.set_output(s);
        let at = Tensor::zeros(&[2, 3]);
        let mut bind = Bindings::new();
        bind.bind("a", &at);
        assert!(matches!(evaluate(&g, &bind), Err(Error::UnboundLeaf(n)) if n == "b"));
        let wrong = Tensor::zeros(&[3, 2]);
        bind.bind("b", &wrong);
        assert!(matches!(evaluate(&g, &bind), Err(Error::Shape(_))));
        bind.bind("b", &at);
        assert!(matches!(gradient(&g, &bind, &["a"]), Err(Error::NonScalarObjective(_))));
        assert!(finite_difference_check(&g, &bind, &["a"], 0.0).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3]).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.set_output(s);
        let xt = t(&[3], &[-1.0, 0.0, 2.0]);
        let mut b = Bindings::new();
        b.bind("x", &xt);
        assert_eq!(gradient(&g, &b, &["x"]).unwrap().get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
