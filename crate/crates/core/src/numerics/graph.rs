use std::collections::HashMap;

use super::kernels;
use super::tensor::{dims2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    PadRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in execution order, so index order is a topological
/// order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    leaves: HashMap<u64, Var>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            leaves: HashMap::new(),
            recording: true,
        }
    }

    /// A graph that only evaluates: no leaf requires a gradient.
    pub fn no_grad() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a parameter tensor as a leaf. Binding the same tensor twice
    /// returns the same node, so its gradient is accumulated once.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.leaves.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data.clone(), Op::Leaf, t.requires_grad);
        self.leaves.insert(t.id(), v);
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.node(v).shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (n2, p) = self.dims(b);
        if n != n2 || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, n, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, p], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// x[r×c] + bias[c], broadcast over rows. The only broadcast supported.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            for (o, bj) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    /// Row-wise layer normalization; `eps` is an additive variance floor.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for i in 0..r {
                rstd.push(kernels::layer_norm_row(
                    &xv[i * c..(i + 1) * c],
                    g,
                    b,
                    eps,
                    &mut out[i * c..(i + 1) * c],
                ));
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, rstd },
            rg,
        ))
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Value("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index {
                    index: id,
                    limit: r,
                    context: "embedding_gather".into(),
                });
            }
            out.extend_from_slice(&self.value(table)[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over pre-projected q, k, v (each n×d).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("causal_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Value(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; heads * n * n];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                for i in 0..n {
                    let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    kernels::attend_row(&qv[i * d..(i + 1) * d], kv, vv, i, d, h * dh, dh, p, o);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![n, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Causal attention weights of every head: `heads × n × n`, zero above the diagonal.
    pub fn attention_weights(&self, attn: Var) -> Option<&[f64]> {
        match &self.node(attn).op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Appends zero rows until `x` has exactly `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r > rows {
            return Err(Error::Length { len: r, max: rows });
        }
        let mut out = self.value(x).to_vec();
        out.resize(rows * c, 0.0);
        let rg = self.rg(x);
        Ok(self.push(vec![rows, c], out, Op::PadRows(x), rg))
    }

    /// Mean over unmasked positions of −log softmax(logits)[target].
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, vocab) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Value("no unmasked target positions".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::Index {
                        index: t,
                        limit: vocab,
                        context: "cross_entropy target".into(),
                    });
                }
                loss += kernels::log_sum_exp(row) - row[t];
            }
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.cross_entropy_masked(logits, &t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Value("mean of an empty list".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    /// Reverse sweep from a scalar. Returns how many nodes received a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(visited)
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let dims = |v: &Var| dims2(&nodes[v.0].shape);
        let val = |v: &Var| nodes[v.0].value.as_slice();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = dims(a);
                let (_, p) = dims(b);
                if let Some(ga) = acc(nodes, grads, *a) {
                    kernels::matmul_bt_acc(g, val(b), ga, m, n, p);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    kernels::matmul_at_acc(val(a), g, gb, m, n, p);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = val(bias).len();
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::Relu(x) => {
                let xv = val(x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (r, c) = dims(x);
                let xv = val(x);
                let gv = val(gain);
                let mut xhat = vec![0.0; r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * rstd[i];
                    }
                }
                if let Some(gg) = acc(nodes, grads, *gain) {
                    for i in 0..r * c {
                        gg[i % c] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for i in 0..r * c {
                        gb[i % c] += g[i];
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat[i * c..(i + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (_, c) = dims(table);
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                if rg(q) || rg(k) || rg(v) {
                    let (dq, dk, dv) =
                        attention_backward(g, val(q), val(k), val(v), dims(q), *heads, probs);
                    for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if let Some(gv) = acc(nodes, grads, var) {
                            gv.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::PadRows(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let len = gx.len();
                    gx.iter_mut().zip(&g[..len]).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, vocab) = dims(logits);
                let scale = g[0] / *count as f64;
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * vocab + j] += scale * (probs[i * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of bound leaves into the tensors' own grad buffers.
    /// Tensors that were never bound are left untouched.
    pub fn accumulate_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) {
        for t in params {
            let Some(&v) = self.leaves.get(&t.id()) else {
                continue;
            };
            if let Some(g) = self.grad(v) {
                t.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

type AttnGrads = (Vec<f64>, Vec<f64>, Vec<f64>);

fn attention_backward(
    g: &[f64],
    qv: &[f64],
    kv: &[f64],
    vv: &[f64],
    (n, d): (usize, usize),
    heads: usize,
    probs: &[f64],
) -> AttnGrads {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let go = &g[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &vv[j * d + off..j * d + off + dh];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                for (t, &gt) in go.iter().enumerate() {
                    dv[j * d + off + t] += p[j] * gt;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                for t in 0..dh {
                    dq[i * d + off + t] += ds * kv[j * d + off + t];
                    dk[j * d + off + t] += ds * qv[i * d + off + t];
                }
            }
        }
    }
    (dq, dk, dv)
}
