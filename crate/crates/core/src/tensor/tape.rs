//! Wengert tape: every operation appends a node whose inputs already exist,
//! so reverse replay in index order is a valid topological traversal.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::attention::AttentionLayout;
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    AssembleRows {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    MaskedSoftmaxRows(Var),
    AttentionProbs {
        q: Var,
        k: Var,
        layout: Arc<AttentionLayout>,
    },
    AttentionApply {
        probs: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
    },
    ClassMass {
        probs: Var,
        layout: Arc<AttentionLayout>,
    },
    ScaleRowsByColumn {
        x: Var,
        weights: Var,
        column: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        softmax: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Single-writer recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Records a leaf; it participates in differentiation iff `tensor.tracked()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.tracked();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_tracked(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_tracked(false))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let _ = name;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        // Subgraphs that no tracked leaf reaches keep no backward state.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.values(), tb.values(), &mut out, 0.0);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, ta.values(), tb.values(), &mut out, 0.0);
        self.push("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let values = ta.values().iter().zip(tb.values()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(name, Tensor::from_parts(shape, values), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let values = t.values().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), values);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tb.len() != tx.shape()[1] {
            return Err(shape_err("add_row_vector", tx, tb));
        }
        let d = tb.len();
        let mut values = tx.values().to_vec();
        for row in values.chunks_mut(d) {
            row.iter_mut().zip(tb.values()).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), values);
        self.push("add_row_vector", value, Op::AddRowVector(x, bias), &[x, bias])
    }

    /// Row-wise layer normalization with affine parameters of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims("layer_norm", x)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", self.value(x), tg));
        }
        let tx = self.value(x);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &tx.values()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.values()[c] + tb.values()[c];
            }
        }
        let value = Tensor::from_parts(vec![n, d], out);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), values);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Output row `r` is row `index[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", table)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("row index {bad} out of range for {n} rows")));
        }
        let t = self.value(table);
        let mut values = Vec::with_capacity(index.len() * d);
        for &i in index {
            values.extend_from_slice(&t.values()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![index.len(), d], values);
        let op = Op::GatherRows {
            table,
            index: index.to_vec(),
        };
        self.push("gather_rows", value, op, &[table])
    }

    /// Output row `r` is row `picks[r].1` of `sources[picks[r].0]`.
    pub fn assemble_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let mut width = None;
        for &s in sources {
            let (_, d) = self.matrix_dims("assemble_rows", s)?;
            if *width.get_or_insert(d) != d {
                return Err(shape_err("assemble_rows", self.value(sources[0]), self.value(s)));
            }
        }
        let d = width.ok_or_else(|| Error::Input("assemble_rows needs a source".into()))?;
        let mut values = Vec::with_capacity(picks.len() * d);
        for &(s, r) in picks {
            let src = sources
                .get(s)
                .map(|&v| self.value(v))
                .ok_or_else(|| Error::Input(format!("source {s} out of range")))?;
            if r >= src.rows() {
                return Err(Error::Input(format!("row {r} out of range for source {s}")));
            }
            values.extend_from_slice(src.row(r));
        }
        let value = Tensor::from_parts(vec![picks.len(), d], values);
        let op = Op::AssembleRows {
            sources: sources.to_vec(),
            picks: picks.to_vec(),
        };
        self.push("assemble_rows", value, op, sources)
    }

    /// Row softmax over allowed positions; masked entries are exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.matrix_dims("masked_softmax_rows", x)?;
        if mask.len() != n * d {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: vec![n, d],
                rhs: vec![mask.len()],
            });
        }
        let t = self.value(x);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &t.values()[r * d..(r + 1) * d];
            let allowed = &mask[r * d..(r + 1) * d];
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for c in 0..d {
                if allowed[c] {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::from_parts(vec![n, d], out);
        self.push("masked_softmax_rows", value, Op::MaskedSoftmaxRows(x), &[x])
    }

    /// Packed attention probabilities for `q: n_q×w`, `k: n_k×w` split into
    /// `layout.heads()` column blocks.
    pub fn attention_probs(&mut self, q: Var, k: Var, layout: &Arc<AttentionLayout>) -> Result<Var> {
        let (nq, wq) = self.matrix_dims("attention_probs", q)?;
        let (nk, wk) = self.matrix_dims("attention_probs", k)?;
        if wq != wk || nq != layout.n_query_rows() || nk != layout.n_key_rows() || wq % layout.heads() != 0 {
            return Err(shape_err("attention_probs", self.value(q), self.value(k)));
        }
        let probs = layout.probs_forward(self.value(q).values(), self.value(k).values(), wq);
        let value = Tensor::from_parts(vec![probs.len()], probs);
        let op = Op::AttentionProbs {
            q,
            k,
            layout: Arc::clone(layout),
        };
        self.push("attention_probs", value, op, &[q, k])
    }

    /// Attention-weighted sum of value rows, producing `n_q×w`.
    pub fn attention_apply(&mut self, probs: Var, v: Var, layout: &Arc<AttentionLayout>) -> Result<Var> {
        let (nv, w) = self.matrix_dims("attention_apply", v)?;
        if self.value(probs).len() != layout.packed_len() || nv != layout.n_key_rows() || w % layout.heads() != 0 {
            return Err(shape_err("attention_apply", self.value(probs), self.value(v)));
        }
        let out = layout.apply_forward(self.value(probs).values(), self.value(v).values(), w);
        let value = Tensor::from_parts(vec![layout.n_query_rows(), w], out);
        let op = Op::AttentionApply {
            probs,
            v,
            layout: Arc::clone(layout),
        };
        self.push("attention_apply", value, op, &[probs, v])
    }

    /// Head-averaged attention mass each query places on each key class.
    pub fn class_mass(&mut self, probs: Var, layout: &Arc<AttentionLayout>) -> Result<Var> {
        if self.value(probs).len() != layout.packed_len() || layout.n_classes() == 0 {
            return Err(Error::Contract("class_mass: layout does not match probabilities".into()));
        }
        let out = layout.class_mass_forward(self.value(probs).values());
        let value = Tensor::from_parts(vec![layout.n_query_rows(), layout.n_classes()], out);
        let op = Op::ClassMass {
            probs,
            layout: Arc::clone(layout),
        };
        self.push("class_mass", value, op, &[probs])
    }

    /// `out[r] = weights[r, column] * x[r]`.
    pub fn scale_rows_by_column(&mut self, x: Var, weights: Var, column: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("scale_rows_by_column", x)?;
        let (nw, c) = self.matrix_dims("scale_rows_by_column", weights)?;
        if nw != n || column >= c {
            return Err(shape_err("scale_rows_by_column", self.value(x), self.value(weights)));
        }
        let (tx, tw) = (self.value(x), self.value(weights));
        let mut out = tx.values().to_vec();
        for r in 0..n {
            let w = tw.values()[r * c + column];
            out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= w);
        }
        let value = Tensor::from_parts(vec![n, d], out);
        let op = Op::ScaleRowsByColumn { x, weights, column };
        self.push("scale_rows_by_column", value, op, &[x, weights])
    }

    /// Mean next-token cross-entropy over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of {v}")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyTarget);
        }
        let t = self.value(logits);
        let mut softmax = vec![0.0; n * v];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = &t.values()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sm = &mut softmax[r * v..(r + 1) * v];
            let mut sum = 0.0;
            for (s, x) in sm.iter_mut().zip(row) {
                *s = (x - max).exp();
                sum += *s;
            }
            sm.iter_mut().for_each(|s| *s /= sum);
            total += sum.ln() + max - row[target];
        }
        let value = Tensor::scalar(total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            softmax,
            count,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).values().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Reverse replay from a scalar `loss`. Every tracked leaf receives a
    /// gradient; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.tracked() {
                let shape = node.value.shape().to_vec();
                let values = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(Var(idx), Tensor::from_parts(shape, values));
            }
        }
        Ok(Gradients { map })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.grad_slot(grads, *a) {
                    gemm_nt(m, n, k, g, tb.values(), da, 1.0);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    gemm_tn(k, m, n, ta.values(), g, db, 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(da) = self.grad_slot(grads, *a) {
                    gemm_nn(m, n, k, g, tb.values(), da, 1.0);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    gemm_tn(n, m, k, g, ta.values(), db, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
                }
            }
            Op::AddRowVector(x, bias) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    let dim = db.len();
                    for row in g.chunks(dim) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gam = val(*gamma);
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            dh[c] = grow[c] * gam[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * hrow[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        *d += g * gelu_parts(*xv).1;
                    }
                }
            }
            Op::GatherRows { table, index } => {
                if let Some(dt) = self.grad_slot(grads, *table) {
                    let d = g.len() / index.len().max(1);
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut dt[i * d..(i + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::AssembleRows { sources, picks } => {
                let d = node.value.cols();
                for (s, &src) in sources.iter().enumerate() {
                    if let Some(ds) = self.grad_slot(grads, src) {
                        for (r, &(ps, pr)) in picks.iter().enumerate() {
                            if ps == s {
                                let dst = &mut ds[pr * d..(pr + 1) * d];
                                dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let d = node.value.cols();
                    for ((dxr, yr), gr) in dx.chunks_mut(d).zip(node.value.values().chunks(d)).zip(g.chunks(d)) {
                        let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..d {
                            dxr[c] += yr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::AttentionProbs { q, k, layout } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let w = tq.cols();
                let mut dq = self.nodes[q.0].needs_grad.then(|| vec![0.0; tq.len()]);
                let mut dk = self.nodes[k.0].needs_grad.then(|| vec![0.0; tk.len()]);
                layout.probs_backward(
                    node.value.values(),
                    g,
                    tq.values(),
                    tk.values(),
                    w,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                for (v, buf) in [(*q, dq), (*k, dk)] {
                    if let (Some(dst), Some(buf)) = (self.grad_slot(grads, v), buf) {
                        dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::AttentionApply { probs, v, layout } => {
                let (tp, tv) = (self.value(*probs), self.value(*v));
                let w = tv.cols();
                let mut dp = self.nodes[probs.0].needs_grad.then(|| vec![0.0; tp.len()]);
                let mut dv = self.nodes[v.0].needs_grad.then(|| vec![0.0; tv.len()]);
                layout.apply_backward(tp.values(), tv.values(), g, w, dp.as_deref_mut(), dv.as_deref_mut());
                for (var, buf) in [(*probs, dp), (*v, dv)] {
                    if let (Some(dst), Some(buf)) = (self.grad_slot(grads, var), buf) {
                        dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ClassMass { probs, layout } => {
                if let Some(dp) = self.grad_slot(grads, *probs) {
                    layout.class_mass_backward(g, dp);
                }
            }
            Op::ScaleRowsByColumn { x, weights, column } => {
                let (tx, tw) = (self.value(*x), self.value(*weights));
                let (d, c) = (tx.cols(), tw.cols());
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for r in 0..tx.rows() {
                        let w = tw.values()[r * c + column];
                        for j in 0..d {
                            dx[r * d + j] += w * g[r * d + j];
                        }
                    }
                }
                if let Some(dw) = self.grad_slot(grads, *weights) {
                    for r in 0..tx.rows() {
                        let dot: f64 = g[r * d..(r + 1) * d].iter().zip(tx.row(r)).map(|(a, b)| a * b).sum();
                        dw[r * c + column] += dot;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
                count,
            } => {
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / *count as f64;
                    for (r, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        let row = &mut dl[r * v..(r + 1) * v];
                        for c in 0..v {
                            row[c] += scale * softmax[r * v + c];
                        }
                        row[target] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
