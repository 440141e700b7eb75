// Packed multi-head attention kernels.
//
// Query rows and key rows are partitioned into independent groups (one group
// per sequence in a packed batch). Inside a group, query `i` may attend to key
// `j` only when `key_pos[j] <= query_pos[i]`. Probabilities are stored densely
// per group as `[head][query][key]`, inadmissible entries exactly zero. A
// query row with no admissible key gets an all-zero probability row.

use crate::error::{Error, Result};

/// One independent block of queries and keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionGroup {
    /// Row indices into the query matrix.
    pub query_rows: Vec<usize>,
    /// Absolute sequence position of each query.
    pub query_pos: Vec<usize>,
    /// Row indices into the key/value matrices.
    pub key_rows: Vec<usize>,
    /// Absolute sequence position of each key.
    pub key_pos: Vec<usize>,
    /// Segment class of each key (empty when unused).
    pub key_class: Vec<usize>,
}

impl AttentionGroup {
    fn admissible(&self, qi: usize, kj: usize) -> bool {
        self.key_pos[kj] <= self.query_pos[qi]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    groups: Vec<AttentionGroup>,
    offsets: Vec<usize>,
    heads: usize,
    n_query_rows: usize,
    n_key_rows: usize,
    n_classes: usize,
    total: usize,
}

impl AttentionLayout {
    pub fn new(
        groups: Vec<AttentionGroup>,
        heads: usize,
        n_query_rows: usize,
        n_key_rows: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Contract("attention needs at least one head".into()));
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut total = 0;
        for (g, group) in groups.iter().enumerate() {
            if group.query_rows.len() != group.query_pos.len()
                || group.key_rows.len() != group.key_pos.len()
            {
                return Err(Error::Input(format!("attention group {g}: row/position length mismatch")));
            }
            if !group.key_class.is_empty() && group.key_class.len() != group.key_rows.len() {
                return Err(Error::Input(format!("attention group {g}: key class length mismatch")));
            }
            if group.query_rows.iter().any(|&r| r >= n_query_rows)
                || group.key_rows.iter().any(|&r| r >= n_key_rows)
                || group.key_class.iter().any(|&c| c >= n_classes.max(1))
            {
                return Err(Error::Input(format!("attention group {g}: index out of range")));
            }
            offsets.push(total);
            total += heads * group.query_rows.len() * group.key_rows.len();
        }
        Ok(AttentionLayout {
            groups,
            offsets,
            heads,
            n_query_rows,
            n_key_rows,
            n_classes,
            total,
        })
    }

    pub fn groups(&self) -> &[AttentionGroup] {
        &self.groups
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n_query_rows(&self) -> usize {
        self.n_query_rows
    }

    pub fn n_key_rows(&self) -> usize {
        self.n_key_rows
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Length of the packed probability buffer.
    pub fn packed_len(&self) -> usize {
        self.total
    }

    /// Dense `[head][query][key]` block of group `g` inside a packed buffer.
    pub fn block<'a>(&self, probs: &'a [f64], g: usize) -> &'a [f64] {
        let group = &self.groups[g];
        let len = self.heads * group.query_rows.len() * group.key_rows.len();
        &probs[self.offsets[g]..self.offsets[g] + len]
    }

    pub(crate) fn probs_forward(&self, q: &[f64], k: &[f64], width: usize) -> Vec<f64> {
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; self.total];
        let mut scores = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let (nq, nk) = (group.query_rows.len(), group.key_rows.len());
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for qi in 0..nq {
                    let qrow = &q[group.query_rows[qi] * width..][cols.clone()];
                    let base = self.offsets[g] + (h * nq + qi) * nk;
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for kj in 0..nk {
                        if group.admissible(qi, kj) {
                            let krow = &k[group.key_rows[kj] * width..][cols.clone()];
                            let s = dot(qrow, krow) * scale;
                            max = max.max(s);
                            scores.push((kj, s));
                        }
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    let mut sum = 0.0;
                    for (kj, s) in scores.iter() {
                        let e = (s - max).exp();
                        probs[base + kj] = e;
                        sum += e;
                    }
                    for (kj, _) in scores.iter() {
                        probs[base + kj] /= sum;
                    }
                }
            }
        }
        probs
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn probs_backward(
        &self,
        probs: &[f64],
        dprobs: &[f64],
        q: &[f64],
        k: &[f64],
        width: usize,
        mut dq: Option<&mut [f64]>,
        mut dk: Option<&mut [f64]>,
    ) {
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dscore = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let (nq, nk) = (group.query_rows.len(), group.key_rows.len());
            for h in 0..self.heads {
                let c0 = h * dh;
                for qi in 0..nq {
                    let base = self.offsets[g] + (h * nq + qi) * nk;
                    let p = &probs[base..base + nk];
                    let dp = &dprobs[base..base + nk];
                    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                    dscore.clear();
                    dscore.extend(p.iter().zip(dp).map(|(pj, dpj)| pj * (dpj - inner) * scale));
                    let qr = group.query_rows[qi] * width + c0;
                    if let Some(dq) = dq.as_deref_mut() {
                        let dqrow = &mut dq[qr..qr + dh];
                        for kj in 0..nk {
                            if dscore[kj] != 0.0 {
                                let kr = group.key_rows[kj] * width + c0;
                                axpy(dscore[kj], &k[kr..kr + dh], dqrow);
                            }
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let qrow = &q[qr..qr + dh];
                        for kj in 0..nk {
                            if dscore[kj] != 0.0 {
                                let kr = group.key_rows[kj] * width + c0;
                                axpy(dscore[kj], qrow, &mut dk[kr..kr + dh]);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn apply_forward(&self, probs: &[f64], v: &[f64], width: usize) -> Vec<f64> {
        let dh = width / self.heads;
        let mut out = vec![0.0; self.n_query_rows * width];
        for (g, group) in self.groups.iter().enumerate() {
            let (nq, nk) = (group.query_rows.len(), group.key_rows.len());
            for h in 0..self.heads {
                let c0 = h * dh;
                for qi in 0..nq {
                    let base = self.offsets[g] + (h * nq + qi) * nk;
                    let or = group.query_rows[qi] * width + c0;
                    let orow = &mut out[or..or + dh];
                    for kj in 0..nk {
                        let p = probs[base + kj];
                        if p != 0.0 {
                            let vr = group.key_rows[kj] * width + c0;
                            axpy(p, &v[vr..vr + dh], orow);
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn apply_backward(
        &self,
        probs: &[f64],
        v: &[f64],
        dout: &[f64],
        width: usize,
        mut dprobs: Option<&mut [f64]>,
        mut dv: Option<&mut [f64]>,
    ) {
        let dh = width / self.heads;
        for (g, group) in self.groups.iter().enumerate() {
            let (nq, nk) = (group.query_rows.len(), group.key_rows.len());
            for h in 0..self.heads {
                let c0 = h * dh;
                for qi in 0..nq {
                    let base = self.offsets[g] + (h * nq + qi) * nk;
                    let or = group.query_rows[qi] * width + c0;
                    let drow = &dout[or..or + dh];
                    for kj in 0..nk {
                        if !group.admissible(qi, kj) {
                            continue;
                        }
                        let vr = group.key_rows[kj] * width + c0;
                        if let Some(dp) = dprobs.as_deref_mut() {
                            dp[base + kj] += dot(drow, &v[vr..vr + dh]);
                        }
                        if let Some(dv) = dv.as_deref_mut() {
                            let p = probs[base + kj];
                            if p != 0.0 {
                                axpy(p, drow, &mut dv[vr..vr + dh]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Head-averaged attention mass per key class, one row per query.
    pub(crate) fn class_mass_forward(&self, probs: &[f64]) -> Vec<f64> {
        let nc = self.n_classes;
        let mut out = vec![0.0; self.n_query_rows * nc];
        let inv_heads = 1.0 / self.heads as f64;
        for (g, group) in self.groups.iter().enumerate() {
            let (nq, nk) = (group.query_rows.len(), group.key_rows.len());
            if group.key_class.is_empty() {
                continue;
            }
            for h in 0..self.heads {
                for qi in 0..nq {
                    let base = self.offsets[g] + (h * nq + qi) * nk;
                    let or = group.query_rows[qi] * nc;
                    for kj in 0..nk {
                        out[or + group.key_class[kj]] += probs[base + kj] * inv_heads;
                    }
                }
            }
        }
        out
    }

    pub(crate) fn class_mass_backward(&self, dout: &[f64], dprobs: &mut [f64]) {
        let nc = self.n_classes;
        let inv_heads = 1.0 / self.heads as f64;
        for (g, group) in self.groups.iter().enumerate() {
            let (nq, nk) = (group.query_rows.len(), group.key_rows.len());
            if group.key_class.is_empty() {
                continue;
            }
            for h in 0..self.heads {
                for qi in 0..nq {
                    let base = self.offsets[g] + (h * nq + qi) * nk;
                    let or = group.query_rows[qi] * nc;
                    for kj in 0..nk {
                        dprobs[base + kj] += dout[or + group.key_class[kj]] * inv_heads;
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
