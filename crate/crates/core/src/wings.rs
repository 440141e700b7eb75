//! Low-rank residual attention learners and the attention-weight router.
//!
//! A learner is a cross-attention block whose queries are the current hidden
//! state and whose keys/values are the layer-0 features of one modality:
//!
//! ```text
//! out = softmax(h(I + Q_a Q_b) · (x(I + K_a K_b))ᵀ / sqrt(d_head)) · x(I + V_a V_b) · O_a O_b
//! ```
//!
//! The output map has no identity term and `*_b` starts at zero, so a fresh
//! learner outputs exactly zero. Keys are causally masked by absolute
//! position; a query with no admissible key outputs zero.
//!
//! The router maps each query's head-averaged attention mass on the
//! (before, itself, after) segments through one linear layer and a softmax to
//! a pair `(w_visual, w_textual)`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::SegmentLayout;
use crate::tensor::{AttentionGroup, AttentionLayout, Tape, Tensor, Var};

/// Standard deviation of the Gaussian `W_a` initialization.
pub const LEARNER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

/// Low-rank factors for the Q, K, V, O maps, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerParams {
    pub modality: Modality,
    /// `d_model × r` each.
    pub down: [Tensor; 4],
    /// `r × d_model` each.
    pub up: [Tensor; 4],
}

impl LearnerParams {
    pub fn fresh<R: Rng + ?Sized>(modality: Modality, d_model: usize, rank: usize, rng: &mut R) -> Self {
        LearnerParams {
            modality,
            down: std::array::from_fn(|_| Tensor::randn(&[d_model, rank], LEARNER_INIT_STD, rng)),
            up: std::array::from_fn(|_| Tensor::zeros(&[rank, d_model])),
        }
    }

    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> LearnerVars {
        LearnerVars {
            down: self.down.clone().map(|t| tape.leaf(t.with_tracked(tracked))),
            up: self.up.clone().map(|t| tape.leaf(t.with_tracked(tracked))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// `3 × 2`: segment masses to (visual, textual) logits.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Default for RouterParams {
    fn default() -> Self {
        RouterParams {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::zeros(&[2]),
        }
    }
}

impl RouterParams {
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> RouterVars {
        RouterVars {
            weight: tape.leaf(self.weight.clone().with_tracked(tracked)),
            bias: tape.leaf(self.bias.clone().with_tracked(tracked)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnerVars {
    pub down: [Var; 4],
    pub up: [Var; 4],
}

#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pub weight: Var,
    pub bias: Var,
}

/// `x (I + a b)` computed as `x + (x a) b`.
fn identity_plus_low_rank(tape: &mut Tape, x: Var, down: Var, up: Var) -> Result<Var> {
    let low = tape.matmul(x, down)?;
    let low = tape.matmul(low, up)?;
    tape.add(x, low)
}

/// Learner over packed rows: `queries` is `n × d`, `keys` holds the
/// modality's layer-0 features, and `layout` encodes grouping and the causal
/// key mask.
pub fn lorra(tape: &mut Tape, queries: Var, keys: Var, layout: &Arc<AttentionLayout>, p: &LearnerVars) -> Result<Var> {
    let q = identity_plus_low_rank(tape, queries, p.down[0], p.up[0])?;
    let k = identity_plus_low_rank(tape, keys, p.down[1], p.up[1])?;
    let v = identity_plus_low_rank(tape, keys, p.down[2], p.up[2])?;
    let probs = tape.attention_probs(q, k, layout)?;
    let ctx = tape.attention_apply(probs, v, layout)?;
    let out = tape.matmul(ctx, p.down[3])?;
    tape.matmul(out, p.up[3])
}

/// Layout for one sequence: `s` queries at positions `0..s` against keys at
/// `star_positions`.
pub fn single_layout(s: usize, star_positions: &[usize], n_heads: usize) -> Result<Arc<AttentionLayout>> {
    let k = star_positions.len();
    Ok(Arc::new(AttentionLayout::new(
        vec![AttentionGroup {
            query_rows: (0..s).collect(),
            query_pos: (0..s).collect(),
            key_rows: (0..k).collect(),
            key_pos: star_positions.to_vec(),
            key_class: Vec::new(),
        }],
        n_heads,
        s,
        k,
        0,
    )?))
}

/// Single-sequence learner: `h` is `s × d` with query `i` at position `i`;
/// `x_star` is `k × d` with key `j` at `star_positions[j]`.
pub fn lorra_learner(
    tape: &mut Tape,
    h: Var,
    x_star: Var,
    star_positions: &[usize],
    params: &LearnerVars,
    n_heads: usize,
) -> Result<Var> {
    let s = tape.value(h).rows();
    let k = tape.value(x_star).rows();
    if star_positions.len() != k {
        return Err(Error::Input(format!("{} key positions for {k} key rows", star_positions.len())));
    }
    let layout = single_layout(s, star_positions, n_heads)?;
    lorra(tape, h, x_star, &layout, params)
}

/// Per-query routing weights `[w_visual, w_textual]` from packed main-branch
/// attention probabilities whose layout carries segment classes.
pub fn route_weights(tape: &mut Tape, main_probs: Var, main_layout: &Arc<AttentionLayout>, router: &RouterVars) -> Result<Var> {
    if main_layout.n_classes() != 3 {
        return Err(Error::Contract("router needs a before/itself/after key classification".into()));
    }
    let features = tape.class_mass(main_probs, main_layout)?;
    let logits = tape.matmul(features, router.weight)?;
    let logits = tape.add_row_vector(logits, router.bias)?;
    let mask = vec![true; tape.value(logits).len()];
    tape.masked_softmax_rows(logits, &mask)
}

/// Packs per-head `s × s` matrices of one sequence for [`route_weights`].
pub fn pack_single(tape: &mut Tape, heads: &[Tensor], layout: SegmentLayout) -> Result<(Var, Arc<AttentionLayout>)> {
    let s = layout.len;
    if heads.is_empty() || heads.iter().any(|h| h.shape() != [s, s]) {
        return Err(Error::Input("attention heads must all be s × s".into()));
    }
    let packed = AttentionLayout::new(
        vec![AttentionGroup {
            query_rows: (0..s).collect(),
            query_pos: (0..s).collect(),
            key_rows: (0..s).collect(),
            key_pos: (0..s).collect(),
            key_class: (0..s).map(|p| layout.segment_of(p).index()).collect(),
        }],
        heads.len(),
        s,
        s,
        3,
    )?;
    let values: Vec<f64> = heads.iter().flat_map(|h| h.values().iter().copied()).collect();
    let probs = tape.constant(Tensor::new(vec![values.len()], values)?);
    Ok((probs, Arc::new(packed)))
}

/// Keys, learner parameters and layout for one modality.
pub type LearnerInput<'a> = (Var, LearnerVars, &'a Arc<AttentionLayout>);

pub enum WingsStage<'a> {
    /// Visual learner output is added with weight 1; textual learner and router unused.
    Stage1,
    /// Router-weighted sum of both learners.
    Stage2 {
        textual: Option<LearnerInput<'a>>,
        router: RouterVars,
        main_probs: Var,
        main_layout: &'a Arc<AttentionLayout>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct WingsOutput {
    pub output: Var,
    /// `n × 2` routing weights (stage 2 only).
    pub route_weights: Option<Var>,
}

/// Composes the main attention output with the learners. A missing learner
/// input (no keys of that modality in the batch) contributes zero.
pub fn wings_attention(
    tape: &mut Tape,
    main: Var,
    queries: Var,
    visual: Option<LearnerInput<'_>>,
    stage: WingsStage<'_>,
) -> Result<WingsOutput> {
    match stage {
        WingsStage::Stage1 => {
            let output = match visual {
                Some((keys, p, layout)) => {
                    let learned = lorra(tape, queries, keys, layout, &p)?;
                    tape.add(main, learned)?
                }
                None => main,
            };
            Ok(WingsOutput {
                output,
                route_weights: None,
            })
        }
        WingsStage::Stage2 {
            textual,
            router,
            main_probs,
            main_layout,
        } => {
            let weights = route_weights(tape, main_probs, main_layout, &router)?;
            let mut output = main;
            for (column, input) in [(0, visual), (1, textual)] {
                if let Some((keys, p, layout)) = input {
                    let learned = lorra(tape, queries, keys, layout, &p)?;
                    let weighted = tape.scale_rows_by_column(learned, weights, column)?;
                    output = tape.add(output, weighted)?;
                }
            }
            Ok(WingsOutput {
                output,
                route_weights: Some(weights),
            })
        }
    }
}
