//! Small pre-norm causal transformer over mixed text/visual token sequences.
//!
//! Text positions embed as `token + position`; visual positions embed as
//! `projector(encoder(patch)) + position`, where the encoder is a frozen
//! random matrix and the projector is trainable. Sequences in a batch are
//! packed row-wise and attend only within themselves.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::NamedTensors;
use crate::tensor::{AttentionGroup, AttentionLayout, Tape, Tensor, Var};
use crate::wings::{self, LearnerVars, RouterVars, WingsStage};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Embedding rows start as `N(0, EMBED_STD²)`; weight matrices use `N(0, 1/fan_in)`.
const EMBED_STD: f64 = 1.0;
const FFN_EXPANSION: usize = 4;
/// Name prefix shared by every learner and router tensor in a checkpoint.
pub const WINGS_PREFIX: &str = "wings/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Width of one raw image patch (and of the frozen encoder).
    pub d_image: usize,
    pub lorra_rank: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size: 64,
            max_seq_len: 32,
            d_image: 16,
            lorra_rank: default_rank(64),
            seed: 0,
        }
    }
}

/// `max(4, d_model / 8)`, capped at `d_model`.
pub fn default_rank(d_model: usize) -> usize {
    (d_model / 8).max(4).min(d_model)
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("n_layers, d_model and n_heads must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.lorra_rank == 0 || self.lorra_rank > self.d_model {
            return bad("lorra_rank must lie in [1, d_model]");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_image == 0 {
            return bad("vocab_size, max_seq_len and d_image must be positive");
        }
        Ok(())
    }
}

/// One mixed-modality input. `targets[i]` is the token to predict at
/// position `i`, or `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub pre_text: Vec<usize>,
    /// `n_vis × d_image` raw patches; `None` for text-only input.
    pub image_latents: Option<Vec<Vec<f64>>>,
    pub post_text: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub v_start: Option<usize>,
    pub v_end: Option<usize>,
}

impl TokenSequence {
    pub fn text(tokens: Vec<usize>, targets: Vec<Option<usize>>) -> Self {
        TokenSequence {
            pre_text: tokens,
            image_latents: None,
            post_text: Vec::new(),
            targets,
            v_start: None,
            v_end: None,
        }
    }

    /// Builds a sequence with a visual span between `pre` and `post`; the
    /// span bounds are derived and visual targets cleared.
    pub fn with_image(pre: Vec<usize>, image: Vec<Vec<f64>>, post: Vec<usize>, mut targets: Vec<Option<usize>>) -> Self {
        let v_start = pre.len();
        let n_vis = image.len();
        if n_vis > 0 {
            for t in targets.iter_mut().skip(v_start).take(n_vis) {
                *t = None;
            }
        }
        TokenSequence {
            pre_text: pre,
            image_latents: (n_vis > 0).then_some(image),
            post_text: post,
            targets,
            v_start: (n_vis > 0).then_some(v_start),
            v_end: (n_vis > 0).then(|| v_start + n_vis - 1),
        }
    }

    pub fn n_visual(&self) -> usize {
        self.image_latents.as_ref().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.pre_text.len() + self.n_visual() + self.post_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_span(&self) -> Option<(usize, usize)> {
        self.v_start.zip(self.v_end)
    }

    pub fn layout(&self) -> SegmentLayout {
        SegmentLayout {
            len: self.len(),
            span: self.visual_span(),
        }
    }

    /// Token id at `pos`, or `None` inside the visual span.
    pub fn token_at(&self, pos: usize) -> Option<usize> {
        let pre = self.pre_text.len();
        let nv = self.n_visual();
        if pos < pre {
            Some(self.pre_text[pos])
        } else if pos < pre + nv {
            None
        } else {
            self.post_text.get(pos - pre - nv).copied()
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let s = self.len();
        if s == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        if s > config.max_seq_len {
            return Err(Error::Input(format!("sequence length {s} exceeds max_seq_len {}", config.max_seq_len)));
        }
        if self.targets.len() != s {
            return Err(Error::Input(format!("{} targets for {s} positions", self.targets.len())));
        }
        let oov = self
            .pre_text
            .iter()
            .chain(&self.post_text)
            .chain(self.targets.iter().flatten())
            .find(|&&t| t >= config.vocab_size);
        if let Some(t) = oov {
            return Err(Error::Input(format!("token {t} outside vocabulary of {}", config.vocab_size)));
        }
        let nv = self.n_visual();
        match (self.visual_span(), nv) {
            (None, 0) => {
                if self.v_start.is_some() || self.v_end.is_some() {
                    return Err(Error::Input("half-specified visual span".into()));
                }
            }
            (Some((start, end)), n) if n > 0 => {
                if start != self.pre_text.len() || end + 1 != start + n || end >= s {
                    return Err(Error::Input(format!("visual span [{start}, {end}] does not match layout")));
                }
                if self.targets[start..=end].iter().any(Option::is_some) {
                    return Err(Error::Input("targets must be empty inside the visual span".into()));
                }
                let latents = self.image_latents.as_ref().expect("n > 0");
                if let Some(row) = latents.iter().find(|r| r.len() != config.d_image) {
                    return Err(Error::Input(format!(
                        "image latent width {} does not match d_image {}",
                        row.len(),
                        config.d_image
                    )));
                }
            }
            _ => return Err(Error::Input("visual span and image latents disagree".into())),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Before,
    Itself,
    After,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Before, Segment::Itself, Segment::After];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Before => "before",
            Segment::Itself => "itself",
            Segment::After => "after",
        }
    }
}

/// Partition of `[0, len)` into before / itself / after the visual span.
/// Text-only sequences are entirely `Before`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub len: usize,
    pub span: Option<(usize, usize)>,
}

impl SegmentLayout {
    pub fn segment_of(&self, pos: usize) -> Segment {
        match self.span {
            Some((start, _)) if pos < start => Segment::Before,
            Some((_, end)) if pos <= end => Segment::Itself,
            Some(_) => Segment::After,
            None => Segment::Before,
        }
    }

    pub fn indices(&self, segment: Segment) -> Vec<usize> {
        (0..self.len).filter(|&p| self.segment_of(p) == segment).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    MainAttention,
    FeedForward,
    Norms,
    OutputHead,
    Projector,
    VisualLearner,
    TextualLearner,
    Router,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Embeddings,
        ParamGroup::MainAttention,
        ParamGroup::FeedForward,
        ParamGroup::Norms,
        ParamGroup::OutputHead,
        ParamGroup::Projector,
        ParamGroup::VisualLearner,
        ParamGroup::TextualLearner,
        ParamGroup::Router,
    ];

    /// The language-model branch: everything except projector, learners and router.
    pub fn is_main_branch(self) -> bool {
        matches!(
            self,
            ParamGroup::Embeddings
                | ParamGroup::MainAttention
                | ParamGroup::FeedForward
                | ParamGroup::Norms
                | ParamGroup::OutputHead
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::MainAttention => "main_attention",
            ParamGroup::FeedForward => "feed_forward",
            ParamGroup::Norms => "norms",
            ParamGroup::OutputHead => "output_head",
            ParamGroup::Projector => "projector",
            ParamGroup::VisualLearner => "visual_learner",
            ParamGroup::TextualLearner => "textual_learner",
            ParamGroup::Router => "router",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Baseline,
    Wings,
    WingsStage1,
}

#[derive(Clone, Debug)]
struct LayerIndex {
    ln1_gamma: usize,
    ln1_beta: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct LearnerIndex {
    down: [usize; 4],
    up: [usize; 4],
}

#[derive(Clone, Debug)]
struct WingsLayerIndex {
    visual: LearnerIndex,
    textual: LearnerIndex,
    router_weight: usize,
    router_bias: usize,
}

#[derive(Clone, Debug)]
struct Index {
    token_embedding: usize,
    position_embedding: usize,
    projector: usize,
    layers: Vec<LayerIndex>,
    final_gamma: usize,
    final_beta: usize,
    head: usize,
    wings: Option<Vec<WingsLayerIndex>>,
}

/// Parameters plus the frozen encoder.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    params: Vec<Tensor>,
    encoder: Tensor,
    index: Index,
}

struct Builder<'a> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    params: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, group: ParamGroup, tensor: Tensor) -> usize {
        self.names.push(name);
        self.groups.push(group);
        self.params.push(tensor);
        self.params.len() - 1
    }

    fn randn(&mut self, name: String, group: ParamGroup, shape: &[usize], std: f64) -> usize {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, group, t)
    }
}

fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

const PROJ_NAMES: [&str; 4] = ["q", "k", "v", "o"];

/// Frozen encoder matrix derived from a world seed: `d_image × d_image`,
/// entries `N(0, 1/d_image)`.
pub fn frozen_encoder(world_seed: u64, d_image: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(world_seed ^ 0x5eed_e4c0_de00_0001);
    Tensor::randn(&[d_image, d_image], 1.0 / (d_image as f64).sqrt(), &mut rng)
}

impl Model {
    /// Fresh baseline model (no learners). `encoder` must be `d_image × d_image`.
    pub fn new(config: ModelConfig, encoder: Tensor) -> Result<Self> {
        config.validate()?;
        if encoder.shape() != [config.d_image, config.d_image] {
            return Err(Error::Shape {
                op: "encoder",
                lhs: encoder.shape().to_vec(),
                rhs: vec![config.d_image, config.d_image],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let hidden = FFN_EXPANSION * d;
        let mut b = Builder {
            names: Vec::new(),
            groups: Vec::new(),
            params: Vec::new(),
            rng: &mut rng,
        };
        use ParamGroup::*;
        let token_embedding = b.randn("embed/token".into(), Embeddings, &[config.vocab_size, d], EMBED_STD);
        let position_embedding = b.randn("embed/position".into(), Embeddings, &[config.max_seq_len, d], EMBED_STD);
        let projector = b.randn("projector".into(), Projector, &[config.d_image, d], fan_in(config.d_image));
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}/{s}");
            layers.push(LayerIndex {
                ln1_gamma: b.add(p("ln1/gamma"), Norms, Tensor::full(&[d], 1.0)),
                ln1_beta: b.add(p("ln1/beta"), Norms, Tensor::zeros(&[d])),
                wq: b.randn(p("attn/wq"), MainAttention, &[d, d], fan_in(d)),
                wk: b.randn(p("attn/wk"), MainAttention, &[d, d], fan_in(d)),
                wv: b.randn(p("attn/wv"), MainAttention, &[d, d], fan_in(d)),
                wo: b.randn(p("attn/wo"), MainAttention, &[d, d], fan_in(d)),
                ln2_gamma: b.add(p("ln2/gamma"), Norms, Tensor::full(&[d], 1.0)),
                ln2_beta: b.add(p("ln2/beta"), Norms, Tensor::zeros(&[d])),
                w1: b.randn(p("ffn/w1"), FeedForward, &[d, hidden], fan_in(d)),
                b1: b.add(p("ffn/b1"), FeedForward, Tensor::zeros(&[hidden])),
                w2: b.randn(p("ffn/w2"), FeedForward, &[hidden, d], fan_in(hidden)),
                b2: b.add(p("ffn/b2"), FeedForward, Tensor::zeros(&[d])),
            });
        }
        let final_gamma = b.add("final_ln/gamma".into(), Norms, Tensor::full(&[d], 1.0));
        let final_beta = b.add("final_ln/beta".into(), Norms, Tensor::zeros(&[d]));
        let head = b.randn("head".into(), OutputHead, &[d, config.vocab_size], fan_in(d));
        let Builder {
            names, groups, params, ..
        } = b;
        Ok(Model {
            config,
            names,
            groups,
            params,
            encoder,
            index: Index {
                token_embedding,
                position_embedding,
                projector,
                layers,
                final_gamma,
                final_beta,
                head,
                wings: None,
            },
        })
    }

    /// Adds freshly initialized visual/textual learners and routers to every
    /// layer: `W_a ~ N(0, 0.02²)`, `W_b = 0`, router all zeros.
    pub fn attach_wings(&mut self, seed: u64) {
        if self.index.wings.is_some() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77_696e_6773);
        let (d, r) = (self.config.d_model, self.config.lorra_rank);
        let mut b = Builder {
            names: std::mem::take(&mut self.names),
            groups: std::mem::take(&mut self.groups),
            params: std::mem::take(&mut self.params),
            rng: &mut rng,
        };
        let mut layers = Vec::new();
        for l in 0..self.config.n_layers {
            let mut learner = |modality: &str, group: ParamGroup| {
                let mut idx = LearnerIndex {
                    down: [0; 4],
                    up: [0; 4],
                };
                for (p, name) in PROJ_NAMES.iter().enumerate() {
                    idx.down[p] = b.randn(format!("{WINGS_PREFIX}layer{l}/{modality}/{name}_a"), group, &[d, r], wings::LEARNER_INIT_STD);
                    idx.up[p] = b.add(format!("{WINGS_PREFIX}layer{l}/{modality}/{name}_b"), group, Tensor::zeros(&[r, d]));
                }
                idx
            };
            let visual = learner("visual", ParamGroup::VisualLearner);
            let textual = learner("textual", ParamGroup::TextualLearner);
            let router_weight = b.add(format!("{WINGS_PREFIX}layer{l}/router/weight"), ParamGroup::Router, Tensor::zeros(&[3, 2]));
            let router_bias = b.add(format!("{WINGS_PREFIX}layer{l}/router/bias"), ParamGroup::Router, Tensor::zeros(&[2]));
            layers.push(WingsLayerIndex {
                visual,
                textual,
                router_weight,
                router_bias,
            });
        }
        self.names = b.names;
        self.groups = b.groups;
        self.params = b.params;
        self.index.wings = Some(layers);
    }

    /// Changes the learner rank used by a later [`Model::attach_wings`].
    pub fn set_lorra_rank(&mut self, rank: usize) -> Result<()> {
        if self.has_wings() {
            return Err(Error::Config("learner rank is fixed once learners are attached".into()));
        }
        let config = ModelConfig {
            lorra_rank: rank,
            ..self.config.clone()
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn has_wings(&self) -> bool {
        self.index.wings.is_some()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Tensor {
        &self.encoder
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    /// Records every parameter as a leaf; those for which `trainable`
    /// returns true are tracked.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .zip(&self.groups)
            .map(|(p, g)| tape.leaf(p.clone().with_tracked(trainable(*g))))
            .collect()
    }

    /// Layer-0 features `x` for a packed batch.
    pub fn embed(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var> {
        let ix = &self.index;
        let tokens = tape.gather_rows(vars[ix.token_embedding], &batch.tokens)?;
        let mut sources = vec![tokens];
        if batch.patches.rows() > 0 && batch.n_visual_rows() > 0 {
            let encoded = tape.constant(batch.patches.matmul(&self.encoder)?);
            let visual = tape.matmul(encoded, vars[ix.projector])?;
            sources.push(visual);
        }
        let content = tape.assemble_rows(&sources, &batch.picks)?;
        let positions = tape.gather_rows(vars[ix.position_embedding], &batch.positions)?;
        tape.add(content, positions)
    }

    /// Full decoder pass; `vars` come from [`Model::bind`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, mode: ForwardMode) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        if batch.heads != self.config.n_heads {
            return Err(Error::Contract("batch was packed for a different head count".into()));
        }
        let wings_layers = match (mode, &self.index.wings) {
            (ForwardMode::Baseline, _) => None,
            (_, Some(w)) => Some(w),
            (_, None) => return Err(Error::Config("wings forward mode requires attached learners".into())),
        };
        let ix = &self.index;
        let x0 = self.embed(tape, vars, batch)?;
        let visual_keys = match batch.visual_rows.is_empty() {
            true => None,
            false => Some(tape.gather_rows(x0, &batch.visual_rows)?),
        };
        let text_keys = match (mode, batch.text_rows.is_empty()) {
            (ForwardMode::Wings, false) => Some(tape.gather_rows(x0, &batch.text_rows)?),
            _ => None,
        };
        let mut h = x0;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        let mut route = Vec::new();
        for (l, li) in ix.layers.iter().enumerate() {
            let normed = tape.layer_norm(h, vars[li.ln1_gamma], vars[li.ln1_beta], LAYER_NORM_EPS)?;
            let (main, probs) = attention_block(
                tape,
                normed,
                [vars[li.wq], vars[li.wk], vars[li.wv], vars[li.wo]],
                &batch.main_layout,
            )?;
            attention.push(probs);
            let attn = match wings_layers {
                None => main,
                Some(w) => {
                    let wl = &w[l];
                    let learner = |li: &LearnerIndex| LearnerVars {
                        down: li.down.map(|i| vars[i]),
                        up: li.up.map(|i| vars[i]),
                    };
                    let visual = visual_keys.map(|k| (k, learner(&wl.visual), &batch.visual_layout));
                    let stage = match mode {
                        ForwardMode::WingsStage1 => WingsStage::Stage1,
                        _ => WingsStage::Stage2 {
                            textual: text_keys.map(|k| (k, learner(&wl.textual), &batch.text_layout)),
                            router: RouterVars {
                                weight: vars[wl.router_weight],
                                bias: vars[wl.router_bias],
                            },
                            main_probs: probs,
                            main_layout: &batch.main_layout,
                        },
                    };
                    let out = wings::wings_attention(tape, main, normed, visual, stage)?;
                    if let Some(w) = out.route_weights {
                        route.push(w);
                    }
                    out.output
                }
            };
            h = tape.add(h, attn)?;
            let normed = tape.layer_norm(h, vars[li.ln2_gamma], vars[li.ln2_beta], LAYER_NORM_EPS)?;
            let hidden = tape.matmul(normed, vars[li.w1])?;
            let hidden = tape.add_row_vector(hidden, vars[li.b1])?;
            let hidden = tape.gelu(hidden)?;
            let ff = tape.matmul(hidden, vars[li.w2])?;
            let ff = tape.add_row_vector(ff, vars[li.b2])?;
            h = tape.add(h, ff)?;
        }
        let normed = tape.layer_norm(h, vars[ix.final_gamma], vars[ix.final_beta], LAYER_NORM_EPS)?;
        let logits = tape.matmul(normed, vars[ix.head])?;
        Ok(ForwardOutput {
            logits,
            attention,
            route_weights: route,
            x0,
        })
    }

    /// Untracked forward pass returning logits and traces.
    pub fn infer(&self, batch: &Batch, mode: ForwardMode) -> Result<Inference> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &vars, batch, mode)?;
        let traces = (0..batch.len()).map(|b| batch.trace(&tape, &out.attention, b)).collect();
        Ok(Inference {
            logits: tape.value(out.logits).clone(),
            traces,
        })
    }

    /// Single-sequence convenience wrapper around [`Model::infer`].
    pub fn decoder_forward(&self, seq: &TokenSequence, mode: ForwardMode) -> Result<(Tensor, AttentionTrace)> {
        let batch = Batch::new(std::slice::from_ref(seq), &self.config)?;
        let mut inf = self.infer(&batch, mode)?;
        Ok((inf.logits, inf.traces.remove(0)))
    }

    /// Checkpoint container: JSON `ModelConfig` header, the encoder under
    /// `frozen/encoder`, then every parameter by name.
    pub fn to_named_tensors(&self) -> NamedTensors {
        let header = serde_json::to_string(&self.config).expect("config serializes");
        let mut out = NamedTensors::new(header);
        out.push("frozen/encoder", self.encoder.clone());
        for (name, p) in self.names.iter().zip(&self.params) {
            out.push(name.clone(), p.clone());
        }
        out
    }

    /// Inverse of [`Model::to_named_tensors`]. Learner tensors are optional:
    /// without them the model loads as a baseline model.
    pub fn from_named_tensors(container: &NamedTensors) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_str(&container.header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let encoder = container
            .get("frozen/encoder")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing frozen/encoder".into()))?;
        let mut model = Model::new(config.clone(), encoder)?;
        let has_wings = container.tensors.iter().any(|(n, _)| n.starts_with(WINGS_PREFIX));
        if has_wings {
            model.attach_wings(config.seed);
        }
        for (i, name) in model.names.clone().iter().enumerate() {
            let t = container
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != model.params[i].shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", t.shape())));
            }
            model.params[i] = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_named_tensors().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_named_tensors(&NamedTensors::load(path)?)
    }
}

/// Multihead attention over pre-normalized input with the given layout.
/// Returns the projected output and the packed probabilities.
pub fn attention_block(tape: &mut Tape, x: Var, weights: [Var; 4], layout: &Arc<AttentionLayout>) -> Result<(Var, Var)> {
    let [wq, wk, wv, wo] = weights;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let probs = tape.attention_probs(q, k, layout)?;
    let ctx = tape.attention_apply(probs, v, layout)?;
    let out = tape.matmul(ctx, wo)?;
    Ok((out, probs))
}

/// Strictly causal self-attention of one `s × d` sequence. Returns the output
/// and one `s × s` matrix per head.
pub fn causal_attention(tape: &mut Tape, h: Var, weights: [Var; 4], n_heads: usize) -> Result<(Var, Vec<Tensor>)> {
    let s = tape.value(h).rows();
    let layout = Arc::new(AttentionLayout::new(
        vec![AttentionGroup {
            query_rows: (0..s).collect(),
            query_pos: (0..s).collect(),
            key_rows: (0..s).collect(),
            key_pos: (0..s).collect(),
            key_class: Vec::new(),
        }],
        n_heads,
        s,
        s,
        0,
    )?);
    let (out, probs) = attention_block(tape, h, weights, &layout)?;
    let block = layout.block(tape.value(probs).values(), 0);
    let heads = block
        .chunks(s * s)
        .map(|c| Tensor::from_parts(vec![s, s], c.to_vec()))
        .collect();
    Ok((out, heads))
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub attention: Vec<Var>,
    pub route_weights: Vec<Var>,
    pub x0: Var,
}

/// Per-layer, per-head `s × s` main-branch attention of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().and_then(|h| h.first()).map_or(0, Tensor::rows)
    }

    /// Head-averaged `s × s` attention of layer `l`.
    pub fn head_mean(&self, l: usize) -> Tensor {
        let heads = &self.layers[l];
        let mut out = Tensor::zeros(heads[0].shape());
        for h in heads {
            for (o, v) in out.values_mut().iter_mut().zip(h.values()) {
                *o += v;
            }
        }
        let inv = 1.0 / heads.len() as f64;
        out.values_mut().iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// One CSV per layer: `row,col,head,weight`.
    pub fn to_csv(&self, layer: usize) -> String {
        let mut out = String::from("row,col,head,weight\n");
        for (h, m) in self.layers[layer].iter().enumerate() {
            let s = m.rows();
            for i in 0..s {
                for j in 0..s {
                    out.push_str(&format!("{i},{j},{h},{}\n", m.get2(i, j)));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub traces: Vec<AttentionTrace>,
}

#[derive(Clone, Debug)]
struct SeqSlot {
    offset: usize,
    len: usize,
    layout: SegmentLayout,
}

/// Several sequences packed row-wise, with the attention layouts every
/// forward pass needs.
#[derive(Clone, Debug)]
pub struct Batch {
    slots: Vec<SeqSlot>,
    heads: usize,
    tokens: Vec<usize>,
    patches: Tensor,
    picks: Vec<(usize, usize)>,
    positions: Vec<usize>,
    targets: Vec<Option<usize>>,
    visual_rows: Vec<usize>,
    text_rows: Vec<usize>,
    main_layout: Arc<AttentionLayout>,
    visual_layout: Arc<AttentionLayout>,
    text_layout: Arc<AttentionLayout>,
}

impl Batch {
    pub fn new(seqs: &[TokenSequence], config: &ModelConfig) -> Result<Self> {
        Self::from_refs(&seqs.iter().collect::<Vec<_>>(), config)
    }

    pub fn from_refs(seqs: &[&TokenSequence], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut slots = Vec::new();
        let mut tokens = Vec::new();
        let mut patches = Vec::new();
        let mut picks = Vec::new();
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        let mut visual_rows = Vec::new();
        let mut text_rows = Vec::new();
        let (mut main_groups, mut vis_groups, mut text_groups) = (Vec::new(), Vec::new(), Vec::new());
        for seq in seqs {
            seq.validate(config)?;
            let offset = positions.len();
            let layout = seq.layout();
            let s = seq.len();
            let mut vis = AttentionGroup::default();
            let mut txt = AttentionGroup::default();
            for p in 0..s {
                let row = offset + p;
                positions.push(p);
                match seq.token_at(p) {
                    Some(t) => {
                        picks.push((0, tokens.len()));
                        tokens.push(t);
                        txt.key_rows.push(text_rows.len());
                        txt.key_pos.push(p);
                        text_rows.push(row);
                        targets.push(seq.targets[p]);
                    }
                    None => {
                        let latents = seq.image_latents.as_ref().expect("visual position has latents");
                        let k = p - layout.span.expect("span").0;
                        picks.push((1, patches.len() / config.d_image));
                        patches.extend_from_slice(&latents[k]);
                        vis.key_rows.push(visual_rows.len());
                        vis.key_pos.push(p);
                        visual_rows.push(row);
                        targets.push(None);
                    }
                }
            }
            let rows: Vec<usize> = (offset..offset + s).collect();
            let pos: Vec<usize> = (0..s).collect();
            main_groups.push(AttentionGroup {
                query_rows: rows.clone(),
                query_pos: pos.clone(),
                key_rows: rows.clone(),
                key_pos: pos.clone(),
                key_class: (0..s).map(|p| layout.segment_of(p).index()).collect(),
            });
            for g in [&mut vis, &mut txt] {
                g.query_rows = rows.clone();
                g.query_pos = pos.clone();
            }
            vis_groups.push(vis);
            text_groups.push(txt);
            slots.push(SeqSlot { offset, len: s, layout });
        }
        let n = positions.len();
        let heads = config.n_heads;
        let n_patches = patches.len() / config.d_image;
        Ok(Batch {
            slots,
            heads,
            tokens,
            patches: Tensor::from_parts(vec![n_patches, config.d_image], patches),
            picks,
            positions,
            targets,
            main_layout: Arc::new(AttentionLayout::new(main_groups, heads, n, n, 3)?),
            visual_layout: Arc::new(AttentionLayout::new(vis_groups, heads, n, visual_rows.len(), 0)?),
            text_layout: Arc::new(AttentionLayout::new(text_groups, heads, n, text_rows.len(), 0)?),
            visual_rows,
            text_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.positions.len()
    }

    pub fn n_visual_rows(&self) -> usize {
        self.visual_rows.len()
    }

    /// Row range of sequence `b` inside packed matrices.
    pub fn rows_of(&self, b: usize) -> std::ops::Range<usize> {
        let s = &self.slots[b];
        s.offset..s.offset + s.len
    }

    pub fn segment_layout(&self, b: usize) -> SegmentLayout {
        self.slots[b].layout
    }

    /// Per-row targets with visual rows always cleared.
    pub fn targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    pub fn main_layout(&self) -> &Arc<AttentionLayout> {
        &self.main_layout
    }

    /// Main-branch attention trace of sequence `b` from per-layer packed probabilities.
    pub fn trace(&self, tape: &Tape, attention: &[Var], b: usize) -> AttentionTrace {
        let s = self.slots[b].len;
        let layers = attention
            .iter()
            .map(|&p| {
                self.main_layout
                    .block(tape.value(p).values(), b)
                    .chunks(s * s)
                    .map(|c| Tensor::from_parts(vec![s, s], c.to_vec()))
                    .collect()
            })
            .collect();
        AttentionTrace { layers }
    }
}

/// Mean next-token cross-entropy over positions with a target; visual
/// positions never contribute.
pub fn masked_lm_loss(tape: &mut Tape, logits: Var, batch: &Batch) -> Result<Var> {
    if tape.value(logits).rows() != batch.n_rows() {
        return Err(Error::Shape {
            op: "masked_lm_loss",
            lhs: tape.value(logits).shape().to_vec(),
            rhs: vec![batch.n_rows()],
        });
    }
    tape.cross_entropy(logits, batch.targets())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(wings: bool) -> Model {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 40,
            max_seq_len: 16,
            d_image: 4,
            lorra_rank: 4,
            seed: 3,
        };
        let mut m = Model::new(config, frozen_encoder(9, 4)).unwrap();
        if wings {
            m.attach_wings(5);
            // Move the learners off zero so they actually contribute.
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for i in 0..m.params.len() {
                if !m.groups[i].is_main_branch() && m.groups[i] != ParamGroup::Projector {
                    let shape = m.params[i].shape().to_vec();
                    m.params[i] = Tensor::randn(&shape, 0.3, &mut rng);
                }
            }
        }
        m
    }

    fn image_seq(seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (0..3).map(|_| Tensor::randn(&[4], 1.0, &mut rng).into_values()).collect();
        let targets = vec![Some(5), Some(6), None, None, None, Some(7), Some(8)];
        TokenSequence::with_image(vec![10, 11], image, vec![12, 13], targets)
    }

    fn text_seq() -> TokenSequence {
        TokenSequence::text(vec![4, 9, 20, 1, 4], vec![None, None, None, None, Some(21)])
    }

    #[test]
    fn causal_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, d, heads) = (5, 4, 2);
        let h = Tensor::randn(&[s, d], 1.0, &mut rng);
        let w: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[d, d], 0.7, &mut rng)).collect();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let wv = [0, 1, 2, 3].map(|i| tape.constant(w[i].clone()));
        let (out, probs) = causal_attention(&mut tape, hv, wv, heads).unwrap();

        let (q, k, v) = (h.matmul(&w[0]).unwrap(), h.matmul(&w[1]).unwrap(), h.matmul(&w[2]).unwrap());
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; s];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..s {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|x| x.exp()).sum();
                for j in 0..s {
                    let p = if j <= i { scores[j].exp() / z } else { 0.0 };
                    assert!((probs[hd].get2(i, j) - p).abs() < 1e-12);
                    for c in cols.clone() {
                        ctx[i][c] += p * v.get2(j, c);
                    }
                }
            }
        }
        let want = Tensor::from_rows(&ctx).unwrap().matmul(&w[3]).unwrap();
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        for wings in [false, true] {
            let m = small_model(wings);
            let mode = if wings { ForwardMode::Wings } else { ForwardMode::Baseline };
            let seqs = [image_seq(1), text_seq(), image_seq(2)];
            let batch = Batch::new(&seqs, m.config()).unwrap();
            let inf = m.infer(&batch, mode).unwrap();
            for (b, seq) in seqs.iter().enumerate() {
                let (logits, trace) = m.decoder_forward(seq, mode).unwrap();
                for (r, row) in batch.rows_of(b).enumerate() {
                    for (a, c) in inf.logits.row(row).iter().zip(logits.row(r)) {
                        assert!((a - c).abs() < 1e-12);
                    }
                }
                assert_eq!(inf.traces[b].n_layers(), trace.n_layers());
            }
        }
    }

    #[test]
    fn loss_matches_hand_cross_entropy() {
        let m = small_model(true);
        let seq = image_seq(4);
        let batch = Batch::new(std::slice::from_ref(&seq), m.config()).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, |_| false);
        let out = m.forward(&mut tape, &vars, &batch, ForwardMode::Wings).unwrap();
        let loss = masked_lm_loss(&mut tape, out.logits, &batch).unwrap();
        let logits = tape.value(out.logits);
        let mut total = 0.0;
        let mut count = 0.0;
        for (r, t) in seq.targets.iter().enumerate() {
            if let Some(t) = t {
                let row = logits.row(r);
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                total += lse - row[*t];
                count += 1.0;
            }
        }
        assert!((tape.value(loss).item() - total / count).abs() < 1e-12);
    }

    #[test]
    fn fresh_learners_leave_logits_unchanged() {
        let base = small_model(false);
        let mut wings = base.clone();
        wings.attach_wings(8);
        for seq in [image_seq(6), text_seq()] {
            let (a, _) = base.decoder_forward(&seq, ForwardMode::Baseline).unwrap();
            for mode in [ForwardMode::Wings, ForwardMode::WingsStage1] {
                let (b, _) = wings.decoder_forward(&seq, mode).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-10);
            }
        }
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let m = small_model(true);
        let seq = image_seq(7);
        let mut altered = seq.clone();
        *altered.post_text.last_mut().unwrap() = 30;
        let (a, ta) = m.decoder_forward(&seq, ForwardMode::Wings).unwrap();
        let (b, _) = m.decoder_forward(&altered, ForwardMode::Wings).unwrap();
        let last = seq.len() - 1;
        for r in 0..last {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(a.row(last).iter().zip(b.row(last)).any(|(x, y)| x != y));
        for layer in &ta.layers {
            for head in layer {
                for i in 0..head.rows() {
                    assert!((i + 1..head.cols()).all(|j| head.get2(i, j) == 0.0));
                    assert!((head.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for wings in [false, true] {
            let m = small_model(wings);
            let path = dir.path().join(format!("m{wings}.ckpt"));
            m.save(&path).unwrap();
            let back = Model::load(&path).unwrap();
            assert_eq!(back.has_wings(), wings);
            assert_eq!(back.params(), m.params());
            assert_eq!(back.encoder(), m.encoder());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(Model::new(bad_heads, frozen_encoder(0, 16)).is_err());
        let mut m = small_model(false);
        assert!(m.set_lorra_rank(2).is_ok());
        m.attach_wings(0);
        assert!(m.set_lorra_rank(4).is_err());
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let m = small_model(false);
        let seq = TokenSequence::text(vec![4; 17], vec![None; 17]);
        assert!(m.decoder_forward(&seq, ForwardMode::Baseline).is_err());
    }
}
