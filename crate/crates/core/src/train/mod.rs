//! Staged training, greedy evaluation and the study drivers.

pub mod optim;
pub mod study;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{masked_lm_loss, Batch, ForwardMode, Model, ParamGroup};
use crate::synth::{TaskExample, TaskFamily, Vocab};
use crate::tensor::{Tape, Tensor};

pub use optim::{AdamW, AdamWConfig, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainText,
    Stage1,
    Stage2,
    BaselineFt,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainText, Stage::Stage1, Stage::Stage2, Stage::BaselineFt];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainText => "pretrain_text",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::BaselineFt => "baseline_ft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn forward_mode(self) -> ForwardMode {
        match self {
            Stage::PretrainText | Stage::BaselineFt => ForwardMode::Baseline,
            Stage::Stage1 => ForwardMode::WingsStage1,
            Stage::Stage2 => ForwardMode::Wings,
        }
    }

    pub fn default_filter(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        let main = [Embeddings, MainAttention, FeedForward, Norms, OutputHead];
        match self {
            Stage::PretrainText => main.to_vec(),
            Stage::Stage1 => vec![Projector, VisualLearner],
            Stage::Stage2 => [&main[..], &[Projector, VisualLearner, TextualLearner, Router]].concat(),
            Stage::BaselineFt => [&main[..], &[Projector]].concat(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Peak rate for main-branch parameters.
    pub lr: f64,
    /// Projector rate relative to `lr`.
    pub projector_scale: f64,
    /// Learner and router rate relative to `lr`.
    pub learner_scale: f64,
    pub adamw: AdamWConfig,
    pub warmup_frac: f64,
    pub warmup_start: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub filter: Vec<ParamGroup>,
}

impl TrainConfig {
    /// Defaults per stage; stage 2 trains the main branch with small steps
    /// and the projector 5× faster.
    pub fn for_stage(stage: Stage) -> Self {
        let (lr, projector_scale, learner_scale, steps) = match stage {
            Stage::PretrainText => (1e-3, 1.0, 1.0, 1000),
            Stage::Stage1 => (1e-3, 1.0, 1.0, 600),
            Stage::Stage2 => (1e-4, 5.0, 10.0, 300),
            Stage::BaselineFt => (1e-3, 1.0, 1.0, 1000),
        };
        TrainConfig {
            stage,
            lr,
            projector_scale,
            learner_scale,
            adamw: AdamWConfig::default(),
            warmup_frac: 0.05,
            warmup_start: 0.1,
            batch_size: 32,
            steps,
            seed: 0,
            filter: stage.default_filter(),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.filter.is_empty() {
            return Err(Error::Config("empty trainable-parameter filter".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.projector_scale <= 0.0 || self.learner_scale <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        let mut filter = self.filter.clone();
        filter.sort();
        filter.dedup();
        match self.stage {
            Stage::Stage1 if filter != [ParamGroup::Projector, ParamGroup::VisualLearner] => {
                return Err(Error::Config("stage1 trains exactly the projector and visual learners".into()));
            }
            Stage::Stage2 => {
                let required = Stage::Stage2.default_filter();
                if required.iter().any(|g| *g != ParamGroup::VisualLearner && !filter.contains(g)) {
                    return Err(Error::Config(
                        "stage2 trains the main branch, projector, textual learners and router".into(),
                    ));
                }
                if self.projector_scale <= 1.0 {
                    return Err(Error::Config("stage2 projector rate must exceed the global rate".into()));
                }
            }
            _ => {}
        }
        let needs_wings = matches!(self.stage, Stage::Stage1 | Stage::Stage2);
        if needs_wings && !model.has_wings() {
            return Err(Error::Config(format!("{} requires a model with learners attached", self.stage.name())));
        }
        if !needs_wings && filter.iter().any(|g| !g.is_main_branch() && *g != ParamGroup::Projector) {
            return Err(Error::Config(format!("{} cannot train learner parameters", self.stage.name())));
        }
        Ok(())
    }

    fn scale_of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Projector => self.projector_scale,
            ParamGroup::VisualLearner | ParamGroup::TextualLearner | ParamGroup::Router => self.learner_scale,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of each step's batch, before that step's update.
    pub losses: Vec<f64>,
    /// Base schedule rate used at each step.
    pub rates: Vec<f64>,
}

/// Epoch-shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Sampler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// AdamW over the filtered parameters; every other tensor is left untouched.
pub fn train(model: &mut Model, data: &[TaskExample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate(model)?;
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let mode = cfg.stage.forward_mode();
    let trainable: Vec<usize> = (0..model.params().len())
        .filter(|&i| cfg.filter.contains(&model.groups()[i]))
        .collect();
    if trainable.is_empty() {
        return Err(Error::Config("filter selects no parameters of this model".into()));
    }
    let sizes: Vec<usize> = trainable.iter().map(|&i| model.params()[i].len()).collect();
    let scales = trainable.iter().map(|&i| cfg.scale_of(model.groups()[i])).collect();
    let mut opt = AdamW::new(cfg.adamw, &sizes, scales);
    let schedule = Schedule::new(cfg.lr, cfg.steps, cfg.warmup_frac, cfg.warmup_start);
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    for step in 0..cfg.steps {
        let picks = sampler.next_batch(cfg.batch_size);
        let seqs: Vec<_> = picks.iter().map(|&i| &data[i].sequence).collect();
        let batch = Batch::from_refs(&seqs, model.config())?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |g| cfg.filter.contains(&g));
        let out = model.forward(&mut tape, &vars, &batch, mode)?;
        let loss = masked_lm_loss(&mut tape, out.logits, &batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss)?;
        let grad_refs: Vec<&Tensor> = trainable
            .iter()
            .map(|&i| grads.get(vars[i]).ok_or_else(|| Error::Contract(format!("no gradient for {}", model.names()[i]))))
            .collect::<Result<_>>()?;
        if grad_refs.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let rate = schedule.rate(step);
        let mut params: Vec<&mut Tensor> = model
            .params_mut()
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| trainable.binary_search(i).is_ok())
            .map(|(_, p)| p)
            .collect();
        opt.step(&mut params, &grad_refs, rate);
        report.losses.push(value);
        report.rates.push(rate);
    }
    Ok(report)
}

/// Which tokens the greedy answer may be drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerSpace {
    Full,
    /// Values for recall questions, labels for classification questions.
    Family(Vocab),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn record(&mut self, hit: bool) {
        self.total += 1;
        self.correct += hit as usize;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub families: BTreeMap<String, Accuracy>,
    /// Per-turn accuracy for each interleave pattern.
    pub patterns: BTreeMap<String, Vec<Accuracy>>,
}

impl EvalReport {
    pub fn accuracy(&self, family: TaskFamily) -> f64 {
        self.families.get(family.name()).map_or(0.0, Accuracy::value)
    }
}

const EVAL_CHUNK: usize = 64;

fn argmax(row: &[f64], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for t in range {
        if row[t] > row[best] {
            best = t;
        }
    }
    best
}

/// Greedy exact-match accuracy at every scored turn.
pub fn evaluate(model: &Model, examples: &[TaskExample], mode: ForwardMode, space: AnswerSpace) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let vocab_size = model.config().vocab_size;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<_> = chunk.iter().map(|e| &e.sequence).collect();
        let batch = Batch::from_refs(&seqs, model.config())?;
        let logits = model.infer(&batch, mode)?.logits;
        for (b, ex) in chunk.iter().enumerate() {
            let offset = batch.rows_of(b).start;
            for (t, turn) in ex.turns.iter().enumerate() {
                let range = match space {
                    AnswerSpace::Full => 0..vocab_size,
                    AnswerSpace::Family(v) => v.answer_set(turn.family),
                };
                let hit = argmax(logits.row(offset + turn.position), range) == turn.answer;
                report.families.entry(turn.family.name().to_string()).or_default().record(hit);
                if !ex.pattern.is_empty() {
                    let per_turn = report.patterns.entry(ex.pattern.clone()).or_default();
                    if per_turn.len() <= t {
                        per_turn.resize(t + 1, Accuracy::default());
                    }
                    per_turn[t].record(hit);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{frozen_encoder, ModelConfig};
    use crate::synth::{gen_mm_task, gen_text_task, make_visual_world, InsertPolicy, MmTaskConfig, TextTaskConfig, VisualWorld, WorldConfig};

    fn world() -> VisualWorld {
        make_visual_world(&WorldConfig::default()).unwrap()
    }

    fn model(world: &VisualWorld, wings: bool) -> Model {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            lorra_rank: 4,
            seed: 1,
            ..ModelConfig::default()
        };
        let mut m = Model::new(config, frozen_encoder(world.seed, world.d_image())).unwrap();
        if wings {
            m.attach_wings(2);
        }
        m
    }

    fn text(world: &VisualWorld, n: usize) -> Vec<TaskExample> {
        let cfg = TextTaskConfig { n_pairs: 3, max_seq_len: 32 };
        gen_text_task(4, n, &world.vocab, cfg).unwrap()
    }

    fn mm(world: &VisualWorld, n: usize) -> Vec<TaskExample> {
        let cfg = MmTaskConfig { n_distractors: 2, max_seq_len: 32 };
        gen_mm_task(5, n, world, InsertPolicy::Random, cfg).unwrap()
    }

    fn cfg(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            ..TrainConfig::for_stage(stage)
        }
    }

    #[test]
    fn zero_steps_change_nothing() {
        let w = world();
        let mut m = model(&w, false);
        let before = m.params().to_vec();
        let report = train(&mut m, &text(&w, 4), &cfg(Stage::PretrainText, 0)).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn stage1_touches_only_projector_and_visual_learners() {
        let w = world();
        let mut m = model(&w, true);
        let before = m.clone();
        train(&mut m, &mm(&w, 16), &cfg(Stage::Stage1, 3)).unwrap();
        for (i, g) in m.groups().iter().enumerate() {
            let same = m.params()[i].values() == before.params()[i].values();
            match g {
                ParamGroup::Projector | ParamGroup::VisualLearner => {}
                _ => assert!(same, "{} changed", m.names()[i]),
            }
        }
        let p = m.param_index("projector").unwrap();
        assert_ne!(m.params()[p], before.params()[p]);
        assert_eq!(m.encoder(), before.encoder());
    }

    #[test]
    fn stage_configs_are_validated() {
        let w = world();
        let base = model(&w, false);
        assert!(cfg(Stage::Stage1, 1).validate(&base).is_err());
        let m = model(&w, true);
        let mut c = cfg(Stage::Stage1, 1);
        c.filter.push(ParamGroup::Router);
        assert!(c.validate(&m).is_err());
        let mut c = cfg(Stage::Stage2, 1);
        c.projector_scale = 1.0;
        assert!(c.validate(&m).is_err());
        let mut c = cfg(Stage::PretrainText, 1);
        c.filter.clear();
        assert!(c.validate(&m).is_err());
        let mut c = cfg(Stage::BaselineFt, 1);
        c.filter.push(ParamGroup::TextualLearner);
        assert!(c.validate(&m).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let w = world();
        let data = text(&w, 16);
        let run = || {
            let mut m = model(&w, false);
            let r = train(&mut m, &data, &cfg(Stage::PretrainText, 4)).unwrap();
            (m.params().to_vec(), r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn overfits_a_small_set() {
        let w = world();
        let data = text(&w, 32);
        let mut m = model(&w, false);
        let c = TrainConfig {
            lr: 3e-3,
            adamw: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            ..cfg(Stage::PretrainText, 200)
        };
        let report = train(&mut m, &data, &c).unwrap();
        let last = report.losses[report.losses.len() - 8..].iter().sum::<f64>() / 8.0;
        assert!(last < 0.1 * report.losses[0], "{} -> {last}", report.losses[0]);
        let acc = evaluate(&m, &data, ForwardMode::Baseline, AnswerSpace::Full).unwrap();
        assert_eq!(acc.accuracy(TaskFamily::TextRecall), 1.0);
    }

    #[test]
    fn untrained_model_is_at_chance_on_classification() {
        let w = world();
        let m = model(&w, false);
        let report = evaluate(&m, &mm(&w, 2000), ForwardMode::Baseline, AnswerSpace::Family(w.vocab)).unwrap();
        let acc = report.accuracy(TaskFamily::VisualClass);
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0], 0..4), 1);
        assert_eq!(argmax(&[5.0, 2.0, 2.0, 1.0], 1..4), 1);
    }
}
