//! Study drivers: text-only forgetting under plain fine-tuning versus the
//! two-stage learner recipe, and the correlation between attention shift
//! and text degradation across a config grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, train, AnswerSpace, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::laws::{attention_shift, pearson, ShiftReport};
use crate::model::{ForwardMode, Model, ModelConfig};
use crate::synth::{
    gen_mm_task, gen_text_task, make_visual_world, InsertPolicy, MmTaskConfig, TaskExample, TaskFamily, TextTaskConfig,
    VisualWorld, WorldConfig,
};

/// Everything a single study run needs besides the fine-tuning recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySetup {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub text: TextTaskConfig,
    pub mm: MmTaskConfig,
    pub n_text_train: usize,
    pub n_mm_train: usize,
    pub n_eval: usize,
    /// Placement of the image in multimodal training data.
    pub train_policy: InsertPolicy,
    pub pretrain: TrainConfig,
    /// Minimum pretrained text accuracy for a seed to count.
    pub gate: f64,
    pub max_retries: usize,
}

impl Default for StudySetup {
    fn default() -> Self {
        let model = ModelConfig::default();
        StudySetup {
            world: WorldConfig::default(),
            text: TextTaskConfig {
                n_pairs: 3,
                max_seq_len: model.max_seq_len,
            },
            mm: MmTaskConfig {
                n_distractors: 2,
                max_seq_len: model.max_seq_len,
            },
            model,
            n_text_train: 20_000,
            n_mm_train: 4_000,
            n_eval: 500,
            train_policy: InsertPolicy::Random,
            pretrain: TrainConfig::for_stage(Stage::PretrainText),
            gate: 0.95,
            max_retries: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingConfig {
    pub setup: StudySetup,
    pub baseline: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Mix text-only examples into stage-2 data.
    pub text_replay: bool,
    pub base_seed: u64,
}

impl Default for ForgettingConfig {
    fn default() -> Self {
        ForgettingConfig {
            setup: StudySetup::default(),
            baseline: TrainConfig::for_stage(Stage::BaselineFt),
            stage1: TrainConfig::for_stage(Stage::Stage1),
            stage2: TrainConfig::for_stage(Stage::Stage2),
            text_replay: false,
            base_seed: 0,
        }
    }
}

/// One fine-tuned model's measurements. Accuracies are fractions; the
/// degradation is `text_before - text_after` in the same unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub digest: String,
    pub shift: Option<f64>,
    pub text_before: f64,
    pub text_after: f64,
    pub degradation: f64,
    pub visual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Seed actually used after gate retries.
    pub effective_seed: u64,
    pub attempts: usize,
    pub valid: bool,
    pub text_before: f64,
    pub baseline: Option<RunRecord>,
    pub wings: Option<RunRecord>,
}

impl SeedOutcome {
    pub fn wings_wins(&self) -> bool {
        match (&self.baseline, &self.wings) {
            (Some(b), Some(w)) => w.degradation < b.degradation,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub digest: String,
    pub seeds: Vec<SeedOutcome>,
    pub n_valid: usize,
    pub wings_wins: usize,
    pub baseline_mean_degradation: f64,
    pub wings_mean_degradation: f64,
    pub baseline_mean_visual: f64,
    pub wings_mean_visual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Stage-2 main-branch rate.
    pub lr: f64,
    /// Stage-2 steps.
    pub steps: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub setup: StudySetup,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub grid: Vec<GridPoint>,
    pub seed: u64,
}

/// Default 12-point grid: three rates × two step counts × two ranks.
pub fn default_grid() -> Vec<GridPoint> {
    let mut grid = Vec::new();
    for lr in [1e-4, 5e-4, 2e-3] {
        for steps in [100, 300] {
            for rank in [4, 8] {
                grid.push(GridPoint { lr, steps, rank });
            }
        }
    }
    grid
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            setup: StudySetup::default(),
            stage1: TrainConfig::for_stage(Stage::Stage1),
            stage2: TrainConfig::for_stage(Stage::Stage2),
            grid: default_grid(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub digest: String,
    pub pretrain_seed: u64,
    pub text_before: f64,
    pub points: Vec<GridPoint>,
    pub runs: Vec<RunRecord>,
    /// Pearson(shift, degradation); `None` when either varies by zero.
    pub correlation: Option<f64>,
    pub inconclusive: bool,
}

/// Short hex digest of a serializable config.
pub fn config_digest<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let hash = Sha256::digest(json.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Worker count from `WINGS_LAB_THREADS`, else rayon's default.
pub fn worker_threads() -> usize {
    std::env::var("WINGS_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn derive_seed(base: u64, index: u64, attempt: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ attempt.wrapping_mul(0x94d0_49bb_1331_11eb)
}

/// Data and world shared by all branches of one seed.
pub struct SeedData {
    pub world: VisualWorld,
    pub text_train: Vec<TaskExample>,
    pub mm_train: Vec<TaskExample>,
    pub text_eval: Vec<TaskExample>,
    pub mm_eval: Vec<TaskExample>,
    /// Middle-inserted multimodal prompts for the shift statistic.
    pub shift_eval: Vec<TaskExample>,
}

impl SeedData {
    pub fn generate(setup: &StudySetup, seed: u64) -> Result<Self> {
        let world = make_visual_world(&WorldConfig {
            seed,
            ..setup.world.clone()
        })?;
        let s = |k: u64| seed.wrapping_mul(31).wrapping_add(k);
        Ok(SeedData {
            text_train: gen_text_task(s(1), setup.n_text_train, &world.vocab, setup.text)?,
            mm_train: gen_mm_task(s(2), setup.n_mm_train, &world, setup.train_policy, setup.mm)?,
            text_eval: gen_text_task(s(3), setup.n_eval, &world.vocab, setup.text)?,
            mm_eval: gen_mm_task(s(4), setup.n_eval, &world, setup.train_policy, setup.mm)?,
            shift_eval: gen_mm_task(s(5), setup.n_eval.min(200), &world, InsertPolicy::Middle, setup.mm)?,
            world,
        })
    }

    pub fn space(&self) -> AnswerSpace {
        AnswerSpace::Family(self.world.vocab)
    }
}

/// Corpus attention shift of a model's main branch.
pub fn corpus_shift(model: &Model, examples: &[TaskExample], mode: ForwardMode) -> Result<ShiftReport> {
    let mut traced = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let seqs: Vec<_> = chunk.iter().map(|e| &e.sequence).collect();
        let batch = crate::model::Batch::from_refs(&seqs, model.config())?;
        let inference = model.infer(&batch, mode)?;
        for (b, trace) in inference.traces.into_iter().enumerate() {
            traced.push((trace, batch.segment_layout(b)));
        }
    }
    attention_shift(&traced)
}

/// Pretrains a text-only model for `seed`, resampling up to
/// `setup.max_retries` times until the accuracy gate is met.
pub fn pretrain_with_gate(setup: &StudySetup, seed: u64, index: u64) -> Result<(Model, SeedData, u64, usize, f64, bool)> {
    let mut last = None;
    for attempt in 0..=setup.max_retries {
        let effective = if attempt == 0 { seed } else { derive_seed(seed, index, attempt as u64) };
        let data = SeedData::generate(setup, effective)?;
        let mut model = Model::new(
            ModelConfig {
                seed: effective,
                ..setup.model.clone()
            },
            data.world.encoder.clone(),
        )?;
        let cfg = TrainConfig {
            seed: effective,
            ..setup.pretrain.clone()
        };
        train(&mut model, &data.text_train, &cfg)?;
        let acc = evaluate(&model, &data.text_eval, ForwardMode::Baseline, data.space())?.accuracy(TaskFamily::TextRecall);
        let passed = acc >= setup.gate;
        last = Some((model, data, effective, attempt + 1, acc, passed));
        if passed {
            break;
        }
    }
    Ok(last.expect("at least one attempt"))
}

fn record(model: &Model, data: &SeedData, mode: ForwardMode, text_before: f64, digest: &str) -> Result<RunRecord> {
    let text_after = evaluate(model, &data.text_eval, mode, data.space())?.accuracy(TaskFamily::TextRecall);
    let visual = evaluate(model, &data.mm_eval, mode, data.space())?.accuracy(TaskFamily::VisualClass);
    let shift = corpus_shift(model, &data.shift_eval, mode).ok().map(|r| r.mean);
    Ok(RunRecord {
        digest: digest.to_string(),
        shift,
        text_before,
        text_after,
        degradation: text_before - text_after,
        visual,
    })
}

/// Plain fine-tune of the main branch and projector on multimodal data.
pub fn baseline_branch(pretrained: &Model, data: &SeedData, cfg: &TrainConfig, seed: u64) -> Result<Model> {
    let mut model = pretrained.clone();
    train(&mut model, &data.mm_train, &TrainConfig { seed, ..cfg.clone() })?;
    Ok(model)
}

/// Stage 1 then stage 2 on multimodal data, optionally replaying text in stage 2.
pub fn wings_branch(
    pretrained: &Model,
    data: &SeedData,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    text_replay: bool,
    seed: u64,
) -> Result<Model> {
    let mut model = pretrained.clone();
    model.attach_wings(seed);
    train(&mut model, &data.mm_train, &TrainConfig { seed, ..stage1.clone() })?;
    let stage2_data: Vec<TaskExample> = if text_replay {
        data.mm_train.iter().chain(&data.text_train[..data.mm_train.len().min(data.text_train.len())]).cloned().collect()
    } else {
        data.mm_train.clone()
    };
    train(&mut model, &stage2_data, &TrainConfig { seed: seed ^ 2, ..stage2.clone() })?;
    Ok(model)
}

fn forgetting_seed(cfg: &ForgettingConfig, index: u64) -> Result<SeedOutcome> {
    let seed = derive_seed(cfg.base_seed, index, 0);
    let (pretrained, data, effective, attempts, text_before, valid) = pretrain_with_gate(&cfg.setup, seed, index)?;
    let mut outcome = SeedOutcome {
        seed,
        effective_seed: effective,
        attempts,
        valid,
        text_before,
        baseline: None,
        wings: None,
    };
    if !valid {
        return Ok(outcome);
    }
    let baseline = baseline_branch(&pretrained, &data, &cfg.baseline, effective)?;
    outcome.baseline = Some(record(&baseline, &data, ForwardMode::Baseline, text_before, &config_digest(&cfg.baseline))?);
    let wings = wings_branch(&pretrained, &data, &cfg.stage1, &cfg.stage2, cfg.text_replay, effective)?;
    let digest = config_digest(&(&cfg.stage1, &cfg.stage2));
    outcome.wings = Some(record(&wings, &data, ForwardMode::Wings, text_before, &digest)?);
    Ok(outcome)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs `n_seeds` independent seeds in parallel worker slots.
pub fn forgetting_study(cfg: &ForgettingConfig, n_seeds: usize) -> Result<ForgettingReport> {
    if n_seeds < 5 {
        return Err(Error::Config("the forgetting study needs at least 5 seeds".into()));
    }
    let seeds = in_pool(|| {
        (0..n_seeds as u64)
            .into_par_iter()
            .map(|i| forgetting_seed(cfg, i))
            .collect::<Result<Vec<_>>>()
    })??;
    let valid: Vec<&SeedOutcome> = seeds.iter().filter(|s| s.valid).collect();
    let pick = |f: fn(&SeedOutcome) -> Option<&RunRecord>| valid.iter().filter_map(move |s| f(s));
    Ok(ForgettingReport {
        digest: config_digest(cfg),
        n_valid: valid.len(),
        wings_wins: valid.iter().filter(|s| s.wings_wins()).count(),
        baseline_mean_degradation: mean(pick(|s| s.baseline.as_ref()).map(|r| r.degradation)),
        wings_mean_degradation: mean(pick(|s| s.wings.as_ref()).map(|r| r.degradation)),
        baseline_mean_visual: mean(pick(|s| s.baseline.as_ref()).map(|r| r.visual)),
        wings_mean_visual: mean(pick(|s| s.wings.as_ref()).map(|r| r.visual)),
        seeds,
    })
}

/// Trains one learner-equipped model per grid point from a shared
/// pretrained model and correlates attention shift with text degradation.
pub fn correlation_study(cfg: &CorrelationConfig) -> Result<CorrelationReport> {
    if cfg.grid.len() < 2 {
        return Err(Error::Config("the correlation grid needs at least two points".into()));
    }
    let seed = derive_seed(cfg.seed, 0, 0);
    let (pretrained, data, effective, _, text_before, valid) = pretrain_with_gate(&cfg.setup, seed, 0)?;
    if !valid {
        return Err(Error::Config(format!(
            "pretraining reached {text_before:.3} text accuracy, below the {} gate",
            cfg.setup.gate
        )));
    }
    let runs = in_pool(|| {
        cfg.grid
            .par_iter()
            .map(|point| {
                let mut base = pretrained.clone();
                base.set_lorra_rank(point.rank)?;
                let stage2 = TrainConfig {
                    lr: point.lr,
                    steps: point.steps,
                    ..cfg.stage2.clone()
                };
                let model = wings_branch(&base, &data, &cfg.stage1, &stage2, false, effective)?;
                record(&model, &data, ForwardMode::Wings, text_before, &config_digest(point))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let shifts: Vec<f64> = runs.iter().map(|r| r.shift.unwrap_or(f64::NAN)).collect();
    let degradations: Vec<f64> = runs.iter().map(|r| r.degradation).collect();
    let correlation = if shifts.iter().all(|s| s.is_finite()) {
        match pearson(&shifts, &degradations) {
            Ok(r) => Some(r),
            Err(Error::DegenerateVariance) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(CorrelationReport {
        digest: config_digest(cfg),
        pretrain_seed: effective,
        text_before,
        points: cfg.grid.clone(),
        runs,
        inconclusive: correlation.is_none(),
        correlation,
    })
}
