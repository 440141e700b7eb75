//! The `wings-lab` command line.
//!
//! Settings come from an optional flat key-value file (`--config`) and from
//! flags; flags win. Config grammar, one setting per line:
//!
//! ```text
//! # comment
//! key = value        # keys are flag names, `-` or `_`
//! pattern = "TTV"    # double quotes force a string
//! ```
//!
//! Every run writes `manifest.json` and a fully resolved `config.kv` into
//! its run directory; `--config` accepts either file to repeat the run.
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::laws::{corpus_curves, curves_to_csv, curves_to_json, ShiftReport};
use crate::model::{frozen_encoder, Batch, ForwardMode, Model, ModelConfig};
use crate::synth::{
    gen_interleaved_eval, gen_mm_task, gen_text_task, make_visual_world, read_jsonl, write_jsonl, InsertPolicy,
    MmTaskConfig, Pattern, TaskExample, TextTaskConfig, Vocab, WorldConfig,
};
use crate::train::study::{self, CorrelationConfig, ForgettingConfig, GridPoint, StudySetup};
use crate::train::{evaluate, train, AnswerSpace, Stage, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Published JSON schemas for each subcommand's standard-output summary.
pub const SUMMARY_SCHEMAS: [(&str, &str); 6] = [
    ("gen-data", include_str!("../schemas/gen-data.json")),
    ("train", include_str!("../schemas/train.json")),
    ("eval", include_str!("../schemas/eval.json")),
    ("analyze-laws", include_str!("../schemas/analyze-laws.json")),
    ("study-forgetting", include_str!("../schemas/study-forgetting.json")),
    ("study-correlation", include_str!("../schemas/study-correlation.json")),
];

#[derive(Parser)]
#[command(name = "wings-lab", version, about = "Multimodal attention learners, LAWS diagnostics and forgetting studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train one stage and write checkpoints.
    Train(TrainArgs),
    /// Greedy accuracy per task family and interleave pattern.
    Eval(EvalArgs),
    /// Layer-level attention curves and the attention-shift statistic.
    AnalyzeLaws(LawsArgs),
    /// Plain fine-tuning versus the two-stage learner recipe over seeds.
    StudyForgetting(ForgettingArgs),
    /// Attention shift versus text degradation over a config grid.
    StudyCorrelation(CorrelationArgs),
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct Common {
    /// Flat key-value settings file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Run directory for every artifact.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct WorldArgs {
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    d_image: Option<usize>,
    #[arg(long)]
    n_vis: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    world: WorldArgs,
    /// text_recall, visual_class, mixed or interleaved.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Interleave pattern over T and V, e.g. TTV.
    #[arg(long)]
    pattern: Option<String>,
    /// start, middle or random.
    #[arg(long)]
    insert_policy: Option<String>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    n_distractors: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct ModelArgs {
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    lorra_rank: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    /// pretrain_text, stage1, stage2 or baseline_ft.
    #[arg(long)]
    stage: Option<String>,
    /// Dataset file or directory produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Starting checkpoint; a fresh model when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    projector_scale: Option<f64>,
    #[arg(long)]
    learner_scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// baseline, wings or wings_stage1; defaults to wings when learners exist.
    #[arg(long)]
    mode: Option<String>,
    /// family (answer among the family's tokens) or full.
    #[arg(long)]
    answer_space: Option<String>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct LawsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// Example whose per-head attention is exported.
    #[arg(long)]
    trace_index: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct SetupArgs {
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    n_text_train: Option<usize>,
    #[arg(long)]
    n_mm_train: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    stage2_steps: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct ForgettingArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    setup: SetupArgs,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    baseline_lr: Option<f64>,
    #[arg(long)]
    baseline_steps: Option<usize>,
    #[arg(long)]
    text_replay: Option<bool>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct CorrelationArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    setup: SetupArgs,
    /// Comma-separated stage-2 rates.
    #[arg(long)]
    grid_lr: Option<String>,
    /// Comma-separated stage-2 step counts.
    #[arg(long)]
    grid_steps: Option<String>,
    /// Comma-separated learner ranks.
    #[arg(long)]
    grid_rank: Option<String>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other.into()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses the flat key-value grammar described in the module docs.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(format!("line {}: empty key or value", n + 1));
        }
        if out.insert(key.clone(), value.to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{key}`", n + 1));
        }
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn kv_value(raw: &str) -> Value {
    if let Some(s) = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        return Value::String(s.to_string());
    }
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_))) => v,
        _ => Value::String(raw.to_string()),
    }
}

/// Renders resolved settings in the same grammar [`parse_kv`] reads.
pub fn to_kv(settings: &Map<String, Value>) -> String {
    let mut out = String::new();
    for (k, v) in settings {
        let rendered = match v {
            Value::Null => continue,
            Value::String(s) if matches!(kv_value(s), Value::String(_)) && !s.contains('#') => s.clone(),
            Value::String(s) => format!("\"{s}\""),
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {rendered}\n"));
    }
    out
}

/// Settings from `--config`: a key-value file, or a run's `manifest.json`.
fn config_settings(path: &Path, subcommand: &str) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let manifest: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if manifest["subcommand"] != subcommand {
            return Err(usage(format!("{} is a {} manifest", path.display(), manifest["subcommand"])));
        }
        return match &manifest["config"] {
            Value::Object(m) => Ok(m.clone()),
            _ => Err(usage(format!("{}: manifest has no config object", path.display()))),
        };
    }
    let kv = parse_kv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(kv.into_iter().map(|(k, v)| (k, kv_value(&v))).collect())
}

/// Overlays flags on the config settings and checks every key is known.
fn resolve<T: Serialize + DeserializeOwned + Default>(args: &T, config: Option<&Path>, subcommand: &str) -> CliResult<T> {
    let known = match serde_json::to_value(T::default()).expect("args serialize") {
        Value::Object(m) => m,
        _ => unreachable!("argument structs serialize to objects"),
    };
    let mut merged = Map::new();
    if let Some(path) = config {
        for (k, v) in config_settings(path, subcommand)? {
            if !known.contains_key(&k) {
                return Err(usage(format!("{}: unknown setting `{k}`", path.display())));
            }
            merged.insert(k, v);
        }
    }
    if let Value::Object(flags) = serde_json::to_value(args).expect("args serialize") {
        for (k, v) in flags {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid setting: {e}")))
}

fn settings_map<T: Serialize>(args: &T) -> Map<String, Value> {
    match serde_json::to_value(args).expect("args serialize") {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    tool_version: &'a str,
    seed: Option<u64>,
    config: Map<String, Value>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

struct Run {
    name: &'static str,
    dir: PathBuf,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(name: &'static str, out: Option<&PathBuf>) -> CliResult<Self> {
        let dir = out.cloned().ok_or_else(|| usage("--out is required"))?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            name,
            dir,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        self.outputs.push(p.clone());
        p
    }

    fn write(&mut self, file: &str, contents: &str) -> CliResult<PathBuf> {
        let p = self.path(file);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Writes `config.kv` and `manifest.json`, then prints the summary.
    fn finish<T: Serialize>(mut self, settings: &T, seed: Option<u64>, result: Value) -> CliResult<()> {
        let map = settings_map(settings);
        self.write("config.kv", &to_kv(&map))?;
        let manifest_path = self.path("manifest.json");
        let show = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        let manifest = RunManifest {
            subcommand: self.name,
            tool_version: VERSION,
            seed,
            config: map,
            inputs: show(&self.inputs),
            outputs: show(&self.outputs),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).with_context(|| format!("writing {}", manifest_path.display()))?;
        let summary = json!({
            "subcommand": self.name,
            "run_dir": self.dir.display().to_string(),
            "manifest": manifest_path.display().to_string(),
            "outputs": show(&self.outputs),
            "result": result,
        });
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        Ok(())
    }
}

fn parse_or_usage<T: std::str::FromStr<Err = crate::Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: crate::Error| usage(e.to_string()))
}

fn world_config(w: &WorldArgs, seed: u64) -> WorldConfig {
    let d = WorldConfig::default();
    WorldConfig {
        seed: w.world_seed.unwrap_or(seed),
        d_image: w.d_image.unwrap_or(d.d_image),
        n_vis: w.n_vis.unwrap_or(d.n_vis),
        n_classes: w.n_classes.unwrap_or(d.n_classes),
        vocab_size: w.vocab_size.unwrap_or(d.vocab_size),
        noise: w.noise.unwrap_or(d.noise),
    }
}

fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut a = resolve(&args, args.common.config.as_deref(), "gen-data")?;
    let seed = *a.common.seed.get_or_insert(0);
    let task = a.task.get_or_insert_with(|| "text_recall".into()).clone();
    let n = *a.n.get_or_insert(1000);
    let wc = world_config(&a.world, seed);
    let max_seq_len = *a.world.max_seq_len.get_or_insert(ModelConfig::default().max_seq_len);
    a.world = WorldArgs {
        world_seed: Some(wc.seed),
        noise: Some(wc.noise),
        n_classes: Some(wc.n_classes),
        d_image: Some(wc.d_image),
        n_vis: Some(wc.n_vis),
        vocab_size: Some(wc.vocab_size),
        max_seq_len: Some(max_seq_len),
    };
    let text = TextTaskConfig {
        n_pairs: *a.n_pairs.get_or_insert(3),
        max_seq_len,
    };
    let mm = MmTaskConfig {
        n_distractors: *a.n_distractors.get_or_insert(2),
        max_seq_len,
    };
    let policy: InsertPolicy = parse_or_usage(a.insert_policy.get_or_insert_with(|| "random".into()))?;
    let world = make_visual_world(&wc).map_err(|e| usage(e.to_string()))?;
    let examples = match task.as_str() {
        "text_recall" => gen_text_task(seed, n, &world.vocab, text)?,
        "visual_class" => gen_mm_task(seed, n, &world, policy, mm)?,
        "mixed" => {
            let t = gen_text_task(seed, n / 2, &world.vocab, text)?;
            let v = gen_mm_task(seed, n - n / 2, &world, policy, mm)?;
            let mut out = Vec::with_capacity(n);
            let (mut ti, mut vi) = (t.into_iter(), v.into_iter());
            for i in 0..n {
                let next = if i % 2 == 0 { vi.next().or_else(|| ti.next()) } else { ti.next().or_else(|| vi.next()) };
                out.extend(next);
            }
            out
        }
        "interleaved" => {
            let pattern: Pattern = parse_or_usage(a.pattern.get_or_insert_with(|| "TTV".into()))?;
            gen_interleaved_eval(seed, n, &pattern, &world, text, mm)?
        }
        other => return Err(usage(format!("unknown task `{other}`"))),
    };
    let mut run = Run::start("gen-data", a.common.out.as_ref())?;
    let data = run.path("data.jsonl");
    write_jsonl(&data, &examples)?;
    let world_path = run.write("world.json", &serde_json::to_string_pretty(&wc).expect("world serializes"))?;
    let result = json!({
        "task": task,
        "records": examples.len(),
        "data": data.display().to_string(),
        "world": world_path.display().to_string(),
    });
    run.finish(&a, Some(seed), result)
}

/// Dataset file plus the world description stored beside it, if any.
fn load_data(path: &Path) -> CliResult<(PathBuf, Vec<TaskExample>, Option<WorldConfig>)> {
    let file = if path.is_dir() { path.join("data.jsonl") } else { path.to_path_buf() };
    let examples = read_jsonl(&file)?;
    let world_path = file.parent().unwrap_or(Path::new(".")).join("world.json");
    let world = match fs::read_to_string(&world_path) {
        Ok(text) => Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", world_path.display()))?),
        Err(_) => None,
    };
    Ok((file, examples, world))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn train_cmd(args: TrainArgs) -> CliResult<()> {
    let mut a = resolve(&args, args.common.config.as_deref(), "train")?;
    let seed = *a.common.seed.get_or_insert(0);
    let stage_name = a.stage.get_or_insert_with(|| "pretrain_text".into()).clone();
    let stage = Stage::parse(&stage_name).ok_or_else(|| usage(format!("unknown stage `{stage_name}`")))?;
    let defaults = TrainConfig::for_stage(stage);
    let cfg = TrainConfig {
        lr: *a.lr.get_or_insert(defaults.lr),
        projector_scale: *a.projector_scale.get_or_insert(defaults.projector_scale),
        learner_scale: *a.learner_scale.get_or_insert(defaults.learner_scale),
        batch_size: *a.batch_size.get_or_insert(defaults.batch_size),
        steps: *a.steps.get_or_insert(defaults.steps),
        warmup_frac: *a.warmup_frac.get_or_insert(defaults.warmup_frac),
        adamw: crate::train::AdamWConfig {
            weight_decay: *a.weight_decay.get_or_insert(defaults.adamw.weight_decay),
            ..defaults.adamw
        },
        seed,
        ..defaults
    };
    let data_arg = required(&a.data, "data")?.clone();
    let mut run = Run::start("train", a.common.out.as_ref())?;
    let (data_file, examples, world) = load_data(&data_arg)?;
    run.inputs.push(data_file);
    let mut model = match a.init.clone() {
        Some(init) => {
            run.inputs.push(init.clone());
            a.model = ModelArgs::default();
            Model::load(&init)?
        }
        None => {
            let world = world.unwrap_or_default();
            let d = ModelConfig::default();
            let d_model = *a.model.d_model.get_or_insert(d.d_model);
            let config = ModelConfig {
                n_layers: *a.model.n_layers.get_or_insert(d.n_layers),
                d_model,
                n_heads: *a.model.n_heads.get_or_insert(d.n_heads),
                vocab_size: world.vocab_size,
                max_seq_len: *a.model.max_seq_len.get_or_insert(d.max_seq_len),
                d_image: world.d_image,
                lorra_rank: *a.model.lorra_rank.get_or_insert(crate::model::default_rank(d_model)),
                seed: *a.model.model_seed.get_or_insert(seed),
            };
            Model::new(config, frozen_encoder(world.seed, world.d_image)).map_err(|e| usage(e.to_string()))?
        }
    };
    if matches!(stage, Stage::Stage1 | Stage::Stage2) {
        model.attach_wings(seed);
    }
    let init_path = run.path("init.ckpt");
    model.save(&init_path)?;
    let report = train(&mut model, &examples, &cfg)?;
    let ckpt = run.path("model.ckpt");
    model.save(&ckpt)?;
    let mut csv = String::from("step,loss,rate\n");
    for (i, (l, r)) in report.losses.iter().zip(&report.rates).enumerate() {
        csv.push_str(&format!("{i},{l},{r}\n"));
    }
    run.write("loss.csv", &csv)?;
    let result = json!({
        "stage": stage.name(),
        "steps": cfg.steps,
        "initial_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "checkpoint": ckpt.display().to_string(),
    });
    run.finish(&a, Some(seed), result)
}

fn forward_mode(mode: &mut Option<String>, model: &Model) -> CliResult<ForwardMode> {
    let name = mode
        .get_or_insert_with(|| if model.has_wings() { "wings" } else { "baseline" }.into())
        .clone();
    let m = match name.as_str() {
        "baseline" => ForwardMode::Baseline,
        "wings" => ForwardMode::Wings,
        "wings_stage1" => ForwardMode::WingsStage1,
        other => return Err(usage(format!("unknown mode `{other}`"))),
    };
    if m != ForwardMode::Baseline && !model.has_wings() {
        return Err(usage(format!("mode `{name}` needs a checkpoint with learners")));
    }
    Ok(m)
}

fn eval_cmd(args: EvalArgs) -> CliResult<()> {
    let mut a = resolve(&args, args.common.config.as_deref(), "eval")?;
    let ckpt = required(&a.ckpt, "ckpt")?.clone();
    let data_arg = required(&a.data, "data")?.clone();
    let mut run = Run::start("eval", a.common.out.as_ref())?;
    let model = Model::load(&ckpt)?;
    let (data_file, examples, world) = load_data(&data_arg)?;
    run.inputs.extend([ckpt, data_file]);
    let mode = forward_mode(&mut a.mode, &model)?;
    let space = match a.answer_space.get_or_insert_with(|| "family".into()).as_str() {
        "full" => AnswerSpace::Full,
        "family" => {
            let n_classes = world.map_or(WorldConfig::default().n_classes, |w| w.n_classes);
            AnswerSpace::Family(Vocab::new(model.config().vocab_size, n_classes)?)
        }
        other => return Err(usage(format!("unknown answer space `{other}`"))),
    };
    let report = evaluate(&model, &examples, mode, space)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    run.write("eval.json", &serde_json::to_string_pretty(&value).expect("json"))?;
    let families: Map<String, Value> = report
        .families
        .iter()
        .map(|(k, acc)| (k.clone(), json!({"correct": acc.correct, "total": acc.total, "accuracy": acc.value()})))
        .collect();
    let patterns: Map<String, Value> = report
        .patterns
        .iter()
        .map(|(k, turns)| (k.clone(), Value::Array(turns.iter().map(|t| json!(t.value())).collect())))
        .collect();
    run.finish(&a, None, json!({"families": families, "patterns": patterns}))
}

fn laws_cmd(args: LawsArgs) -> CliResult<()> {
    let mut a = resolve(&args, args.common.config.as_deref(), "analyze-laws")?;
    let ckpt = required(&a.ckpt, "ckpt")?.clone();
    let data_arg = required(&a.data, "data")?.clone();
    let mut run = Run::start("analyze-laws", a.common.out.as_ref())?;
    let model = Model::load(&ckpt)?;
    let (data_file, examples, _) = load_data(&data_arg)?;
    run.inputs.extend([ckpt, data_file]);
    if examples.is_empty() {
        return Err(CliError::Runtime(anyhow!("dataset is empty")));
    }
    let mode = forward_mode(&mut a.mode, &model)?;
    let trace_index = *a.trace_index.get_or_insert(0);
    let mut traced = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let seqs: Vec<_> = chunk.iter().map(|e| &e.sequence).collect();
        let batch = Batch::from_refs(&seqs, model.config())?;
        for (b, trace) in model.infer(&batch, mode)?.traces.into_iter().enumerate() {
            traced.push((trace, batch.segment_layout(b)));
        }
    }
    let curves = corpus_curves(&traced)?;
    let shift: Option<ShiftReport> = crate::laws::attention_shift(&traced).ok();
    run.write("curves.csv", &curves_to_csv(&curves, shift.as_ref()))?;
    run.write("curves.json", &curves_to_json(&curves, shift.as_ref()))?;
    if let Some((trace, _)) = traced.get(trace_index) {
        for l in 0..trace.n_layers() {
            run.write(&format!("trace_layer{}.csv", l + 1), &trace.to_csv(l))?;
        }
    }
    let result = json!({
        "layers": model.config().n_layers,
        "sequences": traced.len(),
        "shift_mean": shift.as_ref().map(|s| s.mean),
        "shift_sequences": shift.as_ref().map_or(0, ShiftReport::sequences),
        "skipped": shift.as_ref().map_or(traced.len(), |s| s.skipped),
    });
    run.finish(&a, None, result)
}

fn apply_setup(s: &mut SetupArgs, setup: &mut StudySetup, stage1: &mut TrainConfig, stage2: &mut TrainConfig) {
    setup.world.noise = *s.noise.get_or_insert(setup.world.noise);
    setup.n_eval = *s.n_eval.get_or_insert(setup.n_eval);
    setup.n_text_train = *s.n_text_train.get_or_insert(setup.n_text_train);
    setup.n_mm_train = *s.n_mm_train.get_or_insert(setup.n_mm_train);
    setup.pretrain.lr = *s.pretrain_lr.get_or_insert(setup.pretrain.lr);
    setup.pretrain.steps = *s.pretrain_steps.get_or_insert(setup.pretrain.steps);
    setup.gate = *s.gate.get_or_insert(setup.gate);
    stage1.lr = *s.stage1_lr.get_or_insert(stage1.lr);
    stage1.steps = *s.stage1_steps.get_or_insert(stage1.steps);
    stage2.lr = *s.stage2_lr.get_or_insert(stage2.lr);
    stage2.steps = *s.stage2_steps.get_or_insert(stage2.steps);
}

fn forgetting_cmd(args: ForgettingArgs) -> CliResult<()> {
    let mut a = resolve(&args, args.common.config.as_deref(), "study-forgetting")?;
    let seed = *a.common.seed.get_or_insert(0);
    let n_seeds = *a.seeds.get_or_insert(10);
    let mut cfg = ForgettingConfig {
        base_seed: seed,
        ..ForgettingConfig::default()
    };
    apply_setup(&mut a.setup, &mut cfg.setup, &mut cfg.stage1, &mut cfg.stage2);
    cfg.baseline.lr = *a.baseline_lr.get_or_insert(cfg.baseline.lr);
    cfg.baseline.steps = *a.baseline_steps.get_or_insert(cfg.baseline.steps);
    cfg.text_replay = *a.text_replay.get_or_insert(false);
    let mut run = Run::start("study-forgetting", a.common.out.as_ref())?;
    let report = study::forgetting_study(&cfg, n_seeds)?;
    let path = run.write("report.json", &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let result = json!({
        "seeds": report.seeds.len(),
        "valid": report.n_valid,
        "wings_wins": report.wings_wins,
        "baseline_mean_degradation": report.baseline_mean_degradation,
        "wings_mean_degradation": report.wings_mean_degradation,
        "baseline_mean_visual": report.baseline_mean_visual,
        "wings_mean_visual": report.wings_mean_visual,
        "report": path.display().to_string(),
    });
    run.finish(&a, Some(seed), result)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| usage(format!("bad {what} entry `{x}`"))))
        .collect()
}

fn correlation_cmd(args: CorrelationArgs) -> CliResult<()> {
    let mut a = resolve(&args, args.common.config.as_deref(), "study-correlation")?;
    let seed = *a.common.seed.get_or_insert(0);
    let mut cfg = CorrelationConfig {
        seed,
        ..CorrelationConfig::default()
    };
    apply_setup(&mut a.setup, &mut cfg.setup, &mut cfg.stage1, &mut cfg.stage2);
    let lrs: Vec<f64> = parse_list(a.grid_lr.get_or_insert_with(|| "0.0001,0.0005,0.002".into()), "grid_lr")?;
    let steps: Vec<usize> = parse_list(a.grid_steps.get_or_insert_with(|| "100,300".into()), "grid_steps")?;
    let ranks: Vec<usize> = parse_list(a.grid_rank.get_or_insert_with(|| "4,8".into()), "grid_rank")?;
    cfg.grid = lrs
        .iter()
        .flat_map(|&lr| {
            let ranks = &ranks;
            steps
                .iter()
                .flat_map(move |&steps| ranks.iter().map(move |&rank| GridPoint { lr, steps, rank }))
        })
        .collect();
    let mut run = Run::start("study-correlation", a.common.out.as_ref())?;
    let report = study::correlation_study(&cfg)?;
    let path = run.write("report.json", &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let result = json!({
        "points": report.runs.len(),
        "correlation": report.correlation,
        "inconclusive": report.inconclusive,
        "report": path.display().to_string(),
    });
    run.finish(&a, Some(seed), result)
}

fn configure_threads() {
    if let Some(n) = std::env::var("WINGS_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a global pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AnalyzeLaws(a) => laws_cmd(a),
        Command::StudyForgetting(a) => forgetting_cmd(a),
        Command::StudyCorrelation(a) => correlation_cmd(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `wings-lab --help` for usage.");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_grammar() {
        let kv = parse_kv("# run\nsteps = 10\nlr=1e-3 # peak\npattern = \"T#V\"\nout-dir = a b\n").unwrap();
        assert_eq!(kv["steps"], "10");
        assert_eq!(kv["lr"], "1e-3");
        assert_eq!(kv["pattern"], "\"T#V\"");
        assert_eq!(kv["out_dir"], "a b");
        assert!(parse_kv("x = 1\nx = 2").is_err());
        assert!(parse_kv("novalue").is_err());
    }

    #[test]
    fn kv_round_trip_keeps_types() {
        let mut m = Map::new();
        m.insert("steps".into(), json!(10));
        m.insert("lr".into(), json!(0.001));
        m.insert("stage".into(), json!("stage1"));
        m.insert("pattern".into(), json!("12"));
        m.insert("replay".into(), json!(false));
        let back: Map<String, Value> = parse_kv(&to_kv(&m))
            .unwrap()
            .into_iter()
            .map(|(k, v)| (k, kv_value(&v)))
            .collect();
        assert_eq!(back, m);
    }
}
