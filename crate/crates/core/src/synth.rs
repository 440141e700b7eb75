//! Deterministic synthetic tasks: key-value recall over text, image
//! classification through a frozen random encoder, and interleaved
//! multi-turn sequences mixing both.
//!
//! Every example is generated from its own RNG seeded by `(seed, family,
//! index)`, so sets are pure functions of their arguments and can be
//! produced in parallel without changing a byte.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{frozen_encoder, TokenSequence};
use crate::tensor::Tensor;

/// Reserved token ids and the key/value/label ranges.
///
/// `0..4` are separators, `4..20` keys, `20..36` values, labels from 36.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub n_classes: usize,
}

impl Vocab {
    pub const SEP: usize = 0;
    pub const QUERY: usize = 1;
    pub const CLASS_QUERY: usize = 2;
    pub const PAD: usize = 3;
    const FIRST_KEY: usize = 4;

    pub fn new(size: usize, n_classes: usize) -> Result<Self> {
        let v = Vocab {
            size,
            n_keys: 16,
            n_values: 16,
            n_classes,
        };
        if n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if v.labels().end > size {
            return Err(Error::Config(format!(
                "{n_classes} label tokens do not fit in a vocabulary of {size} (need {})",
                v.labels().end
            )));
        }
        Ok(v)
    }

    pub fn keys(&self) -> std::ops::Range<usize> {
        Self::FIRST_KEY..Self::FIRST_KEY + self.n_keys
    }

    pub fn values(&self) -> std::ops::Range<usize> {
        let start = self.keys().end;
        start..start + self.n_values
    }

    pub fn labels(&self) -> std::ops::Range<usize> {
        let start = self.values().end;
        start..start + self.n_classes
    }

    pub fn label(&self, class: usize) -> usize {
        self.labels().start + class
    }

    /// Tokens a greedy answer for `family` is chosen among.
    pub fn answer_set(&self, family: TaskFamily) -> std::ops::Range<usize> {
        match family {
            TaskFamily::TextRecall => self.values(),
            TaskFamily::VisualClass => self.labels(),
            TaskFamily::Mixed => 0..self.size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    TextRecall,
    VisualClass,
    Mixed,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::TextRecall => "text_recall",
            TaskFamily::VisualClass => "visual_class",
            TaskFamily::Mixed => "mixed",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskFamily::TextRecall, TaskFamily::VisualClass, TaskFamily::Mixed]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertPolicy {
    Start,
    Middle,
    Random,
}

impl FromStr for InsertPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(InsertPolicy::Start),
            "middle" => Ok(InsertPolicy::Middle),
            "random" => Ok(InsertPolicy::Random),
            _ => Err(Error::Config(format!("unknown insert policy `{s}`"))),
        }
    }
}

/// One scored question inside an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub family: TaskFamily,
    /// Position whose next-token prediction answers the question.
    pub position: usize,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub family: TaskFamily,
    /// Interleave pattern such as `TTV`; empty for single-turn examples.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub pattern: String,
    pub sequence: TokenSequence,
    pub turns: Vec<Turn>,
}

impl TaskExample {
    pub fn answers(&self) -> Vec<usize> {
        self.turns.iter().map(|t| t.answer).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub d_image: usize,
    pub n_vis: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    /// Standard deviation of the per-entry Gaussian noise added to a prototype.
    pub noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            d_image: 16,
            n_vis: 4,
            n_classes: 4,
            vocab_size: 64,
            noise: 1.5,
        }
    }
}

/// Frozen encoder, class prototypes and label tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualWorld {
    pub seed: u64,
    pub encoder: Tensor,
    /// One `n_vis × d_image` patch matrix per class.
    pub prototypes: Vec<Tensor>,
    pub vocab: Vocab,
    pub noise: f64,
}

impl VisualWorld {
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn n_vis(&self) -> usize {
        self.prototypes[0].rows()
    }

    pub fn d_image(&self) -> usize {
        self.encoder.rows()
    }

    /// Prototype plus noise, as `n_vis` patch rows.
    pub fn sample_image<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let proto = &self.prototypes[class];
        (0..proto.rows())
            .map(|i| {
                proto
                    .row(i)
                    .iter()
                    .map(|&p| {
                        let z: f64 = StandardNormal.sample(rng);
                        p + self.noise * z
                    })
                    .collect()
            })
            .collect()
    }

    /// Class whose prototype is nearest in squared distance (ties to the lower index).
    pub fn nearest_prototype(&self, image: &[Vec<f64>]) -> usize {
        let dist = |proto: &Tensor| -> f64 {
            image
                .iter()
                .enumerate()
                .map(|(i, row)| row.iter().zip(proto.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum()
        };
        let mut best = (0, f64::INFINITY);
        for (c, proto) in self.prototypes.iter().enumerate() {
            let d = dist(proto);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

pub fn make_visual_world(cfg: &WorldConfig) -> Result<VisualWorld> {
    let vocab = Vocab::new(cfg.vocab_size, cfg.n_classes)?;
    if cfg.d_image == 0 || cfg.n_vis == 0 {
        return Err(Error::Config("d_image and n_vis must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("noise must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let prototypes = (0..cfg.n_classes)
        .map(|_| Tensor::randn(&[cfg.n_vis, cfg.d_image], 1.0, &mut rng))
        .collect();
    Ok(VisualWorld {
        seed: cfg.seed,
        encoder: frozen_encoder(cfg.seed, cfg.d_image),
        prototypes,
        vocab,
        noise: cfg.noise,
    })
}

fn example_rng(seed: u64, family: TaskFamily, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(family.tag());
    rng.set_word_pos(0);
    let base: u64 = rng.gen();
    ChaCha8Rng::seed_from_u64(base ^ (index as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// `n` distinct (key, value) pairs, flattened.
fn kv_pairs<R: Rng + ?Sized>(vocab: &Vocab, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let keys: Vec<usize> = vocab.keys().collect();
    let values: Vec<usize> = vocab.values().collect();
    let k = keys.choose_multiple(rng, n);
    let v = values.choose_multiple(rng, n);
    k.copied().zip(v.copied()).collect()
}

fn flatten(pairs: &[(usize, usize)]) -> Vec<usize> {
    pairs.iter().flat_map(|&(k, v)| [k, v]).collect()
}

/// Token layout of one recall prompt: pairs, `QUERY`, queried key.
fn recall_tokens<R: Rng + ?Sized>(vocab: &Vocab, n_pairs: usize, rng: &mut R) -> (Vec<usize>, usize) {
    let pairs = kv_pairs(vocab, n_pairs, rng);
    let (key, value) = pairs[rng.gen_range(0..n_pairs)];
    let mut tokens = flatten(&pairs);
    tokens.extend([Vocab::QUERY, key]);
    (tokens, value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTaskConfig {
    pub n_pairs: usize,
    pub max_seq_len: usize,
}

pub fn recall_len(n_pairs: usize) -> usize {
    2 * n_pairs + 2
}

pub fn gen_text_task(seed: u64, n: usize, vocab: &Vocab, cfg: TextTaskConfig) -> Result<Vec<TaskExample>> {
    if cfg.n_pairs == 0 || cfg.n_pairs > vocab.n_keys.min(vocab.n_values) {
        return Err(Error::Config(format!("n_pairs {} outside [1, {}]", cfg.n_pairs, vocab.n_keys)));
    }
    let s = recall_len(cfg.n_pairs);
    if s > cfg.max_seq_len {
        return Err(Error::Config(format!("{} pairs need {s} positions, max_seq_len is {}", cfg.n_pairs, cfg.max_seq_len)));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = example_rng(seed, TaskFamily::TextRecall, i);
            let (tokens, answer) = recall_tokens(vocab, cfg.n_pairs, &mut rng);
            let mut targets = vec![None; s];
            targets[s - 1] = Some(answer);
            TaskExample {
                family: TaskFamily::TextRecall,
                pattern: String::new(),
                sequence: TokenSequence::text(tokens, targets),
                turns: vec![Turn {
                    family: TaskFamily::TextRecall,
                    position: s - 1,
                    answer,
                }],
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmTaskConfig {
    /// Class-independent key-value pairs placed around the image.
    pub n_distractors: usize,
    pub max_seq_len: usize,
}

pub fn mm_len(n_distractors: usize, n_vis: usize) -> usize {
    2 * n_distractors + n_vis + 1
}

/// Splits distractor pairs into (before, after) counts.
fn split_pairs<R: Rng + ?Sized>(n: usize, policy: InsertPolicy, rng: &mut R) -> usize {
    match policy {
        InsertPolicy::Start => 0,
        InsertPolicy::Middle => n.div_ceil(2),
        InsertPolicy::Random => rng.gen_range(0..=n),
    }
}

/// `(pre, image, post, answer)`; post ends with `CLASS_QUERY`.
fn mm_parts<R: Rng + ?Sized>(
    world: &VisualWorld,
    n_distractors: usize,
    policy: InsertPolicy,
    rng: &mut R,
) -> (Vec<usize>, Vec<Vec<f64>>, Vec<usize>, usize) {
    let class = rng.gen_range(0..world.n_classes());
    let image = world.sample_image(class, rng);
    let pairs = kv_pairs(&world.vocab, n_distractors, rng);
    let before = split_pairs(n_distractors, policy, rng);
    let pre = flatten(&pairs[..before]);
    let mut post = flatten(&pairs[before..]);
    post.push(Vocab::CLASS_QUERY);
    (pre, image, post, world.vocab.label(class))
}

pub fn gen_mm_task(seed: u64, n: usize, world: &VisualWorld, policy: InsertPolicy, cfg: MmTaskConfig) -> Result<Vec<TaskExample>> {
    let s = mm_len(cfg.n_distractors, world.n_vis());
    if s > cfg.max_seq_len {
        return Err(Error::Config(format!("multimodal prompt needs {s} positions, max_seq_len is {}", cfg.max_seq_len)));
    }
    if cfg.n_distractors > world.vocab.n_keys {
        return Err(Error::Config("too many distractor pairs for the key range".into()));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = example_rng(seed, TaskFamily::VisualClass, i);
            let (pre, image, post, answer) = mm_parts(world, cfg.n_distractors, policy, &mut rng);
            let mut targets = vec![None; s];
            targets[s - 1] = Some(answer);
            TaskExample {
                family: TaskFamily::VisualClass,
                pattern: String::new(),
                sequence: TokenSequence::with_image(pre, image, post, targets),
                turns: vec![Turn {
                    family: TaskFamily::VisualClass,
                    position: s - 1,
                    answer,
                }],
            }
        })
        .collect())
}

/// Interleave pattern over text (`T`) and visual (`V`) turns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern(pub Vec<TaskFamily>);

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let turns = s
            .chars()
            .filter(|c| !matches!(c, ',' | ' ' | '(' | ')'))
            .map(|c| match c.to_ascii_uppercase() {
                'T' => Ok(TaskFamily::TextRecall),
                'V' => Ok(TaskFamily::VisualClass),
                _ => Err(Error::Config(format!("pattern `{s}` may only contain T and V"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if turns.is_empty() {
            return Err(Error::Config("pattern must be nonempty".into()));
        }
        Ok(Pattern(turns))
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            f.write_str(if *t == TaskFamily::TextRecall { "T" } else { "V" })?;
        }
        Ok(())
    }
}

/// Multi-turn sequences: turns are joined by `answer SEP`, so every earlier
/// question is followed by its gold answer and each question is scored at
/// its own position. A `V` turn is a start-inserted multimodal prompt. At
/// most one `V` turn fits the single visual span of a sequence.
pub fn gen_interleaved_eval(
    seed: u64,
    n: usize,
    pattern: &Pattern,
    world: &VisualWorld,
    text: TextTaskConfig,
    mm: MmTaskConfig,
) -> Result<Vec<TaskExample>> {
    let n_v = pattern.0.iter().filter(|&&f| f == TaskFamily::VisualClass).count();
    if n_v > 1 {
        return Err(Error::Config("a sequence holds at most one visual turn".into()));
    }
    let turn_len = |f: TaskFamily| match f {
        TaskFamily::VisualClass => mm_len(mm.n_distractors, world.n_vis()),
        _ => recall_len(text.n_pairs),
    };
    let total: usize = pattern.0.iter().map(|&f| turn_len(f)).sum::<usize>() + 2 * (pattern.0.len() - 1);
    if total > text.max_seq_len {
        return Err(Error::Config(format!(
            "pattern {pattern} needs {total} positions, max_seq_len is {}",
            text.max_seq_len
        )));
    }
    let name = pattern.to_string();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = example_rng(seed ^ 0x1417, TaskFamily::Mixed, i);
            let mut pre = Vec::new();
            let mut image = Vec::new();
            let mut post = Vec::new();
            let mut turns = Vec::new();
            for (t, &family) in pattern.0.iter().enumerate() {
                if t > 0 {
                    let prev: &Turn = turns.last().expect("previous turn");
                    let tail = if image.is_empty() { &mut pre } else { &mut post };
                    tail.extend([prev.answer, Vocab::SEP]);
                }
                let offset = pre.len() + image.len() + post.len();
                match family {
                    TaskFamily::VisualClass => {
                        let (p, img, q, answer) = mm_parts(world, mm.n_distractors, InsertPolicy::Start, &mut rng);
                        pre.extend(p);
                        image = img;
                        post.extend(q);
                        turns.push(Turn {
                            family,
                            position: offset + turn_len(family) - 1,
                            answer,
                        });
                    }
                    _ => {
                        let (tokens, answer) = recall_tokens(&world.vocab, text.n_pairs, &mut rng);
                        let tail = if image.is_empty() { &mut pre } else { &mut post };
                        tail.extend(tokens);
                        turns.push(Turn {
                            family: TaskFamily::TextRecall,
                            position: offset + turn_len(family) - 1,
                            answer,
                        });
                    }
                }
            }
            let s = pre.len() + image.len() + post.len();
            let mut targets = vec![None; s];
            for t in &turns {
                targets[t.position] = Some(t.answer);
            }
            let sequence = if image.is_empty() {
                TokenSequence::text(pre, targets)
            } else {
                TokenSequence::with_image(pre, image, post, targets)
            };
            TaskExample {
                family: if turns.len() == 1 { turns[0].family } else { TaskFamily::Mixed },
                pattern: name.clone(),
                sequence,
                turns,
            }
        })
        .collect())
}

/// Writes one JSON object per line.
pub fn write_jsonl(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// JSON Schema of one dataset line.
pub const EXAMPLE_JSON_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "type": "object",
  "required": ["family", "sequence", "turns"],
  "properties": {
    "family": {"enum": ["text_recall", "visual_class", "mixed"]},
    "pattern": {"type": "string", "pattern": "^[TV]+$"},
    "sequence": {
      "type": "object",
      "required": ["pre_text", "image_latents", "post_text", "targets", "v_start", "v_end"],
      "properties": {
        "pre_text": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "image_latents": {
          "oneOf": [
            {"type": "null"},
            {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
          ]
        },
        "post_text": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "targets": {"type": "array", "items": {"type": ["integer", "null"], "minimum": 0}},
        "v_start": {"type": ["integer", "null"], "minimum": 0},
        "v_end": {"type": ["integer", "null"], "minimum": 0}
      }
    },
    "turns": {
      "type": "array",
      "minItems": 1,
      "items": {
        "type": "object",
        "required": ["family", "position", "answer"],
        "properties": {
          "family": {"enum": ["text_recall", "visual_class"]},
          "position": {"type": "integer", "minimum": 0},
          "answer": {"type": "integer", "minimum": 0}
        }
      }
    }
  }
}"#;
