//! Layer-level attention weights per segment and the attention-shift statistic.
//!
//! For layer `l` and segment `V*`, the curve value is the head-averaged
//! attention mass landing on `V*`, summed over all query rows and divided by
//! the query count `s`. The three segments of one sequence therefore
//! partition 1 at every layer.
//!
//! Attention shift over a corpus is `1 - mean_x ρ(before, after)`, with `ρ`
//! the Pearson correlation of the before- and after-segment curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionTrace, Segment, SegmentLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawsCurve {
    pub segment: Segment,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// Per-sequence correlation between before and after curves.
    pub per_sequence: Vec<f64>,
    /// `mean(-ρ) + 1`.
    pub mean: f64,
    /// Sequences without both segments, or with a flat curve.
    pub skipped: usize,
}

impl ShiftReport {
    pub fn sequences(&self) -> usize {
        self.per_sequence.len()
    }
}

pub fn laws_curve(trace: &AttentionTrace, layout: &SegmentLayout, segment: Segment) -> Result<LawsCurve> {
    let members = layout.indices(segment);
    if members.is_empty() {
        return Err(Error::EmptySegment(segment.name()));
    }
    let s = trace.seq_len();
    if s != layout.len {
        return Err(Error::Input(format!("trace covers {s} positions, layout {}", layout.len)));
    }
    let values = (0..trace.n_layers())
        .map(|l| {
            let a = trace.head_mean(l);
            let mass: f64 = (0..s).map(|i| members.iter().map(|&j| a.get2(i, j)).sum::<f64>()).sum();
            mass / s as f64
        })
        .collect();
    Ok(LawsCurve { segment, values })
}

/// Sample Pearson correlation, accumulated in one pass with Welford updates.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::Input(format!(
            "pearson needs two equal-length vectors of at least 2 entries, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut mean_u, mut mean_v) = (0.0, 0.0);
    let (mut m2_u, mut m2_v, mut co) = (0.0, 0.0, 0.0);
    for (n, (&x, &y)) in u.iter().zip(v).enumerate() {
        let k = (n + 1) as f64;
        let dx = x - mean_u;
        let dy = y - mean_v;
        mean_u += dx / k;
        mean_v += dy / k;
        m2_u += dx * (x - mean_u);
        m2_v += dy * (y - mean_v);
        co += dx * (y - mean_v);
    }
    let scale = m2_u.max(m2_v).max(f64::MIN_POSITIVE);
    if m2_u <= 1e-24 * scale.max(1.0) || m2_v <= 1e-24 * scale.max(1.0) || m2_u == 0.0 || m2_v == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((co / (m2_u.sqrt() * m2_v.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between a sequence's before and after curves.
pub fn before_after_correlation(trace: &AttentionTrace, layout: &SegmentLayout) -> Result<f64> {
    if trace.n_layers() < 2 {
        return Err(Error::Input("attention shift needs at least two layers".into()));
    }
    let before = laws_curve(trace, layout, Segment::Before)?;
    let after = laws_curve(trace, layout, Segment::After)?;
    pearson(&before.values, &after.values)
}

pub fn attention_shift(traces: &[(AttentionTrace, SegmentLayout)]) -> Result<ShiftReport> {
    let mut per_sequence = Vec::new();
    let mut skipped = 0;
    for (trace, layout) in traces {
        match before_after_correlation(trace, layout) {
            Ok(rho) => per_sequence.push(rho),
            Err(Error::EmptySegment(_) | Error::DegenerateVariance) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_sequence.is_empty() {
        return Err(Error::Input(format!(
            "no sequence has usable before and after segments ({skipped} skipped)"
        )));
    }
    let mean_rho = per_sequence.iter().sum::<f64>() / per_sequence.len() as f64;
    Ok(ShiftReport {
        mean: 1.0 - mean_rho,
        per_sequence,
        skipped,
    })
}

/// Corpus-mean curve per segment, averaging over sequences where the
/// segment is nonempty. Segments absent everywhere are omitted.
pub fn corpus_curves(traces: &[(AttentionTrace, SegmentLayout)]) -> Result<Vec<LawsCurve>> {
    let mut out = Vec::new();
    for segment in Segment::ALL {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for (trace, layout) in traces {
            match laws_curve(trace, layout, segment) {
                Ok(c) => {
                    if sum.is_empty() {
                        sum = vec![0.0; c.values.len()];
                    }
                    sum.iter_mut().zip(&c.values).for_each(|(s, v)| *s += v);
                    count += 1;
                }
                Err(Error::EmptySegment(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if count > 0 {
            let values = sum.into_iter().map(|v| v / count as f64).collect();
            out.push(LawsCurve { segment, values });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

#[derive(Serialize, Deserialize)]
struct JsonShift {
    mean: f64,
    per_sequence: Vec<f64>,
    skipped: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonExport {
    curves: Vec<LawsCurve>,
    shift: Option<JsonShift>,
}

/// CSV: header `layer,segment,value`, one row per (layer, segment), layers
/// numbered from 1, then `#`-prefixed summary lines.
pub fn curves_to_csv(curves: &[LawsCurve], report: Option<&ShiftReport>) -> String {
    let mut out = String::from("layer,segment,value\n");
    let layers = curves.iter().map(|c| c.values.len()).max().unwrap_or(0);
    for l in 0..layers {
        for c in curves {
            if let Some(v) = c.values.get(l) {
                let _ = writeln!(out, "{},{},{}", l + 1, c.segment.name(), v);
            }
        }
    }
    match report {
        Some(r) => {
            let _ = writeln!(out, "# shift_mean,{}", r.mean);
            let _ = writeln!(out, "# sequences,{}", r.sequences());
            let _ = writeln!(out, "# skipped,{}", r.skipped);
        }
        None => out.push_str("# shift_mean,none\n"),
    }
    out
}

pub fn curves_to_json(curves: &[LawsCurve], report: Option<&ShiftReport>) -> String {
    let doc = JsonExport {
        curves: curves.to_vec(),
        shift: report.map(|r| JsonShift {
            mean: r.mean,
            per_sequence: r.per_sequence.clone(),
            skipped: r.skipped,
        }),
    };
    serde_json::to_string_pretty(&doc).expect("curves serialize")
}

pub fn export_curves(curves: &[LawsCurve], report: Option<&ShiftReport>, path: &Path, format: ExportFormat) -> Result<()> {
    let text = match format {
        ExportFormat::Csv => curves_to_csv(curves, report),
        ExportFormat::Json => curves_to_json(curves, report),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses the data rows of [`curves_to_csv`] back into curves.
pub fn parse_curves_csv(text: &str) -> Result<Vec<LawsCurve>> {
    let mut curves: Vec<LawsCurve> = Vec::new();
    for line in text.lines().skip(1) {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [_, seg, value] = fields.as_slice() else {
            return Err(Error::Input(format!("malformed curve row `{line}`")));
        };
        let segment = Segment::ALL
            .into_iter()
            .find(|s| s.name() == *seg)
            .ok_or_else(|| Error::Input(format!("unknown segment `{seg}`")))?;
        let value: f64 = value.parse().map_err(|_| Error::Input(format!("bad value `{value}`")))?;
        match curves.iter_mut().find(|c| c.segment == segment) {
            Some(c) => c.values.push(value),
            None => curves.push(LawsCurve {
                segment,
                values: vec![value],
            }),
        }
    }
    Ok(curves)
}

pub fn parse_curves_json(text: &str) -> Result<(Vec<LawsCurve>, Option<ShiftReport>)> {
    let doc: JsonExport = serde_json::from_str(text).map_err(|e| Error::Input(e.to_string()))?;
    let shift = doc.shift.map(|s| ShiftReport {
        mean: s.mean,
        per_sequence: s.per_sequence,
        skipped: s.skipped,
    });
    Ok((doc.curves, shift))
}

/// JSON Schema for [`curves_to_json`] output.
pub const CURVES_JSON_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "type": "object",
  "required": ["curves", "shift"],
  "additionalProperties": false,
  "properties": {
    "curves": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["segment", "values"],
        "additionalProperties": false,
        "properties": {
          "segment": {"enum": ["before", "itself", "after"]},
          "values": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}}
        }
      }
    },
    "shift": {
      "type": ["object", "null"],
      "required": ["mean", "per_sequence", "skipped"],
      "additionalProperties": false,
      "properties": {
        "mean": {"type": "number", "minimum": 0, "maximum": 2},
        "per_sequence": {"type": "array", "items": {"type": "number", "minimum": -1, "maximum": 1}},
        "skipped": {"type": "integer", "minimum": 0}
      }
    }
  }
}"#;
