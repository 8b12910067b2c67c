//! Concept annotation by class purity, salient-concept alignment, and per-layer
//! report tables.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::concept_discoverer::ConceptSet;
use crate::error::{LacoatError, Result};
use crate::repr_store::TokenRecord;

pub const MIXED: &str = "Mixed";
pub const DEFAULT_PURITY_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Per-token labels such as POS tags.
    TokenLabel,
    /// Every member takes the label of the sentence it came from.
    SentenceLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLabel {
    pub concept_id: usize,
    pub label: String,
    pub purity: f64,
    pub dominant_class: String,
}

impl ConceptLabel {
    pub fn is_mixed(&self) -> bool {
        self.label == MIXED
    }
}

fn sentence_labels(records: &[TokenRecord]) -> HashMap<u64, &str> {
    let mut out = HashMap::new();
    for r in records {
        if let Some(label) = &r.sentence_class_label {
            out.entry(r.sentence_id).or_insert(label.as_str());
        }
    }
    out
}

/// Labels a concept with its dominant class when strictly more than
/// `threshold` of its members carry that class, otherwise `Mixed`.
pub fn annotate_concepts(
    concepts: &ConceptSet,
    records: &[TokenRecord],
    mode: LabelMode,
    threshold: f64,
) -> Result<Vec<ConceptLabel>> {
    let by_sentence = match mode {
        LabelMode::SentenceLabel => sentence_labels(records),
        LabelMode::TokenLabel => HashMap::new(),
    };
    let label_of = |index: usize| -> Result<&str> {
        let r = records
            .get(index)
            .ok_or_else(|| LacoatError::invalid(format!("concept member {index} has no record")))?;
        let label = match mode {
            LabelMode::TokenLabel => r.token_class_label.as_deref(),
            LabelMode::SentenceLabel => by_sentence.get(&r.sentence_id).copied(),
        };
        label.ok_or_else(|| {
            LacoatError::invalid(format!(
                "record {index} (sentence {}, position {}) lacks a {} label",
                r.sentence_id,
                r.position,
                match mode {
                    LabelMode::TokenLabel => "token",
                    LabelMode::SentenceLabel => "sentence",
                }
            ))
        })
    };

    concepts
        .concepts
        .iter()
        .enumerate()
        .map(|(concept_id, members)| {
            if members.is_empty() {
                return Err(LacoatError::invalid(format!("concept {concept_id} is empty")));
            }
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for &m in members {
                *counts.entry(label_of(m)?).or_default() += 1;
            }
            // highest count; BTreeMap order makes ties resolve to the smallest name
            let (dominant, count) = counts
                .iter()
                .fold(("", 0usize), |best, (&c, &n)| if n > best.1 { (c, n) } else { best });
            let purity = count as f64 / members.len() as f64;
            Ok(ConceptLabel {
                concept_id,
                label: if purity > threshold { dominant.to_string() } else { MIXED.to_string() },
                purity,
                dominant_class: dominant.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientAssignment {
    pub record: usize,
    pub predicted_class: String,
    pub concept_id: usize,
}

/// Fraction of instances whose salient token's concept carries the predicted
/// class. Mixed concepts never match.
pub fn alignment_accuracy(assignments: &[SalientAssignment], labels: &[ConceptLabel]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(LacoatError::invalid("alignment accuracy over zero instances"));
    }
    let mut hits = 0usize;
    for a in assignments {
        let label = labels
            .iter()
            .find(|l| l.concept_id == a.concept_id)
            .ok_or(LacoatError::UnknownConcept(a.concept_id))?;
        if !label.is_mixed() && label.label == a.predicted_class {
            hits += 1;
        }
    }
    Ok(hits as f64 / assignments.len() as f64)
}

/// Concept counts per class label plus `Mixed`. Every name in `classes` gets a
/// row even when its count is zero.
pub fn polarity_census(labels: &[ConceptLabel], classes: &[String]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = classes.iter().map(|c| (c.clone(), 0)).collect();
    counts.insert(MIXED.to_string(), 0);
    for l in labels {
        *counts.entry(l.label.clone()).or_default() += 1;
    }
    counts
}

pub fn census_csv(census: &BTreeMap<String, usize>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| LacoatError::invalid(format!("csv: {e}"));
    w.write_record(["label", "concepts"]).map_err(io)?;
    for (label, n) in census {
        w.write_record([label.as_str(), &n.to_string()]).map_err(io)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| LacoatError::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| LacoatError::invalid(format!("csv: {e}")))
}

/// One row per layer; missing metrics are kept as explicit nulls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub columns: Vec<String>,
    pub rows: Vec<LayerRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub values: Vec<Option<f64>>,
}

const NULL: &str = "null";

pub fn layer_report(columns: &[&str], per_layer: &BTreeMap<usize, BTreeMap<String, f64>>) -> LayerReport {
    LayerReport {
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows: per_layer
            .iter()
            .map(|(&layer, metrics)| LayerRow {
                layer,
                values: columns.iter().map(|c| metrics.get(*c).copied()).collect(),
            })
            .collect(),
    }
}

impl LayerReport {
    pub fn to_csv(&self) -> Result<String> {
        let io = |e: csv::Error| LacoatError::invalid(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for row in &self.rows {
            let mut fields = vec![row.layer.to_string()];
            fields.extend(
                row.values
                    .iter()
                    .map(|v| v.map_or_else(|| NULL.to_string(), |x| x.to_string())),
            );
            w.write_record(&fields).map_err(io)?;
        }
        finish_csv(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| LacoatError::invalid(format!("layer report csv: {msg}"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.get(0) != Some("layer") {
            return Err(bad("first column must be `layer`".into()));
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let layer = record[0].parse().map_err(|e| bad(format!("{e}")))?;
            let values = record
                .iter()
                .skip(1)
                .map(|f| {
                    if f == NULL {
                        Ok(None)
                    } else {
                        f.parse().map(Some).map_err(|e| bad(format!("{e}")))
                    }
                })
                .collect::<Result<_>>()?;
            rows.push(LayerRow { layer, values });
        }
        Ok(Self { columns, rows })
    }
}
