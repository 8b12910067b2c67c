//! Representation bundles: per-token metadata plus one dense `f32` matrix per layer.
//!
//! On disk a bundle is a directory holding `manifest.json` and `layer_<i>.f32`
//! files. Each layer file is a row-major little-endian matrix of shape
//! `num_records × dim`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LacoatError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Text used for the classifier token when a sentence is rendered.
pub const CLASSIFIER_TOKEN_TEXT: &str = "[CLS]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_text: String,
    pub sentence_id: u64,
    pub position: u32,
    #[serde(default)]
    pub is_classifier_token: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_class_label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layers: usize,
    dim: usize,
    records: Vec<TokenRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBundle {
    records: Vec<TokenRecord>,
    dim: usize,
    /// One flat row-major matrix per layer.
    layers: Vec<Vec<f32>>,
}

impl RepresentationBundle {
    /// Builds a bundle and checks every structural invariant.
    pub fn new(records: Vec<TokenRecord>, dim: usize, layers: Vec<Vec<f32>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LacoatError::invalid("bundle needs at least one layer"));
        }
        if dim == 0 {
            return Err(LacoatError::invalid("vector dimension must be positive"));
        }
        let expected = records.len() * dim;
        for (layer, values) in layers.iter().enumerate() {
            if values.len() != expected {
                return Err(LacoatError::ShapeMismatch {
                    layer,
                    expected: expected * 4,
                    found: values.len() * 4,
                });
            }
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(LacoatError::NonFinite {
                    layer,
                    record: pos / dim,
                });
            }
        }
        validate_records(&records)?;
        Ok(Self {
            records,
            dim,
            layers,
        })
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &TokenRecord {
        &self.records[index]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn vector(&self, layer: usize, record: usize) -> &[f32] {
        &self.layers[layer][record * self.dim..(record + 1) * self.dim]
    }

    pub fn vector_f64(&self, layer: usize, record: usize) -> Vec<f64> {
        self.vector(layer, record).iter().map(|&v| v as f64).collect()
    }

    /// All rows of one layer widened to `f64`.
    pub fn layer_rows(&self, layer: usize) -> Vec<Vec<f64>> {
        (0..self.len()).map(|r| self.vector_f64(layer, r)).collect()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers() {
            return Err(LacoatError::invalid(format!(
                "layer {layer} out of range (bundle has {} layers)",
                self.num_layers()
            )));
        }
        Ok(())
    }

    /// New bundle containing only `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        let layers = self
            .layers
            .iter()
            .map(|values| {
                let mut out = Vec::with_capacity(indices.len() * self.dim);
                for &i in indices {
                    out.extend_from_slice(&values[i * self.dim..(i + 1) * self.dim]);
                }
                out
            })
            .collect();
        Self {
            records,
            dim: self.dim,
            layers,
        }
    }

    /// Record indices of one sentence, ordered by position.
    pub fn sentence_rows(&self, sentence_id: u64) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.len())
            .filter(|&i| self.records[i].sentence_id == sentence_id)
            .collect();
        rows.sort_by_key(|&i| self.records[i].position);
        rows
    }

    /// Distinct sentence ids in ascending order.
    pub fn sentence_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.sentence_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Surface text of a sentence, classifier token excluded.
    pub fn sentence_text(&self, sentence_id: u64) -> String {
        self.sentence_rows(sentence_id)
            .into_iter()
            .filter(|&i| !self.records[i].is_classifier_token)
            .map(|i| self.records[i].token_text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Index of the record at `(sentence_id, position)`.
    pub fn find(&self, sentence_id: u64, position: u32) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.sentence_id == sentence_id && r.position == position)
    }
}

fn validate_records(records: &[TokenRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if !seen.insert((r.sentence_id, r.position)) {
            return Err(LacoatError::invalid(format!(
                "record {i}: duplicate (sentence {}, position {})",
                r.sentence_id, r.position
            )));
        }
        if r.is_classifier_token && (r.position != 0 || r.token_class_label.is_some()) {
            return Err(LacoatError::invalid(format!(
                "record {i}: classifier token must sit at position 0 without a token label"
            )));
        }
    }
    Ok(())
}

fn layer_file(i: usize) -> String {
    format!("layer_{i}.f32")
}

pub fn load_bundle(dir: &Path) -> Result<RepresentationBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(LacoatError::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| LacoatError::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| LacoatError::json(MANIFEST_FILE, e))?;
    if manifest.layers == 0 {
        return Err(LacoatError::invalid("manifest declares zero layers"));
    }

    let expected = manifest.records.len() * manifest.dim * 4;
    let mut layers = Vec::with_capacity(manifest.layers);
    for layer in 0..manifest.layers {
        let path = dir.join(layer_file(layer));
        if !path.is_file() {
            return Err(LacoatError::MissingFile(path));
        }
        let bytes = fs::read(&path).map_err(|e| LacoatError::io(&path, e))?;
        if bytes.len() != expected {
            return Err(LacoatError::ShapeMismatch {
                layer,
                expected,
                found: bytes.len(),
            });
        }
        layers.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    RepresentationBundle::new(manifest.records, manifest.dim, layers)
}

pub fn save_bundle(bundle: &RepresentationBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LacoatError::io(dir, e))?;
    let manifest = Manifest {
        layers: bundle.num_layers(),
        dim: bundle.dim,
        records: bundle.records.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| LacoatError::json(MANIFEST_FILE, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| LacoatError::io(&path, e))?;
    for (i, values) in bundle.layers.iter().enumerate() {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(layer_file(i));
        fs::write(&path, bytes).map_err(|e| LacoatError::io(&path, e))?;
    }
    Ok(())
}

/// Maps each word to the subword rows it was split into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordAlignment {
    words: Vec<Vec<usize>>,
}

impl SubwordAlignment {
    pub fn new(words: Vec<Vec<usize>>) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[Vec<usize>] {
        &self.words
    }

    /// Lists must be non-empty, disjoint, and cover `0..num_rows`.
    pub fn validate(&self, num_rows: usize) -> Result<()> {
        let mut covered = vec![false; num_rows];
        for (w, rows) in self.words.iter().enumerate() {
            if rows.is_empty() {
                return Err(LacoatError::invalid(format!("word {w} has no subwords")));
            }
            for &r in rows {
                if r >= num_rows {
                    return Err(LacoatError::invalid(format!(
                        "word {w} points at subword row {r}, only {num_rows} rows"
                    )));
                }
                if std::mem::replace(&mut covered[r], true) {
                    return Err(LacoatError::invalid(format!(
                        "subword row {r} aligned to more than one word"
                    )));
                }
            }
        }
        if let Some(r) = covered.iter().position(|c| !c) {
            return Err(LacoatError::invalid(format!("subword row {r} not aligned")));
        }
        Ok(())
    }
}

/// One row per word: the mean of its subword rows.
pub fn average_subwords(subwords: &[Vec<f64>], alignment: &SubwordAlignment) -> Result<Vec<Vec<f64>>> {
    alignment.validate(subwords.len())?;
    let dim = subwords.first().map_or(0, Vec::len);
    if let Some(row) = subwords.iter().find(|r| r.len() != dim) {
        return Err(LacoatError::DimMismatch {
            expected: dim,
            got: row.len(),
        });
    }
    Ok(alignment
        .words
        .iter()
        .map(|rows| {
            let mut mean = vec![0.0; dim];
            for &r in rows {
                for (m, v) in mean.iter_mut().zip(&subwords[r]) {
                    *m += v;
                }
            }
            let n = rows.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        })
        .collect())
}

/// Indices kept by [`filter_vocabulary`], ascending.
pub fn filter_vocabulary_indices(
    records: &[TokenRecord],
    min_freq: usize,
    max_occurrences: usize,
    seed: u64,
) -> Vec<usize> {
    let mut by_form: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut keep = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.is_classifier_token {
            keep.push(i);
        } else {
            by_form.entry(r.token_text.as_str()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, mut occurrences) in by_form {
        if occurrences.len() < min_freq {
            continue;
        }
        if occurrences.len() > max_occurrences {
            occurrences.shuffle(&mut rng);
            occurrences.truncate(max_occurrences);
        }
        keep.extend(occurrences);
    }
    keep.sort_unstable();
    keep
}

/// Drops rare surface forms and caps frequent ones. Classifier tokens are always kept.
pub fn filter_vocabulary(
    bundle: &RepresentationBundle,
    min_freq: usize,
    max_occurrences: usize,
    seed: u64,
) -> RepresentationBundle {
    let keep = filter_vocabulary_indices(&bundle.records, min_freq, max_occurrences, seed);
    bundle.subset(&keep)
}

/// Seeded shuffle then split; the train side gets `round(n * train_fraction)` items,
/// clamped so both sides are non-empty.
pub fn split_train_test<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LacoatError::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = items.len();
    if n < 2 {
        return Err(LacoatError::invalid(format!("need at least 2 items to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}
