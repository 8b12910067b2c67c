//! Desk-scale synthetic corpus with planted facets.
//!
//! Every word belongs to one facet. Each occurrence's vector at layer `ℓ` is
//! drawn around its facet center with isotropic noise that shrinks from
//! `noise_bottom · sigma` at layer 0 to `sigma` at the top layer, so upper
//! layers separate facets cleanly and lower layers blur them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::TaskKind;
use crate::error::{LacoatError, Result};
use crate::repr_store::{RepresentationBundle, TokenRecord, CLASSIFIER_TOKEN_TEXT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_facets: usize,
    pub words_per_facet: usize,
    pub contexts_per_word: usize,
    pub dim: usize,
    pub layers: usize,
    /// Distance between facet centers, in multiples of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Noise multiplier at layer 0; the top layer uses 1.
    pub noise_bottom: f64,
    pub sentence_len: usize,
    pub task: TaskKind,
    /// Sentence classes for classification corpora; facet `f` maps to class `f % num_classes`.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_facets: 10,
            words_per_facet: 20,
            contexts_per_word: 20,
            dim: 16,
            layers: 3,
            separation: 10.0,
            sigma: 1.0,
            noise_bottom: 4.0,
            sentence_len: 10,
            task: TaskKind::SequenceLabeling,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_facets", self.num_facets),
            ("words_per_facet", self.words_per_facet),
            ("contexts_per_word", self.contexts_per_word),
            ("dim", self.dim),
            ("layers", self.layers),
            ("sentence_len", self.sentence_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LacoatError::invalid(format!("synthetic corpus: {name} must be positive")));
        }
        if !(self.separation > 0.0 && self.sigma > 0.0 && self.noise_bottom > 0.0) {
            return Err(LacoatError::invalid(
                "synthetic corpus: separation, sigma and noise_bottom must be positive",
            ));
        }
        if self.task == TaskKind::SequenceClassification && self.num_classes < 2 {
            return Err(LacoatError::invalid("synthetic corpus: need at least 2 sentence classes"));
        }
        if self.task == TaskKind::MaskedPrediction {
            return Err(LacoatError::invalid("synthetic corpus: masked prediction is not generated"));
        }
        Ok(())
    }

    fn noise_scale(&self, layer: usize) -> f64 {
        if self.layers == 1 {
            return self.sigma;
        }
        let t = layer as f64 / (self.layers - 1) as f64;
        self.sigma * (self.noise_bottom + t * (1.0 - self.noise_bottom))
    }
}

pub fn facet_tag(facet: usize) -> String {
    format!("F{facet}")
}

pub fn class_name(class: usize, num_classes: usize) -> String {
    match (num_classes, class) {
        (2, 0) => "Negative".into(),
        (2, _) => "Positive".into(),
        _ => format!("C{class}"),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub bundle: RepresentationBundle,
    /// Planted facet of every record (classifier tokens take their sentence's facet).
    pub facets: Vec<usize>,
}

/// One facet occurrence before it is placed in a sentence.
struct Occurrence {
    facet: usize,
    word: usize,
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let spacing = spec.separation * spec.sigma;
    let centers: Vec<Vec<f64>> = (0..spec.num_facets)
        .map(|f| {
            if spec.dim >= spec.num_facets {
                // orthogonal axes: every pair of centers is exactly `spacing` apart
                let mut c = vec![0.0; spec.dim];
                c[f] = spacing / std::f64::consts::SQRT_2;
                c
            } else {
                let scale = spacing / std::f64::consts::SQRT_2;
                (0..spec.dim).map(|_| scale * unit.sample(&mut rng)).collect()
            }
        })
        .collect();

    let mut occurrences: Vec<Occurrence> = Vec::new();
    for facet in 0..spec.num_facets {
        for word in 0..spec.words_per_facet {
            for _ in 0..spec.contexts_per_word {
                occurrences.push(Occurrence { facet, word });
            }
        }
    }

    // (sentence facet if any, member occurrences)
    let mut sentences: Vec<(Option<usize>, Vec<Occurrence>)> = Vec::new();
    match spec.task {
        TaskKind::SequenceClassification => {
            let mut by_facet: Vec<Vec<Occurrence>> = (0..spec.num_facets).map(|_| Vec::new()).collect();
            for o in occurrences {
                by_facet[o.facet].push(o);
            }
            for (facet, mut group) in by_facet.into_iter().enumerate() {
                group.shuffle(&mut rng);
                while !group.is_empty() {
                    let rest = group.split_off(group.len().min(spec.sentence_len));
                    sentences.push((Some(facet), std::mem::replace(&mut group, rest)));
                }
            }
        }
        _ => {
            occurrences.shuffle(&mut rng);
            while !occurrences.is_empty() {
                let rest = occurrences.split_off(occurrences.len().min(spec.sentence_len));
                sentences.push((None, std::mem::replace(&mut occurrences, rest)));
            }
        }
    }

    let mut records = Vec::new();
    let mut facets = Vec::new();
    for (sentence_id, (sentence_facet, members)) in sentences.into_iter().enumerate() {
        let sentence_id = sentence_id as u64;
        let sentence_label = sentence_facet.map(|f| class_name(f % spec.num_classes, spec.num_classes));
        let offset = if let Some(f) = sentence_facet {
            records.push(TokenRecord {
                token_text: CLASSIFIER_TOKEN_TEXT.into(),
                sentence_id,
                position: 0,
                is_classifier_token: true,
                sentence_class_label: sentence_label.clone(),
                token_class_label: None,
            });
            facets.push(f);
            1
        } else {
            0
        };
        for (i, o) in members.into_iter().enumerate() {
            records.push(TokenRecord {
                token_text: format!("w{}_{}", o.facet, o.word),
                sentence_id,
                position: (i + offset) as u32,
                is_classifier_token: false,
                sentence_class_label: sentence_label.clone(),
                token_class_label: Some(facet_tag(o.facet)),
            });
            facets.push(o.facet);
        }
    }

    let layers = (0..spec.layers)
        .map(|layer| {
            let scale = spec.noise_scale(layer);
            let mut values = Vec::with_capacity(records.len() * spec.dim);
            for &f in &facets {
                for c in &centers[f] {
                    values.push((c + scale * unit.sample(&mut rng)) as f32);
                }
            }
            values
        })
        .collect();

    Ok(SyntheticCorpus {
        bundle: RepresentationBundle::new(records, spec.dim, layers)?,
        facets,
    })
}

/// Best-match purity: each cluster is credited with its most frequent planted
/// facet, and the credited counts are summed over all points.
pub fn best_match_purity(clusters: &[Vec<usize>], truth: &[usize]) -> f64 {
    let total: usize = clusters.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let matched: usize = clusters
        .iter()
        .map(|c| {
            let mut counts = std::collections::HashMap::new();
            for &i in c {
                *counts.entry(truth[i]).or_insert(0usize) += 1;
            }
            counts.values().copied().max().unwrap_or(0)
        })
        .sum();
    matched as f64 / total as f64
}
