//! End-to-end orchestration: ingest → train scorers → discover → map-train →
//! evaluate → explain, driven by a JSON run configuration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attribution::{integrated_gradients, magnitude_order, select_salient_top_p, AttributionVector, TaskKind};
use crate::concept_discoverer::{concept_members, discover_concepts, ConceptSet};
use crate::concept_mapper::{evaluate_topk, predict_topk, train_mapper, MapperModel, MapperTraining};
use crate::error::{LacoatError, Result, StageExt};
use crate::evaluation::{
    alignment_accuracy, annotate_concepts, layer_report, polarity_census, ConceptLabel, LabelMode,
    SalientAssignment, DEFAULT_PURITY_THRESHOLD,
};
use crate::plausifyer::{
    build_prompt, concept_word_list, query_llm, resolve_endpoint, sample_concept_display, ChatTransport,
    ConceptDisplay, ExplanationRequest, HttpTransport, LlmSettings, MockTransport, PromptInput, RetryPolicy,
    API_KEY_ENV, DEFAULT_DISPLAY_COUNT, DEFAULT_WORD_CAP,
};
use crate::repr_store::{filter_vocabulary, load_bundle, save_bundle, split_train_test, RepresentationBundle};
use crate::scorer::{train_reference_scorer, Pooling, ReferenceScorer, ScorerTraining};
use crate::synthetic::{generate_synthetic_corpus, SyntheticCorpusSpec};

pub const MOCK_ANSWER: &str = "[mock] The concept members share the facet of the highlighted input.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BundleSource {
    Dir(PathBuf),
    Synthetic(SyntheticCorpusSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSettings {
    pub min_freq: usize,
    pub max_occurrences: usize,
    pub seed: u64,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self {
            min_freq: 5,
            max_occurrences: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSettings {
    pub steps: usize,
    pub mass: f64,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        Self { steps: 500, mass: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub threshold: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub ks: Vec<usize>,
    /// Training instances sampled for salient-concept alignment.
    pub max_alignment_instances: usize,
    pub instance_seed: u64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_PURITY_THRESHOLD,
            train_fraction: 0.9,
            split_seed: 0,
            ks: vec![1, 2, 5],
            max_alignment_instances: 400,
            instance_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRef {
    pub sentence_id: u64,
    /// Word position of the prediction for labeling tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    /// Empty means: explain the first sentence of the bundle.
    pub instances: Vec<InstanceRef>,
    pub display_count: usize,
    pub display_seed: u64,
    pub word_cap: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            instances: Vec::new(),
            display_count: DEFAULT_DISPLAY_COUNT,
            display_seed: 0,
            word_cap: DEFAULT_WORD_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: BundleSource,
    pub task: TaskKind,
    /// Number of concepts per layer.
    pub k: usize,
    /// Layers to analyse; all bundle layers when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub ingest: IngestSettings,
    #[serde(default)]
    pub scorer: ScorerTraining,
    #[serde(default)]
    pub mapper: MapperTraining,
    #[serde(default)]
    pub attribution: AttributionSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub explain: ExplainSettings,
    #[serde(default)]
    pub llm: LlmSettings,
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LacoatError::json("run config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative bundle directory is resolved against the file's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LacoatError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let BundleSource::Dir(dir) = &mut cfg.bundle {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        if let Some(out) = &mut cfg.out_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(LacoatError::invalid("k must be positive"));
        }
        if !(self.attribution.mass > 0.0 && self.attribution.mass <= 1.0) {
            return Err(LacoatError::invalid("attribution.mass must lie in (0, 1]"));
        }
        if self.attribution.steps == 0 {
            return Err(LacoatError::invalid("attribution.steps must be positive"));
        }
        if !(self.evaluation.train_fraction > 0.0 && self.evaluation.train_fraction < 1.0) {
            return Err(LacoatError::invalid("evaluation.train_fraction must lie in (0, 1)"));
        }
        if self.evaluation.ks.is_empty() {
            return Err(LacoatError::invalid("evaluation.ks must not be empty"));
        }
        if let BundleSource::Synthetic(spec) = &self.bundle {
            spec.validate()?;
            if spec.task != self.task {
                return Err(LacoatError::invalid("synthetic corpus task differs from the run task"));
            }
        }
        Ok(())
    }
}

pub fn label_mode(task: TaskKind) -> LabelMode {
    match task {
        TaskKind::SequenceClassification => LabelMode::SentenceLabel,
        TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => LabelMode::TokenLabel,
    }
}

fn pooling(task: TaskKind) -> Pooling {
    match task {
        TaskKind::SequenceClassification => Pooling::Mean,
        TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => Pooling::PerToken,
    }
}

/// Training pairs for the reference scorer at one layer: labeled word vectors
/// for token-level tasks, mean-pooled sentences for classification.
pub fn scorer_samples(bundle: &RepresentationBundle, layer: usize, task: TaskKind) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    bundle.check_layer(layer)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    match task {
        TaskKind::SequenceClassification => {
            for sid in bundle.sentence_ids() {
                let rows = bundle.sentence_rows(sid);
                let Some(label) = rows.iter().find_map(|&r| bundle.record(r).sentence_class_label.clone()) else {
                    continue;
                };
                let mut mean = vec![0.0; bundle.dim()];
                for &r in &rows {
                    for (m, v) in mean.iter_mut().zip(bundle.vector(layer, r)) {
                        *m += *v as f64;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
                xs.push(mean);
                ys.push(label);
            }
        }
        TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => {
            for (i, r) in bundle.records().iter().enumerate() {
                if let (false, Some(label)) = (r.is_classifier_token, &r.token_class_label) {
                    xs.push(bundle.vector_f64(layer, i));
                    ys.push(label.clone());
                }
            }
        }
    }
    if xs.is_empty() {
        return Err(LacoatError::invalid("bundle has no labeled instances for the scorer"));
    }
    Ok((xs, ys))
}

pub fn train_layer_scorer(
    bundle: &RepresentationBundle,
    layer: usize,
    task: TaskKind,
    cfg: &ScorerTraining,
) -> Result<(ReferenceScorer, f64)> {
    let (xs, ys) = scorer_samples(bundle, layer, task)?;
    let trained = train_reference_scorer(&xs, &ys, pooling(task), cfg)?;
    Ok((trained.scorer, trained.train_accuracy))
}

/// Trains the concept mapper for one layer on every clustered record.
pub fn train_layer_mapper(bundle: &RepresentationBundle, concepts: &ConceptSet, cfg: &MapperTraining) -> Result<MapperModel> {
    concepts.validate(bundle.len())?;
    let features = bundle.layer_rows(concepts.layer);
    let labels = concepts.assignment();
    Ok(train_mapper(&features, &labels, concepts.len(), concepts.layer, cfg)?.model)
}

#[derive(Debug, Clone)]
pub struct LayerArtifacts {
    pub concepts: ConceptSet,
    pub mapper: MapperModel,
    pub scorer: ReferenceScorer,
}

/// Everything explanation and evaluation need.
#[derive(Debug, Clone)]
pub struct ArtifactSet {
    pub task: TaskKind,
    /// Full sentences as the model sees them.
    pub raw: RepresentationBundle,
    /// The records that were clustered; concept ids index into this bundle.
    pub filtered: RepresentationBundle,
    /// Scorer on the top layer; its argmax is the model's prediction.
    pub model_scorer: ReferenceScorer,
    pub layers: BTreeMap<usize, LayerArtifacts>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub task: TaskKind,
    pub k: usize,
    pub layers: Vec<usize>,
    pub num_layers: usize,
    pub raw_records: usize,
    pub filtered_records: usize,
    pub seeds: BTreeMap<String, u64>,
    pub thresholds: BTreeMap<String, f64>,
    pub scorer_train_accuracy: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

const RAW_BUNDLE_DIR: &str = "raw_bundle";
const BUNDLE_DIR: &str = "bundle";
const MODEL_SCORER_FILE: &str = "model_scorer.bin";
const RUN_MANIFEST: &str = "run_manifest.json";
pub const REPORT_DIR: &str = "report";
pub const EXPLANATIONS_FILE: &str = "explanations.json";

fn layer_dir(layer: usize) -> String {
    format!("layer_{layer}")
}

impl ArtifactSet {
    pub fn layer(&self, layer: usize) -> Result<&LayerArtifacts> {
        self.layers
            .get(&layer)
            .ok_or_else(|| LacoatError::invalid(format!("no trained concepts/mapper for layer {layer}")))
    }

    pub fn top_layer(&self) -> usize {
        self.raw.num_layers() - 1
    }

    pub fn load_run_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| LacoatError::io(&path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| LacoatError::json(RUN_MANIFEST, e))?;
        let raw = load_bundle(&dir.join(RAW_BUNDLE_DIR))?;
        let filtered = load_bundle(&dir.join(BUNDLE_DIR))?;
        let model_scorer = ReferenceScorer::load(&dir.join(MODEL_SCORER_FILE))?;
        let mut layers = BTreeMap::new();
        for &layer in &manifest.layers {
            let ld = dir.join(layer_dir(layer));
            layers.insert(
                layer,
                LayerArtifacts {
                    concepts: ConceptSet::load(&ld.join("concepts.json"))?,
                    mapper: MapperModel::load(&ld.join("mapper.bin"))?,
                    scorer: ReferenceScorer::load(&ld.join("scorer.bin"))?,
                },
            );
        }
        Ok(Self {
            task: manifest.task,
            raw,
            filtered,
            model_scorer,
            layers,
            threshold: manifest.config.evaluation.threshold,
        })
    }

    fn concept_labels(&self, layer: usize) -> Result<Vec<ConceptLabel>> {
        annotate_concepts(
            &self.layer(layer)?.concepts,
            self.filtered.records(),
            label_mode(self.task),
            self.threshold,
        )
    }

    fn filtered_index(&self) -> HashMap<(u64, u32), usize> {
        self.filtered
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.sentence_id, r.position), i))
            .collect()
    }
}

/// One sentence resolved against the raw bundle.
struct Instance {
    sentence_id: u64,
    rows: Vec<usize>,
    /// Index into `rows` of the token whose label is predicted.
    output_index: Option<usize>,
}

impl Instance {
    fn resolve(bundle: &RepresentationBundle, task: TaskKind, r: InstanceRef) -> Result<Self> {
        let rows = bundle.sentence_rows(r.sentence_id);
        if rows.is_empty() {
            return Err(LacoatError::invalid(format!("unknown instance: sentence {}", r.sentence_id)));
        }
        let output_index = match task {
            TaskKind::SequenceClassification => None,
            TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => {
                let pos = r
                    .position
                    .ok_or_else(|| LacoatError::invalid("token-level instance needs a position"))?;
                Some(
                    rows.iter()
                        .position(|&i| bundle.record(i).position == pos)
                        .ok_or_else(|| {
                            LacoatError::invalid(format!("sentence {} has no position {pos}", r.sentence_id))
                        })?,
                )
            }
        };
        Ok(Self {
            sentence_id: r.sentence_id,
            rows,
            output_index,
        })
    }

    fn inputs(&self, bundle: &RepresentationBundle, layer: usize) -> Vec<Vec<f64>> {
        self.rows.iter().map(|&r| bundle.vector_f64(layer, r)).collect()
    }

    fn true_label(&self, bundle: &RepresentationBundle, task: TaskKind) -> Option<String> {
        match (task, self.output_index) {
            (TaskKind::SequenceClassification, _) => self
                .rows
                .iter()
                .find_map(|&r| bundle.record(r).sentence_class_label.clone()),
            (_, Some(i)) => bundle.record(self.rows[i]).token_class_label.clone(),
            (_, None) => None,
        }
    }
}

struct Attributed {
    prediction: String,
    attribution: AttributionVector,
}

fn attribute(art: &ArtifactSet, inst: &Instance, layer: usize, steps: usize) -> Result<Attributed> {
    let top = art.top_layer();
    let predicted = art
        .model_scorer
        .predict(&inst.inputs(&art.raw, top), inst.output_index)?;
    let prediction = art.model_scorer.class_names[predicted].clone();
    let scorer = &art.layer(layer)?.scorer;
    let target = scorer.class_index(&prediction).ok_or_else(|| {
        LacoatError::invalid(format!("layer {layer} scorer does not know class {prediction}"))
    })?;
    let attribution = integrated_gradients(
        &scorer.for_instance(inst.output_index),
        &inst.inputs(&art.raw, layer),
        target,
        steps,
        None,
    )?;
    Ok(Attributed { prediction, attribution })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientToken {
    pub token: String,
    pub position: u32,
    pub is_classifier_token: bool,
    pub score: f64,
    pub concept_id: usize,
    pub concept_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sentence_id: u64,
    pub sentence: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<u32>,
    pub prediction: String,
    pub true_label: Option<String>,
    pub layer: usize,
    /// Selected tokens, most attributed first.
    pub salient: Vec<SalientToken>,
    pub degenerate_attribution: bool,
    pub concept_id: usize,
    pub concept_label: ConceptLabel,
    pub display: Vec<ConceptDisplay>,
    pub prompt: String,
    pub llm_response: Option<String>,
}

/// How explanations reach the LLM, if at all.
pub struct LlmHandle<'a> {
    pub transport: &'a dyn ChatTransport,
    pub settings: &'a LlmSettings,
    pub endpoint: String,
    pub api_key: Option<String>,
}

impl LlmHandle<'_> {
    fn ask(&self, prompt: String) -> Result<String> {
        let request = ExplanationRequest::new(self.settings, self.endpoint.clone(), prompt);
        query_llm(
            self.transport,
            &request,
            self.api_key.as_deref(),
            RetryPolicy::from_settings(self.settings),
        )
    }
}

/// Explains one instance at each requested layer.
pub fn explain_instance(
    art: &ArtifactSet,
    instance: InstanceRef,
    layers: &[usize],
    attribution: &AttributionSettings,
    settings: &ExplainSettings,
    llm: Option<&LlmHandle<'_>>,
) -> Result<Vec<Explanation>> {
    let inst = Instance::resolve(&art.raw, art.task, instance)?;
    let words: Vec<usize> = inst
        .rows
        .iter()
        .copied()
        .filter(|&r| !art.raw.record(r).is_classifier_token)
        .collect();
    let sentence_tokens: Vec<String> = words.iter().map(|&r| art.raw.record(r).token_text.clone()).collect();
    let true_label = inst.true_label(&art.raw, art.task);

    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let layer_art = art.layer(layer)?;
        let labels = art.concept_labels(layer)?;
        let Attributed { prediction, attribution: attr } = attribute(art, &inst, layer, attribution.steps)?;
        let selection = select_salient_top_p(&attr, attribution.mass)?;

        let salient = selection
            .indices
            .iter()
            .map(|&i| {
                let row = inst.rows[i];
                let rec = art.raw.record(row);
                let (concept_id, concept_probability) =
                    predict_topk(&layer_art.mapper, &art.raw.vector_f64(layer, row), 1)?[0];
                Ok(SalientToken {
                    token: rec.token_text.clone(),
                    position: rec.position,
                    is_classifier_token: rec.is_classifier_token,
                    score: attr.per_token[i],
                    concept_id,
                    concept_probability,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let top = &salient[0];
        let concept_id = top.concept_id;
        let members = concept_members(&layer_art.concepts, concept_id, &art.filtered)?;
        let display = sample_concept_display(
            &members,
            &art.filtered,
            settings.display_count,
            settings.display_seed,
        );
        let prompt = match art.task {
            TaskKind::SequenceClassification => {
                let items: Vec<String> = display.iter().map(|d| d.text.clone()).collect();
                build_prompt(
                    art.task,
                    &PromptInput {
                        sentence_tokens: &sentence_tokens,
                        highlight: None,
                        concept_items: &items,
                    },
                )?
            }
            TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => {
                let salient_row = inst.rows[selection.indices[0]];
                let output_row = inst.output_index.map(|i| inst.rows[i]);
                let highlight = words
                    .iter()
                    .position(|&r| r == salient_row)
                    .or_else(|| output_row.and_then(|o| words.iter().position(|&r| r == o)));
                let items = concept_word_list(&members, settings.word_cap);
                build_prompt(
                    art.task,
                    &PromptInput {
                        sentence_tokens: &sentence_tokens,
                        highlight,
                        concept_items: &items,
                    },
                )?
            }
        };
        let llm_response = llm.map(|h| h.ask(prompt.clone())).transpose()?;

        out.push(Explanation {
            sentence_id: inst.sentence_id,
            sentence: sentence_tokens.join(" "),
            position: instance.position,
            prediction,
            true_label: true_label.clone(),
            layer,
            degenerate_attribution: selection.degenerate,
            concept_id,
            concept_label: labels[concept_id].clone(),
            salient,
            display,
            prompt,
            llm_response,
        });
    }
    Ok(out)
}

/// Salient-concept alignment on training instances whose concept membership is
/// known from clustering. Returns the accuracy and the number of instances used.
pub fn layer_alignment(art: &ArtifactSet, layer: usize, eval: &EvaluationSettings, steps: usize) -> Result<(f64, usize)> {
    let labels = art.concept_labels(layer)?;
    let assignment = art.layer(layer)?.concepts.assignment();
    let index = art.filtered_index();

    let mut candidates: Vec<InstanceRef> = match art.task {
        TaskKind::SequenceClassification => {
            let mut ids: Vec<u64> = art.filtered.records().iter().map(|r| r.sentence_id).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter()
                .map(|sentence_id| InstanceRef {
                    sentence_id,
                    position: None,
                })
                .collect()
        }
        TaskKind::SequenceLabeling | TaskKind::MaskedPrediction => art
            .filtered
            .records()
            .iter()
            .filter(|r| !r.is_classifier_token)
            .map(|r| InstanceRef {
                sentence_id: r.sentence_id,
                position: Some(r.position),
            })
            .collect(),
    };
    if candidates.len() > eval.max_alignment_instances {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(eval.instance_seed);
        let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), eval.max_alignment_instances).into_vec();
        picked.sort_unstable();
        candidates = picked.into_iter().map(|i| candidates[i]).collect();
    }

    let mut assignments = Vec::with_capacity(candidates.len());
    for c in candidates {
        let inst = Instance::resolve(&art.raw, art.task, c)?;
        let attributed = attribute(art, &inst, layer, steps)?;
        let top = magnitude_order(&attributed.attribution.per_token)[0];
        let rec = art.raw.record(inst.rows[top]);
        let Some(&record) = index.get(&(rec.sentence_id, rec.position)) else {
            continue;
        };
        assignments.push(SalientAssignment {
            record,
            predicted_class: attributed.prediction,
            concept_id: assignment[record],
        });
    }
    let n = assignments.len();
    Ok((alignment_accuracy(&assignments, &labels)?, n))
}

/// Top-k accuracy of a mapper trained on 90% of each concept's members and
/// tested on the rest. `None` when no concept has enough members to hold out.
pub fn layer_mapper_topk(
    bundle: &RepresentationBundle,
    concepts: &ConceptSet,
    mapper_cfg: &MapperTraining,
    eval: &EvaluationSettings,
) -> Result<Option<Vec<(usize, f64)>>> {
    let rows = bundle.layer_rows(concepts.layer);
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (id, members) in concepts.concepts.iter().enumerate() {
        let (train, test) = if members.len() >= 2 {
            split_train_test(members, eval.train_fraction, eval.split_seed.wrapping_add(id as u64))?
        } else {
            (members.clone(), Vec::new())
        };
        for m in train {
            train_x.push(rows[m].clone());
            train_y.push(id);
        }
        for m in test {
            test_x.push(rows[m].clone());
            test_y.push(id);
        }
    }
    if test_x.is_empty() {
        return Ok(None);
    }
    let model = train_mapper(&train_x, &train_y, concepts.len(), concepts.layer, mapper_cfg)?.model;
    evaluate_topk(&model, &test_x, &test_y, &eval.ks).map(Some)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerAnnotation {
    layer: usize,
    mode: LabelMode,
    threshold: f64,
    concepts: Vec<ConceptLabel>,
}

fn class_names(bundle: &RepresentationBundle, mode: LabelMode) -> Vec<String> {
    let mut out: Vec<String> = bundle
        .records()
        .iter()
        .filter_map(|r| match mode {
            LabelMode::TokenLabel => r.token_class_label.clone(),
            LabelMode::SentenceLabel => r.sentence_class_label.clone(),
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LacoatError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LacoatError::json(path.display().to_string(), e))?;
    text.push('\n');
    write_text(path, &text)
}

/// Writes `annotation.json`, `census.csv`, `mapper_topk.csv` and
/// `alignment_by_layer.csv` under `report_dir`.
pub fn write_reports(
    art: &ArtifactSet,
    mapper_cfg: &MapperTraining,
    eval: &EvaluationSettings,
    steps: usize,
    report_dir: &Path,
) -> Result<BTreeMap<usize, f64>> {
    fs::create_dir_all(report_dir).map_err(|e| LacoatError::io(report_dir, e))?;
    let mode = label_mode(art.task);
    let classes = class_names(&art.filtered, mode);

    let mut annotations = Vec::new();
    let mut census_rows = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| LacoatError::invalid(format!("csv: {e}"));
    census_rows.write_record(["layer", "label", "concepts"]).map_err(csv_err)?;
    let mut topk_metrics: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    let mut alignment_metrics: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    let mut alignment = BTreeMap::new();

    for (&layer, la) in &art.layers {
        let labels = art.concept_labels(layer)?;
        let census = polarity_census(&labels, &classes);
        debug_assert_eq!(census.values().sum::<usize>(), la.concepts.len());
        for (label, n) in &census {
            census_rows
                .write_record([layer.to_string(), label.clone(), n.to_string()])
                .map_err(csv_err)?;
        }
        annotations.push(LayerAnnotation {
            layer,
            mode,
            threshold: art.threshold,
            concepts: labels,
        });

        let mut topk = BTreeMap::new();
        if let Some(acc) = layer_mapper_topk(&art.filtered, &la.concepts, mapper_cfg, eval)? {
            for (k, a) in acc {
                topk.insert(format!("top{k}"), a);
            }
        }
        topk_metrics.insert(layer, topk);

        let (acc, n) = layer_alignment(art, layer, eval, steps)?;
        alignment.insert(layer, acc);
        alignment_metrics.insert(
            layer,
            BTreeMap::from([("alignment_accuracy".to_string(), acc), ("instances".to_string(), n as f64)]),
        );
    }

    write_json(&report_dir.join("annotation.json"), &annotations)?;
    let census_bytes = census_rows.into_inner().map_err(|e| LacoatError::invalid(format!("csv: {e}")))?;
    write_text(
        &report_dir.join("census.csv"),
        &String::from_utf8(census_bytes).expect("csv output is utf-8"),
    )?;
    let topk_cols: Vec<String> = eval.ks.iter().map(|k| format!("top{k}")).collect();
    let topk_refs: Vec<&str> = topk_cols.iter().map(String::as_str).collect();
    write_text(&report_dir.join("mapper_topk.csv"), &layer_report(&topk_refs, &topk_metrics).to_csv()?)?;
    write_text(
        &report_dir.join("alignment_by_layer.csv"),
        &layer_report(&["alignment_accuracy", "instances"], &alignment_metrics).to_csv()?,
    )?;
    Ok(alignment)
}

/// Builds the transport for a run: the mock, or HTTP to the configured endpoint.
pub fn make_transport(settings: &LlmSettings) -> Result<(Box<dyn ChatTransport>, String, Option<String>)> {
    if settings.mock {
        return Ok((Box::new(MockTransport::canned(MOCK_ANSWER)), "mock://chat/completions".into(), None));
    }
    let endpoint = resolve_endpoint(settings)?;
    let transport = HttpTransport::new(Duration::from_secs(settings.timeout_secs))?;
    Ok((Box::new(transport), endpoint, std::env::var(API_KEY_ENV).ok()))
}

pub fn load_source_bundle(source: &BundleSource) -> Result<RepresentationBundle> {
    match source {
        BundleSource::Dir(dir) => load_bundle(dir),
        BundleSource::Synthetic(spec) => Ok(generate_synthetic_corpus(spec)?.bundle),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub alignment: BTreeMap<usize, f64>,
    pub explanations: Vec<Explanation>,
}

/// Runs every stage and writes the artifacts under `out_dir`.
pub fn run_config(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| LacoatError::io(out_dir, e))?;

    let raw = load_source_bundle(&cfg.bundle).stage("ingest")?;
    let filtered = filter_vocabulary(&raw, cfg.ingest.min_freq, cfg.ingest.max_occurrences, cfg.ingest.seed);
    if filtered.is_empty() {
        return Err(LacoatError::invalid("no records left after vocabulary filtering")).stage("ingest");
    }
    save_bundle(&raw, &out_dir.join(RAW_BUNDLE_DIR)).stage("ingest")?;
    save_bundle(&filtered, &out_dir.join(BUNDLE_DIR)).stage("ingest")?;

    let layers: Vec<usize> = match &cfg.layers {
        Some(l) => l.clone(),
        None => (0..raw.num_layers()).collect(),
    };
    for &l in &layers {
        raw.check_layer(l).stage("ingest")?;
    }
    if cfg.k > filtered.len() {
        return Err(LacoatError::invalid(format!(
            "k = {} exceeds the {} filtered records",
            cfg.k,
            filtered.len()
        )))
        .stage("discover");
    }

    let top = raw.num_layers() - 1;
    let mut scorer_acc = BTreeMap::new();
    let mut scorers = BTreeMap::new();
    for &l in layers.iter().chain(std::iter::once(&top)) {
        if scorers.contains_key(&l) {
            continue;
        }
        let (s, acc) = train_layer_scorer(&raw, l, cfg.task, &cfg.scorer).stage("train-scorer")?;
        scorer_acc.insert(format!("layer_{l}"), acc);
        scorers.insert(l, s);
    }
    let model_scorer = scorers[&top].clone();
    model_scorer.save(&out_dir.join(MODEL_SCORER_FILE)).stage("train-scorer")?;

    let mut artifacts = vec![
        format!("{RAW_BUNDLE_DIR}/"),
        format!("{BUNDLE_DIR}/"),
        MODEL_SCORER_FILE.to_string(),
    ];
    let mut layer_arts = BTreeMap::new();
    for &l in &layers {
        let dir = out_dir.join(layer_dir(l));
        fs::create_dir_all(&dir).map_err(|e| LacoatError::io(&dir, e))?;
        let (_, concepts) = discover_concepts(&filtered, l, cfg.k).stage("discover")?;
        concepts.save(&dir.join("concepts.json")).stage("discover")?;
        let mapper = train_layer_mapper(&filtered, &concepts, &cfg.mapper).stage("map-train")?;
        mapper.save(&dir.join("mapper.bin")).stage("map-train")?;
        let scorer = scorers[&l].clone();
        scorer.save(&dir.join("scorer.bin")).stage("train-scorer")?;
        for f in ["concepts.json", "mapper.bin", "scorer.bin"] {
            artifacts.push(format!("{}/{f}", layer_dir(l)));
        }
        layer_arts.insert(
            l,
            LayerArtifacts {
                concepts,
                mapper,
                scorer,
            },
        );
    }

    let art = ArtifactSet {
        task: cfg.task,
        raw,
        filtered,
        model_scorer,
        layers: layer_arts,
        threshold: cfg.evaluation.threshold,
    };

    let alignment = write_reports(
        &art,
        &cfg.mapper,
        &cfg.evaluation,
        cfg.attribution.steps,
        &out_dir.join(REPORT_DIR),
    )
    .stage("evaluate")?;
    for f in ["annotation.json", "census.csv", "mapper_topk.csv", "alignment_by_layer.csv"] {
        artifacts.push(format!("{REPORT_DIR}/{f}"));
    }

    let instances = if cfg.explain.instances.is_empty() {
        default_instances(&art)
    } else {
        cfg.explain.instances.clone()
    };
    let (transport, endpoint, api_key) = make_transport(&cfg.llm).stage("explain")?;
    let handle = LlmHandle {
        transport: transport.as_ref(),
        settings: &cfg.llm,
        endpoint,
        api_key,
    };
    let mut explanations = Vec::new();
    for inst in instances {
        explanations.extend(
            explain_instance(&art, inst, &layers, &cfg.attribution, &cfg.explain, Some(&handle)).stage("explain")?,
        );
    }
    write_json(&out_dir.join(EXPLANATIONS_FILE), &explanations)?;
    artifacts.push(EXPLANATIONS_FILE.to_string());
    artifacts.push(RUN_MANIFEST.to_string());

    let mut seeds = BTreeMap::from([
        ("ingest".to_string(), cfg.ingest.seed),
        ("scorer".to_string(), cfg.scorer.seed),
        ("split".to_string(), cfg.evaluation.split_seed),
        ("alignment_instances".to_string(), cfg.evaluation.instance_seed),
        ("display".to_string(), cfg.explain.display_seed),
    ]);
    if let BundleSource::Synthetic(spec) = &cfg.bundle {
        seeds.insert("synthetic".to_string(), spec.seed);
    }
    let thresholds = BTreeMap::from([
        ("purity".to_string(), cfg.evaluation.threshold),
        ("attribution_mass".to_string(), cfg.attribution.mass),
        ("min_freq".to_string(), cfg.ingest.min_freq as f64),
        ("max_occurrences".to_string(), cfg.ingest.max_occurrences as f64),
        ("ig_steps".to_string(), cfg.attribution.steps as f64),
        ("mapper_tol".to_string(), cfg.mapper.tol),
        ("llm_temperature".to_string(), cfg.llm.temperature),
        ("llm_top_p".to_string(), cfg.llm.top_p),
    ]);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        task: cfg.task,
        k: cfg.k,
        layers,
        num_layers: art.raw.num_layers(),
        raw_records: art.raw.len(),
        filtered_records: art.filtered.len(),
        seeds,
        thresholds,
        scorer_train_accuracy: scorer_acc,
        artifacts,
        config: cfg.clone(),
    };
    write_json(&out_dir.join(RUN_MANIFEST), &manifest)?;
    Ok(RunOutcome {
        manifest,
        alignment,
        explanations,
    })
}

/// First sentence of the bundle, at its first word for token-level tasks.
pub fn default_instances(art: &ArtifactSet) -> Vec<InstanceRef> {
    let Some(&sentence_id) = art.raw.sentence_ids().first() else {
        return Vec::new();
    };
    let position = match art.task {
        TaskKind::SequenceClassification => None,
        _ => art
            .raw
            .sentence_rows(sentence_id)
            .into_iter()
            .map(|r| art.raw.record(r))
            .find(|r| !r.is_classifier_token)
            .map(|r| r.position),
    };
    vec![InstanceRef { sentence_id, position }]
}
