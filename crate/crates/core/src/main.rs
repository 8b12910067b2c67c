use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lacoat::attribution::{integrated_gradients, select_salient_top_p, TaskKind};
use lacoat::concept_discoverer::{discover_concepts, ConceptSet};
use lacoat::concept_mapper::{MapperModel, MapperTraining};
use lacoat::pipeline::{
    self, explain_instance, make_transport, train_layer_mapper, train_layer_scorer, write_reports, ArtifactSet,
    AttributionSettings, EvaluationSettings, ExplainSettings, InstanceRef, LayerArtifacts, LlmHandle, RunConfig,
};
use lacoat::plausifyer::LlmSettings;
use lacoat::repr_store::{filter_vocabulary, load_bundle, save_bundle};
use lacoat::scorer::{Pooling, ReferenceScorer, ScorerTraining};
use lacoat::synthetic::{generate_synthetic_corpus, SyntheticCorpusSpec};
use lacoat::{LacoatError, Result};

#[derive(Parser)]
#[command(name = "lacoat", version, about = "Latent-concept explanations for classifier predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a bundle's vocabulary and write the result
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_freq: usize,
        #[arg(long = "max-occ", default_value_t = 20)]
        max_occurrences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (defaults to `<dir>.filtered`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster one layer into K concepts
    Discover {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 400)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reference scorer for one layer
    TrainScorer {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, default_value_t = ScorerTraining::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = ScorerTraining::default().hidden)]
        hidden: usize,
        #[arg(long, default_value_t = ScorerTraining::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the concept mapper for one layer
    MapTrain {
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrated-gradients attribution for one sentence
    Attribute {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        instance: u64,
        /// Word position of the prediction (token-level scorers)
        #[arg(long)]
        position: Option<u32>,
        /// Layer whose vectors feed the scorer (defaults to the top layer)
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        mass: f64,
    },
    /// Write the evaluation report tables
    Evaluate {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain one instance at one or more layers
    Explain {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long)]
        instance: u64,
        #[arg(long)]
        position: Option<u32>,
        /// Comma-separated layers (defaults to every layer with artifacts)
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        mass: f64,
        #[arg(long, conflicts_with = "llm_mock")]
        llm_model: Option<String>,
        #[arg(long)]
        llm_mock: bool,
        #[arg(long)]
        llm_base_url: Option<String>,
        /// Write explanations here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic corpus
    Synth {
        /// JSON file with corpus settings; defaults apply when absent
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a JSON config
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    SequenceClassification,
    SequenceLabeling,
    MaskedPrediction,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::SequenceClassification => TaskKind::SequenceClassification,
            Task::SequenceLabeling => TaskKind::SequenceLabeling,
            Task::MaskedPrediction => TaskKind::MaskedPrediction,
        }
    }
}

#[derive(Args)]
struct ArtifactArgs {
    /// Directory written by `lacoat run`
    #[arg(long, conflicts_with_all = ["bundle", "concepts"])]
    run: Option<PathBuf>,
    /// Clustered (filtered) bundle the concept ids refer to
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Bundle with full sentences (defaults to --bundle)
    #[arg(long)]
    raw_bundle: Option<PathBuf>,
    /// One per layer
    #[arg(long)]
    concepts: Vec<PathBuf>,
    /// One per layer, same order as --concepts
    #[arg(long)]
    mapper: Vec<PathBuf>,
    /// One per layer, same order as --concepts
    #[arg(long)]
    scorer: Vec<PathBuf>,
    /// Scorer whose prediction is explained (defaults to the last --scorer)
    #[arg(long)]
    model_scorer: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
}

impl ArtifactArgs {
    fn load(&self, threshold: f64) -> Result<ArtifactSet> {
        if let Some(dir) = &self.run {
            let mut art = ArtifactSet::load_run_dir(dir)?;
            art.threshold = threshold;
            return Ok(art);
        }
        let bundle = self
            .bundle
            .as_ref()
            .ok_or_else(|| LacoatError::invalid("pass --run or --bundle with per-layer artifacts"))?;
        let task = self
            .task
            .ok_or_else(|| LacoatError::invalid("--task is required without --run"))?;
        if self.concepts.is_empty()
            || self.concepts.len() != self.mapper.len()
            || self.concepts.len() != self.scorer.len()
        {
            return Err(LacoatError::invalid(
                "give the same number of --concepts, --mapper and --scorer files (one per layer)",
            ));
        }
        let filtered = load_bundle(bundle)?;
        let raw = match &self.raw_bundle {
            Some(p) => load_bundle(p)?,
            None => filtered.clone(),
        };
        let mut layers = BTreeMap::new();
        for ((c, m), s) in self.concepts.iter().zip(&self.mapper).zip(&self.scorer) {
            let concepts = ConceptSet::load(c)?;
            concepts.validate(filtered.len())?;
            let mapper = MapperModel::load(m)?;
            if mapper.layer != concepts.layer || mapper.num_classes != concepts.len() {
                return Err(LacoatError::invalid(format!(
                    "{} does not match {}",
                    m.display(),
                    c.display()
                )));
            }
            layers.insert(
                concepts.layer,
                LayerArtifacts {
                    concepts,
                    mapper,
                    scorer: ReferenceScorer::load(s)?,
                },
            );
        }
        let model_path = self.model_scorer.as_ref().unwrap_or_else(|| self.scorer.last().unwrap());
        Ok(ArtifactSet {
            task: task.into(),
            raw,
            filtered,
            model_scorer: ReferenceScorer::load(model_path)?,
            layers,
            threshold,
        })
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LacoatError::invalid(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(LacoatError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn write_json_file(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LacoatError::invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| LacoatError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest {
            dir,
            min_freq,
            max_occurrences,
            seed,
            out,
        } => {
            let bundle = load_bundle(&dir)?;
            let filtered = filter_vocabulary(&bundle, min_freq, max_occurrences, seed);
            let out = out.unwrap_or_else(|| dir.with_extension("filtered"));
            save_bundle(&filtered, &out)?;
            print_json(&json!({
                "records_in": bundle.len(),
                "records_out": filtered.len(),
                "layers": bundle.num_layers(),
                "dim": bundle.dim(),
                "out": out,
            }))
        }
        Command::Discover { bundle, layer, k, out } => {
            let bundle = load_bundle(&bundle)?;
            let (dendrogram, concepts) = discover_concepts(&bundle, layer, k)?;
            concepts.save(&out)?;
            let total: f64 = dendrogram.merges().iter().map(|m| m.cost).sum();
            print_json(&json!({"layer": layer, "k": k, "records": bundle.len(), "total_merge_cost": total}))
        }
        Command::TrainScorer {
            bundle,
            layer,
            task,
            epochs,
            hidden,
            seed,
            out,
        } => {
            let bundle = load_bundle(&bundle)?;
            let cfg = ScorerTraining {
                epochs,
                hidden,
                seed,
                ..Default::default()
            };
            let (scorer, acc) = train_layer_scorer(&bundle, layer, task.into(), &cfg)?;
            scorer.save(&out)?;
            print_json(&json!({"layer": layer, "train_accuracy": acc, "classes": scorer.class_names}))
        }
        Command::MapTrain {
            concepts,
            bundle,
            layer,
            l2,
            max_iter,
            tol,
            out,
        } => {
            let bundle = load_bundle(&bundle)?;
            let concepts = ConceptSet::load(&concepts)?;
            if concepts.layer != layer {
                return Err(LacoatError::invalid(format!(
                    "concept file was built on layer {}, not {layer}",
                    concepts.layer
                )));
            }
            let mapper = train_layer_mapper(&bundle, &concepts, &MapperTraining { l2, max_iter, tol })?;
            mapper.save(&out)?;
            print_json(&json!({"layer": layer, "concepts": mapper.num_classes, "l2": mapper.l2_strength}))
        }
        Command::Attribute {
            bundle,
            scorer,
            instance,
            position,
            layer,
            steps,
            mass,
        } => {
            let bundle = load_bundle(&bundle)?;
            let scorer = ReferenceScorer::load(&scorer)?;
            let layer = layer.unwrap_or(bundle.num_layers() - 1);
            bundle.check_layer(layer)?;
            let rows = bundle.sentence_rows(instance);
            if rows.is_empty() {
                return Err(LacoatError::invalid(format!("unknown instance: sentence {instance}")));
            }
            let output_index = match (scorer.pooling, position) {
                (Pooling::Mean, _) => None,
                (Pooling::PerToken, Some(p)) => Some(
                    rows.iter()
                        .position(|&r| bundle.record(r).position == p)
                        .ok_or_else(|| LacoatError::invalid(format!("sentence {instance} has no position {p}")))?,
                ),
                (Pooling::PerToken, None) => {
                    return Err(LacoatError::invalid("token-level scorer needs --position"))
                }
            };
            let inputs: Vec<Vec<f64>> = rows.iter().map(|&r| bundle.vector_f64(layer, r)).collect();
            let target = scorer.predict(&inputs, output_index)?;
            let attr = integrated_gradients(&scorer.for_instance(output_index), &inputs, target, steps, None)?;
            let selection = select_salient_top_p(&attr, mass)?;
            let tokens: Vec<_> = rows
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    json!({
                        "token": bundle.record(r).token_text,
                        "position": bundle.record(r).position,
                        "score": attr.per_token[i],
                        "selected": selection.indices.contains(&i),
                    })
                })
                .collect();
            print_json(&json!({
                "sentence_id": instance,
                "layer": layer,
                "target": scorer.class_names[target],
                "steps": attr.steps_used,
                "degenerate": selection.degenerate,
                "tokens": tokens,
            }))
        }
        Command::Evaluate {
            artifacts,
            steps,
            threshold,
            split_seed,
            out,
        } => {
            let art = artifacts.load(threshold)?;
            let eval = EvaluationSettings {
                threshold,
                split_seed,
                ..Default::default()
            };
            let alignment = write_reports(&art, &MapperTraining::default(), &eval, steps, &out)?;
            print_json(&json!({ "alignment_by_layer": alignment }))
        }
        Command::Explain {
            artifacts,
            instance,
            position,
            layers,
            steps,
            mass,
            llm_model,
            llm_mock,
            llm_base_url,
            out,
        } => {
            let art = artifacts.load(lacoat::evaluation::DEFAULT_PURITY_THRESHOLD)?;
            let layers = if layers.is_empty() {
                art.layers.keys().copied().collect()
            } else {
                layers
            };
            let settings = LlmSettings {
                mock: llm_mock || llm_model.is_none(),
                model: llm_model.unwrap_or_else(|| LlmSettings::default().model),
                base_url: llm_base_url,
                ..Default::default()
            };
            let (transport, endpoint, api_key) = make_transport(&settings)?;
            let handle = LlmHandle {
                transport: transport.as_ref(),
                settings: &settings,
                endpoint,
                api_key,
            };
            let explanations = explain_instance(
                &art,
                InstanceRef {
                    sentence_id: instance,
                    position,
                },
                &layers,
                &AttributionSettings { steps, mass },
                &ExplainSettings::default(),
                Some(&handle),
            )?;
            match out {
                Some(path) => write_json_file(&path, &explanations),
                None => print_json(&serde_json::to_value(&explanations).expect("serializable")),
            }
        }
        Command::Synth { spec, seed, out } => {
            let mut spec: SyntheticCorpusSpec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| LacoatError::Io { path, source: e })?;
                    serde_json::from_str(&text).map_err(|e| LacoatError::invalid(format!("corpus spec: {e}")))?
                }
                None => SyntheticCorpusSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let corpus = generate_synthetic_corpus(&spec)?;
            save_bundle(&corpus.bundle, &out)?;
            write_json_file(&out.join("facets.json"), &corpus.facets)?;
            print_json(&json!({"records": corpus.bundle.len(), "layers": spec.layers, "dim": spec.dim}))
        }
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| LacoatError::invalid("no output directory: pass --out or set out_dir"))?;
            let outcome = pipeline::run_config(&cfg, &out)?;
            print_json(&json!({
                "out": out,
                "alignment_by_layer": outcome.alignment,
                "explanations": outcome.explanations.len(),
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
