//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use lacoat::attribution::{
    gradient_check, integrated_gradients, select_top_p, DifferentiableScorer, LinearScorer, TaskKind,
};
use lacoat::concept_discoverer::{cluster, discover_concepts, ConceptSet};
use lacoat::concept_mapper::{loss_and_gradient, train_mapper, MapperTraining};
use lacoat::evaluation::{annotate_concepts, polarity_census, LabelMode};
use lacoat::pipeline::{
    explain_instance, layer_mapper_topk, run_config, train_layer_scorer, ArtifactSet, AttributionSettings,
    EvaluationSettings, ExplainSettings, InstanceRef, LlmHandle, RunConfig,
};
use lacoat::plausifyer::{build_prompt, LlmSettings, MockTransport, PromptInput};
use lacoat::repr_store::{load_bundle, RepresentationBundle, TokenRecord};
use lacoat::scorer::ScorerTraining;
use lacoat::synthetic::{generate_synthetic_corpus, SyntheticCorpusSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 ------------------------------------------------------------------------

fn ward_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ks: Vec<usize> = (2..=10).collect();
    let mut compared = 0;
    for dataset in 0..20 {
        let n = rng.gen_range(12..=64);
        let dim = rng.gen_range(1..=8);
        let points = common::blob_dataset(&mut rng, n, dim);
        let oracle = common::naive_ward(&points, &ks);
        for &k in &ks {
            let (_, got) = cluster(&points, k).map_err(err)?;
            check(common::canonical(got) == oracle[&k], || {
                format!("dataset {dataset} (n={n}, dim={dim}) differs at K={k}")
            })?;
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{compared} partitions identical, {elapsed:.2?}"))
}

// 2 ------------------------------------------------------------------------

fn ig_exactness_and_completeness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // linear scorer: attributions are exactly x ⊙ w
    let mut linear_err: f64 = 0.0;
    for _ in 0..20 {
        let dim = rng.gen_range(1..8);
        let weights: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let scorer = LinearScorer { weights };
        let tokens = rng.gen_range(1..10);
        let inputs: Vec<Vec<f64>> = (0..tokens)
            .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let target = rng.gen_range(0..3);
        let attr = integrated_gradients(&scorer, &inputs, target, 500, None).map_err(err)?;
        for (t, x) in inputs.iter().enumerate() {
            let expect: Vec<f64> = x.iter().zip(&scorer.weights[target]).map(|(a, b)| a * b).collect();
            for (d, e) in expect.iter().enumerate() {
                linear_err = linear_err.max((attr.per_dim[t][d] - e).abs());
            }
            linear_err = linear_err.max((attr.per_token[t] - expect.iter().sum::<f64>()).abs());
        }
    }
    check(linear_err <= 1e-6, || format!("linear attribution error {linear_err:e}"))?;

    // reference scorers, one per pooling mode
    let cfg = ScorerTraining::default();
    let small = SyntheticCorpusSpec {
        words_per_facet: 5,
        contexts_per_word: 10,
        ..Default::default()
    };
    let labeling = generate_synthetic_corpus(&small).map_err(err)?.bundle;
    let classification = generate_synthetic_corpus(&SyntheticCorpusSpec {
        task: TaskKind::SequenceClassification,
        ..small.clone()
    })
    .map_err(err)?
    .bundle;
    let top = small.layers - 1;
    let (lab_scorer, _) = train_layer_scorer(&labeling, top, TaskKind::SequenceLabeling, &cfg).map_err(err)?;
    let (cls_scorer, _) =
        train_layer_scorer(&classification, top, TaskKind::SequenceClassification, &cfg).map_err(err)?;

    let mut worst_gap: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for probe in 0..100 {
        let (bundle, scorer, labeling_probe) = if probe % 2 == 0 {
            (&labeling, &lab_scorer, true)
        } else {
            (&classification, &cls_scorer, false)
        };
        let sentences = bundle.sentence_ids();
        let sid = sentences[rng.gen_range(0..sentences.len())];
        let rows = bundle.sentence_rows(sid);
        // jitter so probes are not limited to training points
        let inputs: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| bundle.vector_f64(top, r).into_iter().map(|v| v + 0.5 * common::gaussian(&mut rng)).collect())
            .collect();
        let position = labeling_probe.then(|| rng.gen_range(0..rows.len()));
        let target = rng.gen_range(0..scorer.num_classes());
        let inst = scorer.for_instance(position);
        let attr = integrated_gradients(&inst, &inputs, target, 500, None).map_err(err)?;
        let zeros: Vec<Vec<f64>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
        let delta = inst.forward(&inputs, target).map_err(err)? - inst.forward(&zeros, target).map_err(err)?;
        let gap = (attr.total() - delta).abs() / delta.abs().max(1.0);
        worst_gap = worst_gap.max(gap);
        worst_fd = worst_fd.max(gradient_check(&inst, &inputs, target, 1e-5).map_err(err)?);
    }
    check(worst_gap <= 1e-3, || format!("completeness gap {worst_gap:e}"))?;
    check(worst_fd <= 1e-4, || format!("finite-difference error {worst_fd:e}"))?;
    Ok(format!(
        "linear err {linear_err:.1e}, completeness gap {worst_gap:.1e}, fd err {worst_fd:.1e}"
    ))
}

// 3 ------------------------------------------------------------------------

fn mapper_convexity_and_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, dim, k) = (40, 5, 4);
    let features: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| common::gaussian(&mut rng)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut grad_err: f64 = 0.0;
    for _ in 0..5 {
        let params: Vec<f64> = (0..k * dim + k).map(|_| common::gaussian(&mut rng)).collect();
        let (_, analytic) = loss_and_gradient(&features, &labels, k, 0.1, &params);
        let numeric = common::numeric_gradient(|p| loss_and_gradient(&features, &labels, k, 0.1, p).0, &params, 1e-6);
        for (a, b) in analytic.iter().zip(&numeric) {
            grad_err = grad_err.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
    }
    check(grad_err <= 1e-5, || format!("gradient check {grad_err:e}"))?;

    let cfg = MapperTraining::default();
    let a = train_mapper(&features, &labels, k, 0, &cfg).map_err(err)?.model;
    let b = train_mapper(&features, &labels, k, 0, &cfg).map_err(err)?.model;
    let drift = a
        .weights
        .iter()
        .zip(&b.weights)
        .chain(a.biases.iter().zip(&b.biases))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    check(drift <= 1e-6, || format!("runs differ by {drift:e}"))?;

    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).map_err(err)?;
    let top = corpus.bundle.num_layers() - 1;
    let (_, concepts) = discover_concepts(&corpus.bundle, top, 10).map_err(err)?;
    let eval = EvaluationSettings {
        ks: vec![1, 2, 5],
        ..Default::default()
    };
    let topk = layer_mapper_topk(&corpus.bundle, &concepts, &cfg, &eval)
        .map_err(err)?
        .ok_or("no held-out members")?;
    let acc: BTreeMap<usize, f64> = topk.into_iter().collect();
    check(acc[&1] >= 0.99, || format!("top-1 {}", acc[&1]))?;
    check(acc[&1] <= acc[&2] && acc[&2] <= acc[&5], || format!("not monotone: {acc:?}"))?;
    Ok(format!(
        "grad err {grad_err:.1e}, run drift {drift:.1e}, top-1/2/5 = {:.4}/{:.4}/{:.4}",
        acc[&1], acc[&2], acc[&5]
    ))
}

// 4 ------------------------------------------------------------------------

fn token(sentence: u64, position: u32, token_label: Option<&str>, sentence_label: Option<&str>) -> TokenRecord {
    TokenRecord {
        token_text: format!("t{sentence}_{position}"),
        sentence_id: sentence,
        position,
        is_classifier_token: false,
        sentence_class_label: sentence_label.map(str::to_string),
        token_class_label: token_label.map(str::to_string),
    }
}

/// Every label assignment of `size` members over `alphabet`.
fn assignments(size: usize, alphabet: &[&'static str]) -> Vec<Vec<&'static str>> {
    let mut out = vec![vec![]];
    for _ in 0..size {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                alphabet.iter().map(move |&l| {
                    let mut p = prefix.clone();
                    p.push(l);
                    p
                })
            })
            .collect();
    }
    out
}

fn annotation_semantics() -> Outcome {
    let mut checked = 0usize;
    let cases: [(&[&str], usize); 2] = [(&["A", "B"], 11), (&["A", "B", "C"], 7)];
    for (alphabet, max_size) in cases {
        let classes: Vec<String> = alphabet.iter().map(|s| s.to_string()).collect();
        for size in 1..=max_size {
            let combos = assignments(size, alphabet);
            let mut records = Vec::new();
            let mut concepts = Vec::new();
            for (c, combo) in combos.iter().enumerate() {
                let start = records.len();
                records.extend(combo.iter().enumerate().map(|(i, l)| token(c as u64, i as u32, Some(l), None)));
                concepts.push((start..records.len()).collect());
            }
            let set = ConceptSet {
                layer: 0,
                k: concepts.len(),
                concepts,
            };
            let labels = annotate_concepts(&set, &records, LabelMode::TokenLabel, 0.9).map_err(err)?;
            for (combo, got) in combos.iter().zip(&labels) {
                let expect = common::strict_ninety_label(combo);
                check(got.label == expect, || format!("{combo:?}: got {} want {expect}", got.label))?;
                checked += 1;
            }
            let census = polarity_census(&labels, &classes);
            let total: usize = census.values().sum();
            check(total == set.k, || format!("census sums to {total}, K = {}", set.k))?;
            check(classes.iter().all(|c| census.contains_key(c)), || "census drops a class".into())?;
        }
    }

    // sentence labels: only the classifier-role record of each sentence carries
    // the label, and each word member inherits it from its sentence
    for combo in assignments(10, &["Negative", "Positive"]) {
        let mut records = Vec::new();
        let mut members = Vec::new();
        for (s, label) in combo.iter().enumerate() {
            let mut cls = token(s as u64, 0, None, Some(label));
            cls.is_classifier_token = true;
            records.push(cls);
            members.push(records.len());
            records.push(token(s as u64, 1, None, None));
        }
        let set = ConceptSet {
            layer: 0,
            k: 1,
            concepts: vec![members],
        };
        let labels = annotate_concepts(&set, &records, LabelMode::SentenceLabel, 0.9).map_err(err)?;
        let expect = common::strict_ninety_label(&combo);
        check(labels[0].label == expect, || format!("sentence labels {combo:?}: got {}", labels[0].label))?;
        checked += 1;
    }
    Ok(format!("{checked} concepts match the strict >90% rule, census sums hold"))
}

// 5 ------------------------------------------------------------------------

fn top_p_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let masses = [0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
    let mut cases = 0;
    for _ in 0..3000 {
        let n = rng.gen_range(1..=12);
        // multiples of 1/8 keep every subset sum exact
        let scores: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(-64i32..=64) as f64 / 8.0 })
            .collect();
        let mass = if rng.gen_bool(0.5) {
            masses[rng.gen_range(0..masses.len())]
        } else {
            rng.gen_range(1..=64) as f64 / 64.0
        };
        let sel = select_top_p(&scores, mass).map_err(err)?;
        if scores.iter().all(|s| *s == 0.0) {
            check(sel.degenerate && sel.indices == vec![0], || format!("{scores:?}: degenerate case"))?;
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].abs().partial_cmp(&scores[a].abs()).unwrap().then(a.cmp(&b)));
        let minimal = common::brute_force_min_cover(&scores, mass);
        check(sel.indices.len() == minimal, || {
            format!("{scores:?} at {mass}: {} selected, oracle {minimal}", sel.indices.len())
        })?;
        check(sel.indices == order[..minimal], || format!("{scores:?} at {mass}: not a magnitude prefix"))?;
        cases += 1;
    }
    Ok(format!("{cases} random cases agree with the subset oracle"))
}

// 6 and 8 share two CLI runs ----------------------------------------------

const DESK_CONFIG: &str = r#"{
  "bundle": {"synthetic": {"seed": 0}},
  "task": "sequence_labeling",
  "k": 10,
  "llm": {"mock": true}
}"#;

fn run_cli(config: &Path, out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_lacoat"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(err)?;
    let elapsed = start.elapsed();
    check(output.status.success(), || {
        format!("lacoat run failed: {}", String::from_utf8_lossy(&output.stderr))
    })?;
    Ok(elapsed)
}

fn end_to_end(run_dir: &Path, elapsed: Duration) -> Outcome {
    check(elapsed < Duration::from_secs(60), || format!("run took {elapsed:?}"))?;
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_manifest.json")).map_err(err)?).map_err(err)?;
    let artifacts = manifest["artifacts"].as_array().ok_or("manifest lists no artifacts")?;
    for a in artifacts {
        let rel = a.as_str().unwrap_or_default();
        check(run_dir.join(rel).exists(), || format!("missing artifact {rel}"))?;
    }
    for rel in [
        "report/annotation.json",
        "report/census.csv",
        "report/mapper_topk.csv",
        "report/alignment_by_layer.csv",
        "explanations.json",
    ] {
        check(run_dir.join(rel).is_file(), || format!("missing report file {rel}"))?;
    }
    let bundle = load_bundle(&run_dir.join("bundle")).map_err(err)?;
    check(bundle.len() == 4000 && bundle.num_layers() == 3, || {
        format!("{} records, {} layers", bundle.len(), bundle.num_layers())
    })?;

    let top = bundle.num_layers() - 1;
    let concepts = ConceptSet::load(&run_dir.join(format!("layer_{top}/concepts.json"))).map_err(err)?;
    let purity = best_match_purity(&bundle, &concepts);
    check(purity >= 0.99, || format!("top-layer purity {purity}"))?;

    let mut reader = csv::Reader::from_path(run_dir.join("report/alignment_by_layer.csv")).map_err(err)?;
    let mut alignment = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(err)?;
        alignment.insert(row[0].parse::<usize>().map_err(err)?, row[1].parse::<f64>().map_err(err)?);
    }
    let first = alignment[&0];
    let last = alignment[&top];
    check(last > first, || format!("alignment layer {top} = {last} vs layer 0 = {first}"))?;
    Ok(format!(
        "{elapsed:.1?}, {} artifacts, purity {purity:.4}, alignment layer0 {first:.3} -> layer{top} {last:.3}",
        artifacts.len()
    ))
}

fn best_match_purity(bundle: &RepresentationBundle, concepts: &ConceptSet) -> f64 {
    let mut matched = 0;
    let mut total = 0;
    for members in &concepts.concepts {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for &m in members {
            *counts.entry(bundle.record(m).token_class_label.as_deref().unwrap_or("")).or_default() += 1;
        }
        matched += counts.values().max().copied().unwrap_or(0);
        total += members.len();
    }
    matched as f64 / total as f64
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let left = common::snapshot_dir(a);
    let right = common::snapshot_dir(b);
    let names_left: Vec<_> = left.keys().collect();
    let names_right: Vec<_> = right.keys().collect();
    check(names_left == names_right, || "runs wrote different file sets".into())?;
    for (name, bytes) in &left {
        check(right[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    let bytes: usize = left.values().map(Vec::len).sum();
    Ok(format!("{} files, {bytes} bytes identical", left.len()))
}

// 7 ------------------------------------------------------------------------

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

fn prompt_fidelity() -> Outcome {
    let sentence = words("the film was a quiet delight");
    let items: Vec<String> = [
        "a warm and generous story",
        "the cast is wonderful throughout",
        "i loved every minute of it",
        "a charming little gem",
        "beautifully shot and acted",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let got = build_prompt(
        TaskKind::SequenceClassification,
        &PromptInput {
            sentence_tokens: &sentence,
            highlight: None,
            concept_items: &items,
        },
    )
    .map_err(err)?;
    check(got == fixture("prompt_classification.txt"), || format!("classification prompt:\n{got}"))?;
    check(got.ends_with("No talk, just go."), || "classification closing line".into())?;

    let sentence = words("the former police deputy resigned on friday");
    let items = words("sheriff officer deputy constable marshal");
    let got = build_prompt(
        TaskKind::SequenceLabeling,
        &PromptInput {
            sentence_tokens: &sentence,
            highlight: Some(3),
            concept_items: &items,
        },
    )
    .map_err(err)?;
    check(got == fixture("prompt_labeling.txt"), || format!("labeling prompt:\n{got}"))?;
    check(got.ends_with("Answer concisely and to the point."), || "labeling closing line".into())?;

    // full explanations through the mock transport, both task kinds
    let mut prompts = 0;
    for task in [TaskKind::SequenceClassification, TaskKind::SequenceLabeling] {
        let task_name = serde_json::to_value(task).map_err(err)?;
        let cfg_json = serde_json::json!({
            "bundle": {"synthetic": {"task": task_name, "words_per_facet": 4, "contexts_per_word": 6}},
            "task": task_name,
            "k": 8,
            "llm": {"mock": true},
        });
        let cfg = RunConfig::from_json(&cfg_json.to_string()).map_err(err)?;
        let dir = tempfile::tempdir().map_err(err)?;
        run_config(&cfg, dir.path()).map_err(err)?;
        let art = ArtifactSet::load_run_dir(dir.path()).map_err(err)?;

        let transport = MockTransport::canned("a shared facet");
        let settings = LlmSettings::default();
        let handle = LlmHandle {
            transport: &transport,
            settings: &settings,
            endpoint: "http://mock.invalid/chat/completions".into(),
            api_key: None,
        };
        let sentences = art.raw.sentence_ids();
        let layers: Vec<usize> = art.layers.keys().copied().collect();
        for &sid in sentences.iter().take(6) {
            let position = (task == TaskKind::SequenceLabeling).then_some(1);
            let explanations = explain_instance(
                &art,
                InstanceRef { sentence_id: sid, position },
                &layers,
                &AttributionSettings::default(),
                &ExplainSettings::default(),
                Some(&handle),
            )
            .map_err(err)?;
            for e in &explanations {
                let mut forbidden = vec![e.prediction.clone()];
                forbidden.extend(e.true_label.clone());
                for f in &forbidden {
                    check(!e.prompt.contains(f.as_str()), || format!("prompt leaks {f:?}:\n{}", e.prompt))?;
                }
                prompts += 1;
            }
        }
        let requests = transport.requests();
        check(!requests.is_empty(), || "mock saw no requests".into())?;
        for r in &requests {
            check(r["temperature"].as_f64() == Some(0.0), || format!("temperature {}", r["temperature"]))?;
            check(r["top_p"].as_f64() == Some(0.95), || format!("top_p {}", r["top_p"]))?;
            check(r["messages"][0]["role"] == "user", || "message role".into())?;
        }
    }
    Ok(format!("golden fixtures match, {prompts} prompts leak no label, mock sampling params hold"))
}

// -------------------------------------------------------------------------

fn report(results: &mut Vec<bool>, n: usize, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => {
            println!("PASS [{n}] {name}: {detail}");
            results.push(true);
        }
        Err(detail) => {
            println!("FAIL [{n}] {name}: {detail}");
            results.push(false);
        }
    }
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "ward oracle equivalence", ward_oracle_equivalence());
    report(&mut results, 2, "integrated gradients exactness/completeness", ig_exactness_and_completeness());
    report(&mut results, 3, "mapper convexity/accuracy", mapper_convexity_and_accuracy());
    report(&mut results, 4, "annotation semantics", annotation_semantics());
    report(&mut results, 5, "top-p selection", top_p_selection());

    let work = tempfile::tempdir().expect("temp dir");
    let config = work.path().join("config.json");
    std::fs::write(&config, DESK_CONFIG).expect("write config");
    let (a, b) = (work.path().join("run_a"), work.path().join("run_b"));
    let first = run_cli(&config, &a);
    report(
        &mut results,
        6,
        "end-to-end desk run",
        first.clone().and_then(|elapsed| end_to_end(&a, elapsed)),
    );
    report(&mut results, 7, "prompt fidelity", prompt_fidelity());
    report(
        &mut results,
        8,
        "pipeline determinism",
        first.and_then(|_| run_cli(&config, &b)).and_then(|_| determinism(&a, &b)),
    );

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
