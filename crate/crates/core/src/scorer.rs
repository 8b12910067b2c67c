//! A small two-layer perceptron standing in for the fine-tuned model.
//!
//! `H → hidden (tanh) → classes`. For sequence classification the token vectors
//! are mean-pooled first; for labeling the network reads one token.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::DifferentiableScorer;
use crate::error::{LacoatError, Result};
use crate::model_file;

const MAGIC: &[u8; 4] = b"LCSC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTraining {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ScorerTraining {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 300,
            learning_rate: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScorer {
    pub pooling: Pooling,
    pub class_names: Vec<String>,
    dim: usize,
    hidden: usize,
    /// Flat parameter vector: w1 (hidden×dim), b1, w2 (classes×hidden), b2.
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    pooling: Pooling,
    class_names: Vec<String>,
    dim: usize,
    hidden: usize,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

fn layout(dim: usize, hidden: usize, classes: usize) -> Layout {
    let w1 = 0;
    let b1 = w1 + hidden * dim;
    let w2 = b1 + hidden;
    let b2 = w2 + classes * hidden;
    Layout {
        w1,
        b1,
        w2,
        b2,
        total: b2 + classes,
    }
}

impl ReferenceScorer {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    fn layout(&self) -> Layout {
        layout(self.dim, self.hidden, self.num_classes())
    }

    /// Hidden activations and logits for one (pooled) vector.
    fn run(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let p = &self.params;
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &p[l.w1 + j * self.dim..l.w1 + (j + 1) * self.dim];
                (p[l.b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let logits = (0..self.num_classes())
            .map(|c| {
                let row = &p[l.w2 + c * self.hidden..l.w2 + (c + 1) * self.hidden];
                p[l.b2 + c] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (h, logits)
    }

    /// `∂logit[target]/∂x` for one (pooled) vector.
    fn input_gradient(&self, x: &[f64], target: usize) -> Vec<f64> {
        let l = self.layout();
        let p = &self.params;
        let (h, _) = self.run(x);
        let mut g = vec![0.0; self.dim];
        for j in 0..self.hidden {
            let upstream = p[l.w2 + target * self.hidden + j] * (1.0 - h[j] * h[j]);
            let row = &p[l.w1 + j * self.dim..l.w1 + (j + 1) * self.dim];
            for (gi, w) in g.iter_mut().zip(row) {
                *gi += upstream * w;
            }
        }
        g
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).1
    }

    pub fn predict_vector(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Predicted class for a token sequence, read at `position` for per-token models.
    pub fn predict(&self, inputs: &[Vec<f64>], position: Option<usize>) -> Result<usize> {
        let view = self.for_instance(position);
        let x = view.model_input(inputs)?;
        Ok(self.predict_vector(&x))
    }

    /// Scorer bound to one instance; per-token models need the output position.
    pub fn for_instance(&self, position: Option<usize>) -> InstanceScorer<'_> {
        InstanceScorer { model: self, position }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            pooling: self.pooling,
            class_names: self.class_names.clone(),
            dim: self.dim,
            hidden: self.hidden,
        };
        let values: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
        model_file::write(path, MAGIC, &header, &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values): (Header, Vec<f32>) = model_file::read(path, MAGIC)?;
        let l = layout(header.dim, header.hidden, header.class_names.len());
        if values.len() != l.total {
            return Err(LacoatError::invalid(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                l.total,
                values.len()
            )));
        }
        Ok(Self {
            pooling: header.pooling,
            class_names: header.class_names,
            dim: header.dim,
            hidden: header.hidden,
            params: values.into_iter().map(f64::from).collect(),
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub struct InstanceScorer<'a> {
    model: &'a ReferenceScorer,
    position: Option<usize>,
}

impl InstanceScorer<'_> {
    fn model_input(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let dim = self.model.dim;
        if inputs.is_empty() {
            return Err(LacoatError::invalid("empty input sequence"));
        }
        if let Some(x) = inputs.iter().find(|x| x.len() != dim) {
            return Err(LacoatError::DimMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        match self.model.pooling {
            Pooling::Mean => {
                let mut mean = vec![0.0; dim];
                for x in inputs {
                    for (m, v) in mean.iter_mut().zip(x) {
                        *m += v;
                    }
                }
                let n = inputs.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                Ok(mean)
            }
            Pooling::PerToken => {
                let p = self
                    .position
                    .ok_or_else(|| LacoatError::invalid("per-token scorer needs a prediction position"))?;
                inputs
                    .get(p)
                    .cloned()
                    .ok_or_else(|| LacoatError::invalid(format!("position {p} outside {} tokens", inputs.len())))
            }
        }
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.model.num_classes() {
            return Err(LacoatError::invalid(format!("target class {target} out of range")));
        }
        Ok(())
    }
}

impl DifferentiableScorer for InstanceScorer<'_> {
    fn forward(&self, inputs: &[Vec<f64>], target: usize) -> Result<f64> {
        self.check_target(target)?;
        let x = self.model_input(inputs)?;
        Ok(self.model.logits(&x)[target])
    }

    fn gradient(&self, inputs: &[Vec<f64>], target: usize) -> Result<Vec<Vec<f64>>> {
        self.check_target(target)?;
        let x = self.model_input(inputs)?;
        let g = self.model.input_gradient(&x, target);
        Ok(match self.model.pooling {
            Pooling::Mean => {
                let n = inputs.len() as f64;
                let scaled: Vec<f64> = g.iter().map(|v| v / n).collect();
                vec![scaled; inputs.len()]
            }
            Pooling::PerToken => {
                let p = self.position.expect("checked in model_input");
                let mut out = vec![vec![0.0; self.model.dim]; inputs.len()];
                out[p] = g;
                out
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedScorer {
    pub scorer: ReferenceScorer,
    pub train_accuracy: f64,
}

/// Full-batch Adam on mean softmax cross-entropy. Each sample is already the
/// model input (a pooled sentence vector or a single token vector).
pub fn train_reference_scorer(
    samples: &[Vec<f64>],
    labels: &[String],
    pooling: Pooling,
    cfg: &ScorerTraining,
) -> Result<TrainedScorer> {
    if samples.is_empty() {
        return Err(LacoatError::invalid("empty training set"));
    }
    if samples.len() != labels.len() {
        return Err(LacoatError::invalid("samples and labels differ in length"));
    }
    if cfg.hidden == 0 {
        return Err(LacoatError::invalid("hidden width must be positive"));
    }
    let dim = samples[0].len();
    if let Some(x) = samples.iter().find(|x| x.len() != dim) {
        return Err(LacoatError::DimMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    let mut class_names: Vec<String> = labels.to_vec();
    class_names.sort();
    class_names.dedup();
    if class_names.len() < 2 {
        return Err(LacoatError::invalid("training data has a single class"));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("label in class list"))
        .collect();

    let classes = class_names.len();
    let l = layout(dim, cfg.hidden, classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![0.0; l.total];
    let bound1 = (6.0 / (dim + cfg.hidden) as f64).sqrt();
    let bound2 = (6.0 / (cfg.hidden + classes) as f64).sqrt();
    for v in &mut params[l.w1..l.b1] {
        *v = rng.gen_range(-bound1..bound1);
    }
    for v in &mut params[l.w2..l.b2] {
        *v = rng.gen_range(-bound2..bound2);
    }

    let mut model = ReferenceScorer {
        pooling,
        class_names,
        dim,
        hidden: cfg.hidden,
        params,
    };
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; l.total];
    let mut v = vec![0.0; l.total];
    let n = samples.len() as f64;
    for epoch in 1..=cfg.epochs {
        let mut grad = vec![0.0; l.total];
        for (x, &y) in samples.iter().zip(&targets) {
            let (h, logits) = model.run(x);
            let probs = softmax(&logits);
            for c in 0..classes {
                let dz = (probs[c] - if c == y { 1.0 } else { 0.0 }) / n;
                grad[l.b2 + c] += dz;
                for j in 0..cfg.hidden {
                    grad[l.w2 + c * cfg.hidden + j] += dz * h[j];
                }
            }
            for j in 0..cfg.hidden {
                let back: f64 = (0..classes)
                    .map(|c| (probs[c] - if c == y { 1.0 } else { 0.0 }) * model.params[l.w2 + c * cfg.hidden + j])
                    .sum::<f64>()
                    * (1.0 - h[j] * h[j])
                    / n;
                grad[l.b1 + j] += back;
                for (d, xd) in x.iter().enumerate() {
                    grad[l.w1 + j * dim + d] += back * xd;
                }
            }
        }
        let c1 = 1.0 - bias_power(beta1, epoch);
        let c2 = 1.0 - bias_power(beta2, epoch);
        for i in 0..l.total {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            model.params[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    model_file::round_f32(&mut model.params);

    let correct = samples
        .iter()
        .zip(&targets)
        .filter(|(x, &y)| model.predict_vector(x) == y)
        .count();
    Ok(TrainedScorer {
        train_accuracy: correct as f64 / n,
        scorer: model,
    })
}

fn bias_power(beta: f64, t: usize) -> f64 {
    beta.powi(t as i32)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
