//! Maps representations onto discovered concepts with multinomial logistic
//! regression, trained by L-BFGS from a zero start.
//!
//! Objective: mean softmax cross-entropy plus `(l2 / 2) · ‖W‖²`. Biases are not
//! penalized.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LacoatError, Result};
use crate::model_file;
use crate::scorer::softmax;

const MAGIC: &[u8; 4] = b"LCMP";
const HISTORY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MapperModel {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `num_classes × dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub l2_strength: f64,
    pub layer: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    dim: usize,
    l2_strength: f64,
    layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperTraining {
    /// `None` means `1 / N_train`.
    pub l2: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MapperTraining {
    fn default() -> Self {
        Self {
            l2: None,
            max_iter: 100,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: MapperModel,
    /// Objective value after each accepted iteration, starting at the zero model.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl MapperModel {
    pub fn zeros(num_classes: usize, dim: usize, l2_strength: f64, layer: usize) -> Self {
        Self {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            biases: vec![0.0; num_classes],
            l2_strength,
            layer,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.biases[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(LacoatError::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(softmax(&self.logits(x)))
    }

    fn to_params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.biases);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let split = self.num_classes * self.dim;
        self.weights.copy_from_slice(&params[..split]);
        self.biases.copy_from_slice(&params[split..]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            num_classes: self.num_classes,
            dim: self.dim,
            l2_strength: self.l2_strength,
            layer: self.layer,
        };
        let values: Vec<f32> = self.to_params().iter().map(|&v| v as f32).collect();
        model_file::write(path, MAGIC, &header, &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, values): (Header, Vec<f32>) = model_file::read(path, MAGIC)?;
        let expected = h.num_classes * (h.dim + 1);
        if values.len() != expected {
            return Err(LacoatError::invalid(format!(
                "{}: expected {expected} parameters, found {}",
                path.display(),
                values.len()
            )));
        }
        let mut model = MapperModel::zeros(h.num_classes, h.dim, h.l2_strength, h.layer);
        let params: Vec<f64> = values.into_iter().map(f64::from).collect();
        model.set_params(&params);
        Ok(model)
    }
}

/// Objective and gradient at `params = [W (row-major), b]`.
pub fn loss_and_gradient(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    l2: f64,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let dim = features.first().map_or(0, Vec::len);
    let split = num_classes * dim;
    let (w, b) = params.split_at(split);
    let n = features.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut logits = vec![0.0; num_classes];
    for (x, &y) in features.iter().zip(labels) {
        for c in 0..num_classes {
            logits[c] = b[c] + w[c * dim..(c + 1) * dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += log_sum - logits[y];
        for c in 0..num_classes {
            let dz = ((logits[c] - log_sum).exp() - if c == y { 1.0 } else { 0.0 }) / n;
            grad[split + c] += dz;
            for (g, v) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *g += dz * v;
            }
        }
    }
    loss /= n;
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    for (g, wi) in grad[..split].iter_mut().zip(w) {
        *g += l2 * wi;
    }
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn train_mapper(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    layer: usize,
    cfg: &MapperTraining,
) -> Result<TrainReport> {
    if features.is_empty() {
        return Err(LacoatError::invalid("no training features"));
    }
    if features.len() != labels.len() {
        return Err(LacoatError::invalid("features and labels differ in length"));
    }
    let dim = features[0].len();
    if let Some(x) = features.iter().find(|x| x.len() != dim) {
        return Err(LacoatError::DimMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(LacoatError::invalid(format!("label {bad} outside 0..{num_classes}")));
    }
    let mut present = vec![false; num_classes];
    labels.iter().for_each(|&y| present[y] = true);
    let missing: Vec<usize> = (0..num_classes).filter(|&c| !present[c]).collect();
    if !missing.is_empty() {
        return Err(LacoatError::MissingClasses(missing));
    }
    let l2 = cfg.l2.unwrap_or(1.0 / features.len() as f64);
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(LacoatError::invalid(format!("invalid l2 strength {l2}")));
    }

    let mut model = MapperModel::zeros(num_classes, dim, l2, layer);
    let mut x = model.to_params();
    let (mut f, mut g) = loss_and_gradient(features, labels, num_classes, l2, &x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let mut loss_history = vec![f];
    let mut iterations = 0;
    let mut converged = norm(&g) <= cfg.tol;

    while !converged && iterations < cfg.max_iter {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / norm(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|qi| *qi *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - beta) * si);
        }
        let mut direction: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &direction);
        if slope >= 0.0 {
            history.clear();
            direction = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        // backtracking line search with the Armijo condition
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let candidate: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + step * di).collect();
            let (fc, gc) = loss_and_gradient(features, labels, num_classes, l2, &candidate);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                accepted = Some((candidate, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        loss_history.push(f);
        converged = norm(&g) <= cfg.tol;
    }

    model_file::round_f32(&mut x);
    model.set_params(&x);
    Ok(TrainReport {
        model,
        loss_history,
        iterations,
        converged,
    })
}

/// `(concept id, probability)` pairs, most probable first, ties by lower id.
pub fn predict_topk(model: &MapperModel, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > model.num_classes {
        return Err(LacoatError::invalid(format!(
            "k = {k} outside 1..={}",
            model.num_classes
        )));
    }
    let probs = model.probabilities(x)?;
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Fraction of instances whose true concept is among the top `k`, for each `k`.
/// `k` values larger than the concept count are clamped.
pub fn evaluate_topk(model: &MapperModel, features: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(LacoatError::invalid("need a non-empty test set with one label per feature"));
    }
    let k_max = ks.iter().copied().max().unwrap_or(1).clamp(1, model.num_classes);
    let mut ranks = Vec::with_capacity(features.len());
    for (x, &y) in features.iter().zip(labels) {
        let top = predict_topk(model, x, k_max)?;
        ranks.push(top.iter().position(|(c, _)| *c == y));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let k_eff = k.clamp(1, model.num_classes);
            let hits = ranks.iter().filter(|r| matches!(r, Some(p) if *p < k_eff)).count();
            (k, hits as f64 / features.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_blobs() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..2 {
            let cx = if c == 0 { -10.0 } else { 10.0 };
            for _ in 0..20 {
                xs.push(vec![cx + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                ys.push(c);
            }
        }
        (xs, ys)
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (xs, ys) = two_blobs();
        // threshold oracle: x < 0 is class 0
        assert!(xs.iter().zip(&ys).all(|(x, &y)| (x[0] < 0.0) == (y == 0)));
        let report = train_mapper(&xs, &ys, 2, 0, &MapperTraining::default()).unwrap();
        let acc = evaluate_topk(&report.model, &xs, &ys, &[1]).unwrap();
        assert_eq!(acc[0].1, 1.0);
    }

    #[test]
    fn heavy_regularization_gives_prior() {
        let (xs, ys) = two_blobs();
        let cfg = MapperTraining {
            l2: Some(1e6),
            ..Default::default()
        };
        let model = train_mapper(&xs, &ys, 2, 0, &cfg).unwrap().model;
        for x in &xs {
            let p = model.probabilities(x).unwrap();
            assert!(p[0].max(p[1]) <= 0.5 + 1e-2);
        }
    }

    #[test]
    fn zero_iterations_is_uniform() {
        let (xs, ys) = two_blobs();
        let cfg = MapperTraining {
            max_iter: 0,
            ..Default::default()
        };
        let model = train_mapper(&xs, &ys, 2, 0, &cfg).unwrap().model;
        assert!(model.weights.iter().all(|&w| w == 0.0));
        assert_eq!(model.probabilities(&xs[0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn missing_class_listed() {
        let xs = vec![vec![0.0], vec![1.0]];
        match train_mapper(&xs, &[0, 2], 4, 0, &MapperTraining::default()) {
            Err(LacoatError::MissingClasses(m)) => assert_eq!(m, vec![1, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_model_topk_is_uniform_ascending() {
        let model = MapperModel::zeros(4, 3, 0.0, 0);
        let top = predict_topk(&model, &[1.0, -2.0, 0.5], 4).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(top.iter().all(|t| (t.1 - 0.25).abs() < 1e-15));
        let sum: f64 = top.iter().map(|t| t.1).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(predict_topk(&model, &[1.0], 1).is_err());
        assert!(predict_topk(&model, &[1.0, 2.0, 3.0], 5).is_err());
    }

    #[test]
    fn held_out_point_near_centroid() {
        let (xs, ys) = two_blobs();
        let model = train_mapper(&xs, &ys, 2, 0, &MapperTraining::default()).unwrap().model;
        let probe = [-9.5, 0.3];
        // nearest-centroid oracle
        let c0: f64 = xs[..20].iter().map(|x| x[0]).sum::<f64>() / 20.0;
        let c1: f64 = xs[20..].iter().map(|x| x[0]).sum::<f64>() / 20.0;
        let oracle = if (probe[0] - c0).abs() < (probe[0] - c1).abs() { 0 } else { 1 };
        assert_eq!(predict_topk(&model, &probe, 1).unwrap()[0].0, oracle);
    }

    #[test]
    fn perfect_model_scores_one() {
        let (xs, ys) = two_blobs();
        let model = train_mapper(&xs, &ys, 2, 0, &MapperTraining::default()).unwrap().model;
        let acc = evaluate_topk(&model, &xs, &ys, &[1, 2, 5]).unwrap();
        assert!(acc.iter().all(|a| a.1 == 1.0));
    }

    #[test]
    fn save_load_round_trip() {
        let (xs, ys) = two_blobs();
        let model = train_mapper(&xs, &ys, 2, 3, &MapperTraining::default()).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapper.bin");
        model.save(&path).unwrap();
        assert_eq!(MapperModel::load(&path).unwrap(), model);
    }
}
