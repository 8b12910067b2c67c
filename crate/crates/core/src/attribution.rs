//! Integrated-gradients attribution and salient-token selection.

use serde::{Deserialize, Serialize};

use crate::error::{LacoatError, Result};
use crate::repr_store::SubwordAlignment;

/// A model whose target score is differentiable in its token inputs.
pub trait DifferentiableScorer: Sync {
    fn forward(&self, inputs: &[Vec<f64>], target: usize) -> Result<f64>;

    /// `∂score/∂inputs`, one vector per input token.
    fn gradient(&self, inputs: &[Vec<f64>], target: usize) -> Result<Vec<Vec<f64>>>;
}

/// Per-class linear score summed over tokens: `Σ_t w_target · x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer {
    pub weights: Vec<Vec<f64>>,
}

impl DifferentiableScorer for LinearScorer {
    fn forward(&self, inputs: &[Vec<f64>], target: usize) -> Result<f64> {
        let w = self.class_weights(target)?;
        Ok(inputs
            .iter()
            .map(|x| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    }

    fn gradient(&self, inputs: &[Vec<f64>], target: usize) -> Result<Vec<Vec<f64>>> {
        let w = self.class_weights(target)?;
        Ok(vec![w.clone(); inputs.len()])
    }
}

impl LinearScorer {
    fn class_weights(&self, target: usize) -> Result<&Vec<f64>> {
        self.weights
            .get(target)
            .ok_or_else(|| LacoatError::invalid(format!("target class {target} out of range")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub per_token: Vec<f64>,
    /// Per-token, per-dimension contributions; `per_token[t]` is the sum of row `t`.
    pub per_dim: Vec<Vec<f64>>,
    pub target_index: usize,
    pub steps_used: usize,
}

impl AttributionVector {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }
}

/// Integrated gradients by the trapezoid rule over `α = k / steps`, `k = 0..=steps`
/// (both path endpoints are evaluated, the baseline and input with half weight).
/// `baseline = None` means the all-zero baseline.
pub fn integrated_gradients<S: DifferentiableScorer + ?Sized>(
    scorer: &S,
    inputs: &[Vec<f64>],
    target: usize,
    steps: usize,
    baseline: Option<&[Vec<f64>]>,
) -> Result<AttributionVector> {
    if steps == 0 {
        return Err(LacoatError::invalid("integrated gradients needs at least one step"));
    }
    if inputs.is_empty() {
        return Err(LacoatError::invalid("no input tokens to attribute"));
    }
    let zero: Vec<Vec<f64>>;
    let baseline = match baseline {
        Some(b) => b,
        None => {
            zero = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
            &zero
        }
    };
    if baseline.len() != inputs.len() {
        return Err(LacoatError::DimMismatch {
            expected: inputs.len(),
            got: baseline.len(),
        });
    }
    let delta: Vec<Vec<f64>> = inputs
        .iter()
        .zip(baseline)
        .map(|(x, b)| {
            if x.len() != b.len() {
                return Err(LacoatError::DimMismatch {
                    expected: x.len(),
                    got: b.len(),
                });
            }
            Ok(x.iter().zip(b).map(|(xi, bi)| xi - bi).collect())
        })
        .collect::<Result<_>>()?;

    let mut grad_sum: Vec<Vec<f64>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut point = baseline.to_vec();
    for k in 0..=steps {
        let alpha = k as f64 / steps as f64;
        let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&delta) {
            for ((pi, bi), di) in p.iter_mut().zip(b).zip(d) {
                *pi = bi + alpha * di;
            }
        }
        let grad = scorer.gradient(&point, target)?;
        if grad.len() != inputs.len() {
            return Err(LacoatError::DimMismatch {
                expected: inputs.len(),
                got: grad.len(),
            });
        }
        for (acc, g) in grad_sum.iter_mut().zip(&grad) {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += weight * gi;
            }
        }
    }

    let per_dim: Vec<Vec<f64>> = delta
        .iter()
        .zip(&grad_sum)
        .map(|(d, g)| d.iter().zip(g).map(|(di, gi)| di * gi / steps as f64).collect())
        .collect();
    let per_token: Vec<f64> = per_dim.iter().map(|r| r.iter().sum()).collect();
    if per_token.iter().any(|v| !v.is_finite()) {
        return Err(LacoatError::invalid("non-finite attribution"));
    }
    Ok(AttributionVector {
        per_token,
        per_dim,
        target_index: target,
        steps_used: steps,
    })
}

/// Word-level attribution: mean of each word's subword attributions.
pub fn aggregate_subword_attributions(per_subword: &[f64], alignment: &SubwordAlignment) -> Result<Vec<f64>> {
    alignment.validate(per_subword.len())?;
    Ok(alignment
        .words()
        .iter()
        .map(|rows| rows.iter().map(|&r| per_subword[r]).sum::<f64>() / rows.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Salience {
    /// Selected token indices in descending magnitude order.
    pub indices: Vec<usize>,
    /// True when every attribution was zero and the first token was returned.
    pub degenerate: bool,
}

/// Token indices ordered by |attribution| descending, ties by lower index.
pub fn magnitude_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    order
}

/// Shortest magnitude-ordered prefix whose |attribution| mass reaches
/// `mass` of the total.
pub fn select_salient_top_p(attr: &AttributionVector, mass: f64) -> Result<Salience> {
    select_top_p(&attr.per_token, mass)
}

pub fn select_top_p(scores: &[f64], mass: f64) -> Result<Salience> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(LacoatError::invalid(format!("mass must lie in (0, 1], got {mass}")));
    }
    if scores.is_empty() {
        return Err(LacoatError::invalid("no attributions to select from"));
    }
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if total == 0.0 {
        return Ok(Salience {
            indices: vec![0],
            degenerate: true,
        });
    }
    let order = magnitude_order(scores);
    let threshold = mass * total;
    let mut running = 0.0;
    let mut indices = Vec::new();
    for i in order {
        running += scores[i].abs();
        indices.push(i);
        if running >= threshold {
            break;
        }
    }
    // At mass = 1 rounding can leave the running sum a hair short; the loop
    // then takes every token, so drop trailing zero-magnitude entries.
    while indices.len() > 1 && scores[*indices.last().unwrap()] == 0.0 {
        indices.pop();
    }
    Ok(Salience {
        indices,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceClassification,
    MaskedPrediction,
    SequenceLabeling,
}

/// Salient token chosen by where the output head reads from.
pub fn position_salient(
    kind: TaskKind,
    classifier_index: Option<usize>,
    prediction_position: Option<usize>,
    num_tokens: usize,
) -> Result<usize> {
    match kind {
        TaskKind::SequenceClassification => classifier_index
            .ok_or_else(|| LacoatError::invalid("sequence classification input has no classifier token")),
        TaskKind::MaskedPrediction | TaskKind::SequenceLabeling => match prediction_position {
            Some(p) if p < num_tokens => Ok(p),
            Some(p) => Err(LacoatError::invalid(format!(
                "prediction position {p} outside {num_tokens} tokens"
            ))),
            None => Err(LacoatError::invalid("prediction position required for this task kind")),
        },
    }
}

/// Largest relative error between `gradient` and central finite differences
/// of `forward` at `inputs`.
pub fn gradient_check<S: DifferentiableScorer + ?Sized>(
    scorer: &S,
    inputs: &[Vec<f64>],
    target: usize,
    eps: f64,
) -> Result<f64> {
    let analytic = scorer.gradient(inputs, target)?;
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..inputs.len() {
        for d in 0..inputs[t].len() {
            let orig = probe[t][d];
            probe[t][d] = orig + eps;
            let up = scorer.forward(&probe, target)?;
            probe[t][d] = orig - eps;
            let down = scorer.forward(&probe, target)?;
            probe[t][d] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (numeric - analytic[t][d]).abs() / numeric.abs().max(analytic[t][d].abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
