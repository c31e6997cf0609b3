//! Training losses with analytic gradients: token cross-entropy, the
//! parent-child output-space hinge, the out-of-taxonomy mass penalty and the
//! per-level margin loss over text/label-name embeddings.

use serde::Serialize;
use thiserror::Error;

use crate::model::tensor::{softmax_backward_row, Mat, Scalar};
use crate::model::DistributionTrace;
use crate::taxonomy::{LabelSet, Taxonomy};
use crate::tokenizer::PAD;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("semantic loss needs one label per level; example {example} has {count} labels on level {level}")]
    MultiPathUnsupported { example: usize, level: usize, count: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("non-finite value encountered at coordinate {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Margin per level, strictly increasing with depth.
    pub alphas: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1e-3, lambda2: 1e-5, lambda3: 1.0, alphas: vec![0.05, 0.1] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ObjectiveError::InvalidWeights(format!("{name} must be a non-negative number")));
            }
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(ObjectiveError::InvalidWeights("margins must be non-negative".into()));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ObjectiveError::InvalidWeights("margins must increase strictly with level".into()));
        }
        Ok(())
    }
}

/// A scalar loss over a batch of traces and its gradient w.r.t. each trace's logits.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: T,
    pub d_logits: Vec<Mat<T>>,
}

fn zero_grads<T: Scalar>(traces: &[DistributionTrace<T>]) -> Vec<Mat<T>> {
    traces.iter().map(|t| t.logits.zeros_like()).collect()
}

/// Chains a gradient w.r.t. probabilities through the row softmax.
fn probs_to_logits<T: Scalar>(probs: &Mat<T>, d_probs: &Mat<T>) -> Mat<T> {
    let mut out = probs.zeros_like();
    for r in 0..probs.rows {
        softmax_backward_row(probs.row(r), d_probs.row(r), out.row_mut(r));
    }
    out
}

/// Mean token-level cross-entropy over all non-pad positions of the batch.
pub fn lm_loss<T: Scalar>(traces: &[DistributionTrace<T>]) -> LossGrad<T> {
    let count: usize = traces.iter().map(|t| t.gold.iter().filter(|&&g| g != PAD).count()).sum();
    let mut d_logits = zero_grads(traces);
    if count == 0 {
        return LossGrad { value: T::zero(), d_logits };
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut total = T::zero();
    for (t, d) in traces.iter().zip(d_logits.iter_mut()) {
        for (pos, &g) in t.gold.iter().enumerate() {
            if g == PAD {
                continue;
            }
            let row = t.logits.row(pos);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[g as usize];
            let drow = d.row_mut(pos);
            for (j, dv) in drow.iter_mut().enumerate() {
                *dv = t.probs.at(pos, j) * inv;
            }
            drow[g as usize] -= inv;
        }
    }
    LossGrad { value: total * inv, d_logits }
}

/// Which edges the output-space hinge visits at each flagged position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EdgeScope {
    #[default]
    AllEdges,
    /// Only edges whose endpoints both appear in the example's gold sequence.
    GoldPath,
}

/// Sum over examples, node positions and edges of `max(0, pi_child - pi_parent)`.
pub fn output_space_loss<T: Scalar>(traces: &[DistributionTrace<T>], pairs: &[(u32, u32)], scope: EdgeScope) -> LossGrad<T> {
    let mut value = T::zero();
    let mut d_logits = Vec::with_capacity(traces.len());
    for t in traces {
        let active: Vec<(u32, u32)> = match scope {
            EdgeScope::AllEdges => pairs.to_vec(),
            EdgeScope::GoldPath => {
                pairs.iter().copied().filter(|(p, c)| t.gold.contains(p) && t.gold.contains(c)).collect()
            }
        };
        let mut dp = t.probs.zeros_like();
        for pos in (0..t.len()).filter(|&p| t.node_positions[p]) {
            let row = t.probs.row(pos);
            let drow = dp.row_mut(pos);
            for &(p, c) in &active {
                let diff = row[c as usize] - row[p as usize];
                if diff > T::zero() {
                    value += diff;
                    drow[c as usize] += T::one();
                    drow[p as usize] -= T::one();
                }
            }
        }
        d_logits.push(probs_to_logits(&t.probs, &dp));
    }
    LossGrad { value, d_logits }
}

/// Per example, the mean over positions of probability mass outside the
/// allowed vocabulary; then the mean over the batch.
pub fn token_constraint_loss<T: Scalar>(traces: &[DistributionTrace<T>], allowed: &[bool]) -> LossGrad<T> {
    let mut d_logits = zero_grads(traces);
    if traces.is_empty() {
        return LossGrad { value: T::zero(), d_logits };
    }
    let inv_n = T::one() / T::from_usize(traces.len()).unwrap();
    let mut value = T::zero();
    for (t, d) in traces.iter().zip(d_logits.iter_mut()) {
        if t.is_empty() {
            continue;
        }
        let w = inv_n / T::from_usize(t.len()).unwrap();
        let mut dp = t.probs.zeros_like();
        for pos in 0..t.len() {
            let row = t.probs.row(pos);
            let drow = dp.row_mut(pos);
            for (j, &ok) in allowed.iter().enumerate() {
                if !ok {
                    value += row[j] * w;
                    drow[j] = w;
                }
            }
        }
        *d = probs_to_logits(&t.probs, &dp);
    }
    LossGrad { value, d_logits }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairStats {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SemanticLoss<T> {
    pub value: T,
    /// Gradient w.r.t. the text embeddings, `N x d`.
    pub d_text: Mat<T>,
    /// Gradient w.r.t. each level's label-name embeddings.
    pub d_labels: Vec<Mat<T>>,
    pub levels: Vec<PairStats>,
}

/// Class of each example on each level (`[level][example]`), `None` where the
/// label set stops above that level.
pub type LevelLabels = Vec<Vec<Option<usize>>>;

/// Rejects multi-path label sets, which the margin loss does not support.
pub fn single_path_levels(taxonomy: &Taxonomy, sets: &[LabelSet]) -> Result<LevelLabels> {
    let mut out = vec![vec![None; sets.len()]; taxonomy.depth()];
    for (i, y) in sets.iter().enumerate() {
        for (k, nodes) in taxonomy.nodes_by_level(y).iter().enumerate() {
            match nodes.as_slice() {
                [] => {}
                [one] => out[k][i] = Some(one.0),
                many => {
                    return Err(ObjectiveError::MultiPathUnsupported { example: i, level: k + 1, count: many.len() })
                }
            }
        }
    }
    Ok(out)
}

/// Margin loss summed over levels. Each level pairs every document with every
/// label-name row; pairs sharing the level label are positives. Levels lacking
/// positives or negatives contribute zero.
pub fn semantic_loss<T: Scalar>(text: &Mat<T>, labels: &[Mat<T>], level_labels: &LevelLabels, alphas: &[f64]) -> Result<SemanticLoss<T>> {
    if labels.len() != level_labels.len() {
        return Err(ObjectiveError::Shape(format!("{} label matrices for {} levels", labels.len(), level_labels.len())));
    }
    if alphas.len() < level_labels.len() {
        return Err(ObjectiveError::Shape(format!("{} margins for {} levels", alphas.len(), level_labels.len())));
    }
    let n = text.rows;
    let mut d_text = text.zeros_like();
    let mut d_labels = Vec::with_capacity(labels.len());
    let mut value = T::zero();
    let mut stats = Vec::with_capacity(labels.len());
    for (k, (el, cls)) in labels.iter().zip(level_labels).enumerate() {
        if el.rows != n || cls.len() != n || el.cols != text.cols {
            return Err(ObjectiveError::Shape(format!("level {} embeddings do not match batch", k + 1)));
        }
        let mut dl = el.zeros_like();
        let (mut sum_pos, mut sum_neg) = (T::zero(), T::zero());
        let (mut n_pos, mut n_neg) = (0usize, 0usize);
        // (i, j, distance, positive)
        let mut pairs = Vec::with_capacity(n * n);
        for i in 0..n {
            let Some(ci) = cls[i] else { continue };
            for j in 0..n {
                let Some(cj) = cls[j] else { continue };
                let dist = text.row(i).iter().zip(el.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
                let positive = ci == cj;
                if positive {
                    sum_pos += dist;
                    n_pos += 1;
                } else {
                    sum_neg += dist;
                    n_neg += 1;
                }
                pairs.push((i, j, dist, positive));
            }
        }
        let alpha = T::lit(alphas[k]);
        let mut level_loss = T::zero();
        let (mut gp, mut gn) = (T::zero(), T::zero());
        if n_pos > 0 && n_neg > 0 {
            gp = sum_pos / T::from_usize(n_pos).unwrap();
            gn = sum_neg / T::from_usize(n_neg).unwrap();
            let margin = gp - gn + alpha;
            if margin > T::zero() {
                level_loss = margin;
                let wp = T::one() / T::from_usize(n_pos).unwrap();
                let wn = -T::one() / T::from_usize(n_neg).unwrap();
                for &(i, j, dist, positive) in &pairs {
                    if dist <= T::zero() {
                        continue;
                    }
                    let w = if positive { wp } else { wn } / dist;
                    for c in 0..text.cols {
                        let g = (text.at(i, c) - el.at(j, c)) * w;
                        d_text.data[i * text.cols + c] += g;
                        dl.data[j * el.cols + c] -= g;
                    }
                }
            }
        }
        value += level_loss;
        stats.push(PairStats {
            gamma_pos: gp.to_f64().unwrap(),
            gamma_neg: gn.to_f64().unwrap(),
            n_pos,
            n_neg,
            loss: level_loss.to_f64().unwrap(),
        });
        d_labels.push(dl);
    }
    Ok(SemanticLoss { value, d_text, d_labels, levels: stats })
}

/// Component values of the composite objective for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Components {
    pub lm: f64,
    pub output: f64,
    pub token: f64,
    pub semantic: f64,
}

impl Components {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.lm + w.lambda1 * self.output + w.lambda2 * self.token + w.lambda3 * self.semantic
    }
}

/// Weighted sum of the component gradients w.r.t. logits.
pub fn combine_logit_grads<T: Scalar>(parts: &[(&LossGrad<T>, f64)]) -> Vec<Mat<T>> {
    let mut out: Vec<Mat<T>> = parts[0].0.d_logits.iter().map(Mat::zeros_like).collect();
    for (lg, w) in parts {
        if *w == 0.0 {
            continue;
        }
        let w = T::lit(*w);
        for (o, d) in out.iter_mut().zip(&lg.d_logits) {
            for (a, &b) in o.data.iter_mut().zip(&d.data) {
                *a += b * w;
            }
        }
    }
    out
}

/// Smallest `|pi_c - pi_p|` over flagged positions and edges; finite-difference
/// points closer than a few steps to this kink are resampled.
pub fn output_space_kink_distance<T: Scalar>(traces: &[DistributionTrace<T>], pairs: &[(u32, u32)]) -> f64 {
    let mut best = f64::INFINITY;
    for t in traces {
        for pos in (0..t.len()).filter(|&p| t.node_positions[p]) {
            for &(p, c) in pairs {
                let d = (t.probs.at(pos, c as usize) - t.probs.at(pos, p as usize)).abs();
                best = best.min(d.to_f64().unwrap());
            }
        }
    }
    best
}

/// Smallest `|gamma+ - gamma- + alpha|` over levels that have both pair kinds.
pub fn semantic_kink_distance(stats: &[PairStats], alphas: &[f64]) -> f64 {
    stats
        .iter()
        .zip(alphas)
        .filter(|(s, _)| s.n_pos > 0 && s.n_neg > 0)
        .map(|(s, a)| (s.gamma_pos - s.gamma_neg + a).abs())
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub coordinates: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Floor on the relative-error denominator, relative to `max(1, |f(x)|)`, so
/// coordinates whose true derivative is zero are judged on round-off scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central differences `(f(x+e) - f(x-e)) / 2e` against an analytic gradient.
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = REL_ERR_FLOOR * max(1, |f(x)|)`.
pub fn finite_difference_check<F>(name: &str, mut f: F, x: &[f64], analytic: &[f64], eps: f64, tolerance: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(ObjectiveError::Shape(format!("{} coordinates vs {} gradient entries", x.len(), analytic.len())));
    }
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(ObjectiveError::NonFinite(0));
    }
    let floor = REL_ERR_FLOOR * f0.abs().max(1.0);
    let mut probe = x.to_vec();
    let (mut max_rel, mut max_abs, mut worst) = (0.0f64, 0.0f64, 0usize);
    for i in 0..x.len() {
        if !analytic[i].is_finite() {
            return Err(ObjectiveError::NonFinite(i));
        }
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(ObjectiveError::NonFinite(i));
        }
        let numeric = (up - down) / (2.0 * eps);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(floor);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        coordinates: x.len(),
        eps,
        tolerance,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        worst_index: worst,
        passed: max_rel < tolerance,
    })
}
