//! Prediction extraction and hierarchical evaluation.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hierarchy::{ClassId, Hierarchy};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Predicted classes with their ancestors.
    pub alpha: Vec<BTreeSet<ClassId>>,
    pub most_specific: Vec<ClassId>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.most_specific.len()
    }

    pub fn is_empty(&self) -> bool {
        self.most_specific.is_empty()
    }

    /// Predictions of a single most-specific class each.
    pub fn from_most_specific(h: &Hierarchy, classes: &[ClassId]) -> Self {
        PredictionSet {
            alpha: classes.iter().map(|a| h.ancestor_closure([a])).collect(),
            most_specific: classes.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthSet {
    /// True most-specific classes with their ancestors.
    pub beta: Vec<BTreeSet<ClassId>>,
    pub most_specific: Vec<ClassId>,
}

impl TruthSet {
    pub fn from_labels(h: &Hierarchy, labels: &[ClassId]) -> Self {
        TruthSet {
            beta: labels.iter().map(|a| h.ancestor_closure([a])).collect(),
            most_specific: labels.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Thresholds each row of a row-major `n x C` score block.
///
/// The predicted set is `{A : score_A >= threshold}` closed under ancestors.
/// Its most-specific member is the deepest one, ties broken by higher score,
/// then lower id. A row with nothing above threshold predicts its
/// highest-scoring class.
pub fn extract_predictions(h: &Hierarchy, scores: &[f64], threshold: f64) -> Result<PredictionSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let c = h.len();
    if !scores.len().is_multiple_of(c) {
        return Err(Error::Shape(format!("{} scores for {c} classes", scores.len())));
    }
    let mut alpha = Vec::with_capacity(scores.len() / c);
    let mut most_specific = Vec::with_capacity(scores.len() / c);
    for row in scores.chunks(c) {
        let above: Vec<ClassId> = h.ids().filter(|a| row[a.0] >= threshold).collect();
        let pick = if above.is_empty() {
            argmax(row)
        } else {
            let mut best = above[0];
            for &a in &above[1..] {
                let key = |x: ClassId| (h.depth(x), row[x.0]);
                let (da, sa) = key(a);
                let (db, sb) = key(best);
                if da > db || (da == db && sa > sb) {
                    best = a;
                }
            }
            best
        };
        let set = if above.is_empty() {
            h.ancestor_closure([&pick])
        } else {
            h.ancestor_closure(above.iter())
        };
        alpha.push(set);
        most_specific.push(pick);
    }
    Ok(PredictionSet {
        alpha,
        most_specific,
    })
}

/// Single-class predictions: the highest-scoring class of each row (first on
/// ties) with its ancestors. This is how a flat multi-class classifier
/// decides.
pub fn extract_argmax(h: &Hierarchy, scores: &[f64]) -> Result<PredictionSet> {
    let c = h.len();
    if !scores.len().is_multiple_of(c) {
        return Err(Error::Shape(format!("{} scores for {c} classes", scores.len())));
    }
    let picks: Vec<ClassId> = scores.chunks(c).map(argmax).collect();
    Ok(PredictionSet::from_most_specific(h, &picks))
}

/// Index of the largest entry, first one on ties.
fn argmax(row: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    ClassId(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HierMetrics {
    pub hp: f64,
    pub hr: f64,
    pub hf: f64,
}

/// Hierarchical precision, recall and F-score:
/// `hp = sum|a_i & b_i| / sum|a_i|`, `hr = sum|a_i & b_i| / sum|b_i|`,
/// `hf = 2 hp hr / (hp + hr)` (0 when both are 0).
pub fn hierarchical_metrics(pred: &PredictionSet, truth: &TruthSet) -> Result<HierMetrics> {
    if pred.alpha.len() != truth.beta.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            pred.alpha.len(),
            truth.beta.len()
        )));
    }
    if truth.beta.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let (mut inter, mut n_pred, mut n_true) = (0usize, 0usize, 0usize);
    for (a, b) in pred.alpha.iter().zip(&truth.beta) {
        inter += a.intersection(b).count();
        n_pred += a.len();
        n_true += b.len();
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let hp = ratio(inter, n_pred);
    let hr = ratio(inter, n_true);
    let hf = if hp + hr == 0.0 { 0.0 } else { 2.0 * hp * hr / (hp + hr) };
    Ok(HierMetrics { hp, hr, hf })
}

/// Rows are true most-specific classes, columns predicted ones.
pub fn confusion_matrix(pred: &PredictionSet, truth: &TruthSet, h: &Hierarchy) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; h.len()]; h.len()];
    for (p, t) in pred.most_specific.iter().zip(&truth.most_specific) {
        m[t.0][p.0] += 1;
    }
    m
}

/// Percentage of each true class's samples whose most-specific prediction
/// matches (a per-class recall). `None` for classes absent from the truth.
pub fn per_class_ratio(pred: &PredictionSet, truth: &TruthSet, h: &Hierarchy) -> Vec<Option<f64>> {
    confusion_matrix(pred, truth, h)
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| 100.0 * row[c] as f64 / total as f64)
        })
        .collect()
}
