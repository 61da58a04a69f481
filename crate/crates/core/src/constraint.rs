//! Max constraint layer, the max constraint loss, coherence checks and
//! delegation detection.
//!
//! The plain functions work on one node's per-class vector (or on row-major
//! `n x C` blocks). The `*_on_tape` variants build the same quantities on an
//! autodiff tape for training.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{ClassId, Hierarchy};

/// Clamp applied to every log argument.
pub const LOG_EPS: f64 = 1e-12;

/// Slack used when comparing constrained scores of a class and its subclass.
pub const COHERENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub constrained: Vec<f64>,
}

impl ScoreVector {
    pub fn new(h: &Hierarchy, raw: Vec<f64>) -> Self {
        let constrained = mcm(h, &raw);
        ScoreVector { raw, constrained }
    }
}

/// `out[A] = (max over S_A of raw, winning class)`, ties to the lowest id.
/// One pass over the tree, children before parents.
pub fn mcm_with_argmax(h: &Hierarchy, raw: &[f64]) -> Vec<(f64, ClassId)> {
    assert_eq!(raw.len(), h.len(), "score vector length differs from class count");
    let mut best: Vec<(f64, ClassId)> = raw.iter().enumerate().map(|(i, &v)| (v, ClassId(i))).collect();
    for &a in h.postorder() {
        for &ch in h.children(a) {
            let cand = best[ch.0];
            let cur = best[a.0];
            if cand.0 > cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                best[a.0] = cand;
            }
        }
    }
    best
}

/// Constrained scores: each class takes the maximum raw score in its subtree.
pub fn mcm(h: &Hierarchy, raw: &[f64]) -> Vec<f64> {
    mcm_with_argmax(h, raw).into_iter().map(|(v, _)| v).collect()
}

/// [`mcm`] applied to every row of a row-major `n x C` block.
pub fn mcm_rows(h: &Hierarchy, raw: &[f64]) -> Vec<f64> {
    let c = h.len();
    assert_eq!(raw.len() % c.max(1), 0);
    raw.chunks(c).flat_map(|row| mcm(h, row)).collect()
}

fn check_labels(h: &Hierarchy, y: &[f64]) -> Result<()> {
    for a in h.ids() {
        let v = y[a.0];
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidArgument(format!("label value {v} is not 0 or 1")));
        }
        if v == 1.0 {
            if let Some(p) = h.parent(a) {
                if y[p.0] != 1.0 {
                    return Err(Error::NotAncestorClosed(a.0));
                }
            }
        }
    }
    Ok(())
}

/// Per-class max constraint loss terms, before weighting:
/// `-y_A ln(max_{B in S_A} y_B raw_B) - (1 - y_A) ln(1 - MCM_A)`, with both
/// log arguments clamped to `[LOG_EPS, 1 - LOG_EPS]`.
pub fn mcloss_terms(h: &Hierarchy, raw: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != h.len() || y.len() != h.len() {
        return Err(Error::Shape(format!(
            "{} classes, {} scores, {} labels",
            h.len(),
            raw.len(),
            y.len()
        )));
    }
    check_labels(h, y)?;
    let constrained = mcm(h, raw);
    let masked: Vec<f64> = raw.iter().zip(y).map(|(r, y)| r * y).collect();
    let positive = mcm(h, &masked);
    Ok(h
        .ids()
        .map(|a| {
            let i = a.0;
            let pos = positive[i].clamp(LOG_EPS, 1.0 - LOG_EPS);
            let neg = constrained[i].clamp(LOG_EPS, 1.0 - LOG_EPS);
            -y[i] * pos.ln() - (1.0 - y[i]) * (1.0 - neg).ln()
        })
        .collect())
}

/// Weighted max constraint loss of one node: `sum_A w_A * MCLoss_A`.
pub fn mcloss(h: &Hierarchy, raw: &[f64], y: &[f64], weights: &[f64]) -> Result<f64> {
    if weights.len() != h.len() {
        return Err(Error::Shape(format!("{} weights for {} classes", weights.len(), h.len())));
    }
    Ok(mcloss_terms(h, raw, y)?
        .iter()
        .zip(weights)
        .map(|(t, w)| t * w)
        .sum())
}

/// Counts `(node, A, B)` with B a proper subclass of A and
/// `scores[A] < scores[B] - COHERENCE_TOL`. `scores` is row-major `n x C`.
pub fn check_coherence(h: &Hierarchy, scores: &[f64]) -> usize {
    let c = h.len();
    let pairs: Vec<(ClassId, ClassId)> = h.closure_pairs().collect();
    scores
        .chunks(c)
        .map(|row| {
            pairs
                .iter()
                .filter(|(a, b)| row[a.0] < row[b.0] - COHERENCE_TOL)
                .count()
        })
        .sum()
}

/// Pairs `(A_i, A_j)` where the constrained score of `A_i` is supplied by a
/// strictly higher-scoring proper subclass `A_j`.
pub fn detect_delegation(h: &Hierarchy, raw: &[f64]) -> Vec<(ClassId, ClassId)> {
    mcm_with_argmax(h, raw)
        .into_iter()
        .enumerate()
        .filter_map(|(i, (_, j))| (j.0 != i && raw[i] < raw[j.0]).then_some((ClassId(i), j)))
        .collect()
}

/// Subclass sets as column indices, for the tape max operation.
pub fn subclass_columns(h: &Hierarchy) -> Vec<Vec<usize>> {
    h.ids()
        .map(|a| h.subclasses(a).iter().map(|b| b.0).collect())
        .collect()
}

/// Constrained scores of an `n x C` raw score node.
pub fn mcm_on_tape(tape: &mut Tape, h: &Hierarchy, raw: Var) -> Result<Var> {
    tape.elementwise_max_with_argmax(raw, &subclass_columns(h))
}

/// Weighted max constraint loss summed over the rows of `raw`, divided by
/// `normalizer`.
///
/// `labels` is a row-major `n x C` ancestor-closed 0/1 block aligned with
/// `raw`; `weights` holds one weight per class.
pub fn mcloss_on_tape(
    tape: &mut Tape,
    h: &Hierarchy,
    raw: Var,
    labels: &[f64],
    weights: &[f64],
    normalizer: f64,
) -> Result<Var> {
    let (n, c) = tape.value(raw).dims2()?;
    if c != h.len() || labels.len() != n * c || weights.len() != c {
        return Err(Error::Shape(format!(
            "loss over {n}x{c} scores with {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    for row in labels.chunks(c) {
        check_labels(h, row)?;
    }
    let subsets = subclass_columns(h);

    let y = tape.constant(Tensor::matrix(n, c, labels.to_vec())?);
    let masked = tape.mul(raw, y)?;
    let positive = tape.elementwise_max_with_argmax(masked, &subsets)?;
    let positive = tape.clamp(positive, LOG_EPS, 1.0 - LOG_EPS);
    let log_pos = tape.log(positive);

    let constrained = tape.elementwise_max_with_argmax(raw, &subsets)?;
    let constrained = tape.clamp(constrained, LOG_EPS, 1.0 - LOG_EPS);
    let complement = tape.scalar_mul(constrained, -1.0);
    let complement = tape.add_scalar(complement, 1.0);
    let log_neg = tape.log(complement);

    // coefficient blocks: -w_A y_A / normalizer and -w_A (1 - y_A) / normalizer
    let mut pos_coef = Vec::with_capacity(n * c);
    let mut neg_coef = Vec::with_capacity(n * c);
    for row in labels.chunks(c) {
        for (yv, w) in row.iter().zip(weights) {
            pos_coef.push(-w * yv / normalizer);
            neg_coef.push(-w * (1.0 - yv) / normalizer);
        }
    }
    let pos_coef = tape.constant(Tensor::matrix(n, c, pos_coef)?);
    let neg_coef = tape.constant(Tensor::matrix(n, c, neg_coef)?);
    let a = tape.mul(log_pos, pos_coef)?;
    let b = tape.mul(log_neg, neg_coef)?;
    let total = tape.add(a, b)?;
    Ok(tape.sum(total))
}

/// Plain weighted binary cross-entropy over the rows of `raw`, divided by
/// `normalizer`. Used by the flat baseline, which has no constraint layer.
pub fn bce_on_tape(
    tape: &mut Tape,
    raw: Var,
    targets: &[f64],
    weights: &[f64],
    normalizer: f64,
) -> Result<Var> {
    let (n, c) = tape.value(raw).dims2()?;
    if targets.len() != n * c || weights.len() != c {
        return Err(Error::Shape("cross-entropy target shape".into()));
    }
    let clamped = tape.clamp(raw, LOG_EPS, 1.0 - LOG_EPS);
    let log_pos = tape.log(clamped);
    let complement = tape.scalar_mul(clamped, -1.0);
    let complement = tape.add_scalar(complement, 1.0);
    let log_neg = tape.log(complement);
    let mut pos_coef = Vec::with_capacity(n * c);
    let mut neg_coef = Vec::with_capacity(n * c);
    for row in targets.chunks(c) {
        for (t, w) in row.iter().zip(weights) {
            pos_coef.push(-w * t / normalizer);
            neg_coef.push(-w * (1.0 - t) / normalizer);
        }
    }
    let pos_coef = tape.constant(Tensor::matrix(n, c, pos_coef)?);
    let neg_coef = tape.constant(Tensor::matrix(n, c, neg_coef)?);
    let a = tape.mul(log_pos, pos_coef)?;
    let b = tape.mul(log_neg, neg_coef)?;
    let total = tape.add(a, b)?;
    Ok(tape.sum(total))
}
