//! Full-graph training, grouped cross-validation folds, fold evaluation and
//! feature importance.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Tensor};
use crate::constraint::{self, check_coherence, mcm_rows};
use crate::dataio::{self, LabelMatrix, MinMax, SampleTable};
use crate::error::{Error, Result};
use crate::gat::{self, AttentionEdges, DropoutCtx, ModelParams, ModelSpec};
use crate::hierarchy::{ClassId, Hierarchy};
use crate::knngraph::{build_knn, NeighborGraph};
use crate::metrics::{self, HierMetrics, PredictionSet, TruthSet};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    /// Max constraint layer on top of the network, trained with the max
    /// constraint loss.
    Hierarchical,
    /// Independent per-class sigmoid outputs trained with binary
    /// cross-entropy on the most-specific label only.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphScope {
    /// One graph over training and held-out rows; the loss sees training
    /// rows only.
    Transductive,
    /// Separate graphs for training and held-out rows.
    Inductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain full-batch gradient descent.
    Sgd,
    /// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub dropout: f64,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub k: usize,
    pub seed: u64,
    pub threshold: f64,
    pub mode: ClassifierMode,
    pub graph: GraphScope,
    pub self_loop: bool,
    pub weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            optimizer: Optimizer::Adam,
            lr0: 0.1,
            lr_decay: 0.5,
            decay_every: 50,
            dropout: 0.4,
            heads: 8,
            hidden: 64,
            layers: 2,
            k: 5,
            seed: 42,
            threshold: metrics::DEFAULT_THRESHOLD,
            mode: ClassifierMode::Hierarchical,
            graph: GraphScope::Transductive,
            self_loop: true,
            weighted: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_owned()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.heads == 0 || self.hidden == 0 || self.layers == 0 || self.k == 0 {
            return bad("heads, hidden, layers and k must be positive");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.decay_every == 0 || !positive(self.lr0) || !positive(self.lr_decay) {
            return bad("learning rate schedule must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }

    /// `lr0 * lr_decay^floor(epoch / decay_every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden: vec![self.hidden; self.layers - 1],
            output_dim: classes,
            heads: self.heads,
            self_loop: self.self_loop,
        }
    }
}

/// Normalized features, encoded targets and the attention graph of one
/// evaluation run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub features: Tensor,
    /// Most-specific class per row.
    pub labels: Vec<ClassId>,
    /// Ancestor-closed targets.
    pub targets: LabelMatrix,
    /// One-hot most-specific targets.
    pub flat_targets: LabelMatrix,
    pub graph: NeighborGraph,
    pub edges: AttentionEdges,
    pub normalization: MinMax,
}

impl PreparedData {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }
}

/// Fits min-max statistics on `train_rows`, applies them to every row,
/// encodes labels and builds the attention graph. `table` must already be
/// single-labeled (see [`dataio::duplicate_multilabel`]).
pub fn prepare(
    table: &SampleTable,
    h: &Hierarchy,
    cfg: &TrainConfig,
    train_rows: &[usize],
) -> Result<PreparedData> {
    let stats = MinMax::fit(&table.select_rows(train_rows))?;
    let normalized = stats.apply(table)?;
    let targets = dataio::encode_labels(&normalized, h)?;
    let flat_targets = dataio::encode_flat_labels(&normalized, h)?;
    let labels = normalized.labels.iter().map(|l| l[0]).collect();
    let m = normalized.n_features;
    let graph = match cfg.graph {
        GraphScope::Transductive => build_knn(&normalized.features, m, cfg.k)?,
        GraphScope::Inductive => {
            let train: BTreeSet<usize> = train_rows.iter().copied().collect();
            let rest: Vec<usize> = (0..normalized.n_rows()).filter(|r| !train.contains(r)).collect();
            block_graph(&normalized, &[train_rows.to_vec(), rest], cfg.k)?
        }
    };
    let edges = AttentionEdges::from_graph(&graph, cfg.self_loop)?;
    Ok(PreparedData {
        features: Tensor::matrix(normalized.n_rows(), m, normalized.features)?,
        labels,
        targets,
        flat_targets,
        graph,
        edges,
        normalization: stats,
    })
}

/// Independent k-NN graphs per block of rows, stitched back into global
/// indices. Every block needs `k + 1` rows so all lists have equal length.
fn block_graph(t: &SampleTable, blocks: &[Vec<usize>], k: usize) -> Result<NeighborGraph> {
    let mut lists = vec![Vec::new(); t.n_rows()];
    for block in blocks.iter().filter(|b| !b.is_empty()) {
        if block.len() <= k {
            return Err(Error::InvalidArgument(format!(
                "a split of {} rows is too small for k = {k}",
                block.len()
            )));
        }
        let sub = t.select_rows(block);
        let g = build_knn(&sub.features, t.n_features, k)?;
        for (local, &global) in block.iter().enumerate() {
            lists[global] = g.neighbors(local).iter().map(|&j| block[j]).collect();
        }
    }
    NeighborGraph::from_lists(lists)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    #[serde(skip)]
    pub heldout_hf: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochRecord>,
}

fn targets_for(data: &PreparedData, mode: ClassifierMode) -> &LabelMatrix {
    match mode {
        ClassifierMode::Hierarchical => &data.targets,
        ClassifierMode::Flat => &data.flat_targets,
    }
}

fn loss_on_tape(
    tape: &mut Tape,
    h: &Hierarchy,
    mode: ClassifierMode,
    raw: crate::autodiff::Var,
    targets: &[f64],
    weights: &[f64],
    normalizer: f64,
) -> Result<crate::autodiff::Var> {
    match mode {
        ClassifierMode::Hierarchical => constraint::mcloss_on_tape(tape, h, raw, targets, weights, normalizer),
        ClassifierMode::Flat => constraint::bce_on_tape(tape, raw, targets, weights, normalizer),
    }
}

/// Class weights for the loss: inverse frequency on the training rows, or
/// all ones when weighting is off.
pub fn loss_weights(cfg: &TrainConfig, data: &PreparedData, train_rows: &[usize]) -> Vec<f64> {
    let t = targets_for(data, cfg.mode).select_rows(train_rows);
    if cfg.weighted {
        dataio::class_weights(&t)
    } else {
        vec![1.0; t.c]
    }
}

/// Mean loss of `params` over `rows` in evaluation mode.
pub fn eval_loss(
    params: &ModelParams,
    data: &PreparedData,
    h: &Hierarchy,
    mode: ClassifierMode,
    weights: &[f64],
    rows: &[usize],
) -> Result<f64> {
    let raw = gat::model_forward_edges(params, &data.features, &data.edges, Mode::Eval, None)?;
    loss_from_scores(&raw, data, h, mode, weights, rows)
}

fn loss_from_scores(
    raw: &Tensor,
    data: &PreparedData,
    h: &Hierarchy,
    mode: ClassifierMode,
    weights: &[f64],
    rows: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new(Mode::Eval);
    let r = tape.constant(raw.clone());
    let sel = tape.gather_rows(r, Arc::new(rows.to_vec()))?;
    let t = targets_for(data, mode).select_rows(rows);
    let loss = loss_on_tape(&mut tape, h, mode, sel, &t.values, weights, rows.len() as f64)?;
    Ok(tape.value(loss).item())
}

/// Full-batch gradient descent on the weighted loss over `train_rows`.
///
/// Each epoch records the training loss (train mode, before the update) and,
/// when `heldout_rows` is non-empty, the evaluation-mode loss and
/// hierarchical F-score on those rows for the same parameters. Labels of rows
/// outside `train_rows` never reach the gradient.
pub fn train_model(
    cfg: &TrainConfig,
    data: &PreparedData,
    h: &Hierarchy,
    train_rows: &[usize],
    heldout_rows: &[usize],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_rows.is_empty() {
        return Err(Error::InvalidArgument("no training rows".into()));
    }
    let spec = cfg.model_spec(data.features.cols(), h.len());
    let mut params = gat::init_params(&spec, cfg.seed)?;
    let weights = loss_weights(cfg, data, train_rows);
    let train_targets = targets_for(data, cfg.mode).select_rows(train_rows);
    let train_index = Arc::new(train_rows.to_vec());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut moments: Vec<(Vec<f64>, Vec<f64>)> = params
        .tensors()
        .map(|t| (vec![0.0; t.len()], vec![0.0; t.len()]))
        .collect();

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new(Mode::Train);
        let vars = gat::bind_params(&mut tape, &params, true);
        let x = tape.constant(data.features.clone());
        let ctx = DropoutCtx {
            rate: cfg.dropout,
            seed: cfg.seed,
            epoch: epoch as u64,
        };
        let raw = gat::forward_on_tape(&mut tape, &params, &vars, x, &data.edges, Some(ctx))?;
        let sel = tape.gather_rows(raw, train_index.clone())?;
        let loss = loss_on_tape(
            &mut tape,
            h,
            cfg.mode,
            sel,
            &train_targets.values,
            &weights,
            train_rows.len() as f64,
        )?;
        let train_loss = tape.value(loss).item();
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }

        let (test_loss, heldout_hf) = if heldout_rows.is_empty() {
            (None, None)
        } else {
            let raw = gat::model_forward_edges(&params, &data.features, &data.edges, Mode::Eval, None)?;
            let l = loss_from_scores(&raw, data, h, cfg.mode, &weights, heldout_rows)?;
            let m = score_rows(&raw, data, h, cfg, heldout_rows)?;
            (Some(l), Some(m.hf))
        };
        trace.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            heldout_hf,
        });

        let grads = tape.backward(loss)?;
        let lr = cfg.learning_rate(epoch);
        for ((t, v), state) in params.tensors_mut().zip(vars.iter()).zip(&mut moments) {
            if let Some(g) = grads.get(v) {
                step(cfg.optimizer, t.data_mut(), g.data(), state, lr, epoch + 1);
            }
        }
        log::debug!("epoch {epoch}: lr {lr:.4} train loss {train_loss:.6} test loss {test_loss:?}");
    }
    Ok(TrainOutcome { params, trace })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One parameter update; `t` counts steps from 1.
fn step(opt: Optimizer, p: &mut [f64], g: &[f64], (m, v): &mut (Vec<f64>, Vec<f64>), lr: f64, t: usize) {
    match opt {
        Optimizer::Sgd => {
            for (p, d) in p.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
        Optimizer::Adam => {
            let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for (((p, d), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// [`train_model`] with the flat baseline objective.
pub fn flat_mode_train(
    cfg: &TrainConfig,
    data: &PreparedData,
    h: &Hierarchy,
    train_rows: &[usize],
    heldout_rows: &[usize],
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: ClassifierMode::Flat,
        ..cfg.clone()
    };
    train_model(&cfg, data, h, train_rows, heldout_rows)
}

/// Predictions from row-major decision scores. Hierarchical mode thresholds
/// the constrained scores; flat mode takes the top raw score, as a flat
/// multi-class classifier would.
pub fn predict_scores(h: &Hierarchy, scores: &[f64], mode: ClassifierMode, threshold: f64) -> Result<PredictionSet> {
    match mode {
        ClassifierMode::Hierarchical => metrics::extract_predictions(h, scores, threshold),
        ClassifierMode::Flat => metrics::extract_argmax(h, scores),
    }
}

/// Scores used for prediction: constrained in hierarchical mode, raw in
/// flat mode. Row-major `n x C`.
pub fn decision_scores(raw: &Tensor, h: &Hierarchy, mode: ClassifierMode) -> Vec<f64> {
    match mode {
        ClassifierMode::Hierarchical => mcm_rows(h, raw.data()),
        ClassifierMode::Flat => raw.data().to_vec(),
    }
}

fn rows_of(scores: &[f64], c: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| scores[r * c..(r + 1) * c].iter().copied()).collect()
}

fn score_rows(
    raw: &Tensor,
    data: &PreparedData,
    h: &Hierarchy,
    cfg: &TrainConfig,
    rows: &[usize],
) -> Result<HierMetrics> {
    let scores = rows_of(&decision_scores(raw, h, cfg.mode), h.len(), rows);
    let pred = predict_scores(h, &scores, cfg.mode, cfg.threshold)?;
    let labels: Vec<ClassId> = rows.iter().map(|&r| data.labels[r]).collect();
    metrics::hierarchical_metrics(&pred, &TruthSet::from_labels(h, &labels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub hp: f64,
    pub hr: f64,
    pub hf: f64,
    pub per_class_ratio: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    /// Hierarchy violations in the decision scores of the evaluated rows.
    pub violations: usize,
    pub n: usize,
}

/// Evaluation-mode forward pass and metrics over `rows`.
pub fn evaluate_fold(
    params: &ModelParams,
    data: &PreparedData,
    h: &Hierarchy,
    cfg: &TrainConfig,
    rows: &[usize],
) -> Result<FoldMetrics> {
    let raw = gat::model_forward_edges(params, &data.features, &data.edges, Mode::Eval, None)?;
    evaluate_scores(&raw, data, h, cfg, rows)
}

pub fn evaluate_scores(
    raw: &Tensor,
    data: &PreparedData,
    h: &Hierarchy,
    cfg: &TrainConfig,
    rows: &[usize],
) -> Result<FoldMetrics> {
    let scores = rows_of(&decision_scores(raw, h, cfg.mode), h.len(), rows);
    let pred = predict_scores(h, &scores, cfg.mode, cfg.threshold)?;
    let labels: Vec<ClassId> = rows.iter().map(|&r| data.labels[r]).collect();
    let truth = TruthSet::from_labels(h, &labels);
    let m = metrics::hierarchical_metrics(&pred, &truth)?;
    Ok(FoldMetrics {
        hp: m.hp,
        hr: m.hr,
        hf: m.hf,
        per_class_ratio: metrics::per_class_ratio(&pred, &truth, h),
        confusion: metrics::confusion_matrix(&pred, &truth, h),
        violations: check_coherence(h, &scores),
        n: rows.len(),
    })
}

/// Mean absolute gradient of each node's predicted-class score with respect
/// to that node's own input features, min-max scaled to `[0, 1]`.
///
/// The predicted class comes from the model itself, so no labels are needed.
/// Each node's gradient is taken on its receptive field only, which gives the
/// same value as differentiating the full graph.
pub fn feature_importance(
    params: &ModelParams,
    features: &Tensor,
    g: &NeighborGraph,
    h: &Hierarchy,
    mode: ClassifierMode,
    threshold: f64,
) -> Result<Vec<f64>> {
    let raw = gat::model_forward(params, features, g, Mode::Eval, None)?;
    let scores = decision_scores(&raw, h, mode);
    let pred = predict_scores(h, &scores, mode, threshold)?;
    let m = features.cols();
    let hops = params.layers.len();

    let per_node: Vec<Vec<f64>> = (0..g.n())
        .into_par_iter()
        .map(|i| node_input_gradient(params, features, g, h, mode, i, pred.most_specific[i], hops))
        .collect::<Result<_>>()?;

    let mut mean = vec![0.0; m];
    for grad in &per_node {
        for (acc, v) in mean.iter_mut().zip(grad) {
            *acc += v.abs();
        }
    }
    let n = g.n() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(minmax_unit(&mean))
}

fn minmax_unit(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![if hi > 0.0 { 1.0 } else { 0.0 }; v.len()]
    }
}

/// Gradient of node `i`'s score for `class` (constrained in hierarchical
/// mode) with respect to `x_i`.
#[allow(clippy::too_many_arguments)]
pub fn node_input_gradient(
    params: &ModelParams,
    features: &Tensor,
    g: &NeighborGraph,
    h: &Hierarchy,
    mode: ClassifierMode,
    i: usize,
    class: ClassId,
    hops: usize,
) -> Result<Vec<f64>> {
    let (nodes, lists) = gat::receptive_field(g, i, hops);
    let m = features.cols();
    let mut sub = Vec::with_capacity(nodes.len() * m);
    for &u in &nodes {
        sub.extend_from_slice(features.row(u));
    }
    let edges = AttentionEdges::from_lists(&lists, params.self_loop)?;
    let mut tape = Tape::new(Mode::Eval);
    let vars = gat::bind_params(&mut tape, params, false);
    let x = tape.param(Tensor::matrix(nodes.len(), m, sub)?);
    let raw = gat::forward_on_tape(&mut tape, params, &vars, x, &edges, None)?;
    let center = tape.gather_rows(raw, Arc::new(vec![0]))?;
    let scores = match mode {
        ClassifierMode::Hierarchical => constraint::mcm_on_tape(&mut tape, h, center)?,
        ClassifierMode::Flat => center,
    };
    let mut pick = vec![0.0; h.len()];
    pick[class.0] = 1.0;
    let pick = tape.constant(Tensor::matrix(1, h.len(), pick)?);
    let picked = tape.mul(scores, pick)?;
    let objective = tape.sum(picked);
    let grads = tape.backward(objective)?;
    Ok(grads.get_or_zeros(&tape, x).row(0).to_vec())
}

/// Outer test folds and, per outer fold, inner folds over its training
/// groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub outer: Vec<Vec<String>>,
    pub inner: Vec<Vec<Vec<String>>>,
}

impl FoldPlan {
    fn rows_where(groups: &[String], keep: impl Fn(&str) -> bool) -> Vec<usize> {
        groups
            .iter()
            .enumerate()
            .filter(|(_, g)| keep(g))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_rows(&self, groups: &[String], fold: usize) -> Vec<usize> {
        let held: BTreeSet<&str> = self.outer[fold].iter().map(String::as_str).collect();
        Self::rows_where(groups, |g| held.contains(g))
    }

    pub fn train_rows(&self, groups: &[String], fold: usize) -> Vec<usize> {
        let held: BTreeSet<&str> = self.outer[fold].iter().map(String::as_str).collect();
        Self::rows_where(groups, |g| !held.contains(g))
    }

    /// `(train, validation)` rows of inner fold `inner` within outer fold
    /// `fold`.
    pub fn inner_rows(&self, groups: &[String], fold: usize, inner: usize) -> (Vec<usize>, Vec<usize>) {
        let outer: BTreeSet<&str> = self.outer[fold].iter().map(String::as_str).collect();
        let val: BTreeSet<&str> = self.inner[fold][inner].iter().map(String::as_str).collect();
        (
            Self::rows_where(groups, |g| !outer.contains(g) && !val.contains(g)),
            Self::rows_where(groups, |g| val.contains(g)),
        )
    }
}

fn deal<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    let mut folds = vec![Vec::new(); n];
    for (i, it) in items.iter().enumerate() {
        folds[i % n].push(it.clone());
    }
    folds
}

/// Shuffles the distinct groups with `seed` and deals them round-robin into
/// `n_outer` folds; each fold's training groups are dealt the same way into
/// `n_inner` folds (fewer when there are not enough training groups).
pub fn grouped_folds(groups: &[String], n_outer: usize, n_inner: usize, seed: u64) -> Result<FoldPlan> {
    let mut distinct: Vec<String> = groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if n_outer == 0 || distinct.len() < n_outer {
        return Err(Error::TooFewGroups {
            needed: n_outer.max(1),
            found: distinct.len(),
        });
    }
    let mut rng = SplitMix64::derive(seed, &[0x666f6c64]);
    distinct.shuffle(&mut rng);
    let outer = deal(&distinct, n_outer);
    let inner = outer
        .iter()
        .enumerate()
        .map(|(f, _)| {
            let mut train: Vec<String> = outer
                .iter()
                .enumerate()
                .filter(|&(o, _)| o != f)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect();
            let mut r = SplitMix64::derive(seed, &[0x696e6e72, f as u64]);
            train.shuffle(&mut r);
            let k = n_inner.min(train.len());
            if k < n_inner {
                log::warn!("outer fold {f}: only {} training groups for {n_inner} inner folds", train.len());
            }
            if k == 0 {
                Vec::new()
            } else {
                deal(&train, k)
            }
        })
        .collect();
    Ok(FoldPlan { outer, inner })
}

/// Picks the number of epochs maximizing the mean inner-validation
/// hierarchical F-score; ties go to the earlier epoch.
pub fn select_epochs(
    cfg: &TrainConfig,
    data: &PreparedData,
    h: &Hierarchy,
    plan: &FoldPlan,
    groups: &[String],
    fold: usize,
) -> Result<usize> {
    let n_inner = plan.inner[fold].len();
    if n_inner == 0 || cfg.epochs == 0 {
        return Ok(cfg.epochs);
    }
    let mut sums = vec![0.0; cfg.epochs];
    for inner in 0..n_inner {
        let (train, val) = plan.inner_rows(groups, fold, inner);
        if train.is_empty() || val.is_empty() {
            continue;
        }
        let out = train_model(cfg, data, h, &train, &val)?;
        for (s, rec) in sums.iter_mut().zip(&out.trace) {
            *s += rec.heldout_hf.unwrap_or(0.0);
        }
    }
    let mut best = 0;
    for (e, &s) in sums.iter().enumerate() {
        if s > sums[best] {
            best = e;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub data: PreparedData,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub epochs: usize,
    pub outcome: TrainOutcome,
    pub metrics: FoldMetrics,
}

/// Prepares, trains and evaluates outer fold `fold`. With `inner_cv`, the
/// epoch count is chosen on the inner folds first.
pub fn run_fold(
    table: &SampleTable,
    h: &Hierarchy,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    fold: usize,
    inner_cv: bool,
) -> Result<FoldRun> {
    if fold >= plan.outer.len() {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} out of range for {} folds",
            plan.outer.len()
        )));
    }
    let train_rows = plan.train_rows(&table.groups, fold);
    let test_rows = plan.test_rows(&table.groups, fold);
    let data = prepare(table, h, cfg, &train_rows)?;
    let epochs = if inner_cv {
        select_epochs(cfg, &data, h, plan, &table.groups, fold)?
    } else {
        cfg.epochs
    };
    let run_cfg = TrainConfig { epochs, ..cfg.clone() };
    let outcome = train_model(&run_cfg, &data, h, &train_rows, &test_rows)?;
    let metrics = evaluate_fold(&outcome.params, &data, h, cfg, &test_rows)?;
    Ok(FoldRun {
        fold,
        data,
        train_rows,
        test_rows,
        epochs,
        outcome,
        metrics,
    })
}

/// Row indices grouped by group id, in first-appearance order.
pub fn rows_by_group(groups: &[String]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<String> = Vec::new();
    let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        map.entry(g.as_str())
            .or_insert_with(|| {
                order.push(g.clone());
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|g| {
            let rows = map.remove(g.as_str()).unwrap_or_default();
            (g, rows)
        })
        .collect()
}
