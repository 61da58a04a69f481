//! Command-line front end. [`run`] parses arguments, dispatches one
//! subcommand and maps the outcome to a process exit code.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tensor};
use crate::dataio::{self, MinMax, SampleTable, SynthConfig};
use crate::error::{Error, Result};
use crate::gat::{self, ModelParams};
use crate::hierarchy::{ClassId, Hierarchy};
use crate::knngraph::{self, NeighborGraph};
use crate::metrics::{self, PredictionSet};
use crate::train::{self, ClassifierMode, FoldMetrics, FoldRun, GraphScope, Optimizer, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.hcgat";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_NDJSON: &str = "metrics.ndjson";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";

#[derive(Debug, Parser)]
#[command(name = "hiergat", version, about = "Hierarchy-constrained graph attention classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical dataset as CSV.
    Synth(SynthArgs),
    /// Build a k-NN graph over normalized features and write a KNN1 cache.
    Graph(GraphArgs),
    /// Train and evaluate on grouped cross-validation folds.
    Train(TrainArgs),
    /// Score predictions (from a CSV or a trained run) against labels.
    Eval(EvalArgs),
    /// Predict the class and ancestor set of every row.
    Predict(PredictArgs),
    /// Per-feature importance of a trained run.
    Importance(ImportanceArgs),
    /// Print the grouped fold plan.
    Folds(FoldsArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Input CSV with one row per sample.
    #[arg(long)]
    data: PathBuf,
    /// Class tree as `parent<TAB>child` lines; built-in cell populations when omitted.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long, default_value = dataio::DEFAULT_LABEL_COLUMN)]
    label_column: String,
    #[arg(long, default_value = dataio::DEFAULT_GROUP_COLUMN)]
    group_column: String,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of rows.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Distance between top-level class means.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Standard deviation of the noise around each class mean.
    #[arg(long, default_value_t = dataio::DEFAULT_SYNTH_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of pseudo-patient groups.
    #[arg(long, default_value_t = 30)]
    groups: usize,
    #[arg(long, default_value_t = dataio::MARKERS.len())]
    features: usize,
    /// Class tree; the built-in cell populations (with their reference ratios) when omitted.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Also write the hierarchy used.
    #[arg(long)]
    hierarchy_out: Option<PathBuf>,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Debug, Args)]
struct GraphArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    out: PathBuf,
    /// Neighbors per node.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Hierarchical,
    Flat,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Neighbors per node in the k-NN graph.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Attention heads per layer.
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Hidden channels per head.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Attention layers.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Initial learning rate.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Learning-rate factor applied every `--decay-every` epochs.
    #[arg(long, default_value_t = 0.5)]
    lr_decay: f64,
    #[arg(long, default_value_t = 50)]
    decay_every: usize,
    /// Dropout rate on layer inputs and attention coefficients.
    #[arg(long, default_value_t = 0.4)]
    dropout: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Decision threshold on class scores.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Hierarchical)]
    mode: ModeArg,
    /// Leave out the self edge in attention neighborhoods.
    #[arg(long)]
    no_self_loop: bool,
    /// Separate graphs for training and held-out rows.
    #[arg(long)]
    inductive: bool,
    /// Unit class weights instead of inverse frequency.
    #[arg(long)]
    unweighted: bool,
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => Optimizer::Sgd,
                OptimizerArg::Adam => Optimizer::Adam,
            },
            lr0: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            dropout: self.dropout,
            heads: self.heads,
            hidden: self.hidden,
            layers: self.layers,
            k: self.k,
            seed: self.seed,
            threshold: self.threshold,
            mode: match self.mode {
                ModeArg::Hierarchical => ClassifierMode::Hierarchical,
                ModeArg::Flat => ClassifierMode::Flat,
            },
            graph: if self.inductive {
                GraphScope::Inductive
            } else {
                GraphScope::Transductive
            },
            self_loop: !self.no_self_loop,
            weighted: !self.unweighted,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Outer test folds.
    #[arg(long, default_value_t = 7)]
    folds: usize,
    /// Inner validation folds.
    #[arg(long, default_value_t = 10)]
    inner_folds: usize,
    /// Outer fold to hold out.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Run every outer fold, each into `fold-<i>/`.
    #[arg(long)]
    all_folds: bool,
    /// Pick the epoch count on the inner folds before the final fit.
    #[arg(long)]
    inner_cv: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    /// CSV of `row,class[,alpha]` predictions for the rows of `--data`.
    #[arg(long, conflicts_with = "run", required_unless_present = "run")]
    predictions: Option<PathBuf>,
    /// Trained run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    /// With `--run`, score only the groups that run held out.
    #[arg(long, requires = "run")]
    heldout: bool,
    /// Decision threshold; the run's own when omitted.
    #[arg(long)]
    threshold: Option<f64>,
    /// Directory for metrics.csv, metrics.ndjson and confusion.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[arg(long)]
    run: PathBuf,
    /// Rows to attribute over.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_clobber: bool,
}

#[derive(Debug, Args)]
struct FoldsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = dataio::DEFAULT_GROUP_COLUMN)]
    group_column: String,
    #[arg(long, default_value_t = 7)]
    folds: usize,
    #[arg(long, default_value_t = 10)]
    inner_folds: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Everything needed to reuse a trained model on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub hierarchy: String,
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub normalization: MinMax,
    pub label_column: String,
    pub group_column: String,
    pub fold: usize,
    pub folds: usize,
    pub test_groups: Vec<String>,
    pub epochs_trained: usize,
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code. Errors go to standard error prefixed with `error:`.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Graph(a) => graph(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Importance(a) => importance(a),
        Command::Folds(a) => folds(a),
    }
}

fn load_hierarchy(path: Option<&Path>) -> Result<Hierarchy> {
    match path {
        Some(p) => Hierarchy::parse(&fs::read_to_string(p)?),
        None => Ok(Hierarchy::cell_populations()),
    }
}

fn load_labeled(input: &InputArgs, h: &Hierarchy) -> Result<SampleTable> {
    dataio::load_csv(&input.data, &input.label_column, &input.group_column, h)
}

fn check_clobber(no_clobber: bool, paths: &[&Path]) -> Result<()> {
    if no_clobber {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Clobber(p.to_path_buf()));
        }
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut outputs = vec![a.out.as_path()];
    outputs.extend(a.hierarchy_out.as_deref());
    check_clobber(a.no_clobber, &outputs)?;
    let (h, counts) = match &a.hierarchy {
        None => {
            let h = Hierarchy::cell_populations();
            let counts = dataio::cell_ratio_counts(&h, a.n)?;
            (h, counts)
        }
        Some(p) => {
            let h = load_hierarchy(Some(p))?;
            let ratios: Vec<(ClassId, f64)> = h.ids().map(|c| (c, 1.0)).collect();
            let counts = dataio::proportional_counts(&ratios, a.n);
            (h, counts)
        }
    };
    let cfg = SynthConfig {
        n_features: a.features,
        n_groups: a.groups,
        noise: a.noise,
        ..SynthConfig::new(counts, a.separation, a.seed)
    };
    let table = dataio::synth_generate(&h, &cfg)?;
    dataio::write_csv(&table, &h, fs::File::create(&a.out)?)?;
    if let Some(p) = &a.hierarchy_out {
        fs::write(p, h.to_text())?;
    }
    println!("wrote {} rows to {}", table.n_rows(), a.out.display());
    Ok(())
}

fn graph(a: GraphArgs) -> Result<()> {
    check_clobber(a.no_clobber, &[&a.out])?;
    let h = load_hierarchy(a.input.hierarchy.as_deref())?;
    let table = dataio::load_csv_unlabeled(&a.input.data, &a.input.label_column, &a.input.group_column, &h)?;
    let (norm, _) = dataio::normalize_minmax(&table)?;
    let g = knngraph::build_knn(&norm.features, norm.n_features, a.k)?;
    g.write_cache(std::io::BufWriter::new(fs::File::create(&a.out)?))?;
    let hist = knngraph::degree_histogram(&g);
    println!("nodes {} k {}", g.n(), g.k());
    for (deg, count) in hist {
        println!("degree {deg}: {count}");
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.model.config();
    cfg.validate()?;
    let h = load_hierarchy(a.input.hierarchy.as_deref())?;
    let table = dataio::duplicate_multilabel(&load_labeled(&a.input, &h)?);
    let plan = train::grouped_folds(&table.groups, a.folds, a.inner_folds, cfg.seed)?;
    let folds: Vec<usize> = if a.all_folds {
        (0..a.folds).collect()
    } else if a.fold < a.folds {
        vec![a.fold]
    } else {
        return Err(Error::InvalidArgument(format!("--fold {} with {} folds", a.fold, a.folds)));
    };
    let dir_of = |f: usize| {
        if a.all_folds {
            a.out.join(format!("fold-{f}"))
        } else {
            a.out.clone()
        }
    };
    if a.no_clobber {
        for f in &folds {
            let d = dir_of(*f);
            let files = [CONFIG_FILE, CHECKPOINT_FILE, TRACE_FILE, METRICS_NDJSON, METRICS_CSV];
            let paths: Vec<PathBuf> = files.iter().map(|n| d.join(n)).collect();
            check_clobber(true, &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let runs: Vec<(FoldRun, Vec<f64>)> = pool.install(|| {
        folds
            .par_iter()
            .map(|&f| {
                let run = train::run_fold(&table, &h, &cfg, &plan, f, a.inner_cv)?;
                let imp = train::feature_importance(
                    &run.outcome.params,
                    &run.data.features,
                    &run.data.graph,
                    &h,
                    cfg.mode,
                    cfg.threshold,
                )?;
                Ok((run, imp))
            })
            .collect::<Result<_>>()
    })?;

    let mut lines = Vec::new();
    for (run, imp) in &runs {
        let dir = dir_of(run.fold);
        fs::create_dir_all(&dir)?;
        let rc = RunConfig {
            train: cfg.clone(),
            hierarchy: h.to_text(),
            classes: h.names().to_vec(),
            feature_names: table.feature_names.clone(),
            normalization: run.data.normalization.clone(),
            label_column: a.input.label_column.clone(),
            group_column: a.input.group_column.clone(),
            fold: run.fold,
            folds: a.folds,
            test_groups: plan.outer[run.fold].clone(),
            epochs_trained: run.epochs,
        };
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&rc)? + "\n")?;
        gat::write_checkpoint(&run.outcome.params, fs::File::create(dir.join(CHECKPOINT_FILE))?)?;
        fs::write(dir.join(TRACE_FILE), trace_csv(&run.outcome.trace))?;
        write_reports(&dir, &h, &run.metrics, Some(run.fold))?;
        fs::write(dir.join(IMPORTANCE_FILE), importance_csv(&table.feature_names, imp))?;
        let line = metrics_line(Some(run.fold), &run.metrics)?;
        println!(
            "fold {}: hp={} hr={} hf={} violations={}",
            run.fold, run.metrics.hp, run.metrics.hr, run.metrics.hf, run.metrics.violations
        );
        lines.push(line);
    }
    if a.all_folds {
        fs::write(a.out.join(METRICS_NDJSON), lines.join(""))?;
        let n = runs.len() as f64;
        let mean = |f: fn(&FoldMetrics) -> f64| runs.iter().map(|(r, _)| f(&r.metrics)).sum::<f64>() / n;
        let violations: usize = runs.iter().map(|(r, _)| r.metrics.violations).sum();
        let mut csv = String::from("metric,value\n");
        let _ = writeln!(csv, "hp,{}", mean(|m| m.hp));
        let _ = writeln!(csv, "hr,{}", mean(|m| m.hr));
        let _ = writeln!(csv, "hf,{}", mean(|m| m.hf));
        let _ = writeln!(csv, "violations,{violations}");
        fs::write(a.out.join(METRICS_CSV), csv)?;
    }
    Ok(())
}

fn trace_csv(trace: &[train::EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss\n");
    for r in trace {
        let test = r.test_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, test);
    }
    s
}

fn importance_csv(names: &[String], imp: &[f64]) -> String {
    let mut s = String::from("feature,importance\n");
    for (n, v) in names.iter().zip(imp) {
        let _ = writeln!(s, "{},{}", csv_field(n), v);
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Serialize)]
struct MetricsLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
    hp: f64,
    hr: f64,
    hf: f64,
    violations: usize,
    n: usize,
}

fn metrics_line(fold: Option<usize>, m: &FoldMetrics) -> Result<String> {
    let line = MetricsLine {
        fold,
        hp: m.hp,
        hr: m.hr,
        hf: m.hf,
        violations: m.violations,
        n: m.n,
    };
    Ok(serde_json::to_string(&line)? + "\n")
}

fn write_reports(dir: &Path, h: &Hierarchy, m: &FoldMetrics, fold: Option<usize>) -> Result<()> {
    fs::write(dir.join(METRICS_NDJSON), metrics_line(fold, m)?)?;
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "hp,{}", m.hp);
    let _ = writeln!(csv, "hr,{}", m.hr);
    let _ = writeln!(csv, "hf,{}", m.hf);
    let _ = writeln!(csv, "violations,{}", m.violations);
    let _ = writeln!(csv, "n,{}", m.n);
    for (c, r) in h.ids().zip(&m.per_class_ratio) {
        let v = r.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{}", csv_field(&format!("correct_ratio:{}", h.name(c))), v);
    }
    fs::write(dir.join(METRICS_CSV), csv)?;

    let mut conf = String::from("truth");
    for n in h.names() {
        conf.push(',');
        conf.push_str(&csv_field(n));
    }
    conf.push('\n');
    for (c, row) in h.ids().zip(&m.confusion) {
        conf.push_str(&csv_field(h.name(c)));
        for v in row {
            let _ = write!(conf, ",{v}");
        }
        conf.push('\n');
    }
    fs::write(dir.join(CONFUSION_FILE), conf)?;
    Ok(())
}

/// A trained run loaded back from its directory.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub config: RunConfig,
    pub hierarchy: Hierarchy,
    pub params: ModelParams,
}

/// Decision scores of a trained run on new rows, with the graph and the
/// normalized features they were computed from.
#[derive(Debug, Clone)]
pub struct Scored {
    /// Row-major `n x C`.
    pub scores: Vec<f64>,
    pub graph: NeighborGraph,
    pub features: Tensor,
}

impl TrainedRun {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let hierarchy = Hierarchy::parse(&config.hierarchy)?;
        let params = gat::read_checkpoint(fs::File::open(dir.join(CHECKPOINT_FILE))?)?;
        if params.output_dim() != hierarchy.len() || params.input_dim() != config.feature_names.len() {
            return Err(Error::format("HCGAT1", "checkpoint does not match the run configuration"));
        }
        Ok(TrainedRun {
            config,
            hierarchy,
            params,
        })
    }

    /// Normalizes `table` with the run's statistics, builds the k-NN graph
    /// over all of its rows and scores every row.
    pub fn score(&self, table: &SampleTable) -> Result<Scored> {
        let norm = self.config.normalization.apply(table)?;
        let graph = knngraph::build_knn(&norm.features, norm.n_features, self.config.train.k)?;
        let features = Tensor::matrix(norm.n_rows(), norm.n_features, norm.features)?;
        let raw = gat::model_forward(&self.params, &features, &graph, Mode::Eval, None)?;
        let scores = train::decision_scores(&raw, &self.hierarchy, self.config.train.mode);
        Ok(Scored {
            scores,
            graph,
            features,
        })
    }

    /// [`TrainedRun::score`] on a bare row-major feature matrix.
    pub fn score_features(&self, features: &[f64]) -> Result<Scored> {
        let m = self.config.feature_names.len();
        if !features.len().is_multiple_of(m) {
            return Err(Error::Shape(format!("{} values do not form rows of {m}", features.len())));
        }
        let n = features.len() / m;
        let table = SampleTable {
            features: features.to_vec(),
            n_features: m,
            groups: vec![String::new(); n],
            labels: vec![Vec::new(); n],
            feature_names: self.config.feature_names.clone(),
        };
        self.score(&table)
    }

    pub fn predict(&self, scores: &[f64], threshold: Option<f64>) -> Result<PredictionSet> {
        let t = threshold.unwrap_or(self.config.train.threshold);
        train::predict_scores(&self.hierarchy, scores, self.config.train.mode, t)
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    if let Some(out) = &a.out {
        let paths: Vec<PathBuf> = [METRICS_CSV, METRICS_NDJSON, CONFUSION_FILE]
            .iter()
            .map(|n| out.join(n))
            .collect();
        check_clobber(a.no_clobber, &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    }
    let (h, m) = match (&a.predictions, &a.run) {
        (Some(pred_path), _) => {
            let h = load_hierarchy(a.input.hierarchy.as_deref())?;
            let table = load_labeled(&a.input, &h)?;
            let pred = read_predictions(pred_path, &h, table.n_rows())?;
            let m = score_predictions(&h, &pred, &table, None)?;
            (h, m)
        }
        (None, Some(dir)) => {
            let run = TrainedRun::load(dir)?;
            let table = dataio::load_csv(&a.input.data, &a.input.label_column, &a.input.group_column, &run.hierarchy)?;
            let table = dataio::duplicate_multilabel(&table);
            let scores = run.score(&table)?.scores;
            let pred = run.predict(&scores, a.threshold)?;
            let rows: Vec<usize> = if a.heldout {
                let held: BTreeSet<&String> = run.config.test_groups.iter().collect();
                (0..table.n_rows()).filter(|&r| held.contains(&table.groups[r])).collect()
            } else {
                (0..table.n_rows()).collect()
            };
            let mut m = score_predictions(&run.hierarchy, &pred, &table, Some(&rows))?;
            let c = run.hierarchy.len();
            let sel: Vec<f64> = rows.iter().flat_map(|&r| scores[r * c..(r + 1) * c].iter().copied()).collect();
            m.violations = crate::constraint::check_coherence(&run.hierarchy, &sel);
            (run.hierarchy, m)
        }
        (None, None) => unreachable!("clap requires one of --predictions and --run"),
    };
    println!("hp={} hr={} hf={} violations={} n={}", m.hp, m.hr, m.hf, m.violations, m.n);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_reports(out, &h, &m, None)?;
    }
    Ok(())
}

/// Pairs every label of every selected row with that row's prediction, so a
/// row with several labels counts once per label.
fn score_predictions(
    h: &Hierarchy,
    pred: &PredictionSet,
    table: &SampleTable,
    rows: Option<&[usize]>,
) -> Result<FoldMetrics> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..table.n_rows()).collect();
            &all
        }
    };
    let mut alpha = Vec::new();
    let mut most_specific = Vec::new();
    let mut labels = Vec::new();
    for &r in rows {
        for &l in &table.labels[r] {
            alpha.push(pred.alpha[r].clone());
            most_specific.push(pred.most_specific[r]);
            labels.push(l);
        }
    }
    let pred = PredictionSet { alpha, most_specific };
    let truth = metrics::TruthSet::from_labels(h, &labels);
    let hm = metrics::hierarchical_metrics(&pred, &truth)?;
    Ok(FoldMetrics {
        hp: hm.hp,
        hr: hm.hr,
        hf: hm.hf,
        per_class_ratio: metrics::per_class_ratio(&pred, &truth, h),
        confusion: metrics::confusion_matrix(&pred, &truth, h),
        violations: 0,
        n: labels.len(),
    })
}

fn read_predictions(path: &Path, h: &Hierarchy, n: usize) -> Result<PredictionSet> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|c| c.trim() == name);
    let row_col = col("row").ok_or_else(|| Error::MissingColumn("row".into()))?;
    let class_col = col("class").ok_or_else(|| Error::MissingColumn("class".into()))?;
    let alpha_col = col("alpha");
    let mut slots: Vec<Option<(BTreeSet<ClassId>, ClassId)>> = vec![None; n];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let r: usize = field(row_col).parse().map_err(|_| Error::NonNumeric {
            row: line,
            column: "row".into(),
            value: field(row_col).to_owned(),
        })?;
        if r >= n {
            return Err(Error::InvalidArgument(format!("prediction for row {r} but data has {n} rows")));
        }
        let class = h.id(field(class_col))?;
        let mut alpha = h.ancestor_closure([&class]);
        if let Some(c) = alpha_col.filter(|&c| !field(c).is_empty()) {
            let extra = dataio::parse_label_cell(field(c), h)?;
            alpha.extend(h.ancestor_closure(extra.iter()));
        }
        slots[r] = Some((alpha, class));
    }
    let mut alpha = Vec::with_capacity(n);
    let mut most_specific = Vec::with_capacity(n);
    for (r, s) in slots.into_iter().enumerate() {
        let (a, c) = s.ok_or_else(|| Error::InvalidArgument(format!("no prediction for row {r}")))?;
        alpha.push(a);
        most_specific.push(c);
    }
    Ok(PredictionSet { alpha, most_specific })
}

fn unlabeled_for_run(run: &TrainedRun, data: &Path) -> Result<SampleTable> {
    let t = dataio::load_csv_unlabeled(data, &run.config.label_column, &run.config.group_column, &run.hierarchy)?;
    if t.feature_names != run.config.feature_names {
        return Err(Error::Shape(format!(
            "data features {:?} differ from the run's {:?}",
            t.feature_names, run.config.feature_names
        )));
    }
    Ok(t)
}

fn predict(a: PredictArgs) -> Result<()> {
    check_clobber(a.no_clobber, &[&a.out])?;
    let run = TrainedRun::load(&a.run)?;
    let table = unlabeled_for_run(&run, &a.data)?;
    let scores = run.score(&table)?.scores;
    let pred = run.predict(&scores, a.threshold)?;
    let mut w = csv::Writer::from_writer(fs::File::create(&a.out)?);
    w.write_record(["row", "class", "alpha"])?;
    for (r, (set, c)) in pred.alpha.iter().zip(&pred.most_specific).enumerate() {
        let names: Vec<ClassId> = set.iter().copied().collect();
        w.write_record([
            r.to_string(),
            run.hierarchy.name(*c).to_owned(),
            dataio::label_cell(&names, &run.hierarchy),
        ])?;
    }
    w.flush()?;
    println!("wrote {} predictions to {}", pred.len(), a.out.display());
    Ok(())
}

fn importance(a: ImportanceArgs) -> Result<()> {
    check_clobber(a.no_clobber, &[&a.out])?;
    let run = TrainedRun::load(&a.run)?;
    let table = unlabeled_for_run(&run, &a.data)?;
    let scored = run.score(&table)?;
    let imp = train::feature_importance(
        &run.params,
        &scored.features,
        &scored.graph,
        &run.hierarchy,
        run.config.train.mode,
        run.config.train.threshold,
    )?;
    let text = importance_csv(&run.config.feature_names, &imp);
    fs::File::create(&a.out)?.write_all(text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn folds(a: FoldsArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.data)?;
    let col = rdr
        .headers()?
        .iter()
        .position(|c| c.trim() == a.group_column)
        .ok_or_else(|| Error::MissingColumn(a.group_column.clone()))?;
    let mut groups = Vec::new();
    for rec in rdr.records() {
        groups.push(rec?.get(col).unwrap_or("").trim().to_owned());
    }
    let plan = train::grouped_folds(&groups, a.folds, a.inner_folds, a.seed)?;
    let mut out = String::new();
    for (f, test) in plan.outer.iter().enumerate() {
        let n_rows = plan.test_rows(&groups, f).len();
        let _ = writeln!(out, "fold {f}: test groups {} ({n_rows} rows)", test.join(" "));
        for (i, inner) in plan.inner[f].iter().enumerate() {
            let _ = writeln!(out, "fold {f} inner {i}: {}", inner.join(" "));
        }
    }
    print!("{out}");
    Ok(())
}
