//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! straight to stdout, so the lines show up even when libtest captures
//! output.

mod common;

use std::io::Write;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use hiergat::autodiff::Mode;
use hiergat::constraint::{check_coherence, detect_delegation, mcloss, mcloss_terms, mcm_rows};
use hiergat::dataio::{cell_ratio_counts, class_weights, synth_generate, LabelMatrix, SampleTable, SynthConfig};
use hiergat::gat::{init_params, model_forward_edges};
use hiergat::knngraph::build_knn;
use hiergat::metrics::{hierarchical_metrics, PredictionSet, TruthSet};
use hiergat::rng::SplitMix64;
use hiergat::train::*;
use hiergat::{ClassId, Hierarchy};
use rand::Rng;

use common::suite::{end_to_end_check, op_checks};
use common::*;

/// Criteria run one at a time so their wall-clock limits are measured
/// without contention.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n:>2} {name:<28} {verdict}  {detail}").unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random_instance(rng: &mut SplitMix64) -> (Vec<Option<usize>>, Vec<f64>) {
    let c = rng.random_range(1..=10);
    let parents = random_parents(rng, c);
    let rows = rng.random_range(1..=3);
    let raw = uniform(rng, rows * c, 0.0, 1.0);
    (parents, raw)
}

#[test]
fn criterion_01_coherence() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(1);
    let mut bad = 0;
    let instances = 10_000;
    for _ in 0..instances {
        let (p, raw) = random_instance(&mut rng);
        let h = hierarchy_from(&p);
        bad += check_coherence(&h, &mcm_rows(&h, &raw));
    }
    // constrained outputs of a trained model on every row
    let t = acceptance_table(300);
    let h = Hierarchy::cell_populations();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let rows: Vec<usize> = (0..t.n_rows()).collect();
    let data = prepare(&t, &h, &cfg, &rows).unwrap();
    let out = train_model(&cfg, &data, &h, &rows, &[]).unwrap();
    let raw = model_forward_edges(&out.params, &data.features, &data.edges, Mode::Eval, None).unwrap();
    let trained = check_coherence(&h, &decision_scores(&raw, &h, ClassifierMode::Hierarchical));
    let el = t0.elapsed();
    report(
        1,
        "coherence",
        bad == 0 && trained == 0 && el < Duration::from_secs(10),
        &format!("{instances} random instances: {bad} violations; trained model: {trained}; {el:.2?}"),
    );
}

#[test]
fn criterion_02_mcm_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(2);
    let mut mismatches = 0;
    let instances = 10_000;
    for _ in 0..instances {
        let (p, raw) = random_instance(&mut rng);
        let h = hierarchy_from(&p);
        let got = mcm_rows(&h, &raw);
        for (g, r) in got.chunks(p.len()).zip(raw.chunks(p.len())) {
            if g != mcm_oracle(&p, r).as_slice() {
                mismatches += 1;
            }
        }
    }
    let el = t0.elapsed();
    report(
        2,
        "MCM oracle",
        mismatches == 0 && el < Duration::from_secs(5),
        &format!("{instances} instances, {mismatches} mismatches, {el:.2?}"),
    );
}

#[test]
fn criterion_03_mcloss() {
    let _g = serial();
    let mut rng = SplitMix64::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..5_000 {
        let c = rng.random_range(1..=10);
        let p = random_parents(&mut rng, c);
        let h = hierarchy_from(&p);
        let raw = uniform(&mut rng, c, 0.0, 1.0);
        let w = uniform(&mut rng, c, 0.1, 3.0);
        let y: Vec<f64> = if rng.random_bool(0.1) {
            vec![0.0; c]
        } else {
            let leaf = rng.random_range(0..c);
            (0..c).map(|a| if in_subtree(&p, a, leaf) { 1.0 } else { 0.0 }).collect()
        };
        let want = mcloss_terms_oracle(&p, &raw, &y);
        for (g, o) in mcloss_terms(&h, &raw, &y).unwrap().iter().zip(&want) {
            worst = worst.max((g - o).abs());
        }
        let total: f64 = want.iter().zip(&w).map(|(t, w)| t * w).sum();
        worst = worst.max((mcloss(&h, &raw, &y, &w).unwrap() - total).abs());
    }
    // a single class is plain binary cross-entropy
    let single = hierarchy_from(&[None]);
    let mut bce_gap: f64 = 0.0;
    for _ in 0..1_000 {
        let hv = rng.random_range(0.001..0.999);
        let yv = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let bce = -(yv * f64::ln(hv) + (1.0 - yv) * f64::ln(1.0 - hv));
        bce_gap = bce_gap.max((mcloss(&single, &[hv], &[yv], &[1.0]).unwrap() - bce).abs());
    }
    let ex1 = mcloss(&single, &[0.8], &[1.0], &[1.0]).unwrap();
    let ex2 = mcloss(&single, &[0.3], &[0.0], &[1.0]).unwrap();
    let hand = (ex1 - 0.2231435513142097).abs() < 1e-12 && (ex2 - 0.35667494393873245).abs() < 1e-12;
    report(
        3,
        "MCLoss",
        worst <= 1e-12 && bce_gap <= 1e-12 && hand,
        &format!("max |oracle gap| {worst:.1e}, max |BCE gap| {bce_gap:.1e}, -ln 0.8 = {ex1:.5}, -ln 0.7 = {ex2:.5}"),
    );
}

#[test]
fn criterion_04_gradients() {
    let _g = serial();
    let t0 = Instant::now();
    let (mut compared, mut skipped, mut worst) = (0, 0, 0.0f64);
    for seed in 0..30 {
        for (_, s) in op_checks(seed) {
            compared += s.compared;
            skipped += s.skipped_kinks;
            worst = worst.max(s.worst);
        }
    }
    for seed in 0..6 {
        let s = end_to_end_check(seed, seed % 2 == 0);
        compared += s.compared;
        skipped += s.skipped_kinks;
        worst = worst.max(s.worst);
    }
    let el = t0.elapsed();
    report(
        4,
        "gradient checks",
        worst <= 1e-4 && el < Duration::from_secs(60),
        &format!("{compared} entries, worst rel err {worst:.1e}, {skipped} kink points skipped, {el:.2?}"),
    );
}

#[test]
fn criterion_05_knn_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(5);
    let mut mismatches = 0;
    for i in 0..100 {
        let n = rng.random_range(2..=500);
        let m = rng.random_range(1..=12);
        let k = rng.random_range(1..=10);
        // every fourth instance on an integer grid, to force distance ties
        let x: Vec<f64> = if i % 4 == 0 {
            (0..n * m).map(|_| rng.random_range(0..4) as f64).collect()
        } else {
            uniform(&mut rng, n * m, 0.0, 1.0)
        };
        let g = build_knn(&x, m, k).unwrap();
        let want = knn_oracle(&x, m, k);
        mismatches += (0..n).filter(|&i| g.neighbors(i) != want[i].as_slice()).count();
    }
    let el = t0.elapsed();
    report(
        5,
        "k-NN oracle",
        mismatches == 0 && el < Duration::from_secs(30),
        &format!("100 instances, {mismatches} mismatched rows, {el:.2?}"),
    );
}

#[test]
fn criterion_06_metric_hand_checks() {
    let _g = serial();
    let h = Hierarchy::cell_populations();
    let id = |n: &str| h.id(n).unwrap();
    let (t, b, mono, mast) = (id("T lymphocytes"), id("B lymphocytes"), id("Monocytes"), id("Mast cells"));
    let (hspc, my, ly) = (id("HSPC"), id("Myeloid HSPC"), id("Lymphoid HSPC"));

    let single = hierarchical_metrics(
        &PredictionSet {
            alpha: vec![[hspc, my].into()],
            most_specific: vec![my],
        },
        &TruthSet {
            beta: vec![[hspc, ly].into()],
            most_specific: vec![ly],
        },
    )
    .unwrap();
    let mut ok = single.hp == 0.5 && single.hr == 0.5 && single.hf == 0.5;

    // (predicted, true) most-specific pairs; expected values summed by hand
    type Case = (Vec<(ClassId, ClassId)>, f64, f64, f64);
    let cases: Vec<Case> = vec![
        // |a&b| = 1+1+1, |a| = 1+2+1, |b| = 1+2+2
        (vec![(t, t), (my, ly), (hspc, my)], 3.0 / 4.0, 3.0 / 5.0, 2.0 / 3.0),
        // |a&b| = 0+1+2+0, |a| = 1+1+2+1, |b| = 1+1+2+1
        (vec![(b, t), (mono, mono), (ly, ly), (mast, hspc)], 0.6, 0.6, 0.6),
        // predicting a child of the truth: |a&b| = 2, |a| = 4, |b| = 2
        (vec![(my, hspc), (my, hspc)], 0.5, 1.0, 2.0 / 3.0),
        // |a&b| = 1+0+2+1+1, |a| = 1+1+2+1+1, |b| = 2+2+2+1+1
        (vec![(hspc, ly), (t, my), (my, my), (mast, mast), (b, b)], 5.0 / 6.0, 5.0 / 8.0, 5.0 / 7.0),
        // disjoint branches everywhere
        (vec![(t, b), (ly, mono)], 0.0, 0.0, 0.0),
    ];
    let mut worst: f64 = 0.0;
    for (pairs, hp, hr, hf) in &cases {
        let pred: Vec<ClassId> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<ClassId> = pairs.iter().map(|p| p.1).collect();
        let m = hierarchical_metrics(
            &PredictionSet::from_most_specific(&h, &pred),
            &TruthSet::from_labels(&h, &truth),
        )
        .unwrap();
        worst = worst.max((m.hp - hp).abs()).max((m.hr - hr).abs()).max((m.hf - hf).abs());
    }
    ok &= worst <= 1e-12;
    report(
        6,
        "metric hand checks",
        ok,
        &format!("single sample {:.3}/{:.3}/{:.3}; 5 cases, max gap {worst:.1e}", single.hp, single.hr, single.hf),
    );
}

fn acceptance_table(n: usize) -> SampleTable {
    let h = Hierarchy::cell_populations();
    let cfg = SynthConfig::new(cell_ratio_counts(&h, n).unwrap(), 4.0, 42);
    synth_generate(&h, &cfg).unwrap()
}

struct CrossValidation {
    folds: Vec<FoldMetrics>,
    elapsed: Duration,
}

impl CrossValidation {
    fn mean(&self, f: impl Fn(&FoldMetrics) -> f64) -> f64 {
        self.folds.iter().map(f).sum::<f64>() / self.folds.len() as f64
    }

    fn violations(&self) -> usize {
        self.folds.iter().map(|m| m.violations).sum()
    }
}

/// Every outer fold of the 2000-row set under the default configuration.
fn cross_validate(mode: ClassifierMode) -> CrossValidation {
    let t = acceptance_table(2000);
    let h = Hierarchy::cell_populations();
    let plan = grouped_folds(&t.groups, 7, 10, 42).unwrap();
    let cfg = TrainConfig {
        mode,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let folds = (0..7)
        .map(|f| run_fold(&t, &h, &cfg, &plan, f, false).unwrap().metrics)
        .collect();
    CrossValidation {
        folds,
        elapsed: t0.elapsed(),
    }
}

fn hierarchical_cv() -> &'static CrossValidation {
    static CV: OnceLock<CrossValidation> = OnceLock::new();
    CV.get_or_init(|| cross_validate(ClassifierMode::Hierarchical))
}

fn fold_line(cv: &CrossValidation) -> String {
    cv.folds
        .iter()
        .map(|m| format!("{:.4}", m.hf))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_07_end_to_end() {
    let _g = serial();
    let cv = hierarchical_cv();
    let (hp, hr, hf) = (cv.mean(|m| m.hp), cv.mean(|m| m.hr), cv.mean(|m| m.hf));
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "             7-fold mean hp {hp:.4} hr {hr:.4} hf {hf:.4} (per fold hf: {}); reference clinical values hp 0.983 hr 0.985 hf 0.984",
        fold_line(cv)
    )
    .unwrap();
    drop(out);
    report(
        7,
        "synthetic end-to-end",
        hf >= 0.95 && cv.violations() == 0 && cv.elapsed < Duration::from_secs(600),
        &format!("mean hf {hf:.4}, {} violations, {:.1?}", cv.violations(), cv.elapsed),
    );
}

#[test]
fn criterion_08_flat_contrast() {
    let _g = serial();
    let t = acceptance_table(2000);
    let h = Hierarchy::cell_populations();
    let cfg = TrainConfig {
        mode: ClassifierMode::Flat,
        ..TrainConfig::default()
    };
    let rows: Vec<usize> = (0..t.n_rows()).collect();
    let data = prepare(&t, &h, &cfg, &rows).unwrap();
    let init = init_params(&cfg.model_spec(12, h.len()), cfg.seed).unwrap();
    let raw = model_forward_edges(&init, &data.features, &data.edges, Mode::Eval, None).unwrap();
    let at_init = check_coherence(&h, &decision_scores(&raw, &h, ClassifierMode::Flat));

    let hier = hierarchical_cv();
    let flat = cross_validate(ClassifierMode::Flat);
    let (hh, fh) = (hier.mean(|m| m.hf), flat.mean(|m| m.hf));
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "             flat per fold hf: {}; violations after training: {} over {} test rows",
        fold_line(&flat),
        flat.violations(),
        flat.folds.iter().map(|m| m.n).sum::<usize>()
    )
    .unwrap();
    drop(out);
    report(
        8,
        "flat-mode contrast",
        at_init > 0 && hh >= fh,
        &format!("hierarchical hf {hh:.4} vs flat hf {fh:.4}; flat violations at init {at_init}"),
    );
}

#[test]
fn criterion_09_delegation() {
    let _g = serial();
    let mut rng = SplitMix64::new(9);
    let mut mismatches = 0;
    let mut found = 0;
    for _ in 0..2_000 {
        let c = rng.random_range(1..=10);
        let p = random_parents(&mut rng, c);
        let h = hierarchy_from(&p);
        let raw = uniform(&mut rng, c, 0.0, 1.0);
        let got: Vec<(usize, usize)> = detect_delegation(&h, &raw).iter().map(|(a, b)| (a.0, b.0)).collect();
        let want = delegation_oracle(&p, &raw);
        found += want.len();
        if got != want {
            mismatches += 1;
        }
    }
    report(
        9,
        "delegation",
        mismatches == 0 && found > 0,
        &format!("2000 instances, {found} delegations, {mismatches} mismatches"),
    );
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_hiergat");
    let run = |dir: &std::path::Path, args: &[&str]| {
        std::fs::create_dir_all(dir).unwrap();
        let out = Command::new(bin).current_dir(dir).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let data = tmp.path().join("d.csv");
    run(tmp.path(), &["synth", "--out", "d.csv", "--n", "400", "--seed", "42"]);
    let data = data.to_str().unwrap();
    let args = ["train", "--data", data, "--out", "run", "--epochs", "5", "--fold", "3"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a, &args);
    run(&b, &args);
    let files = [
        "checkpoint.hcgat",
        "trace.csv",
        "metrics.ndjson",
        "metrics.csv",
        "confusion.csv",
        "importance.csv",
        "config.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join("run").join(f)).unwrap() != std::fs::read(b.join("run").join(f)).unwrap())
        .collect();
    report(
        10,
        "determinism",
        differing.is_empty(),
        &format!("{} files compared, differing: {differing:?}", files.len()),
    );
}

#[test]
fn criterion_11_class_weights() {
    let _g = serial();
    let lm = LabelMatrix {
        n: 4,
        c: 2,
        values: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
    };
    let w = class_weights(&lm);
    let mut ok = (w[0] - 0.6667).abs() < 1e-4 && (w[1] - 2.0).abs() < 1e-4;
    let mut rng = SplitMix64::new(11);
    for _ in 0..1_000 {
        let c = rng.random_range(2..=8);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..50)).collect();
        let mut values = Vec::new();
        for (a, &k) in counts.iter().enumerate() {
            for _ in 0..k {
                values.extend((0..c).map(|j| if j == a { 1.0 } else { 0.0 }));
            }
        }
        let w = class_weights(&LabelMatrix {
            n: counts.iter().sum(),
            c,
            values,
        });
        let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rarest = *counts.iter().min().unwrap();
        ok &= (0..c).all(|a| (w[a] == top) == (counts[a] == rarest));
    }
    report(
        11,
        "class weights",
        ok,
        &format!("[3,1] -> [{:.4}, {:.4}]; argmax = rarest on 1000 random count vectors", w[0], w[1]),
    );
}
