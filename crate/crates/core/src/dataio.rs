//! Sample tables: CSV input/output, multi-label duplication, min-max
//! normalization, label encoding, class weights and synthetic data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{ClassId, Hierarchy};
use crate::rng::SplitMix64;

pub const DEFAULT_LABEL_COLUMN: &str = "label";
pub const DEFAULT_GROUP_COLUMN: &str = "group";

/// Separator between class names inside one label cell.
pub const LABEL_SEPARATOR: char = ';';

/// Flow cytometry marker panel, in column order.
pub const MARKERS: [&str; 12] = [
    "FS INT",
    "SS INT",
    "CD14-FITC",
    "CD19-PE",
    "CD13-ECD",
    "CD33-PC5.5",
    "CD34-PC7",
    "CD117-APC",
    "CD7-APC700",
    "CD16-APC750",
    "HLA-PB",
    "CD45-KO",
];

/// Average share (percent) of each most-specific population in the bone
/// marrow cohort. HSPC here means HSPC without a finer annotation: the
/// HSPC total of 10.17 minus its myeloid and lymphoid subsets.
pub const CELL_RATIOS: [(&str, f64); 7] = [
    ("T lymphocytes", 61.03),
    ("B lymphocytes", 13.18),
    ("Monocytes", 15.41),
    ("Mast cells", 0.21),
    ("HSPC", 0.54),
    ("Myeloid HSPC", 7.03),
    ("Lymphoid HSPC", 2.60),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    /// Row-major `n x m`.
    pub features: Vec<f64>,
    pub n_features: usize,
    pub groups: Vec<String>,
    /// Most-specific classes per row, ascending; empty for unlabeled rows.
    pub labels: Vec<Vec<ClassId>>,
    pub feature_names: Vec<String>,
}

impl SampleTable {
    pub fn n_rows(&self) -> usize {
        self.groups.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn select_rows(&self, rows: &[usize]) -> SampleTable {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        SampleTable {
            features,
            n_features: self.n_features,
            groups: rows.iter().map(|&r| self.groups[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r].clone()).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Distinct group ids in first-appearance order.
    pub fn distinct_groups(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.groups
            .iter()
            .filter(|g| seen.insert(g.as_str()))
            .cloned()
            .collect()
    }
}

/// Ancestor-closed 0/1 label block, row-major `n x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub n: usize,
    pub c: usize,
    pub values: Vec<f64>,
}

impl LabelMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.c..(i + 1) * self.c]
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.c);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        LabelMatrix {
            n: rows.len(),
            c: self.c,
            values,
        }
    }
}

/// Reads a CSV whose label and group columns must both exist.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    group_column: &str,
    h: &Hierarchy,
) -> Result<SampleTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file, Some(label_column), Some(group_column), h, true)
}

/// Like [`load_csv`] but label and group columns are optional: when absent
/// the rows are unlabeled and share one group.
pub fn load_csv_unlabeled(
    path: impl AsRef<Path>,
    label_column: &str,
    group_column: &str,
    h: &Hierarchy,
) -> Result<SampleTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file, Some(label_column), Some(group_column), h, false)
}

/// Parses CSV text. With `strict`, a missing label or group column is an
/// error; otherwise it is tolerated.
pub fn read_csv<R: Read>(
    reader: R,
    label_column: Option<&str>,
    group_column: Option<&str>,
    h: &Hierarchy,
    strict: bool,
) -> Result<SampleTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_owned()).collect();

    let find = |name: Option<&str>| -> Result<Option<usize>> {
        match name {
            None => Ok(None),
            Some(name) => match headers.iter().position(|c| c == name) {
                Some(i) => Ok(Some(i)),
                None if strict => Err(Error::MissingColumn(name.to_owned())),
                None => Ok(None),
            },
        }
    };
    let label_idx = find(label_column)?;
    let group_idx = find(group_column)?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| Some(i) != label_idx && Some(i) != group_idx)
        .collect();

    let mut table = SampleTable {
        features: Vec::new(),
        n_features: feature_cols.len(),
        groups: Vec::new(),
        labels: Vec::new(),
        feature_names: feature_cols.iter().map(|&i| headers[i].clone()).collect(),
    };

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: headers[c].clone(),
                value: cell.to_owned(),
            })?;
            table.features.push(v);
        }
        table.groups.push(
            group_idx
                .and_then(|g| record.get(g))
                .map(|g| g.trim().to_owned())
                .unwrap_or_default(),
        );
        let labels = match label_idx.and_then(|l| record.get(l)) {
            Some(cell) => parse_label_cell(cell, h)?,
            None => Vec::new(),
        };
        table.labels.push(labels);
    }
    Ok(table)
}

/// Resolves a `;`-separated list of class names and keeps only the
/// most-specific ones.
pub fn parse_label_cell(cell: &str, h: &Hierarchy) -> Result<Vec<ClassId>> {
    let ids = cell
        .split(LABEL_SEPARATOR)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| h.id(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(h.most_specific(&ids))
}

pub fn label_cell(labels: &[ClassId], h: &Hierarchy) -> String {
    labels
        .iter()
        .map(|&a| h.name(a))
        .collect::<Vec<_>>()
        .join(&LABEL_SEPARATOR.to_string())
}

/// Writes features, then the group and label columns.
pub fn write_csv<W: Write>(t: &SampleTable, h: &Hierarchy, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = t.feature_names.iter().map(String::as_str).collect();
    header.push(DEFAULT_GROUP_COLUMN);
    header.push(DEFAULT_LABEL_COLUMN);
    w.write_record(&header)?;
    for i in 0..t.n_rows() {
        let mut rec: Vec<String> = t.row(i).iter().map(|v| format!("{v}")).collect();
        rec.push(t.groups[i].clone());
        rec.push(label_cell(&t.labels[i], h));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Splits every row carrying q > 1 labels into q consecutive single-label
/// copies.
pub fn duplicate_multilabel(t: &SampleTable) -> SampleTable {
    let mut out = SampleTable {
        features: Vec::with_capacity(t.features.len()),
        n_features: t.n_features,
        groups: Vec::with_capacity(t.n_rows()),
        labels: Vec::with_capacity(t.n_rows()),
        feature_names: t.feature_names.clone(),
    };
    for i in 0..t.n_rows() {
        let copies: Vec<Vec<ClassId>> = if t.labels[i].len() > 1 {
            t.labels[i].iter().map(|&a| vec![a]).collect()
        } else {
            vec![t.labels[i].clone()]
        };
        for labels in copies {
            out.features.extend_from_slice(t.row(i));
            out.groups.push(t.groups[i].clone());
            out.labels.push(labels);
        }
    }
    out
}

/// Per-feature `[min, max]` observed on a fitting table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(t: &SampleTable) -> Result<Self> {
        let m = t.n_features;
        if t.n_rows() == 0 {
            return Err(Error::InvalidArgument("cannot normalize an empty table".into()));
        }
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for i in 0..t.n_rows() {
            for (j, &v) in t.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(MinMax { min, max })
    }

    /// Maps `[min_j, max_j]` onto `[0, 1]`; constant columns become 0.
    /// Held-out rows may land outside `[0, 1]`.
    pub fn apply(&self, t: &SampleTable) -> Result<SampleTable> {
        if self.min.len() != t.n_features {
            return Err(Error::Shape(format!(
                "normalization fitted on {} features, table has {}",
                self.min.len(),
                t.n_features
            )));
        }
        let m = t.n_features;
        let mut out = t.clone();
        for (k, v) in out.features.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: k / m, col: k % m });
            }
            let j = k % m;
            let span = self.max[j] - self.min[j];
            *v = if span > 0.0 { (*v - self.min[j]) / span } else { 0.0 };
        }
        Ok(out)
    }
}

/// Fits min-max statistics on `t` and applies them to it.
pub fn normalize_minmax(t: &SampleTable) -> Result<(SampleTable, MinMax)> {
    let stats = MinMax::fit(t)?;
    let out = stats.apply(t)?;
    Ok((out, stats))
}

/// One row per sample with a 1 at its label and every ancestor.
pub fn encode_labels(t: &SampleTable, h: &Hierarchy) -> Result<LabelMatrix> {
    let c = h.len();
    let mut values = vec![0.0; t.n_rows() * c];
    for (i, labels) in t.labels.iter().enumerate() {
        match labels.as_slice() {
            [] => return Err(Error::EmptyLabel(i)),
            [a] => {
                for b in h.ancestors(*a) {
                    values[i * c + b.0] = 1.0;
                }
            }
            _ => return Err(Error::MultiLabel(i)),
        }
    }
    Ok(LabelMatrix {
        n: t.n_rows(),
        c,
        values,
    })
}

/// One-hot encoding on the most-specific label only, for the flat baseline.
pub fn encode_flat_labels(t: &SampleTable, h: &Hierarchy) -> Result<LabelMatrix> {
    let c = h.len();
    let mut values = vec![0.0; t.n_rows() * c];
    for (i, labels) in t.labels.iter().enumerate() {
        match labels.as_slice() {
            [] => return Err(Error::EmptyLabel(i)),
            [a] => values[i * c + a.0] = 1.0,
            _ => return Err(Error::MultiLabel(i)),
        }
    }
    Ok(LabelMatrix {
        n: t.n_rows(),
        c,
        values,
    })
}

/// `w_A = n / (C * n_A)`, where `n_A` counts rows positive for A. Classes
/// with no positive row get weight 0.
pub fn class_weights(lm: &LabelMatrix) -> Vec<f64> {
    let mut counts = vec![0usize; lm.c];
    for row in lm.values.chunks(lm.c) {
        for (cnt, &v) in counts.iter_mut().zip(row) {
            if v != 0.0 {
                *cnt += 1;
            }
        }
    }
    counts
        .iter()
        .enumerate()
        .map(|(a, &na)| {
            if na == 0 {
                log::warn!("class {a} has no positive rows; weight set to 0");
                0.0
            } else {
                lm.n as f64 / (lm.c as f64 * na as f64)
            }
        })
        .collect()
}

/// Splits `n` rows across classes proportionally to `ratios` with
/// largest-remainder rounding (ties to the earlier class), so counts sum to
/// exactly `n`.
pub fn proportional_counts(ratios: &[(ClassId, f64)], n: usize) -> BTreeMap<ClassId, usize> {
    let total: f64 = ratios.iter().map(|(_, r)| r).sum();
    let exact: Vec<f64> = ratios.iter().map(|(_, r)| r / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    ratios.iter().map(|(a, _)| *a).zip(counts).collect()
}

/// [`CELL_RATIOS`] resolved against `h` and scaled to `n` rows.
pub fn cell_ratio_counts(h: &Hierarchy, n: usize) -> Result<BTreeMap<ClassId, usize>> {
    let ratios = CELL_RATIOS
        .iter()
        .map(|(name, r)| Ok((h.id(name)?, *r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(proportional_counts(&ratios, n))
}

/// Default noise scale of synthetic clusters: an eighth of the default
/// top-level separation of 4, so sibling clusters barely overlap.
pub const DEFAULT_SYNTH_NOISE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub counts: BTreeMap<ClassId, usize>,
    pub separation: f64,
    /// Standard deviation of the isotropic noise around each class mean.
    pub noise: f64,
    pub seed: u64,
    pub n_features: usize,
    pub n_groups: usize,
}

impl SynthConfig {
    pub fn new(counts: BTreeMap<ClassId, usize>, separation: f64, seed: u64) -> Self {
        SynthConfig {
            counts,
            separation,
            noise: DEFAULT_SYNTH_NOISE,
            seed,
            n_features: MARKERS.len(),
            n_groups: 30,
        }
    }
}

/// Cluster centres: top-level classes sit `separation` apart; each subclass
/// sits `separation / 2` from its parent along its own direction.
pub fn class_means(h: &Hierarchy, separation: f64, n_features: usize, seed: u64) -> Vec<Vec<f64>> {
    let m = n_features;
    let mut rng = SplitMix64::derive(seed, &[0x6d65616e]);
    let directions: Vec<Vec<f64>> = h
        .ids()
        .map(|a| {
            if a.0 < m {
                let mut e = vec![0.0; m];
                e[a.0] = 1.0;
                e
            } else {
                let v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            }
        })
        .collect();

    let mut means = vec![vec![0.0; m]; h.len()];
    // parents come before children in reversed postorder
    for &a in h.postorder().iter().rev() {
        means[a.0] = match h.parent(a) {
            None => directions[a.0]
                .iter()
                .map(|d| d * separation / std::f64::consts::SQRT_2)
                .collect(),
            Some(p) => means[p.0]
                .iter()
                .zip(&directions[a.0])
                .map(|(mu, d)| mu + d * separation / 2.0)
                .collect(),
        };
    }
    means
}

/// Draws isotropic Gaussian clusters of spread `noise`, one per requested class,
/// shuffles the rows and deals them round-robin to `n_groups` pseudo-patients.
pub fn synth_generate(h: &Hierarchy, cfg: &SynthConfig) -> Result<SampleTable> {
    let total: usize = cfg.counts.values().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one row".into()));
    }
    if !(cfg.separation.is_finite() && cfg.separation > 0.0 && cfg.noise.is_finite() && cfg.noise > 0.0) {
        return Err(Error::InvalidArgument("separation and noise must be positive".into()));
    }
    if cfg.n_features == 0 || cfg.n_groups == 0 {
        return Err(Error::InvalidArgument("need at least one feature and one group".into()));
    }
    if let Some(a) = cfg.counts.keys().find(|a| a.0 >= h.len()) {
        return Err(Error::UnknownClass(a.to_string()));
    }

    let m = cfg.n_features;
    let means = class_means(h, cfg.separation, m, cfg.seed);
    let mut rng = SplitMix64::derive(cfg.seed, &[0x73616d70]);
    let mut rows: Vec<(ClassId, Vec<f64>)> = Vec::with_capacity(total);
    for (&a, &count) in &cfg.counts {
        for _ in 0..count {
            let x: Vec<f64> = means[a.0]
                .iter()
                .map(|mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + cfg.noise * z
                })
                .collect();
            rows.push((a, x));
        }
    }
    rows.shuffle(&mut rng);

    let feature_names = if m == MARKERS.len() {
        MARKERS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..m).map(|j| format!("f{j}")).collect()
    };
    let width = cfg.n_groups.to_string().len().max(2);
    let mut table = SampleTable {
        features: Vec::with_capacity(total * m),
        n_features: m,
        groups: Vec::with_capacity(total),
        labels: Vec::with_capacity(total),
        feature_names,
    };
    for (r, (a, x)) in rows.into_iter().enumerate() {
        table.features.extend(x);
        table.groups.push(format!("P{:0width$}", r % cfg.n_groups + 1));
        table.labels.push(vec![a]);
    }
    Ok(table)
}
