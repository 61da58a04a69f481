//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the library's own algorithms; they work from parent links, raw
//! arrays and explicit loops.
#![allow(dead_code)]

use hiergat::gat::{Activation, Merge, ModelParams};
use hiergat::rng::SplitMix64;
use hiergat::Hierarchy;
use rand::Rng;

/// Random forest of `n` classes: node `i` hangs under an earlier node or is
/// a root.
pub fn random_parents(rng: &mut SplitMix64, n: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|i| (i > 0 && rng.random_bool(0.7)).then(|| rng.random_range(0..i)))
        .collect()
}

pub fn hierarchy_from(parents: &[Option<usize>]) -> Hierarchy {
    let names = (0..parents.len()).map(|i| format!("c{i}")).collect();
    Hierarchy::from_parent_links(names, parents.to_vec()).unwrap()
}

/// True when `b` lies in the subtree rooted at `a` (including `a`).
pub fn in_subtree(parents: &[Option<usize>], a: usize, b: usize) -> bool {
    let mut cur = Some(b);
    while let Some(c) = cur {
        if c == a {
            return true;
        }
        cur = parents[c];
    }
    false
}

pub fn subtree(parents: &[Option<usize>], a: usize) -> Vec<usize> {
    (0..parents.len()).filter(|&b| in_subtree(parents, a, b)).collect()
}

pub fn ancestors_inclusive(parents: &[Option<usize>], a: usize) -> Vec<usize> {
    (0..parents.len()).filter(|&b| in_subtree(parents, b, a)).collect()
}

pub fn mcm_oracle(parents: &[Option<usize>], raw: &[f64]) -> Vec<f64> {
    (0..parents.len())
        .map(|a| {
            subtree(parents, a)
                .into_iter()
                .map(|b| raw[b])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn clamp_log(x: f64) -> f64 {
    x.clamp(1e-12, 1.0 - 1e-12).ln()
}

/// Per-class loss terms written straight from the formula.
pub fn mcloss_terms_oracle(parents: &[Option<usize>], raw: &[f64], y: &[f64]) -> Vec<f64> {
    let mcm = mcm_oracle(parents, raw);
    (0..parents.len())
        .map(|a| {
            let mut pos = f64::NEG_INFINITY;
            for b in subtree(parents, a) {
                pos = pos.max(y[b] * raw[b]);
            }
            -y[a] * clamp_log(pos) - (1.0 - y[a]) * clamp_log(1.0 - mcm[a])
        })
        .collect()
}

pub fn violations_oracle(parents: &[Option<usize>], scores: &[f64]) -> usize {
    let c = parents.len();
    let mut count = 0;
    for row in scores.chunks(c) {
        for a in 0..c {
            for b in 0..c {
                if a != b && in_subtree(parents, a, b) && row[a] < row[b] - 1e-12 {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Every `(i, j)` with `j` a proper descendant of `i`, `raw[j]` equal to the
/// subtree max of `i`, and `raw[i] < raw[j]`.
pub fn delegation_oracle(parents: &[Option<usize>], raw: &[f64]) -> Vec<(usize, usize)> {
    let mcm = mcm_oracle(parents, raw);
    let mut out = Vec::new();
    for i in 0..parents.len() {
        for j in 0..parents.len() {
            if i != j && in_subtree(parents, i, j) && raw[j] == mcm[i] && raw[i] < raw[j] {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn knn_oracle(x: &[f64], m: usize, k: usize) -> Vec<Vec<usize>> {
    let n = x.len() / m;
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = (0..m).map(|t| (x[i * m + t] - x[j * m + t]).powi(2)).sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            d.into_iter().take(k.min(n - 1)).map(|(_, j)| j).collect()
        })
        .collect()
}

/// `(hp, hr, hf)` by explicit membership tests over class-index lists.
pub fn metrics_oracle(alpha: &[Vec<usize>], beta: &[Vec<usize>]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut np = 0.0;
    let mut nt = 0.0;
    for (a, b) in alpha.iter().zip(beta) {
        for x in a {
            if b.contains(x) {
                inter += 1.0;
            }
        }
        np += a.len() as f64;
        nt += b.len() as f64;
    }
    let hp = inter / np;
    let hr = inter / nt;
    let hf = if hp + hr > 0.0 { 2.0 * hp * hr / (hp + hr) } else { 0.0 };
    (hp, hr, hf)
}

/// Dense evaluation-mode forward pass with explicit loops.
pub fn gat_reference(p: &ModelParams, x: &[f64], n: usize, lists: &[Vec<usize>]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for layer in &p.layers {
        let (din, d) = (layer.in_dim, layer.out_dim);
        let mut heads_out: Vec<Vec<f64>> = Vec::new();
        for head in &layer.heads {
            let w = head.weight.data();
            let a = head.attention.data();
            let mut z = vec![0.0; n * d];
            for i in 0..n {
                for o in 0..d {
                    let mut s = 0.0;
                    for t in 0..din {
                        s += cur[i * din + t] * w[t * d + o];
                    }
                    z[i * d + o] = s;
                }
            }
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let mut hood = Vec::new();
                if p.self_loop {
                    hood.push(i);
                }
                hood.extend_from_slice(&lists[i]);
                let logits: Vec<f64> = hood
                    .iter()
                    .map(|&j| {
                        let mut e = 0.0;
                        for o in 0..d {
                            e += a[o] * z[i * d + o] + a[d + o] * z[j * d + o];
                        }
                        if e < 0.0 {
                            e * p.leaky_slope
                        } else {
                            e
                        }
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let total: f64 = ex.iter().sum();
                for (&j, e) in hood.iter().zip(&ex) {
                    for o in 0..d {
                        out[i * d + o] += e / total * z[j * d + o];
                    }
                }
            }
            heads_out.push(out);
        }
        let k = heads_out.len();
        let width = match layer.merge {
            Merge::Concat => d * k,
            Merge::Average => d,
        };
        let mut merged = vec![0.0; n * width];
        for i in 0..n {
            for (hk, ho) in heads_out.iter().enumerate() {
                for o in 0..d {
                    match layer.merge {
                        Merge::Concat => merged[i * width + hk * d + o] = ho[i * d + o],
                        Merge::Average => merged[i * width + o] += ho[i * d + o] / k as f64,
                    }
                }
            }
        }
        for v in merged.iter_mut() {
            *v = match layer.activation {
                Activation::Relu => v.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-*v).exp()),
            };
        }
        cur = merged;
    }
    cur
}

/// Random k-regular neighbor lists without self references.
pub fn random_lists(rng: &mut SplitMix64, n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut l = Vec::new();
            while l.len() < k.min(n - 1) {
                let j = rng.random_range(0..n);
                if j != i && !l.contains(&j) {
                    l.push(j);
                }
            }
            l
        })
        .collect()
}

pub fn uniform(rng: &mut SplitMix64, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub mod gradcheck {
    use hiergat::autodiff::{Mode, Tape, Tensor, Var};
    use hiergat::rng::SplitMix64;
    use rand::Rng;

    pub const STEP: f64 = 1e-5;
    pub const REL_TOL: f64 = 1e-4;

    #[derive(Debug, Default)]
    pub struct CheckStats {
        pub compared: usize,
        pub skipped_kinks: usize,
        pub worst: f64,
    }

    /// Sum of `v` weighted by a fixed random matrix, so every output entry
    /// gets a distinct cotangent.
    pub fn reduce(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let shape = tape.value(v).shape().to_vec();
        let len = tape.value(v).len();
        let mut rng = SplitMix64::new(seed);
        let w = Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = tape.constant(w);
        let p = tape.mul(v, w).unwrap();
        tape.sum(p)
    }

    fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new(Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    }

    /// Compares reverse-mode gradients of the scalar `f` against central
    /// differences. Coordinates whose one-sided slopes disagree sit on a
    /// kink and are skipped.
    pub fn check<F>(name: &str, inputs: &[Tensor], f: F) -> CheckStats
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new(Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let f0 = tape.value(out).item();
        let grads = tape.backward(out).unwrap();
        let mut stats = CheckStats::default();
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(&tape, vars[k]);
            for idx in 0..input.len() {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[idx] += STEP;
                let up = eval(&f, &shifted);
                shifted[k].data_mut()[idx] -= 2.0 * STEP;
                let down = eval(&f, &shifted);
                let right = (up - f0) / STEP;
                let left = (f0 - down) / STEP;
                let scale = right.abs().max(left.abs()).max(1e-6);
                if (right - left).abs() > 1e-2 * scale {
                    stats.skipped_kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic.data()[idx];
                let denom = a.abs().max(numeric.abs());
                let err = if denom < 1e-7 { 0.0 } else { (a - numeric).abs() / denom };
                assert!(
                    err <= REL_TOL,
                    "{name}: input {k} entry {idx}: analytic {a} vs numeric {numeric} (rel {err})"
                );
                stats.worst = stats.worst.max(err);
                stats.compared += 1;
            }
        }
        stats
    }
}

pub mod suite;
