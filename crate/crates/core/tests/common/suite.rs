//! Gradient checks for every tape op and for the full training loss.

use std::sync::Arc;

use hiergat::autodiff::{Segments, Tensor};
use hiergat::constraint::{bce_on_tape, mcloss_on_tape};
use hiergat::gat::{forward_on_tape, init_params, AttentionEdges, DropoutCtx, ModelSpec, ParamVars};
use hiergat::rng::SplitMix64;
use hiergat::Hierarchy;
use rand::Rng;

use super::gradcheck::{check, reduce, CheckStats};
use super::{random_lists, uniform};

fn mat(rng: &mut SplitMix64, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c, lo, hi)).unwrap()
}

/// Segment ids for `n` nodes with 1..=3 items each, sorted.
fn segments(rng: &mut SplitMix64, n: usize) -> Arc<Segments> {
    let mut ids = Vec::new();
    for s in 0..n {
        for _ in 0..rng.random_range(1..=3) {
            ids.push(s);
        }
    }
    Arc::new(Segments::from_sorted_ids(ids, n).unwrap())
}

pub fn op_checks(seed: u64) -> Vec<(&'static str, CheckStats)> {
    let mut rng = SplitMix64::new(seed);
    let n = rng.random_range(2..=10);
    let m = rng.random_range(1..=4);
    let mut out = Vec::new();

    let a = mat(&mut rng, n, m, -1.0, 1.0);
    let b = mat(&mut rng, m, 3, -1.0, 1.0);
    out.push(("matmul", check("matmul", &[a.clone(), b], |t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        reduce(t, p, 1)
    })));
    let b = mat(&mut rng, n, m, -1.0, 1.0);
    out.push(("add", check("add", &[a.clone(), b.clone()], |t, v| {
        let p = t.add(v[0], v[1]).unwrap();
        reduce(t, p, 2)
    })));
    out.push(("mul", check("mul", &[a.clone(), b.clone()], |t, v| {
        let p = t.mul(v[0], v[1]).unwrap();
        reduce(t, p, 3)
    })));
    out.push(("scalar_mul", check("scalar_mul", std::slice::from_ref(&a), |t, v| {
        let p = t.scalar_mul(v[0], -1.7);
        reduce(t, p, 4)
    })));
    out.push(("add_scalar", check("add_scalar", std::slice::from_ref(&a), |t, v| {
        let p = t.add_scalar(v[0], 0.3);
        let q = t.mul(p, p).unwrap();
        reduce(t, q, 5)
    })));
    out.push(("concat_last_axis", check("concat_last_axis", &[a.clone(), b.clone()], |t, v| {
        let p = t.concat_last_axis(&[v[0], v[1], v[0]]).unwrap();
        reduce(t, p, 6)
    })));
    let wide = mat(&mut rng, n, 5, -1.0, 1.0);
    out.push(("slice_cols", check("slice_cols", &[wide], |t, v| {
        let p = t.slice_cols(v[0], 1, 3).unwrap();
        let q = t.mul(p, p).unwrap();
        reduce(t, q, 7)
    })));
    out.push(("mean_over_list", check("mean_over_list", &[a.clone(), b.clone()], |t, v| {
        let p = t.mean_over_list(&[v[0], v[1], v[1]]).unwrap();
        reduce(t, p, 8)
    })));
    out.push(("leaky_relu", check("leaky_relu", std::slice::from_ref(&a), |t, v| {
        let p = t.leaky_relu(v[0], 0.2);
        reduce(t, p, 9)
    })));
    out.push(("relu", check("relu", std::slice::from_ref(&a), |t, v| {
        let p = t.relu(v[0]);
        reduce(t, p, 10)
    })));
    out.push(("sigmoid", check("sigmoid", &[mat(&mut rng, n, m, -4.0, 4.0)], |t, v| {
        let p = t.sigmoid(v[0]);
        reduce(t, p, 11)
    })));
    out.push(("log", check("log", &[mat(&mut rng, n, m, 0.2, 2.0)], |t, v| {
        let p = t.log(v[0]);
        reduce(t, p, 12)
    })));
    out.push(("clamp", check("clamp", &[mat(&mut rng, n, m, -0.5, 1.5)], |t, v| {
        let p = t.clamp(v[0], 0.0, 1.0);
        reduce(t, p, 13)
    })));
    let idx: Arc<Vec<usize>> = Arc::new((0..n + 3).map(|_| rng.random_range(0..n)).collect());
    out.push(("gather_rows", check("gather_rows", std::slice::from_ref(&a), |t, v| {
        let p = t.gather_rows(v[0], idx.clone()).unwrap();
        reduce(t, p, 14)
    })));
    let seg = segments(&mut rng, n);
    let e = seg.num_items();
    let logits = mat(&mut rng, e, 1, -2.0, 2.0);
    out.push(("neighborhood_softmax", check("neighborhood_softmax", std::slice::from_ref(&logits), |t, v| {
        let p = t.neighborhood_softmax(v[0], seg.clone()).unwrap();
        reduce(t, p, 15)
    })));
    let src: Arc<Vec<usize>> = Arc::new((0..e).map(|_| rng.random_range(0..n)).collect());
    let values = mat(&mut rng, n, 3, -1.0, 1.0);
    out.push(("segment_weighted_sum", check("segment_weighted_sum", &[logits, values], |t, v| {
        let p = t.segment_weighted_sum(v[0], v[1], src.clone(), seg.clone()).unwrap();
        reduce(t, p, 16)
    })));
    out.push(("dropout", check("dropout", std::slice::from_ref(&a), |t, v| {
        let mut r = SplitMix64::new(99);
        let p = t.dropout(v[0], 0.4, &mut r).unwrap();
        reduce(t, p, 17)
    })));
    let cols = mat(&mut rng, n, 4, 0.0, 1.0);
    let subsets = vec![vec![0, 1, 2], vec![1], vec![2, 3], vec![0, 3]];
    out.push(("elementwise_max_with_argmax", check("elementwise_max_with_argmax", &[cols], |t, v| {
        let p = t.elementwise_max_with_argmax(v[0], &subsets).unwrap();
        reduce(t, p, 18)
    })));
    out.push(("sum", check("sum", &[a], |t, v| {
        let p = t.mul(v[0], v[0]).unwrap();
        t.sum(p)
    })));
    out
}

/// Gradient of the weighted training loss of a two-layer model with
/// dropout, with respect to every parameter and the input features.
pub fn end_to_end_check(seed: u64, hierarchical: bool) -> CheckStats {
    let h = Hierarchy::cell_populations();
    let c = h.len();
    let mut rng = SplitMix64::new(seed);
    let n = rng.random_range(4..=10);
    let m = rng.random_range(2..=4);
    let spec = ModelSpec::two_layer(m, 3, c, 2);
    let params = init_params(&spec, seed).unwrap();
    let edges = AttentionEdges::from_lists(&random_lists(&mut rng, n, 3), true).unwrap();
    let x = Tensor::matrix(n, m, uniform(&mut rng, n * m, 0.0, 1.0)).unwrap();

    let mut labels = Vec::with_capacity(n * c);
    for _ in 0..n {
        let leaf = hiergat::ClassId(rng.random_range(0..c));
        let closure = h.ancestor_closure([&leaf]);
        let flat = !hierarchical;
        labels.extend(h.ids().map(|a| {
            let on = if flat { a == leaf } else { closure.contains(&a) };
            if on {
                1.0
            } else {
                0.0
            }
        }));
    }
    let weights = uniform(&mut rng, c, 0.5, 2.0);
    let rows: Arc<Vec<usize>> = Arc::new((0..n).filter(|i| i % 3 != 2).collect());
    let train_labels: Vec<f64> = rows.iter().flat_map(|&r| labels[r * c..(r + 1) * c].to_vec()).collect();

    let mut inputs = vec![x];
    for layer in &params.layers {
        for head in &layer.heads {
            inputs.push(head.weight.clone());
            inputs.push(head.attention.clone());
        }
    }
    let dropout = DropoutCtx {
        rate: 0.4,
        seed,
        epoch: 3,
    };
    check("end-to-end loss", &inputs, |t, v| {
        let mut it = v[1..].iter();
        let vars = ParamVars {
            layers: params
                .layers
                .iter()
                .map(|l| l.heads.iter().map(|_| (*it.next().unwrap(), *it.next().unwrap())).collect())
                .collect(),
        };
        let raw = forward_on_tape(t, &params, &vars, v[0], &edges, Some(dropout)).unwrap();
        let sel = t.gather_rows(raw, rows.clone()).unwrap();
        let norm = rows.len() as f64;
        if hierarchical {
            mcloss_on_tape(t, &h, sel, &train_labels, &weights, norm).unwrap()
        } else {
            bce_on_tape(t, sel, &train_labels, &weights, norm).unwrap()
        }
    })
}

