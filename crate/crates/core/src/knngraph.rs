//! Exact Euclidean k-nearest-neighbor graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"KNN1";

/// Directed k-NN lists. Row `i` holds the `k` nearest other nodes of `i`,
/// ascending by `(distance, index)`; a node never lists itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborGraph {
    /// Builds a graph from explicit lists, all of length `k`.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        let mut neighbors = Vec::with_capacity(n * k);
        for (i, l) in lists.into_iter().enumerate() {
            if l.len() != k {
                return Err(Error::Shape(format!("node {i} has {} neighbors, expected {k}", l.len())));
            }
            if l.iter().any(|&j| j >= n || j == i) {
                return Err(Error::InvalidArgument(format!("bad neighbor of node {i}")));
            }
            if l.iter().collect::<BTreeSet<_>>().len() != k {
                return Err(Error::InvalidArgument(format!("duplicate neighbor of node {i}")));
            }
            neighbors.extend(l);
        }
        Ok(NeighborGraph { n, k, neighbors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Writes the `KNN1` cache: magic, then `n`, `k` and the row-major
    /// neighbor indices, all as little-endian `u32`.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        let to_u32 = |x: usize| -> Result<u32> {
            u32::try_from(x).map_err(|_| Error::InvalidArgument(format!("{x} does not fit in u32")))
        };
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&to_u32(self.n)?.to_le_bytes())?;
        w.write_all(&to_u32(self.k)?.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.neighbors.len() * 4);
        for &j in &self.neighbors {
            buf.extend_from_slice(&to_u32(j)?.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::format("KNN1", "missing header"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (n, k) = (word(4), word(8));
        if bytes.len() != 12 + 4 * n * k {
            return Err(Error::format(
                "KNN1",
                format!("expected {} index bytes, found {}", 4 * n * k, bytes.len() - 12),
            ));
        }
        let lists = (0..n)
            .map(|i| (0..k).map(|c| word(12 + 4 * (i * k + c))).collect())
            .collect();
        Self::from_lists(lists).map_err(|e| Error::format("KNN1", e.to_string()))
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact k-NN over the rows of a row-major `n x m` matrix. `k >= n` is
/// clamped to `n - 1`. Ties in distance go to the lower index.
pub fn build_knn(features: &[f64], m: usize, k: usize) -> Result<NeighborGraph> {
    if m == 0 || !features.len().is_multiple_of(m) {
        return Err(Error::Shape(format!("{} values do not form rows of {m}", features.len())));
    }
    let n = features.len() / m;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("k-NN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if let Some(pos) = features.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite { row: pos / m, col: pos % m });
    }
    let k_eff = if k >= n {
        log::warn!("k = {k} with {n} nodes; using k = {}", n - 1);
        n - 1
    } else {
        k
    };

    let mut neighbors = vec![0usize; n * k_eff];
    neighbors
        .par_chunks_mut(k_eff)
        .enumerate()
        .for_each(|(i, out)| {
            let xi = &features[i * m..(i + 1) * m];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(xi, &features[j * m..(j + 1) * m]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k_eff < cand.len() {
                cand.select_nth_unstable_by(k_eff - 1, cmp);
                cand.truncate(k_eff);
            }
            cand.sort_unstable_by(cmp);
            for (o, (_, j)) in out.iter_mut().zip(cand) {
                *o = j;
            }
        });
    Ok(NeighborGraph {
        n,
        k: k_eff,
        neighbors,
    })
}

/// Degree -> node count over the undirected graph obtained by symmetrizing
/// the k-NN lists.
pub fn degree_histogram(g: &NeighborGraph) -> BTreeMap<usize, usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); g.n()];
    for i in 0..g.n() {
        for &j in g.neighbors(i) {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut hist = BTreeMap::new();
    for a in adj {
        *hist.entry(a.len()).or_insert(0) += 1;
    }
    hist
}
