//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! The tape records exactly the operations the attention model and the
//! constrained loss need. Every operation appends a node after its inputs, so
//! the node order is a topological order and [`Tape::backward`] walks it in
//! reverse.
//!
//! Max-type operations remember the winning input and route the whole
//! incoming gradient there; ties go to the lowest index.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    /// An `n x 1` matrix.
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len(), 1],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn debug_check_finite(&self, op: &str) {
        debug_assert!(
            self.data.iter().all(|x| x.is_finite()),
            "{op} produced a non-finite value"
        );
    }
}

/// Contiguous groups of edges sharing a destination, from sorted segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    ids: Vec<usize>,
    offsets: Vec<usize>,
}

impl Segments {
    /// `ids` must be non-decreasing and below `num_segments`; empty segments
    /// are allowed.
    pub fn from_sorted_ids(ids: Vec<usize>, num_segments: usize) -> Result<Self> {
        if ids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("segment ids must be sorted".into()));
        }
        if ids.last().is_some_and(|&s| s >= num_segments) {
            return Err(Error::InvalidArgument("segment id out of range".into()));
        }
        let mut offsets = vec![0usize; num_segments + 1];
        for &s in &ids {
            offsets[s + 1] += 1;
        }
        for s in 0..num_segments {
            offsets[s + 1] += offsets[s];
        }
        Ok(Segments { ids, offsets })
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_items(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Item range of segment `s`.
    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Mean(Vec<Var>),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        src: Arc<Vec<usize>>,
        segments: Arc<Segments>,
    },
    Dropout(Var, Vec<f64>),
    /// Output column k holds the max of the input columns in subset k; the
    /// winning input column of each output entry is stored row-major.
    SubsetMax(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Create leaves with [`Tape::param`] (differentiated)
/// or [`Tape::constant`] (not), combine them with the op methods, then call
/// [`Tape::backward`] on a scalar.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape.clone()))
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let out = matmul_nn(&self.value(a).data, &self.value(b).data, n, k, m);
        let t = Tensor::matrix(n, m, out)?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
        };
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        };
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let g = self.grad_flag(&[a]);
        self.push(t, Op::ScalarMul(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let g = self.grad_flag(&[a]);
        self.push(t, Op::AddScalar(a), g)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Shape(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let g = self.grad_flag(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), g))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + width > cols {
            return Err(Error::Shape(format!("columns {start}..{} of {cols}", start + width)));
        }
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let t = Tensor::matrix(rows, width, data)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(t, Op::SliceCols(a, start), g))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_over_list(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("mean of nothing".into()));
        }
        for &p in &parts[1..] {
            self.same_shape(parts[0], p, "mean")?;
        }
        let k = parts.len() as f64;
        let mut data = vec![0.0; self.value(parts[0]).len()];
        for &p in parts {
            for (d, x) in data.iter_mut().zip(&self.value(p).data) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= k);
        let t = Tensor {
            shape: self.value(parts[0]).shape.clone(),
            data,
        };
        let g = self.grad_flag(parts);
        Ok(self.push(t, Op::Mean(parts.to_vec()), g))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let g = self.grad_flag(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let g = self.grad_flag(&[a]);
        self.push(t, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let g = self.grad_flag(&[a]);
        self.push(t, Op::Sigmoid(a), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        t.debug_check_finite("log");
        let g = self.grad_flag(&[a]);
        self.push(t, Op::Log(a), g)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let g = self.grad_flag(&[a]);
        self.push(t, Op::Clamp(a, lo, hi), g)
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.value(a).dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} >= {n}")));
        }
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(index.len(), c, data)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(t, Op::GatherRows(a, index), g))
    }

    /// Softmax over the rows of each segment, independently per column, with
    /// the segment max subtracted first.
    pub fn neighborhood_softmax(&mut self, logits: Var, segments: Arc<Segments>) -> Result<Var> {
        let (e, c) = self.value(logits).dims2()?;
        if e != segments.num_items() {
            return Err(Error::Shape(format!(
                "softmax over {e} logits with {} segment ids",
                segments.num_items()
            )));
        }
        let x = &self.value(logits).data;
        let mut out = vec![0.0; e * c];
        for s in 0..segments.num_segments() {
            let range = segments.range(s);
            if range.is_empty() {
                continue;
            }
            for col in 0..c {
                let mx = range
                    .clone()
                    .map(|i| x[i * c + col])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in range.clone() {
                    let v = (x[i * c + col] - mx).exp();
                    out[i * c + col] = v;
                    total += v;
                }
                for i in range.clone() {
                    out[i * c + col] /= total;
                }
            }
        }
        let t = Tensor::matrix(e, c, out)?;
        let g = self.grad_flag(&[logits]);
        Ok(self.push(t, Op::SegmentSoftmax(logits, segments), g))
    }

    /// `out[s] = sum over items e of segment s of weights[e] * values[src[e]]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        src: Arc<Vec<usize>>,
        segments: Arc<Segments>,
    ) -> Result<Var> {
        let (e, wc) = self.value(weights).dims2()?;
        let (n, d) = self.value(values).dims2()?;
        if wc != 1 || e != src.len() || e != segments.num_items() {
            return Err(Error::Shape(format!(
                "segment sum: weights {e}x{wc}, {} sources, {} segment ids",
                src.len(),
                segments.num_items()
            )));
        }
        if let Some(&bad) = src.iter().find(|&&j| j >= n) {
            return Err(Error::Shape(format!("source index {bad} >= {n}")));
        }
        let w = &self.value(weights).data;
        let v = &self.value(values).data;
        let s_count = segments.num_segments();
        let mut out = vec![0.0; s_count * d];
        out.par_chunks_mut(d.max(1)).enumerate().for_each(|(s, row)| {
            for i in segments.range(s) {
                let j = src[i];
                let wi = w[i];
                for (o, x) in row.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o += wi * x;
                }
            }
        });
        let t = Tensor::matrix(s_count, d, out)?;
        let g = self.grad_flag(&[weights, values]);
        Ok(self.push(
            t,
            Op::SegmentWeightedSum {
                weights,
                values,
                src,
                segments,
            },
            g,
        ))
    }

    /// Inverted dropout. In [`Mode::Eval`], or with `p == 0`, returns `a`
    /// itself.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut SplitMix64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { scale })
            .collect();
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        let g = self.grad_flag(&[a]);
        Ok(self.push(t, Op::Dropout(a, mask), g))
    }

    /// For each row, output column k is the maximum of the input columns
    /// listed in `subsets[k]`. Ties resolve to the lowest listed column when
    /// subsets are sorted.
    pub fn elementwise_max_with_argmax(&mut self, a: Var, subsets: &[Vec<usize>]) -> Result<Var> {
        let (n, c) = self.value(a).dims2()?;
        for s in subsets {
            if s.is_empty() || s.iter().any(|&j| j >= c) {
                return Err(Error::Shape("max over an empty or out-of-range subset".into()));
            }
        }
        let k = subsets.len();
        let x = &self.value(a).data;
        let mut out = vec![0.0; n * k];
        let mut arg = vec![0usize; n * k];
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            for (j, s) in subsets.iter().enumerate() {
                let mut best = s[0];
                for &b in &s[1..] {
                    if row[b] > row[best] || (row[b] == row[best] && b < best) {
                        best = b;
                    }
                }
                out[r * k + j] = row[best];
                arg[r * k + j] = best;
            }
        }
        let t = Tensor::matrix(n, k, out)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(t, Op::SubsetMax(a, arg), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data.iter().sum());
        let g = self.grad_flag(&[a]);
        self.push(t, Op::Sum(a), g)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs
    /// one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor {
            shape: self.value(loss).shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.value(v).shape.clone(),
            data,
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).cols();
                if self.nodes[a.0].needs_grad {
                    let da = matmul_nt(gd, &self.value(*b).data, n, m, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.nodes[b.0].needs_grad {
                    let db = matmul_tn(&self.value(*a).data, gd, n, k, m);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (x, y) = (&self.value(*a).data, &self.value(*b).data);
                let da = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(x).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::ScalarMul(a, s) => {
                let da = gd.iter().map(|g| g * s).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(grads, p, self.like(p, dp));
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let width = node.value.cols();
                let mut da = vec![0.0; self.value(*a).len()];
                for (r, gr) in gd.chunks(width.max(1)).enumerate() {
                    da[r * cols + start..r * cols + start + width].copy_from_slice(gr);
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Mean(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    let dp = gd.iter().map(|g| g / k).collect();
                    self.accumulate(grads, p, self.like(p, dp));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(*a).data;
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let da = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Log(a) => {
                let x = &self.value(*a).data;
                let da = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.value(*a).data;
                let da = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x < *lo || x > *hi { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::GatherRows(a, index) => {
                let c = self.value(*a).cols();
                let mut da = vec![0.0; self.value(*a).len()];
                for (i, &src) in index.iter().enumerate() {
                    for (d, g) in da[src * c..(src + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                        *d += g;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = &node.value.data;
                let c = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for s in 0..segments.num_segments() {
                    let range = segments.range(s);
                    for col in 0..c {
                        let dot: f64 = range.clone().map(|i| gd[i * c + col] * y[i * c + col]).sum();
                        for i in range.clone() {
                            da[i * c + col] = y[i * c + col] * (gd[i * c + col] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::SegmentWeightedSum {
                weights,
                values,
                src,
                segments,
            } => {
                let v = &self.value(*values).data;
                let d = self.value(*values).cols();
                let w = &self.value(*weights).data;
                if self.nodes[weights.0].needs_grad {
                    let mut dw = vec![0.0; w.len()];
                    for s in 0..segments.num_segments() {
                        let gs = &gd[s * d..(s + 1) * d];
                        for i in segments.range(s) {
                            let j = src[i];
                            dw[i] = gs.iter().zip(&v[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *weights, self.like(*weights, dw));
                }
                if self.nodes[values.0].needs_grad {
                    let mut dv = vec![0.0; v.len()];
                    for s in 0..segments.num_segments() {
                        let gs = &gd[s * d..(s + 1) * d];
                        for i in segments.range(s) {
                            let j = src[i];
                            for (o, g) in dv[j * d..(j + 1) * d].iter_mut().zip(gs) {
                                *o += w[i] * g;
                            }
                        }
                    }
                    self.accumulate(grads, *values, self.like(*values, dv));
                }
            }
            Op::Dropout(a, mask) => {
                let da = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::SubsetMax(a, arg) => {
                let c = self.value(*a).cols();
                let k = node.value.cols();
                let mut da = vec![0.0; self.value(*a).len()];
                for (idx, (&g, &col)) in gd.iter().zip(arg).enumerate() {
                    let r = idx / k;
                    da[r * c + col] += g;
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Sum(a) => {
                let da = vec![gd[0]; self.value(*a).len()];
                self.accumulate(grads, *a, self.like(*a, da));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a (n x k) * b (k x m)`.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if m == 0 {
        return out;
    }
    out.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
        for (kk, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += x * y;
            }
        }
    });
    out
}

/// `a (n x m) * b^T` where `b` is `k x m`; result `n x k`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; m * k];
    for (kk, row) in b.chunks(m.max(1)).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            bt[j * k + kk] = v;
        }
    }
    matmul_nn(a, &bt, n, m, k)
}

/// `a^T * g` where `a` is `n x k` and `g` is `n x m`; result `k x m`.
fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    const BLOCK: usize = 16;
    let mut out = vec![0.0; k * m];
    if m == 0 {
        return out;
    }
    out.par_chunks_mut(BLOCK * m).enumerate().for_each(|(b, block)| {
        let k0 = b * BLOCK;
        let rows = block.len() / m;
        for r in 0..n {
            let gr = &g[r * m..(r + 1) * m];
            for (i, x) in a[r * k + k0..r * k + k0 + rows].iter().enumerate() {
                if *x == 0.0 {
                    continue;
                }
                for (o, y) in block[i * m..(i + 1) * m].iter_mut().zip(gr) {
                    *o += x * y;
                }
            }
        }
    });
    out
}
