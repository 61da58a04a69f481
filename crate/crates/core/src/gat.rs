//! Multi-head graph attention network producing one score in `[0, 1]` per
//! class and node.
//!
//! For node `i` and head `l`, attention logits are
//! `LeakyReLU(a^T [W x_i || W x_j])` over the neighborhood of `i` (its k-NN
//! list, plus `i` itself unless self-loops are disabled). Logits are
//! softmax-normalized per neighborhood and used to mix the mapped neighbor
//! features. Hidden layers concatenate heads and apply ReLU; the output layer
//! averages heads and applies a sigmoid.
//!
//! Weights are stored `in_dim x out_dim` so node features multiply from the
//! left; attention vectors are `2 * out_dim x 1`.

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Segments, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::knngraph::NeighborGraph;
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: &str = "HCGAT1";
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    Concat,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub attention: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: Vec<HeadParams>,
    pub merge: Merge,
    pub activation: Activation,
}

impl GatLayerParams {
    /// Width of the merged layer output.
    pub fn output_width(&self) -> usize {
        match self.merge {
            Merge::Concat => self.out_dim * self.heads.len(),
            Merge::Average => self.out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<GatLayerParams>,
    pub self_loop: bool,
    pub leaky_slope: f64,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, GatLayerParams::output_width)
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.heads)
            .map(|h| h.weight.len() + h.attention.len())
            .sum()
    }

    /// Every parameter tensor in a fixed order (layer, head, weight then
    /// attention).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| &l.heads)
            .flat_map(|h| [&h.weight, &h.attention])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| &mut l.heads)
            .flat_map(|h| [&mut h.weight, &mut h.attention])
    }
}

/// Architecture: hidden widths are per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub heads: usize,
    pub self_loop: bool,
}

impl ModelSpec {
    /// Two attention layers: `input -> hidden x heads (concat, ReLU) ->
    /// classes (average, sigmoid)`.
    pub fn two_layer(input_dim: usize, hidden: usize, classes: usize, heads: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden: vec![hidden],
            output_dim: classes,
            heads,
            self_loop: true,
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

/// Glorot-uniform initialization; identical seeds give identical parameters.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    if spec.input_dim == 0 || spec.output_dim == 0 || spec.heads == 0 || spec.hidden.contains(&0) {
        return Err(Error::InvalidArgument("model dimensions must be positive".into()));
    }
    let mut rng = SplitMix64::derive(seed, &[0x696e6974]);
    let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
    let mut in_dim = spec.input_dim;
    for (i, &out_dim) in spec.hidden.iter().chain([&spec.output_dim]).enumerate() {
        let last = i == spec.hidden.len();
        let heads = (0..spec.heads)
            .map(|_| HeadParams {
                weight: glorot(in_dim, out_dim, &mut rng),
                attention: glorot(2 * out_dim, 1, &mut rng),
            })
            .collect();
        let layer = GatLayerParams {
            in_dim,
            out_dim,
            heads,
            merge: if last { Merge::Average } else { Merge::Concat },
            activation: if last { Activation::Sigmoid } else { Activation::Relu },
        };
        in_dim = layer.output_width();
        layers.push(layer);
    }
    Ok(ModelParams {
        layers,
        self_loop: spec.self_loop,
        leaky_slope: DEFAULT_LEAKY_SLOPE,
    })
}

/// Edge list of the attention neighborhoods, grouped by destination node.
#[derive(Debug, Clone)]
pub struct AttentionEdges {
    pub n: usize,
    pub dst: Arc<Vec<usize>>,
    pub src: Arc<Vec<usize>>,
    pub segments: Arc<Segments>,
}

impl AttentionEdges {
    /// Neighborhood of `i` is `lists[i]`, preceded by `i` itself when
    /// `self_loop` is set.
    pub fn from_lists(lists: &[Vec<usize>], self_loop: bool) -> Result<Self> {
        let n = lists.len();
        let mut dst = Vec::new();
        let mut src = Vec::new();
        for (i, l) in lists.iter().enumerate() {
            if self_loop {
                dst.push(i);
                src.push(i);
            }
            for &j in l {
                if j >= n {
                    return Err(Error::Shape(format!("neighbor {j} of node {i} out of range")));
                }
                dst.push(i);
                src.push(j);
            }
        }
        let segments = Segments::from_sorted_ids(dst.clone(), n)?;
        Ok(AttentionEdges {
            n,
            dst: Arc::new(dst),
            src: Arc::new(src),
            segments: Arc::new(segments),
        })
    }

    pub fn from_graph(g: &NeighborGraph, self_loop: bool) -> Result<Self> {
        let lists: Vec<Vec<usize>> = (0..g.n()).map(|i| g.neighbors(i).to_vec()).collect();
        Self::from_lists(&lists, self_loop)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Tape handles of every parameter tensor, by layer and head.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<Vec<(Var, Var)>>,
}

impl ParamVars {
    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flatten().flat_map(|&(w, a)| [w, a])
    }
}

/// Places the parameters on the tape, differentiable when `trainable`.
pub fn bind_params(tape: &mut Tape, p: &ModelParams, trainable: bool) -> ParamVars {
    let mut put = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    ParamVars {
        layers: p
            .layers
            .iter()
            .map(|l| l.heads.iter().map(|h| (put(&h.weight), put(&h.attention))).collect())
            .collect(),
    }
}

/// Dropout settings for one forward pass. Masks depend only on
/// `(seed, epoch, layer)`.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCtx {
    pub rate: f64,
    pub seed: u64,
    pub epoch: u64,
}

/// Unnormalized attention logits `LeakyReLU(a^T [z_i || z_j])` per edge,
/// computed as `a_dst . z_i + a_src . z_j`.
fn attention_logits(tape: &mut Tape, z: Var, a: Var, edges: &AttentionEdges, slope: f64) -> Result<Var> {
    let d = tape.value(z).cols();
    let a_dst = tape.gather_rows(a, Arc::new((0..d).collect()))?;
    let a_src = tape.gather_rows(a, Arc::new((d..2 * d).collect()))?;
    let s_dst = tape.matmul(z, a_dst)?;
    let s_src = tape.matmul(z, a_src)?;
    let e_dst = tape.gather_rows(s_dst, edges.dst.clone())?;
    let e_src = tape.gather_rows(s_src, edges.src.clone())?;
    let logits = tape.add(e_dst, e_src)?;
    Ok(tape.leaky_relu(logits, slope))
}

/// One attention layer on the tape. All heads share a single projection
/// `x [W_1 | ... | W_K]`.
pub fn layer_on_tape(
    tape: &mut Tape,
    layer: &GatLayerParams,
    vars: &[(Var, Var)],
    x: Var,
    edges: &AttentionEdges,
    slope: f64,
    mut rng: Option<(f64, &mut SplitMix64)>,
) -> Result<Var> {
    let (_, width) = tape.value(x).dims2()?;
    if width != layer.in_dim {
        return Err(Error::Shape(format!(
            "layer expects {} input features, got {width}",
            layer.in_dim
        )));
    }
    let x = match rng.as_mut() {
        Some((rate, r)) => tape.dropout(x, *rate, r)?,
        None => x,
    };
    let ws: Vec<Var> = vars.iter().map(|&(w, _)| w).collect();
    let w_all = tape.concat_last_axis(&ws)?;
    let z_all = tape.matmul(x, w_all)?;
    let d = layer.out_dim;
    let mut outs = Vec::with_capacity(vars.len());
    for (k, &(_, a)) in vars.iter().enumerate() {
        let z = tape.slice_cols(z_all, k * d, d)?;
        let logits = attention_logits(tape, z, a, edges, slope)?;
        let mut gamma = tape.neighborhood_softmax(logits, edges.segments.clone())?;
        if let Some((rate, r)) = rng.as_mut() {
            gamma = tape.dropout(gamma, *rate, r)?;
        }
        outs.push(tape.segment_weighted_sum(gamma, z, edges.src.clone(), edges.segments.clone())?);
    }
    let merged = match layer.merge {
        Merge::Concat => tape.concat_last_axis(&outs)?,
        Merge::Average => tape.mean_over_list(&outs)?,
    };
    Ok(match layer.activation {
        Activation::Relu => tape.relu(merged),
        Activation::Sigmoid => tape.sigmoid(merged),
    })
}

/// Full forward pass on the tape. Dropout is applied only when the tape is
/// in train mode and `dropout` is given.
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &ModelParams,
    vars: &ParamVars,
    x: Var,
    edges: &AttentionEdges,
    dropout: Option<DropoutCtx>,
) -> Result<Var> {
    let mut h = x;
    for (l, (layer, lv)) in p.layers.iter().zip(&vars.layers).enumerate() {
        let mut rng = dropout.map(|d| SplitMix64::derive(d.seed, &[0x64726f70, d.epoch, l as u64]));
        let ctx = match (dropout, rng.as_mut()) {
            (Some(d), Some(r)) => Some((d.rate, r)),
            _ => None,
        };
        h = layer_on_tape(tape, layer, lv, h, edges, p.leaky_slope, ctx)?;
    }
    Ok(h)
}

/// Normalized attention coefficients of one head, aligned with `edges`.
pub fn attention_coefficients(
    layer: &GatLayerParams,
    head: usize,
    features: &Tensor,
    edges: &AttentionEdges,
    slope: f64,
) -> Result<Vec<f64>> {
    let hp = layer
        .heads
        .get(head)
        .ok_or_else(|| Error::InvalidArgument(format!("no head {head}")))?;
    if features.cols() != layer.in_dim {
        return Err(Error::Shape(format!(
            "layer expects {} input features, got {}",
            layer.in_dim,
            features.cols()
        )));
    }
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(features.clone());
    let w = tape.constant(hp.weight.clone());
    let a = tape.constant(hp.attention.clone());
    let z = tape.matmul(x, w)?;
    let logits = attention_logits(&mut tape, z, a, edges, slope)?;
    let gamma = tape.neighborhood_softmax(logits, edges.segments.clone())?;
    Ok(tape.value(gamma).data().to_vec())
}

/// Evaluation-mode output of one layer.
pub fn layer_forward(
    layer: &GatLayerParams,
    features: &Tensor,
    edges: &AttentionEdges,
    slope: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new(Mode::Eval);
    let x = tape.constant(features.clone());
    let vars: Vec<(Var, Var)> = layer
        .heads
        .iter()
        .map(|h| (tape.constant(h.weight.clone()), tape.constant(h.attention.clone())))
        .collect();
    let out = layer_on_tape(&mut tape, layer, &vars, x, edges, slope, None)?;
    Ok(tape.value(out).clone())
}

/// Raw class scores `H` (`n x C`, entries in `[0, 1]`). In train mode the
/// dropout masks are drawn from `(seed, epoch)`.
pub fn model_forward(
    p: &ModelParams,
    features: &Tensor,
    g: &NeighborGraph,
    mode: Mode,
    dropout: Option<DropoutCtx>,
) -> Result<Tensor> {
    let edges = AttentionEdges::from_graph(g, p.self_loop)?;
    model_forward_edges(p, features, &edges, mode, dropout)
}

pub fn model_forward_edges(
    p: &ModelParams,
    features: &Tensor,
    edges: &AttentionEdges,
    mode: Mode,
    dropout: Option<DropoutCtx>,
) -> Result<Tensor> {
    if features.rows() != edges.n {
        return Err(Error::Shape(format!(
            "{} feature rows for a graph of {} nodes",
            features.rows(),
            edges.n
        )));
    }
    let mut tape = Tape::new(mode);
    let vars = bind_params(&mut tape, p, false);
    let x = tape.constant(features.clone());
    let out = forward_on_tape(&mut tape, p, &vars, x, edges, dropout)?;
    Ok(tape.value(out).clone())
}

/// Neighborhood lists of the nodes that influence `center` through `hops`
/// attention layers, reindexed with `center` first. Nodes on the outermost
/// shell get empty lists: only their input features matter.
pub fn receptive_field(g: &NeighborGraph, center: usize, hops: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut nodes = vec![center];
    let mut local = std::collections::HashMap::from([(center, 0usize)]);
    let mut frontier_end = 1;
    let mut expanded = 0;
    for _ in 0..hops {
        for idx in expanded..frontier_end {
            let u = nodes[idx];
            for &v in g.neighbors(u) {
                if let std::collections::hash_map::Entry::Vacant(e) = local.entry(v) {
                    e.insert(nodes.len());
                    nodes.push(v);
                }
            }
        }
        expanded = frontier_end;
        frontier_end = nodes.len();
    }
    let lists = nodes
        .iter()
        .enumerate()
        .map(|(idx, &u)| {
            if idx < expanded {
                g.neighbors(u).iter().map(|v| local[v]).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    (nodes, lists)
}

fn merge_name(m: Merge) -> &'static str {
    match m {
        Merge::Concat => "concat",
        Merge::Average => "average",
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
    }
}

fn fmt_values(data: &[f64]) -> String {
    data.iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes the `HCGAT1` text checkpoint. Values carry 17 significant digits
/// and read back bit-for-bit.
pub fn write_checkpoint<W: Write>(p: &ModelParams, mut w: W) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "precision f64")?;
    writeln!(w, "self_loop {}", u8::from(p.self_loop))?;
    writeln!(w, "leaky_slope {:.16e}", p.leaky_slope)?;
    writeln!(w, "layers {}", p.layers.len())?;
    for (l, layer) in p.layers.iter().enumerate() {
        writeln!(
            w,
            "layer {l} in {} out {} heads {} merge {} activation {}",
            layer.in_dim,
            layer.out_dim,
            layer.heads.len(),
            merge_name(layer.merge),
            activation_name(layer.activation)
        )?;
    }
    for (l, layer) in p.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            let (r, c) = head.weight.dims2()?;
            writeln!(w, "weight {l} {h} {r} {c}")?;
            writeln!(w, "{}", fmt_values(head.weight.data()))?;
            let (r, c) = head.attention.dims2()?;
            writeln!(w, "attention {l} {h} {r} {c}")?;
            writeln!(w, "{}", fmt_values(head.attention.data()))?;
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    line: usize,
}

impl<R: Read> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(Error::format("HCGAT1", format!("unexpected end at line {}", self.line))),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace().map(str::to_owned);
        match parts.next() {
            Some(k) if k == key => Ok(parts.collect()),
            _ => Err(Error::format(
                "HCGAT1",
                format!("line {}: expected `{key}`, found `{line}`", self.line),
            )),
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format("HCGAT1", format!("bad number `{s}`")))
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParams> {
    let mut lines = Lines {
        inner: BufReader::new(r).lines(),
        line: 0,
    };
    if lines.next_line()?.trim() != CHECKPOINT_MAGIC {
        return Err(Error::format("HCGAT1", "missing header"));
    }
    let precision = lines.keyed("precision")?;
    if precision != ["f64"] {
        return Err(Error::format("HCGAT1", "only f64 checkpoints are supported"));
    }
    let self_loop = parse_num::<u8>(&lines.keyed("self_loop")?.join(""))? != 0;
    let leaky_slope: f64 = parse_num(&lines.keyed("leaky_slope")?.join(""))?;
    let n_layers: usize = parse_num(&lines.keyed("layers")?.join(""))?;

    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let f = lines.keyed("layer")?;
        if f.len() != 11 || parse_num::<usize>(&f[0])? != l {
            return Err(Error::format("HCGAT1", format!("bad spec for layer {l}")));
        }
        let merge = match f[8].as_str() {
            "concat" => Merge::Concat,
            "average" => Merge::Average,
            other => return Err(Error::format("HCGAT1", format!("unknown merge `{other}`"))),
        };
        let activation = match f[10].as_str() {
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            other => return Err(Error::format("HCGAT1", format!("unknown activation `{other}`"))),
        };
        layers.push((
            parse_num::<usize>(&f[2])?,
            parse_num::<usize>(&f[4])?,
            parse_num::<usize>(&f[6])?,
            merge,
            activation,
        ));
    }

    let read_tensor = |lines: &mut Lines<R>, key: &str, l: usize, h: usize, shape: (usize, usize)| -> Result<Tensor> {
        let f = lines.keyed(key)?;
        let dims: Vec<usize> = f.iter().map(|s| parse_num(s)).collect::<Result<_>>()?;
        if dims != [l, h, shape.0, shape.1] {
            return Err(Error::format("HCGAT1", format!("unexpected {key} block {dims:?}")));
        }
        let values: Vec<f64> = lines
            .next_line()?
            .split_whitespace()
            .map(parse_num)
            .collect::<Result<_>>()?;
        Tensor::matrix(shape.0, shape.1, values).map_err(|e| Error::format("HCGAT1", e.to_string()))
    };

    let mut out = Vec::with_capacity(n_layers);
    for (l, &(in_dim, out_dim, n_heads, merge, activation)) in layers.iter().enumerate() {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let weight = read_tensor(&mut lines, "weight", l, h, (in_dim, out_dim))?;
            let attention = read_tensor(&mut lines, "attention", l, h, (2 * out_dim, 1))?;
            heads.push(HeadParams { weight, attention });
        }
        out.push(GatLayerParams {
            in_dim,
            out_dim,
            heads,
            merge,
            activation,
        });
    }
    if lines.next_line()?.trim() != "end" {
        return Err(Error::format("HCGAT1", "missing `end`"));
    }
    for pair in out.windows(2) {
        if pair[0].output_width() != pair[1].in_dim {
            return Err(Error::format("HCGAT1", "layer widths do not chain"));
        }
    }
    Ok(ModelParams {
        layers: out,
        self_loop,
        leaky_slope,
    })
}
