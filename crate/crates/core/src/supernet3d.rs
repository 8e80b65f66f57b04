//! 3D convolutional supernet: primitive operations, softmax-mixed edges,
//! DARTS-style cells and a single-output regression head.
//!
//! Voxel batches are `(n, channels, feature, base, equipment)`; the stem maps
//! the year channels to the stem width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding::DerivedEmbedding;
use crate::error::{Error, Result};
use crate::nn::kernels::pooled_dim;
use crate::nn::{ConvSpec, NormMode, Tape, Tensor, Var};
use crate::scalar::{softmax, Scalar};

/// Candidate operations on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    None,
    #[serde(rename = "avg_pool_3x3x3")]
    AvgPool3,
    #[serde(rename = "max_pool_3x3x3")]
    MaxPool3,
    SkipConnect,
    #[serde(rename = "conv_1x1x1")]
    Conv1,
    #[serde(rename = "conv_3x3x3")]
    Conv3,
    #[serde(rename = "conv_5x5x5")]
    Conv5,
    #[serde(rename = "sep_conv_3x3x3")]
    SepConv3,
    #[serde(rename = "dil_conv_3x3x3")]
    DilConv3,
    #[serde(rename = "conv_1x3x3")]
    Conv1x3x3,
    #[serde(rename = "conv_3x1x1")]
    Conv3x1x1,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::None,
        OpKind::AvgPool3,
        OpKind::MaxPool3,
        OpKind::SkipConnect,
        OpKind::Conv1,
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::SepConv3,
        OpKind::DilConv3,
        OpKind::Conv1x3x3,
        OpKind::Conv3x1x1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::AvgPool3 => "avg_pool_3x3x3",
            OpKind::MaxPool3 => "max_pool_3x3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Conv1 => "conv_1x1x1",
            OpKind::Conv3 => "conv_3x3x3",
            OpKind::Conv5 => "conv_5x5x5",
            OpKind::SepConv3 => "sep_conv_3x3x3",
            OpKind::DilConv3 => "dil_conv_3x3x3",
            OpKind::Conv1x3x3 => "conv_1x3x3",
            OpKind::Conv3x1x1 => "conv_3x1x1",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Trainable tensors and batch-norm running statistics of a network.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
    pub running: Vec<RunningStats<T>>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> ParamStore<T> {
    fn add(&mut self, t: Tensor<T>) -> ParamId {
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    fn add_bn(&mut self, channels: usize) -> BnId {
        self.running.push(RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BnId(self.running.len() - 1)
    }

    fn conv(&mut self, cout: usize, cin_g: usize, kernel: [usize; 3], rng: &mut ChaCha8Rng) -> ParamId {
        let fan_in = cin_g * kernel.iter().product::<usize>();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let shape = [cout, cin_g, kernel[0], kernel[1], kernel[2]];
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        self.add(Tensor::from_vec(&shape, data).expect("sized"))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Blends batch statistics into the running statistics.
    pub fn update_running(&mut self, id: BnId, mean: &[T], var: &[T], batch_elems: usize) {
        let m = T::of(BN_MOMENTUM);
        let unbias = if batch_elems > 1 {
            T::of(batch_elems as f64 / (batch_elems - 1) as f64)
        } else {
            T::one()
        };
        let stats = &mut self.running[id.0];
        for c in 0..mean.len() {
            stats.mean[c] = (T::one() - m) * stats.mean[c] + m * mean[c];
            stats.var[c] = (T::one() - m) * stats.var[c] + m * var[c] * unbias;
        }
    }
}

/// Per-forward bookkeeping: parameter leaves and pending running-stat updates.
pub struct Ctx<'a, T> {
    store: &'a ParamStore<T>,
    batch_stats: bool,
    params_require_grad: bool,
    vars: Vec<Option<Var>>,
    pub bn_updates: Vec<(BnId, Vec<T>, Vec<T>, usize)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `batch_stats` selects training-mode normalization.
    pub fn new(store: &'a ParamStore<T>, batch_stats: bool, params_require_grad: bool) -> Self {
        Self {
            store,
            batch_stats,
            params_require_grad,
            vars: vec![None; store.tensors.len()],
            bn_updates: Vec::new(),
        }
    }

    fn param(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| {
            tape.leaf(self.store.tensors[id.0].clone(), self.params_require_grad)
        })
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, id: BnId) -> Var {
        if self.batch_stats {
            let dims = tape.value(x).dims5();
            let elems = dims[0] * dims[2] * dims[3] * dims[4];
            let (y, stats) = tape.batch_norm(x, NormMode::Batch);
            if let Some((m, v)) = stats {
                self.bn_updates.push((id, m, v, elems));
            }
            y
        } else {
            let rs = &self.store.running[id.0];
            tape.batch_norm(
                x,
                NormMode::Running {
                    mean: &rs.mean,
                    var: &rs.var,
                },
            )
            .0
        }
    }

    /// Parameter leaves created so far, by parameter index.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    /// Applies collected running-stat updates to `store`.
    pub fn commit_running(updates: Vec<(BnId, Vec<T>, Vec<T>, usize)>, store: &mut ParamStore<T>) {
        for (id, m, v, n) in updates {
            store.update_running(id, &m, &v, n);
        }
    }
}

/// A primitive operation with its own parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Primitive {
    Zero { stride: usize, channels: usize },
    AvgPool { stride: usize },
    MaxPool { stride: usize },
    Identity,
    /// ReLU, 1x1x1 convolution, normalization.
    ReluConvBn { conv: ParamId, spec: ConvSpec, bn: BnId },
    /// Depthwise then pointwise convolution, optionally applied twice.
    SepConv { stages: Vec<(ParamId, ConvSpec, ParamId, BnId)> },
}

impl Primitive {
    /// Builds `kind` mapping `cin` to `cout` channels at `stride`.
    pub fn build<T: Scalar>(
        kind: OpKind,
        cin: usize,
        cout: usize,
        stride: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::UnsupportedStride(stride));
        }
        let same = cin == cout;
        let conv = |kernel: [usize; 3], dilation: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
            let spec = ConvSpec {
                kernel,
                stride,
                dilation,
                groups: 1,
            };
            Primitive::ReluConvBn {
                conv: store.conv(cout, cin, kernel, rng),
                spec,
                bn: store.add_bn(cout),
            }
        };
        let sep = |dilation: usize, repeats: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
            let mut stages = Vec::new();
            for r in 0..repeats {
                let (ci, s) = if r == 0 { (cin, stride) } else { (cout, 1) };
                let dw_spec = ConvSpec {
                    kernel: [3, 3, 3],
                    stride: s,
                    dilation,
                    groups: ci,
                };
                let dw = store.conv(ci, 1, [3, 3, 3], rng);
                let pw = store.conv(cout, ci, [1, 1, 1], rng);
                stages.push((dw, dw_spec, pw, store.add_bn(cout)));
            }
            Primitive::SepConv { stages }
        };
        Ok(match kind {
            OpKind::None => Primitive::Zero {
                stride,
                channels: cout,
            },
            OpKind::AvgPool3 if same => Primitive::AvgPool { stride },
            OpKind::MaxPool3 if same => Primitive::MaxPool { stride },
            OpKind::SkipConnect if same && stride == 1 => Primitive::Identity,
            OpKind::SkipConnect | OpKind::Conv1 => conv([1, 1, 1], 1, store, rng),
            OpKind::Conv3 => conv([3, 3, 3], 1, store, rng),
            OpKind::Conv5 => conv([5, 5, 5], 1, store, rng),
            OpKind::Conv1x3x3 => conv([1, 3, 3], 1, store, rng),
            OpKind::Conv3x1x1 => conv([3, 1, 1], 1, store, rng),
            OpKind::SepConv3 => sep(1, 2, store, rng),
            OpKind::DilConv3 => sep(2, 1, store, rng),
            OpKind::AvgPool3 | OpKind::MaxPool3 => {
                return Err(Error::ShapeMismatch(format!(
                    "{kind} cannot change channels {cin} -> {cout}"
                )))
            }
        })
    }

    /// Output shape for an input of shape `dims`.
    pub fn out_shape(&self, dims: [usize; 5], cout: usize, stride: usize) -> [usize; 5] {
        [
            dims[0],
            cout,
            pooled_dim(dims[2], 1, stride, 1),
            pooled_dim(dims[3], 1, stride, 1),
            pooled_dim(dims[4], 1, stride, 1),
        ]
    }

    /// Forward pass; `None` for the all-zero operation.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Option<Var>> {
        Ok(match self {
            Primitive::Zero { .. } => None,
            Primitive::AvgPool { stride } => Some(tape.avg_pool(x, *stride)?),
            Primitive::MaxPool { stride } => Some(tape.max_pool(x, *stride)?),
            Primitive::Identity => Some(x),
            Primitive::ReluConvBn { conv, spec, bn } => {
                let r = tape.relu(x);
                let w = ctx.param(tape, *conv);
                let c = tape.conv3d(r, w, *spec)?;
                Some(ctx.bn(tape, c, *bn))
            }
            Primitive::SepConv { stages } => {
                let mut h = x;
                for &(dw, dw_spec, pw, bn) in stages {
                    let r = tape.relu(h);
                    let wd = ctx.param(tape, dw);
                    let d = tape.conv3d(r, wd, dw_spec)?;
                    let wp = ctx.param(tape, pw);
                    let p = tape.conv3d(d, wp, ConvSpec::cube(1, 1))?;
                    h = ctx.bn(tape, p, bn);
                }
                Some(h)
            }
        })
    }
}

/// One edge of a cell DAG.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Edge {
    /// Source state: 0 and 1 are the cell inputs, `2 + i` is node `i`.
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    pub ops: Vec<(OpKind, Primitive)>,
    /// Row of the cell-type logits mixing this edge; `None` for single-op edges.
    pub alpha_row: Option<usize>,
}

/// Cell DAG with two input states and `nodes` intermediate nodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub reduction: bool,
    pub nodes: usize,
    pub channels: usize,
    pub edges: Vec<Edge>,
}

/// Edges of a fully connected cell in canonical order: node by node, then source.
pub fn edge_count(nodes: usize) -> usize {
    nodes * (nodes + 3) / 2
}

impl Cell {
    /// Supernet cell: every earlier state feeds every node through a mixed edge.
    pub fn mixed<T: Scalar>(
        nodes: usize,
        channels: usize,
        reduction: bool,
        ops: &[OpKind],
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut edges = Vec::new();
        for node in 0..nodes {
            for from in 0..node + 2 {
                let stride = if reduction && from < 2 { 2 } else { 1 };
                let prims = ops
                    .iter()
                    .map(|&k| Ok((k, Primitive::build(k, channels, channels, stride, store, rng)?)))
                    .collect::<Result<Vec<_>>>()?;
                edges.push(Edge {
                    from,
                    to: node,
                    stride,
                    ops: prims,
                    alpha_row: Some(edges.len()),
                });
            }
        }
        Ok(Self {
            reduction,
            nodes,
            channels,
            edges,
        })
    }

    /// Discrete cell from derived (source, op) pairs per node.
    pub fn discrete<T: Scalar>(
        genes: &[[GenoEdge; 2]],
        channels: usize,
        reduction: bool,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut edges = Vec::new();
        for (node, pair) in genes.iter().enumerate() {
            for g in pair {
                if g.from >= node + 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "node {node} cannot read state {}",
                        g.from
                    )));
                }
                let stride = if reduction && g.from < 2 { 2 } else { 1 };
                edges.push(Edge {
                    from: g.from,
                    to: node,
                    stride,
                    ops: vec![(g.op, Primitive::build(g.op, channels, channels, stride, store, rng)?)],
                    alpha_row: None,
                });
            }
        }
        Ok(Self {
            reduction,
            nodes: genes.len(),
            channels,
            edges,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.nodes * self.channels
    }

    /// Runs the DAG on already preprocessed inputs; `alphas` holds one logit
    /// vector per mixed edge. Output is the channel concatenation of the nodes.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut Ctx<'_, T>,
        s0: Var,
        s1: Var,
        alphas: &[Var],
    ) -> Result<Var> {
        let d0 = tape.value(s0).dims5();
        let d1 = tape.value(s1).dims5();
        if d0 != d1 || d0[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "cell inputs {d0:?} and {d1:?} for width {}",
                self.channels
            )));
        }
        let mut states = vec![s0, s1];
        for node in 0..self.nodes {
            let mut inputs = Vec::new();
            for edge in self.edges.iter().filter(|e| e.to == node) {
                let x = states[edge.from];
                let dims = tape.value(x).dims5();
                let shape = Primitive::Identity.out_shape(dims, self.channels, edge.stride);
                let mut outs = Vec::with_capacity(edge.ops.len());
                for (_, p) in &edge.ops {
                    outs.push(p.forward(tape, ctx, x)?);
                }
                match edge.alpha_row {
                    Some(row) => {
                        let alpha = *alphas.get(row).ok_or_else(|| {
                            Error::ShapeMismatch(format!("no logits for edge {row}"))
                        })?;
                        inputs.push(tape.mix(alpha, &outs, &shape)?);
                    }
                    None => {
                        if let Some(Some(v)) = outs.into_iter().next() {
                            inputs.push(v);
                        }
                    }
                }
            }
            let node_out = tape.sum(&inputs)?;
            states.push(node_out);
        }
        tape.concat_channels(&states[2..])
    }
}

/// Architecture sizes of the supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetConfig {
    pub cells: usize,
    pub nodes: usize,
    pub width: usize,
    pub stem_multiplier: usize,
    pub ops: Vec<OpKind>,
    pub seed: u64,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        Self {
            cells: 4,
            nodes: 2,
            width: 8,
            stem_multiplier: 3,
            ops: OpKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 || self.nodes < 1 || self.width < 1 || self.stem_multiplier < 1 {
            return Err(Error::InvalidConfig(
                "supernet needs cells >= 2, nodes >= 1, width >= 1, stem_multiplier >= 1".into(),
            ));
        }
        if !self.ops.iter().any(|&k| k != OpKind::None) {
            return Err(Error::InvalidConfig("op set needs a non-`none` operation".into()));
        }
        let mut seen = self.ops.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.ops.len() {
            return Err(Error::InvalidConfig("op set lists an operation twice".into()));
        }
        Ok(())
    }

    /// Positions of the reduction cells: `floor(C/3)` and `floor(2C/3)`.
    pub fn reduction_cells(&self) -> [usize; 2] {
        [self.cells / 3, 2 * self.cells / 3]
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reduction_cells().contains(&cell)
    }
}

/// Per-edge mixing logits for the normal and the reduction cell type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ArchParams<T> {
    pub ops: Vec<OpKind>,
    pub nodes: usize,
    pub normal: Vec<Vec<T>>,
    pub reduce: Vec<Vec<T>>,
}

impl<T: Scalar> ArchParams<T> {
    pub fn zeros(ops: &[OpKind], nodes: usize) -> Self {
        let rows = vec![vec![T::zero(); ops.len()]; edge_count(nodes)];
        Self {
            ops: ops.to_vec(),
            nodes,
            normal: rows.clone(),
            reduce: rows,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.normal.iter().chain(&self.reduce).flatten().all(|v| v.is_finite())
    }

    /// Tape leaves for every edge row.
    pub fn vars(&self, tape: &mut Tape<T>, requires_grad: bool) -> ArchVars {
        let mut mk = |rows: &[Vec<T>]| -> Vec<Var> {
            rows.iter()
                .map(|r| tape.leaf(Tensor::from_vec(&[r.len()], r.clone()).unwrap(), requires_grad))
                .collect()
        };
        ArchVars {
            normal: mk(&self.normal),
            reduce: mk(&self.reduce),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ArchVars {
    pub normal: Vec<Var>,
    pub reduce: Vec<Var>,
}

/// One kept input of a derived node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenoEdge {
    pub from: usize,
    pub op: OpKind,
}

/// A derived discrete architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<[GenoEdge; 2]>,
    pub reduce: Vec<[GenoEdge; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<DerivedEmbedding>,
}

impl Genotype {
    /// No `none` operation; every node reads two distinct strictly earlier states.
    pub fn validate(&self) -> Result<()> {
        for cell in [&self.normal, &self.reduce] {
            for (node, pair) in cell.iter().enumerate() {
                for g in pair {
                    if g.op == OpKind::None {
                        return Err(Error::InvalidConfig(format!("node {node} keeps `none`")));
                    }
                    if g.from >= node + 2 {
                        return Err(Error::InvalidConfig(format!(
                            "node {node} reads later state {}",
                            g.from
                        )));
                    }
                }
                if pair[0].from == pair[1].from {
                    return Err(Error::InvalidConfig(format!("node {node} reads one state twice")));
                }
            }
        }
        Ok(())
    }
}

fn derive_cell<T: Scalar>(rows: &[Vec<T>], ops: &[OpKind], nodes: usize) -> Vec<[GenoEdge; 2]> {
    let mut out = Vec::with_capacity(nodes);
    let mut row = 0;
    for node in 0..nodes {
        let mut scored: Vec<(usize, T, usize)> = Vec::new();
        for from in 0..node + 2 {
            let w = softmax(&rows[row]);
            let mut best: Option<(usize, T)> = None;
            for (k, &kind) in ops.iter().enumerate() {
                if kind == OpKind::None {
                    continue;
                }
                if best.is_none_or(|(_, b)| w[k] > b) {
                    best = Some((k, w[k]));
                }
            }
            let (k, score) = best.expect("op set has a non-none op");
            scored.push((from, score, k));
            row += 1;
        }
        // stable sort keeps the lowest source first among equal scores
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let pick = |i: usize| GenoEdge {
            from: scored[i].0,
            op: ops[scored[i].2],
        };
        let mut pair = [pick(0), pick(1)];
        pair.sort_by_key(|g| g.from);
        out.push(pair);
    }
    out
}

/// Keeps, per node, the two incoming edges whose strongest non-`none` op has
/// the largest softmax weight, and that op on each kept edge.
pub fn derive_genotype<T: Scalar>(arch: &ArchParams<T>) -> Genotype {
    Genotype {
        normal: derive_cell(&arch.normal, &arch.ops, arch.nodes),
        reduce: derive_cell(&arch.reduce, &arch.ops, arch.nodes),
        embedding: None,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    pre0: Primitive,
    pre1: Primitive,
    cell: Cell,
}

/// Stem, cells and regression head. Built either as a supernet (mixed edges)
/// or from a genotype (one op per kept edge).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Network<T> {
    pub config: SupernetConfig,
    /// `(years, features, bases, equipment)`.
    pub input_dims: [usize; 4],
    pub store: ParamStore<T>,
    stem_conv: ParamId,
    stem_bn: BnId,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> Network<T> {
    fn build(
        config: &SupernetConfig,
        input_dims: [usize; 4],
        genotype: Option<&Genotype>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(g) = genotype {
            g.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let stem_c = config.width * config.stem_multiplier;
        let stem_conv = store.conv(stem_c, input_dims[0], [3, 3, 3], &mut rng);
        let stem_bn = store.add_bn(stem_c);
        let (mut c_pp, mut c_p, mut c_curr) = (stem_c, stem_c, config.width);
        let mut reduction_prev = false;
        let mut blocks = Vec::with_capacity(config.cells);
        for i in 0..config.cells {
            let reduction = config.is_reduction(i);
            if reduction {
                c_curr *= 2;
            }
            let pre0 = Primitive::build(
                OpKind::Conv1,
                c_pp,
                c_curr,
                if reduction_prev { 2 } else { 1 },
                &mut store,
                &mut rng,
            )?;
            let pre1 = Primitive::build(OpKind::Conv1, c_p, c_curr, 1, &mut store, &mut rng)?;
            let cell = match genotype {
                None => Cell::mixed(config.nodes, c_curr, reduction, &config.ops, &mut store, &mut rng)?,
                Some(g) => {
                    let genes = if reduction { &g.reduce } else { &g.normal };
                    Cell::discrete(genes, c_curr, reduction, &mut store, &mut rng)?
                }
            };
            c_pp = c_p;
            c_p = cell.out_channels();
            reduction_prev = reduction;
            blocks.push(Block { pre0, pre1, cell });
        }
        let bound = 1.0 / (c_p as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let head_w = store.add(
            Tensor::from_vec(&[1, c_p], (0..c_p).map(|_| T::of(uni.sample(&mut rng))).collect())
                .expect("sized"),
        );
        let head_b = store.add(Tensor::zeros(&[1]));
        Ok(Self {
            config: config.clone(),
            input_dims,
            store,
            stem_conv,
            stem_bn,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Supernet with every op mixed on every edge.
    pub fn supernet(config: &SupernetConfig, input_dims: [usize; 4]) -> Result<Self> {
        Self::build(config, input_dims, None)
    }

    /// Discrete network of a derived genotype.
    pub fn derived(config: &SupernetConfig, input_dims: [usize; 4], genotype: &Genotype) -> Result<Self> {
        if genotype.normal.len() != config.nodes || genotype.reduce.len() != config.nodes {
            return Err(Error::ShapeMismatch(format!(
                "genotype has {}/{} nodes, config expects {}",
                genotype.normal.len(),
                genotype.reduce.len(),
                config.nodes
            )));
        }
        Self::build(config, input_dims, Some(genotype))
    }

    pub fn is_supernet(&self) -> bool {
        self.blocks.iter().any(|b| b.cell.edges.iter().any(|e| e.alpha_row.is_some()))
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Predictions `(n, 1)` for a voxel batch `(n, years, features, bases, equipment)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        arch: Option<&ArchVars>,
    ) -> Result<Var> {
        let dims = tape.value(x).dims5();
        if dims[1..] != self.input_dims {
            return Err(Error::ShapeMismatch(format!(
                "voxel batch {dims:?} for network input {:?}",
                self.input_dims
            )));
        }
        if self.is_supernet() && arch.is_none() {
            return Err(Error::ShapeMismatch("supernet forward needs architecture logits".into()));
        }
        let w = ctx.param(tape, self.stem_conv);
        let stem = tape.conv3d(x, w, ConvSpec::cube(3, 1))?;
        let stem = ctx.bn(tape, stem, self.stem_bn);
        let (mut s0, mut s1) = (stem, stem);
        let empty = Vec::new();
        for block in &self.blocks {
            let p0 = block.pre0.forward(tape, ctx, s0)?.expect("preprocessing is parametric");
            let p1 = block.pre1.forward(tape, ctx, s1)?.expect("preprocessing is parametric");
            let alphas = match arch {
                Some(a) if block.cell.reduction => &a.reduce,
                Some(a) => &a.normal,
                None => &empty,
            };
            let out = block.cell.forward(tape, ctx, p0, p1, alphas)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = tape.global_avg_pool(s1);
        let hw = ctx.param(tape, self.head_w);
        let hb = ctx.param(tape, self.head_b);
        tape.linear(pooled, hw, hb)
    }

    /// Inference-mode predictions (running normalization statistics).
    pub fn predict(&self, batch: &Tensor<T>, arch: Option<&ArchParams<T>>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&self.store, false, false);
        let x = tape.constant(batch.clone());
        let av = arch.map(|a| a.vars(&mut tape, false));
        let out = self.forward(&mut tape, &mut ctx, x, av.as_ref())?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Applies one primitive with freshly initialized weights (seeded) to `input`,
/// normalizing with batch statistics.
pub fn primitive_forward<T: Scalar>(kind: OpKind, input: &Tensor<T>, stride: usize, seed: u64) -> Result<Tensor<T>> {
    let dims = input.dims5();
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prim = Primitive::build(kind, dims[1], dims[1], stride, &mut store, &mut rng)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&store, true, false);
    let x = tape.constant(input.clone());
    Ok(match prim.forward(&mut tape, &mut ctx, x)? {
        Some(v) => tape.value(v).clone(),
        None => Tensor::zeros(&prim.out_shape(dims, dims[1], stride)),
    })
}

/// Softmax mixture of `ops` on one edge with freshly initialized weights.
pub fn mixed_op_forward<T: Scalar>(
    ops: &[OpKind],
    alpha: &[T],
    input: &Tensor<T>,
    stride: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    if alpha.len() != ops.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} ops",
            alpha.len(),
            ops.len()
        )));
    }
    let dims = input.dims5();
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = ops
        .iter()
        .map(|&k| Primitive::build(k, dims[1], dims[1], stride, &mut store, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&store, true, false);
    let x = tape.constant(input.clone());
    let a = tape.constant(Tensor::from_vec(&[alpha.len()], alpha.to_vec())?);
    let outs = prims
        .iter()
        .map(|p| p.forward(&mut tape, &mut ctx, x))
        .collect::<Result<Vec<_>>>()?;
    let shape = Primitive::Identity.out_shape(dims, dims[1], stride);
    let y = tape.mix(a, &outs, &shape)?;
    Ok(tape.value(y).clone())
}
