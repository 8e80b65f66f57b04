//! Tabular-to-voxel input embedding.
//!
//! Each level axis (features, bases, equipment) is clustered; a candidate
//! embedding is one order of the cluster blocks per axis. Voxel cell
//! `(year, f, b, e)` holds the normalized value of feature `f` at base `b`,
//! equipment `e` in that year, with axis positions laid out block by block.
//! The search relaxes the choice of orders into a softmax mixture over
//! candidate images.

use std::sync::Arc;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::cluster;
use crate::dataset::DemandPanel;
use crate::error::{Error, Result};
use crate::nn::{AxisMaps, Tape, Tensor, Var};
use crate::scalar::{argmax, Scalar};

pub const KMEANS_RESTARTS: usize = 10;
pub const DEFAULT_JOINT_CAP: usize = 2000;
/// Largest per-axis permutation list we are willing to materialize (8!).
pub const MAX_AXIS_CANDIDATES: usize = 40_320;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Feature,
    Base,
    Equipment,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Feature, Axis::Base, Axis::Equipment];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Feature => "feature",
            Axis::Base => "base",
            Axis::Equipment => "equipment",
        }
    }

    /// Position of this axis in an `(n, year, feature, base, equipment)` batch.
    pub fn tensor_axis(self) -> usize {
        match self {
            Axis::Feature => 2,
            Axis::Base => 3,
            Axis::Equipment => 4,
        }
    }

    pub fn extent(self, panel: &DemandPanel) -> usize {
        match self {
            Axis::Feature => panel.schema().k(),
            Axis::Base => panel.bases().len(),
            Axis::Equipment => panel.equipment().len(),
        }
    }
}

/// Assignment of one axis's members to clusters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelClustering {
    pub axis: Axis,
    /// Cluster id of every member (canonical: cluster 0 holds member 0).
    pub assignment: Vec<usize>,
}

impl LevelClustering {
    pub fn new(axis: Axis, assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::EmptyAxis(axis.name().into()));
        }
        let c = cluster::cluster_count(&assignment);
        if (0..c).any(|k| !assignment.contains(&k)) {
            return Err(Error::InvalidConfig(format!(
                "{} clustering has an empty cluster",
                axis.name()
            )));
        }
        Ok(Self { axis, assignment })
    }

    /// Every member in one cluster.
    pub fn single(axis: Axis, members: usize) -> Result<Self> {
        Self::new(axis, vec![0; members])
    }

    pub fn count(&self) -> usize {
        cluster::cluster_count(&self.assignment)
    }

    pub fn members(&self) -> usize {
        self.assignment.len()
    }

    /// Members of cluster `c` in ascending id order.
    pub fn cluster_members(&self, c: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&m| self.assignment[m] == c)
            .collect()
    }

    /// Axis positions for a cluster order: the blocks concatenated, members
    /// ascending within each block. `positions[p]` is the member shown at `p`.
    pub fn positions(&self, order: &[usize]) -> Vec<usize> {
        order.iter().flat_map(|&c| self.cluster_members(c)).collect()
    }
}

/// Mean-profile vectors used to cluster the members of an axis.
pub fn axis_profiles(panel: &DemandPanel, axis: Axis) -> Vec<Vec<f64>> {
    let k = panel.schema().k();
    let (nb, ne) = (panel.bases().len(), panel.equipment().len());
    let (rows, cols) = match axis {
        Axis::Feature => (k, nb * ne),
        Axis::Base => (nb, k),
        Axis::Equipment => (ne, k),
    };
    let mut sums = vec![vec![0.0; cols]; rows];
    let mut counts = vec![vec![0usize; cols]; rows];
    for r in panel.records() {
        for (f, v) in r.features.iter().enumerate() {
            let Some(v) = v else { continue };
            let (row, col) = match axis {
                Axis::Feature => (f, r.base * ne + r.equipment),
                Axis::Base => (r.base, f),
                Axis::Equipment => (r.equipment, f),
            };
            sums[row][col] += v;
            counts[row][col] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| {
            s.into_iter()
                .zip(c)
                .map(|(v, n)| if n > 0 { v / n as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// k-means over explicit profiles with the count picked by silhouette.
pub fn cluster_profiles(
    profiles: &[Vec<f64>],
    axis: Axis,
    max_clusters: usize,
    seed: u64,
) -> Result<LevelClustering> {
    if profiles.is_empty() {
        return Err(Error::EmptyAxis(axis.name().into()));
    }
    if max_clusters == 0 {
        return Err(Error::InvalidConfig("max_clusters must be >= 1".into()));
    }
    let labels = cluster::select_by_silhouette(profiles, max_clusters, |k| {
        cluster::kmeans(profiles, k, KMEANS_RESTARTS, seed).labels
    });
    LevelClustering::new(axis, labels)
}

/// Groups the members of one axis by their mean profiles.
pub fn cluster_levels(
    panel: &DemandPanel,
    axis: Axis,
    max_clusters: usize,
    seed: u64,
) -> Result<LevelClustering> {
    if axis.extent(panel) == 0 {
        return Err(Error::EmptyAxis(axis.name().into()));
    }
    cluster_profiles(&axis_profiles(panel, axis), axis, max_clusters, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMode {
    /// One softmax over every (feature, base, equipment) order triple.
    Joint,
    /// One softmax per axis, applied in sequence.
    Factorized,
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// All cluster orders of every axis.
#[derive(Clone, Debug)]
pub struct CandidateMappingSpace {
    mode: MappingMode,
    clusterings: [LevelClustering; 3],
    /// Lexicographic permutations of cluster ids per axis; index 0 is identity.
    orders: [Vec<Vec<usize>>; 3],
    /// Axis position maps per candidate order, for the differentiable mixtures.
    maps: [AxisMaps; 3],
}

impl CandidateMappingSpace {
    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn clusterings(&self) -> &[LevelClustering; 3] {
        &self.clusterings
    }

    pub fn axis_orders(&self, axis: usize) -> &[Vec<usize>] {
        &self.orders[axis]
    }

    pub fn axis_sizes(&self) -> [usize; 3] {
        [self.orders[0].len(), self.orders[1].len(), self.orders[2].len()]
    }

    /// Number of joint candidates, `c_f! * c_b! * c_e!`.
    pub fn joint_size(&self) -> usize {
        self.axis_sizes().iter().product()
    }

    /// Number of mixing logits the mode needs.
    pub fn param_count(&self) -> usize {
        match self.mode {
            MappingMode::Joint => self.joint_size(),
            MappingMode::Factorized => self.axis_sizes().iter().sum(),
        }
    }

    /// Lengths of the logit vectors of [`EmbeddingParams`].
    pub fn param_shape(&self) -> Vec<usize> {
        match self.mode {
            MappingMode::Joint => vec![self.joint_size()],
            MappingMode::Factorized => self.axis_sizes().to_vec(),
        }
    }

    /// Splits a joint candidate index into per-axis order indices.
    pub fn joint_triple(&self, index: usize) -> [usize; 3] {
        let [_, b, e] = self.axis_sizes();
        [index / (b * e), (index / e) % b, index % e]
    }

    pub fn orders_for(&self, triple: [usize; 3]) -> [Vec<usize>; 3] {
        [0, 1, 2].map(|a| self.orders[a][triple[a]].clone())
    }

    pub fn maps(&self) -> &[AxisMaps; 3] {
        &self.maps
    }
}

/// Lists every cluster-order candidate of the three axes.
pub fn enumerate_candidates(
    clusterings: &[LevelClustering; 3],
    mode: MappingMode,
    joint_cap: usize,
) -> Result<CandidateMappingSpace> {
    for (c, axis) in clusterings.iter().zip(Axis::ALL) {
        if c.axis != axis {
            return Err(Error::InvalidConfig(format!(
                "clustering {} given where {} was expected",
                c.axis.name(),
                axis.name()
            )));
        }
    }
    let sizes = clusterings.each_ref().map(|c| factorial(c.count()));
    if let Some(&big) = sizes.iter().find(|&&s| s > MAX_AXIS_CANDIDATES as u128) {
        return Err(Error::SpaceTooLarge {
            size: big,
            cap: MAX_AXIS_CANDIDATES,
        });
    }
    let joint: u128 = sizes.iter().product();
    if mode == MappingMode::Joint && joint > joint_cap as u128 {
        return Err(Error::SpaceTooLarge {
            size: joint,
            cap: joint_cap,
        });
    }
    let orders = clusterings
        .each_ref()
        .map(|c| (0..c.count()).permutations(c.count()).collect::<Vec<_>>());
    let maps = [0, 1, 2].map(|a| {
        Arc::new(
            orders[a]
                .iter()
                .map(|o| clusterings[a].positions(o))
                .collect::<Vec<_>>(),
        )
    });
    Ok(CandidateMappingSpace {
        mode,
        clusterings: clusterings.clone(),
        orders,
        maps,
    })
}

/// Continuous mixing logits over candidate embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmbeddingParams<T> {
    pub mode: MappingMode,
    /// One vector (joint) or three vectors in axis order (factorized).
    pub logits: Vec<Vec<T>>,
}

impl<T: Scalar> EmbeddingParams<T> {
    pub fn zeros(space: &CandidateMappingSpace) -> Self {
        Self {
            mode: space.mode(),
            logits: space.param_shape().iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn check(&self, space: &CandidateMappingSpace) -> Result<()> {
        let shape: Vec<usize> = self.logits.iter().map(Vec::len).collect();
        if self.mode != space.mode() || shape != space.param_shape() {
            return Err(Error::ShapeMismatch(format!(
                "embedding logits {shape:?} for candidate space {:?}",
                space.param_shape()
            )));
        }
        if self.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite embedding logits".into()));
        }
        Ok(())
    }
}

/// Dense `(year, feature, base, equipment)` image of one item in member-id
/// order, before any cluster reordering. Features that do not vary along an
/// axis are replaced by their mean along it, i.e. replicated.
pub fn raw_grid(panel: &DemandPanel, item: usize) -> Result<Vec<f64>> {
    let recs = panel.item_grid(item)?;
    let k = panel.schema().k();
    let (nb, ne, ny) = (panel.bases().len(), panel.equipment().len(), panel.years().len());
    let mut grid = vec![0.0; ny * k * nb * ne];
    let at = |y: usize, f: usize, b: usize, e: usize| ((y * k + f) * nb + b) * ne + e;
    for r in recs {
        for (f, v) in r.features.iter().enumerate() {
            let v = v.ok_or_else(|| Error::IncompleteGrid {
                item: panel.items()[item].clone(),
            })?;
            grid[at(r.year, f, r.base, r.equipment)] = v;
        }
    }
    for (f, flags) in panel.schema().level_flags().iter().enumerate() {
        let axes = [(flags.year, ny), (flags.base, nb), (flags.equipment, ne)];
        for (axis, &(varies, extent)) in axes.iter().enumerate() {
            if varies || extent < 2 {
                continue;
            }
            for y in 0..ny {
                for b in 0..nb {
                    for e in 0..ne {
                        let idx = |t: usize| match axis {
                            0 => at(t, f, b, e),
                            1 => at(y, f, t, e),
                            _ => at(y, f, b, t),
                        };
                        let lead = [y, b, e][axis];
                        if lead != 0 {
                            continue;
                        }
                        let mean = (0..extent).map(|t| grid[idx(t)]).sum::<f64>() / extent as f64;
                        for t in 0..extent {
                            grid[idx(t)] = mean;
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Stacks raw grids of several items into an `(n, year, feature, base, equipment)` batch.
pub fn raw_batch<T: Scalar>(panel: &DemandPanel, items: &[usize]) -> Result<Tensor<T>> {
    let shape = [
        items.len(),
        panel.years().len(),
        panel.schema().k(),
        panel.bases().len(),
        panel.equipment().len(),
    ];
    let mut data = Vec::with_capacity(shape.iter().product());
    for &i in items {
        data.extend(raw_grid(panel, i)?.into_iter().map(T::of));
    }
    Tensor::from_vec(&shape, data)
}

/// Gathers a raw `(year, feature, base, equipment)` grid into axis positions.
pub fn permute_grid<T: Scalar>(raw: &[T], dims: [usize; 4], positions: [&[usize]; 3]) -> Vec<T> {
    let [ny, nf, nb, ne] = dims;
    let mut out = Vec::with_capacity(raw.len());
    for y in 0..ny {
        for &f in positions[0] {
            for &b in positions[1] {
                for &e in positions[2] {
                    out.push(raw[((y * nf + f) * nb + b) * ne + e]);
                }
            }
        }
    }
    out
}

/// Renders one item as a voxel image `(year, feature, base, equipment)` with
/// the given cluster order per axis.
pub fn voxelize<T: Scalar>(
    panel: &DemandPanel,
    item: usize,
    clusterings: &[LevelClustering; 3],
    orders: &[Vec<usize>; 3],
) -> Result<Tensor<T>> {
    let dims = [
        panel.years().len(),
        panel.schema().k(),
        panel.bases().len(),
        panel.equipment().len(),
    ];
    for (a, c) in clusterings.iter().enumerate() {
        if c.members() != dims[a + 1] {
            return Err(Error::ShapeMismatch(format!(
                "{} clustering covers {} members, panel has {}",
                c.axis.name(),
                c.members(),
                dims[a + 1]
            )));
        }
        let mut sorted = orders[a].clone();
        sorted.sort_unstable();
        if sorted != (0..c.count()).collect::<Vec<_>>() {
            return Err(Error::ShapeMismatch(format!(
                "order {:?} is not a permutation of the {} clusters",
                orders[a],
                c.axis.name()
            )));
        }
    }
    let raw: Vec<T> = raw_grid(panel, item)?.into_iter().map(T::of).collect();
    let pos = [0, 1, 2].map(|a| clusterings[a].positions(&orders[a]));
    let data = permute_grid(&raw, dims, [&pos[0], &pos[1], &pos[2]]);
    Tensor::from_vec(&dims, data)
}

/// Logit leaves of the embedding parameters on a tape.
pub fn embedding_vars<T: Scalar>(tape: &mut Tape<T>, params: &EmbeddingParams<T>, requires_grad: bool) -> Vec<Var> {
    params
        .logits
        .iter()
        .map(|l| tape.leaf(Tensor::from_vec(&[l.len()], l.clone()).unwrap(), requires_grad))
        .collect()
}

/// Differentiable mixture of candidate voxel images for a raw batch already on
/// the tape.
pub fn mixed_embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    raw: Var,
    space: &CandidateMappingSpace,
    logits: &[Var],
) -> Result<Var> {
    let maps = space.maps().clone();
    match space.mode() {
        MappingMode::Joint => {
            let [alpha] = logits else {
                return Err(Error::ShapeMismatch("joint mode takes one logit vector".into()));
            };
            tape.joint_mix(raw, *alpha, maps)
        }
        MappingMode::Factorized => {
            let [af, ab, ae] = logits else {
                return Err(Error::ShapeMismatch("factorized mode takes three logit vectors".into()));
            };
            let x = tape.axis_mix(raw, *af, Axis::Feature.tensor_axis(), maps[0].clone())?;
            let x = tape.axis_mix(x, *ab, Axis::Base.tensor_axis(), maps[1].clone())?;
            tape.axis_mix(x, *ae, Axis::Equipment.tensor_axis(), maps[2].clone())
        }
    }
}

/// Softmax-weighted candidate image of one item.
pub fn mixed_embed<T: Scalar>(
    panel: &DemandPanel,
    item: usize,
    space: &CandidateMappingSpace,
    params: &EmbeddingParams<T>,
) -> Result<Tensor<T>> {
    params.check(space)?;
    let raw = raw_batch::<T>(panel, &[item])?;
    let mut tape = Tape::new();
    let x = tape.constant(raw);
    let logits = embedding_vars(&mut tape, params, false);
    let out = mixed_embed_on_tape(&mut tape, x, space, &logits)?;
    let t = tape.value(out);
    let s = t.shape();
    Tensor::from_vec(&s[1..], t.data().to_vec())
}

/// Chosen cluster orders of a trained embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedEmbedding {
    pub clusterings: [LevelClustering; 3],
    /// Cluster order per axis (feature, base, equipment).
    pub orders: [Vec<usize>; 3],
}

impl DerivedEmbedding {
    /// Identity orders over the given clusterings.
    pub fn identity(clusterings: [LevelClustering; 3]) -> Self {
        let orders = clusterings.each_ref().map(|c| (0..c.count()).collect());
        Self { clusterings, orders }
    }

    pub fn voxelize<T: Scalar>(&self, panel: &DemandPanel, item: usize) -> Result<Tensor<T>> {
        voxelize(panel, item, &self.clusterings, &self.orders)
    }

    /// `(n, year, feature, base, equipment)` batch of voxel images.
    pub fn batch<T: Scalar>(&self, panel: &DemandPanel, items: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        let mut shape = vec![items.len()];
        for (n, &i) in items.iter().enumerate() {
            let v = self.voxelize::<T>(panel, i)?;
            if n == 0 {
                shape.extend_from_slice(v.shape());
            }
            data.extend_from_slice(v.data());
        }
        if items.is_empty() {
            shape.extend([
                panel.years().len(),
                panel.schema().k(),
                panel.bases().len(),
                panel.equipment().len(),
            ]);
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Index of the selected candidate in each logit vector: argmax, lowest index on ties.
pub fn derive_indices<T: Scalar>(params: &EmbeddingParams<T>) -> Vec<usize> {
    params
        .logits
        .iter()
        .map(|l| argmax(l).unwrap_or(0))
        .collect()
}

/// Discretizes the embedding: the highest-weight candidate per logit vector.
pub fn derive_embedding<T: Scalar>(
    params: &EmbeddingParams<T>,
    space: &CandidateMappingSpace,
) -> Result<DerivedEmbedding> {
    params.check(space)?;
    let idx = derive_indices(params);
    let triple = match space.mode() {
        MappingMode::Joint => space.joint_triple(idx[0]),
        MappingMode::Factorized => [idx[0], idx[1], idx[2]],
    };
    Ok(DerivedEmbedding {
        clusterings: space.clusterings().clone(),
        orders: space.orders_for(triple),
    })
}
