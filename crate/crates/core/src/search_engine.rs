//! First-order bilevel search over network weights, cell logits and embedding
//! logits, followed by derivation and retraining of the discrete model.
//!
//! Each search step first moves the weights along the training-loss gradient
//! (momentum SGD), then moves both sets of logits along the validation-loss
//! gradient (Adam) with the weights held fixed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{DemandPanel, FoldSplit};
use crate::embedding::{
    cluster_levels, derive_embedding, embedding_vars, enumerate_candidates, mixed_embed_on_tape, raw_batch,
    Axis, CandidateMappingSpace, DerivedEmbedding, EmbeddingParams, MappingMode, DEFAULT_JOINT_CAP,
};
use crate::error::{Error, Result};
use crate::evaluation::{demand_target, with_target, ForecastResult};
use crate::nn::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::supernet3d::{derive_genotype, ArchParams, Ctx, Genotype, Network, SupernetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer settings shared by the search and the retraining stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilevelConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub weight_momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_weight_decay: f64,
    /// Half-width of the uniform noise added to the zero logit initialization.
    pub alpha_init_noise: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            weight_lr: 0.025,
            weight_momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            arch_lr: 3e-3,
            arch_beta1: 0.5,
            arch_beta2: 0.999,
            arch_weight_decay: 1e-3,
            alpha_init_noise: 1e-3,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("weight_lr", self.weight_lr),
            ("arch_lr", self.arch_lr),
            ("weight_decay", self.weight_decay),
            ("arch_weight_decay", self.arch_weight_decay),
            ("grad_clip", self.grad_clip),
            ("alpha_init_noise", self.alpha_init_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be a finite value >= 0")));
            }
        }
        for (name, v) in [
            ("weight_momentum", self.weight_momentum),
            ("arch_beta1", self.arch_beta1),
            ("arch_beta2", self.arch_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the voxel candidate space is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub mode: MappingMode,
    /// Largest cluster count tried per axis (feature, base, equipment).
    pub max_clusters: [usize; 3],
    pub joint_cap: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            mode: MappingMode::Factorized,
            max_clusters: [5, 4, 3],
            joint_cap: DEFAULT_JOINT_CAP,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub embedding: EmbeddingConfig,
    pub supernet: SupernetConfig,
    pub bilevel: BilevelConfig,
}

/// Affine scaling of annual demand used as the regression target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        let (mean, std) = crate::evaluation::mean_std(values);
        if !mean.is_finite() {
            return Self { mean: 0.0, std: 1.0 };
        }
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn unscale(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Input images and demand targets of a set of items.
#[derive(Clone, Debug)]
pub struct Samples<T> {
    pub items: Vec<usize>,
    /// `(n, year, feature, base, equipment)`.
    pub inputs: Tensor<T>,
    pub demand: Vec<f64>,
}

impl<T: Scalar> Samples<T> {
    /// Raw (unordered) grids, for the supernet's embedding mixture.
    pub fn raw(panel: &DemandPanel, items: &[usize]) -> Result<Self> {
        let items = with_target(panel, items);
        Ok(Self {
            inputs: raw_batch(panel, &items)?,
            demand: items.iter().map(|&i| demand_target(panel, i).unwrap()).collect(),
            items,
        })
    }

    /// Voxel images under a fixed embedding.
    pub fn embedded(panel: &DemandPanel, items: &[usize], embedding: &DerivedEmbedding) -> Result<Self> {
        let items = with_target(panel, items);
        Ok(Self {
            inputs: embedding.batch(panel, &items)?,
            demand: items.iter().map(|&i| demand_target(panel, i).unwrap()).collect(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sub-batch of the given sample positions with scaled targets.
    pub fn batch(&self, idx: &[usize], scaler: &TargetScaler) -> (Tensor<T>, Vec<T>) {
        let shape = self.inputs.shape();
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
        }
        let mut s = shape.to_vec();
        s[0] = idx.len();
        let y = idx.iter().map(|&i| T::of(scaler.scale(self.demand[i]))).collect();
        (Tensor::from_vec(&s, data).expect("sized"), y)
    }

    pub fn all(&self, scaler: &TargetScaler) -> (Tensor<T>, Vec<T>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, scaler)
    }
}

/// Shuffled mini-batches of `0..n` for one epoch. A trailing batch of a
/// single sample joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Adam moments for a list of parameter vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<T>], grads: &[Vec<T>], cfg: &BilevelConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.arch_beta1, cfg.arch_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = T::of(cfg.arch_lr);
        let wd = T::of(cfg.arch_weight_decay);
        for (k, p) in params.iter_mut().enumerate() {
            for j in 0..p.len() {
                let g = grads[k][j] + wd * p[j];
                self.m[k][j] = T::of(b1) * self.m[k][j] + T::of(1.0 - b1) * g;
                self.v[k][j] = T::of(b2) * self.v[k][j] + T::of(1.0 - b2) * g * g;
                let mh = self.m[k][j] / T::of(c1);
                let vh = self.v[k][j] / T::of(c2);
                p[j] = p[j] - lr * mh / (vh.sqrt() + T::of(1e-8));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything a search needs to continue: weights, logits, optimizer state,
/// counters and history.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SearchState<T> {
    pub version: u32,
    pub network: Network<T>,
    pub momentum: Vec<Tensor<T>>,
    pub arch: ArchParams<T>,
    pub embedding: EmbeddingParams<T>,
    pub adam: Adam<T>,
    pub epoch: usize,
    pub steps: usize,
    pub history: Vec<EpochLoss>,
    pub initial_val_loss: f64,
    pub scaler: TargetScaler,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub train: f64,
    pub val: f64,
}

impl<T: Scalar> SearchState<T> {
    /// Fresh state: seeded weights and near-uniform logits.
    pub fn new(
        space: &CandidateMappingSpace,
        input_dims: [usize; 4],
        config: &SearchConfig,
        scaler: TargetScaler,
    ) -> Result<Self> {
        config.bilevel.validate()?;
        let network = Network::supernet(&config.supernet, input_dims)?;
        let momentum = network.store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut arch = ArchParams::zeros(&config.supernet.ops, config.supernet.nodes);
        let mut embedding = EmbeddingParams::zeros(space);
        let noise = config.bilevel.alpha_init_noise;
        if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.bilevel.seed ^ 0xA1FA);
            let u = Uniform::new_inclusive(-noise, noise).expect("valid noise");
            for v in embedding
                .logits
                .iter_mut()
                .chain(arch.normal.iter_mut())
                .chain(arch.reduce.iter_mut())
                .flatten()
            {
                *v = T::of(u.sample(&mut rng));
            }
        }
        let mut adam_lens: Vec<usize> = embedding.logits.iter().map(Vec::len).collect();
        adam_lens.extend(arch.normal.iter().chain(&arch.reduce).map(Vec::len));
        Ok(Self {
            version: CHECKPOINT_VERSION,
            network,
            momentum,
            arch,
            embedding,
            adam: Adam::new(&adam_lens),
            epoch: 0,
            steps: 0,
            history: Vec::new(),
            initial_val_loss: f64::NAN,
            scaler,
        })
    }

    fn logit_vectors(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = self.embedding.logits.iter_mut().collect();
        out.extend(self.arch.normal.iter_mut());
        out.extend(self.arch.reduce.iter_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.arch.is_finite()
            && self.embedding.logits.iter().flatten().all(|v| v.is_finite())
            && self.network.store.tensors.iter().all(Tensor::is_finite)
    }
}

struct Forward {
    loss: Var,
    embed: Vec<Var>,
    normal: Vec<Var>,
    reduce: Vec<Var>,
}

fn supernet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Ctx<'_, T>,
    state: &SearchState<T>,
    space: &CandidateMappingSpace,
    x: &Tensor<T>,
    y: &[T],
    arch_grad: bool,
) -> Result<Forward> {
    let xv = tape.constant(x.clone());
    let embed = embedding_vars(tape, &state.embedding, arch_grad);
    let arch = state.arch.vars(tape, arch_grad);
    let img = mixed_embed_on_tape(tape, xv, space, &embed)?;
    let pred = state.network.forward(tape, ctx, img, Some(&arch))?;
    let loss = tape.mse(pred, y)?;
    Ok(Forward {
        loss,
        embed,
        normal: arch.normal,
        reduce: arch.reduce,
    })
}

fn scalar_loss<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64_lossy()
}

/// Collects per-parameter gradients of a network forward (zeros for unused ones).
fn weight_grads<T: Scalar>(
    store_shapes: &[Tensor<T>],
    ctx: &Ctx<'_, T>,
    grads: &mut crate::nn::Gradients<T>,
) -> Vec<Tensor<T>> {
    let mut out: Vec<Tensor<T>> = store_shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (i, v) in ctx.param_vars() {
        if let Some(g) = grads.take(v) {
            out[i] = g;
        }
    }
    out
}

/// Momentum SGD with L2 decay and global-norm clipping.
fn sgd_update<T: Scalar>(
    params: &mut [Tensor<T>],
    momentum: &mut [Tensor<T>],
    mut grads: Vec<Tensor<T>>,
    cfg: &BilevelConfig,
) {
    let norm: f64 = grads
        .iter()
        .map(|g| g.dot(g).to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = T::of(cfg.grad_clip / norm);
        for g in &mut grads {
            *g = g.map(|v| v * s);
        }
    }
    let mu = T::of(cfg.weight_momentum);
    let wd = T::of(cfg.weight_decay);
    let lr = T::of(cfg.weight_lr);
    for ((p, m), g) in params.iter_mut().zip(momentum.iter_mut()).zip(&grads) {
        let pd = p.data_mut();
        let md = m.data_mut();
        for j in 0..pd.len() {
            md[j] = mu * md[j] + g.data()[j] + wd * pd[j];
            pd[j] = pd[j] - lr * md[j];
        }
    }
}

/// One alternating update: weights on the training batch, then all logits on
/// the validation batch with the weights fixed.
pub fn search_step<T: Scalar>(
    state: &mut SearchState<T>,
    space: &CandidateMappingSpace,
    train: (&Tensor<T>, &[T]),
    val: (&Tensor<T>, &[T]),
    cfg: &BilevelConfig,
) -> Result<StepLoss> {
    let (epoch, step) = (state.epoch, state.steps);
    let non_finite = |phase| Error::NonFiniteLoss { epoch, step, phase };

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&state.network.store, true, true);
    let fwd = supernet_loss(&mut tape, &mut ctx, state, space, train.0, train.1, false)?;
    let train_loss = scalar_loss(&tape, fwd.loss);
    if !train_loss.is_finite() {
        return Err(non_finite("weights"));
    }
    let mut grads = tape.backward(fwd.loss);
    let wg = weight_grads(&state.network.store.tensors, &ctx, &mut grads);
    let updates = std::mem::take(&mut ctx.bn_updates);
    drop(ctx);
    drop(tape);
    sgd_update(&mut state.network.store.tensors, &mut state.momentum, wg, cfg);
    Ctx::commit_running(updates, &mut state.network.store);

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&state.network.store, true, false);
    let fwd = supernet_loss(&mut tape, &mut ctx, state, space, val.0, val.1, true)?;
    let val_loss = scalar_loss(&tape, fwd.loss);
    if !val_loss.is_finite() {
        return Err(non_finite("architecture"));
    }
    let grads = tape.backward(fwd.loss);
    let take = |v: &Var| -> Vec<T> {
        grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![T::zero(); tape.value(*v).len()])
    };
    let ag: Vec<Vec<T>> = fwd
        .embed
        .iter()
        .chain(&fwd.normal)
        .chain(&fwd.reduce)
        .map(take)
        .collect();
    drop(ctx);
    drop(tape);
    let mut adam = std::mem::replace(&mut state.adam, Adam::new(&[]));
    adam.step(&mut state.logit_vectors(), &ag, cfg);
    state.adam = adam;
    state.steps += 1;
    if !state.is_finite() {
        return Err(non_finite("update"));
    }
    Ok(StepLoss {
        train: train_loss,
        val: val_loss,
    })
}

/// Supernet loss on a whole sample set, batch statistics, no state change.
pub fn evaluate_search_loss<T: Scalar>(
    state: &SearchState<T>,
    space: &CandidateMappingSpace,
    x: &Tensor<T>,
    y: &[T],
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&state.network.store, true, false);
    let fwd = supernet_loss(&mut tape, &mut ctx, state, space, x, y, false)?;
    Ok(scalar_loss(&tape, fwd.loss))
}

/// Writes `value` as JSON to `path` through a temporary file and a rename.
pub fn write_json_atomic<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, value)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &SearchState<T>) -> Result<()> {
    write_json_atomic(path, state)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SearchState<T>> {
    let state: SearchState<T> = serde_json::from_reader(std::io::BufReader::new(fs::File::open(path)?))?;
    if state.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            state.version
        )));
    }
    Ok(state)
}

/// Fixed inputs of one search: the candidate space and the fold's samples.
#[derive(Clone, Debug)]
pub struct SearchData<T> {
    pub space: CandidateMappingSpace,
    pub train: Samples<T>,
    pub validation: Samples<T>,
    pub input_dims: [usize; 4],
}

impl<T: Scalar> SearchData<T> {
    /// Clusters the axes and collects the fold's raw training and validation grids.
    pub fn prepare(panel: &DemandPanel, fold: &FoldSplit, config: &EmbeddingConfig) -> Result<Self> {
        let clusterings = [Axis::Feature, Axis::Base, Axis::Equipment]
            .into_iter()
            .zip(config.max_clusters)
            .map(|(axis, max)| cluster_levels(panel, axis, max, config.seed))
            .collect::<Result<Vec<_>>>()?;
        let clusterings: [_; 3] = clusterings.try_into().expect("three axes");
        let space = enumerate_candidates(&clusterings, config.mode, config.joint_cap)?;
        let train = Samples::raw(panel, &fold.train)?;
        let validation = Samples::raw(panel, &fold.validation)?;
        if train.is_empty() || validation.is_empty() {
            return Err(Error::EmptyInput);
        }
        let input_dims = [
            panel.years().len(),
            panel.schema().k(),
            panel.bases().len(),
            panel.equipment().len(),
        ];
        Ok(Self {
            space,
            train,
            validation,
            input_dims,
        })
    }

    pub fn initial_state(&self, config: &SearchConfig) -> Result<SearchState<T>> {
        let mut state = SearchState::new(&self.space, self.input_dims, config, TargetScaler::fit(&self.train.demand))?;
        let (vx, vy) = self.validation.all(&state.scaler);
        state.initial_val_loss = evaluate_search_loss(&state, &self.space, &vx, &vy)?;
        Ok(state)
    }
}

/// Runs epochs until `state.epoch == config.bilevel.epochs`, appending to the
/// history and checkpointing at the configured cadence.
pub fn continue_search<T: Scalar>(
    state: &mut SearchState<T>,
    data: &SearchData<T>,
    config: &SearchConfig,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let cfg = &config.bilevel;
    let (vx, vy) = data.validation.all(&state.scaler);
    while state.epoch < cfg.epochs {
        let batches = epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, state.epoch);
        let val_batches = epoch_batches(data.validation.len(), cfg.batch_size, cfg.seed ^ 0x5A17, state.epoch);
        let mut total = 0.0;
        for (s, b) in batches.iter().enumerate() {
            let (tx, ty) = data.train.batch(b, &state.scaler);
            let (bx, by) = data.validation.batch(&val_batches[s % val_batches.len()], &state.scaler);
            total += search_step(state, &data.space, (&tx, &ty), (&bx, &by), cfg)?.train;
        }
        let val_loss = evaluate_search_loss(state, &data.space, &vx, &vy)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step: state.steps,
                phase: "validation",
            });
        }
        state.history.push(EpochLoss {
            epoch: state.epoch,
            train_loss: total / batches.len() as f64,
            val_loss,
        });
        state.epoch += 1;
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && (state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs) {
                save_checkpoint(path, state)?;
            }
        }
    }
    Ok(())
}

/// Derived genotype (with embedding orders) of a search state.
pub fn derive<T: Scalar>(state: &SearchState<T>, space: &CandidateMappingSpace) -> Result<Genotype> {
    let mut g = derive_genotype(&state.arch);
    g.embedding = Some(derive_embedding(&state.embedding, space)?);
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome<T> {
    pub genotype: Genotype,
    pub history: Vec<EpochLoss>,
    pub initial_val_loss: f64,
    pub state: SearchState<T>,
}

/// Clusters, enumerates candidates, searches and derives.
pub fn run_search<T: Scalar>(
    panel: &DemandPanel,
    fold: &FoldSplit,
    config: &SearchConfig,
    checkpoint: Option<&Path>,
) -> Result<SearchOutcome<T>> {
    let data = SearchData::prepare(panel, fold, &config.embedding)?;
    let mut state = data.initial_state(config)?;
    continue_search(&mut state, &data, config, checkpoint)?;
    let genotype = derive(&state, &data.space)?;
    Ok(SearchOutcome {
        genotype,
        history: state.history.clone(),
        initial_val_loss: state.initial_val_loss,
        state,
    })
}

/// A retrained discrete model with its input embedding and target scaling.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Forecaster<T> {
    pub network: Network<T>,
    pub embedding: DerivedEmbedding,
    pub scaler: TargetScaler,
    pub history: Vec<f64>,
}

impl<T: Scalar> Forecaster<T> {
    /// Annual-demand forecasts, clamped at zero.
    pub fn predict(&self, panel: &DemandPanel, items: &[usize]) -> Result<Vec<f64>> {
        let x = self.embedding.batch::<T>(panel, items)?;
        Ok(self
            .network
            .predict(&x, None)?
            .into_iter()
            .map(|p| self.scaler.unscale(p.to_f64_lossy()).max(0.0))
            .collect())
    }
}

pub const TAB2VOX_MODEL_ID: &str = "tab2vox";

/// Builds the discrete network of `genotype`, trains it on the fold's training
/// and validation items and forecasts its test items.
pub fn train_derived<T: Scalar>(
    genotype: &Genotype,
    panel: &DemandPanel,
    fold: &FoldSplit,
    supernet: &SupernetConfig,
    cfg: &BilevelConfig,
) -> Result<(Forecaster<T>, ForecastResult)> {
    cfg.validate()?;
    let start = Instant::now();
    let embedding = genotype
        .embedding
        .clone()
        .ok_or_else(|| Error::ShapeMismatch("genotype carries no embedding orders".into()))?;
    let fit_items: Vec<usize> = fold.train.iter().chain(&fold.validation).copied().collect();
    let data = Samples::<T>::embedded(panel, &fit_items, &embedding)?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dims = data.inputs.shape();
    let input_dims = [dims[1], dims[2], dims[3], dims[4]];
    let mut network = Network::<T>::derived(supernet, input_dims, genotype)?;
    let scaler = TargetScaler::fit(&data.demand);
    let mut momentum: Vec<Tensor<T>> = network.store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for b in &batches {
            let (x, y) = data.batch(b, &scaler);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&network.store, true, true);
            let xv = tape.constant(x);
            let pred = network.forward(&mut tape, &mut ctx, xv, None)?;
            let loss = tape.mse(pred, &y)?;
            let lv = scalar_loss(&tape, loss);
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    phase: "retrain",
                });
            }
            total += lv;
            let mut grads = tape.backward(loss);
            let wg = weight_grads(&network.store.tensors, &ctx, &mut grads);
            let updates = std::mem::take(&mut ctx.bn_updates);
            drop(ctx);
            drop(tape);
            sgd_update(&mut network.store.tensors, &mut momentum, wg, cfg);
            Ctx::commit_running(updates, &mut network.store);
            steps += 1;
        }
        history.push(total / batches.len() as f64);
    }
    let forecaster = Forecaster {
        network,
        embedding,
        scaler,
        history,
    };
    let test = with_target(panel, &fold.test);
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let forecast = forecaster.predict(panel, &test)?;
    let result = ForecastResult {
        model: TAB2VOX_MODEL_ID.to_string(),
        fold: fold.fold,
        items: test.iter().map(|&i| panel.items()[i].clone()).collect(),
        actual: test.iter().map(|&i| demand_target(panel, i).unwrap()).collect(),
        forecast,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((forecaster, result))
}

/// Largest component-wise relative error between an analytic gradient and
/// central differences of `f` at `point`. `f` returns the value and, when
/// asked, its analytic gradient.
pub fn gradient_check<F>(mut f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidEpsilon(eps));
    }
    let (_, analytic) = f(point);
    if analytic.len() != point.len() {
        return Err(Error::LengthMismatch(point.len(), analytic.len()));
    }
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let up = f(&x).0;
        x[i] = point[i] - eps;
        let down = f(&x).0;
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_check_affine_and_eps() {
        let f = |x: &[f64]| (3.0 * x[0] - 2.0 * x[1] + 1.0, vec![3.0, -2.0]);
        assert!(gradient_check(f, &[0.3, -1.2], 1e-3).unwrap() < 1e-8);
        assert!(matches!(gradient_check(f, &[0.0, 0.0], 0.0), Err(Error::InvalidEpsilon(_))));
    }

    #[test]
    fn adam_step_decreases_quadratic() {
        // L(a) = (a - 2)^2 at a = 0
        let cfg = BilevelConfig {
            arch_weight_decay: 0.0,
            arch_lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![0.0f64];
        let mut adam = Adam::new(&[1]);
        let loss = |a: f64| (a - 2.0) * (a - 2.0);
        let before = loss(p[0]);
        let g = vec![vec![2.0 * (p[0] - 2.0)]];
        adam.step(&mut [&mut p], &g, &cfg);
        assert!(loss(p[0]) < before);
    }

    #[test]
    fn sgd_step_decreases_quadratic() {
        let cfg = BilevelConfig {
            weight_decay: 0.0,
            weight_lr: 0.1,
            ..Default::default()
        };
        let mut w = vec![Tensor::scalar(3.0f64)];
        let mut m = vec![Tensor::scalar(0.0f64)];
        let before = w[0].data()[0].powi(2);
        let g = vec![Tensor::scalar(2.0 * w[0].data()[0])];
        sgd_update(&mut w, &mut m, g, &cfg);
        assert!(w[0].data()[0].powi(2) < before);
    }

    #[test]
    fn batches_cover_every_sample() {
        let b = epoch_batches(33, 16, 4, 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
        assert_eq!(b.len(), 2);
        assert_eq!(b, epoch_batches(33, 16, 4, 2));
    }
}
