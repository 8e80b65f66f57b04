//! Run configuration and the pipeline stages behind the command-line tool.
//!
//! Stages communicate through files in the output directory, so each one can
//! be rerun on its own: `synth`, `ingest`, `search`, `train`, `evaluate`,
//! `select` and `report`. Every artifact records the hash of the effective
//! configuration and the top-level seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    generate_synthetic, impute_missing, ingest_panel, make_folds, normalize, remove_outliers, DemandPanel,
    FoldSplit, GroundTruth, LevelFlags, NormStats, SyntheticSpec, DEFAULT_TARGET, FOLD_COUNT,
};
use crate::embedding::DerivedEmbedding;
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_models, demand_history, mean_std, minmax_accuracy, read_results, run_baseline, write_results,
    BaselineKind, ForecastResult, MetricReport,
};
use crate::plot;
use crate::scalar::Scalar;
use crate::search_engine::{run_search, train_derived, BilevelConfig, EmbeddingConfig, EpochLoss, SearchConfig};
use crate::selector::{
    cluster_items, solve_selection_robust, GroupEntry, ItemGroup, ItemStat, ModelEntry, SelectionProblem,
    SelectionResult,
};
use crate::supernet3d::{Genotype, SupernetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Run-time budget in seconds; absent means unbounded.
    pub budget_seconds: Option<f64>,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub max_groups: usize,
    /// Feature whose item mean is the item cost; the first feature if unset.
    pub cost_feature: Option<String>,
    /// Fixed per-model run times replacing measured ones.
    pub runtime_overrides: BTreeMap<String, f64>,
    /// Solve this problem file instead of building one from results.
    pub problem: Option<PathBuf>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            budget_seconds: None,
            w1: None,
            w2: None,
            max_groups: 4,
            cost_feature: None,
            runtime_overrides: BTreeMap::new(),
            problem: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Item whose voxel image is plotted; the first test item if unset.
    pub sample_item: Option<String>,
}

/// Everything a run needs. Component seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Panel CSV; when unset, `<out>/panel.csv` or a synthetic panel is used.
    pub panel: Option<PathBuf>,
    pub target: String,
    pub synthetic: SyntheticSpec,
    pub out: PathBuf,
    pub seed: u64,
    pub folds: Vec<usize>,
    pub precision: Precision,
    pub embedding: EmbeddingConfig,
    pub supernet: SupernetConfig,
    pub search: BilevelConfig,
    pub train: BilevelConfig,
    pub baselines: Vec<BaselineKind>,
    /// Extra result files in the `model,fold,item,actual,forecast,runtime_seconds` format.
    pub external_results: Vec<PathBuf>,
    pub selection: SelectionConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: None,
            target: DEFAULT_TARGET.to_string(),
            synthetic: SyntheticSpec::default(),
            out: PathBuf::from("out"),
            seed: 0,
            folds: (0..FOLD_COUNT).collect(),
            precision: Precision::F32,
            embedding: EmbeddingConfig::default(),
            supernet: SupernetConfig::default(),
            search: BilevelConfig::default(),
            train: BilevelConfig {
                epochs: 20,
                ..BilevelConfig::default()
            },
            baselines: BaselineKind::ALL.to_vec(),
            external_results: Vec::new(),
            selection: SelectionConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// A 64-bit seed for the named random stream of a run.
pub fn substream(seed: u64, name: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{name}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.folds.is_empty() || self.folds.iter().any(|&f| f >= FOLD_COUNT) {
            return Err(Error::InvalidConfig(format!("folds must be a non-empty subset of 0..{FOLD_COUNT}")));
        }
        if self.embedding.max_clusters.contains(&0) {
            return Err(Error::InvalidConfig("embedding.max_clusters entries must be >= 1".into()));
        }
        if self.selection.max_groups == 0 {
            return Err(Error::InvalidConfig("selection.max_groups must be >= 1".into()));
        }
        if let Some(t) = self.selection.budget_seconds {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig("selection.budget_seconds must be >= 0".into()));
            }
        }
        for w in [self.selection.w1, self.selection.w2].into_iter().flatten() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig("selection weights must be finite and >= 0".into()));
            }
        }
        if self.selection.runtime_overrides.values().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidConfig("runtime overrides must be >= 0".into()));
        }
        Ok(())
    }

    /// The configuration with every component seed set from its substream.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.synthetic.seed = substream(self.seed, "data");
        c.embedding.seed = substream(self.seed, "clustering");
        c.supernet.seed = substream(self.seed, "weights");
        c.search.seed = substream(self.seed, "search");
        c.train.seed = substream(self.seed, "training");
        c.folds.sort_unstable();
        c.folds.dedup();
        c
    }

    pub fn fold_seed(&self) -> u64 {
        substream(self.seed, "folds")
    }

    /// SHA-256 of the effective configuration, excluding the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.effective();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash(),
            seed: self.seed,
        }
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.out.join(format!("fold{fold}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// A JSON artifact: provenance fields next to the body's own fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<B> {
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub body: B,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn write_json_artifact<B: Serialize>(path: &Path, prov: &Provenance, body: &B) -> Result<()> {
    let art = Artifact {
        config_hash: Some(prov.config_hash.clone()),
        seed: Some(prov.seed),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&art)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json_artifact<B: DeserializeOwned>(path: &Path) -> Result<B> {
    let art: Artifact<B> = serde_json::from_slice(&fs::read(path)?)?;
    Ok(art.body)
}

/// Writes CSV content produced by `fill` behind a `# config_hash=... seed=...` line.
pub fn write_csv_artifact(
    path: &Path,
    prov: &Provenance,
    fill: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut buf = format!("# config_hash={} seed={}\n", prov.config_hash, prov.seed).into_bytes();
    fill(&mut buf)?;
    write_atomic(path, &buf)
}

fn png_text(prov: &Provenance) -> Vec<(&'static str, String)> {
    vec![("config_hash", prov.config_hash.clone()), ("seed", prov.seed.to_string())]
}

/// Raw panel: the configured file, the `synth` output, or a fresh synthetic draw.
pub fn load_panel(config: &RunConfig) -> Result<DemandPanel> {
    let cfg = config.effective();
    let path = cfg.panel.clone().or_else(|| {
        let p = cfg.out.join("panel.csv");
        p.exists().then_some(p)
    });
    match path {
        Some(p) => ingest_panel(fs::File::open(p)?, &cfg.target),
        None => Ok(generate_synthetic(&cfg.synthetic)?.0),
    }
}

/// Outlier screening and imputation; fold-independent.
pub fn clean_panel(raw: &DemandPanel) -> Result<DemandPanel> {
    impute_missing(&remove_outliers(raw))
}

/// Cleaned panel normalized with the fold's training statistics.
pub fn fold_panel(clean: &DemandPanel, fold: &FoldSplit) -> (DemandPanel, NormStats) {
    normalize(clean, &fold.train)
}

fn selected_folds(cfg: &RunConfig, clean: &DemandPanel) -> Result<Vec<FoldSplit>> {
    let all = make_folds(clean, cfg.fold_seed())?;
    Ok(cfg.folds.iter().map(|&f| all[f].clone()).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthOutput {
    pub truth: GroundTruth,
}

/// Writes a synthetic panel and its planted structure.
pub fn stage_synth(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let (panel, truth) = generate_synthetic(&cfg.synthetic)?;
    let panel_path = cfg.out.join("panel.csv");
    let truth_path = cfg.out.join("ground_truth.json");
    write_csv_artifact(&panel_path, &prov, |buf| panel.write_csv(buf))?;
    write_json_artifact(&truth_path, &prov, &SynthOutput { truth })?;
    Ok(vec![panel_path, truth_path])
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub normalization: NormStats,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestSummary {
    pub items: usize,
    pub bases: usize,
    pub equipment: usize,
    pub years: Vec<i64>,
    pub features: Vec<String>,
    pub level_flags: Vec<LevelFlags>,
    pub missing_cells: usize,
    pub outlier_cells: usize,
    pub folds: Vec<FoldSummary>,
}

/// Validates, cleans and splits the panel; writes the cleaned panel and the
/// per-fold normalization statistics.
pub fn stage_ingest(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let raw = load_panel(&cfg)?;
    let screened = remove_outliers(&raw);
    let clean = impute_missing(&screened)?;
    let names = |idx: &[usize]| idx.iter().map(|&i| clean.items()[i].clone()).collect::<Vec<_>>();
    let folds = selected_folds(&cfg, &clean)?
        .into_iter()
        .map(|f| FoldSummary {
            fold: f.fold,
            train: names(&f.train),
            validation: names(&f.validation),
            test: names(&f.test),
            normalization: fold_panel(&clean, &f).1,
        })
        .collect();
    let summary = IngestSummary {
        items: clean.items().len(),
        bases: clean.bases().len(),
        equipment: clean.equipment().len(),
        years: clean.years().to_vec(),
        features: clean.schema().feature_ids().to_vec(),
        level_flags: clean.schema().level_flags().to_vec(),
        missing_cells: raw.missing_count(),
        outlier_cells: screened.missing_count() - raw.missing_count(),
        folds,
    };
    let clean_path = cfg.out.join("panel_clean.csv");
    let summary_path = cfg.out.join("ingest.json");
    write_csv_artifact(&clean_path, &prov, |buf| clean.write_csv(buf))?;
    write_json_artifact(&summary_path, &prov, &summary)?;
    Ok(vec![clean_path, summary_path])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldGenotype {
    pub fold: usize,
    pub genotype: Genotype,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenotypeFile {
    pub folds: Vec<FoldGenotype>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchSummary {
    pub fold: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub epochs: usize,
}

fn write_history(path: &Path, prov: &Provenance, rows: &[(usize, EpochLoss)]) -> Result<()> {
    write_csv_artifact(path, prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["fold", "epoch", "train_loss", "val_loss"])?;
        for (fold, h) in rows {
            w.write_record([
                fold.to_string(),
                h.epoch.to_string(),
                h.train_loss.to_string(),
                h.val_loss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn search_fold<T: Scalar>(
    cfg: &RunConfig,
    clean: &DemandPanel,
    fold: &FoldSplit,
    prov: &Provenance,
) -> Result<(FoldGenotype, Vec<EpochLoss>)> {
    let (panel, _) = fold_panel(clean, fold);
    let sc = SearchConfig {
        embedding: cfg.embedding.clone(),
        supernet: cfg.supernet.clone(),
        bilevel: cfg.search.clone(),
    };
    let dir = cfg.fold_dir(fold.fold);
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint.json");
    let out = run_search::<T>(&panel, fold, &sc, Some(&ckpt))?;
    let fg = FoldGenotype {
        fold: fold.fold,
        genotype: out.genotype,
    };
    write_json_artifact(&dir.join("genotype.json"), prov, &fg)?;
    let rows: Vec<(usize, EpochLoss)> = out.history.iter().map(|h| (fold.fold, *h)).collect();
    write_history(&dir.join("history.csv"), prov, &rows)?;
    let summary = SearchSummary {
        fold: fold.fold,
        initial_val_loss: out.initial_val_loss,
        final_val_loss: out.history.last().map_or(out.initial_val_loss, |h| h.val_loss),
        epochs: out.history.len(),
    };
    write_json_artifact(&dir.join("search.json"), prov, &summary)?;
    Ok((fg, out.history))
}

/// Runs the architecture search on every selected fold.
pub fn stage_search(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let clean = clean_panel(&load_panel(&cfg)?)?;
    let folds = selected_folds(&cfg, &clean)?;
    let results = folds
        .par_iter()
        .map(|f| match cfg.precision {
            Precision::F32 => search_fold::<f32>(&cfg, &clean, f, &prov),
            Precision::F64 => search_fold::<f64>(&cfg, &clean, f, &prov),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut genos = Vec::new();
    for (g, h) in results {
        rows.extend(h.into_iter().map(|e| (g.fold, e)));
        genos.push(g);
    }
    let gpath = cfg.out.join("genotype.json");
    let hpath = cfg.out.join("history.csv");
    write_json_artifact(&gpath, &prov, &GenotypeFile { folds: genos })?;
    write_history(&hpath, &prov, &rows)?;
    Ok(vec![gpath, hpath])
}

fn read_fold_genotype(cfg: &RunConfig, fold: usize) -> Result<Genotype> {
    let path = cfg.fold_dir(fold).join("genotype.json");
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "{} is missing; run `search` first",
            path.display()
        )));
    }
    Ok(read_json_artifact::<FoldGenotype>(&path)?.genotype)
}

fn train_fold<T: Scalar>(
    cfg: &RunConfig,
    clean: &DemandPanel,
    fold: &FoldSplit,
    prov: &Provenance,
) -> Result<ForecastResult> {
    let genotype = read_fold_genotype(cfg, fold.fold)?;
    let (panel, _) = fold_panel(clean, fold);
    let (forecaster, result) = train_derived::<T>(&genotype, &panel, fold, &cfg.supernet, &cfg.train)?;
    let dir = cfg.fold_dir(fold.fold);
    write_csv_artifact(&dir.join("results.csv"), prov, |buf| write_results(std::slice::from_ref(&result), buf))?;
    write_csv_artifact(&dir.join("train_history.csv"), prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["epoch", "train_loss"])?;
        for (e, l) in forecaster.history.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(result)
}

/// Retrains each fold's derived architecture and forecasts its test items.
pub fn stage_train(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let clean = clean_panel(&load_panel(&cfg)?)?;
    let folds = selected_folds(&cfg, &clean)?;
    folds
        .par_iter()
        .map(|f| match cfg.precision {
            Precision::F32 => train_fold::<f32>(&cfg, &clean, f, &prov),
            Precision::F64 => train_fold::<f64>(&cfg, &clean, f, &prov),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg.folds.iter().map(|&f| cfg.fold_dir(f).join("results.csv")).collect())
}

/// Metric table with provenance; run times live in `timings.csv`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub report: MetricReport,
}

fn read_results_file(path: &Path) -> Result<Vec<ForecastResult>> {
    read_results(fs::File::open(path)?)
}

/// Runs the baselines, gathers derived-model and external results, and
/// writes the combined result table and fold metrics.
pub fn stage_evaluate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let clean = clean_panel(&load_panel(&cfg)?)?;
    let folds = selected_folds(&cfg, &clean)?;
    let jobs: Vec<(usize, BaselineKind)> = (0..folds.len())
        .flat_map(|f| cfg.baselines.iter().map(move |&k| (f, k)))
        .collect();
    let panels: Vec<DemandPanel> = folds.iter().map(|f| fold_panel(&clean, f).0).collect();
    let mut results = jobs
        .par_iter()
        .map(|&(f, k)| run_baseline(k, &panels[f], &folds[f]))
        .collect::<Result<Vec<_>>>()?;
    for f in &folds {
        let p = cfg.fold_dir(f.fold).join("results.csv");
        if p.exists() {
            results.extend(read_results_file(&p)?);
        }
    }
    for p in &cfg.external_results {
        results.extend(read_results_file(p)?);
    }
    results.sort_by(|a, b| a.model.cmp(&b.model).then(a.fold.cmp(&b.fold)));
    let report = compare_models(&results)?;
    let rpath = cfg.out.join("results.csv");
    let mpath = cfg.out.join("metrics.csv");
    let jpath = cfg.out.join("metrics.json");
    let tpath = cfg.out.join("timings.csv");
    write_csv_artifact(&rpath, &prov, |buf| write_results(&results, buf))?;
    write_csv_artifact(&mpath, &prov, |buf| report.write_csv(buf))?;
    write_json_artifact(&jpath, &prov, &MetricsFile { report: report.clone() })?;
    write_csv_artifact(&tpath, &prov, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["model", "fold", "runtime_seconds"])?;
        for r in &results {
            w.write_record([r.model.clone(), r.fold.to_string(), r.runtime_seconds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(vec![rpath, mpath, jpath, tpath])
}

/// Item statistics for grouping: cost feature mean and mean past annual demand.
pub fn item_stats(cfg: &RunConfig, panel: &DemandPanel, items: &[usize]) -> Result<Vec<ItemStat>> {
    let feature = match &cfg.selection.cost_feature {
        Some(id) => panel
            .schema()
            .feature_ids()
            .iter()
            .position(|f| f == id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown cost feature `{id}`")))?,
        None => 0,
    };
    items
        .iter()
        .map(|&i| {
            let hist = demand_history(panel, i);
            Ok(ItemStat {
                item: panel.items()[i].clone(),
                cost: panel.item_feature_mean(i, feature).unwrap_or(0.0),
                demand: if hist.is_empty() {
                    0.0
                } else {
                    hist.iter().sum::<f64>() / hist.len() as f64
                },
            })
        })
        .collect()
}

/// Accuracy matrix `[group][model]`: mean and population std over folds of
/// the model's min-max accuracy on the group's items.
pub fn build_problem(
    groups: &[ItemGroup],
    results: &[ForecastResult],
    runtime_overrides: &BTreeMap<String, f64>,
) -> Result<SelectionProblem> {
    let mut models: Vec<String> = results.iter().map(|r| r.model.clone()).collect();
    models.sort();
    models.dedup();
    let group_of: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| grp.members.iter().map(move |m| (m.as_str(), g)))
        .collect();
    let mut accuracy = vec![vec![0.0; models.len()]; groups.len()];
    let mut std = vec![vec![0.0; models.len()]; groups.len()];
    let mut runtimes = Vec::with_capacity(models.len());
    for (j, m) in models.iter().enumerate() {
        let rs: Vec<&ForecastResult> = results.iter().filter(|r| &r.model == m).collect();
        for g in 0..groups.len() {
            let mut per_fold = Vec::new();
            for r in &rs {
                let (mut a, mut f) = (Vec::new(), Vec::new());
                for ((item, &ai), &fi) in r.items.iter().zip(&r.actual).zip(&r.forecast) {
                    if group_of.get(item.as_str()) == Some(&g) {
                        a.push(ai);
                        f.push(fi.max(0.0));
                    }
                }
                if !a.is_empty() {
                    per_fold.push(minmax_accuracy(&a, &f)?);
                }
            }
            if !per_fold.is_empty() {
                let (mu, sd) = mean_std(&per_fold);
                accuracy[g][j] = mu;
                std[g][j] = sd;
            }
        }
        let t = match runtime_overrides.get(m) {
            Some(&t) => t,
            None => mean_std(&rs.iter().map(|r| r.runtime_seconds).collect::<Vec<_>>()).0,
        };
        runtimes.push(t);
    }
    Ok(SelectionProblem {
        groups: groups
            .iter()
            .map(|g| GroupEntry {
                id: g.id.to_string(),
                size: g.size,
            })
            .collect(),
        models: models
            .into_iter()
            .zip(runtimes)
            .map(|(id, runtime_seconds)| ModelEntry { id, runtime_seconds })
            .collect(),
        accuracy,
        std,
        budget_seconds: None,
        w1: 1.0,
        w2: 0.0,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupsFile {
    pub groups: Vec<ItemGroup>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub problem: SelectionProblem,
    pub result: SelectionResult,
}

/// Solves the configured problem file, or groups the evaluated items and
/// solves the problem built from `results.csv`.
pub fn stage_select(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let mut written = Vec::new();
    let mut problem = match &cfg.selection.problem {
        Some(p) => read_json_artifact::<SelectionProblem>(p)?,
        None => {
            let rpath = cfg.out.join("results.csv");
            if !rpath.exists() {
                return Err(Error::InvalidConfig(format!(
                    "{} is missing; run `evaluate` first",
                    rpath.display()
                )));
            }
            let results = read_results_file(&rpath)?;
            let clean = clean_panel(&load_panel(&cfg)?)?;
            let mut items: Vec<usize> = results
                .iter()
                .flat_map(|r| r.items.iter())
                .filter_map(|id| clean.item_index(id))
                .collect();
            items.sort_unstable();
            items.dedup();
            let groups = cluster_items(&item_stats(&cfg, &clean, &items)?, cfg.selection.max_groups)?;
            let gpath = cfg.out.join("groups.json");
            write_json_artifact(&gpath, &prov, &GroupsFile { groups: groups.clone() })?;
            written.push(gpath);
            build_problem(&groups, &results, &cfg.selection.runtime_overrides)?
        }
    };
    if cfg.selection.budget_seconds.is_some() {
        problem.budget_seconds = cfg.selection.budget_seconds;
    }
    if let Some(w) = cfg.selection.w1 {
        problem.w1 = w;
    }
    if let Some(w) = cfg.selection.w2 {
        problem.w2 = w;
    }
    for m in &mut problem.models {
        if let Some(&t) = cfg.selection.runtime_overrides.get(&m.id) {
            m.runtime_seconds = t;
        }
    }
    let result = solve_selection_robust(&problem, problem.w1, problem.w2)?;
    let spath = cfg.out.join("selection.json");
    write_json_artifact(&spath, &prov, &SelectionFile { problem, result })?;
    written.push(spath);
    Ok(written)
}

fn read_history(path: &Path) -> Result<Vec<(usize, EpochLoss)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<(usize, usize, f64, f64)>() {
        let (fold, epoch, train_loss, val_loss) = rec?;
        out.push((
            fold,
            EpochLoss {
                epoch,
                train_loss,
                val_loss,
            },
        ));
    }
    Ok(out)
}

/// Voxel image used for the heat maps: the first selected fold's derived
/// embedding when available, identity orders over single clusters otherwise.
fn report_embedding(cfg: &RunConfig, panel: &DemandPanel) -> Result<DerivedEmbedding> {
    if let Ok(g) = read_fold_genotype(cfg, cfg.folds[0]) {
        if let Some(e) = g.embedding {
            return Ok(e);
        }
    }
    use crate::embedding::{Axis, LevelClustering};
    Ok(DerivedEmbedding::identity([
        LevelClustering::single(Axis::Feature, panel.schema().k())?,
        LevelClustering::single(Axis::Base, panel.bases().len())?,
        LevelClustering::single(Axis::Equipment, panel.equipment().len())?,
    ]))
}

/// Reads run outputs and writes plots and a markdown summary; never modifies
/// existing artifacts.
pub fn stage_report(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let cfg = config.effective();
    let prov = config.provenance();
    let mpath = cfg.out.join("metrics.json");
    if !mpath.exists() {
        return Err(Error::InvalidConfig(format!("{} is missing; run `evaluate` first", mpath.display())));
    }
    let report = read_json_artifact::<MetricsFile>(&mpath)?.report;
    let plots = cfg.out.join("plots");
    fs::create_dir_all(&plots)?;
    let text = png_text(&prov);
    let mut written = Vec::new();

    let bars: Vec<(f64, f64)> = report.models.iter().map(|m| (m.minmax_mean, m.minmax_std)).collect();
    let apath = plots.join("accuracy.png");
    plot::bar_chart(&bars, 60 + 48 * bars.len(), 320).save(&apath, &text)?;
    written.push(apath);

    let hpath = cfg.out.join("history.csv");
    if hpath.exists() {
        let rows = read_history(&hpath)?;
        let mut folds: Vec<usize> = rows.iter().map(|r| r.0).collect();
        folds.dedup();
        for f in folds {
            let h: Vec<&EpochLoss> = rows.iter().filter(|r| r.0 == f).map(|r| &r.1).collect();
            let series = vec![
                h.iter().map(|e| e.train_loss).collect(),
                h.iter().map(|e| e.val_loss).collect(),
            ];
            let p = plots.join(format!("loss_fold{f}.png"));
            plot::line_chart(&series, 480, 320).save(&p, &text)?;
            written.push(p);
        }
    }

    let clean = clean_panel(&load_panel(&cfg)?)?;
    let all_folds = make_folds(&clean, cfg.fold_seed())?;
    let fold = &all_folds[cfg.folds[0]];
    let (panel, _) = fold_panel(&clean, fold);
    let item = match &cfg.report.sample_item {
        Some(id) => panel
            .item_index(id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown item `{id}`")))?,
        None => *fold.test.first().ok_or(Error::EmptyInput)?,
    };
    let embedding = report_embedding(&cfg, &panel)?;
    let vox = embedding.voxelize::<f64>(&panel, item)?;
    let [ny, nf, nb, ne] = [vox.shape()[0], vox.shape()[1], vox.shape()[2], vox.shape()[3]];
    let item_id = panel.items()[item].clone();
    for y in 0..ny {
        let slice = &vox.data()[y * nf * nb * ne..(y + 1) * nf * nb * ne];
        let p = plots.join(format!("voxel_{item_id}_{}.png", panel.years()[y]));
        plot::heat_map(slice, nf, nb * ne, 16).save(&p, &text)?;
        written.push(p);
    }

    let mut md = String::new();
    md.push_str(&format!("<!-- config_hash={} seed={} -->\n", prov.config_hash, prov.seed));
    md.push_str("| model | folds | min-max accuracy | RMSE | MAE |\n|---|---|---|---|---|\n");
    for (i, m) in report.models.iter().enumerate() {
        let star = if i == report.best { " (best)" } else { "" };
        md.push_str(&format!(
            "| {}{} | {} | {:.4} ± {:.4} | {:.3} ± {:.3} | {:.3} ± {:.3} |\n",
            m.model,
            star,
            m.folds.len(),
            m.minmax_mean,
            m.minmax_std,
            m.rmse_mean,
            m.rmse_std,
            m.mae_mean,
            m.mae_std
        ));
    }
    md.push_str("\n## Plots\n\n");
    md.push_str("- `plots/accuracy.png`: mean min-max accuracy per model on a [0, 1] scale, bars in table order, whiskers ± one std.\n");
    md.push_str("- `plots/loss_fold{k}.png`: search loss per epoch, training in blue, validation in orange.\n");
    md.push_str(&format!(
        "- `plots/voxel_{item_id}_{{year}}.png`: voxel image of item {item_id}, one file per year channel; \
         rows are feature positions ({nf}), columns are base-major (base, equipment) positions ({nb} x {ne}); \
         blue is negative, red positive.\n"
    ));
    let spath = cfg.out.join("selection.json");
    if spath.exists() {
        let sel = read_json_artifact::<SelectionFile>(&spath)?;
        md.push_str(&format!(
            "\nSelected models per group: {} (objective {:.4})\n",
            sel.result.models.join(", "),
            sel.result.objective
        ));
    }
    let rpath = cfg.out.join("report.md");
    write_atomic(&rpath, md.as_bytes())?;
    written.push(rpath);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_and_repeat() {
        assert_eq!(substream(3, "data"), substream(3, "data"));
        assert_ne!(substream(3, "data"), substream(3, "search"));
        assert_ne!(substream(3, "data"), substream(4, "data"));
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: PathBuf::from("elsewhere"),
            ..RunConfig::default()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9, "search": {"epochs": 2}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.search.epochs, 2);
        assert_eq!(partial.search.batch_size, BilevelConfig::default().batch_size);
    }
}
