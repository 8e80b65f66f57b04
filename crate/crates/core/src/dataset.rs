//! Multilevel demand panels: ingest, cleaning, normalization, fold splits and
//! a synthetic generator with planted cluster structure.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEY_COLUMNS: [&str; 4] = ["item", "base", "equipment", "year"];
pub const DEFAULT_TARGET: &str = "demand";
pub const FOLD_COUNT: usize = 5;

/// Which decomposition axes a feature genuinely varies along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelFlags {
    pub base: bool,
    pub equipment: bool,
    pub year: bool,
}

impl Default for LevelFlags {
    fn default() -> Self {
        Self {
            base: true,
            equipment: true,
            year: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    level_axes: [String; 3],
    feature_ids: Vec<String>,
    level_flags: Vec<LevelFlags>,
    target_id: String,
}

impl FeatureSchema {
    pub fn new(feature_ids: Vec<String>, target_id: impl Into<String>) -> Result<Self> {
        let target_id = target_id.into();
        if feature_ids.is_empty() {
            return Err(Error::InvalidConfig("schema needs at least one feature".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &feature_ids {
            if !seen.insert(f.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate feature id `{f}`")));
            }
            if KEY_COLUMNS.contains(&f.as_str()) {
                return Err(Error::InvalidConfig(format!("feature id `{f}` collides with a key column")));
            }
        }
        if seen.contains(target_id.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "target `{target_id}` is also listed as a feature"
            )));
        }
        let level_flags = vec![LevelFlags::default(); feature_ids.len()];
        Ok(Self {
            level_axes: ["base".into(), "equipment".into(), "year".into()],
            feature_ids,
            level_flags,
            target_id,
        })
    }

    pub fn level_axes(&self) -> &[String; 3] {
        &self.level_axes
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn level_flags(&self) -> &[LevelFlags] {
        &self.level_flags
    }

    pub fn set_level_flags(&mut self, flags: Vec<LevelFlags>) -> Result<()> {
        if flags.len() != self.feature_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} level flags for {} features",
                flags.len(),
                self.feature_ids.len()
            )));
        }
        self.level_flags = flags;
        Ok(())
    }

    pub fn target_id(&self) -> &str {
        &self.target_id
    }

    /// Number of explanatory features.
    pub fn k(&self) -> usize {
        self.feature_ids.len()
    }

    /// Key columns plus explanatory features.
    pub fn width(&self) -> usize {
        KEY_COLUMNS.len() + self.k()
    }
}

/// One (item, base, equipment, year) row; indices refer to the panel's id lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub item: usize,
    pub base: usize,
    pub equipment: usize,
    pub year: usize,
    /// `None` marks a missing cell.
    pub features: Vec<Option<f64>>,
    pub target: Option<f64>,
}

impl Record {
    fn key(&self) -> (usize, usize, usize, usize) {
        (self.item, self.base, self.equipment, self.year)
    }
}

/// Row as read from a file, before id interning.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub item: String,
    pub base: String,
    pub equipment: String,
    pub year: i64,
    pub features: Vec<Option<f64>>,
    pub target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandPanel {
    schema: FeatureSchema,
    items: Vec<String>,
    bases: Vec<String>,
    equipment: Vec<String>,
    years: Vec<i64>,
    records: Vec<Record>,
    item_ranges: Vec<Range<usize>>,
}

fn intern<K: Ord + Clone>(values: impl Iterator<Item = K>) -> (Vec<K>, BTreeMap<K, usize>) {
    let set: std::collections::BTreeSet<K> = values.collect();
    let list: Vec<K> = set.into_iter().collect();
    let map = list.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
    (list, map)
}

impl DemandPanel {
    /// Builds a validated panel. Id lists are sorted; records are ordered by
    /// (item, base, equipment, year).
    pub fn from_rows(schema: FeatureSchema, rows: Vec<RawRow>) -> Result<Self> {
        let k = schema.k();
        let (items, item_map) = intern(rows.iter().map(|r| r.item.clone()));
        let (bases, base_map) = intern(rows.iter().map(|r| r.base.clone()));
        let (equipment, equip_map) = intern(rows.iter().map(|r| r.equipment.clone()));
        let (years, year_map) = intern(rows.iter().map(|r| r.year));
        let mut records = Vec::with_capacity(rows.len());
        for r in rows {
            if r.features.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "row has {} features, schema has {k}",
                    r.features.len()
                )));
            }
            if let Some(t) = r.target {
                if !(t >= 0.0) || !t.is_finite() {
                    return Err(Error::NegativeValue(t));
                }
            }
            records.push(Record {
                item: item_map[&r.item],
                base: base_map[&r.base],
                equipment: equip_map[&r.equipment],
                year: year_map[&r.year],
                features: r.features,
                target: r.target,
            });
        }
        records.sort_by_key(Record::key);
        for pair in records.windows(2) {
            if pair[0].key() == pair[1].key() {
                let r = &pair[0];
                return Err(Error::DuplicateKey {
                    item: items[r.item].clone(),
                    base: bases[r.base].clone(),
                    equipment: equipment[r.equipment].clone(),
                    year: years[r.year],
                });
            }
        }
        let mut panel = Self {
            schema,
            items,
            bases,
            equipment,
            years,
            records,
            item_ranges: Vec::new(),
        };
        panel.index_items();
        Ok(panel)
    }

    fn index_items(&mut self) {
        let mut ranges = vec![0..0; self.items.len()];
        let mut start = 0;
        while start < self.records.len() {
            let item = self.records[start].item;
            let mut end = start;
            while end < self.records.len() && self.records[end].item == item {
                end += 1;
            }
            ranges[item] = start..end;
            start = end;
        }
        self.item_ranges = ranges;
    }

    fn with_records(&self, records: Vec<Record>) -> Self {
        Self {
            records,
            ..self.clone()
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn schema_mut(&mut self) -> &mut FeatureSchema {
        &mut self.schema
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn bases(&self) -> &[String] {
        &self.bases
    }

    pub fn equipment(&self) -> &[String] {
        &self.equipment
    }

    pub fn years(&self) -> &[i64] {
        &self.years
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn item_records(&self, item: usize) -> &[Record] {
        &self.records[self.item_ranges[item].clone()]
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|s| s.as_str().cmp(id)).ok()
    }

    pub fn missing_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.features.iter().filter(|v| v.is_none()).count())
            .sum()
    }

    /// The item's records laid out as a dense (base, equipment, year) grid.
    pub fn item_grid(&self, item: usize) -> Result<Vec<&Record>> {
        let recs = self.item_records(item);
        let (b, e, y) = (self.bases.len(), self.equipment.len(), self.years.len());
        if recs.len() != b * e * y {
            return Err(Error::IncompleteGrid {
                item: self.items[item].clone(),
            });
        }
        // records are sorted by (base, equipment, year) within an item
        Ok(recs.iter().collect())
    }

    /// Item demand in a year: sum over the present (base, equipment) targets.
    pub fn annual_demand(&self, item: usize, year: usize) -> Option<f64> {
        let mut total = None;
        for r in self.item_records(item).iter().filter(|r| r.year == year) {
            if let Some(t) = r.target {
                *total.get_or_insert(0.0) += t;
            }
        }
        total
    }

    /// Mean of one feature over an item's present records.
    pub fn item_feature_mean(&self, item: usize, feature: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .item_records(item)
            .iter()
            .filter_map(|r| r.features[feature])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Infers level flags: a feature varies along an axis if some item holds
    /// different values at two records that differ only on that axis.
    pub fn infer_level_flags(&mut self) {
        let k = self.schema.k();
        let mut flags = vec![
            LevelFlags {
                base: false,
                equipment: false,
                year: false,
            };
            k
        ];
        for axis in 0..3 {
            let mut groups: HashMap<(usize, usize, usize), Vec<&Record>> = HashMap::new();
            for r in &self.records {
                let key = match axis {
                    0 => (r.item, r.equipment, r.year),
                    1 => (r.item, r.base, r.year),
                    _ => (r.item, r.base, r.equipment),
                };
                groups.entry(key).or_default().push(r);
            }
            for recs in groups.values() {
                for (f, flag) in flags.iter_mut().enumerate() {
                    let mut first = None;
                    let varies = recs.iter().filter_map(|r| r.features[f]).any(|v| {
                        let base = *first.get_or_insert(v);
                        v != base
                    });
                    if varies {
                        match axis {
                            0 => flag.base = true,
                            1 => flag.equipment = true,
                            _ => flag.year = true,
                        }
                    }
                }
            }
        }
        self.schema.level_flags = flags;
    }

    /// Writes the panel in the ingest format (keys, features, target).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
        header.extend(self.schema.feature_ids.iter().map(String::as_str));
        header.push(&self.schema.target_id);
        w.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                self.items[r.item].clone(),
                self.bases[r.base].clone(),
                self.equipment[r.equipment].clone(),
                self.years[r.year].to_string(),
            ];
            row.extend(r.features.iter().map(|&v| fmt(v)));
            row.push(fmt(r.target));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_cell(raw: &str, line: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::NonNumericCell {
            line,
            column: column.to_string(),
            value: raw.to_string(),
        }),
    }
}

/// Reads a comma-separated panel. Key columns are located by name; a column
/// named `target_id` (if present) is the demand target; every other column is
/// an explanatory feature, in header order.
pub fn ingest_panel<R: Read>(source: R, target_id: &str) -> Result<DemandPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let mut key_idx = [0usize; 4];
    for (slot, name) in key_idx.iter_mut().zip(KEY_COLUMNS) {
        *slot = find(name).ok_or_else(|| Error::MissingLevelColumn(name.to_string()))?;
    }
    let target_idx = find(target_id);
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|i| !key_idx.contains(i) && Some(*i) != target_idx)
        .collect();
    let schema = FeatureSchema::new(
        feature_idx.iter().map(|&i| header[i].clone()).collect(),
        target_id,
    )?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let year_raw = get(key_idx[3]);
        let year = year_raw
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::NonNumericCell {
                line,
                column: "year".into(),
                value: year_raw.to_string(),
            })?;
        let features = feature_idx
            .iter()
            .map(|&i| parse_cell(get(i), line, &header[i]))
            .collect::<Result<Vec<_>>>()?;
        let target = match target_idx {
            Some(i) => parse_cell(get(i), line, &header[i])?,
            None => None,
        };
        rows.push(RawRow {
            item: get(key_idx[0]).trim().to_string(),
            base: get(key_idx[1]).trim().to_string(),
            equipment: get(key_idx[2]).trim().to_string(),
            year,
            features,
            target,
        });
    }
    let mut panel = DemandPanel::from_rows(schema, rows)?;
    panel.infer_level_flags();
    Ok(panel)
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

pub const OUTER_FENCE: f64 = 3.0;

/// Box-plot outer fence `[Q1 - 3 IQR, Q3 + 3 IQR]` for one column; `None`
/// when the column is empty or its IQR is zero.
pub fn outer_fence(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    (iqr > 0.0).then(|| (q1 - OUTER_FENCE * iqr, q3 + OUTER_FENCE * iqr))
}

fn column(panel: &DemandPanel, f: usize) -> Vec<f64> {
    panel.records.iter().filter_map(|r| r.features[f]).collect()
}

/// Marks feature values outside each column's outer fence as missing.
pub fn remove_outliers(panel: &DemandPanel) -> DemandPanel {
    let fences: Vec<Option<(f64, f64)>> = (0..panel.schema.k())
        .map(|f| outer_fence(&column(panel, f)))
        .collect();
    let records = panel
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for (v, fence) in r.features.iter_mut().zip(&fences) {
                if let (Some(x), Some((lo, hi))) = (*v, fence) {
                    if x < *lo || x > *hi {
                        *v = None;
                    }
                }
            }
            r
        })
        .collect();
    panel.with_records(records)
}

/// Fills each missing cell with the median of the same feature over the same
/// item's present records, falling back to the global feature median.
pub fn impute_missing(panel: &DemandPanel) -> Result<DemandPanel> {
    let k = panel.schema.k();
    let mut global = Vec::with_capacity(k);
    for f in 0..k {
        let g = median(&column(panel, f));
        if g.is_none() && panel.records.iter().any(|r| r.features[f].is_none()) {
            return Err(Error::UnimputableFeature(panel.schema.feature_ids[f].clone()));
        }
        global.push(g);
    }
    let mut records = panel.records.clone();
    for range in &panel.item_ranges {
        let recs = &panel.records[range.clone()];
        for f in 0..k {
            if recs.iter().all(|r| r.features[f].is_some()) {
                continue;
            }
            let own: Vec<f64> = recs.iter().filter_map(|r| r.features[f]).collect();
            let fill = median(&own).or(global[f]).expect("checked above");
            for r in &mut records[range.clone()] {
                r.features[f].get_or_insert(fill);
            }
        }
    }
    Ok(panel.with_records(records))
}

/// Per-feature z-score parameters (population standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    fn is_constant(&self, f: usize) -> bool {
        self.std[f] <= 1e-12 * self.mean[f].abs().max(1.0)
    }

    pub fn apply(&self, panel: &DemandPanel) -> DemandPanel {
        let records = panel
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for (f, v) in r.features.iter_mut().enumerate() {
                    if let Some(x) = v {
                        *x = if self.is_constant(f) {
                            0.0
                        } else {
                            (*x - self.mean[f]) / self.std[f]
                        };
                    }
                }
                r
            })
            .collect();
        panel.with_records(records)
    }
}

/// Z-scores every feature column with statistics computed over the records of
/// `train_items` only. The target is left unscaled.
pub fn normalize(panel: &DemandPanel, train_items: &[usize]) -> (DemandPanel, NormStats) {
    let k = panel.schema.k();
    let mut mean = vec![0.0; k];
    let mut std = vec![0.0; k];
    for f in 0..k {
        let vals: Vec<f64> = train_items
            .iter()
            .flat_map(|&i| panel.item_records(i))
            .filter_map(|r| r.features[f])
            .collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[f] = m;
        std[f] = var.sqrt();
    }
    let stats = NormStats { mean, std };
    (stats.apply(panel), stats)
}

/// Item-level partition for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Five rotating item-level folds: chunk `k` is the test set of fold `k`,
/// chunk `k + 1` its validation set and the rest its training set.
pub fn make_folds(panel: &DemandPanel, seed: u64) -> Result<Vec<FoldSplit>> {
    make_folds_for(panel.items.len(), seed)
}

pub fn make_folds_for(n_items: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_items < FOLD_COUNT {
        return Err(Error::TooFewItems {
            needed: FOLD_COUNT,
            found: n_items,
        });
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chunks = Vec::with_capacity(FOLD_COUNT);
    let mut start = 0;
    for c in 0..FOLD_COUNT {
        let size = n_items / FOLD_COUNT + usize::from(c < n_items % FOLD_COUNT);
        let mut chunk = order[start..start + size].to_vec();
        chunk.sort_unstable();
        chunks.push(chunk);
        start += size;
    }
    Ok((0..FOLD_COUNT)
        .map(|fold| {
            let val = (fold + 1) % FOLD_COUNT;
            let mut train: Vec<usize> = (0..FOLD_COUNT)
                .filter(|&c| c != fold && c != val)
                .flat_map(|c| chunks[c].iter().copied())
                .collect();
            train.sort_unstable();
            FoldSplit {
                fold,
                train,
                validation: chunks[val].clone(),
                test: chunks[fold].clone(),
            }
        })
        .collect())
}

/// Parameters of the synthetic zero-inflated demand generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub items: usize,
    pub bases: usize,
    pub equipment: usize,
    pub years: usize,
    pub features: usize,
    pub feature_clusters: usize,
    pub base_clusters: usize,
    pub equipment_clusters: usize,
    pub zero_inflation: f64,
    pub noise: f64,
    pub first_year: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            items: 200,
            bases: 4,
            equipment: 3,
            years: 6,
            features: 8,
            feature_clusters: 3,
            base_clusters: 2,
            equipment_clusters: 2,
            zero_inflation: 0.3,
            noise: 0.1,
            first_year: 2010,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("items", self.items),
            ("bases", self.bases),
            ("equipment", self.equipment),
            ("years", self.years),
            ("features", self.features),
            ("feature_clusters", self.feature_clusters),
            ("base_clusters", self.base_clusters),
            ("equipment_clusters", self.equipment_clusters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(Error::InvalidConfig(format!("synthetic `{name}` must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.zero_inflation) {
            return Err(Error::InvalidConfig("zero_inflation must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidConfig("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Planted structure behind a synthetic panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub feature_cluster: Vec<usize>,
    pub base_cluster: Vec<usize>,
    pub equipment_cluster: Vec<usize>,
    /// Log-rate coefficient of each feature cluster's mean value.
    pub cluster_coefficients: Vec<f64>,
    /// `[base cluster][feature cluster]` offsets.
    pub base_effects: Vec<Vec<f64>>,
    /// `[equipment cluster][feature cluster]` offsets.
    pub equipment_effects: Vec<Vec<f64>>,
    pub intercept: f64,
    pub item_levels: Vec<f64>,
    pub item_trends: Vec<f64>,
}

/// Draws a synthetic panel.
///
/// Feature `f` of item `i` at (base `b`, equipment `e`, year `y`) is
/// `level_i + trend_i * tau_y + base_effect[cb][cf] + equip_effect[ce][cf] + noise`,
/// with `tau_y` spanning `[-1, 1]` across years and `c*` the planted cluster of
/// each member (`member % clusters`). Demand is zero with the zero-inflation
/// probability, otherwise Poisson with log-rate
/// `intercept + sum_c coef_c * mean(features of cluster c)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DemandPanel, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let fc: Vec<usize> = (0..spec.features).map(|f| f % spec.feature_clusters).collect();
    let bc: Vec<usize> = (0..spec.bases).map(|b| b % spec.base_clusters).collect();
    let ec: Vec<usize> = (0..spec.equipment).map(|e| e % spec.equipment_clusters).collect();
    let coefs: Vec<f64> = (0..spec.feature_clusters)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.3..1.0)
        })
        .collect();
    let mut effects = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                (0..spec.feature_clusters)
                    .map(|_| std_normal.sample(&mut rng))
                    .collect()
            })
            .collect()
    };
    let base_effects = effects(spec.base_clusters);
    let equipment_effects = effects(spec.equipment_clusters);
    let intercept = 1.0;
    let item_levels: Vec<f64> = (0..spec.items).map(|_| std_normal.sample(&mut rng)).collect();
    let item_trends: Vec<f64> = (0..spec.items)
        .map(|_| 0.8 * std_normal.sample(&mut rng))
        .collect();

    let width = spec.items.to_string().len();
    let mut rows = Vec::with_capacity(spec.items * spec.bases * spec.equipment * spec.years);
    let mut cluster_sum = vec![0.0; spec.feature_clusters];
    let mut cluster_n = vec![0usize; spec.feature_clusters];
    for f in 0..spec.features {
        cluster_n[fc[f]] += 1;
    }
    for i in 0..spec.items {
        for b in 0..spec.bases {
            for e in 0..spec.equipment {
                for y in 0..spec.years {
                    let tau = if spec.years > 1 {
                        2.0 * y as f64 / (spec.years - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                    let features: Vec<f64> = (0..spec.features)
                        .map(|f| {
                            item_levels[i]
                                + item_trends[i] * tau
                                + base_effects[bc[b]][fc[f]]
                                + equipment_effects[ec[e]][fc[f]]
                                + spec.noise * std_normal.sample(&mut rng)
                        })
                        .collect();
                    cluster_sum.iter_mut().for_each(|s| *s = 0.0);
                    for (f, &v) in features.iter().enumerate() {
                        cluster_sum[fc[f]] += v;
                    }
                    let log_rate = intercept
                        + (0..spec.feature_clusters)
                            .map(|c| coefs[c] * cluster_sum[c] / cluster_n[c].max(1) as f64)
                            .sum::<f64>();
                    let rate = log_rate.clamp(-6.0, 5.0).exp();
                    let zero = rng.random_bool(spec.zero_inflation);
                    let draw = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                    rows.push(RawRow {
                        item: format!("I{i:0width$}"),
                        base: format!("B{b}"),
                        equipment: format!("E{e}"),
                        year: spec.first_year + y as i64,
                        features: features.into_iter().map(Some).collect(),
                        target: Some(if zero { 0.0 } else { draw }),
                    });
                }
            }
        }
    }
    let schema = FeatureSchema::new(
        (0..spec.features).map(|f| format!("x{}", f + 1)).collect(),
        DEFAULT_TARGET,
    )?;
    let panel = DemandPanel::from_rows(schema, rows)?;
    let truth = GroundTruth {
        spec: spec.clone(),
        feature_cluster: fc,
        base_cluster: bc,
        equipment_cluster: ec,
        cluster_coefficients: coefs,
        base_effects,
        equipment_effects,
        intercept,
        item_levels,
        item_trends,
    };
    Ok((panel, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "item,base,equipment,year,x1,x2,demand\n\
                        A,B1,E1,2010,1.0,2.0,\n\
                        A,B1,E1,2011,3.0,,4\n";

    #[test]
    fn ingest_minimal_panel() {
        let p = ingest_panel(TINY.as_bytes(), DEFAULT_TARGET).unwrap();
        assert_eq!(p.records().len(), 2);
        assert_eq!(p.schema().k(), 2);
        assert_eq!(p.missing_count(), 1);
        assert_eq!(p.records()[1].target, Some(4.0));
        assert_eq!(p.records()[0].target, None);
    }

    #[test]
    fn ingest_four_rows_two_years() {
        let src = "item,base,equipment,year,x1,x2,demand\n\
                   A,B1,E1,2010,1,2,0\n\
                   A,B1,E1,2011,1,2,1\n\
                   B,B1,E1,2010,1,2,0\n\
                   B,B1,E1,2011,1,2,3\n";
        let p = ingest_panel(src.as_bytes(), DEFAULT_TARGET).unwrap();
        assert_eq!(p.records().len(), 4);
        assert_eq!(p.schema().k(), 2);
        assert_eq!(p.years(), &[2010, 2011]);
    }

    #[test]
    fn ingest_wide_header_width() {
        let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((1..=52).map(|i| format!("X{i}")));
        let mut row = vec!["i".to_string(), "b".into(), "e".into(), "2010".into()];
        row.extend((0..52).map(|i| i.to_string()));
        let src = format!("{}\n{}\n", header.join(","), row.join(","));
        let p = ingest_panel(src.as_bytes(), DEFAULT_TARGET).unwrap();
        assert_eq!(p.schema().width(), 56);
    }

    #[test]
    fn ingest_errors() {
        let no_equipment = "item,base,year,x1\nA,B,2010,1\n";
        assert!(matches!(
            ingest_panel(no_equipment.as_bytes(), DEFAULT_TARGET),
            Err(Error::MissingLevelColumn(c)) if c == "equipment"
        ));
        let dup = "item,base,equipment,year,x1\nA,B,E,2010,1\nA,B,E,2010,2\n";
        assert!(matches!(
            ingest_panel(dup.as_bytes(), DEFAULT_TARGET),
            Err(Error::DuplicateKey { .. })
        ));
        let bad = "item,base,equipment,year,x1\nA,B,E,2010,abc\n";
        assert!(matches!(
            ingest_panel(bad.as_bytes(), DEFAULT_TARGET),
            Err(Error::NonNumericCell { line: 2, .. })
        ));
    }

    fn single_column(values: &[Option<f64>]) -> DemandPanel {
        let schema = FeatureSchema::new(vec!["x".into()], DEFAULT_TARGET).unwrap();
        let rows = values
            .iter()
            .enumerate()
            .map(|(i, &v)| RawRow {
                item: format!("I{i}"),
                base: "B".into(),
                equipment: "E".into(),
                year: 2010,
                features: vec![v],
                target: None,
            })
            .collect();
        DemandPanel::from_rows(schema, rows).unwrap()
    }

    fn col(p: &DemandPanel) -> Vec<Option<f64>> {
        p.records().iter().map(|r| r.features[0]).collect()
    }

    #[test]
    fn outer_fence_type7_quartiles() {
        // sorted {1,2,3,4,100}: Q1 = 2, Q3 = 4, IQR = 2, fence [-4, 10]
        assert_eq!(outer_fence(&[1.0, 2.0, 3.0, 4.0, 100.0]), Some((-4.0, 10.0)));
        let p = single_column(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0), Some(100.0)]);
        let cleaned = remove_outliers(&p);
        assert_eq!(col(&cleaned), vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0), None]);
    }

    #[test]
    fn outer_fence_degenerate_cases() {
        let constant = single_column(&[Some(5.0); 4]);
        assert_eq!(remove_outliers(&constant), constant);
        let inside = single_column(&[Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(remove_outliers(&inside), inside);
        let empty = single_column(&[None, None]);
        assert_eq!(remove_outliers(&empty), empty);
    }

    fn grid_panel(cells: &[(&str, &str, Option<f64>)]) -> DemandPanel {
        let schema = FeatureSchema::new(vec!["x".into()], DEFAULT_TARGET).unwrap();
        let rows = cells
            .iter()
            .map(|&(item, base, v)| RawRow {
                item: item.into(),
                base: base.into(),
                equipment: "E".into(),
                year: 2010,
                features: vec![v],
                target: None,
            })
            .collect();
        DemandPanel::from_rows(schema, rows).unwrap()
    }

    #[test]
    fn impute_item_median_then_global() {
        let p = grid_panel(&[("A", "B1", Some(2.0)), ("A", "B2", None), ("A", "B3", Some(4.0))]);
        assert_eq!(col(&impute_missing(&p).unwrap())[1], Some(3.0));

        let p = grid_panel(&[
            ("A", "B1", Some(1.0)),
            ("B", "B1", Some(1.0)),
            ("C", "B1", Some(5.0)),
            ("D", "B1", None),
            ("D", "B2", None),
        ]);
        let out = impute_missing(&p).unwrap();
        assert_eq!(col(&out)[3..], [Some(1.0), Some(1.0)]);
        assert_eq!(out.missing_count(), 0);
        assert_eq!(impute_missing(&out).unwrap(), out);

        let none = grid_panel(&[("A", "B1", None)]);
        assert!(matches!(impute_missing(&none), Err(Error::UnimputableFeature(_))));
    }

    #[test]
    fn normalize_population_zscore() {
        let p = single_column(&[Some(1.0), Some(2.0), Some(3.0)]);
        let (n, stats) = normalize(&p, &[0, 1, 2]);
        let v: Vec<f64> = col(&n).into_iter().flatten().collect();
        assert!((v[0] + 1.224744871391589).abs() < 1e-12);
        assert!(v[1].abs() < 1e-15);
        assert!((v[2] - 1.224744871391589).abs() < 1e-12);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let (again, _) = normalize(&n, &[0, 1, 2]);
        for (a, b) in col(&again).into_iter().zip(col(&n)) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }

        let c = single_column(&[Some(0.1), Some(0.1), Some(0.1)]);
        let (z, _) = normalize(&c, &[0, 1, 2]);
        assert!(col(&z).iter().all(|&v| v == Some(0.0)));
    }

    #[test]
    fn normalize_uses_training_items_only() {
        let p = single_column(&[Some(1.0), Some(3.0), Some(100.0)]);
        let (n, stats) = normalize(&p, &[0, 1]);
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(col(&n)[2], Some(98.0));
    }

    #[test]
    fn folds_sixty_twenty_twenty() {
        let folds = make_folds_for(100, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = vec![0; 100];
        for f in &folds {
            assert_eq!((f.train.len(), f.validation.len(), f.test.len()), (60, 20, 20));
            for &i in &f.test {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.validation).chain(&f.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(folds, make_folds_for(100, 3).unwrap());
        assert_ne!(folds, make_folds_for(100, 4).unwrap());
        assert!(matches!(make_folds_for(4, 0), Err(Error::TooFewItems { .. })));
    }

    #[test]
    fn synthetic_counts_and_zero_inflation() {
        let spec = SyntheticSpec {
            items: 10,
            bases: 4,
            equipment: 3,
            years: 6,
            features: 8,
            ..Default::default()
        };
        let (p, truth) = generate_synthetic(&spec).unwrap();
        assert_eq!(p.records().len(), 720);
        assert_eq!(truth.feature_cluster.len(), 8);
        let (again, truth2) = generate_synthetic(&spec).unwrap();
        assert_eq!(p, again);
        assert_eq!(truth, truth2);

        let all_zero = SyntheticSpec {
            zero_inflation: 1.0,
            ..spec.clone()
        };
        let (z, _) = generate_synthetic(&all_zero).unwrap();
        assert!(z.records().iter().all(|r| r.target == Some(0.0)));

        let bad = SyntheticSpec {
            zero_inflation: 1.5,
            ..spec
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (p, _) = generate_synthetic(&SyntheticSpec {
            items: 3,
            bases: 2,
            equipment: 2,
            years: 2,
            features: 3,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let back = ingest_panel(buf.as_slice(), DEFAULT_TARGET).unwrap();
        assert_eq!(back.records(), p.records());
    }
}
