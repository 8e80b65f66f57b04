//! Forecast accuracy metrics, baseline forecasters and cross-fold comparison.
//!
//! A sample is one item: the target is its annual demand in the last panel
//! year, and its history is the annual demand of the earlier years.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{DemandPanel, FoldSplit};
use crate::error::{Error, Result};

fn check_pair(a: &[f64], f: &[f64]) -> Result<()> {
    if a.len() != f.len() {
        return Err(Error::LengthMismatch(a.len(), f.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_pair(actual, forecast)?;
    let s: f64 = actual.iter().zip(forecast).map(|(a, f)| (a - f) * (a - f)).sum();
    Ok((s / actual.len() as f64).sqrt())
}

/// Mean absolute error.
pub fn mae(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_pair(actual, forecast)?;
    let s: f64 = actual.iter().zip(forecast).map(|(a, f)| (a - f).abs()).sum();
    Ok(s / actual.len() as f64)
}

/// Mean of `min(A, F) / max(A, F)`. A pair of zeros scores 1, a single zero 0.
pub fn minmax_accuracy(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_pair(actual, forecast)?;
    let mut total = 0.0;
    for (&a, &f) in actual.iter().zip(forecast) {
        if a < 0.0 {
            return Err(Error::NegativeValue(a));
        }
        if f < 0.0 {
            return Err(Error::NegativeValue(f));
        }
        let hi = a.max(f);
        total += if hi == 0.0 { 1.0 } else { a.min(f) / hi };
    }
    Ok(total / actual.len() as f64)
}

/// Predictions of one model on one fold's test items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub model: String,
    pub fold: usize,
    pub items: Vec<String>,
    pub actual: Vec<f64>,
    pub forecast: Vec<f64>,
    pub runtime_seconds: f64,
}

impl ForecastResult {
    pub fn validate(&self) -> Result<()> {
        check_pair(&self.actual, &self.forecast)?;
        if self.items.len() != self.actual.len() {
            return Err(Error::LengthMismatch(self.items.len(), self.actual.len()));
        }
        if let Some(&a) = self.actual.iter().find(|a| **a < 0.0) {
            return Err(Error::NegativeValue(a));
        }
        Ok(())
    }

    pub fn minmax_accuracy(&self) -> Result<f64> {
        minmax_accuracy(&self.actual, &self.forecast)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ArithmeticMean,
    SimpleExponentialSmoothing,
    WeightedMovingAverage,
    LinearRegression,
    DecisionTree,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::ArithmeticMean,
        BaselineKind::SimpleExponentialSmoothing,
        BaselineKind::WeightedMovingAverage,
        BaselineKind::LinearRegression,
        BaselineKind::DecisionTree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::ArithmeticMean => "arithmetic_mean",
            BaselineKind::SimpleExponentialSmoothing => "simple_exponential_smoothing",
            BaselineKind::WeightedMovingAverage => "weighted_moving_average",
            BaselineKind::LinearRegression => "linear_regression",
            BaselineKind::DecisionTree => "decision_tree",
        }
    }
}

pub const WMA_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
pub const RIDGE_LAMBDA: f64 = 1e-3;
pub const TREE_MAX_DEPTH: usize = 4;
pub const TREE_MIN_LEAF: usize = 2;

/// Index of the forecast year (the last panel year).
pub fn target_year(panel: &DemandPanel) -> usize {
    panel.years().len().saturating_sub(1)
}

/// Annual demand of `item` in the forecast year.
pub fn demand_target(panel: &DemandPanel, item: usize) -> Option<f64> {
    panel.annual_demand(item, target_year(panel))
}

/// Annual demands of the years before the forecast year, oldest first.
pub fn demand_history(panel: &DemandPanel, item: usize) -> Vec<f64> {
    (0..target_year(panel))
        .filter_map(|y| panel.annual_demand(item, y))
        .collect()
}

/// Items of `items` that have a forecast-year target.
pub fn with_target(panel: &DemandPanel, items: &[usize]) -> Vec<usize> {
    items
        .iter()
        .copied()
        .filter(|&i| demand_target(panel, i).is_some())
        .collect()
}

pub fn arithmetic_mean_forecast(history: &[f64]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InsufficientHistory("no past years".into()));
    }
    Ok(history.iter().sum::<f64>() / history.len() as f64)
}

/// Smoothed level after the last observation.
pub fn ses_forecast(history: &[f64], alpha: f64) -> Result<f64> {
    let (first, rest) = history
        .split_first()
        .ok_or_else(|| Error::InsufficientHistory("no past years".into()))?;
    Ok(rest.iter().fold(*first, |l, &d| alpha * d + (1.0 - alpha) * l))
}

/// Weighted moving average, weights most recent first, renormalized over the
/// available years.
pub fn wma_forecast(history: &[f64], weights: &[f64]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InsufficientHistory("no past years".into()));
    }
    let used = weights.len().min(history.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (w, d) in weights[..used].iter().zip(history.iter().rev()) {
        num += w * d;
        den += w;
    }
    Ok(num / den)
}

/// SES smoothing constants searched on validation items.
pub fn ses_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// Per-year feature means, flattened year-major.
pub fn item_design_row(panel: &DemandPanel, item: usize) -> Vec<f64> {
    let years = panel.years().len();
    let k = panel.schema().k();
    let mut sum = vec![0.0; years * k];
    let mut cnt = vec![0usize; years * k];
    for r in panel.item_records(item) {
        for (f, v) in r.features.iter().enumerate() {
            if let Some(v) = v {
                sum[r.year * k + f] += v;
                cnt[r.year * k + f] += 1;
            }
        }
    }
    sum.iter()
        .zip(&cnt)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// Ridge-regularized least squares with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn fit(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Self> {
        check_pair(y, &vec![0.0; rows.len()])?;
        let p = rows[0].len();
        let n = rows.len();
        let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        let mut gram = x.transpose() * &x;
        for j in 1..=p {
            gram[(j, j)] += lambda * n as f64;
        }
        let rhs = x.transpose() * DVector::from_column_slice(y);
        let beta = gram
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| gram.lu().solve(&rhs))
            .ok_or_else(|| Error::InvalidConfig("singular regression design".into()))?;
        Ok(Self {
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(row).map(|(c, x)| c * x).sum::<f64>()
    }
}

/// CART regression tree (squared-error splits).
#[derive(Clone, Debug, PartialEq)]
pub enum RegressionTree {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<RegressionTree>,
        right: Box<RegressionTree>,
    },
}

impl RegressionTree {
    pub fn fit(rows: &[Vec<f64>], y: &[f64], max_depth: usize, min_leaf: usize) -> Result<Self> {
        check_pair(y, &vec![0.0; rows.len()])?;
        let idx: Vec<usize> = (0..rows.len()).collect();
        Ok(Self::grow(rows, y, idx, max_depth, min_leaf.max(1)))
    }

    fn grow(rows: &[Vec<f64>], y: &[f64], idx: Vec<usize>, depth: usize, min_leaf: usize) -> Self {
        let n = idx.len();
        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
        if depth == 0 || n < 2 * min_leaf {
            return RegressionTree::Leaf(mean);
        }
        let total: f64 = idx.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
        let parent_sse = total_sq - total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..rows[0].len() {
            let mut order = idx.clone();
            order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
            let (mut ls, mut lsq) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let v = y[order[pos]];
                ls += v;
                lsq += v * v;
                let nl = pos + 1;
                let nr = n - nl;
                let (xa, xb) = (rows[order[pos]][f], rows[order[pos + 1]][f]);
                if nl < min_leaf || nr < min_leaf || xa == xb {
                    continue;
                }
                let rs = total - ls;
                let rsq = total_sq - lsq;
                let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
                if best.is_none_or(|(b, _, _)| sse < b) {
                    best = Some((sse, f, 0.5 * (xa + xb)));
                }
            }
        }
        match best {
            Some((sse, feature, threshold)) if sse < parent_sse - 1e-12 * parent_sse.abs().max(1.0) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][feature] <= threshold);
                RegressionTree::Split {
                    feature,
                    threshold,
                    left: Box::new(Self::grow(rows, y, l, depth - 1, min_leaf)),
                    right: Box::new(Self::grow(rows, y, r, depth - 1, min_leaf)),
                }
            }
            _ => RegressionTree::Leaf(mean),
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match self {
            RegressionTree::Leaf(v) => *v,
            RegressionTree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

fn histories(panel: &DemandPanel, items: &[usize]) -> Result<Vec<Vec<f64>>> {
    items
        .iter()
        .map(|&i| {
            let h = demand_history(panel, i);
            if h.is_empty() {
                Err(Error::InsufficientHistory(panel.items()[i].clone()))
            } else {
                Ok(h)
            }
        })
        .collect()
}

fn targets(panel: &DemandPanel, items: &[usize]) -> Vec<f64> {
    items.iter().map(|&i| demand_target(panel, i).unwrap_or(0.0)).collect()
}

/// Fits (where needed) and runs one baseline on the fold's test items.
/// Regression baselines train on the training and validation items.
pub fn run_baseline(kind: BaselineKind, panel: &DemandPanel, fold: &FoldSplit) -> Result<ForecastResult> {
    let start = Instant::now();
    let test = with_target(panel, &fold.test);
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let forecast: Vec<f64> = match kind {
        BaselineKind::ArithmeticMean => histories(panel, &test)?
            .iter()
            .map(|h| arithmetic_mean_forecast(h))
            .collect::<Result<_>>()?,
        BaselineKind::WeightedMovingAverage => histories(panel, &test)?
            .iter()
            .map(|h| wma_forecast(h, &WMA_WEIGHTS))
            .collect::<Result<_>>()?,
        BaselineKind::SimpleExponentialSmoothing => {
            let val = with_target(panel, &fold.validation);
            let alpha = if val.is_empty() {
                1.0
            } else {
                let hist = histories(panel, &val)?;
                let actual = targets(panel, &val);
                let mut best = (f64::NEG_INFINITY, 1.0);
                for a in ses_grid() {
                    let f: Vec<f64> = hist
                        .iter()
                        .map(|h| ses_forecast(h, a).map(|v| v.max(0.0)))
                        .collect::<Result<_>>()?;
                    let acc = minmax_accuracy(&actual, &f)?;
                    if acc > best.0 {
                        best = (acc, a);
                    }
                }
                best.1
            };
            histories(panel, &test)?
                .iter()
                .map(|h| ses_forecast(h, alpha))
                .collect::<Result<_>>()?
        }
        BaselineKind::LinearRegression | BaselineKind::DecisionTree => {
            let mut fit_items: Vec<usize> = fold.train.iter().chain(&fold.validation).copied().collect();
            fit_items = with_target(panel, &fit_items);
            if fit_items.is_empty() {
                return Err(Error::EmptyInput);
            }
            let rows: Vec<Vec<f64>> = fit_items.iter().map(|&i| item_design_row(panel, i)).collect();
            let y = targets(panel, &fit_items);
            let test_rows: Vec<Vec<f64>> = test.iter().map(|&i| item_design_row(panel, i)).collect();
            if kind == BaselineKind::LinearRegression {
                let m = LinearModel::fit(&rows, &y, RIDGE_LAMBDA)?;
                test_rows.iter().map(|r| m.predict(r)).collect()
            } else {
                let t = RegressionTree::fit(&rows, &y, TREE_MAX_DEPTH, TREE_MIN_LEAF)?;
                test_rows.iter().map(|r| t.predict(r)).collect()
            }
        }
    };
    Ok(ForecastResult {
        model: kind.name().to_string(),
        fold: fold.fold,
        items: test.iter().map(|&i| panel.items()[i].clone()).collect(),
        actual: targets(panel, &test),
        forecast: forecast.into_iter().map(|v| v.max(0.0)).collect(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub folds: Vec<usize>,
    pub minmax_mean: f64,
    pub minmax_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Wall-clock seconds; kept out of serialized reports so they stay reproducible.
    #[serde(skip_serializing, default)]
    pub runtime_mean: f64,
}

/// Per-model fold statistics, models sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub models: Vec<ModelSummary>,
    /// Index into `models` of the highest mean min-max accuracy.
    pub best: usize,
}

impl MetricReport {
    pub fn best_model(&self) -> &ModelSummary {
        &self.models[self.best]
    }

    pub fn model(&self, id: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == id)
    }

    /// `model,folds,minmax_mean,...` table without run times.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "model",
            "folds",
            "minmax_mean",
            "minmax_std",
            "rmse_mean",
            "rmse_std",
            "mae_mean",
            "mae_std",
            "best",
        ])?;
        for (i, m) in self.models.iter().enumerate() {
            w.write_record([
                m.model.clone(),
                m.folds.len().to_string(),
                format!("{:.6}", m.minmax_mean),
                format!("{:.6}", m.minmax_std),
                format!("{:.6}", m.rmse_mean),
                format!("{:.6}", m.rmse_std),
                format!("{:.6}", m.mae_mean),
                format!("{:.6}", m.mae_std),
                (i == self.best).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups results by model and summarizes each model across its folds.
pub fn compare_models(results: &[ForecastResult]) -> Result<MetricReport> {
    let mut by_model: BTreeMap<&str, Vec<&ForecastResult>> = BTreeMap::new();
    for r in results {
        r.validate()?;
        by_model.entry(&r.model).or_default().push(r);
    }
    if by_model.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut models = Vec::with_capacity(by_model.len());
    for (id, mut rs) in by_model {
        rs.sort_by_key(|r| r.fold);
        let mut acc = Vec::new();
        let mut e2 = Vec::new();
        let mut e1 = Vec::new();
        let mut t = Vec::new();
        for r in &rs {
            acc.push(minmax_accuracy(&r.actual, &r.forecast)?);
            e2.push(rmse(&r.actual, &r.forecast)?);
            e1.push(mae(&r.actual, &r.forecast)?);
            t.push(r.runtime_seconds);
        }
        let (minmax_mean, minmax_std) = mean_std(&acc);
        let (rmse_mean, rmse_std) = mean_std(&e2);
        let (mae_mean, mae_std) = mean_std(&e1);
        models.push(ModelSummary {
            model: id.to_string(),
            folds: rs.iter().map(|r| r.fold).collect(),
            minmax_mean,
            minmax_std,
            rmse_mean,
            rmse_std,
            mae_mean,
            mae_std,
            runtime_mean: mean_std(&t).0,
        });
    }
    let mut best = 0;
    for (i, m) in models.iter().enumerate() {
        if m.minmax_mean > models[best].minmax_mean {
            best = i;
        }
    }
    Ok(MetricReport { models, best })
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRow {
    model: String,
    fold: usize,
    item: String,
    actual: f64,
    forecast: f64,
    runtime_seconds: f64,
}

/// Writes results as `model,fold,item,actual,forecast,runtime_seconds` rows.
pub fn write_results<W: Write>(results: &[ForecastResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in results {
        for ((item, a), f) in r.items.iter().zip(&r.actual).zip(&r.forecast) {
            w.serialize(ResultRow {
                model: r.model.clone(),
                fold: r.fold,
                item: item.clone(),
                actual: *a,
                forecast: *f,
                runtime_seconds: r.runtime_seconds,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads result rows, regrouping them by (model, fold) in order of first appearance.
/// Lines starting with `#` are ignored.
pub fn read_results<R: Read>(reader: R) -> Result<Vec<ForecastResult>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut out: Vec<ForecastResult> = Vec::new();
    for row in rdr.deserialize() {
        let row: ResultRow = row?;
        let pos = out.iter().position(|r| r.model == row.model && r.fold == row.fold);
        let r = match pos {
            Some(p) => &mut out[p],
            None => {
                out.push(ForecastResult {
                    model: row.model.clone(),
                    fold: row.fold,
                    items: Vec::new(),
                    actual: Vec::new(),
                    forecast: Vec::new(),
                    runtime_seconds: row.runtime_seconds,
                });
                out.last_mut().unwrap()
            }
        };
        r.items.push(row.item);
        r.actual.push(row.actual);
        r.forecast.push(row.forecast);
    }
    for r in &out {
        r.validate()?;
    }
    Ok(out)
}
