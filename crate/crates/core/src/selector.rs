//! Item grouping and per-group model selection under a run-time budget.
//!
//! Each group picks exactly one model. The objective is
//! `sum_i (c_i / c) * (w1 * acc_ij - w2 * std_ij)` and the budget constraint
//! is `sum_i (c_i / c) * t_j <= T`. The solver is an exact depth-first branch
//! and bound; a brute-force enumerator serves as its reference.

use serde::{Deserialize, Serialize};

use crate::cluster;
use crate::error::{Error, Result};

/// Cost and mean annual demand of one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemStat {
    pub item: String,
    pub cost: f64,
    pub demand: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemGroup {
    pub id: usize,
    pub members: Vec<String>,
    pub size: usize,
    /// `[min, max]` item cost within the group.
    pub cost_range: [f64; 2],
    /// `[min, max]` mean annual demand within the group.
    pub demand_range: [f64; 2],
}

fn standardize(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    col.iter()
        .map(|v| if sd > 1e-12 { (v - m) / sd } else { 0.0 })
        .collect()
}

/// Ward-linkage groups on standardized (cost, demand), group count chosen by
/// silhouette in `2..=max_groups`.
pub fn cluster_items(stats: &[ItemStat], max_groups: usize) -> Result<Vec<ItemGroup>> {
    if stats.len() < 2 {
        return Err(Error::TooFewItems {
            needed: 2,
            found: stats.len(),
        });
    }
    if max_groups == 0 {
        return Err(Error::InvalidConfig("max_groups must be >= 1".into()));
    }
    let cost = standardize(&stats.iter().map(|s| s.cost).collect::<Vec<_>>());
    let demand = standardize(&stats.iter().map(|s| s.demand).collect::<Vec<_>>());
    let points: Vec<Vec<f64>> = cost.iter().zip(&demand).map(|(&c, &d)| vec![c, d]).collect();
    let merges = cluster::ward_merges(&points);
    let labels = cluster::select_by_silhouette(&points, max_groups, |k| {
        cluster::cut_merges(points.len(), &merges, k)
    });
    let labels = cluster::canonical_labels(&labels);
    let k = cluster::cluster_count(&labels);
    Ok((0..k)
        .map(|g| {
            let members: Vec<&ItemStat> = stats.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(s, _)| s).collect();
            let range = |f: fn(&ItemStat) -> f64| {
                members.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], s| {
                    [lo.min(f(s)), hi.max(f(s))]
                })
            };
            ItemGroup {
                id: g,
                size: members.len(),
                members: members.iter().map(|s| s.item.clone()).collect(),
                cost_range: range(|s| s.cost),
                demand_range: range(|s| s.demand),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub id: String,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub runtime_seconds: f64,
}

fn default_w1() -> f64 {
    1.0
}

/// Selection instance; `budget_seconds: null` means no budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionProblem {
    pub groups: Vec<GroupEntry>,
    pub models: Vec<ModelEntry>,
    /// `[group][model]` accuracies.
    pub accuracy: Vec<Vec<f64>>,
    /// `[group][model]` accuracy standard deviations.
    #[serde(default)]
    pub std: Vec<Vec<f64>>,
    #[serde(default)]
    pub budget_seconds: Option<f64>,
    #[serde(default = "default_w1")]
    pub w1: f64,
    #[serde(default)]
    pub w2: f64,
}

impl SelectionProblem {
    pub fn validate(&self) -> Result<()> {
        let (ni, nj) = (self.groups.len(), self.models.len());
        if ni == 0 || nj == 0 {
            return Err(Error::EmptyInput);
        }
        let shape_ok = |m: &Vec<Vec<f64>>| m.len() == ni && m.iter().all(|r| r.len() == nj);
        if !shape_ok(&self.accuracy) {
            return Err(Error::ShapeMismatch(format!("accuracy matrix must be {ni} x {nj}")));
        }
        if !self.std.is_empty() && !shape_ok(&self.std) {
            return Err(Error::ShapeMismatch(format!("std matrix must be {ni} x {nj}")));
        }
        if self.accuracy.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig("accuracies must lie in [0, 1]".into()));
        }
        if self.std.iter().flatten().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig("std values must be finite and >= 0".into()));
        }
        if self.models.iter().any(|m| !(m.runtime_seconds >= 0.0) || !m.runtime_seconds.is_finite()) {
            return Err(Error::InvalidConfig("run times must be finite and >= 0".into()));
        }
        if self.groups.iter().map(|g| g.size).sum::<usize>() == 0 {
            return Err(Error::InvalidConfig("groups hold no items".into()));
        }
        if let Some(t) = self.budget_seconds {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig("budget_seconds must be >= 0".into()));
            }
        }
        for w in [self.w1, self.w2] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig("w1 and w2 must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    fn std_at(&self, i: usize, j: usize) -> f64 {
        self.std.get(i).map_or(0.0, |r| r[j])
    }

    fn shares(&self) -> Vec<f64> {
        let c = self.groups.iter().map(|g| g.size).sum::<usize>() as f64;
        self.groups.iter().map(|g| g.size as f64 / c).collect()
    }

    /// Objective and weighted run time of an assignment, summed in group order.
    pub fn evaluate(&self, assignment: &[usize], w1: f64, w2: f64) -> (f64, f64) {
        let shares = self.shares();
        let mut obj = 0.0;
        let mut time = 0.0;
        for (i, &j) in assignment.iter().enumerate() {
            obj += shares[i] * (w1 * self.accuracy[i][j] - w2 * self.std_at(i, j));
            time += shares[i] * self.models[j].runtime_seconds;
        }
        (obj, time)
    }

    fn budget(&self) -> f64 {
        self.budget_seconds.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Chosen model index per group.
    pub assignment: Vec<usize>,
    /// Chosen model id per group.
    pub models: Vec<String>,
    pub objective: f64,
    pub weighted_runtime: f64,
    pub optimal: bool,
}

struct Incumbent {
    assignment: Vec<usize>,
    objective: f64,
    time: f64,
}

impl Incumbent {
    /// Higher objective wins; exact ties go to the lexicographically smaller assignment.
    fn offer(best: &mut Option<Incumbent>, assignment: &[usize], objective: f64, time: f64) {
        let better = match best {
            None => true,
            Some(b) => objective > b.objective || (objective == b.objective && assignment < &b.assignment[..]),
        };
        if better {
            *best = Some(Incumbent {
                assignment: assignment.to_vec(),
                objective,
                time,
            });
        }
    }
}

fn finish(problem: &SelectionProblem, best: Option<Incumbent>) -> Result<SelectionResult> {
    let b = best.ok_or(Error::Infeasible)?;
    Ok(SelectionResult {
        models: b.assignment.iter().map(|&j| problem.models[j].id.clone()).collect(),
        assignment: b.assignment,
        objective: b.objective,
        weighted_runtime: b.time,
        optimal: true,
    })
}

/// Maximizes share-weighted accuracy subject to the budget.
pub fn solve_selection(problem: &SelectionProblem) -> Result<SelectionResult> {
    solve_selection_robust(problem, 1.0, 0.0)
}

/// Maximizes `w1`-weighted accuracy minus `w2`-weighted std subject to the budget.
pub fn solve_selection_robust(problem: &SelectionProblem, w1: f64, w2: f64) -> Result<SelectionResult> {
    problem.validate()?;
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(Error::InvalidConfig("w1 and w2 must be >= 0".into()));
    }
    let ni = problem.groups.len();
    let nj = problem.models.len();
    let shares = problem.shares();
    let budget = problem.budget();
    let value = |i: usize, j: usize| shares[i] * (w1 * problem.accuracy[i][j] - w2 * problem.std_at(i, j));
    let cost = |i: usize, j: usize| shares[i] * problem.models[j].runtime_seconds;

    // largest groups first; stable so equal sizes keep their order
    let mut order: Vec<usize> = (0..ni).collect();
    order.sort_by(|&a, &b| problem.groups[b].size.cmp(&problem.groups[a].size));
    let mut best_rest = vec![0.0; ni + 1];
    let mut min_cost_rest = vec![0.0; ni + 1];
    for d in (0..ni).rev() {
        let i = order[d];
        best_rest[d] = best_rest[d + 1] + (0..nj).map(|j| value(i, j)).fold(f64::NEG_INFINITY, f64::max);
        min_cost_rest[d] = min_cost_rest[d + 1] + (0..nj).map(|j| cost(i, j)).fold(f64::INFINITY, f64::min);
    }

    struct Search<'a> {
        order: &'a [usize],
        best_rest: &'a [f64],
        min_cost_rest: &'a [f64],
        assignment: Vec<usize>,
        best: Option<Incumbent>,
    }
    fn visit(
        s: &mut Search<'_>,
        problem: &SelectionProblem,
        depth: usize,
        acc_value: f64,
        acc_cost: f64,
        value: &dyn Fn(usize, usize) -> f64,
        cost: &dyn Fn(usize, usize) -> f64,
        w: (f64, f64),
        budget: f64,
    ) {
        if depth == s.order.len() {
            let (obj, time) = problem.evaluate(&s.assignment, w.0, w.1);
            if time <= budget {
                Incumbent::offer(&mut s.best, &s.assignment, obj, time);
            }
            return;
        }
        let tol = 1e-9 * (1.0 + budget.abs().min(1e300));
        if acc_cost + s.min_cost_rest[depth] > budget + tol {
            return;
        }
        if let Some(b) = &s.best {
            let slack = 1e-9 * (1.0 + b.objective.abs());
            if acc_value + s.best_rest[depth] + slack < b.objective {
                return;
            }
        }
        let i = s.order[depth];
        for j in 0..problem.models.len() {
            s.assignment[i] = j;
            visit(
                s,
                problem,
                depth + 1,
                acc_value + value(i, j),
                acc_cost + cost(i, j),
                value,
                cost,
                w,
                budget,
            );
        }
    }

    let mut s = Search {
        order: &order,
        best_rest: &best_rest,
        min_cost_rest: &min_cost_rest,
        assignment: vec![0; ni],
        best: None,
    };
    visit(&mut s, problem, 0, 0.0, 0.0, &value, &cost, (w1, w2), budget);
    finish(problem, s.best)
}

pub const ORACLE_LIMIT: u128 = 1_000_000;

/// Enumerates every assignment, in lexicographic order, with the problem's
/// own `w1` and `w2`.
pub fn brute_force_oracle(problem: &SelectionProblem) -> Result<SelectionResult> {
    brute_force_oracle_weighted(problem, problem.w1, problem.w2)
}

pub fn brute_force_oracle_weighted(problem: &SelectionProblem, w1: f64, w2: f64) -> Result<SelectionResult> {
    problem.validate()?;
    let ni = problem.groups.len();
    let nj = problem.models.len();
    let size = (nj as u128).checked_pow(ni as u32).unwrap_or(u128::MAX);
    if size > ORACLE_LIMIT {
        return Err(Error::InstanceTooLarge(size));
    }
    let budget = problem.budget();
    let mut assignment = vec![0usize; ni];
    let mut best = None;
    loop {
        let (obj, time) = problem.evaluate(&assignment, w1, w2);
        if time <= budget {
            Incumbent::offer(&mut best, &assignment, obj, time);
        }
        let mut d = ni;
        loop {
            if d == 0 {
                return finish(problem, best);
            }
            d -= 1;
            assignment[d] += 1;
            if assignment[d] < nj {
                break;
            }
            assignment[d] = 0;
        }
    }
}
