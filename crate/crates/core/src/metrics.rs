//! Unbiased pass@k estimation and the score tables built on it.
//!
//! All table cells are percentages (`0.0..=100.0`); rounding to two decimals
//! happens only when a table is rendered.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::strategy::StrategyKind;
use crate::task::SubsetLabel;
use crate::{Error, Result};

/// `1 - C(n-c, k) / C(n, k)`, evaluated as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(Error::Parameter(format!("c={c} exceeds n={n}")));
    }
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k={k} must be in 1..=n (n={n})")));
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let kf = k as f64;
    let mut miss = 1.0;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - kf / i as f64;
    }
    Ok(1.0 - miss)
}

/// Samples generated (`n`) and passing (`c`) for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub n: u32,
    pub c: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetLabel>,
}

impl TaskResult {
    pub fn new(task_id: impl Into<String>, n: u32, c: u32) -> Self {
        Self { task_id: task_id.into(), n, c, subset: None }
    }

    pub fn pass_at_k(&self, k: u32) -> Result<f64> {
        pass_at_k(self.n.into(), self.c.into(), k.into())
            .map_err(|e| Error::Parameter(format!("task {}: {e}", self.task_id)))
    }
}

/// Benchmark-level pass@k: the mean of per-task estimates, as a probability.
pub fn benchmark_pass_at_k(results: &[TaskResult], k: u32) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("no task results"));
    }
    let mut sum = 0.0;
    for r in results {
        sum += r.pass_at_k(k)?;
    }
    Ok(sum / results.len() as f64)
}

/// Solve rate at `k` over binary pass indicators; same estimator as pass@k.
pub fn acc_at_k(results: &[TaskResult], k: u32) -> Result<f64> {
    benchmark_pass_at_k(results, k)
}

/// Per-sample flags for the selection-budget reading of n@k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFlags {
    /// Candidate produced runnable code (parsed and compiled).
    pub valid: bool,
    pub passed: bool,
}

/// n@k with a submission budget: among the first `k` samples (in generation
/// order), submit the first `submissions` valid ones; a task counts as solved
/// when any submitted sample passes. Returns the solved fraction.
pub fn acc_at_k_budget(samples: &[Vec<SampleFlags>], submissions: usize, k: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no task results"));
    }
    if submissions == 0 || k == 0 {
        return Err(Error::Parameter("submissions and k must be positive".into()));
    }
    let mut solved = 0usize;
    for task in samples {
        if task.len() < k {
            return Err(Error::Parameter(format!("k={k} exceeds n={}", task.len())));
        }
        if task[..k].iter().filter(|s| s.valid).take(submissions).any(|s| s.passed) {
            solved += 1;
        }
    }
    Ok(solved as f64 / samples.len() as f64)
}

/// `(value - baseline) / baseline * 100`; `None` for a zero baseline.
pub fn delta_percent(baseline: f64, value: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (value - baseline) / baseline * 100.0)
}

/// Relative drop `(baseline - value) / baseline * 100`, as in ablation tables.
pub fn drop_percent(baseline: f64, value: f64) -> Option<f64> {
    delta_percent(baseline, value).map(|d| -d)
}

/// All task results of one (model, strategy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub model: String,
    pub strategy: String,
    pub kind: StrategyKind,
    pub results: Vec<TaskResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaMode {
    Off,
    /// Compare each row with the Normal row of the same model.
    AgainstNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub strategy: String,
    pub kind: StrategyKind,
    /// `(k, pass@k %)` in requested order.
    pub cells: Vec<(u32, f64)>,
    pub avg: f64,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub ks: Vec<u32>,
    pub rows: Vec<ScoreRow>,
    pub has_delta: bool,
}

pub fn benchmark_table(groups: &[MethodResults], ks: &[u32], delta: DeltaMode) -> Result<ScoreTable> {
    if ks.is_empty() {
        return Err(Error::Parameter("no k values requested".into()));
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("no results to tabulate"));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for group in groups {
        let mut cells = Vec::with_capacity(ks.len());
        for &k in ks {
            cells.push((k, benchmark_pass_at_k(&group.results, k)? * 100.0));
        }
        let avg = cells.iter().map(|(_, v)| v).sum::<f64>() / cells.len() as f64;
        rows.push(ScoreRow {
            model: group.model.clone(),
            strategy: group.strategy.clone(),
            kind: group.kind,
            cells,
            avg,
            delta: None,
        });
    }
    if delta == DeltaMode::AgainstNormal {
        apply_deltas(&mut rows, |r| (&r.model, r.kind, r.avg), |r, d| r.delta = d)?;
    }
    Ok(ScoreTable { ks: ks.to_vec(), rows, has_delta: delta == DeltaMode::AgainstNormal })
}

fn apply_deltas<R>(
    rows: &mut [R],
    key: impl Fn(&R) -> (&String, StrategyKind, f64),
    mut set: impl FnMut(&mut R, Option<f64>),
) -> Result<()> {
    let baselines: Vec<(String, f64)> = rows
        .iter()
        .map(&key)
        .filter(|(_, kind, _)| *kind == StrategyKind::Normal)
        .map(|(model, _, avg)| (model.clone(), avg))
        .collect();
    for row in rows.iter_mut() {
        let (model, kind, avg) = key(row);
        let baseline = baselines
            .iter()
            .find(|(m, _)| m == model)
            .map(|(_, b)| *b)
            .ok_or_else(|| Error::Config(format!("no Normal baseline row for model {model}")))?;
        let delta = if kind == StrategyKind::Normal { None } else { delta_percent(baseline, avg) };
        set(row, delta);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub model: String,
    pub strategy: String,
    pub kind: StrategyKind,
    /// pass@1 % per subset in [`SubsetLabel::ALL`] order; `None` when empty.
    pub rates: [Option<f64>; 4],
    /// Mean of the non-empty subset rates.
    pub avg: f64,
    pub delta: Option<f64>,
    pub warnings: Vec<String>,
}

/// Per-subset pass@1 for StudentEval-style results.
pub fn studenteval_subset_table(groups: &[MethodResults], delta: DeltaMode) -> Result<Vec<SubsetRow>> {
    if groups.is_empty() {
        return Err(Error::EmptyInput("no results to tabulate"));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for group in groups {
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for r in &group.results {
            let label = r.subset.ok_or_else(|| {
                Error::Schema(format!("task {} carries no subset label", r.task_id))
            })?;
            let slot = SubsetLabel::ALL.iter().position(|l| *l == label).unwrap_or(0);
            sums[slot] += r.pass_at_k(1)?;
            counts[slot] += 1;
        }
        let mut rates = [None; 4];
        let mut warnings = Vec::new();
        for (i, label) in SubsetLabel::ALL.iter().enumerate() {
            if counts[i] == 0 {
                warnings.push(format!("subset {label} is empty; excluded from Avg"));
            } else {
                rates[i] = Some(sums[i] / counts[i] as f64 * 100.0);
            }
        }
        let present: Vec<f64> = rates.iter().flatten().copied().collect();
        let avg = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        rows.push(SubsetRow {
            model: group.model.clone(),
            strategy: group.strategy.clone(),
            kind: group.kind,
            rates,
            avg,
            delta: None,
            warnings,
        });
    }
    if delta == DeltaMode::AgainstNormal {
        apply_deltas(&mut rows, |r| (&r.model, r.kind, r.avg), |r, d| r.delta = d)?;
    }
    Ok(rows)
}
