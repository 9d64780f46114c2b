//! Report tables computed from run records.
//!
//! Every figure is recomputed from `records.jsonl`; reports never read
//! cached state, so regenerating them is byte-for-byte repeatable.

use std::collections::BTreeMap;
use std::path::Path;

use m2wf_core::metrics::{
    acc_at_k, acc_at_k_budget, benchmark_table, studenteval_subset_table, DeltaMode, MethodResults, SampleFlags,
    ScoreTable, SubsetRow, TaskResult,
};
use m2wf_core::strategy::StrategyKind;
use m2wf_core::task::SubsetLabel;
use m2wf_core::usage::{summarize_usage, usage_table, UsageRow, UsageSample};
use serde::Serialize;

use crate::config::ReportSection;
use crate::error::{HarnessError, Result};
use crate::record::RunRecord;
use crate::sandbox::Verdict;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccRow {
    pub model: String,
    pub strategy: String,
    pub cells: Vec<(u32, f64)>,
    /// Selection-budget variant, when configured.
    pub budget_cells: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub scores: ScoreTable,
    /// Refusal rate in percent, parallel to `scores.rows`.
    pub refusal_rates: Vec<f64>,
    pub subsets: Option<Vec<SubsetRow>>,
    pub acc: Option<Vec<AccRow>>,
    pub acc_budget: Option<usize>,
    pub tokens: Vec<UsageRow>,
}

struct Group<'a> {
    model: String,
    label: String,
    kind: StrategyKind,
    /// Rows per task, sorted by sample index.
    tasks: BTreeMap<String, Vec<&'a RunRecord>>,
}

fn group_records<'a>(records: &'a [RunRecord], order: &[String]) -> Vec<Group<'a>> {
    let mut groups: BTreeMap<(String, usize, String), Group<'a>> = BTreeMap::new();
    for r in records {
        let rank = order.iter().position(|l| *l == r.strategy).unwrap_or(order.len());
        groups
            .entry((r.model.clone(), rank, r.strategy.clone()))
            .or_insert_with(|| Group {
                model: r.model.clone(),
                label: r.strategy.clone(),
                kind: r.kind,
                tasks: BTreeMap::new(),
            })
            .tasks
            .entry(r.task_id.clone())
            .or_default()
            .push(r);
    }
    let mut out: Vec<Group<'a>> = groups.into_values().collect();
    for g in &mut out {
        for rows in g.tasks.values_mut() {
            rows.sort_by_key(|r| r.sample_index);
        }
    }
    out
}

fn method_results(groups: &[Group<'_>]) -> Vec<MethodResults> {
    groups
        .iter()
        .map(|g| MethodResults {
            model: g.model.clone(),
            strategy: g.label.clone(),
            kind: g.kind,
            results: g
                .tasks
                .iter()
                .map(|(id, rows)| TaskResult {
                    task_id: id.clone(),
                    n: rows.len() as u32,
                    c: rows.iter().filter(|r| r.verdict == Verdict::Pass).count() as u32,
                    subset: rows[0].subset,
                })
                .collect(),
        })
        .collect()
}

fn core_err(e: m2wf_core::Error) -> HarnessError {
    HarnessError::Run(e.to_string())
}

/// Builds all tables. `order` lists strategy labels in display order.
pub fn build_report(records: &[RunRecord], settings: &ReportSection, order: &[String]) -> Result<Report> {
    if records.is_empty() {
        return Err(HarnessError::Run("no records to report".into()));
    }
    let groups = group_records(records, order);
    let methods = method_results(&groups);
    let min_n = methods.iter().flat_map(|m| m.results.iter().map(|r| r.n)).min().unwrap_or(0);
    let ks: Vec<u32> = settings.ks.iter().copied().filter(|k| *k <= min_n).collect();
    if ks.is_empty() {
        return Err(HarnessError::Run(format!("every requested k exceeds the {min_n} samples available per task")));
    }
    let every_model_has_normal = methods
        .iter()
        .all(|m| methods.iter().any(|b| b.model == m.model && b.kind == StrategyKind::Normal));
    let delta = if every_model_has_normal { DeltaMode::AgainstNormal } else { DeltaMode::Off };
    let scores = benchmark_table(&methods, &ks, delta).map_err(core_err)?;

    let refusal_rates = groups
        .iter()
        .map(|g| {
            let rows: Vec<&RunRecord> = g.tasks.values().flatten().copied().collect();
            rows.iter().filter(|r| r.trace.refusal).count() as f64 / rows.len() as f64 * 100.0
        })
        .collect();

    let subsets = if records.iter().all(|r| r.subset.is_some()) {
        Some(studenteval_subset_table(&methods, delta).map_err(core_err)?)
    } else {
        None
    };

    let acc = if settings.acc {
        let mut rows = Vec::new();
        for (g, m) in groups.iter().zip(&methods) {
            let mut cells = Vec::new();
            let mut budget_cells = Vec::new();
            for &k in &ks {
                cells.push((k, acc_at_k(&m.results, k).map_err(core_err)? * 100.0));
                if let Some(submissions) = settings.acc_budget {
                    let flags: Vec<Vec<SampleFlags>> = g
                        .tasks
                        .values()
                        .map(|rows| {
                            rows.iter()
                                .map(|r| SampleFlags {
                                    valid: !matches!(r.verdict, Verdict::ParseFailure | Verdict::CompileError),
                                    passed: r.verdict == Verdict::Pass,
                                })
                                .collect()
                        })
                        .collect();
                    budget_cells.push((k, acc_at_k_budget(&flags, submissions, k as usize).map_err(core_err)? * 100.0));
                }
            }
            rows.push(AccRow { model: g.model.clone(), strategy: g.label.clone(), cells, budget_cells });
        }
        Some(rows)
    } else {
        None
    };

    let summaries = summarize_usage(records.iter().map(|r| UsageSample {
        model: &r.model,
        strategy: r.kind,
        request: &r.fingerprint,
        usage: r.usage,
    }))
    .map_err(core_err)?;

    Ok(Report {
        scores,
        refusal_rates,
        subsets,
        acc,
        acc_budget: settings.acc_budget,
        tokens: usage_table(&summaries),
    })
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|d| format!("{d:+.2}")).unwrap_or_else(|| "-".into())
}

/// A rectangular table rendered as CSV or Markdown.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", self.header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (ext, body) in [("csv", self.to_csv()), ("md", self.to_markdown())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
        }
        Ok(())
    }
}

impl Report {
    pub fn scores_table(&self) -> Table {
        let mut header = vec!["Model".to_string(), "Strategy".to_string()];
        header.extend(self.scores.ks.iter().map(|k| format!("pass@{k}")));
        header.push("Avg".into());
        if self.scores.has_delta {
            header.push("Δ%".into());
        }
        header.push("Refusal %".into());
        let rows = self
            .scores
            .rows
            .iter()
            .zip(&self.refusal_rates)
            .map(|(r, refusal)| {
                let mut row = vec![r.model.clone(), r.strategy.clone()];
                row.extend(r.cells.iter().map(|(_, v)| fmt2(*v)));
                row.push(fmt2(r.avg));
                if self.scores.has_delta {
                    row.push(fmt_opt(r.delta));
                }
                row.push(fmt2(*refusal));
                row
            })
            .collect();
        Table { header, rows }
    }

    pub fn subsets_table(&self) -> Option<Table> {
        let rows = self.subsets.as_ref()?;
        let has_delta = rows.iter().any(|r| r.delta.is_some());
        let mut header = vec!["Model".to_string(), "Strategy".to_string()];
        header.extend(SubsetLabel::ALL.iter().map(|l| l.title().to_string()));
        header.push("Avg".into());
        if has_delta {
            header.push("Δ%".into());
        }
        let body = rows
            .iter()
            .map(|r| {
                let mut row = vec![r.model.clone(), r.strategy.clone()];
                row.extend(r.rates.iter().map(|v| v.map(fmt2).unwrap_or_else(|| "-".into())));
                row.push(fmt2(r.avg));
                if has_delta {
                    row.push(fmt_opt(r.delta));
                }
                row
            })
            .collect();
        Some(Table { header, rows: body })
    }

    pub fn acc_table(&self) -> Option<Table> {
        let rows = self.acc.as_ref()?;
        let mut header = vec!["Model".to_string(), "Strategy".to_string()];
        header.extend(self.scores.ks.iter().map(|k| format!("acc@{k}")));
        if let Some(b) = self.acc_budget {
            header.extend(self.scores.ks.iter().map(|k| format!("{b}@{k}")));
        }
        let body = rows
            .iter()
            .map(|r| {
                let mut row = vec![r.model.clone(), r.strategy.clone()];
                row.extend(r.cells.iter().chain(&r.budget_cells).map(|(_, v)| fmt2(*v)));
                row
            })
            .collect();
        Some(Table { header, rows: body })
    }

    pub fn tokens_table(&self) -> Table {
        let header = ["Model", "Strategy", "Input", "Output", "Calls/Task", "Input Δ%", "Output Δ%", "Estimated"]
            .map(String::from)
            .to_vec();
        let rows = self
            .tokens
            .iter()
            .map(|r| {
                let s = &r.summary;
                vec![
                    s.model.clone(),
                    s.strategy.title().to_string(),
                    fmt2(s.mean_input()),
                    fmt2(s.mean_output()),
                    fmt2(s.calls_per_request()),
                    fmt_opt(r.input_delta),
                    fmt_opt(r.output_delta),
                    if s.estimated { "yes" } else { "no" }.to_string(),
                ]
            })
            .collect();
        Table { header, rows }
    }

    /// Writes every table plus `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.scores_table().write(dir, "scores")?;
        if let Some(t) = self.subsets_table() {
            t.write(dir, "subsets")?;
        }
        if let Some(t) = self.acc_table() {
            t.write(dir, "acc")?;
        }
        self.tokens_table().write(dir, "tokens")?;
        let json = serde_json::to_value(self).expect("report serializes");
        let text = serde_json::to_string_pretty(&round_json(json)).expect("json serializes") + "\n";
        let path = dir.join("report.json");
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
    }
}

/// Rounds every non-integer number to two decimals.
fn round_json(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Number(n) if n.is_f64() => {
            let v = (n.as_f64().unwrap_or(0.0) * 100.0).round() / 100.0;
            serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}
