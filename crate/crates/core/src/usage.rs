//! Token accounting per (model, strategy).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::delta_percent;
use crate::strategy::StrategyKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub api_calls: u64,
    /// Counts come from a local estimate rather than the provider.
    #[serde(default)]
    pub estimated: bool,
}

/// One completion's usage, tagged with what produced it.
#[derive(Debug, Clone, Copy)]
pub struct UsageSample<'a> {
    pub model: &'a str,
    pub strategy: StrategyKind,
    /// Completions sharing a request fingerprint belong to one task prompt.
    pub request: &'a str,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub model: String,
    pub strategy: StrategyKind,
    pub records: u64,
    pub requests: u64,
    pub total_input: u64,
    pub total_output: u64,
    pub total_calls: u64,
    pub estimated: bool,
}

impl UsageSummary {
    pub fn mean_input(&self) -> f64 {
        self.total_input as f64 / self.records as f64
    }

    pub fn mean_output(&self) -> f64 {
        self.total_output as f64 / self.records as f64
    }

    /// API calls per task prompt.
    pub fn calls_per_request(&self) -> f64 {
        self.total_calls as f64 / self.requests as f64
    }
}

/// Arithmetic means per (model, strategy); rows sorted by model then strategy.
pub fn summarize_usage<'a>(samples: impl IntoIterator<Item = UsageSample<'a>>) -> Result<Vec<UsageSummary>> {
    let mut groups: BTreeMap<(String, StrategyKind), (UsageSummary, BTreeSet<&'a str>)> = BTreeMap::new();
    for s in samples {
        let (summary, requests) = groups
            .entry((s.model.into(), s.strategy))
            .or_insert_with(|| {
                (
                    UsageSummary {
                        model: s.model.into(),
                        strategy: s.strategy,
                        records: 0,
                        requests: 0,
                        total_input: 0,
                        total_output: 0,
                        total_calls: 0,
                        estimated: false,
                    },
                    BTreeSet::new(),
                )
            });
        summary.records += 1;
        summary.total_input += s.usage.input_tokens;
        summary.total_output += s.usage.output_tokens;
        summary.total_calls += s.usage.api_calls;
        summary.estimated |= s.usage.estimated;
        requests.insert(s.request);
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("no usage records"));
    }
    Ok(groups
        .into_values()
        .map(|(mut summary, requests)| {
            summary.requests = requests.len() as u64;
            summary
        })
        .collect())
}

/// Input/output token growth of each row relative to the model's Normal row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRow {
    pub summary: UsageSummary,
    pub input_delta: Option<f64>,
    pub output_delta: Option<f64>,
}

pub fn usage_table(summaries: &[UsageSummary]) -> Vec<UsageRow> {
    summaries
        .iter()
        .map(|s| {
            let base = summaries
                .iter()
                .find(|b| b.model == s.model && b.strategy == StrategyKind::Normal);
            let (input_delta, output_delta) = match base {
                Some(b) if s.strategy != StrategyKind::Normal => (
                    delta_percent(b.mean_input(), s.mean_input()),
                    delta_percent(b.mean_output(), s.mean_output()),
                ),
                _ => (None, None),
            };
            UsageRow { summary: s.clone(), input_delta, output_delta }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample(strategy: StrategyKind, request: &'static str, input: u64, output: u64) -> UsageSample<'static> {
        UsageSample {
            model: "m",
            strategy,
            request,
            usage: TokenUsage { input_tokens: input, output_tokens: output, api_calls: 1, estimated: false },
        }
    }

    #[test]
    fn one_record_is_its_own_mean() {
        let s = summarize_usage([sample(StrategyKind::Normal, "r", 10, 20)]).unwrap();
        assert_eq!((s[0].mean_input(), s[0].mean_output(), s[0].calls_per_request()), (10.0, 20.0, 1.0));
    }

    #[test]
    fn two_record_mean() {
        let s = summarize_usage([
            sample(StrategyKind::Normal, "a", 0, 100),
            sample(StrategyKind::Normal, "b", 0, 200),
        ])
        .unwrap();
        assert_eq!(s[0].mean_output(), 150.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(summarize_usage(vec![]).is_err());
    }

    #[test]
    fn deltas_against_normal() {
        let s = summarize_usage([
            sample(StrategyKind::Normal, "a", 100, 100),
            sample(StrategyKind::M2WF, "b", 300, 250),
        ])
        .unwrap();
        let rows = usage_table(&s);
        assert_eq!(rows[0].input_delta, None);
        assert_eq!(rows[1].input_delta, Some(200.0));
        assert_eq!(rows[1].output_delta, Some(150.0));
    }
}
