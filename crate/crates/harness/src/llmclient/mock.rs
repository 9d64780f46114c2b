//! Scripted provider for offline runs and tests.
//!
//! A transcript is a JSON object:
//!
//! ```json
//! {"server_side_n": false,
//!  "rules": [{"key": "HumanEval/0", "contains": ["Recall 5"],
//!             "responses": ["```python\n...\n```"],
//!             "usage": {"input_tokens": 120, "output_tokens": 300},
//!             "failures": [429, 429]}]}
//! ```
//!
//! Rules are looked up by prompt fingerprint, then `task_id/variant`, then
//! `task_id`, then `*`; within a key the first rule whose `contains` strings
//! all occur in the prompt wins. Responses cycle by sample index. The first
//! calls to a rule fail with the listed HTTP statuses.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::provider::{Provider, ProviderError, ProviderRequest, ProviderResponse, ProviderUsage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transcript {
    #[serde(default)]
    pub server_side_n: bool,
    pub rules: Vec<TranscriptRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRule {
    pub key: String,
    #[serde(default)]
    pub contains: Vec<String>,
    pub responses: Vec<String>,
    #[serde(default)]
    pub usage: Option<RuleUsage>,
    #[serde(default)]
    pub failures: Vec<u16>,
}

/// Reported per completion; input tokens once per call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

pub struct MockProvider {
    transcript: Transcript,
    rule_calls: Vec<AtomicU64>,
    calls: AtomicU64,
}

impl MockProvider {
    pub fn new(transcript: Transcript) -> Result<Self, String> {
        if let Some(rule) = transcript.rules.iter().find(|r| r.responses.is_empty()) {
            return Err(format!("transcript rule {:?} has no responses", rule.key));
        }
        let rule_calls = transcript.rules.iter().map(|_| AtomicU64::new(0)).collect();
        Ok(Self { transcript, rule_calls, calls: AtomicU64::new(0) })
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let transcript: Transcript =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::new(transcript)
    }

    /// Calls received so far, failed ones included.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn find_rule(&self, request: &ProviderRequest<'_>) -> Option<usize> {
        let bundle = request.bundle;
        let text: String = bundle.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n");
        let keys = [
            bundle.params_fingerprint.clone(),
            format!("{}/{}", bundle.task_id, bundle.variant),
            bundle.task_id.clone(),
            "*".to_string(),
        ];
        keys.iter().find_map(|key| {
            self.transcript
                .rules
                .iter()
                .position(|r| &r.key == key && r.contains.iter().all(|c| text.contains(c.as_str())))
        })
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<ProviderResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let index = self.find_rule(request).ok_or_else(|| {
            ProviderError::Fatal(format!(
                "no transcript rule for task {} ({})",
                request.bundle.task_id, request.bundle.variant
            ))
        })?;
        let rule = &self.transcript.rules[index];
        let call = self.rule_calls[index].fetch_add(1, Ordering::SeqCst) as usize;
        if let Some(status) = rule.failures.get(call) {
            return Err(ProviderError::from_status(*status, "scripted failure"));
        }
        let choices: Vec<String> = request
            .indices
            .iter()
            .map(|i| rule.responses[*i as usize % rule.responses.len()].clone())
            .collect();
        let usage = rule.usage.map(|u| ProviderUsage {
            prompt_tokens: u.input_tokens,
            completion_tokens: u.output_tokens * choices.len() as u64,
        });
        Ok(ProviderResponse { choices, usage })
    }

    fn supports_server_side_n(&self) -> bool {
        self.transcript.server_side_n
    }
}
