//! Prompt construction for every prompting method and parsing of model
//! responses into staged traces.

mod parse;
mod prompt;
mod select;
pub mod template;

pub use parse::{
    extract_code, parse_stage_artifacts, parse_trace, ParseFailure, RecalledExample, StagedTrace, RECALL_MARKER,
    EVALUATION_MARKER, PLAN_MARKER, SOLUTION_MARKER,
};
pub use prompt::{
    build_continuation_prompt, build_prompt, build_stage_prompt, Message, PromptBundle, Role,
    Stage, StageArtifacts,
};
pub use select::select_top_m;

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The prompting methods under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Normal,
    #[serde(rename = "cot")]
    CoT,
    Analogical,
    FewShot,
    #[serde(rename = "m2wf")]
    M2WF,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Normal,
        StrategyKind::CoT,
        StrategyKind::Analogical,
        StrategyKind::FewShot,
        StrategyKind::M2WF,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Normal => "normal",
            StrategyKind::CoT => "cot",
            StrategyKind::Analogical => "analogical",
            StrategyKind::FewShot => "few_shot",
            StrategyKind::M2WF => "m2wf",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            StrategyKind::Normal => "Normal",
            StrategyKind::CoT => "CoT",
            StrategyKind::Analogical => "Analogical",
            StrategyKind::FewShot => "Few-shot",
            StrategyKind::M2WF => "M2WF",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match folded.as_str() {
            "normal" => Ok(StrategyKind::Normal),
            "cot" => Ok(StrategyKind::CoT),
            "analogical" => Ok(StrategyKind::Analogical),
            "fewshot" => Ok(StrategyKind::FewShot),
            "m2wf" => Ok(StrategyKind::M2WF),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Largest recall count the published sweeps go up to.
pub const MAX_EXPERIMENT_K: u32 = 8;

/// Recall count, selection count and the language named in the instructions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct M2WFParams {
    pub k: u32,
    pub m: u32,
    #[serde(default = "default_target_language")]
    pub target_language: String,
}

fn default_target_language() -> String {
    "Python3".to_string()
}

impl Default for M2WFParams {
    fn default() -> Self {
        Self { k: 5, m: 3, target_language: default_target_language() }
    }
}

impl M2WFParams {
    pub fn new(k: u32, m: u32) -> Result<Self> {
        let params = Self { k, m, ..Self::default() };
        params.validate()?;
        Ok(params)
    }

    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.target_language = language.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Parameter("M must be at least 1".into()));
        }
        if self.m > self.k {
            return Err(Error::Parameter(format!(
                "M must not exceed K (M={}, K={})",
                self.m, self.k
            )));
        }
        if self.target_language.trim().is_empty() {
            return Err(Error::Parameter("target language is empty".into()));
        }
        Ok(())
    }
}

/// Display name used in the instructions for a task language tag.
pub fn language_display_name(tag: &str) -> String {
    match tag.to_ascii_lowercase().as_str() {
        "python3" | "python" | "py" => "Python3".into(),
        "cpp" | "c++" | "cxx" => "C++".into(),
        "js" | "javascript" => "JavaScript".into(),
        "ts" | "typescript" => "TypeScript".into(),
        "java" => "Java".into(),
        "go" | "golang" => "Go".into(),
        "rs" | "rust" => "Rust".into(),
        "sh" | "bash" => "Bash".into(),
        "cs" | "csharp" => "C#".into(),
        "php" => "PHP".into(),
        _ => tag.to_string(),
    }
}
