//! Uniform task model shared by every benchmark loader.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_LANGUAGE: &str = "python3";

/// Metadata key holding the StudentEval subset label of a task.
pub const META_SUBSET: &str = "subset";
/// Metadata key holding a Codeforces difficulty level.
pub const META_LEVEL: &str = "level";
/// Metadata key holding the upstream problem identifier.
pub const META_PROBLEM: &str = "problem";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JudgeMode {
    FunctionTests,
    StdioTests,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StdioCase {
    pub stdin: String,
    pub expected_stdout: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSuite {
    /// Assertion program that references the entry point and exits non-zero on failure.
    CheckProgram(String),
    Cases(Vec<StdioCase>),
}

impl TestSuite {
    pub fn judge_mode(&self) -> JudgeMode {
        match self {
            TestSuite::CheckProgram(_) => JudgeMode::FunctionTests,
            TestSuite::Cases(_) => JudgeMode::StdioTests,
        }
    }
}

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    /// The user requirement handed to the model.
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
    pub test_suite: TestSuite,
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_solution: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

fn default_language() -> String {
    DEFAULT_LANGUAGE.to_string()
}

impl Task {
    pub fn judge_mode(&self) -> JudgeMode {
        self.test_suite.judge_mode()
    }

    pub fn subset(&self) -> Option<SubsetLabel> {
        self.metadata.get(META_SUBSET).and_then(|s| s.parse().ok())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Schema("task id is empty".into()));
        }
        match &self.test_suite {
            TestSuite::CheckProgram(program) => {
                if self.entry_point.as_deref().is_none_or(str::is_empty) {
                    return Err(Error::Schema(format!(
                        "task {}: function-test tasks need an entry point",
                        self.id
                    )));
                }
                if program.trim().is_empty() {
                    return Err(Error::Schema(format!("task {}: empty check program", self.id)));
                }
            }
            TestSuite::Cases(cases) => {
                if cases.is_empty() {
                    return Err(Error::Schema(format!(
                        "task {}: stdio tasks need at least one test case",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The four disjoint StudentEval prompt subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetLabel {
    FirstFailure,
    FirstSuccess,
    LastFailure,
    LastSuccess,
}

impl SubsetLabel {
    /// Column order used by StudentEval report tables.
    pub const ALL: [SubsetLabel; 4] = [
        SubsetLabel::FirstFailure,
        SubsetLabel::FirstSuccess,
        SubsetLabel::LastFailure,
        SubsetLabel::LastSuccess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetLabel::FirstFailure => "first_failure",
            SubsetLabel::FirstSuccess => "first_success",
            SubsetLabel::LastFailure => "last_failure",
            SubsetLabel::LastSuccess => "last_success",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SubsetLabel::FirstFailure => "First Failure",
            SubsetLabel::FirstSuccess => "First Success",
            SubsetLabel::LastFailure => "Last Failure",
            SubsetLabel::LastSuccess => "Last Success",
        }
    }
}

impl fmt::Display for SubsetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetLabel {
    type Err = Error;

    /// Accepts `first_success`, `FirstSuccess`, `first-success` and `First Success`.
    fn from_str(s: &str) -> Result<Self> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match folded.as_str() {
            "firstfailure" => Ok(SubsetLabel::FirstFailure),
            "firstsuccess" => Ok(SubsetLabel::FirstSuccess),
            "lastfailure" => Ok(SubsetLabel::LastFailure),
            "lastsuccess" => Ok(SubsetLabel::LastSuccess),
            _ => Err(Error::Schema(format!("unknown subset label {s:?}"))),
        }
    }
}

/// A validated, immutable set of tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    name: String,
    tasks: Vec<Task>,
    metadata: BTreeMap<String, String>,
}

impl BenchmarkManifest {
    pub fn new(
        name: impl Into<String>,
        tasks: Vec<Task>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mode = tasks[0].judge_mode();
        let mut seen = BTreeSet::new();
        for task in &tasks {
            task.validate()?;
            if task.judge_mode() != mode {
                return Err(Error::Schema(format!(
                    "task {} uses {:?} but the benchmark uses {:?}",
                    task.id,
                    task.judge_mode(),
                    mode
                )));
            }
            if !seen.insert(task.id.as_str()) {
                return Err(Error::Schema(format!("duplicate task id {}", task.id)));
            }
        }
        Ok(Self { name: name.into(), tasks, metadata })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn judge_mode(&self) -> JudgeMode {
        self.tasks[0].judge_mode()
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }
}
