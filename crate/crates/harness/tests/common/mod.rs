//! Shared fixtures for end-to-end tests: a four-task HumanEval file, mock
//! transcripts and configs in a temporary directory.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m2wf_core::task::Task;
use serde_json::{json, Value};
use tempfile::TempDir;

/// (entry point, parameters, correct body, wrong body, test assertion)
pub const TASKS: [(&str, &str, &str, &str, &str); 4] = [
    ("add", "a, b", "a + b", "a - b", "assert candidate(2, 3) == 5"),
    ("sub", "a, b", "a - b", "a + b", "assert candidate(5, 3) == 2"),
    ("mul", "a, b", "a * b", "a + b", "assert candidate(4, 3) == 12"),
    ("neg", "a", "-a", "a", "assert candidate(4) == -4"),
];

pub fn task_id(i: usize) -> String {
    format!("HumanEval/{i}")
}

pub fn code(i: usize, correct: bool) -> String {
    let (name, params, good, bad, _) = TASKS[i];
    format!("def {name}({params}):\n    return {}\n", if correct { good } else { bad })
}

pub fn plain_response(i: usize, correct: bool) -> String {
    format!("Here you go.\n```python\n{}```\n", code(i, correct))
}

/// A complete single-pass workflow response with `k` recalled examples.
pub fn workflow_response(k: usize, i: usize, correct: bool) -> String {
    let mut out = String::new();
    for r in 0..k {
        out.push_str(&format!(
            "### RECALL {}\nProblem: Example problem {r}.\nSteps: Step {r}.\n```python\ndef ex{r}():\n    return {r}\n```\n\n",
            r + 1
        ));
    }
    out.push_str("### EVALUATION\n");
    for r in 0..k {
        out.push_str(&format!("Example {}: Confidence: {}\n", r + 1, 90 - r));
    }
    out.push_str(&format!("\n### PLAN\nApply the operator.\n\n### SOLUTION\n```python\n{}```\n", code(i, correct)));
    out
}

/// Text that the stage ablation fixtures use as recalled problem statements.
/// Long enough that corruption at the default rate cannot leave it intact.
pub fn marker() -> String {
    "the marker problem statement stays recognisable only when nobody corrupts it ".repeat(3)
}

/// First-step response for the stage ablation: recall only.
pub fn recall_only_response(k: usize) -> String {
    let mut out = String::new();
    for r in 0..k {
        out.push_str(&format!(
            "### RECALL {}\nProblem: {}\nSteps: Step {r}.\n```python\ndef ex{r}():\n    return {r}\n```\n\n",
            r + 1,
            marker().trim()
        ));
    }
    out
}

pub fn rule(key: &str, responses: Vec<String>) -> Value {
    json!({ "key": key, "responses": responses })
}

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = TASKS
            .iter()
            .enumerate()
            .map(|(i, (name, params, good, _, assertion))| {
                json!({
                    "task_id": task_id(i),
                    "prompt": format!("def {name}({params}):\n    \"\"\"Compute {name}.\"\"\"\n"),
                    "entry_point": name,
                    "canonical_solution": format!("    return {good}\n"),
                    "test": format!("def check(candidate):\n    {assertion}\n"),
                })
                .to_string()
            })
            .collect();
        std::fs::write(dir.path().join("humaneval.jsonl"), lines.join("\n") + "\n").unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, content: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    pub fn tasks(&self) -> Vec<Task> {
        m2wf_harness::corpus::load_humaneval(&self.path("humaneval.jsonl")).unwrap().tasks().to_vec()
    }

    pub fn transcript(&self, rules: Vec<Value>) -> PathBuf {
        self.write("transcript.json", &json!({ "rules": rules }).to_string())
    }

    /// Tasks 0 and 1 are solved by every strategy, 2 and 3 by none.
    pub fn half_solved_transcript(&self) -> PathBuf {
        let mut rules = Vec::new();
        for i in 0..TASKS.len() {
            let correct = i < 2;
            let mut plain = rule(&task_id(i), vec![plain_response(i, correct)]);
            if i % 2 == 0 {
                plain["usage"] = json!({ "input_tokens": 120, "output_tokens": 30 });
            }
            rules.push(plain);
            rules.push(rule(&format!("{}/m2wf", task_id(i)), vec![workflow_response(5, i, correct)]));
        }
        self.transcript(rules)
    }

    /// Config with the given extra TOML appended.
    pub fn config(&self, strategies: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"output_dir = "runs"
run_id = "main"
workers = 2
seed = 7

[benchmark]
kind = "humaneval"
path = "humaneval.jsonl"

[model]
name = "mock-model"
provider = "mock"
transcript = "transcript.json"

[limits]
wall_timeout_secs = 5.0

{strategies}
{extra}
"#
        );
        self.write("config.toml", &text)
    }

    pub fn default_strategies() -> &'static str {
        "[[strategies]]\nkind = \"normal\"\n\n[[strategies]]\nkind = \"cot\"\n\n[[strategies]]\nkind = \"m2wf\"\nk = 5\nm = 3\n"
    }

    pub fn run_dir(&self) -> PathBuf {
        self.path("runs").join("main")
    }
}

pub fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2wf")).args(args).current_dir(cwd).output().unwrap()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every regular file under `dir`, recursively.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}
