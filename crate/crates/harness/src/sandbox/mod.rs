//! Candidate execution under resource limits.
//!
//! Each candidate runs in a fresh scratch directory below a per-run temp
//! root, in its own session with a clean environment, capped memory, no core
//! dumps and a wall-clock limit enforced by killing the process group. This
//! is not a jail: network and filesystem reads are still available, so an
//! external wrapper command can be configured to harden execution further.

mod process;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use m2wf_core::strategy::ParseFailure;
use m2wf_core::task::{Task, TestSuite};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use process::{run_process, ProcessRequest};

#[derive(Debug, Error)]
pub enum SandboxError {
    /// The judging environment is broken (missing interpreter, unwritable
    /// scratch space). Never a property of the candidate.
    #[error("environment error: {0}")]
    Environment(String),
    #[error("invalid limits: {0}")]
    Limits(String),
}

pub type Result<T, E = SandboxError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionLimits {
    /// Budget for all run steps of one candidate.
    pub wall_timeout: Duration,
    pub compile_timeout: Duration,
    pub memory_cap: u64,
    pub output_cap: usize,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            wall_timeout: Duration::from_secs(10),
            compile_timeout: Duration::from_secs(30),
            memory_cap: 512 * 1024 * 1024,
            output_cap: 1024 * 1024,
        }
    }
}

impl ExecutionLimits {
    pub fn validate(&self) -> Result<()> {
        if self.wall_timeout.is_zero() || self.compile_timeout.is_zero() {
            return Err(SandboxError::Limits("timeouts must be positive".into()));
        }
        if self.memory_cap == 0 || self.output_cap == 0 {
            return Err(SandboxError::Limits("memory and output caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    WrongAnswer,
    RuntimeError,
    CompileError,
    Timeout,
    MemoryExceeded,
    ParseFailure,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::WrongAnswer => "wrong_answer",
            Verdict::RuntimeError => "runtime_error",
            Verdict::CompileError => "compile_error",
            Verdict::Timeout => "timeout",
            Verdict::MemoryExceeded => "memory_exceeded",
            Verdict::ParseFailure => "parse_failure",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub verdict: Verdict,
    pub stdout: String,
    pub stderr: String,
    /// Time spent in run steps, excluding compilation.
    pub duration: Duration,
}

impl ExecutionOutcome {
    fn without_process(verdict: Verdict, detail: String) -> Self {
        Self { verdict, stdout: String::new(), stderr: detail, duration: Duration::ZERO }
    }
}

/// How to build and run one language. Commands are argument vectors with
/// `{src}`, `{dir}` and `{exe}` placeholders; nothing goes through a shell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerSpec {
    #[serde(default)]
    pub language_tag: String,
    #[serde(default)]
    pub compile_command: Option<Vec<String>>,
    pub run_command: Vec<String>,
    pub file_extension: String,
    /// Source file name without extension.
    #[serde(default = "default_stem")]
    pub source_stem: String,
    /// Put the task prompt in front of the candidate when it holds a
    /// complete signature (true for Python prompts).
    #[serde(default)]
    pub prepend_prompt: bool,
}

fn default_stem() -> String {
    "main".into()
}

pub type RunnerTable = BTreeMap<String, RunnerSpec>;

fn argv(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn runner(tag: &str, compile: Option<&[&str]>, run: &[&str], ext: &str, stem: &str, prepend: bool) -> (String, RunnerSpec) {
    (
        tag.to_string(),
        RunnerSpec {
            language_tag: tag.into(),
            compile_command: compile.map(argv),
            run_command: argv(run),
            file_extension: ext.into(),
            source_stem: stem.into(),
            prepend_prompt: prepend,
        },
    )
}

/// Runners for the languages used in the multilingual runs.
pub fn default_runners() -> RunnerTable {
    BTreeMap::from([
        runner("python3", Some(&["python3", "-m", "py_compile", "{src}"]), &["python3", "{src}"], "py", "main", true),
        runner("cpp", Some(&["g++", "-O2", "-std=c++17", "-o", "{exe}", "{src}"]), &["{exe}"], "cpp", "main", false),
        runner("js", Some(&["node", "--check", "{src}"]), &["node", "{src}"], "js", "main", false),
        runner("sh", Some(&["bash", "-n", "{src}"]), &["bash", "{src}"], "sh", "main", false),
        runner("rs", Some(&["rustc", "-O", "-o", "{exe}", "{src}"]), &["{exe}"], "rs", "main", false),
        runner("java", Some(&["javac", "-d", "{dir}", "{src}"]), &["java", "-cp", "{dir}", "Problem"], "java", "Problem", false),
        runner("go", Some(&["go", "build", "-o", "{exe}", "{src}"]), &["{exe}"], "go", "main", false),
    ])
}

impl RunnerSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = |c: &[String]| c.is_empty() || c[0].trim().is_empty();
        if empty(&self.run_command) {
            return Err(SandboxError::Environment(format!("runner {} has an empty run command", self.language_tag)));
        }
        if self.compile_command.as_deref().is_some_and(empty) {
            return Err(SandboxError::Environment(format!("runner {} has an empty compile command", self.language_tag)));
        }
        Ok(())
    }

    /// Executables this runner needs on `PATH` (placeholders excluded).
    pub fn binaries(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for cmd in self.compile_command.iter().chain(std::iter::once(&self.run_command)) {
            if let Some(first) = cmd.first() {
                if !first.contains('{') && !out.contains(&first.as_str()) {
                    out.push(first.as_str());
                }
            }
        }
        out
    }
}

/// Looks `binary` up on `path` the way `execvp` would.
pub fn find_binary(binary: &str, path: Option<&std::ffi::OsStr>) -> Option<PathBuf> {
    if binary.contains('/') {
        let p = PathBuf::from(binary);
        return p.is_file().then_some(p);
    }
    std::env::split_paths(path?).map(|dir| dir.join(binary)).find(|p| p.is_file())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    /// Ignore trailing whitespace on each line and trailing blank lines.
    #[default]
    Normalized,
    Exact,
}

pub fn normalize_output(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

fn outputs_match(actual: &str, expected: &str, mode: CompareMode) -> bool {
    match mode {
        CompareMode::Normalized => normalize_output(actual) == normalize_output(expected),
        CompareMode::Exact => actual == expected,
    }
}

/// Builds the single program run for function-test tasks.
pub fn assemble_program(task: &Task, source: &str, runner: &RunnerSpec) -> String {
    let mut program = String::new();
    if runner.prepend_prompt && task.prompt.contains("def ") {
        program.push_str(&task.prompt);
        program.push('\n');
    }
    program.push_str(source);
    if let TestSuite::CheckProgram(check) = &task.test_suite {
        program.push_str("\n\n");
        program.push_str(check);
        if !check.ends_with('\n') {
            program.push('\n');
        }
    }
    program
}

fn sanitize(id: &str) -> String {
    let readable: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    let digest = Sha256::digest(id.as_bytes());
    format!("{readable}-{}", hex::encode(&digest[..4]))
}

#[derive(Debug, Clone)]
pub struct SandboxOptions {
    pub limits: ExecutionLimits,
    pub runners: RunnerTable,
    pub compare: CompareMode,
    /// Argument vector put in front of every run command.
    pub wrapper: Vec<String>,
}

impl Default for SandboxOptions {
    fn default() -> Self {
        Self { limits: ExecutionLimits::default(), runners: default_runners(), compare: CompareMode::default(), wrapper: Vec::new() }
    }
}

/// A judge bound to one run. The scratch root is removed on drop.
pub struct Sandbox {
    options: SandboxOptions,
    root: tempfile::TempDir,
    path_var: OsString,
}

impl Sandbox {
    pub fn new(run_label: &str, options: SandboxOptions) -> Result<Self> {
        options.limits.validate()?;
        for spec in options.runners.values() {
            spec.validate()?;
        }
        let root = tempfile::Builder::new()
            .prefix(&format!("{}-", sanitize(run_label)))
            .tempdir()
            .map_err(|e| SandboxError::Environment(format!("cannot create scratch root: {e}")))?;
        let path_var = std::env::var_os("PATH").unwrap_or_else(|| "/usr/local/bin:/usr/bin:/bin".into());
        Ok(Self { options, root, path_var })
    }

    pub fn options(&self) -> &SandboxOptions {
        &self.options
    }

    pub fn scratch_root(&self) -> &Path {
        self.root.path()
    }

    pub fn runner_for(&self, language: &str) -> Result<&RunnerSpec> {
        self.options.runners.get(language).ok_or_else(|| {
            SandboxError::Environment(format!(
                "no runner configured for language {language:?}; configured runners: {}",
                self.options.runners.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Checks that every binary the runner needs is on `PATH`.
    pub fn check_runner(&self, language: &str) -> Result<()> {
        let spec = self.runner_for(language)?;
        for bin in spec.binaries() {
            if find_binary(bin, Some(&self.path_var)).is_none() {
                return Err(SandboxError::Environment(format!("runner binary {bin:?} for {language} not found on PATH")));
            }
        }
        Ok(())
    }

    /// Judges one candidate. Parse failures are scored without spawning.
    pub fn judge(&self, task: &Task, sample_index: u32, candidate: Result<&str, &ParseFailure>) -> Result<ExecutionOutcome> {
        match candidate {
            Ok(source) => self.execute(task, sample_index, source),
            Err(failure) => Ok(ExecutionOutcome::without_process(Verdict::ParseFailure, failure.to_string())),
        }
    }

    pub fn execute(&self, task: &Task, sample_index: u32, source: &str) -> Result<ExecutionOutcome> {
        let runner = self.runner_for(&task.language)?;
        let dir = self.root.path().join(sanitize(&task.id)).join(sample_index.to_string());
        fs::create_dir_all(&dir)
            .map_err(|e| SandboxError::Environment(format!("cannot create {}: {e}", dir.display())))?;
        let outcome = self.execute_in(&dir, task, source, runner);
        let _ = fs::remove_dir_all(&dir);
        outcome
    }

    fn execute_in(&self, dir: &Path, task: &Task, source: &str, runner: &RunnerSpec) -> Result<ExecutionOutcome> {
        let limits = &self.options.limits;
        let src = dir.join(format!("{}.{}", runner.source_stem, runner.file_extension));
        let exe = dir.join(&runner.source_stem);
        let program = match &task.test_suite {
            TestSuite::CheckProgram(_) => assemble_program(task, source, runner),
            TestSuite::Cases(_) => source.to_string(),
        };
        fs::write(&src, program)
            .map_err(|e| SandboxError::Environment(format!("cannot write {}: {e}", src.display())))?;
        let fill = |cmd: &[String]| -> Vec<String> {
            cmd.iter()
                .map(|a| {
                    a.replace("{src}", &src.to_string_lossy())
                        .replace("{dir}", &dir.to_string_lossy())
                        .replace("{exe}", &exe.to_string_lossy())
                })
                .collect()
        };

        if let Some(compile) = &runner.compile_command {
            let out = run_process(&ProcessRequest {
                argv: &fill(compile),
                cwd: dir,
                stdin: None,
                timeout: limits.compile_timeout,
                memory_cap: None,
                output_cap: limits.output_cap,
                path_var: &self.path_var,
            })?;
            if out.timed_out || !out.success() {
                let mut stderr = out.stderr_text();
                if out.timed_out {
                    stderr.push_str("\ncompilation timed out");
                }
                return Ok(ExecutionOutcome { verdict: Verdict::CompileError, stdout: out.stdout_text(), stderr, duration: Duration::ZERO });
            }
        }

        let mut run_argv = self.options.wrapper.clone();
        run_argv.extend(fill(&runner.run_command));
        let started = Instant::now();
        let run = |stdin: Option<&[u8]>| {
            let remaining = limits.wall_timeout.saturating_sub(started.elapsed());
            run_process(&ProcessRequest {
                argv: &run_argv,
                cwd: dir,
                stdin,
                timeout: remaining.max(Duration::from_millis(1)),
                memory_cap: Some(limits.memory_cap),
                output_cap: limits.output_cap,
                path_var: &self.path_var,
            })
        };

        match &task.test_suite {
            TestSuite::CheckProgram(_) => {
                let out = run(None)?;
                let verdict = classify(&out, None);
                Ok(ExecutionOutcome { verdict, stdout: out.stdout_text(), stderr: out.stderr_text(), duration: started.elapsed() })
            }
            TestSuite::Cases(cases) => {
                let (mut stdout, mut stderr) = (String::new(), String::new());
                for case in cases {
                    let out = run(Some(case.stdin.as_bytes()))?;
                    stdout = out.stdout_text();
                    stderr = out.stderr_text();
                    let matches = outputs_match(&stdout, &case.expected_stdout, self.options.compare);
                    let verdict = classify(&out, Some(matches));
                    if verdict != Verdict::Pass {
                        return Ok(ExecutionOutcome { verdict, stdout, stderr, duration: started.elapsed() });
                    }
                }
                Ok(ExecutionOutcome { verdict: Verdict::Pass, stdout, stderr, duration: started.elapsed() })
            }
        }
    }

    /// Judges every job on a pool of `parallelism` threads. Rows come back
    /// sorted by task id then sample index.
    pub fn judge_batch(&self, jobs: &[JudgeJob<'_>], parallelism: usize) -> Result<Vec<JudgeRow>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| SandboxError::Environment(format!("cannot start worker pool: {e}")))?;
        let mut rows: Vec<JudgeRow> = pool.install(|| {
            jobs.par_iter()
                .map(|job| JudgeRow {
                    task_id: job.task.id.clone(),
                    sample_index: job.sample_index,
                    outcome: self
                        .judge(job.task, job.sample_index, job.candidate.as_deref())
                        .map_err(|e| e.to_string()),
                })
                .collect()
        });
        rows.sort_by(|a, b| (&a.task_id, a.sample_index).cmp(&(&b.task_id, b.sample_index)));
        Ok(rows)
    }
}

pub struct JudgeJob<'a> {
    pub task: &'a Task,
    pub sample_index: u32,
    pub candidate: std::result::Result<String, ParseFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeRow {
    pub task_id: String,
    pub sample_index: u32,
    /// Environment errors are kept per row so one broken pair cannot sink
    /// the batch.
    pub outcome: std::result::Result<ExecutionOutcome, String>,
}

const MEMORY_MARKERS: &[&str] = &["MemoryError", "bad_alloc", "out of memory", "Cannot allocate memory"];

fn classify(out: &process::ProcessOutput, stdout_matches: Option<bool>) -> Verdict {
    if out.timed_out {
        return Verdict::Timeout;
    }
    let stderr = String::from_utf8_lossy(&out.stderr);
    if !out.success() {
        if MEMORY_MARKERS.iter().any(|m| stderr.contains(m)) || out.killed_by_sigkill() {
            return Verdict::MemoryExceeded;
        }
        if stdout_matches.is_none() && stderr.contains("Assertion") {
            return Verdict::WrongAnswer;
        }
        return Verdict::RuntimeError;
    }
    match stdout_matches {
        Some(false) => Verdict::WrongAnswer,
        _ => Verdict::Pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_drops_trailing_whitespace_only() {
        assert_eq!(normalize_output("3 \n\n\n"), "3");
        assert_eq!(normalize_output("a  \nb\t\n"), "a\nb");
        assert_ne!(normalize_output(" 3"), normalize_output("3"));
        assert!(outputs_match("3", "3\n", CompareMode::Normalized));
        assert!(!outputs_match("3", "3\n", CompareMode::Exact));
    }

    #[test]
    fn sanitized_names_stay_distinct() {
        assert_ne!(sanitize("a/b"), sanitize("a_b"));
        assert!(sanitize("HumanEval/0").starts_with("HumanEval_0-"));
    }

    #[test]
    fn runner_binaries_skip_placeholders() {
        let runners = default_runners();
        assert_eq!(runners["cpp"].binaries(), vec!["g++"]);
        assert_eq!(runners["python3"].binaries(), vec!["python3"]);
        for spec in runners.values() {
            spec.validate().unwrap();
        }
    }
}
