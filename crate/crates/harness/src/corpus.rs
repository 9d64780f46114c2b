//! Benchmark loaders. Every upstream format is normalized into
//! [`BenchmarkManifest`]; the canonical on-disk form is one JSON object per
//! line preceded by a header line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use m2wf_core::task::{
    BenchmarkManifest, StdioCase, SubsetLabel, Task, TestSuite, DEFAULT_LANGUAGE, META_LEVEL,
    META_PROBLEM, META_SUBSET,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::sandbox::RunnerTable;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: schema error: {message}", path.display())]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("no runner configured for language {language:?}; configured runners: {}", configured.join(", "))]
    UnknownLanguage { language: String, configured: Vec<String> },
    #[error(transparent)]
    Task(#[from] m2wf_core::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One raw upstream record with the line (or CSV row) it came from.
struct Record {
    line: usize,
    fields: Map<String, Value>,
}

struct Source<'a> {
    path: &'a Path,
}

impl Source<'_> {
    fn schema(&self, line: usize, message: impl Into<String>) -> CorpusError {
        CorpusError::Schema { path: self.path.to_path_buf(), line, message: message.into() }
    }

    fn text<'r>(&self, rec: &'r Record, field: &str) -> Result<&'r str> {
        match rec.fields.get(field) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(self.schema(rec.line, format!("field {field:?} is not a string"))),
            None => Err(self.schema(rec.line, format!("missing field {field:?}"))),
        }
    }

    fn opt_text<'r>(&self, rec: &'r Record, field: &str) -> Result<Option<&'r str>> {
        match rec.fields.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.text(rec, field).map(Some),
        }
    }

    /// A string or number field rendered as text.
    fn scalar(&self, rec: &Record, field: &str) -> Result<String> {
        match rec.fields.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            Some(_) => Err(self.schema(rec.line, format!("field {field:?} is not a scalar"))),
            None => Err(self.schema(rec.line, format!("missing field {field:?}"))),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let text = read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match value {
            Value::Object(fields) => records.push(Record { line: i + 1, fields }),
            _ => {
                return Err(CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(records)
}

fn read_csv(path: &Path) -> Result<Vec<Record>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed { path: path.to_path_buf(), line: 1, message: e.to_string() })?
        .clone();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let fields = headers
            .iter()
            .zip(row.iter())
            .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
            .collect();
        records.push(Record { line, fields });
    }
    Ok(records)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// HumanEval-style test programs define `check(candidate)` without calling it.
fn close_check_program(test: &str, entry_point: &str) -> String {
    let defines = test.contains("def check(");
    let calls = test.lines().any(|l| l.trim_start().starts_with("check("));
    let mut program = test.to_string();
    if defines && !calls {
        if !program.ends_with('\n') {
            program.push('\n');
        }
        program.push_str(&format!("\ncheck({entry_point})\n"));
    }
    program
}

/// HumanEval and HumanEval+ JSON lines: `task_id`, `prompt`, `entry_point`,
/// `test`, optional `canonical_solution`.
pub fn load_humaneval(path: &Path) -> Result<BenchmarkManifest> {
    let src = Source { path };
    let mut tasks = Vec::new();
    for rec in read_jsonl(path)? {
        let entry_point = src.text(&rec, "entry_point")?.to_string();
        let prompt = src.text(&rec, "prompt")?.to_string();
        let test = close_check_program(src.text(&rec, "test")?, &entry_point);
        // Upstream solutions are function bodies that continue the prompt.
        let reference_solution = src
            .opt_text(&rec, "canonical_solution")?
            .map(|body| format!("{prompt}{body}"));
        tasks.push(Task {
            id: src.text(&rec, "task_id")?.to_string(),
            prompt,
            entry_point: Some(entry_point),
            test_suite: TestSuite::CheckProgram(test),
            language: DEFAULT_LANGUAGE.into(),
            reference_solution,
            metadata: BTreeMap::new(),
        });
    }
    Ok(BenchmarkManifest::new(file_stem(path), tasks, BTreeMap::new())?)
}

/// Field names of a StudentEval export. The tests field is configurable
/// because exports differ on which column carries the assertions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentEvalColumns {
    /// Record id; when absent ids are `<problem>/<row>`.
    pub id: Option<String>,
    pub problem: String,
    pub prompt: String,
    pub tests: String,
    pub entry_point: String,
    /// Column holding the subset label. When the column is missing the label
    /// is derived from boolean `is_first_success`-style flag columns.
    pub label: String,
}

impl Default for StudentEvalColumns {
    fn default() -> Self {
        Self {
            id: None,
            problem: "problem".into(),
            prompt: "prompt".into(),
            tests: "assertions".into(),
            entry_point: "entrypoint".into(),
            label: "subset".into(),
        }
    }
}

fn truthy(value: &Value) -> bool {
    match value {
        Value::Bool(b) => *b,
        Value::Number(n) => n.as_f64().is_some_and(|f| f != 0.0),
        Value::String(s) => matches!(s.trim().to_ascii_lowercase().as_str(), "true" | "1" | "yes"),
        _ => false,
    }
}

fn subset_from_flags(src: &Source, rec: &Record) -> Result<SubsetLabel> {
    let flags = [
        ("is_first_failure", SubsetLabel::FirstFailure),
        ("is_first_success", SubsetLabel::FirstSuccess),
        ("is_last_failure", SubsetLabel::LastFailure),
        ("is_last_success", SubsetLabel::LastSuccess),
    ];
    let set: Vec<SubsetLabel> = flags
        .iter()
        .filter(|(name, _)| rec.fields.get(*name).is_some_and(truthy))
        .map(|(_, label)| *label)
        .collect();
    match set.as_slice() {
        [one] => Ok(*one),
        [] => Err(src.schema(rec.line, "record carries no subset label or flag")),
        _ => Err(src.schema(rec.line, "record carries several subset flags")),
    }
}

/// StudentEval from CSV (by `.csv` extension) or JSON lines.
pub fn load_studenteval(path: &Path, columns: &StudentEvalColumns) -> Result<BenchmarkManifest> {
    let src = Source { path };
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let records = if is_csv { read_csv(path)? } else { read_jsonl(path)? };
    let mut tasks = Vec::with_capacity(records.len());
    for (row, rec) in records.iter().enumerate() {
        let problem = src.scalar(rec, &columns.problem)?;
        let subset = match rec.fields.get(&columns.label) {
            Some(_) => src
                .scalar(rec, &columns.label)?
                .parse::<SubsetLabel>()
                .map_err(|e| src.schema(rec.line, e.to_string()))?,
            None => subset_from_flags(&src, rec)?,
        };
        let id = match &columns.id {
            Some(field) => src.scalar(rec, field)?,
            None => format!("{problem}/{row}"),
        };
        let metadata = BTreeMap::from([
            (META_SUBSET.to_string(), subset.as_str().to_string()),
            (META_PROBLEM.to_string(), problem),
        ]);
        tasks.push(Task {
            id,
            prompt: src.text(rec, &columns.prompt)?.to_string(),
            entry_point: Some(src.text(rec, &columns.entry_point)?.to_string()),
            test_suite: TestSuite::CheckProgram(src.text(rec, &columns.tests)?.to_string()),
            language: DEFAULT_LANGUAGE.into(),
            reference_solution: None,
            metadata,
        });
    }
    Ok(BenchmarkManifest::new(file_stem(path), tasks, BTreeMap::new())?)
}

#[derive(Deserialize)]
struct RawCase {
    input: String,
    output: String,
}

/// Codeforces-style JSON lines: `id`, `prompt`, `level`, `tests` as
/// `[{input, output}]` and an optional `solution`. Only records whose `level`
/// equals `level` are kept.
pub fn load_codeforces(path: &Path, level: &str) -> Result<BenchmarkManifest> {
    let src = Source { path };
    let mut tasks = Vec::new();
    for rec in read_jsonl(path)? {
        let record_level = src.scalar(&rec, "level")?;
        if record_level != level {
            continue;
        }
        let cases: Vec<RawCase> = match rec.fields.get("tests") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| src.schema(rec.line, format!("field \"tests\": {e}")))?,
            None => return Err(src.schema(rec.line, "missing field \"tests\"")),
        };
        tasks.push(Task {
            id: src.scalar(&rec, "id")?,
            prompt: src.text(&rec, "prompt")?.to_string(),
            entry_point: None,
            test_suite: TestSuite::Cases(
                cases
                    .into_iter()
                    .map(|c| StdioCase { stdin: c.input, expected_stdout: c.output })
                    .collect(),
            ),
            language: DEFAULT_LANGUAGE.into(),
            reference_solution: src.opt_text(&rec, "solution")?.map(str::to_string),
            metadata: BTreeMap::from([(META_LEVEL.to_string(), record_level)]),
        });
    }
    let metadata = BTreeMap::from([(META_LEVEL.to_string(), level.to_string())]);
    Ok(BenchmarkManifest::new(format!("{}-{level}", file_stem(path)), tasks, metadata)?)
}

/// `HumanEval_12_longest` names the function `longest`.
fn entry_point_from_name(name: &str) -> Option<&str> {
    let rest = name.strip_prefix("HumanEval_")?;
    let (number, function) = rest.split_once('_')?;
    (number.chars().all(|c| c.is_ascii_digit()) && !function.is_empty()).then_some(function)
}

/// Upstream test programs for brace languages open with the `}` that closes
/// the prompt's unfinished function. Candidates here are complete programs,
/// so that line is dropped.
fn strip_closing_brace(tests: &str) -> &str {
    let trimmed = tests.trim_start();
    match trimmed.strip_prefix('}') {
        Some(rest) if rest.starts_with('\n') || rest.starts_with("\r\n") => rest.trim_start_matches(['\r', '\n']),
        _ => tests,
    }
}

/// MultiPL-E translations: `name`, `prompt`, `tests`, optional `entry_point`.
pub fn load_multipl_e(path: &Path, target_language: &str, runners: &RunnerTable) -> Result<BenchmarkManifest> {
    if !runners.contains_key(target_language) {
        return Err(CorpusError::UnknownLanguage {
            language: target_language.to_string(),
            configured: runners.keys().cloned().collect(),
        });
    }
    let src = Source { path };
    let mut tasks = Vec::new();
    for rec in read_jsonl(path)? {
        let name = src.text(&rec, "name")?;
        let entry_point = match src.opt_text(&rec, "entry_point")? {
            Some(e) => e.to_string(),
            None => entry_point_from_name(name)
                .ok_or_else(|| src.schema(rec.line, format!("cannot derive an entry point from {name:?}")))?
                .to_string(),
        };
        tasks.push(Task {
            id: name.to_string(),
            prompt: src.text(&rec, "prompt")?.to_string(),
            entry_point: Some(entry_point),
            test_suite: TestSuite::CheckProgram(strip_closing_brace(src.text(&rec, "tests")?).to_string()),
            language: target_language.to_string(),
            reference_solution: None,
            metadata: BTreeMap::new(),
        });
    }
    let metadata = BTreeMap::from([("language".to_string(), target_language.to_string())]);
    Ok(BenchmarkManifest::new(file_stem(path), tasks, metadata)?)
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    name: String,
    metadata: BTreeMap<String, String>,
}

/// Serializes a manifest to canonical JSON lines.
pub fn to_canonical_jsonl(manifest: &BenchmarkManifest) -> String {
    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        name: manifest.name().to_string(),
        metadata: manifest.metadata().clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for task in manifest.tasks() {
        out.push_str(&serde_json::to_string(task).expect("task serializes"));
        out.push('\n');
    }
    out
}

pub fn write_canonical(manifest: &BenchmarkManifest, path: &Path) -> Result<()> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut file = BufWriter::new(fs::File::create(path).map_err(io)?);
    file.write_all(to_canonical_jsonl(manifest).as_bytes()).map_err(io)?;
    file.flush().map_err(io)
}

pub fn parse_canonical(text: &str, path: &Path) -> Result<BenchmarkManifest> {
    let malformed = |line: usize, e: serde_json::Error| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((i, first)) = lines.next() else {
        return Err(m2wf_core::Error::EmptyManifest.into());
    };
    let header: ManifestHeader = serde_json::from_str(first).map_err(|e| malformed(i + 1, e))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(CorpusError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("unsupported manifest schema version {}", header.schema_version),
        });
    }
    let tasks = lines
        .map(|(i, l)| serde_json::from_str::<Task>(l).map_err(|e| malformed(i + 1, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkManifest::new(header.name, tasks, header.metadata)?)
}

pub fn read_canonical(path: &Path) -> Result<BenchmarkManifest> {
    parse_canonical(&read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_call_is_appended_once() {
        let test = "def check(candidate):\n    assert candidate(1) == 1\n";
        let closed = close_check_program(test, "f");
        assert!(closed.ends_with("check(f)\n"));
        assert_eq!(close_check_program(&closed, "f"), closed);
        assert_eq!(close_check_program("assert f(1) == 1\n", "f"), "assert f(1) == 1\n");
    }

    #[test]
    fn entry_points_from_names() {
        assert_eq!(entry_point_from_name("HumanEval_0_has_close_elements"), Some("has_close_elements"));
        assert_eq!(entry_point_from_name("HumanEval_x_y"), None);
        assert_eq!(entry_point_from_name("other"), None);
    }

    #[test]
    fn closing_brace_is_dropped() {
        assert_eq!(strip_closing_brace("}\nint main() {}\n"), "int main() {}\n");
        assert_eq!(strip_closing_brace("\ndef check(): pass\n"), "\ndef check(): pass\n");
        assert_eq!(strip_closing_brace("};\n"), "};\n");
    }
}
