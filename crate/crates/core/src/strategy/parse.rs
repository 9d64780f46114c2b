//! Parsing of model completions into staged traces.
//!
//! The workflow prompt asks for `### RECALL i`, `### EVALUATION`, `### PLAN`
//! and `### SOLUTION` sections. Every section is optional on the way back in:
//! a missing section produces a warning and the final code falls back to the
//! last fenced block of the whole response.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{select_top_m, M2WFParams, Stage, StageArtifacts, StrategyKind};
use crate::refusal::is_refusal;

pub const RECALL_MARKER: &str = "### RECALL";
pub const EVALUATION_MARKER: &str = "### EVALUATION";
pub const PLAN_MARKER: &str = "### PLAN";
pub const SOLUTION_MARKER: &str = "### SOLUTION";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecalledExample {
    pub problem: String,
    pub steps: String,
    pub code: String,
    /// Self-assessed confidence in `0..=100`.
    pub confidence: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedTrace {
    pub recalled: Vec<RecalledExample>,
    /// Zero-based indices into `recalled`, as chosen by the model.
    pub selected_indices: Vec<usize>,
    /// Raw text of the evaluation section.
    pub evaluation: String,
    pub plan: String,
    pub final_code: String,
    pub parse_warnings: Vec<String>,
}

/// A completion from which no candidate program could be recovered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: String,
    pub refusal: bool,
    pub warnings: Vec<String>,
}

impl core::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.reason)?;
        if self.refusal {
            f.write_str(" (refusal)")?;
        }
        Ok(())
    }
}

impl ParseFailure {
    fn new(raw: &str, reason: impl Into<String>, warnings: Vec<String>) -> Self {
        Self { reason: reason.into(), refusal: is_refusal(raw), warnings }
    }
}

/// Splits `raw` into a staged trace. Never panics; any input yields either a
/// trace with non-empty `final_code` or a [`ParseFailure`].
pub fn parse_trace(
    strategy: StrategyKind,
    raw: &str,
    params: &M2WFParams,
    language_tag: &str,
) -> Result<StagedTrace, ParseFailure> {
    if strategy != StrategyKind::M2WF {
        let code = extract_code(raw, language_tag)?;
        return Ok(StagedTrace { final_code: code.to_string(), ..StagedTrace::default() });
    }

    let sections = split_sections(raw);
    let mut warnings = Vec::new();
    let mut trace = StagedTrace::default();

    let recall_bodies: Vec<&str> = sections
        .iter()
        .filter(|s| s.kind == SectionKind::Recall)
        .map(|s| s.body)
        .collect();
    if recall_bodies.is_empty() {
        warnings.push("missing RECALL sections".to_string());
    }
    trace.recalled = recall_bodies.iter().map(|b| parse_recalled(b)).collect();
    if trace.recalled.len() > params.k as usize {
        warnings.push(format!(
            "recalled {} examples but K={}",
            trace.recalled.len(),
            params.k
        ));
    }

    match find_section(&sections, SectionKind::Evaluation) {
        Some(body) => {
            trace.evaluation = body.trim().to_string();
            apply_evaluation(body, &mut trace, params, &mut warnings);
        }
        None => warnings.push("missing EVALUATION section".to_string()),
    }

    match find_section(&sections, SectionKind::Plan) {
        Some(body) => trace.plan = body.trim().to_string(),
        None => warnings.push("missing PLAN section".to_string()),
    }

    let from_solution = match find_section(&sections, SectionKind::Solution) {
        Some(body) => match extract_code(body, language_tag) {
            Ok(code) => Some(code),
            Err(_) => {
                warnings.push("SOLUTION section holds no code".to_string());
                None
            }
        },
        None => {
            warnings.push("missing SOLUTION section".to_string());
            None
        }
    };
    let code = match from_solution {
        Some(code) => code,
        None => match extract_code(raw, language_tag) {
            Ok(code) => code,
            Err(failure) => return Err(ParseFailure { warnings, ..failure }),
        },
    };
    trace.final_code = code.to_string();
    trace.parse_warnings = warnings;
    Ok(trace)
}

/// Reads the artifacts of a first pipeline step that ran `Recall..=through`.
/// Every stage in that range must be present.
pub fn parse_stage_artifacts(raw: &str, through: Stage) -> Result<StageArtifacts, ParseFailure> {
    let sections = split_sections(raw);
    let recalled: Vec<RecalledExample> = sections
        .iter()
        .filter(|s| s.kind == SectionKind::Recall)
        .map(|s| parse_recalled(s.body))
        .collect();
    if recalled.is_empty() {
        return Err(ParseFailure::new(raw, "first step recalled no examples", Vec::new()));
    }
    let mut artifacts = StageArtifacts { recalled, evaluation: None, plan: None };
    if through >= Stage::Evaluation {
        match find_section(&sections, SectionKind::Evaluation) {
            Some(body) => artifacts.evaluation = Some(body.trim().to_string()),
            None => return Err(ParseFailure::new(raw, "first step has no EVALUATION section", Vec::new())),
        }
    }
    if through >= Stage::Planning {
        match find_section(&sections, SectionKind::Plan) {
            Some(body) => artifacts.plan = Some(body.trim().to_string()),
            None => return Err(ParseFailure::new(raw, "first step has no PLAN section", Vec::new())),
        }
    }
    Ok(artifacts)
}

fn apply_evaluation(
    body: &str,
    trace: &mut StagedTrace,
    params: &M2WFParams,
    warnings: &mut Vec<String>,
) {
    let count = trace.recalled.len();
    let mut selection: Option<Vec<usize>> = None;
    for line in outside_fences(body) {
        let line = strip_decoration(line);
        if starts_with_ignore_case(line, "select") {
            let mut picked = Vec::new();
            for n in integers(line) {
                if n >= 1 && (n as usize) <= count {
                    let idx = n as usize - 1;
                    if !picked.contains(&idx) {
                        picked.push(idx);
                    }
                } else {
                    warnings.push(format!("selected example {n} does not exist"));
                }
            }
            selection.get_or_insert_with(Vec::new).extend(picked);
            continue;
        }
        if let Some((index, rest)) = leading_example_index(line) {
            if index >= 1 && index <= count {
                let slot = &mut trace.recalled[index - 1].confidence;
                if slot.is_none() {
                    *slot = parse_confidence(rest);
                }
            }
        }
    }

    let confidences: Option<Vec<u32>> = trace
        .recalled
        .iter()
        .map(|ex| ex.confidence.map(u32::from))
        .collect();
    let expected_m = (params.m as usize).min(count);
    let derived = match &confidences {
        Some(c) if expected_m > 0 => select_top_m(c, expected_m).ok(),
        _ => None,
    };
    if count > 0 && confidences.is_none() {
        warnings.push("confidence missing for some recalled examples".to_string());
    }

    match selection {
        Some(mut chosen) => {
            chosen.dedup();
            if let Some(derived) = &derived {
                let mut a = chosen.clone();
                let mut b = derived.clone();
                a.sort_unstable();
                b.sort_unstable();
                if a != b {
                    warnings.push(format!(
                        "model selected {:?} but confidences rank {:?} highest",
                        chosen, derived
                    ));
                }
            }
            trace.selected_indices = chosen;
        }
        None => {
            warnings.push("no selection line in EVALUATION".to_string());
            if let Some(derived) = derived {
                trace.selected_indices = derived;
            }
        }
    }
}

/// First integer in `0..=100` found in `segment`.
pub(crate) fn parse_confidence(segment: &str) -> Option<u8> {
    integers(segment).find(|n| *n <= 100).map(|n| n as u8)
}

/// Returns the content of the last fenced block tagged for `language_tag`
/// (or untagged). Without such a block, falls back to the longest trailing
/// run of code-looking lines. The result is always a substring of `raw`.
pub fn extract_code<'a>(raw: &'a str, language_tag: &str) -> Result<&'a str, ParseFailure> {
    let wanted = canonical_language(language_tag);
    let block = fenced_blocks(raw)
        .into_iter()
        .rev()
        .find(|b| !b.content.trim().is_empty() && (b.tag.is_empty() || canonical_language(b.tag) == wanted));
    if let Some(block) = block {
        return Ok(block.content);
    }
    match code_suffix(raw) {
        Some(code) => Ok(code),
        None => Err(ParseFailure::new(raw, "no code found in completion", Vec::new())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SectionKind {
    Recall,
    Evaluation,
    Plan,
    Solution,
}

struct Section<'a> {
    kind: SectionKind,
    body: &'a str,
}

fn find_section<'a>(sections: &[Section<'a>], kind: SectionKind) -> Option<&'a str> {
    sections.iter().find(|s| s.kind == kind).map(|s| s.body)
}

/// Lines of `text` with their byte offsets, keeping the line terminator out.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |chunk| {
        let start = offset;
        offset += chunk.len();
        let line = chunk.strip_suffix('\n').unwrap_or(chunk);
        let line = line.strip_suffix('\r').unwrap_or(line);
        (start, line)
    })
}

fn fence_open(line: &str) -> Option<(usize, &str)> {
    let trimmed = line.trim_start();
    let ticks = trimmed.bytes().take_while(|b| *b == b'`').count();
    (ticks >= 3).then(|| {
        let tag = trimmed[ticks..].split_whitespace().next().unwrap_or("");
        (ticks, tag)
    })
}

fn is_fence_close(line: &str, ticks: usize) -> bool {
    let trimmed = line.trim();
    trimmed.len() >= ticks && trimmed.bytes().all(|b| b == b'`')
}

fn outside_fences(text: &str) -> impl Iterator<Item = &str> {
    let mut open: Option<usize> = None;
    lines_with_offsets(text).filter_map(move |(_, line)| match open {
        Some(ticks) => {
            if is_fence_close(line, ticks) {
                open = None;
            }
            None
        }
        None => match fence_open(line) {
            Some((ticks, _)) => {
                open = Some(ticks);
                None
            }
            None => Some(line),
        },
    })
}

fn split_sections(raw: &str) -> Vec<Section<'_>> {
    let mut headers: Vec<(SectionKind, usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (start, line) in lines_with_offsets(raw) {
        if let Some(ticks) = open {
            if is_fence_close(line, ticks) {
                open = None;
            }
            continue;
        }
        if let Some((ticks, _)) = fence_open(line) {
            open = Some(ticks);
            continue;
        }
        if let Some(kind) = header_kind(line) {
            let body_start = (start + line.len()).min(raw.len());
            let body_start = raw[body_start..]
                .find('\n')
                .map_or(raw.len(), |i| body_start + i + 1);
            headers.push((kind, start, body_start));
        }
    }
    headers
        .iter()
        .enumerate()
        .map(|(i, (kind, _, body_start))| {
            let end = headers.get(i + 1).map_or(raw.len(), |next| next.1);
            Section { kind: *kind, body: &raw[*body_start..end] }
        })
        .collect()
}

fn header_kind(line: &str) -> Option<SectionKind> {
    let trimmed = line.trim_start();
    if !trimmed.starts_with('#') {
        return None;
    }
    let rest = trimmed.trim_start_matches(|c: char| c == '#' || c == '*' || c.is_whitespace());
    let word: String = rest
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase())
        .collect();
    match word.as_str() {
        // Recall headers must be numbered so that an echoed "# Recall related
        // examples" heading does not open an empty example.
        "RECALL" | "RECALLED" => {
            let after = rest[word.len()..].trim_start_matches(|c: char| !c.is_ascii_alphanumeric());
            let after = ["example", "problem"]
                .iter()
                .find(|w| starts_with_ignore_case(after, w))
                .map_or(after, |w| after[w.len()..].trim_start_matches(|c: char| !c.is_ascii_alphanumeric()));
            after.starts_with(|c: char| c.is_ascii_digit()).then_some(SectionKind::Recall)
        }
        "EVALUATION" | "EVALUATIONS" => Some(SectionKind::Evaluation),
        "PLAN" | "PLANNING" => Some(SectionKind::Plan),
        "SOLUTION" => Some(SectionKind::Solution),
        _ => None,
    }
}

fn parse_recalled(body: &str) -> RecalledExample {
    let code = fenced_blocks(body)
        .last()
        .map(|b| b.content.trim_end().to_string())
        .unwrap_or_default();

    let mut problem = String::new();
    let mut steps = String::new();
    let mut confidence = None;
    let mut target: Option<u8> = None; // 0 = problem, 1 = steps
    let mut unlabeled: Vec<&str> = Vec::new();
    for line in outside_fences(body) {
        let plain = strip_decoration(line);
        if let Some(rest) = strip_label(plain, &["problem"]) {
            target = Some(0);
            push_line(&mut problem, rest);
        } else if let Some(rest) =
            strip_label(plain, &["steps", "implementation steps", "explanation", "solution"])
        {
            target = Some(1);
            push_line(&mut steps, rest);
        } else if let Some(rest) = strip_label(plain, &["confidence"]) {
            confidence = confidence.or_else(|| parse_confidence(rest));
        } else {
            match target {
                Some(0) => push_line(&mut problem, line),
                Some(_) => push_line(&mut steps, line),
                None => unlabeled.push(line),
            }
        }
    }
    if problem.trim().is_empty() && steps.trim().is_empty() {
        let text = unlabeled.join("\n");
        let text = text.trim();
        match text.split_once("\n\n") {
            Some((first, rest)) => {
                problem = first.trim().to_string();
                steps = rest.trim().to_string();
            }
            None => problem = text.to_string(),
        }
    }
    RecalledExample {
        problem: problem.trim().to_string(),
        steps: steps.trim().to_string(),
        code,
        confidence,
    }
}

fn push_line(buf: &mut String, line: &str) {
    if !buf.is_empty() {
        buf.push('\n');
    }
    buf.push_str(line);
}

/// Strips bullets, emphasis and heading marks from the start of a line.
fn strip_decoration(line: &str) -> &str {
    line.trim()
        .trim_start_matches(|c: char| matches!(c, '-' | '*' | '#' | '>' | '\u{2022}') || c.is_whitespace())
}

/// `Label: rest` (case-insensitive, optional `**` around the label).
fn strip_label<'a>(line: &'a str, labels: &[&str]) -> Option<&'a str> {
    for label in labels {
        if starts_with_ignore_case(line, label) {
            let rest = line[label.len()..].trim_start_matches('*');
            if let Some(rest) = rest.strip_prefix(':') {
                return Some(rest.trim_start_matches('*').trim());
            }
        }
    }
    None
}

fn starts_with_ignore_case(text: &str, prefix: &str) -> bool {
    text.len() >= prefix.len()
        && text.is_char_boundary(prefix.len())
        && text[..prefix.len()].eq_ignore_ascii_case(prefix)
}

/// `Example 2: ...`, `Recall 2 - ...`, `2. ...` → `(2, rest)`.
fn leading_example_index(line: &str) -> Option<(usize, &str)> {
    let mut rest = line;
    for word in ["example", "recall", "problem"] {
        if starts_with_ignore_case(rest, word) {
            rest = rest[word.len()..].trim_start();
            break;
        }
    }
    rest = rest.trim_start_matches(|c: char| c == '#' || c.is_whitespace());
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 3 {
        return None;
    }
    let index = rest[..digits].parse().ok()?;
    Some((index, &rest[digits..]))
}

/// Maximal ASCII digit runs parsed as integers; runs too long for u32 are skipped.
fn integers(text: &str) -> impl Iterator<Item = u32> + '_ {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
}

struct FencedBlock<'a> {
    tag: &'a str,
    content: &'a str,
}

fn fenced_blocks(raw: &str) -> Vec<FencedBlock<'_>> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, &str, usize)> = None;
    for (start, line) in lines_with_offsets(raw) {
        match open {
            Some((ticks, tag, content_start)) => {
                if is_fence_close(line, ticks) {
                    let end = start.max(content_start);
                    let content = &raw[content_start..end];
                    let content = content.strip_suffix('\n').unwrap_or(content);
                    let content = content.strip_suffix('\r').unwrap_or(content);
                    blocks.push(FencedBlock { tag, content });
                    open = None;
                }
            }
            None => {
                if let Some((ticks, tag)) = fence_open(line) {
                    let after = start + line.len();
                    let content_start = raw[after..].find('\n').map_or(raw.len(), |i| after + i + 1);
                    open = Some((ticks, tag, content_start));
                }
            }
        }
    }
    // A truncated completion may leave the last block open.
    if let Some((_, tag, content_start)) = open {
        blocks.push(FencedBlock { tag, content: &raw[content_start..] });
    }
    blocks
}

fn canonical_language(tag: &str) -> String {
    let tag = tag.trim_start_matches(['{', '.']).to_ascii_lowercase();
    let canonical = match tag.as_str() {
        "python" | "python3" | "py" | "py3" => "python",
        "cpp" | "c++" | "cxx" | "cc" | "hpp" => "cpp",
        "js" | "javascript" | "node" | "jsx" | "mjs" => "js",
        "ts" | "typescript" | "tsx" => "ts",
        "rs" | "rust" => "rust",
        "sh" | "bash" | "shell" | "zsh" => "sh",
        "go" | "golang" => "go",
        "cs" | "csharp" | "c#" => "cs",
        other => return other.to_string(),
    };
    canonical.to_string()
}

const CODE_PREFIXES: &[&str] = &[
    "def ", "class ", "import ", "from ", "return", "if ", "elif ", "else", "for ", "while ",
    "try:", "except", "finally:", "with ", "print(", "#", "//", "/*", "@", "}", "{", ")", "]",
    "using ", "int ", "fn ", "let ", "const ", "var ", "public ", "private ", "function ",
    "package ", "func ", "assert", "pass", "raise ", "yield", "lambda", "async ", "await ",
    "std::", "long ", "void ", "bool ", "auto ", "struct ", "impl ", "use ", "n = ", "#include",
];

fn looks_like_code(line: &str) -> bool {
    if line.starts_with(' ') || line.starts_with('\t') {
        return true;
    }
    let t = line.trim();
    if fence_open(t).is_some() {
        return false;
    }
    if CODE_PREFIXES.iter().any(|p| t.starts_with(p)) {
        return true;
    }
    let words = t.split_whitespace().count();
    if t.ends_with(['.', '!', '?']) && words >= 3 && !t.contains(';') {
        return false;
    }
    t.contains(['=', '(', ')', ';', '{', '}', '[', ']'])
}

fn code_suffix(raw: &str) -> Option<&str> {
    let lines: Vec<(usize, &str)> = lines_with_offsets(raw).collect();
    let mut first_code: Option<usize> = None;
    for (start, line) in lines.iter().rev() {
        if line.trim().is_empty() {
            continue;
        }
        if looks_like_code(line) {
            first_code = Some(*start);
        } else {
            break;
        }
    }
    let start = first_code?;
    let code = &raw[start..];
    (!code.trim().is_empty()).then_some(code)
}
