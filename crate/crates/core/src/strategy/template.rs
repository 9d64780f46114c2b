//! Versioned instruction templates and placeholder rendering.
//!
//! Placeholders are `{NAME}` with an upper-case ASCII name. Rendering is a
//! single left-to-right pass, so substituted text (task prompts, recalled
//! code) is never scanned for placeholders itself.

use alloc::string::String;

/// Participates in every prompt fingerprint; bump when any asset changes.
pub const TEMPLATE_VERSION: &str = "m2wf-prompts/1";

pub const HEADER: &str = include_str!("../../templates/header.txt");
pub const RECALL: &str = include_str!("../../templates/recall.txt");
pub const EVALUATION: &str = include_str!("../../templates/evaluation.txt");
pub const PLANNING: &str = include_str!("../../templates/planning.txt");
pub const GUIDANCE: &str = include_str!("../../templates/guidance.txt");
pub const FORMAT_INTRO: &str = include_str!("../../templates/format_intro.txt");
pub const FORMAT_RECALL: &str = include_str!("../../templates/format_recall.txt");
pub const FORMAT_EVALUATION: &str = include_str!("../../templates/format_evaluation.txt");
pub const FORMAT_PLAN: &str = include_str!("../../templates/format_plan.txt");
pub const FORMAT_SOLUTION: &str = include_str!("../../templates/format_solution.txt");
pub const CONTINUATION: &str = include_str!("../../templates/continuation.txt");
pub const ANALOGICAL: &str = include_str!("../../templates/analogical.txt");
pub const FEWSHOT_EXAMPLE: &str = include_str!("../../templates/fewshot_example.txt");
pub const FEWSHOT_TASK: &str = include_str!("../../templates/fewshot_task.txt");

pub const COT_SUFFIX: &str = "\nLet's think step by step.";

/// Substitutes `{NAME}` placeholders from `vars`. Unknown names are left as-is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .bytes()
            .take_while(|b| b.is_ascii_uppercase() || *b == b'_')
            .count();
        if name_len > 0 && after.as_bytes().get(name_len) == Some(&b'}') {
            let name = &after[..name_len];
            if let Some((_, value)) = vars.iter().find(|(k, _)| *k == name) {
                out.push_str(value);
                rest = &after[name_len + 1..];
                continue;
            }
        }
        out.push('{');
        rest = after;
    }
    out.push_str(rest);
    out
}

/// Names of `{NAME}` placeholders still present in `text`.
pub fn unresolved_placeholders(text: &str) -> impl Iterator<Item = &str> {
    text.match_indices('{').filter_map(move |(i, _)| {
        let after = &text[i + 1..];
        let len = after
            .bytes()
            .take_while(|b| b.is_ascii_uppercase() || *b == b'_')
            .count();
        (len > 0 && after.as_bytes().get(len) == Some(&b'}')).then(|| &after[..len])
    })
}
