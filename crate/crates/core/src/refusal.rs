//! Detection of completions that decline the task.

use alloc::string::String;

pub const DEFAULT_REFUSAL_PHRASES: &[&str] = &[
    "i cannot",
    "i can't",
    "i can not",
    "i'm sorry",
    "i am sorry",
    "i apologize",
    "i'm unable",
    "i am unable",
    "i won't",
    "i will not",
    "cannot assist",
    "can't assist",
    "cannot help",
    "can't help",
    "not able to help",
    "as an ai",
];

/// True iff `text` is blank, or contains no fenced code block and matches one
/// of `phrases` (case-insensitive, typographic apostrophes folded).
pub fn detect_refusal<S: AsRef<str>>(text: &str, phrases: &[S]) -> bool {
    if text.trim().is_empty() {
        return true;
    }
    if text.contains("```") {
        return false;
    }
    let folded: String = text
        .chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' => '\'',
            c => c.to_ascii_lowercase(),
        })
        .collect();
    phrases
        .iter()
        .any(|p| !p.as_ref().is_empty() && folded.contains(&*p.as_ref().to_ascii_lowercase()))
}

pub fn is_refusal(text: &str) -> bool {
    detect_refusal(text, DEFAULT_REFUSAL_PHRASES)
}
