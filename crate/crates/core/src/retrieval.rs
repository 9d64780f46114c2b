//! Lexical few-shot retrieval over a pool of solved problems.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::task::{Task, META_LEVEL};
use crate::{Error, Result};

/// Words dropped before indexing.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "in", "is", "it",
    "its", "of", "on", "or", "that", "the", "this", "to", "was", "were", "will", "with",
];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .filter(|w| !STOP_WORDS.contains(&w.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedShot {
    pub problem: String,
    pub solution: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub problem: String,
    pub solution: String,
    pub level: Option<String>,
}

/// Scores a tokenized query against every document of a pool.
pub trait Ranker {
    fn scores(&self, pool: &ExamplePool, query: &[String]) -> Vec<f64>;
}

/// Okapi BM25 with the non-negative `ln(1 + (N - df + 0.5) / (df + 0.5))` idf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25 {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25 {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Ranker for Bm25 {
    fn scores(&self, pool: &ExamplePool, query: &[String]) -> Vec<f64> {
        let n = pool.entries.len() as f64;
        let avg_len = pool.avg_len.max(f64::MIN_POSITIVE);
        pool.doc_terms
            .iter()
            .zip(&pool.doc_lens)
            .map(|(terms, &len)| {
                query
                    .iter()
                    .map(|q| {
                        let Some(&tf) = terms.get(q) else { return 0.0 };
                        let df = pool.doc_freq.get(q).copied().unwrap_or(0) as f64;
                        let idf = libm::log(1.0 + (n - df + 0.5) / (df + 0.5));
                        let tf = tf as f64;
                        let norm = self.k1 * (1.0 - self.b + self.b * len as f64 / avg_len);
                        idf * tf * (self.k1 + 1.0) / (tf + norm)
                    })
                    .sum()
            })
            .collect()
    }
}

/// Immutable lexical index over problem statements.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamplePool {
    entries: Vec<PoolEntry>,
    doc_terms: Vec<BTreeMap<String, u32>>,
    doc_lens: Vec<usize>,
    doc_freq: BTreeMap<String, u32>,
    avg_len: f64,
}

impl ExamplePool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("example pool is empty"));
        }
        let mut doc_terms = Vec::with_capacity(entries.len());
        let mut doc_lens = Vec::with_capacity(entries.len());
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        for entry in &entries {
            let tokens = tokenize(&entry.problem);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *counts.entry(t.clone()).or_default() += 1;
            }
            for term in counts.keys() {
                *doc_freq.entry(term.clone()).or_default() += 1;
            }
            doc_lens.push(tokens.len());
            doc_terms.push(counts);
        }
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / entries.len() as f64;
        Ok(Self { entries, doc_terms, doc_lens, doc_freq, avg_len })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Indexes every task that carries a reference solution. Tasks without one
/// are skipped and their ids returned alongside the pool.
pub fn index_pool<'a>(tasks: impl IntoIterator<Item = &'a Task>) -> Result<(ExamplePool, Vec<String>)> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for task in tasks {
        match task.reference_solution.as_deref().filter(|s| !s.trim().is_empty()) {
            Some(solution) => entries.push(PoolEntry {
                id: task.id.clone(),
                problem: task.prompt.clone(),
                solution: solution.into(),
                level: task.metadata.get(META_LEVEL).cloned(),
            }),
            None => skipped.push(task.id.clone()),
        }
    }
    Ok((ExamplePool::new(entries)?, skipped))
}

/// Top `shots` entries by score; ties keep pool insertion order.
pub fn retrieve(pool: &ExamplePool, query: &str, shots: usize) -> Result<Vec<RetrievedShot>> {
    retrieve_with(&Bm25::default(), pool, query, shots)
}

pub fn retrieve_with(
    ranker: &impl Ranker,
    pool: &ExamplePool,
    query: &str,
    shots: usize,
) -> Result<Vec<RetrievedShot>> {
    if shots == 0 || shots > pool.len() {
        return Err(Error::Parameter(format!(
            "shots must be in 1..={} (got {shots})",
            pool.len()
        )));
    }
    let scores = ranker.scores(pool, &tokenize(query));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(shots)
        .map(|i| RetrievedShot {
            problem: pool.entries[i].problem.clone(),
            solution: pool.entries[i].solution.clone(),
            score: scores[i],
        })
        .collect())
}
