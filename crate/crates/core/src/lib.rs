//! Pure building blocks for metamemory-workflow (recall, evaluate, plan,
//! guide) code generation experiments.
//!
//! Everything in this crate is `no_std` + `alloc`: prompt construction,
//! response parsing, the pass@k family of estimators, character-noise
//! injection, lexical few-shot retrieval and token-usage aggregation.
//! IO, process execution and network transport live in `m2wf-harness`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod ablation;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod refusal;
pub mod retrieval;
pub mod strategy;
pub mod task;
pub mod usage;

pub use error::{Error, Result};
