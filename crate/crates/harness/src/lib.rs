//! Standard-library half of the workflow harness: dataset loading, the
//! completion client, sandboxed judging, run orchestration and reports.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod record;
pub mod report;
pub mod runner;
pub mod llmclient;
pub mod sandbox;
