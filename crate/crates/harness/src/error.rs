use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::llmclient::ClientError;
use crate::sandbox::SandboxError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    RecordLog { path: PathBuf, line: usize, message: String },
    #[error("run incomplete: {0}")]
    Run(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// 2 for problems detectable before any work starts, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::Corpus(_) => 2,
            _ => 1,
        }
    }
}

impl From<m2wf_core::Error> for HarnessError {
    fn from(e: m2wf_core::Error) -> Self {
        HarnessError::Config(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
