use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// A numeric or structural parameter is outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A strategy or run is configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),
    /// A record violates the task model.
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("{0}")]
    EmptyInput(&'static str),
}
