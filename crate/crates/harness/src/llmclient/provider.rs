use m2wf_core::strategy::PromptBundle;
use thiserror::Error;

/// One live request: the prompt plus the sample indices it should produce.
/// Providers with server-side `n` return one choice per index in order.
#[derive(Debug, Clone, Copy)]
pub struct ProviderRequest<'a> {
    pub model: &'a str,
    pub bundle: &'a PromptBundle,
    pub temperature: f64,
    pub top_p: f64,
    pub indices: &'a [u32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProviderUsage {
    pub prompt_tokens: u64,
    /// Summed over all choices.
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderResponse {
    pub choices: Vec<String>,
    pub usage: Option<ProviderUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    /// Worth retrying: rate limits, server errors, dropped connections.
    #[error("transient provider error: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider error: {0}")]
    Fatal(String),
}

impl ProviderError {
    pub fn from_status(status: u16, body: &str) -> Self {
        let detail = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
        match status {
            401 | 403 => ProviderError::Auth(detail),
            408 | 409 | 429 | 500..=599 => ProviderError::Transient(detail),
            _ => ProviderError::Fatal(detail),
        }
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<ProviderResponse, ProviderError>;

    /// Whether one request may ask for several samples.
    fn supports_server_side_n(&self) -> bool {
        false
    }
}
