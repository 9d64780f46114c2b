//! Completion client: sampling, on-disk cache, rate limiting, retries,
//! refusal flags and token accounting over a pluggable [`Provider`].

mod clock;
mod mock;
mod openai;
mod provider;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use m2wf_core::refusal::{detect_refusal, DEFAULT_REFUSAL_PHRASES};
use m2wf_core::strategy::{PromptBundle, StrategyKind};
use m2wf_core::usage::{summarize_usage as summarize_samples, TokenUsage, UsageSample, UsageSummary};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use clock::{Clock, RateLimiter, SystemClock, VirtualClock, RATE_WINDOW};
pub use mock::{MockProvider, RuleUsage, Transcript, TranscriptRule};
pub use openai::OpenAiProvider;
pub use provider::{Provider, ProviderError, ProviderRequest, ProviderResponse, ProviderUsage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_name: String,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub request_timeout: Duration,
    pub max_retries: u32,
    pub rate_limit_per_minute: Option<u32>,
    /// Ask for all samples of a prompt in one request.
    pub server_side_n: bool,
    /// First retry delay; doubles on every further attempt.
    pub backoff_base: Duration,
}

impl ModelConfig {
    pub fn new(model_name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            endpoint: endpoint.into(),
            api_key_env: None,
            request_timeout: Duration::from_secs(120),
            max_retries: 5,
            rate_limit_per_minute: None,
            server_side_n: false,
            backoff_base: Duration::from_secs(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_name.trim().is_empty() {
            return Err(ClientError::Config("model name is empty".into()));
        }
        if self.request_timeout.is_zero() {
            return Err(ClientError::Config("request timeout must be positive".into()));
        }
        Ok(())
    }

    /// Reads the API key from the configured variable.
    pub fn api_key(&self) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ClientError::Auth(format!("environment variable {var} is not set"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ClientError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ClientError::Config(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        if self.n == 0 {
            return Err(ClientError::Config("n must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_fingerprint: String,
    pub sample_index: u32,
    /// Name of the cache entry holding this record.
    pub cache_key: String,
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub refusal: bool,
    pub from_cache: bool,
    /// Provider calls it took to obtain the completion, retries included.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: u32,
    pub error: String,
    pub backoff_ms: u64,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("gave up after {} attempts: {}", .0.len(), .0.last().map(|a| a.error.as_str()).unwrap_or(""))]
    Exhausted(Vec<Attempt>),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider error: {0}")]
    Fatal(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid client configuration: {0}")]
    Config(String),
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// Local token count used when the provider reports no usage.
pub trait TokenEstimator: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Roughly four characters per token.
#[derive(Debug, Clone, Copy)]
pub struct CharEstimator {
    pub chars_per_token: u32,
}

impl Default for CharEstimator {
    fn default() -> Self {
        Self { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharEstimator {
    fn count(&self, text: &str) -> u64 {
        let chars = text.chars().count() as u64;
        chars.div_ceil(self.chars_per_token.max(1) as u64)
    }
}

/// One JSON file per completion, written atomically.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ClientError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(model: &str, fingerprint: &str, sampling: &SamplingParams, index: u32) -> String {
        let mut hasher = Sha256::new();
        for field in [
            model.to_string(),
            fingerprint.to_string(),
            format!("{:?}", sampling.temperature),
            format!("{:?}", sampling.top_p),
            index.to_string(),
        ] {
            hasher.update((field.len() as u64).to_le_bytes());
            hasher.update(field.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Unreadable entries count as misses.
    pub fn get(&self, key: &str) -> Option<CompletionRecord> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, record: &CompletionRecord) -> Result<()> {
        let err = |e: std::io::Error| ClientError::Cache(format!("{}: {e}", self.dir.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        let stored = CompletionRecord { from_cache: false, ..record.clone() };
        let json = serde_json::to_vec_pretty(&stored).map_err(|e| ClientError::Cache(e.to_string()))?;
        tmp.write_all(&json).map_err(err)?;
        tmp.as_file().sync_all().map_err(err)?;
        tmp.persist(self.path(&record.cache_key)).map_err(|e| err(e.error))?;
        Ok(())
    }
}

pub struct Client {
    config: ModelConfig,
    provider: Arc<dyn Provider>,
    cache: Option<DiskCache>,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    refusal_phrases: Vec<String>,
    estimator: Arc<dyn TokenEstimator>,
}

impl Client {
    pub fn new(config: ModelConfig, provider: Arc<dyn Provider>) -> Self {
        let limiter = RateLimiter::new(config.rate_limit_per_minute);
        Self {
            config,
            provider,
            cache: None,
            limiter,
            clock: Arc::new(SystemClock::default()),
            refusal_phrases: DEFAULT_REFUSAL_PHRASES.iter().map(|s| s.to_string()).collect(),
            estimator: Arc::new(CharEstimator::default()),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_refusal_phrases(mut self, phrases: Vec<String>) -> Self {
        self.refusal_phrases = phrases;
        self
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_refusal(&self, text: &str) -> bool {
        detect_refusal(text, &self.refusal_phrases)
    }

    /// Exactly `sampling.n` records, indices `0..n`.
    pub fn complete(&self, bundle: &PromptBundle, sampling: &SamplingParams) -> Result<Vec<CompletionRecord>> {
        let indices: Vec<u32> = (0..sampling.n).collect();
        self.complete_indices(bundle, sampling, &indices)
    }

    /// Records for the given sample indices, served from the cache where
    /// possible. Fresh records are cached before this returns.
    pub fn complete_indices(
        &self,
        bundle: &PromptBundle,
        sampling: &SamplingParams,
        indices: &[u32],
    ) -> Result<Vec<CompletionRecord>> {
        sampling.validate()?;
        let model = self.config.model_name.as_str();
        let mut out = Vec::with_capacity(indices.len());
        let mut missing = Vec::new();
        for &index in indices {
            let key = DiskCache::key(model, &bundle.params_fingerprint, sampling, index);
            match self.cache.as_ref().and_then(|c| c.get(&key)) {
                Some(hit) => out.push(CompletionRecord { from_cache: true, ..hit }),
                None => missing.push(index),
            }
        }
        if !missing.is_empty() {
            let batched = self.config.server_side_n && self.provider.supports_server_side_n();
            let groups: Vec<Vec<u32>> =
                if batched { vec![missing] } else { missing.into_iter().map(|i| vec![i]).collect() };
            for group in groups {
                for record in self.fetch(bundle, sampling, &group)? {
                    if let Some(cache) = &self.cache {
                        cache.put(&record)?;
                    }
                    out.push(record);
                }
            }
        }
        out.sort_by_key(|r| r.sample_index);
        Ok(out)
    }

    fn fetch(&self, bundle: &PromptBundle, sampling: &SamplingParams, indices: &[u32]) -> Result<Vec<CompletionRecord>> {
        let model = self.config.model_name.as_str();
        let request = ProviderRequest {
            model,
            bundle,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            indices,
        };
        let started = self.clock.now();
        let (response, attempts) = self.call_with_retry(&request)?;
        let latency_ms = (self.clock.now().saturating_sub(started)).as_millis() as u64;
        if response.choices.len() != indices.len() {
            return Err(ClientError::Fatal(format!(
                "asked for {} completions, received {}",
                indices.len(),
                response.choices.len()
            )));
        }
        let usages = self.apportion(bundle, &response);
        Ok(indices
            .iter()
            .zip(response.choices)
            .zip(usages)
            .map(|((&index, text), usage)| CompletionRecord {
                request_fingerprint: bundle.params_fingerprint.clone(),
                sample_index: index,
                cache_key: DiskCache::key(model, &bundle.params_fingerprint, sampling, index),
                refusal: self.is_refusal(&text),
                text,
                usage,
                latency_ms,
                from_cache: false,
                attempts,
            })
            .collect())
    }

    /// Splits one call's usage over its choices. Every choice carries the
    /// prompt's input tokens; output tokens are shared in proportion to
    /// choice length; the call itself is counted on the first choice.
    fn apportion(&self, bundle: &PromptBundle, response: &ProviderResponse) -> Vec<TokenUsage> {
        let count = response.choices.len();
        let (input, outputs, estimated) = match response.usage {
            Some(u) => {
                let lengths: Vec<u64> = response.choices.iter().map(|c| c.chars().count() as u64).collect();
                (u.prompt_tokens, share(u.completion_tokens, &lengths), false)
            }
            None => {
                let prompt: u64 = bundle.messages.iter().map(|m| self.estimator.count(&m.text)).sum();
                (prompt, response.choices.iter().map(|c| self.estimator.count(c)).collect(), true)
            }
        };
        (0..count)
            .map(|i| TokenUsage {
                input_tokens: input,
                output_tokens: outputs[i],
                api_calls: u64::from(i == 0),
                estimated,
            })
            .collect()
    }

    fn call_with_retry(&self, request: &ProviderRequest<'_>) -> Result<(ProviderResponse, u32)> {
        let mut log = Vec::new();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.limiter.acquire(self.clock.as_ref());
            match self.provider.complete(request) {
                Ok(response) => return Ok((response, attempt)),
                Err(ProviderError::Auth(e)) => return Err(ClientError::Auth(e)),
                Err(ProviderError::Fatal(e)) => return Err(ClientError::Fatal(e)),
                Err(ProviderError::Transient(e)) => {
                    let retry = attempt <= self.config.max_retries;
                    let backoff = if retry { self.backoff(attempt) } else { Duration::ZERO };
                    log.push(Attempt { attempt, error: e, backoff_ms: backoff.as_millis() as u64 });
                    if !retry {
                        return Err(ClientError::Exhausted(log));
                    }
                    self.clock.sleep(backoff);
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << (attempt - 1).min(16);
        (self.config.backoff_base * factor).min(Duration::from_secs(120))
    }
}

/// Splits `total` across parts proportionally to `weights`; leftovers go to
/// the earliest parts. The result always sums to `total`.
fn share(total: u64, weights: &[u64]) -> Vec<u64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        let base = total / weights.len() as u64;
        let extra = total % weights.len() as u64;
        return (0..weights.len() as u64).map(|i| base + u64::from(i < extra)).collect();
    }
    let mut parts: Vec<u64> = weights.iter().map(|w| (total as u128 * *w as u128 / sum as u128) as u64).collect();
    let mut left = total - parts.iter().sum::<u64>();
    for p in parts.iter_mut() {
        if left == 0 {
            break;
        }
        *p += 1;
        left -= 1;
    }
    parts
}

/// Per-(model, strategy) means over completion records.
pub fn summarize_usage(model: &str, strategy: StrategyKind, records: &[CompletionRecord]) -> Result<Vec<UsageSummary>, m2wf_core::Error> {
    summarize_samples(records.iter().map(|r| UsageSample {
        model,
        strategy,
        request: &r.request_fingerprint,
        usage: r.usage,
    }))
}
