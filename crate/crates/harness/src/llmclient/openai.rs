//! OpenAI-compatible chat-completions transport.

use std::time::Duration;

use m2wf_core::strategy::Role;
use serde::{Deserialize, Serialize};

use super::provider::{Provider, ProviderError, ProviderRequest, ProviderResponse, ProviderUsage};

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    n: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<u32>,
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct OpenAiProvider {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    server_side_n: bool,
}

impl OpenAiProvider {
    /// `api_key` is held in memory only.
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration, server_side_n: bool) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, endpoint: endpoint.into(), api_key, server_side_n }
    }
}

impl Provider for OpenAiProvider {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<ProviderResponse, ProviderError> {
        let body = ChatRequest {
            model: request.model,
            messages: request
                .bundle
                .messages
                .iter()
                .map(|m| ChatMessage {
                    role: match m.role {
                        Role::System => "system",
                        Role::User => "user",
                    },
                    content: &m.text,
                })
                .collect(),
            temperature: request.temperature,
            top_p: request.top_p,
            n: request.indices.len() as u32,
        };
        let mut call = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Json(e) => ProviderError::Fatal(e.to_string()),
            other => ProviderError::Transient(other.to_string()),
        })?;
        let status = response.status().as_u16();
        if status != 200 {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::from_status(status, &text));
        }
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Fatal(format!("unreadable response: {e}")))?;
        let mut choices: Vec<(u32, String)> = parsed
            .choices
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c.index.unwrap_or(i as u32), c.message.content.unwrap_or_default()))
            .collect();
        choices.sort_by_key(|(i, _)| *i);
        Ok(ProviderResponse {
            choices: choices.into_iter().map(|(_, c)| c).collect(),
            usage: parsed.usage.map(|u| ProviderUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }

    fn supports_server_side_n(&self) -> bool {
        self.server_side_n
    }
}
