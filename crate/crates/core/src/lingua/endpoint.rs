use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::EndpointError;

/// Where and how to query a completion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceEndpoint {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after the first one.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

impl InferenceEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn generate_url(&self) -> String {
        format!("{}/api/generate", self.base_url.trim_end_matches('/'))
    }
}

/// A completion plus the number of HTTP attempts it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// Anything that turns a prompt into completion text.
pub trait CompletionBackend: Sync {
    fn model_name(&self) -> &str;
    fn temperature(&self) -> f64;
    fn complete(&self, prompt: &str) -> Result<Completion, EndpointError>;
}

/// Blocking client for the non-streaming `/api/generate` endpoint.
pub struct HttpBackend {
    endpoint: InferenceEndpoint,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct GenerateReply {
    response: String,
}

impl HttpBackend {
    pub fn new(endpoint: InferenceEndpoint) -> Result<Self, EndpointError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| EndpointError::Transport {
                url: endpoint.generate_url(),
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { endpoint, client })
    }

    pub fn endpoint(&self) -> &InferenceEndpoint {
        &self.endpoint
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.min(16);
        Duration::from_millis(self.endpoint.backoff_ms.saturating_mul(factor))
    }
}

impl CompletionBackend for HttpBackend {
    fn model_name(&self) -> &str {
        &self.endpoint.model_name
    }

    fn temperature(&self) -> f64 {
        self.endpoint.temperature
    }

    fn complete(&self, prompt: &str) -> Result<Completion, EndpointError> {
        let url = self.endpoint.generate_url();
        let body = json!({
            "model": self.endpoint.model_name,
            "prompt": prompt,
            "stream": false,
            "options": { "temperature": self.endpoint.temperature },
        });
        let max_attempts = self.endpoint.max_retries + 1;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let last = attempts == max_attempts;
            match self.client.post(&url).json(&body).send() {
                Err(e) => {
                    if last {
                        return Err(EndpointError::Transport {
                            url,
                            attempts,
                            message: e.to_string(),
                        });
                    }
                    warn!("attempt {attempts} to {url} failed: {e}");
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| EndpointError::Transport {
                            url: url.clone(),
                            attempts,
                            message: e.to_string(),
                        })?;
                        let reply: GenerateReply =
                            serde_json::from_str(&text).map_err(|e| EndpointError::Protocol {
                                url: url.clone(),
                                message: format!("{e}; body starts {:?}", excerpt(&text)),
                            })?;
                        debug!("{url} answered in {attempts} attempt(s)");
                        return Ok(Completion {
                            text: reply.response,
                            attempts,
                        });
                    }
                    let transient = status.is_server_error() || status.as_u16() == 429;
                    if last || !transient {
                        let body = resp.text().unwrap_or_default();
                        return Err(EndpointError::Status {
                            url,
                            status: status.as_u16(),
                            body: excerpt(&body),
                            attempts,
                        });
                    }
                    warn!("attempt {attempts} to {url} returned {status}");
                }
            }
            std::thread::sleep(self.backoff(attempts - 1));
        }
    }
}

fn excerpt(s: &str) -> String {
    const LIMIT: usize = 200;
    match s.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
