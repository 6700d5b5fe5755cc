//! Blocking JSON-over-HTTP transport shared by the remote embedder and the
//! chat gateways. Retries transient failures (connection errors, 5xx, 429)
//! with exponential backoff.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the bearer token sent to model endpoints.
pub const API_KEY_ENV: &str = "ARR_API_KEY";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("HTTP {code} from {url} after {attempts} attempt(s): {body}")]
    Status {
        url: String,
        code: u16,
        body: String,
        attempts: u32,
    },
    #[error("request to {url} failed after {attempts} attempt(s): {message}")]
    Connection {
        url: String,
        message: String,
        attempts: u32,
    },
    #[error("response from {url} is not valid JSON: {message}")]
    InvalidJson { url: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    /// Delay slept before retry number `retry` (1-based).
    pub fn delay_for(&self, retry: u32) -> Duration {
        let shift = retry.saturating_sub(1).min(30);
        let delay = self.initial_backoff.saturating_mul(1u32 << shift);
        delay.min(self.max_backoff)
    }

    /// All delays this policy may sleep, in order.
    pub fn schedule(&self) -> Vec<Duration> {
        (1..=self.max_retries).map(|r| self.delay_for(r)).collect()
    }
}

fn is_transient(code: u16) -> bool {
    code == 429 || (500..600).contains(&code)
}

#[derive(Clone)]
pub(crate) struct HttpClient {
    agent: ureq::Agent,
    policy: RetryPolicy,
    api_key: Option<String>,
}

// Hand-written so the credential never reaches logs.
impl fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpClient")
            .field("policy", &self.policy)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpClient {
    pub(crate) fn new(timeout: Duration, policy: RetryPolicy) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self {
            agent,
            policy,
            api_key,
        }
    }

    pub(crate) fn post_json(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let mut request = self.agent.post(url);
            if let Some(key) = &self.api_key {
                request = request.set("Authorization", &format!("Bearer {key}"));
            }
            let retryable = match request.send_json(body.clone()) {
                Ok(response) => {
                    let text = response
                        .into_string()
                        .map_err(|e| TransportError::Connection {
                            url: url.to_string(),
                            message: e.to_string(),
                            attempts,
                        })?;
                    return serde_json::from_str(&text).map_err(|e| TransportError::InvalidJson {
                        url: url.to_string(),
                        message: e.to_string(),
                    });
                }
                Err(ureq::Error::Status(code, response)) => {
                    let body = response.into_string().unwrap_or_default();
                    let err = TransportError::Status {
                        url: url.to_string(),
                        code,
                        body,
                        attempts,
                    };
                    if !is_transient(code) {
                        return Err(err);
                    }
                    err
                }
                Err(ureq::Error::Transport(t)) => TransportError::Connection {
                    url: url.to_string(),
                    message: t.to_string(),
                    attempts,
                },
            };
            if attempts > self.policy.max_retries {
                return Err(retryable);
            }
            thread::sleep(self.policy.delay_for(attempts));
        }
    }
}
