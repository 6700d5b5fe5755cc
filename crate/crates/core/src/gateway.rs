//! Chat-model gateways for the two model roles: the domain model that writes
//! draft answers and the reviser that produces the final answer.
//!
//! Both roles share one transport. A [`Gateway`] wraps a [`ChatBackend`],
//! either the HTTP chat-completions client or a [`ScriptedResponder`].

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::estimate_tokens;
use crate::transport::{HttpClient, RetryPolicy, TransportError};

pub const DEFAULT_DRAFT_SUFFIX: &str = "Please provide evidence in the Chinese law";
pub const MIN_INPUT_TOKENS: usize = 256;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("message list is empty")]
    NoMessages,
    #[error("last message must come from the user")]
    LastMessageNotUser,
    #[error("user message {0} is empty")]
    EmptyUserMessage(usize),
    #[error("prompt needs ~{estimated} tokens, endpoint accepts at most {limit}")]
    BudgetExceeded { estimated: usize, limit: usize },
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed chat response: {0}")]
    MalformedResponse(String),
    #[error("model returned an empty response")]
    EmptyResponse,
    #[error("scripted failure: {0}")]
    Scripted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub max_input_tokens: usize,
    pub temperature: f64,
    /// Sent as `max_tokens` when set; otherwise the server decides.
    pub max_output_tokens: Option<u32>,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Cap on concurrent requests through one gateway.
    pub max_in_flight: usize,
}

impl Default for ModelEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".to_string(),
            model_name: "gpt-4-0613".to_string(),
            max_input_tokens: 8000,
            temperature: 0.0,
            max_output_tokens: None,
            timeout_s: 120,
            max_retries: 3,
            initial_backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl ModelEndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_input_tokens < MIN_INPUT_TOKENS {
            return Err(GatewayError::InvalidConfig(format!(
                "max_input_tokens {} is below {MIN_INPUT_TOKENS}",
                self.max_input_tokens
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.timeout_s == 0 {
            return Err(GatewayError::InvalidConfig(
                "timeout_s must be positive".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidConfig(
                "max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff: Duration::from_millis(self.initial_backoff_ms),
            ..RetryPolicy::default()
        }
    }
}

/// A completion source.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        config: &ModelEndpointConfig,
        messages: &[ChatMessage],
    ) -> Result<String, GatewayError>;
}

/// OpenAI-style `POST {base_url}/chat/completions` client.
#[derive(Debug)]
pub struct HttpChatBackend {
    url: String,
    client: HttpClient,
}

impl HttpChatBackend {
    pub fn new(config: &ModelEndpointConfig) -> Self {
        let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        let client = HttpClient::new(Duration::from_secs(config.timeout_s), config.retry_policy());
        Self { url, client }
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(
        &self,
        config: &ModelEndpointConfig,
        messages: &[ChatMessage],
    ) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": config.model_name,
            "temperature": config.temperature,
            "messages": messages,
        });
        if let Some(n) = config.max_output_tokens {
            body["max_tokens"] = json!(n);
        }
        let response = self.client.post_json(&self.url, &body)?;
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| {
                GatewayError::MalformedResponse("missing choices[0].message.content".into())
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    #[serde(default)]
    pub response: String,
    /// When set, a match fails with this message instead of responding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: response.into(),
            error: None,
        }
    }

    pub fn failing(pattern: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: String::new(),
            error: Some(message.into()),
        }
    }
}

/// Deterministic mock: the first rule whose pattern is a substring of the
/// last user message decides the reply.
#[derive(Debug, Default)]
pub struct ScriptedResponder {
    rules: Vec<ScriptRule>,
    default_response: String,
    log: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedResponder {
    pub fn new(rules: Vec<ScriptRule>, default_response: impl Into<String>) -> Self {
        Self {
            rules,
            default_response: default_response.into(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn reply_for(&self, text: &str) -> Result<String, GatewayError> {
        match self.rules.iter().find(|r| text.contains(&r.pattern)) {
            Some(ScriptRule {
                error: Some(msg), ..
            }) => Err(GatewayError::Scripted(msg.clone())),
            Some(rule) => Ok(rule.response.clone()),
            None => Ok(self.default_response.clone()),
        }
    }

    /// Every message list received so far, in call order.
    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.log.lock().expect("call log poisoned").clone()
    }
}

impl ChatBackend for ScriptedResponder {
    fn complete(
        &self,
        _config: &ModelEndpointConfig,
        messages: &[ChatMessage],
    ) -> Result<String, GatewayError> {
        self.log
            .lock()
            .expect("call log poisoned")
            .push(messages.to_vec());
        let last = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        self.reply_for(last)
    }
}

#[derive(Debug)]
struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    config: ModelEndpointConfig,
    backend: Arc<dyn ChatBackend>,
    draft_suffix: String,
    slots: Semaphore,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("draft_suffix", &self.draft_suffix)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(
        config: ModelEndpointConfig,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let slots = Semaphore::new(config.max_in_flight);
        Ok(Self {
            config,
            backend,
            draft_suffix: DEFAULT_DRAFT_SUFFIX.to_string(),
            slots,
        })
    }

    pub fn http(config: ModelEndpointConfig) -> Result<Self, GatewayError> {
        let backend = Arc::new(HttpChatBackend::new(&config));
        Self::new(config, backend)
    }

    pub fn scripted(
        config: ModelEndpointConfig,
        responder: Arc<ScriptedResponder>,
    ) -> Result<Self, GatewayError> {
        Self::new(config, responder)
    }

    /// Replaces the instruction appended to draft queries.
    pub fn with_draft_suffix(mut self, suffix: impl Into<String>) -> Self {
        self.draft_suffix = suffix.into();
        self
    }

    pub fn config(&self) -> &ModelEndpointConfig {
        &self.config
    }

    pub fn draft_suffix(&self) -> &str {
        &self.draft_suffix
    }

    pub fn chat(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let last = messages.last().ok_or(GatewayError::NoMessages)?;
        if last.role != Role::User {
            return Err(GatewayError::LastMessageNotUser);
        }
        if let Some(i) = messages
            .iter()
            .position(|m| m.role == Role::User && m.content.is_empty())
        {
            return Err(GatewayError::EmptyUserMessage(i));
        }
        let _permit = self.slots.acquire();
        self.backend.complete(&self.config, messages)
    }

    /// Asks the domain model for a draft answer. The instruction suffix is
    /// appended to the outgoing message only.
    pub fn generate_draft(&self, query: &str) -> Result<String, GatewayError> {
        if query.is_empty() {
            return Err(GatewayError::EmptyQuery);
        }
        let content = format!("{query}\n{}", self.draft_suffix);
        let draft = self.chat(&[ChatMessage::user(content)])?;
        if draft.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(draft)
    }

    pub fn revise(&self, prompt: &str) -> Result<String, GatewayError> {
        let estimated = estimate_tokens(prompt);
        if estimated > self.config.max_input_tokens {
            return Err(GatewayError::BudgetExceeded {
                estimated,
                limit: self.config.max_input_tokens,
            });
        }
        self.chat(&[ChatMessage::user(prompt)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(rules: Vec<ScriptRule>, default: &str) -> (Gateway, Arc<ScriptedResponder>) {
        let r = Arc::new(ScriptedResponder::new(rules, default));
        (
            Gateway::scripted(ModelEndpointConfig::default(), r.clone()).unwrap(),
            r,
        )
    }

    #[test]
    fn draft_request_carries_suffix() {
        let (g, r) = scripted(vec![], "D");
        assert_eq!(g.generate_draft("Q").unwrap(), "D");
        let calls = r.calls();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].len(), 1);
        assert_eq!(calls[0][0].role, Role::User);
        assert_eq!(
            calls[0][0].content,
            "Q\nPlease provide evidence in the Chinese law"
        );
    }

    #[test]
    fn empty_query_never_calls() {
        let (g, r) = scripted(vec![], "D");
        assert!(matches!(
            g.generate_draft(""),
            Err(GatewayError::EmptyQuery)
        ));
        assert!(r.calls().is_empty());
    }

    #[test]
    fn scripted_rule_lookup() {
        let (g, _) = scripted(
            vec![ScriptRule::new("theft", "Article 264 of the Criminal Law")],
            "D",
        );
        assert_eq!(
            g.generate_draft("a theft case").unwrap(),
            "Article 264 of the Criminal Law"
        );
        assert_eq!(g.generate_draft("a fraud case").unwrap(), "D");
    }

    #[test]
    fn first_matching_rule_wins() {
        let r = ScriptedResponder::new(
            vec![
                ScriptRule::new("a", "first"),
                ScriptRule::new("ab", "second"),
            ],
            "none",
        );
        assert_eq!(r.reply_for("xab").unwrap(), "first");
    }

    #[test]
    fn custom_suffix_and_empty_response() {
        let (g, r) = scripted(vec![ScriptRule::new("blank", "  ")], "D");
        let g = g.with_draft_suffix("请提供中国法律依据");
        g.generate_draft("x").unwrap();
        assert_eq!(r.calls()[0][0].content, "x\n请提供中国法律依据");
        assert!(matches!(
            g.generate_draft("blank"),
            Err(GatewayError::EmptyResponse)
        ));
    }

    #[test]
    fn revise_passthrough_and_budget() {
        let (g, r) = scripted(vec![], "R");
        assert_eq!(g.revise("prompt").unwrap(), "R");
        assert_eq!(g.revise("prompt").unwrap(), "R");
        let long = "x".repeat(4 * 8000 + 1);
        assert!(matches!(
            g.revise(&long),
            Err(GatewayError::BudgetExceeded {
                estimated: 8001,
                limit: 8000
            })
        ));
        assert_eq!(r.calls().len(), 2);
    }

    #[test]
    fn chat_preconditions() {
        let (g, _) = scripted(vec![], "R");
        assert!(matches!(g.chat(&[]), Err(GatewayError::NoMessages)));
        assert!(matches!(
            g.chat(&[ChatMessage::system("s")]),
            Err(GatewayError::LastMessageNotUser)
        ));
        assert!(matches!(
            g.chat(&[ChatMessage::user("")]),
            Err(GatewayError::EmptyUserMessage(0))
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = ModelEndpointConfig {
            max_input_tokens: 255,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelEndpointConfig {
            temperature: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelEndpointConfig::default().validate().is_ok());
    }

    #[test]
    fn scripted_error_rule() {
        let (g, _) = scripted(vec![ScriptRule::failing("boom", "model down")], "D");
        assert!(matches!(
            g.generate_draft("boom"),
            Err(GatewayError::Scripted(_))
        ));
    }

    #[test]
    fn semaphore_caps_in_flight() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn complete(
                &self,
                _: &ModelEndpointConfig,
                _: &[ChatMessage],
            ) -> Result<String, GatewayError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok("ok".into())
            }
        }
        let backend = Arc::new(Slow {
            now: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let cfg = ModelEndpointConfig {
            max_in_flight: 2,
            ..Default::default()
        };
        let g = Gateway::new(cfg, backend.clone()).unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| g.revise("p").unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
    }
}
