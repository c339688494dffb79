//! Completion-service client with retries and pluggable transports.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const URL_ENV: &str = "BIOSERC_LLM_URL";
pub const TOKEN_ENV: &str = "BIOSERC_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub model_name: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
            model_name: model_name.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Config("completion prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: usize,
    /// Delay before retry `k` is `backoff_base * 2^k`, jittered down by up to half.
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: usize) -> Duration {
        if self.backoff_base.is_zero() {
            return Duration::ZERO;
        }
        let full = self.backoff_base.saturating_mul(1u32 << attempt.min(16));
        let jitter = rand::rng().random_range(0.5..=1.0);
        full.mul_f64(jitter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the endpoint URL and optional bearer token from the environment.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(URL_ENV)
            .map_err(|_| Error::Config(format!("{URL_ENV} is not set")))?;
        let mut cfg = Self::new(url);
        cfg.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Network failure, timeout, or a retryable status (429, 5xx).
    Transient { status: Option<u16>, message: String },
    /// Non-retryable HTTP status.
    Status { status: u16, body: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub text: String,
    pub finish_reason: Option<String>,
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &CompletionRequest, endpoint: &EndpointConfig) -> Result<WireResponse, TransportError>;
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

/// Accepts either `{"text": ..}` or `{"choices": [{"text": .., "finish_reason": ..}]}`.
#[derive(Deserialize)]
struct WireBody {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    choices: Vec<WireChoice>,
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &CompletionRequest, endpoint: &EndpointConfig) -> Result<WireResponse, TransportError> {
        let body = WireRequest {
            model: &req.model_name,
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let mut call = self.agent.post(&endpoint.url);
        if let Some(token) = &endpoint.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call.send_json(&body).map_err(|e| TransportError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| TransportError::Transient {
            status: Some(status),
            message: e.to_string(),
        })?;
        if status == 429 || status >= 500 {
            return Err(TransportError::Transient {
                status: Some(status),
                message: text,
            });
        }
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: text });
        }
        let parsed: WireBody = serde_json::from_str(&text).map_err(|e| TransportError::Status {
            status,
            body: format!("unreadable completion body: {e}"),
        })?;
        match (parsed.text, parsed.choices.into_iter().next()) {
            (Some(text), _) => Ok(WireResponse {
                text,
                finish_reason: parsed.finish_reason,
            }),
            (None, Some(choice)) => Ok(WireResponse {
                text: choice.text,
                finish_reason: choice.finish_reason,
            }),
            (None, None) => Err(TransportError::Status {
                status,
                body: "completion body has no text".into(),
            }),
        }
    }
}

/// Stateless client; safe to share across threads.
#[derive(Clone)]
pub struct LlmClient {
    transport: Arc<dyn Transport>,
    endpoint: EndpointConfig,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, endpoint: EndpointConfig) -> Self {
        Self { transport, endpoint }
    }

    pub fn http(endpoint: EndpointConfig) -> Self {
        let transport = Arc::new(HttpTransport::new(endpoint.timeout));
        Self::new(transport, endpoint)
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        req.validate()?;
        let retry = &self.endpoint.retry;
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            match self.transport.send(req, &self.endpoint) {
                Ok(wire) => {
                    let finish_reason = match wire.finish_reason.as_deref() {
                        Some("length") => FinishReason::Length,
                        Some("error") => FinishReason::Error,
                        _ => FinishReason::Stop,
                    };
                    return Ok(CompletionResponse {
                        text: wire.text,
                        finish_reason,
                        latency_ms: started.elapsed().as_secs_f64() * 1e3,
                    });
                }
                Err(TransportError::Status { status, body }) => {
                    return Err(Error::Endpoint { status, body });
                }
                Err(TransportError::Transient { status, message }) => {
                    if attempt >= retry.max_retries {
                        return Err(match status {
                            Some(status) => Error::Endpoint { status, body: message },
                            None => Error::Transport {
                                attempts: attempt + 1,
                                message,
                            },
                        });
                    }
                    std::thread::sleep(retry.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

/// Test transports.
pub mod mock {
    use super::*;

    /// Answers every request with `f(request)`.
    pub struct FnTransport<F> {
        f: F,
        calls: AtomicUsize,
    }

    impl<F> FnTransport<F>
    where
        F: Fn(&CompletionRequest) -> Result<String, TransportError> + Send + Sync,
    {
        pub fn new(f: F) -> Self {
            Self {
                f,
                calls: AtomicUsize::new(0),
            }
        }

        pub fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl<F> Transport for FnTransport<F>
    where
        F: Fn(&CompletionRequest) -> Result<String, TransportError> + Send + Sync,
    {
        fn send(&self, req: &CompletionRequest, _: &EndpointConfig) -> Result<WireResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            (self.f)(req).map(|text| WireResponse {
                text,
                finish_reason: Some("stop".into()),
            })
        }
    }

    pub fn echo(text: &str) -> FnTransport<impl Fn(&CompletionRequest) -> Result<String, TransportError> + Send + Sync> {
        let text = text.to_string();
        FnTransport::new(move |_| Ok(text.clone()))
    }

    /// Plays back a fixed sequence of outcomes, then repeats the last one.
    pub struct ScriptedTransport {
        script: Mutex<VecDeque<Result<String, TransportError>>>,
        attempts: AtomicUsize,
    }

    impl ScriptedTransport {
        pub fn new(script: Vec<Result<String, TransportError>>) -> Self {
            Self {
                script: Mutex::new(script.into()),
                attempts: AtomicUsize::new(0),
            }
        }

        /// `failures` transient errors followed by `text` forever.
        pub fn failing_then(failures: usize, text: &str) -> Self {
            let mut script: Vec<_> = (0..failures).map(|i| Err(transient(&format!("failure {i}")))).collect();
            script.push(Ok(text.to_string()));
            Self::new(script)
        }

        pub fn attempts(&self) -> usize {
            self.attempts.load(Ordering::SeqCst)
        }
    }

    impl Transport for ScriptedTransport {
        fn send(&self, _: &CompletionRequest, _: &EndpointConfig) -> Result<WireResponse, TransportError> {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let mut script = self.script.lock().expect("script lock");
            let next = if script.len() > 1 {
                script.pop_front()
            } else {
                script.front().cloned()
            };
            next.unwrap_or_else(|| Err(transient("script exhausted")))
                .map(|text| WireResponse {
                    text,
                    finish_reason: Some("stop".into()),
                })
        }
    }

    pub fn transient(message: &str) -> TransportError {
        TransportError::Transient {
            status: None,
            message: message.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::*;
    use super::*;

    fn endpoint(retries: usize) -> EndpointConfig {
        let mut e = EndpointConfig::new("mock://");
        e.retry = RetryPolicy {
            max_retries: retries,
            backoff_base: Duration::ZERO,
        };
        e
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new("hello", "m")
    }

    #[test]
    fn echo_returns_stop() {
        let client = LlmClient::new(Arc::new(echo("OK")), endpoint(3));
        let r = client.complete(&req()).unwrap();
        assert_eq!(r.text, "OK");
        assert_eq!(r.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn succeeds_on_third_attempt() {
        let t = Arc::new(ScriptedTransport::failing_then(2, "fine"));
        let client = LlmClient::new(t.clone(), endpoint(3));
        assert_eq!(client.complete(&req()).unwrap().text, "fine");
        assert_eq!(t.attempts(), 3);
    }

    #[test]
    fn exhausts_retries() {
        let t = Arc::new(ScriptedTransport::new(vec![Err(transient("down"))]));
        let client = LlmClient::new(t.clone(), endpoint(2));
        match client.complete(&req()) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(t.attempts(), 3);
    }

    #[test]
    fn client_error_status_is_not_retried() {
        let t = Arc::new(ScriptedTransport::new(vec![Err(TransportError::Status {
            status: 401,
            body: "no".into(),
        })]));
        let client = LlmClient::new(t.clone(), endpoint(5));
        assert!(matches!(client.complete(&req()), Err(Error::Endpoint { status: 401, .. })));
        assert_eq!(t.attempts(), 1);
    }

    #[test]
    fn invalid_request_rejected() {
        let client = LlmClient::new(Arc::new(echo("x")), endpoint(0));
        let mut r = req();
        r.max_tokens = 0;
        assert!(client.complete(&r).is_err());
        assert!(client.complete(&CompletionRequest::new("", "m")).is_err());
    }

    #[test]
    fn connection_refused_is_transport_error() {
        let mut e = endpoint(1);
        e.url = "http://127.0.0.1:9/v1/completions".into();
        e.timeout = Duration::from_secs(2);
        let client = LlmClient::http(e);
        assert!(matches!(client.complete(&req()), Err(Error::Transport { attempts: 2, .. })));
    }
}
