//! Live HTTP chat-completion backend.
//!
//! One adapter per provider wire format behind the common [`Backend`] trait.
//! Transient transport failures and retryable statuses (429, 5xx) are retried
//! with bounded exponential backoff; a gate caps in-flight requests.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use crate::backend::{Backend, BackendError, BackendKind, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    Anthropic,
    OpenAi,
}

impl Provider {
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "anthropic" => Some(Provider::Anthropic),
            "openai" => Some(Provider::OpenAi),
            _ => None,
        }
    }

    fn api_key_var(self) -> &'static str {
        match self {
            Provider::Anthropic => "ANTHROPIC_API_KEY",
            Provider::OpenAi => "OPENAI_API_KEY",
        }
    }

    fn default_base_url(self) -> &'static str {
        match self {
            Provider::Anthropic => "https://api.anthropic.com",
            Provider::OpenAi => "https://api.openai.com",
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// The wire layer, injectable so retry behavior is testable offline.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpReply, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("reqwest client"),
        }
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpReply, String> {
        let mut req = self.client.post(url).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub provider: Provider,
    pub model: String,
    pub base_url: Option<String>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

impl LiveConfig {
    pub fn new(provider: Provider, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
            base_url: None,
            max_attempts: 4,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 8,
        }
    }
}

/// Counting gate bounding concurrent live requests.
struct Gate {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.freed.notify_one();
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    transport: Box<dyn HttpTransport>,
    gate: Gate,
}

impl LiveBackend {
    /// Build from the environment: the API key comes from the provider's
    /// conventional variable.
    pub fn from_env(config: LiveConfig) -> Result<Self, BackendError> {
        let var = config.provider.api_key_var();
        let api_key = std::env::var(var).map_err(|_| BackendError::Credentials(var))?;
        Ok(Self::with_transport(
            config,
            api_key,
            Box::new(ReqwestTransport::new(Duration::from_secs(120))),
        ))
    }

    pub fn with_transport(
        config: LiveConfig,
        api_key: impl Into<String>,
        transport: Box<dyn HttpTransport>,
    ) -> Self {
        let gate = Gate::new(config.max_in_flight);
        Self {
            config,
            api_key: api_key.into(),
            transport,
            gate,
        }
    }

    fn build_request(&self, request: &ChatRequest) -> (String, Vec<(String, String)>, Value) {
        let base = self
            .config
            .base_url
            .clone()
            .unwrap_or_else(|| self.config.provider.default_base_url().to_string());
        match self.config.provider {
            Provider::Anthropic => (
                format!("{base}/v1/messages"),
                vec![
                    ("x-api-key".into(), self.api_key.clone()),
                    ("anthropic-version".into(), "2023-06-01".into()),
                ],
                json!({
                    "model": self.config.model,
                    "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                    "top_p": request.top_p,
                    "system": request.system_prompt,
                    "messages": [{"role": "user", "content": request.user_message}],
                }),
            ),
            Provider::OpenAi => (
                format!("{base}/v1/chat/completions"),
                vec![("authorization".into(), format!("Bearer {}", self.api_key))],
                json!({
                    "model": self.config.model,
                    "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                    "top_p": request.top_p,
                    "messages": [
                        {"role": "system", "content": request.system_prompt},
                        {"role": "user", "content": request.user_message},
                    ],
                }),
            ),
        }
    }

    fn parse_response(&self, body: &str) -> Result<ChatResponse, BackendError> {
        let v: Value =
            serde_json::from_str(body).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let (text, input_tokens, output_tokens) = match self.config.provider {
            Provider::Anthropic => (
                v["content"][0]["text"].as_str(),
                v["usage"]["input_tokens"].as_u64(),
                v["usage"]["output_tokens"].as_u64(),
            ),
            Provider::OpenAi => (
                v["choices"][0]["message"]["content"].as_str(),
                v["usage"]["prompt_tokens"].as_u64(),
                v["usage"]["completion_tokens"].as_u64(),
            ),
        };
        let text = text
            .ok_or_else(|| BackendError::InvalidResponse("completion text missing".into()))?
            .to_string();
        Ok(ChatResponse {
            text,
            input_tokens: input_tokens.unwrap_or(0),
            output_tokens: output_tokens.unwrap_or(0),
            backend_kind: BackendKind::Live,
        })
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl Backend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let (url, headers, body) = self.build_request(request);
        self.gate.acquire();
        let result = (|| {
            let mut last_failure = String::new();
            for attempt in 0..self.config.max_attempts {
                if attempt > 0 {
                    std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
                }
                match self.transport.post_json(&url, &headers, &body) {
                    Ok(reply) if reply.status == 200 => return self.parse_response(&reply.body),
                    Ok(reply) if retryable_status(reply.status) => {
                        last_failure = format!("HTTP {}", reply.status);
                    }
                    Ok(reply) => {
                        return Err(BackendError::Http {
                            status: reply.status,
                            message: reply.body.chars().take(400).collect(),
                        })
                    }
                    Err(message) => last_failure = message,
                }
            }
            Err(BackendError::Transport {
                message: last_failure,
                attempts: self.config.max_attempts,
            })
        })();
        self.gate.release();
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RequestTag;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    struct FlakyTransport {
        failures_before_success: u32,
        calls: Arc<AtomicU32>,
        reply: HttpReply,
    }

    impl HttpTransport for FlakyTransport {
        fn post_json(
            &self,
            _url: &str,
            _headers: &[(String, String)],
            _body: &Value,
        ) -> Result<HttpReply, String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures_before_success {
                Err("connection reset".into())
            } else {
                Ok(self.reply.clone())
            }
        }
    }

    fn live_config() -> LiveConfig {
        let mut c = LiveConfig::new(Provider::Anthropic, "test-model");
        c.backoff_base = Duration::from_millis(1);
        c
    }

    fn request() -> ChatRequest {
        ChatRequest {
            system_prompt: "s".into(),
            user_message: "u".into(),
            temperature: 0.5,
            top_p: 0.95,
            max_tokens: 16,
            tag: RequestTag::Generation,
        }
    }

    fn anthropic_body() -> String {
        json!({
            "content": [{"type": "text", "text": "pong"}],
            "usage": {"input_tokens": 12, "output_tokens": 3},
        })
        .to_string()
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let calls = Arc::new(AtomicU32::new(0));
        let backend = LiveBackend::with_transport(
            live_config(),
            "key",
            Box::new(FlakyTransport {
                failures_before_success: 2,
                calls: Arc::clone(&calls),
                reply: HttpReply { status: 200, body: anthropic_body() },
            }),
        );
        let resp = backend.complete(&request()).unwrap();
        assert_eq!(resp.text, "pong");
        assert_eq!(resp.input_tokens, 12);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_bounded_attempts() {
        let calls = Arc::new(AtomicU32::new(0));
        let backend = LiveBackend::with_transport(
            live_config(),
            "key",
            Box::new(FlakyTransport {
                failures_before_success: u32::MAX,
                calls: Arc::clone(&calls),
                reply: HttpReply { status: 200, body: String::new() },
            }),
        );
        let err = backend.complete(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Transport { attempts: 4, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        struct Unauthorized;
        impl HttpTransport for Unauthorized {
            fn post_json(
                &self,
                _u: &str,
                _h: &[(String, String)],
                _b: &Value,
            ) -> Result<HttpReply, String> {
                Ok(HttpReply { status: 401, body: "bad key".into() })
            }
        }
        let backend = LiveBackend::with_transport(live_config(), "key", Box::new(Unauthorized));
        let err = backend.complete(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Http { status: 401, .. }));
    }

    #[test]
    fn openai_wire_format_parses() {
        struct Ok200;
        impl HttpTransport for Ok200 {
            fn post_json(
                &self,
                url: &str,
                _h: &[(String, String)],
                body: &Value,
            ) -> Result<HttpReply, String> {
                assert!(url.ends_with("/v1/chat/completions"));
                assert_eq!(body["messages"][0]["role"], "system");
                Ok(HttpReply {
                    status: 200,
                    body: json!({
                        "choices": [{"message": {"content": "fine"}}],
                        "usage": {"prompt_tokens": 9, "completion_tokens": 2},
                    })
                    .to_string(),
                })
            }
        }
        let mut config = LiveConfig::new(Provider::OpenAi, "gpt-test");
        config.backoff_base = Duration::from_millis(1);
        let backend = LiveBackend::with_transport(config, "key", Box::new(Ok200));
        let resp = backend.complete(&request()).unwrap();
        assert_eq!(resp.text, "fine");
        assert_eq!(resp.input_tokens, 9);
        assert_eq!(resp.output_tokens, 2);
    }
}
