//! Chat-completions JSON over HTTP.
//!
//! `url` is the API base; requests go to `{url}/chat/completions`,
//! `{url}/embeddings` and (for liveness) `{url}/models`.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{
    validate_messages, Backend, BackendDescriptor, ChatBackend, ChatMessage, GatewayError, ImageData, ImageEmbedder,
    TextEmbedder, VisionBackend,
};
use crate::domain::{Decoding, EmbeddingVector, GenerationConfig};

const PING_TIMEOUT: Duration = Duration::from_secs(2);

/// Retries after transport errors, timeouts, 5xx and 429 responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles for each further one.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

pub struct HttpBackend {
    id: String,
    base_url: String,
    model: String,
    auth_env: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    // Built on first use: constructing a blocking client inside an async
    // runtime panics, and backends are often created there.
    client: OnceLock<Client>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.id)
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("auth_env", &self.auth_env)
            .field("timeout", &self.timeout)
            .finish()
    }
}

enum Failure {
    Retryable(GatewayError),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(descriptor: &BackendDescriptor, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let url = descriptor
            .endpoint_url
            .as_deref()
            .ok_or_else(|| GatewayError::InvalidRequest(format!("backend {} has no url", descriptor.backend_id)))?;
        let url = url.trim().trim_end_matches('/');
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(GatewayError::InvalidRequest(format!(
                "backend {}: url must start with http:// or https://",
                descriptor.backend_id
            )));
        }
        Ok(Self {
            id: descriptor.backend_id.clone(),
            base_url: url.to_string(),
            model: descriptor.model_name.clone(),
            auth_env: descriptor.auth_env_var.clone(),
            timeout: Duration::from_millis(descriptor.timeout_ms.max(1)),
            retry,
            client: OnceLock::new(),
        })
    }

    fn client(&self) -> &Client {
        self.client.get_or_init(|| {
            Client::builder().timeout(self.timeout).build().expect("TLS-free HTTP client always builds")
        })
    }

    fn authorize(&self, req: RequestBuilder) -> RequestBuilder {
        match self.auth_env.as_deref().and_then(|var| std::env::var(var).ok()) {
            Some(key) if !key.is_empty() => req.bearer_auth(key),
            _ => req,
        }
    }

    fn unavailable(&self, reason: impl Into<String>) -> GatewayError {
        GatewayError::BackendUnavailable { backend: self.id.clone(), reason: reason.into() }
    }

    fn malformed(&self, reason: impl Into<String>) -> GatewayError {
        GatewayError::MalformedResponse { backend: self.id.clone(), reason: reason.into() }
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        let req = self.authorize(self.client().post(format!("{}{path}", self.base_url)).json(body));
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Retryable(GatewayError::Timeout { backend: self.id.clone() })
            } else {
                Failure::Retryable(self.unavailable(format!("transport error: {e}")))
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(Failure::Retryable(self.unavailable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(self.unavailable(format!("HTTP {status}"))));
        }
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                Failure::Retryable(GatewayError::Timeout { backend: self.id.clone() })
            } else {
                Failure::Retryable(self.unavailable(format!("reading body: {e}")))
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Failure::Fatal(self.malformed(format!("invalid JSON: {e}"))))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut retry = 0;
        loop {
            match self.post_once(path, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) if retry >= self.retry.max_retries => return Err(e),
                Err(Failure::Retryable(e)) => {
                    tracing::warn!(backend = %self.id, retry = retry + 1, error = %e, "retrying backend request");
                    thread::sleep(self.retry.delay(retry));
                    retry += 1;
                }
            }
        }
    }

    fn completion_body(&self, messages: Value, config: &GenerationConfig) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": config.wire_temperature(),
            "max_tokens": config.max_tokens,
        });
        if config.decoding == Decoding::Greedy {
            body["top_k"] = json!(1);
        }
        body
    }

    fn completion_text(&self, resp: &Value) -> Result<String, GatewayError> {
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| self.malformed("missing choices[0].message.content"))
    }

    fn embedding(&self, input: String) -> Result<EmbeddingVector, GatewayError> {
        let resp = self.post("/embeddings", &json!({ "model": self.model, "input": input }))?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| self.malformed("missing data[0].embedding"))?;
        let parsed: Option<Vec<f64>> = values.iter().map(Value::as_f64).collect();
        match parsed {
            Some(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(EmbeddingVector(v)),
            _ => Err(self.malformed("embedding is empty or not numeric")),
        }
    }
}

impl Drop for HttpBackend {
    fn drop(&mut self) {
        // A blocking client shuts down its own runtime on drop, which panics
        // on an async worker thread. Drop it on a plain thread instead.
        if let Some(client) = self.client.take() {
            let _ = thread::spawn(move || drop(client)).join();
        }
    }
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn ping(&self) -> bool {
        let req = self.authorize(self.client().get(format!("{}/models", self.base_url)).timeout(PING_TIMEOUT));
        match req.send() {
            Ok(resp) => !resp.status().is_server_error(),
            Err(_) => false,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn chat_complete(&self, messages: &[ChatMessage], config: &GenerationConfig) -> Result<String, GatewayError> {
        validate_messages(messages)?;
        let body = self.completion_body(json!(messages), config);
        let resp = self.post("/chat/completions", &body)?;
        self.completion_text(&resp)
    }
}

impl VisionBackend for HttpBackend {
    fn vision_complete(
        &self,
        image: &ImageData,
        prompt: &str,
        config: &GenerationConfig,
    ) -> Result<String, GatewayError> {
        let messages = json!([{
            "role": "user",
            "content": [
                { "type": "text", "text": prompt },
                { "type": "image_url", "image_url": { "url": image.data_url() } },
            ],
        }]);
        let resp = self.post("/chat/completions", &self.completion_body(messages, config))?;
        self.completion_text(&resp)
    }
}

impl TextEmbedder for HttpBackend {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
        }
        self.embedding(text.to_string())
    }
}

impl ImageEmbedder for HttpBackend {
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, GatewayError> {
        self.embedding(image.data_url())
    }
}
