use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, BackendSpec, Generation, GenerationRequest, Generator};

/// Capped exponential backoff for transient failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
    #[serde(with = "millis")]
    pub request_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, where `attempt` starts at 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Blocking chat/completions client.
pub struct LiveClient {
    backend_id: String,
    endpoint: String,
    model: String,
    max_tokens: u32,
    temperature: f64,
    secret: Option<String>,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

enum Failure {
    Transient(String),
    Fatal(BackendError),
}

impl LiveClient {
    pub fn new(spec: &BackendSpec, retry: RetryPolicy) -> Result<Self, BackendError> {
        let secret = match &spec.credentials_ref {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential {
                backend_id: spec.backend_id.clone(),
                var: var.clone(),
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(retry.request_timeout)
            .build()
            .map_err(|e| BackendError::InvalidSpec(format!("{}: http client: {e}", spec.backend_id)))?;
        Ok(Self {
            backend_id: spec.backend_id.clone(),
            endpoint: spec.endpoint.clone().unwrap_or_default(),
            model: spec.model_name().to_string(),
            max_tokens: spec.max_tokens,
            temperature: spec.temperature,
            secret,
            retry,
            http,
        })
    }

    /// Strips the secret from any text that might reach a log or error.
    fn redact(&self, text: &str) -> String {
        match &self.secret {
            Some(s) if !s.is_empty() => text.replace(s.as_str(), "[redacted]"),
            _ => text.to_string(),
        }
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let mut req = self.http.post(&self.endpoint).json(body);
        if let Some(secret) = &self.secret {
            req = req.bearer_auth(secret);
        }
        let resp = req
            .send()
            .map_err(|e| Failure::Transient(self.redact(&e.without_url().to_string())))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Transient(self.redact(&e.to_string())))?;
        let snippet: String = self.redact(&text).chars().take(200).collect();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Failure::Fatal(BackendError::Credential {
                backend_id: self.backend_id.clone(),
                message: format!("HTTP {status}"),
            }));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}: {snippet}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Unavailable {
                backend_id: self.backend_id.clone(),
                attempts: 1,
                message: format!("HTTP {status}: {snippet}"),
            }));
        }
        let malformed = |message: String| {
            Failure::Fatal(BackendError::MalformedResponse {
                backend_id: self.backend_id.clone(),
                message,
            })
        };
        let v: Value = serde_json::from_str(&text).map_err(|e| malformed(format!("not JSON: {e}")))?;
        let choice = &v["choices"][0];
        choice["message"]["content"]
            .as_str()
            .or_else(|| choice["text"].as_str())
            .map(str::to_string)
            .ok_or_else(|| malformed("no choices[0].message.content or choices[0].text".into()))
    }
}

impl Generator for LiveClient {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Generation, BackendError> {
        let body = self.request_body(&req.prompt.text);
        let max = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(&body) {
                Ok(raw_text) => {
                    return Ok(Generation {
                        raw_text,
                        attempt_count: attempt,
                    })
                }
                Err(Failure::Fatal(BackendError::Unavailable { backend_id, message, .. })) => {
                    return Err(BackendError::Unavailable {
                        backend_id,
                        attempts: attempt,
                        message,
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    log::warn!("{}: attempt {attempt}/{max} failed: {msg}", self.backend_id);
                    last = msg;
                    if attempt < max {
                        std::thread::sleep(self.retry.delay_after(attempt));
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            backend_id: self.backend_id.clone(),
            attempts: max,
            message: last,
        })
    }
}
