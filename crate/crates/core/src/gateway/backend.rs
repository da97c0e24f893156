//! Chat backend abstraction and the HTTP implementation.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;

/// One backend invocation. Scripted backends match on the template id and
/// bindings; live backends send the rendered prompt.
#[derive(Debug)]
pub struct ChatCall<'a> {
    pub template_id: &'a str,
    pub bindings: &'a BTreeMap<String, String>,
    pub rendered_prompt: &'a str,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct ChatReply {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// How a backend call failed.
#[derive(Debug, Clone)]
pub enum BackendFailure {
    /// Worth retrying: network trouble, timeouts, throttling, 5xx.
    Transient(String),
    /// Not worth retrying; surfaced verbatim.
    Permanent(String),
}

impl std::fmt::Display for BackendFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendFailure::Transient(m) => write!(f, "transient: {m}"),
            BackendFailure::Permanent(m) => write!(f, "permanent: {m}"),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn invoke(&self, call: &ChatCall<'_>) -> Result<ChatReply, BackendFailure>;
}

/// Token-bucket rate limiter; `requests_per_minute == 0` means unlimited.
pub struct RateLimiter {
    per_minute: u32,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32) -> Self {
        RateLimiter {
            per_minute: requests_per_minute,
            state: Mutex::new((requests_per_minute as f64, Instant::now())),
        }
    }

    /// Block until a request token is available.
    pub fn acquire(&self) {
        if self.per_minute == 0 {
            return;
        }
        let refill_per_sec = self.per_minute as f64 / 60.0;
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * refill_per_sec).min(self.per_minute as f64);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / refill_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(1.0)));
        }
    }
}

/// Chat client speaking the common chat-completions shape: request
/// `{model, messages, temperature}`, response
/// `{choices: [{message: {content}}], usage: {prompt_tokens, completion_tokens}}`.
pub struct HttpChatBackend {
    id: String,
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(
        id: impl Into<String>,
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        HttpChatBackend {
            id: id.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("default client"),
            base_url: base_url.into(),
            model: model.into(),
            api_key,
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletionsResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn invoke(&self, call: &ChatCall<'_>) -> Result<ChatReply, BackendFailure> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": call.rendered_prompt}],
            "temperature": call.temperature,
        });
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendFailure::Transient(format!(
                "status {status}: {}",
                resp.text().unwrap_or_default()
            )));
        }
        if !status.is_success() {
            return Err(BackendFailure::Permanent(format!(
                "status {status}: {}",
                resp.text().unwrap_or_default()
            )));
        }
        let parsed: ChatCompletionsResponse = resp
            .json()
            .map_err(|e| BackendFailure::Permanent(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendFailure::Permanent("response carried no choices".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(ChatReply {
            text: choice.message.content,
            tokens_in: usage.prompt_tokens,
            tokens_out: usage.completion_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlimited_rate_limiter_never_blocks() {
        let limiter = RateLimiter::new(0);
        let start = Instant::now();
        for _ in 0..10_000 {
            limiter.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(100));
    }

    #[test]
    fn rate_limiter_throttles_burst() {
        // 600/min == 10/sec; a burst past the bucket capacity must wait.
        let limiter = RateLimiter::new(600);
        for _ in 0..600 {
            limiter.acquire();
        }
        let start = Instant::now();
        limiter.acquire();
        assert!(start.elapsed() >= Duration::from_millis(50));
    }
}
