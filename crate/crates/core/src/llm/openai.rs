//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::llm::{GenerationParams, LlmBackend, LlmError, Message};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Only ever read from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: default_timeout(),
        }
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ChatRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub presence_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ChatResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Choice {
    pub message: ResponseMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ResponseMessage {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal: Option<String>,
}

pub(crate) fn to_wire(messages: &[Message]) -> Vec<WireMessage> {
    messages
        .iter()
        .map(|m| WireMessage {
            role: m.role.as_str().to_string(),
            content: m.content.clone(),
        })
        .collect()
}

pub struct OpenAiCompatible {
    config: EndpointConfig,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

enum Attempt {
    Retryable(LlmError),
    Fatal(LlmError),
}

impl OpenAiCompatible {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            retry: RetryPolicy::default(),
            agent,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn request(&self, messages: &[Message], params: &GenerationParams) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages: to_wire(messages),
            temperature: Some(params.temperature),
            top_p: Some(params.top_p),
            frequency_penalty: Some(params.frequency_penalty),
            presence_penalty: Some(params.presence_penalty),
            seed: params.seed,
            max_tokens: params.max_tokens,
        }
    }

    fn attempt(&self, body: &ChatRequest) -> Result<String, Attempt> {
        let mut request = self.agent.post(&self.config.chat_url());
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Attempt::Retryable(LlmError::Transport(e.to_string())))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retryable(LlmError::Transport(e.to_string())))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => {
                return Err(Attempt::Retryable(LlmError::Transport(format!(
                    "HTTP {status}: {text}"
                ))))
            }
            _ if text.contains("context_length_exceeded") => {
                return Err(Attempt::Fatal(LlmError::ContextOverflow(text)))
            }
            _ => {
                return Err(Attempt::Fatal(LlmError::BackendRefusal(format!(
                    "HTTP {status}: {text}"
                ))))
            }
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(LlmError::Transport(format!("malformed response: {e}"))))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Fatal(LlmError::Transport("response without choices".into())))?;
        if let Some(refusal) = choice.message.refusal {
            return Err(Attempt::Fatal(LlmError::BackendRefusal(refusal)));
        }
        match choice.finish_reason.as_deref() {
            Some("content_filter") => Err(Attempt::Fatal(LlmError::BackendRefusal(
                "content filter".into(),
            ))),
            Some("length") if choice.message.content.as_deref().unwrap_or("").is_empty() => Err(
                Attempt::Fatal(LlmError::ContextOverflow("no room left to answer".into())),
            ),
            _ => Ok(choice.message.content.unwrap_or_default()),
        }
    }
}

impl LlmBackend for OpenAiCompatible {
    fn name(&self) -> String {
        self.config.model.clone()
    }

    fn chat(&mut self, messages: &[Message], params: &GenerationParams) -> Result<String, LlmError> {
        let body = self.request(messages, params);
        let attempts = self.retry.attempts.max(1);
        let mut last = LlmError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retryable(err)) => {
                    tracing::warn!(attempt = attempt + 1, error = %err, "chat request failed");
                    last = err;
                    if attempt + 1 < attempts {
                        let delay = self.retry.base_delay_ms.saturating_mul(1 << attempt);
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// One-shot HTTP server answering `responses` in order, recording request bodies.
    fn canned_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
        })
        .to_string()
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 1,
        }
    }

    #[test]
    fn sends_wire_format_and_reads_reply() {
        let (url, server) = canned_server(vec![(200, ok_body("<give(banana)>"))]);
        let mut backend = OpenAiCompatible::new(EndpointConfig::new(url, "test-model"));
        let reply = backend
            .chat(
                &[Message::system("sys"), Message::user("hi")],
                &GenerationParams::default(),
            )
            .unwrap();
        assert_eq!(reply, "<give(banana)>");
        let body: serde_json::Value = serde_json::from_str(&server.join().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.2);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["frequency_penalty"], 0.0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hi");
        assert!(body.get("seed").is_none());
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, server) = canned_server(vec![
            (503, "{}".into()),
            (500, "{}".into()),
            (200, ok_body("OK")),
        ]);
        let mut backend =
            OpenAiCompatible::new(EndpointConfig::new(url, "m")).with_retry(fast_retry());
        assert_eq!(
            backend.complete("hello", &GenerationParams::default()).unwrap(),
            "OK"
        );
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, server) = canned_server(vec![(500, "{}".into()); 3]);
        let mut backend =
            OpenAiCompatible::new(EndpointConfig::new(url, "m")).with_retry(fast_retry());
        let err = backend.complete("hello", &GenerationParams::default()).unwrap_err();
        assert!(matches!(err, LlmError::Transport(_)));
        server.join().unwrap();
    }

    #[test]
    fn classifies_client_errors() {
        let (url, server) = canned_server(vec![
            (400, r#"{"error":{"code":"context_length_exceeded"}}"#.into()),
            (401, r#"{"error":"bad key"}"#.into()),
        ]);
        let mut backend =
            OpenAiCompatible::new(EndpointConfig::new(url, "m")).with_retry(fast_retry());
        let params = GenerationParams::default();
        assert!(matches!(
            backend.complete("a", &params),
            Err(LlmError::ContextOverflow(_))
        ));
        assert!(matches!(
            backend.complete("a", &params),
            Err(LlmError::BackendRefusal(_))
        ));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        drop(listener);
        let mut backend = OpenAiCompatible::new(EndpointConfig::new(url, "m")).with_retry(fast_retry());
        assert!(matches!(
            backend.complete("a", &GenerationParams::default()),
            Err(LlmError::Transport(_))
        ));
    }
}
