//! Chat backends: a stateful session for the coordinator and single-prompt
//! completion for the worker, over an OpenAI-compatible endpoint or a
//! deterministic in-process mock.

mod mock;
mod openai;
mod shim;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{MockBackend, MockBehavior};
pub use openai::{EndpointConfig, OpenAiCompatible, RetryPolicy};
pub use shim::MockServer;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("backend refused the request: {0}")]
    BackendRefusal(String),
    #[error("scripted trace exhausted after {0} replies")]
    TraceExhausted(usize),
    #[error("prompt is empty")]
    EmptyPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            seed: None,
            max_tokens: None,
        }
    }
}

pub trait LlmBackend: Send {
    /// Short identifier recorded in reports, e.g. `mock-oracle`.
    fn name(&self) -> String;

    /// Reply to the last user message given the whole conversation.
    fn chat(&mut self, messages: &[Message], params: &GenerationParams) -> Result<String, LlmError>;

    /// Stateless single-prompt completion.
    fn complete(&mut self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        self.chat(&[Message::user(prompt)], params)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn chat(&mut self, messages: &[Message], params: &GenerationParams) -> Result<String, LlmError> {
        (**self).chat(messages, params)
    }

    fn complete(&mut self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        (**self).complete(prompt, params)
    }
}

/// Counts calls through to an inner backend.
pub struct Audited<B> {
    inner: B,
    calls: Arc<AtomicUsize>,
}

impl<B: LlmBackend> Audited<B> {
    pub fn new(inner: B) -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (
            Self {
                inner,
                calls: calls.clone(),
            },
            calls,
        )
    }
}

impl<B: LlmBackend> LlmBackend for Audited<B> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn chat(&mut self, messages: &[Message], params: &GenerationParams) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(messages, params)
    }

    fn complete(&mut self, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, params)
    }
}

/// Character-based token estimate; exact tokenizers are out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub max_tokens: usize,
    pub chars_per_token: f64,
}

impl ContextBudget {
    pub fn new(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            chars_per_token: 4.0,
        }
    }

    pub fn estimate(&self, messages: &[Message]) -> usize {
        let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
        (chars as f64 / self.chars_per_token).ceil() as usize
    }
}

/// Coordinator conversation. History starts with the system prompt and only grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    history: Vec<Message>,
    pub params: GenerationParams,
    pub budget: Option<ContextBudget>,
}

impl ChatSession {
    pub fn new(system_prompt: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            history: vec![Message::system(system_prompt)],
            params,
            budget: None,
        }
    }

    pub fn with_budget(mut self, budget: ContextBudget) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn system_prompt(&self) -> &str {
        &self.history[0].content
    }

    pub fn history(&self) -> &[Message] {
        &self.history
    }

    /// Sends `user_text` and records both turns. Nothing is recorded on error.
    pub fn chat(&mut self, backend: &mut dyn LlmBackend, user_text: &str) -> Result<String, LlmError> {
        self.history.push(Message::user(user_text));
        if let Some(budget) = self.budget {
            let needed = budget.estimate(&self.history);
            if needed > budget.max_tokens {
                self.history.pop();
                return Err(LlmError::ContextOverflow(format!(
                    "about {needed} tokens exceeds the budget of {}",
                    budget.max_tokens
                )));
            }
        }
        match backend.chat(&self.history, &self.params) {
            Ok(reply) => {
                self.history.push(Message::assistant(reply.clone()));
                Ok(reply)
            }
            Err(err) => {
                self.history.pop();
                Err(err)
            }
        }
    }

    /// Plain-text transcript, one `### role` header per message.
    pub fn transcript(&self) -> String {
        render_transcript(&self.history)
    }
}

pub fn render_transcript(messages: &[Message]) -> String {
    let mut out = String::new();
    for message in messages {
        out.push_str("### ");
        out.push_str(message.role.as_str());
        out.push('\n');
        out.push_str(&message.content);
        out.push('\n');
    }
    out
}

/// Inverse of [`render_transcript`]; lines that look like headers inside
/// message bodies are not supported.
pub fn parse_transcript(text: &str) -> Vec<Message> {
    let mut blocks: Vec<(Role, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        let role = match line {
            "### system" => Some(Role::System),
            "### user" => Some(Role::User),
            "### assistant" => Some(Role::Assistant),
            _ => None,
        };
        match (role, blocks.last_mut()) {
            (Some(role), _) => blocks.push((role, Vec::new())),
            (None, Some((_, lines))) => lines.push(line),
            (None, None) => {}
        }
    }
    blocks
        .into_iter()
        .map(|(role, lines)| Message::new(role, lines.join("\n")))
        .collect()
}

/// Worker call: one prompt, no history.
pub fn complete(backend: &mut dyn LlmBackend, prompt: &str, params: &GenerationParams) -> Result<String, LlmError> {
    if prompt.trim().is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    backend.complete(prompt, params)
}
