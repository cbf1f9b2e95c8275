//! Chat-completion and embedding backends.

mod embedding;
mod http;
mod live;
mod scripted;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Component, Payload, Step, Trace};

pub use embedding::{
    dot, normalize_unit, squared_l2, CachedEmbedder, EmbeddingProvider, EmbeddingVector,
    HashingEmbedder, HttpEmbeddingProvider, ScriptedEmbedder,
};
pub use http::{HttpResponse, HttpTransport, RetryPolicy, UreqTransport};
pub use live::OpenAiChatBackend;
pub use scripted::{FnBackend, MatchTarget, Matcher, Rule, ScriptFile, ScriptedBackend};

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
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::InvalidArgument(
                "chat request has no messages".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::InvalidArgument(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    /// Transport attempts used, including the successful one.
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

/// A backend bound to one component's trace. Every call records an
/// `LlmRequest` action followed by an `LlmResponse` or `LlmFailure`
/// observation.
#[derive(Clone, Copy)]
pub struct TracedChat<'a> {
    pub backend: &'a dyn ChatBackend,
    pub settings: ChatSettings,
    pub trace: &'a Trace,
    pub component: Component,
}

impl<'a> TracedChat<'a> {
    pub fn new(
        backend: &'a dyn ChatBackend,
        settings: ChatSettings,
        trace: &'a Trace,
        component: Component,
    ) -> Self {
        Self {
            backend,
            settings,
            trace,
            component,
        }
    }

    pub fn complete(
        &self,
        purpose: &str,
        system: &str,
        messages: Vec<ChatMessage>,
    ) -> Result<String> {
        let request = ChatRequest {
            system_prompt: system.to_string(),
            messages,
            temperature: self.settings.temperature,
            max_output_tokens: self.settings.max_output_tokens,
            model_id: self.backend.model_id().to_string(),
        };
        request.validate()?;
        self.trace.record(
            Step::Action,
            self.component,
            Payload::LlmRequest {
                purpose: purpose.to_string(),
                model_id: request.model_id.clone(),
                system_prompt: request.system_prompt.clone(),
                messages: request.messages.clone(),
            },
        );
        match self.backend.complete(&request) {
            Ok(resp) => {
                self.trace.record(
                    Step::Observation,
                    self.component,
                    Payload::LlmResponse {
                        purpose: purpose.to_string(),
                        text: resp.text.clone(),
                        attempts: resp.attempts,
                    },
                );
                Ok(resp.text)
            }
            Err(e) => {
                self.trace.record(
                    Step::Observation,
                    self.component,
                    Payload::LlmFailure {
                        purpose: purpose.to_string(),
                        error: e.to_string(),
                    },
                );
                Err(e)
            }
        }
    }

    /// Single-message convenience wrapper.
    pub fn ask(&self, purpose: &str, system: &str, user: &str) -> Result<String> {
        self.complete(purpose, system, vec![ChatMessage::user(user)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let mut req = ChatRequest {
            system_prompt: String::new(),
            messages: vec![],
            temperature: 0.0,
            max_output_tokens: 16,
            model_id: "m".into(),
        };
        assert!(req.validate().is_err());
        req.messages.push(ChatMessage::user("hi"));
        assert!(req.validate().is_ok());
        req.temperature = f64::NAN;
        assert!(req.validate().is_err());
        req.temperature = 0.5;
        req.max_output_tokens = 0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn traced_chat_records_pairs() {
        let backend = ScriptedBackend::new("scripted", "fallback")
            .rule(Rule::contains("ranked differential", ["1. A\n2. B"]));
        let trace = Trace::logical("c");
        let chat = TracedChat::new(
            &backend,
            ChatSettings::default(),
            &trace,
            Component::Strategy,
        );
        let out = chat
            .ask("diagnosis", "sys", "give a ranked differential")
            .unwrap();
        assert_eq!(out, "1. A\n2. B");
        let out = chat.ask("diagnosis", "sys", "something else").unwrap();
        assert_eq!(out, "fallback");
        let events = trace.events();
        assert_eq!(events.len(), 4);
        assert!(matches!(events[0].payload, Payload::LlmRequest { .. }));
        assert!(matches!(
            events[1].payload,
            Payload::LlmResponse { attempts: 1, .. }
        ));
        assert!(events.iter().all(|e| e.component == Component::Strategy));
    }

    #[test]
    fn failures_are_traced() {
        let backend = FnBackend::new("f", |_| Err(Error::Transport("down".into())));
        let trace = Trace::logical("c");
        let chat = TracedChat::new(&backend, ChatSettings::default(), &trace, Component::Driver);
        assert!(chat.ask("p", "s", "u").is_err());
        assert!(matches!(
            trace.events()[1].payload,
            Payload::LlmFailure { .. }
        ));
    }
}
