use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;

use super::http::{HttpTransport, RetryPolicy};
use super::{ChatBackend, ChatRequest, ChatResponse};
use crate::error::{Error, Result};

/// Client for an OpenAI-compatible `POST {base_url}/chat/completions`
/// endpoint.
///
/// Request body: `{"model", "messages": [{"role", "content"}], "temperature",
/// "max_tokens"}`, with the system prompt sent as the first message.
/// The reply text is read from `choices[0].message.content`.
pub struct OpenAiChatBackend {
    url: String,
    model_id: String,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
}

impl OpenAiChatBackend {
    pub fn new(
        base_url: &str,
        model_id: &str,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model_id: model_id.to_string(),
            api_key,
            transport,
            retry,
        }
    }

    /// Read the credential from the environment variable `api_key_env`, if
    /// one is named. A named but unset variable is a configuration error.
    pub fn from_env(
        base_url: &str,
        model_id: &str,
        api_key_env: Option<&str>,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Result<Self> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(Self::new(base_url, model_id, api_key, transport, retry))
    }

    fn body(&self, request: &ChatRequest) -> String {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        for m in &request.messages {
            messages.push(json!({"role": m.role, "content": m.content}));
        }
        json!({
            "model": self.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
        .to_string()
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiChatBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        request.validate()?;
        let body = self.body(request);
        let auth = self.api_key.as_ref().map(|k| format!("Bearer {k}"));
        let headers: Vec<(&str, &str)> = auth
            .as_deref()
            .map(|a| vec![("Authorization", a)])
            .unwrap_or_default();
        let (text, attempts) = self.retry.run(|_| {
            let raw = self
                .transport
                .post_json(&self.url, &headers, &body)?
                .into_success()?;
            let parsed: CompletionBody = serde_json::from_str(&raw)
                .map_err(|e| Error::ParseFailure(format!("chat completion body: {e}")))?;
            parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| Error::ParseFailure("chat completion has no content".into()))
        })?;
        Ok(ChatResponse { text, attempts })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::llm::{ChatMessage, ChatSettings, HttpResponse, TracedChat};
    use crate::trace::{Component, Payload, Trace};

    /// Fails the first `failures` posts with a transport error.
    struct Flaky {
        failures: u32,
        posts: Mutex<Vec<String>>,
    }

    impl HttpTransport for Flaky {
        fn get(&self, _: &str, _: &[(&str, &str)]) -> Result<HttpResponse> {
            unreachable!()
        }

        fn post_json(
            &self,
            url: &str,
            headers: &[(&str, &str)],
            body: &str,
        ) -> Result<HttpResponse> {
            let mut posts = self.posts.lock().unwrap();
            posts.push(body.to_string());
            assert!(url.ends_with("/v1/chat/completions"));
            assert_eq!(headers, [("Authorization", "Bearer k")]);
            if posts.len() as u32 <= self.failures {
                return Err(Error::Transport("connection reset".into()));
            }
            Ok(HttpResponse {
                status: 200,
                body: r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}]}"#.into(),
            })
        }
    }

    #[test]
    fn two_transient_failures_then_success() {
        let transport = Arc::new(Flaky {
            failures: 2,
            posts: Mutex::new(vec![]),
        });
        let backend = OpenAiChatBackend::new(
            "http://host/v1/",
            "gpt-test",
            Some("k".into()),
            transport.clone(),
            RetryPolicy::no_delay(4),
        );
        let trace = Trace::logical("c");
        let chat = TracedChat::new(&backend, ChatSettings::default(), &trace, Component::Driver);
        assert_eq!(chat.ask("p", "sys", "hello").unwrap(), "ok");
        let events = trace.events();
        assert!(matches!(
            &events[1].payload,
            Payload::LlmResponse { attempts: 3, text, .. } if text == "ok"
        ));
        let body: serde_json::Value =
            serde_json::from_str(&transport.posts.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hello");
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn exhausted_retries_are_transport_errors() {
        let transport = Arc::new(Flaky {
            failures: 10,
            posts: Mutex::new(vec![]),
        });
        let backend = OpenAiChatBackend::new(
            "http://host/v1",
            "m",
            Some("k".into()),
            transport.clone(),
            RetryPolicy::no_delay(3),
        );
        let req = ChatRequest {
            system_prompt: "s".into(),
            messages: vec![ChatMessage::user("u")],
            temperature: 0.0,
            max_output_tokens: 8,
            model_id: "m".into(),
        };
        assert!(matches!(backend.complete(&req), Err(Error::Transport(_))));
        assert_eq!(transport.posts.lock().unwrap().len(), 3);
    }

    #[test]
    fn missing_credential_is_config_error() {
        let err = OpenAiChatBackend::from_env(
            "http://host",
            "m",
            Some("DDX_TEST_SURELY_UNSET_KEY"),
            Arc::new(crate::llm::UreqTransport::default()),
            RetryPolicy::default(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Config(_)));
    }
}
