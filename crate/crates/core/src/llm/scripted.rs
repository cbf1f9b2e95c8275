use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Regex(Regex),
}

impl Matcher {
    pub fn is_match(&self, text: &str) -> bool {
        match self {
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::Regex(re) => re.is_match(text),
        }
    }
}

/// Which part of the request a rule inspects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTarget {
    #[default]
    LastUser,
    System,
    /// System prompt and every message.
    Any,
}

/// A matcher with the responses it produces. Responses are returned in
/// order; the last one repeats once the list is exhausted.
#[derive(Debug, Clone)]
pub struct Rule {
    pub matcher: Matcher,
    pub target: MatchTarget,
    pub responses: Vec<String>,
}

impl Rule {
    pub fn contains<I, S>(needle: &str, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            matcher: Matcher::Substring(needle.to_string()),
            target: MatchTarget::LastUser,
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }

    pub fn regex<I, S>(pattern: &str, responses: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let re = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("invalid script regex {pattern:?}: {e}")))?;
        Ok(Self {
            matcher: Matcher::Regex(re),
            target: MatchTarget::LastUser,
            responses: responses.into_iter().map(Into::into).collect(),
        })
    }

    pub fn on(mut self, target: MatchTarget) -> Self {
        self.target = target;
        self
    }

    fn applies(&self, req: &ChatRequest) -> bool {
        match self.target {
            MatchTarget::LastUser => req
                .last_user_message()
                .is_some_and(|m| self.matcher.is_match(m)),
            MatchTarget::System => self.matcher.is_match(&req.system_prompt),
            MatchTarget::Any => {
                self.matcher.is_match(&req.system_prompt)
                    || req
                        .messages
                        .iter()
                        .any(|m| self.matcher.is_match(&m.content))
            }
        }
    }
}

/// Deterministic backend answering from an ordered rule list. The first rule
/// whose matcher fires wins; unmatched requests get `default_response`.
#[derive(Debug)]
pub struct ScriptedBackend {
    model_id: String,
    rules: Vec<Rule>,
    default_response: String,
    served: Mutex<Vec<usize>>,
}

impl ScriptedBackend {
    pub fn new(model_id: impl Into<String>, default_response: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            rules: Vec::new(),
            default_response: default_response.into(),
            served: Mutex::new(Vec::new()),
        }
    }

    pub fn rule(mut self, rule: Rule) -> Self {
        self.rules.push(rule);
        self.served
            .get_mut()
            .unwrap_or_else(|e| e.into_inner())
            .push(0);
        self
    }

    pub fn from_script(script: &ScriptFile) -> Result<Self> {
        let mut backend = Self::new(&script.model_id, &script.default_response);
        for (i, r) in script.rules.iter().enumerate() {
            let rule = match (&r.contains, &r.regex) {
                (Some(s), None) => Rule::contains(s, r.responses.clone()),
                (None, Some(p)) => Rule::regex(p, r.responses.clone())?,
                _ => {
                    return Err(Error::Config(format!(
                        "script rule {i} needs exactly one of `contains` or `regex`"
                    )))
                }
            };
            if r.responses.is_empty() {
                return Err(Error::Config(format!("script rule {i} has no responses")));
            }
            backend = backend.rule(rule.on(r.target));
        }
        Ok(backend)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let script: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_script(&script)
    }

    /// How many times each rule has fired.
    pub fn served_counts(&self) -> Vec<usize> {
        self.served
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let text = match self.rules.iter().position(|r| r.applies(request)) {
            Some(i) => {
                let mut served = self.served.lock().unwrap_or_else(|e| e.into_inner());
                let rule = &self.rules[i];
                let n = served[i];
                served[i] += 1;
                rule.responses
                    .get(n)
                    .or(rule.responses.last())
                    .cloned()
                    .unwrap_or_else(|| self.default_response.clone())
            }
            None => self.default_response.clone(),
        };
        Ok(ChatResponse { text, attempts: 1 })
    }
}

/// On-disk form of a [`ScriptedBackend`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default = "default_script_model")]
    pub model_id: String,
    #[serde(default)]
    pub default_response: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

fn default_script_model() -> String {
    "scripted".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default)]
    pub target: MatchTarget,
    pub responses: Vec<String>,
}

type ChatFn = dyn Fn(&ChatRequest) -> Result<String> + Send + Sync;

/// Backend computed by a closure.
pub struct FnBackend {
    model_id: String,
    f: Box<ChatFn>,
}

impl FnBackend {
    pub fn new<F>(model_id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static,
    {
        Self {
            model_id: model_id.into(),
            f: Box::new(f),
        }
    }
}

impl ChatBackend for FnBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (self.f)(request).map(|text| ChatResponse { text, attempts: 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(user: &str) -> ChatRequest {
        ChatRequest {
            system_prompt: "system text".into(),
            messages: vec![ChatMessage::user(user)],
            temperature: 0.0,
            max_output_tokens: 64,
            model_id: "scripted".into(),
        }
    }

    #[test]
    fn substring_regex_and_default() {
        let b = ScriptedBackend::new("s", "DEFAULT")
            .rule(Rule::contains("ranked differential", ["1. A\n2. B"]))
            .rule(Rule::regex(r"^Q\d+$", ["q"]).unwrap());
        assert_eq!(
            b.complete(&req("the ranked differential")).unwrap().text,
            "1. A\n2. B"
        );
        assert_eq!(b.complete(&req("Q12")).unwrap().text, "q");
        assert_eq!(b.complete(&req("nothing")).unwrap().text, "DEFAULT");
        assert_eq!(b.served_counts(), vec![1, 1]);
    }

    #[test]
    fn sequences_repeat_last() {
        let b = ScriptedBackend::new("s", "").rule(Rule::contains("x", ["1", "2"]));
        let got: Vec<_> = (0..4)
            .map(|_| b.complete(&req("x")).unwrap().text)
            .collect();
        assert_eq!(got, ["1", "2", "2", "2"]);
    }

    #[test]
    fn system_target() {
        let b = ScriptedBackend::new("s", "no")
            .rule(Rule::contains("system", ["yes"]).on(MatchTarget::System));
        assert_eq!(b.complete(&req("user")).unwrap().text, "yes");
    }

    #[test]
    fn identical_sequences_identical_outputs() {
        let make = || {
            ScriptedBackend::new("s", "d")
                .rule(Rule::contains("a", ["1", "2", "3"]))
                .rule(Rule::contains("b", ["x", "y"]))
        };
        let inputs = ["a", "b", "a", "c", "b", "a", "a"];
        let run = |b: ScriptedBackend| -> Vec<String> {
            inputs
                .iter()
                .map(|i| b.complete(&req(i)).unwrap().text)
                .collect()
        };
        assert_eq!(run(make()), run(make()));
    }

    #[test]
    fn script_file_round_trip() {
        let json = r#"{"default_response":"d","rules":[
            {"contains":"hello","responses":["hi"]},
            {"regex":"^bye","target":"any","responses":["later"]}]}"#;
        let script: ScriptFile = serde_json::from_str(json).unwrap();
        let b = ScriptedBackend::from_script(&script).unwrap();
        assert_eq!(b.model_id(), "scripted");
        assert_eq!(b.complete(&req("hello there")).unwrap().text, "hi");
        assert_eq!(b.complete(&req("bye now")).unwrap().text, "later");

        let bad: ScriptFile = serde_json::from_str(r#"{"rules":[{"responses":["x"]}]}"#).unwrap();
        assert!(ScriptedBackend::from_script(&bad).is_err());
    }
}
