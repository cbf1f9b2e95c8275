//! Diagnosis strategy: zero-shot, static few-shot or dynamic few-shot
//! prompting, each optionally with chain-of-thought.

mod examples;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{ChatMessage, EmbeddingProvider, TracedChat};
use crate::model::{
    normalize_text, parse_ranked_list, render_ranked_list, Dataset, PatientProfile,
    RankedDifferential,
};
use crate::prompts::{bullet_list, or_none, PromptSet};
use crate::retrieval::EvidenceSummary;
use crate::scalar::Real;

pub use examples::{
    example_embedding_text, profile_embedding_text, ExampleStore, ReferenceExample,
    EXAMPLE_STORE_SCHEMA, EXAMPLE_STORE_VERSION,
};

/// Line after which a chain-of-thought reply gives its list.
pub const COT_MARKER: &str = "Ranked differential diagnosis:";
/// Longest instruction list the strategy accepts.
pub const MAX_INSTRUCTIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    ZeroShot,
    FewShotStatic,
    FewShotDynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reasoning {
    Standard,
    #[serde(rename = "cot")]
    CoT,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyMode {
    pub shots: Shots,
    pub reasoning: Reasoning,
    #[serde(default = "default_k")]
    pub k_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
}

fn default_k() -> usize {
    5
}

impl Default for StrategyMode {
    fn default() -> Self {
        Self {
            shots: Shots::ZeroShot,
            reasoning: Reasoning::Standard,
            k_examples: default_k(),
            embedding_model: None,
        }
    }
}

impl StrategyMode {
    pub fn validate(&self) -> Result<()> {
        if self.shots != Shots::ZeroShot && self.k_examples == 0 {
            return Err(Error::Config(
                "k_examples must be at least 1 for few-shot modes".into(),
            ));
        }
        match (self.shots, &self.embedding_model) {
            (Shots::FewShotDynamic, None) => Err(Error::Config(
                "dynamic few-shot needs an embedding_model".into(),
            )),
            (Shots::ZeroShot | Shots::FewShotStatic, Some(_)) => Err(Error::Config(
                "embedding_model is only used by dynamic few-shot".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// What the strategy sees besides the profile.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiagnosisContext<'a> {
    pub previous_ddx: &'a [RankedDifferential],
    pub instructions: Option<&'a [String]>,
    pub evidence: &'a [EvidenceSummary],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnosis {
    pub ddx: RankedDifferential,
    /// Entries removed because they are not diagnosis options.
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

fn render_examples(examples: &[&ReferenceExample], cot: bool) -> String {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut block = format!(
                "Example {}:\nPatient profile:\n{}\n",
                i + 1,
                bullet_list(&e.profile_facts())
            );
            if cot {
                if let Some(r) = &e.rationale {
                    block.push_str(&format!("Reasoning: {}\n", r.trim()));
                }
            }
            block.push_str(&format!("Diagnosis: {}", e.case.ground_truth));
            block
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_previous(previous: &[RankedDifferential]) -> String {
    previous
        .iter()
        .filter_map(|d| {
            render_ranked_list(d)
                .ok()
                .map(|list| format!("Iteration {}:\n{list}", d.produced_at_iteration))
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub(crate) fn render_evidence(evidence: &[EvidenceSummary]) -> String {
    evidence
        .iter()
        .map(|e| format!("Search: {}\n{}", e.query.text.trim(), e.text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The list part of a reply: after the last chain-of-thought marker when
/// present, else the whole text.
fn list_section(reply: &str, cot: bool) -> &str {
    if !cot {
        return reply;
    }
    let lower = reply.to_lowercase();
    match lower.rfind(&COT_MARKER.to_lowercase()) {
        Some(i) => &reply[i + COT_MARKER.len()..],
        None => reply,
    }
}

/// Build the diagnosis prompt, call the model, parse its ranked list and
/// keep only entries that are diagnosis options.
#[allow(clippy::too_many_arguments)]
pub fn diagnose(
    chat: &TracedChat<'_>,
    prompts: &PromptSet,
    dataset: Dataset,
    profile: &PatientProfile,
    options: &[String],
    reasoning: Reasoning,
    ctx: DiagnosisContext<'_>,
    examples: &[&ReferenceExample],
    ddx_length: usize,
    iteration: u32,
) -> Result<Diagnosis> {
    if options.is_empty() {
        return Err(Error::InvalidArgument("diagnosis options are empty".into()));
    }
    if ctx.instructions.is_some_and(|i| i.len() > MAX_INSTRUCTIONS) {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_INSTRUCTIONS} diagnosis instructions"
        )));
    }
    if ddx_length == 0 {
        return Err(Error::InvalidArgument(
            "ddx_length must be at least 1".into(),
        ));
    }
    let cot = reasoning == Reasoning::CoT;
    let length = ddx_length.to_string();
    let format = if cot {
        &prompts.diagnosis_cot_format
    } else {
        &prompts.diagnosis_format
    }
    .render(&[("DDX_LENGTH", &length)])?;
    let system = prompts.diagnosis_system.render(&[
        ("SPECIALIST_PREFACE", dataset.specialist_preface()),
        ("DDX_LENGTH", &length),
        ("RESPONSE_FORMAT", &format),
    ])?;
    let instructions = ctx.instructions.map(bullet_list).unwrap_or_default();
    let input = prompts.diagnosis_input.render(&[
        ("PREVIOUS_DDX", or_none(&render_previous(ctx.previous_ddx))),
        ("INSTRUCTIONS", or_none(&instructions)),
        ("EVIDENCE", or_none(&render_evidence(ctx.evidence))),
        ("PATIENT_PROFILE", or_none(&profile.render())),
        ("EXAMPLES", or_none(&render_examples(examples, cot))),
        ("DIAGNOSIS_OPTIONS", &bullet_list(options)),
    ])?;

    let mut messages = vec![ChatMessage::user(input)];
    let reply = chat.complete("diagnosis", &system, messages.clone())?;
    let parsed = match parse_ranked_list(list_section(&reply, cot), usize::MAX) {
        Ok(p) => p,
        Err(first) => {
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(format!(
                "Your reply could not be parsed ({first}). Respond with the ranked list only, one diagnosis per line, as \"1. Diagnosis\"."
            )));
            let retry = chat.complete("diagnosis", &system, messages)?;
            parse_ranked_list(list_section(&retry, cot), usize::MAX).map_err(|e| {
                Error::Strategy(format!("ranked list unusable after re-prompt: {e}"))
            })?
        }
    };

    let mut entries = Vec::new();
    let mut dropped = Vec::new();
    for entry in parsed.ddx.entries {
        let key = normalize_text(&entry);
        match options.iter().find(|o| normalize_text(o) == key) {
            Some(canonical) => entries.push(canonical.clone()),
            None => dropped.push(entry),
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyAfterFilter(dropped));
    }
    entries.truncate(ddx_length);
    Ok(Diagnosis {
        ddx: RankedDifferential::new(entries, iteration)?,
        dropped,
        warnings: parsed.warnings,
    })
}

/// A strategy mode with the resources it needs.
pub struct StrategyAgent<T: Real = f64> {
    pub mode: StrategyMode,
    pub store: Option<Arc<ExampleStore<T>>>,
    pub embedder: Option<Arc<dyn EmbeddingProvider<T>>>,
    pub ddx_length: usize,
}

impl<T: Real> StrategyAgent<T> {
    pub fn zero_shot(reasoning: Reasoning, ddx_length: usize) -> Self {
        Self {
            mode: StrategyMode {
                reasoning,
                ..StrategyMode::default()
            },
            store: None,
            embedder: None,
            ddx_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if self.mode.shots != Shots::ZeroShot && self.store.is_none() {
            return Err(Error::Config("few-shot modes need an example store".into()));
        }
        if self.mode.shots == Shots::FewShotDynamic {
            let embedder = self.embedder.as_ref().ok_or_else(|| {
                Error::Config("dynamic few-shot needs an embedding provider".into())
            })?;
            if self.mode.embedding_model.as_deref() != Some(embedder.model_id()) {
                return Err(Error::Config(format!(
                    "embedding_model {:?} does not match provider {}",
                    self.mode.embedding_model,
                    embedder.model_id()
                )));
            }
        }
        Ok(())
    }

    /// Reference examples for this profile under the configured mode.
    pub fn select_examples(&self, profile: &PatientProfile) -> Result<Vec<&ReferenceExample>> {
        let k = self.mode.k_examples;
        match self.mode.shots {
            Shots::ZeroShot => Ok(Vec::new()),
            Shots::FewShotStatic => self.store()?.select_static(k),
            Shots::FewShotDynamic => {
                let embedder = self
                    .embedder
                    .as_deref()
                    .ok_or_else(|| Error::Strategy("no embedding provider".into()))?;
                self.store()?.select_dynamic(embedder, profile, k)
            }
        }
    }

    fn store(&self) -> Result<&ExampleStore<T>> {
        self.store
            .as_deref()
            .ok_or_else(|| Error::Strategy("no example store".into()))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        chat: &TracedChat<'_>,
        prompts: &PromptSet,
        dataset: Dataset,
        profile: &PatientProfile,
        options: &[String],
        ctx: DiagnosisContext<'_>,
        iteration: u32,
    ) -> Result<Diagnosis> {
        let examples = self.select_examples(profile)?;
        diagnose(
            chat,
            prompts,
            dataset,
            profile,
            options,
            self.mode.reasoning,
            ctx,
            &examples,
            self.ddx_length,
            iteration,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatSettings, HashingEmbedder, ScriptedBackend, ScriptedEmbedder};
    use crate::model::{PatientCase, Provenance};
    use crate::trace::{Component, Payload, Trace};

    fn options() -> Vec<String> {
        [
            "Acute otitis media",
            "URTI",
            "Chagas",
            "Bronchitis",
            "Pneumonia",
        ]
        .map(String::from)
        .to_vec()
    }

    fn profile() -> PatientProfile {
        let mut p = PatientProfile::new();
        p.merge(["Age: 49", "Has fever: yes"], Provenance::Initial);
        p
    }

    fn run(reply: &str, reasoning: Reasoning) -> (Result<Diagnosis>, Trace) {
        let b = ScriptedBackend::new("s", reply);
        let t = Trace::logical("c");
        let prompts = PromptSet::default();
        let chat = TracedChat::new(&b, ChatSettings::default(), &t, Component::Strategy);
        let out = diagnose(
            &chat,
            &prompts,
            Dataset::DDxPlus,
            &profile(),
            &options(),
            reasoning,
            DiagnosisContext::default(),
            &[],
            10,
            1,
        );
        (out, t)
    }

    #[test]
    fn parses_three_entry_list() {
        let (d, _) = run(
            "1. Acute otitis media\n2. URTI\n3. Chagas",
            Reasoning::Standard,
        );
        let d = d.unwrap();
        assert_eq!(d.ddx.entries, ["Acute otitis media", "URTI", "Chagas"]);
        assert_eq!(d.ddx.produced_at_iteration, 1);
    }

    #[test]
    fn off_option_entries_dropped() {
        let (d, _) = run("1. urti\n2. Lupus\n3. Chagas", Reasoning::Standard);
        let d = d.unwrap();
        assert_eq!(d.ddx.entries, ["URTI", "Chagas"]);
        assert_eq!(d.dropped, ["Lupus"]);
        let (d, _) = run("1. Lupus\n2. Gout", Reasoning::Standard);
        assert!(matches!(d, Err(Error::EmptyAfterFilter(v)) if v.len() == 2));
    }

    #[test]
    fn unparseable_twice_is_strategy_error() {
        let (d, t) = run("I am not sure.", Reasoning::Standard);
        assert!(matches!(d, Err(Error::Strategy(_))));
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn cot_reads_after_marker() {
        let reply = "Findings:\n1. Fever suggests infection.\n2. Age is adult.\n\nRanked differential diagnosis:\n1. Pneumonia\n2. Bronchitis";
        let (d, t) = run(reply, Reasoning::CoT);
        assert_eq!(d.unwrap().ddx.entries, ["Pneumonia", "Bronchitis"]);
        match &t.events()[0].payload {
            Payload::LlmRequest { system_prompt, .. } => {
                assert!(system_prompt.contains("reason step by step"))
            }
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn prompt_contains_context() {
        let b = ScriptedBackend::new("s", "1. URTI");
        let t = Trace::logical("c");
        let prompts = PromptSet::default();
        let chat = TracedChat::new(&b, ChatSettings::default(), &t, Component::Strategy);
        let prev = RankedDifferential::new(vec!["Bronchitis".into()], 1).unwrap();
        let instructions = vec!["Consider infections".to_string()];
        let example = ReferenceExample {
            case: PatientCase {
                case_id: "e".into(),
                dataset: Dataset::DDxPlus,
                initial_info: None,
                full_profile: vec!["cough".into()],
                diagnosis_options: options(),
                ground_truth: "Bronchitis".into(),
                ground_truth_ddx: None,
            },
            rationale: Some("Cough points to bronchitis.".into()),
        };
        diagnose(
            &chat,
            &prompts,
            Dataset::DDxPlus,
            &profile(),
            &options(),
            Reasoning::CoT,
            DiagnosisContext {
                previous_ddx: std::slice::from_ref(&prev),
                instructions: Some(&instructions),
                evidence: &[],
            },
            &[&example],
            10,
            2,
        )
        .unwrap();
        let text = match &t.events()[0].payload {
            Payload::LlmRequest { messages, .. } => messages[0].content.clone(),
            p => panic!("{p:?}"),
        };
        assert!(text.contains("Iteration 1:\n1. Bronchitis"));
        assert!(text.contains("- Consider infections"));
        assert!(text.contains("Reasoning: Cough points to bronchitis.\nDiagnosis: Bronchitis"));
        assert!(text.contains("- Has fever: yes"));
        assert!(text.contains("Diagnosis Options:\n- Acute otitis media\n- URTI"));
        let too_many = vec!["x".to_string(); 11];
        let err = diagnose(
            &chat,
            &prompts,
            Dataset::DDxPlus,
            &profile(),
            &options(),
            Reasoning::Standard,
            DiagnosisContext {
                instructions: Some(&too_many),
                ..Default::default()
            },
            &[],
            10,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_shot_never_touches_store_or_embedder() {
        let embedder =
            Arc::new(ScriptedEmbedder::<f64>::new("m").with_fallback(HashingEmbedder::new(8)));
        let agent = StrategyAgent {
            mode: StrategyMode::default(),
            store: None,
            embedder: Some(embedder.clone()),
            ddx_length: 10,
        };
        assert!(agent.select_examples(&profile()).unwrap().is_empty());
        assert_eq!(embedder.calls(), 0);
    }

    #[test]
    fn mode_validation() {
        let mut m = StrategyMode {
            shots: Shots::FewShotDynamic,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        m.embedding_model = Some("bge".into());
        assert!(m.validate().is_ok());
        m.k_examples = 0;
        assert!(m.validate().is_err());
        let m: StrategyMode =
            serde_json::from_str(r#"{"shots":"few_shot_static","reasoning":"cot"}"#).unwrap();
        assert_eq!(m.k_examples, 5);
        assert_eq!(m.reasoning, Reasoning::CoT);
    }
}
