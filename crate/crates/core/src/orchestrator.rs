//! The driver: owns the evolving patient profile and differential history,
//! instructs each component, and runs fixed or dynamic iteration.

use std::fmt;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{
    extract_profile_facts, render_turns, run_dialogue, summarize_profile_facts, DialogueSession,
    DoctorAgent, Patient, PatientSimState,
};
use crate::llm::{ChatBackend, ChatMessage, ChatSettings, TracedChat};
use crate::model::{
    render_ranked_list, PatientCase, PatientProfile, Provenance, RankedDifferential,
};
use crate::prompts::{or_none, PromptSet};
use crate::retrieval::{EvidenceSummary, Retriever, SearchQuery, Source};
use crate::strategy::{render_evidence, DiagnosisContext, StrategyAgent};
use crate::trace::{Component, Payload, Step, Trace};

/// Longest instruction list the driver hands to a component.
pub const MAX_INSTRUCTIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationPolicy {
    pub kind: IterationKind,
    pub max_iterations: u32,
    pub questions_per_iteration: u32,
    /// Stop once two consecutive differentials are identical.
    #[serde(default)]
    pub stop_on_stable: bool,
}

impl Default for IterationPolicy {
    fn default() -> Self {
        Self {
            kind: IterationKind::Fixed,
            max_iterations: 3,
            questions_per_iteration: 5,
            stop_on_stable: false,
        }
    }
}

impl IterationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.questions_per_iteration == 0 {
            return Err(Error::Config(
                "questions_per_iteration must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Stabilized,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxIterations => "max_iterations",
            StopReason::Stabilized => "stabilized",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// How dialogue turns become profile facts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactExtraction {
    #[default]
    Rules,
    Llm,
}

/// Where component instructions come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionMode {
    /// The driver model writes them.
    #[default]
    Llm,
    /// Fixed default lists; no driver model calls.
    Defaults,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatientMode {
    #[default]
    Llm,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverConfig {
    pub policy: IterationPolicy,
    pub retrieval_source: Source,
    pub instructions: InstructionMode,
    pub fact_extraction: FactExtraction,
    pub patient: PatientMode,
    pub chat: ChatSettings,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            policy: IterationPolicy::default(),
            retrieval_source: Source::Wikipedia,
            instructions: InstructionMode::Llm,
            fact_extraction: FactExtraction::Rules,
            patient: PatientMode::Llm,
            chat: ChatSettings::default(),
        }
    }
}

/// Everything the driver knows about one case run.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverState {
    /// The ground truth inside is used for scoring only.
    pub case: PatientCase,
    pub profile: PatientProfile,
    pub ddx_history: Vec<RankedDifferential>,
    pub evidence_cache: Vec<EvidenceSummary>,
    pub dialogue_log: Vec<DialogueSession>,
    pub iteration: u32,
}

impl DriverState {
    /// The profile starts from the initial information only.
    pub fn new(case: PatientCase) -> Self {
        Self {
            profile: PatientProfile::from_initial(case.initial_info.as_ref()),
            case,
            ddx_history: Vec::new(),
            evidence_cache: Vec::new(),
            dialogue_log: Vec::new(),
            iteration: 0,
        }
    }

    fn dialogue_text(&self) -> String {
        self.dialogue_log
            .iter()
            .map(|s| render_turns(&s.turns))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn previous_ddx_text(&self) -> String {
        self.ddx_history
            .iter()
            .filter_map(|d| {
                render_ranked_list(d)
                    .ok()
                    .map(|l| format!("Iteration {}:\n{l}", d.produced_at_iteration))
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn initial_text(&self) -> String {
        self.case
            .initial_info
            .as_ref()
            .map(|i| i.render())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInstruction {
    pub target: Component,
    pub items: Vec<String>,
    pub fallback: bool,
}

/// Append the facts not already in the profile; returns how many were added.
pub fn merge_facts<S: AsRef<str>>(
    profile: &mut PatientProfile,
    facts: &[S],
    source: Provenance,
) -> usize {
    profile.merge(facts.iter().map(AsRef::as_ref), source)
}

pub fn check_stop(state: &DriverState, policy: &IterationPolicy) -> StopDecision {
    if state.iteration >= policy.max_iterations {
        return StopDecision::Stop(StopReason::MaxIterations);
    }
    if policy.stop_on_stable {
        if let [.., a, b] = state.ddx_history.as_slice() {
            if a.same_entries(b) {
                return StopDecision::Stop(StopReason::Stabilized);
            }
        }
    }
    StopDecision::Continue
}

fn agent_description(target: Component) -> (&'static str, &'static str) {
    match target {
        Component::Simulator => (
            "A history taking simulator. A doctor asks the patient questions to collect symptoms and antecedents that are not yet known.",
            "Optional. A list of conversation goals: the topics or questions the doctor should cover next, given what is already known and which diseases remain plausible.",
        ),
        Component::Retrieval => (
            "A knowledge retrieval agent. It turns a search request into keyword searches on a medical source and summarizes what it finds.",
            "Mandatory. A list of search requests about the diseases and findings that would best help narrow down the differential diagnosis.",
        ),
        Component::Strategy => (
            "A diagnosis strategy agent. It produces a ranked differential diagnosis from the patient profile, the retrieved evidence and the previous differentials.",
            "Optional. A list of diagnosis instructions: which findings to weigh, which diseases to compare, and what the evidence implies.",
        ),
        Component::Driver => ("", ""),
    }
}

fn default_instructions(state: &DriverState, target: Component) -> Vec<String> {
    match target {
        Component::Simulator => vec![
            "Ask about the onset, duration and severity of the main complaint.".into(),
            "Ask about associated symptoms.".into(),
            "Ask about relevant medical history and antecedents.".into(),
            "Ask about medications, exposures and recent travel.".into(),
        ],
        Component::Retrieval => {
            let facts: Vec<&str> = state
                .profile
                .facts()
                .iter()
                .rev()
                .take(3)
                .map(|f| f.text.as_str())
                .collect();
            if facts.is_empty() {
                vec!["Find common diseases and how to tell them apart.".into()]
            } else {
                vec![format!(
                    "Find diseases that present with: {}",
                    facts.join("; ")
                )]
            }
        }
        Component::Strategy | Component::Driver => vec![
            "Rank the diagnosis options that best explain the patient profile.".into(),
            "Weigh the findings from the dialogue and the retrieved evidence.".into(),
        ],
    }
}

fn instruction_line() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.)]|[-*])\s+(.*\S)\s*$").expect("valid regex"))
}

/// Numbered or bulleted lines, at most [`MAX_INSTRUCTIONS`].
pub fn parse_instruction_list(text: &str) -> Result<Vec<String>> {
    let items: Vec<String> = text
        .lines()
        .filter_map(|l| instruction_line().captures(l))
        .map(|c| c[1].trim().to_string())
        .take(MAX_INSTRUCTIONS)
        .collect();
    if items.is_empty() {
        return Err(Error::ParseFailure("no instruction lines".into()));
    }
    Ok(items)
}

/// The chat backend for each role.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub driver: &'a dyn ChatBackend,
    pub doctor: &'a dyn ChatBackend,
    pub patient: &'a dyn ChatBackend,
    pub retrieval: &'a dyn ChatBackend,
    pub strategy: &'a dyn ChatBackend,
}

impl<'a> Backends<'a> {
    pub fn all(backend: &'a dyn ChatBackend) -> Self {
        Self {
            driver: backend,
            doctor: backend,
            patient: backend,
            retrieval: backend,
            strategy: backend,
        }
    }
}

/// Owned backends for each role.
#[derive(Clone)]
pub struct RoleBackends {
    pub driver: Arc<dyn ChatBackend>,
    pub doctor: Arc<dyn ChatBackend>,
    pub patient: Arc<dyn ChatBackend>,
    pub retrieval: Arc<dyn ChatBackend>,
    pub strategy: Arc<dyn ChatBackend>,
}

impl RoleBackends {
    pub fn all(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            driver: backend.clone(),
            doctor: backend.clone(),
            patient: backend.clone(),
            retrieval: backend.clone(),
            strategy: backend,
        }
    }

    pub fn borrow(&self) -> Backends<'_> {
        Backends {
            driver: self.driver.as_ref(),
            doctor: self.doctor.as_ref(),
            patient: self.patient.as_ref(),
            retrieval: self.retrieval.as_ref(),
            strategy: self.strategy.as_ref(),
        }
    }

    /// Model id per role, for manifests.
    pub fn model_ids(&self) -> [(&'static str, String); 5] {
        [
            ("driver", self.driver.model_id().to_string()),
            ("doctor", self.doctor.model_id().to_string()),
            ("patient", self.patient.model_id().to_string()),
            ("retrieval", self.retrieval.model_id().to_string()),
            ("strategy", self.strategy.model_id().to_string()),
        ]
    }
}

const CHOICES: [(&str, Component); 3] = [
    ("HISTORY_TAKING", Component::Simulator),
    ("KNOWLEDGE_RETRIEVAL", Component::Retrieval),
    ("DIAGNOSIS_STRATEGY", Component::Strategy),
];

fn choice_name(c: Component) -> &'static str {
    CHOICES
        .iter()
        .find(|(_, comp)| *comp == c)
        .map_or("DRIVER", |(n, _)| n)
}

/// The component named on the last `Next component:` line, or on a last
/// line consisting of the bare name.
pub fn parse_component_choice(text: &str) -> Result<Component> {
    let Some(line) = text.lines().rev().map(str::trim).find(|l| !l.is_empty()) else {
        return Err(Error::ParseFailure("empty component choice".into()));
    };
    let upper = line.to_uppercase();
    let tail = upper
        .rfind("NEXT COMPONENT:")
        .map(|i| upper[i + "NEXT COMPONENT:".len()..].trim().to_string());
    let candidate = tail.unwrap_or_else(|| upper.clone());
    let candidate = candidate.trim_matches(|c: char| !c.is_ascii_alphanumeric() && c != '_');
    match CHOICES.iter().find(|(n, _)| *n == candidate) {
        Some((_, c)) => Ok(*c),
        None => Err(Error::ParseFailure(format!(
            "unrecognized component choice {line:?}"
        ))),
    }
}

fn fixed_successor(last: Option<Component>) -> Component {
    match last {
        None | Some(Component::Strategy) | Some(Component::Driver) => Component::Simulator,
        Some(Component::Simulator) => Component::Retrieval,
        Some(Component::Retrieval) => Component::Strategy,
    }
}

/// One case run's collaborators.
pub struct Driver<'a> {
    pub config: &'a DriverConfig,
    pub prompts: &'a PromptSet,
    pub backends: Backends<'a>,
    pub retriever: &'a Retriever,
    pub strategy: &'a StrategyAgent<f64>,
    pub trace: &'a Trace,
}

impl<'a> Driver<'a> {
    fn chat(&self, backend: &'a dyn ChatBackend, component: Component) -> TracedChat<'a> {
        TracedChat::new(backend, self.config.chat, self.trace, component)
    }

    /// Run the case under the configured policy. Fails only when no
    /// differential was produced at all.
    pub fn run_case(&self, case: PatientCase) -> Result<DriverState> {
        self.config.policy.validate()?;
        let mut state = DriverState::new(case);
        match self.config.policy.kind {
            IterationKind::Fixed => self.run_fixed_iteration(&mut state),
            IterationKind::Dynamic => self.run_dynamic_iteration(&mut state),
        }
        if state.ddx_history.is_empty() {
            return Err(Error::CaseFailure(format!(
                "case {} produced no differential",
                state.case.case_id
            )));
        }
        Ok(state)
    }

    /// Ask the driver model for a component's instruction list. Falls back to
    /// a default list after one failed re-prompt.
    pub fn build_agent_instruction(
        &self,
        state: &DriverState,
        target: Component,
    ) -> AgentInstruction {
        if self.config.instructions == InstructionMode::Defaults {
            return AgentInstruction {
                target,
                items: default_instructions(state, target),
                fallback: false,
            };
        }
        match self.request_instruction(state, target) {
            Ok(items) => AgentInstruction {
                target,
                items,
                fallback: false,
            },
            Err(e) => {
                self.trace.record(
                    Step::Observation,
                    Component::Driver,
                    Payload::Fallback {
                        reason: format!("default_{target}_instructions"),
                        detail: e.to_string(),
                    },
                );
                AgentInstruction {
                    target,
                    items: default_instructions(state, target),
                    fallback: true,
                }
            }
        }
    }

    fn request_instruction(&self, state: &DriverState, target: Component) -> Result<Vec<String>> {
        let chat = self.chat(self.backends.driver, Component::Driver);
        let max = MAX_INSTRUCTIONS.to_string();
        let system = self
            .prompts
            .driver_system
            .render(&[("MAX_INSTRUCTIONS", &max)])?;
        let (function, prompt) = agent_description(target);
        let input = self.prompts.driver_input.render(&[
            ("AGENT_FUNCTION", function),
            ("AGENT_PROMPT", prompt),
            ("INITIAL_INFO", or_none(&state.initial_text())),
            ("PATIENT_PROFILE", or_none(&state.profile.render())),
            ("DIALOGUE_HISTORY", or_none(&state.dialogue_text())),
            ("EVIDENCE", or_none(&render_evidence(&state.evidence_cache))),
            ("PREVIOUS_DDX", or_none(&state.previous_ddx_text())),
        ])?;
        let purpose = format!("instruction:{target}");
        let mut messages = vec![ChatMessage::user(input)];
        let reply = chat.complete(&purpose, &system, messages.clone())?;
        match parse_instruction_list(&reply) {
            Ok(items) => Ok(items),
            Err(first) => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be parsed ({first}). Respond with a numbered list of at most {MAX_INSTRUCTIONS} instructions, one per line."
                )));
                let retry = chat.complete(&purpose, &system, messages)?;
                parse_instruction_list(&retry)
            }
        }
    }

    fn dispatch(&self, state: &DriverState, target: Component) -> AgentInstruction {
        self.trace.thought(
            Component::Driver,
            format!(
                "Iteration {}: preparing instructions for the {target} component.",
                state.iteration
            ),
        );
        let instruction = self.build_agent_instruction(state, target);
        self.trace.record(
            Step::Action,
            target,
            Payload::Dispatch {
                instruction: instruction.items.clone(),
                fallback: instruction.fallback,
            },
        );
        instruction
    }

    fn step_failed(
        &self,
        target: Component,
        error: &Error,
        partial: Vec<crate::history::DialogueTurn>,
    ) {
        self.trace.record(
            Step::Observation,
            target,
            Payload::StepFailed {
                error: error.to_string(),
                partial_turns: partial,
            },
        );
    }

    fn step_simulator(&self, state: &mut DriverState) {
        let instruction = self.dispatch(state, Component::Simulator);
        let goals = if self.config.instructions == InstructionMode::Defaults {
            None
        } else {
            Some(instruction.items)
        };
        let doctor = DoctorAgent {
            chat: self.chat(self.backends.doctor, Component::Simulator),
            prompts: self.prompts,
            dataset: state.case.dataset,
        };
        let patient = match self.config.patient {
            PatientMode::Oracle => Patient::Oracle,
            PatientMode::Llm => Patient::Llm {
                chat: self.chat(self.backends.patient, Component::Simulator),
                prompts: self.prompts,
            },
        };
        let sim_state = PatientSimState {
            full_profile: state.case.full_profile.clone(),
            initial_info: state.case.initial_info.clone(),
        };
        let session = match run_dialogue(
            &doctor,
            &patient,
            &sim_state,
            &state.profile,
            goals,
            self.config.policy.questions_per_iteration,
        ) {
            Ok(s) => s,
            Err(failure) => {
                self.step_failed(Component::Simulator, &failure.error, failure.partial.turns);
                return;
            }
        };
        let facts = match self.config.fact_extraction {
            FactExtraction::Rules => extract_profile_facts(&session),
            FactExtraction::Llm => {
                let chat = self.chat(self.backends.driver, Component::Driver);
                summarize_profile_facts(&chat, self.prompts, &session).unwrap_or_else(|e| {
                    self.trace.record(
                        Step::Observation,
                        Component::Driver,
                        Payload::Fallback {
                            reason: "rule_based_fact_extraction".into(),
                            detail: e.to_string(),
                        },
                    );
                    extract_profile_facts(&session)
                })
            }
        };
        let before = state.profile.len();
        merge_facts(&mut state.profile, &facts, Provenance::Dialogue);
        let new_facts: Vec<String> = state.profile.facts()[before..]
            .iter()
            .map(|f| f.text.clone())
            .collect();
        self.trace.record(
            Step::Observation,
            Component::Simulator,
            Payload::Dialogue {
                turns: session.turns.clone(),
                ended_by: session
                    .ended_by
                    .unwrap_or(crate::history::EndReason::MaxQuestions),
                new_facts,
            },
        );
        state.dialogue_log.push(session);
    }

    fn step_retrieval(&self, state: &mut DriverState) {
        let instruction = self.dispatch(state, Component::Retrieval);
        let query = SearchQuery {
            text: instruction.items.join("\n"),
            source: self.config.retrieval_source,
            diagnosis_options: None,
        };
        let chat = self.chat(self.backends.retrieval, Component::Retrieval);
        match self.retriever.retrieve(&chat, self.prompts, &query) {
            Ok(summary) => state.evidence_cache.push(summary),
            Err(e) => self.step_failed(Component::Retrieval, &e, Vec::new()),
        }
    }

    fn step_strategy(&self, state: &mut DriverState) {
        let instruction = self.dispatch(state, Component::Strategy);
        let instructions =
            (self.config.instructions != InstructionMode::Defaults).then_some(instruction.items);
        let chat = self.chat(self.backends.strategy, Component::Strategy);
        let ctx = DiagnosisContext {
            previous_ddx: &state.ddx_history,
            instructions: instructions.as_deref(),
            evidence: &state.evidence_cache,
        };
        let iteration = state.iteration.max(1);
        match self.strategy.run(
            &chat,
            self.prompts,
            state.case.dataset,
            &state.profile,
            &state.case.diagnosis_options,
            ctx,
            iteration,
        ) {
            Ok(d) => {
                self.trace.record(
                    Step::Observation,
                    Component::Strategy,
                    Payload::Diagnosis {
                        entries: d.ddx.entries.clone(),
                        dropped: d.dropped,
                        warnings: d.warnings,
                    },
                );
                state.ddx_history.push(d.ddx);
            }
            Err(e) => self.step_failed(Component::Strategy, &e, Vec::new()),
        }
    }

    fn run_component(&self, state: &mut DriverState, component: Component) {
        match component {
            Component::Simulator => self.step_simulator(state),
            Component::Retrieval => self.step_retrieval(state),
            Component::Strategy | Component::Driver => self.step_strategy(state),
        }
    }

    fn record_stop(&self, reason: &str) {
        self.trace.record(
            Step::Thought,
            Component::Driver,
            Payload::Stop {
                reason: reason.to_string(),
            },
        );
    }

    /// Simulator, retrieval, strategy, in that order, once per iteration.
    pub fn run_fixed_iteration(&self, state: &mut DriverState) {
        let policy = self.config.policy;
        loop {
            if let StopDecision::Stop(reason) = check_stop(state, &policy) {
                self.record_stop(&reason.to_string());
                return;
            }
            state.iteration += 1;
            self.trace.set_iteration(state.iteration);
            for component in [
                Component::Simulator,
                Component::Retrieval,
                Component::Strategy,
            ] {
                self.run_component(state, component);
            }
        }
    }

    fn choose_component(
        &self,
        state: &DriverState,
        calls: &[Component],
        remaining: u32,
    ) -> Result<Component> {
        let chat = self.chat(self.backends.driver, Component::Driver);
        let system = self.prompts.driver_chooser_system.render(&[])?;
        let history = calls
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, choice_name(*c)))
            .collect::<Vec<_>>()
            .join("\n");
        let remaining = remaining.to_string();
        let input = self.prompts.driver_chooser_input.render(&[
            ("INITIAL_INFO", or_none(&state.initial_text())),
            ("PATIENT_PROFILE", or_none(&state.profile.render())),
            ("EVIDENCE", or_none(&render_evidence(&state.evidence_cache))),
            ("PREVIOUS_DDX", or_none(&state.previous_ddx_text())),
            ("CALL_HISTORY", or_none(&history)),
            ("REMAINING_CALLS", &remaining),
        ])?;
        let mut messages = vec![ChatMessage::user(input)];
        let reply = chat.complete("choose_component", &system, messages.clone())?;
        match parse_component_choice(&reply) {
            Ok(c) => Ok(c),
            Err(first) => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be parsed ({first}). End with the line \"Next component: HISTORY_TAKING\", \"Next component: KNOWLEDGE_RETRIEVAL\" or \"Next component: DIAGNOSIS_STRATEGY\"."
                )));
                let retry = chat.complete("choose_component", &system, messages)?;
                parse_component_choice(&retry)
            }
        }
    }

    /// The driver model picks each next component, for at most
    /// `3 * max_iterations` calls. If no differential exists at the end, one
    /// final strategy call is forced.
    pub fn run_dynamic_iteration(&self, state: &mut DriverState) {
        let policy = self.config.policy;
        let budget = policy.max_iterations.saturating_mul(3);
        let mut calls: Vec<Component> = Vec::new();
        let mut stopped = None;
        while (calls.len() as u32) < budget {
            state.iteration = calls.len() as u32 / 3 + 1;
            self.trace.set_iteration(state.iteration);
            let remaining = budget - calls.len() as u32;
            let choice = match self.choose_component(state, &calls, remaining) {
                Ok(c) => c,
                Err(e) => {
                    let c = fixed_successor(calls.last().copied());
                    self.trace.record(
                        Step::Observation,
                        Component::Driver,
                        Payload::Fallback {
                            reason: "fixed_order_component".into(),
                            detail: format!("{e}; using {}", choice_name(c)),
                        },
                    );
                    c
                }
            };
            self.trace.thought(
                Component::Driver,
                format!(
                    "Calling {} ({} of {budget}).",
                    choice_name(choice),
                    calls.len() + 1
                ),
            );
            self.run_component(state, choice);
            calls.push(choice);
            if choice == Component::Strategy && policy.stop_on_stable {
                if let [.., a, b] = state.ddx_history.as_slice() {
                    if a.same_entries(b) {
                        stopped = Some(StopReason::Stabilized);
                        break;
                    }
                }
            }
        }
        if state.ddx_history.is_empty() {
            self.trace.record(
                Step::Observation,
                Component::Driver,
                Payload::Fallback {
                    reason: "forced_final_diagnosis".into(),
                    detail: format!("no differential after {} component calls", calls.len()),
                },
            );
            self.step_strategy(state);
        }
        self.record_stop(&stopped.unwrap_or(StopReason::MaxIterations).to_string());
    }
}
