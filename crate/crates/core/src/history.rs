//! Simulated history taking: a doctor agent asks, a patient simulator
//! answers from the hidden full profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{ChatMessage, TracedChat};
use crate::model::{Dataset, InitialInfo, PatientProfile};
use crate::prompts::{bullet_list, or_none, PromptSet};

/// Doctor reply that ends the dialogue.
pub const END_SENTINEL: &str = "END_CONVERSATION";
/// Doctor reply that ends the dialogue because every goal was covered.
pub const GOALS_MET_SENTINEL: &str = "END_CONVERSATION: GOALS_MET";
/// The patient's reply when the profile does not cover a question.
pub const UNKNOWN_ANSWER: &str = "I don't know.";
/// Longest goal list the doctor accepts.
pub const MAX_GOALS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Doctor,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndReason {
    MaxQuestions,
    DoctorEnded,
    GoalsMet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub turns: Vec<DialogueTurn>,
    pub max_questions: u32,
    pub goals: Option<Vec<String>>,
    pub ended_by: Option<EndReason>,
}

impl DialogueSession {
    pub fn new(max_questions: u32, goals: Option<Vec<String>>) -> Result<Self> {
        if max_questions == 0 {
            return Err(Error::InvalidArgument(
                "max_questions must be at least 1".into(),
            ));
        }
        if let Some(g) = &goals {
            if g.len() > MAX_GOALS {
                return Err(Error::InvalidArgument(format!(
                    "at most {MAX_GOALS} conversation goals, got {}",
                    g.len()
                )));
            }
        }
        Ok(Self {
            turns: Vec::new(),
            max_questions,
            goals,
            ended_by: None,
        })
    }

    pub fn doctor_turns(&self) -> u32 {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::Doctor)
            .count() as u32
    }

    pub fn budget_exhausted(&self) -> bool {
        self.doctor_turns() >= self.max_questions
    }

    /// Append a turn, enforcing strict Doctor/Patient alternation.
    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) -> Result<()> {
        let expected = match self.turns.last() {
            None
            | Some(DialogueTurn {
                speaker: Speaker::Patient,
                ..
            }) => Speaker::Doctor,
            Some(_) => Speaker::Patient,
        };
        if speaker != expected {
            return Err(Error::InvalidArgument(format!(
                "expected a {expected:?} turn, got {speaker:?}"
            )));
        }
        if speaker == Speaker::Doctor && self.budget_exhausted() {
            return Err(Error::InvalidArgument("question budget exhausted".into()));
        }
        self.turns.push(DialogueTurn {
            speaker,
            text: text.into(),
            turn_index: self.turns.len() as u32,
        });
        Ok(())
    }

    /// Completed question/answer pairs.
    pub fn qa_pairs(&self) -> Vec<(&str, &str)> {
        self.turns
            .chunks(2)
            .filter_map(|pair| match pair {
                [q, a] => Some((q.text.as_str(), a.text.as_str())),
                _ => None,
            })
            .collect()
    }

    pub fn render_history(&self) -> String {
        render_turns(&self.turns)
    }
}

pub fn render_turns(turns: &[DialogueTurn]) -> String {
    turns
        .iter()
        .map(|t| format!("{:?}: {}", t.speaker, t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DoctorMove {
    Ask(String),
    End(EndReason),
}

fn parse_doctor_reply(text: &str, have_goals: bool) -> Result<DoctorMove> {
    for line in text.lines().map(str::trim) {
        let line = line.trim_matches(|c| c == '*' || c == '`');
        if line.eq_ignore_ascii_case(GOALS_MET_SENTINEL) {
            return Ok(DoctorMove::End(if have_goals {
                EndReason::GoalsMet
            } else {
                EndReason::DoctorEnded
            }));
        }
        if line.eq_ignore_ascii_case(END_SENTINEL) {
            return Ok(DoctorMove::End(EndReason::DoctorEnded));
        }
    }
    let question = text.trim();
    let question = question
        .strip_prefix("Doctor:")
        .map(str::trim)
        .unwrap_or(question);
    if question.is_empty() {
        return Err(Error::ParseFailure("empty doctor reply".into()));
    }
    Ok(DoctorMove::Ask(question.to_string()))
}

/// The doctor role. Its chat is traced under the simulator component.
pub struct DoctorAgent<'a> {
    pub chat: TracedChat<'a>,
    pub prompts: &'a PromptSet,
    pub dataset: Dataset,
}

impl DoctorAgent<'_> {
    /// Ask the next question or signal the end of the dialogue. An
    /// unparseable reply gets one corrective re-prompt.
    pub fn next_question(
        &self,
        session: &DialogueSession,
        known_profile: &PatientProfile,
    ) -> Result<DoctorMove> {
        if session.budget_exhausted() {
            return Err(Error::InvalidArgument("question budget exhausted".into()));
        }
        let system = self
            .prompts
            .doctor_system
            .render(&[("SPECIALIST_PREFACE", self.dataset.specialist_preface())])?;
        let goals = session
            .goals
            .as_deref()
            .map(bullet_list)
            .unwrap_or_default();
        let input = self.prompts.doctor_input.render(&[
            ("INITIAL_INFO", or_none(&known_profile.render())),
            ("DIALOGUE_HISTORY", or_none(&session.render_history())),
            ("GOALS", or_none(&goals)),
        ])?;
        let have_goals = session.goals.as_ref().is_some_and(|g| !g.is_empty());
        let mut messages = vec![ChatMessage::user(input)];
        let reply = self.chat.complete("doctor", &system, messages.clone())?;
        match parse_doctor_reply(&reply, have_goals) {
            Ok(m) => Ok(m),
            Err(first) => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be used ({first}). Reply with exactly one question for the patient, or the single line {END_SENTINEL}."
                )));
                let retry = self.chat.complete("doctor", &system, messages)?;
                parse_doctor_reply(&retry, have_goals).map_err(|e| {
                    Error::Simulator(format!("doctor reply unusable after re-prompt: {e}"))
                })
            }
        }
    }
}

/// What the patient simulator knows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientSimState {
    pub full_profile: Vec<String>,
    pub initial_info: Option<InitialInfo>,
}

/// How patient answers are produced.
pub enum Patient<'a> {
    /// A chat model role-playing the patient.
    Llm {
        chat: TracedChat<'a>,
        prompts: &'a PromptSet,
    },
    /// Rule-based matcher over profile facts.
    Oracle,
}

impl Patient<'_> {
    pub fn answer(
        &self,
        question: &str,
        state: &PatientSimState,
        session: &DialogueSession,
    ) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::InvalidArgument("question is empty".into()));
        }
        match self {
            Patient::Oracle => Ok(oracle_answer(question, &state.full_profile)),
            Patient::Llm { chat, prompts } => {
                let system = prompts
                    .patient_system
                    .render(&[("PATIENT_PROFILE", &bullet_list(&state.full_profile))])?;
                let initial = state
                    .initial_info
                    .as_ref()
                    .map(InitialInfo::render)
                    .unwrap_or_default();
                // The question being answered is the last turn of the history.
                let history = render_turns(session.turns.split_last().map_or(&[], |(_, h)| h));
                let input = prompts.patient_input.render(&[
                    ("INITIAL_INFO", or_none(&initial)),
                    ("DIALOGUE_HISTORY", or_none(&history)),
                    ("QUESTION", question.trim()),
                ])?;
                let reply = chat
                    .ask("patient", &system, &input)
                    .map_err(|e| Error::Simulator(format!("patient: {e}")))?;
                let reply = reply.trim();
                let reply = reply
                    .strip_prefix("Patient:")
                    .map(str::trim)
                    .unwrap_or(reply);
                Ok(if reply.is_empty() {
                    UNKNOWN_ANSWER.to_string()
                } else {
                    reply.to_string()
                })
            }
        }
    }
}

const FRAMING_WORDS: &[&str] = &[
    "a",
    "about",
    "am",
    "an",
    "and",
    "any",
    "anything",
    "are",
    "at",
    "been",
    "can",
    "could",
    "currently",
    "describe",
    "did",
    "do",
    "does",
    "ever",
    "experience",
    "experienced",
    "experiencing",
    "feel",
    "feeling",
    "for",
    "from",
    "had",
    "has",
    "have",
    "having",
    "how",
    "i",
    "if",
    "in",
    "is",
    "it",
    "me",
    "my",
    "notice",
    "noticed",
    "of",
    "on",
    "or",
    "please",
    "recently",
    "some",
    "suffer",
    "suffered",
    "suffering",
    "tell",
    "that",
    "the",
    "there",
    "to",
    "was",
    "were",
    "what",
    "when",
    "where",
    "which",
    "with",
    "would",
    "you",
    "your",
];

const NEGATION_CUES: &[&str] = &[
    "no", "not", "never", "denies", "deny", "denied", "without", "negative", "absent", "don't",
    "doesn't", "didn't", "haven't", "hasn't", "isn't", "aren't", "none",
];

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
}

fn stem(word: &str) -> String {
    if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

fn content_words(text: &str) -> Vec<String> {
    tokens(text)
        .filter(|t| !FRAMING_WORDS.contains(&t.as_str()))
        .map(|t| stem(&t))
        .collect()
}

/// Answer strictly from the profile: the first fact containing every content
/// word of the question decides yes or no; otherwise "I don't know.".
pub fn oracle_answer(question: &str, full_profile: &[String]) -> String {
    let wanted = content_words(question);
    if wanted.is_empty() {
        return UNKNOWN_ANSWER.to_string();
    }
    for fact in full_profile {
        let words: Vec<String> = tokens(fact).map(|t| stem(&t)).collect();
        if wanted.iter().all(|w| words.contains(w)) {
            let negated = tokens(fact).any(|t| NEGATION_CUES.contains(&t.as_str()));
            let fact = fact.trim();
            return if negated {
                format!("No. {fact}")
            } else {
                format!("Yes. {fact}")
            };
        }
    }
    UNKNOWN_ANSWER.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AnswerKind {
    Yes,
    No,
    Unknown,
    Other,
}

fn classify_answer(answer: &str) -> AnswerKind {
    let lower = answer.trim().to_lowercase();
    if lower.is_empty()
        || [
            "i don't know",
            "i do not know",
            "i'm not sure",
            "i am not sure",
        ]
        .iter()
        .any(|p| lower.starts_with(p))
    {
        return AnswerKind::Unknown;
    }
    let first = lower
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .find(|w| !w.is_empty())
        .unwrap_or("");
    match first {
        "yes" | "yeah" | "yep" | "correct" | "indeed" | "affirmative" => AnswerKind::Yes,
        "no" | "nope" | "never" | "negative" => AnswerKind::No,
        _ => AnswerKind::Other,
    }
}

/// The question with leading framing words removed, e.g.
/// "Do you have a fever?" becomes "fever".
fn question_topic(question: &str) -> String {
    let trimmed = question.trim().trim_end_matches(['?', '.', '!']);
    let words: Vec<&str> = trimmed.split_whitespace().collect();
    let wh = ["how", "what", "when", "where", "which", "who", "why"];
    if words
        .first()
        .is_some_and(|w| wh.contains(&w.to_lowercase().as_str()))
    {
        return trimmed.to_string();
    }
    let start = words
        .iter()
        .position(|w| {
            let w = w
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            !FRAMING_WORDS.contains(&w.as_str())
        })
        .unwrap_or(words.len());
    let topic = words[start..].join(" ");
    if topic.is_empty() {
        trimmed.to_string()
    } else {
        topic
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// One declarative fact per informative question/answer pair:
/// `Has <topic>: yes|no`, or `<Question topic>: <answer>` for free-text
/// answers. Unknown answers yield nothing.
pub fn extract_profile_facts(session: &DialogueSession) -> Vec<String> {
    session
        .qa_pairs()
        .into_iter()
        .filter_map(|(q, a)| {
            let topic = question_topic(q);
            match classify_answer(a) {
                AnswerKind::Unknown => None,
                AnswerKind::Yes => Some(format!("Has {}: yes", topic.to_lowercase())),
                AnswerKind::No => Some(format!("Has {}: no", topic.to_lowercase())),
                AnswerKind::Other => Some(format!("{}: {}", capitalize(&topic), a.trim())),
            }
        })
        .collect()
}

/// Model-written facts, one `- fact` line each.
pub fn summarize_profile_facts(
    chat: &TracedChat<'_>,
    prompts: &PromptSet,
    session: &DialogueSession,
) -> Result<Vec<String>> {
    if session.qa_pairs().is_empty() {
        return Ok(Vec::new());
    }
    let system = prompts.fact_summary_system.render(&[])?;
    let input = prompts
        .fact_summary_input
        .render(&[("DIALOGUE_HISTORY", &session.render_history())])?;
    let reply = chat.ask("fact_summary", &system, &input)?;
    Ok(reply
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .take(session.qa_pairs().len())
        .collect())
}

/// A dialogue that stopped on an error, with the turns it had so far.
#[derive(Debug)]
pub struct DialogueFailure {
    pub error: Error,
    pub partial: DialogueSession,
}

/// Alternate doctor questions and patient answers until the budget is spent
/// or the doctor ends the conversation.
pub fn run_dialogue(
    doctor: &DoctorAgent<'_>,
    patient: &Patient<'_>,
    state: &PatientSimState,
    known_profile: &PatientProfile,
    goals: Option<Vec<String>>,
    max_questions: u32,
) -> std::result::Result<DialogueSession, DialogueFailure> {
    let mut session = match DialogueSession::new(max_questions, goals) {
        Ok(s) => s,
        Err(error) => {
            return Err(DialogueFailure {
                error,
                partial: DialogueSession {
                    turns: vec![],
                    max_questions,
                    goals: None,
                    ended_by: None,
                },
            })
        }
    };
    loop {
        if session.budget_exhausted() {
            session.ended_by = Some(EndReason::MaxQuestions);
            return Ok(session);
        }
        let step = doctor
            .next_question(&session, known_profile)
            .and_then(|m| match m {
                DoctorMove::End(reason) => Ok(Some(reason)),
                DoctorMove::Ask(q) => {
                    session.push(Speaker::Doctor, q.clone())?;
                    let answer = patient.answer(&q, state, &session)?;
                    session.push(Speaker::Patient, answer)?;
                    Ok(None)
                }
            });
        match step {
            Ok(Some(reason)) => {
                session.ended_by = Some(reason);
                return Ok(session);
            }
            Ok(None) => {}
            Err(error) => {
                let error = match error {
                    Error::Simulator(_) => error,
                    other => Error::Simulator(other.to_string()),
                };
                return Err(DialogueFailure {
                    error,
                    partial: session,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::llm::{ChatSettings, FnBackend, MatchTarget, Rule, ScriptedBackend};
    use crate::trace::{Component, Trace};

    fn profile() -> Vec<String> {
        vec![
            "I have a fever".into(),
            "I do not have chest pain".into(),
            "Has cough: yes".into(),
        ]
    }

    fn state() -> PatientSimState {
        PatientSimState {
            full_profile: profile(),
            initial_info: None,
        }
    }

    fn run(
        backend: &dyn crate::llm::ChatBackend,
        max: u32,
        goals: Option<Vec<String>>,
    ) -> DialogueSession {
        let prompts = PromptSet::default();
        let trace = Trace::logical("c");
        let chat = TracedChat::new(
            backend,
            ChatSettings::default(),
            &trace,
            Component::Simulator,
        );
        let doctor = DoctorAgent {
            chat,
            prompts: &prompts,
            dataset: Dataset::DDxPlus,
        };
        run_dialogue(
            &doctor,
            &Patient::Oracle,
            &state(),
            &PatientProfile::new(),
            goals,
            max,
        )
        .unwrap()
    }

    #[test]
    fn oracle_answers() {
        assert_eq!(
            oracle_answer("Do you have a fever?", &profile()),
            "Yes. I have a fever"
        );
        assert_eq!(
            oracle_answer("Any chest pain?", &profile()),
            "No. I do not have chest pain"
        );
        assert_eq!(oracle_answer("Do you smoke?", &profile()), UNKNOWN_ANSWER);
        assert_eq!(
            oracle_answer("Do you have coughs?", &profile()),
            "Yes. Has cough: yes"
        );
    }

    #[test]
    fn empty_question_rejected() {
        let s = DialogueSession::new(1, None).unwrap();
        assert!(Patient::Oracle.answer("  ", &state(), &s).is_err());
    }

    #[test]
    fn scripted_question_is_asked() {
        let b = ScriptedBackend::new("s", "Do you have a fever?");
        let s = run(&b, 1, None);
        assert_eq!(s.turns[0].text, "Do you have a fever?");
        assert_eq!(s.turns[1].text, "Yes. I have a fever");
        assert_eq!(s.ended_by, Some(EndReason::MaxQuestions));
    }

    #[test]
    fn never_ending_doctor_hits_budget() {
        let b = ScriptedBackend::new("s", "Anything else?");
        let s = run(&b, 5, None);
        assert_eq!(s.doctor_turns(), 5);
        assert_eq!(s.ended_by, Some(EndReason::MaxQuestions));
    }

    #[test]
    fn doctor_ends_after_two() {
        let b = ScriptedBackend::new("s", "").rule(Rule::contains(
            "Your next question",
            ["Q1?", "Q2?", END_SENTINEL],
        ));
        let s = run(&b, 10, None);
        assert_eq!(s.doctor_turns(), 2);
        assert_eq!(s.ended_by, Some(EndReason::DoctorEnded));
    }

    #[test]
    fn goals_met_sentinel() {
        let b = ScriptedBackend::new("s", GOALS_MET_SENTINEL);
        let s = run(&b, 5, Some(vec!["Ask about fever".into()]));
        assert_eq!(s.ended_by, Some(EndReason::GoalsMet));
        assert_eq!(s.doctor_turns(), 0);
        let s = run(&b, 5, None);
        assert_eq!(s.ended_by, Some(EndReason::DoctorEnded));
    }

    #[test]
    fn empty_reply_reprompts_then_fails() {
        let b = ScriptedBackend::new("s", "   ");
        let prompts = PromptSet::default();
        let trace = Trace::logical("c");
        let chat = TracedChat::new(&b, ChatSettings::default(), &trace, Component::Simulator);
        let doctor = DoctorAgent {
            chat,
            prompts: &prompts,
            dataset: Dataset::DDxPlus,
        };
        let err = run_dialogue(
            &doctor,
            &Patient::Oracle,
            &state(),
            &PatientProfile::new(),
            None,
            3,
        )
        .unwrap_err();
        assert!(matches!(err.error, Error::Simulator(_)));
        // two doctor requests and responses
        assert_eq!(trace.len(), 4);

        let b = ScriptedBackend::new("s", "")
            .rule(Rule::contains("Your next question", ["", "Fever?"]).on(MatchTarget::Any));
        let s = run(&b, 1, None);
        assert_eq!(s.turns[0].text, "Fever?");
    }

    #[test]
    fn patient_failure_keeps_partial_turns() {
        let prompts = PromptSet::default();
        let trace = Trace::logical("c");
        let doctor_backend = ScriptedBackend::new("s", "Q?");
        let patient_backend = FnBackend::new("p", |_| Err(Error::Transport("down".into())));
        let doctor = DoctorAgent {
            chat: TracedChat::new(
                &doctor_backend,
                ChatSettings::default(),
                &trace,
                Component::Simulator,
            ),
            prompts: &prompts,
            dataset: Dataset::DDxPlus,
        };
        let patient = Patient::Llm {
            chat: TracedChat::new(
                &patient_backend,
                ChatSettings::default(),
                &trace,
                Component::Simulator,
            ),
            prompts: &prompts,
        };
        let err =
            run_dialogue(&doctor, &patient, &state(), &PatientProfile::new(), None, 3).unwrap_err();
        assert!(matches!(err.error, Error::Simulator(_)));
        assert_eq!(err.partial.turns.len(), 1);
    }

    #[test]
    fn llm_patient_sees_profile_not_doctor() {
        let prompts = PromptSet::default();
        let trace = Trace::logical("c");
        let backend = ScriptedBackend::new("s", "Q?")
            .rule(Rule::contains("Doctor's question", ["Yes, I do."]));
        let chat = TracedChat::new(
            &backend,
            ChatSettings::default(),
            &trace,
            Component::Simulator,
        );
        let doctor = DoctorAgent {
            chat,
            prompts: &prompts,
            dataset: Dataset::DDxPlus,
        };
        let patient = Patient::Llm {
            chat,
            prompts: &prompts,
        };
        let s = run_dialogue(&doctor, &patient, &state(), &PatientProfile::new(), None, 1).unwrap();
        assert_eq!(s.turns[1].text, "Yes, I do.");
        let events = trace.events();
        let doctor_prompt = format!("{:?}", events[0].payload);
        assert!(!doctor_prompt.contains("I have a fever"));
        let patient_prompt = format!("{:?}", events[2].payload);
        assert!(patient_prompt.contains("I have a fever"));
    }

    fn session(pairs: &[(&str, &str)]) -> DialogueSession {
        let mut s = DialogueSession::new(pairs.len().max(1) as u32, None).unwrap();
        for (q, a) in pairs {
            s.push(Speaker::Doctor, *q).unwrap();
            s.push(Speaker::Patient, *a).unwrap();
        }
        s
    }

    #[test]
    fn fact_extraction_rules() {
        assert_eq!(
            extract_profile_facts(&session(&[("Do you have a fever?", "Yes")])),
            ["Has fever: yes"]
        );
        assert!(
            extract_profile_facts(&session(&[("Any chest pain?", "I don't know.")])).is_empty()
        );
        let facts = extract_profile_facts(&session(&[
            ("Do you have a fever?", "Yes. I have a fever"),
            ("Any chest pain?", "No."),
            ("Do you smoke?", "I don't know."),
        ]));
        assert_eq!(facts, ["Has fever: yes", "Has chest pain: no"]);
        assert_eq!(
            extract_profile_facts(&session(&[("How old are you?", "45")])),
            ["How old are you: 45"]
        );
    }

    #[test]
    fn alternation_enforced() {
        let mut s = DialogueSession::new(2, None).unwrap();
        assert!(s.push(Speaker::Patient, "x").is_err());
        s.push(Speaker::Doctor, "q").unwrap();
        assert!(s.push(Speaker::Doctor, "q").is_err());
        assert!(DialogueSession::new(0, None).is_err());
        assert!(DialogueSession::new(1, Some(vec!["g".into(); 11])).is_err());
    }

    proptest! {
        #[test]
        fn doctor_turns_within_budget(
            max in 1u32..8,
            script in prop::collection::vec(prop_oneof![
                Just("Any fever?".to_string()),
                Just("Any rash?".to_string()),
                Just(END_SENTINEL.to_string()),
            ], 1..12),
        ) {
            let b = ScriptedBackend::new("s", "").rule(Rule::contains("Your next question", script));
            let s = run(&b, max, None);
            prop_assert!(s.doctor_turns() <= max);
            let facts = extract_profile_facts(&s);
            prop_assert!(facts.len() <= s.qa_pairs().len());
            for (i, t) in s.turns.iter().enumerate() {
                prop_assert_eq!(t.turn_index as usize, i);
            }
        }

        #[test]
        fn oracle_never_invents(
            facts in prop::collection::vec("[a-z]{3,8}( [a-z]{3,8}){0,3}", 0..6),
            question in "[a-z]{3,8}( [a-z]{3,8}){0,3}\\?",
        ) {
            let answer = oracle_answer(&question, &facts);
            if answer != UNKNOWN_ANSWER {
                let body = answer.strip_prefix("Yes. ").or(answer.strip_prefix("No. ")).unwrap();
                prop_assert!(facts.iter().any(|f| f.trim() == body));
            }
        }
    }
}
