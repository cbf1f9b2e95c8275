//! A deterministic toy run in which each iteration reveals one discriminating
//! finding, so the true disease climbs the ranking.
//!
//! Sixteen toy diseases; the truth sits at option index 6. Finding A is
//! shared by options 0..=6, finding B by options 0, 1 and 6, finding C only
//! by the truth. The scripted doctor asks about A, then B, then C, one
//! question per iteration; the oracle patient answers from the hidden
//! record; the scripted strategy ranks options by matched findings, ties in
//! option order. Expected truth ranks: 7, 3, 1.

use std::sync::Arc;

use crate::error::Result;
use crate::history::END_SENTINEL;
use crate::llm::{ChatRequest, FnBackend, RetryPolicy, Rule, ScriptedBackend};
use crate::metrics::{delta_progress, rank_of_truth, RankTrajectory};
use crate::model::{Dataset, InitialInfo, PatientCase, Sex};
use crate::orchestrator::{
    Backends, Driver, DriverConfig, DriverState, IterationPolicy, PatientMode,
};
use crate::prompts::PromptSet;
use crate::retrieval::{
    Corpus, CorpusTransport, DocumentSource, Retriever, Throttle, WikiPage, WikipediaClient,
    WIKIPEDIA_API,
};
use crate::strategy::{Reasoning, StrategyAgent};
use crate::trace::{Trace, TraceEvent};

pub const TRUTH_INDEX: usize = 6;

/// Findings in the order the doctor asks about them.
pub const FINDINGS: [&str; 3] = ["persistent cough", "night sweats", "blue fingernails"];

pub fn disease_names() -> Vec<String> {
    (1..=16).map(|i| format!("Toy disease {i:02}")).collect()
}

/// Which findings each option presents with.
pub fn disease_findings(index: usize) -> Vec<&'static str> {
    let mut out = Vec::new();
    if index <= TRUTH_INDEX {
        out.push(FINDINGS[0]);
    }
    if matches!(index, 0 | 1 | TRUTH_INDEX) {
        out.push(FINDINGS[1]);
    }
    if index == TRUTH_INDEX {
        out.push(FINDINGS[2]);
    }
    out
}

pub fn case() -> PatientCase {
    let options = disease_names();
    PatientCase {
        case_id: "toy-convergence".into(),
        dataset: Dataset::DDxPlus,
        initial_info: Some(InitialInfo {
            age: Some(52),
            sex: Some(Sex::F),
            chief_complaint: None,
        }),
        full_profile: FINDINGS.iter().map(|f| format!("I have {f}")).collect(),
        ground_truth: options[TRUTH_INDEX].clone(),
        diagnosis_options: options,
        ground_truth_ddx: None,
    }
}

fn section<'a>(text: &'a str, heading: &str) -> &'a str {
    text.split_once(heading)
        .map(|(_, rest)| rest.split("\n\n").next().unwrap_or(""))
        .unwrap_or("")
}

/// Asks about the first finding not yet in the known profile, then ends.
fn doctor(req: &ChatRequest) -> Result<String> {
    let prompt = req.last_user_message().unwrap_or_default().to_lowercase();
    let known = section(&prompt, "initial patient information:\n");
    let history = section(&prompt, "dialogue history:\n");
    if history.contains("doctor:") {
        return Ok(END_SENTINEL.into());
    }
    Ok(FINDINGS
        .iter()
        .find(|f| !known.contains(*f))
        .map_or(END_SENTINEL.to_string(), |f| format!("Do you have {f}?")))
}

/// Ranks the listed options by how many of their findings the profile shows.
fn strategist(req: &ChatRequest) -> Result<String> {
    let prompt = req.last_user_message().unwrap_or_default();
    let profile = section(prompt, "Patient profile:\n").to_lowercase();
    let options: Vec<&str> = section(prompt, "Diagnosis Options:\n")
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .collect();
    let names = disease_names();
    let mut scored: Vec<(usize, usize, &str)> = options
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let matched = names.iter().position(|n| n == o).map_or(0, |idx| {
                disease_findings(idx)
                    .iter()
                    .filter(|f| profile.contains(*f))
                    .count()
            });
            (matched, i, *o)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .iter()
        .take(10)
        .enumerate()
        .map(|(i, (_, _, o))| format!("{}. {o}", i + 1))
        .collect::<Vec<_>>()
        .join("\n"))
}

pub struct ScenarioOutcome {
    pub state: DriverState,
    pub events: Vec<TraceEvent>,
    pub ranks: Vec<u32>,
    pub delta_progress: f64,
}

/// Run the scenario for `iterations` fixed iterations.
pub fn run(iterations: u32) -> Result<ScenarioOutcome> {
    let driver_llm = ScriptedBackend::new("scenario-driver", "1. Review the known findings.");
    let doctor_llm = FnBackend::new("scenario-doctor", doctor);
    let retrieval_llm = ScriptedBackend::new("scenario-retrieval", "")
        .rule(Rule::contains("Keyword searches list:", ["[fingernail]"]))
        .rule(Rule::contains(
            "Search results:",
            ["Bluish fingernails can reflect low blood oxygen [Cyanosis]."],
        ));
    let strategy_llm = FnBackend::new("scenario-strategy", strategist);
    let backends = Backends {
        driver: &driver_llm,
        doctor: &doctor_llm,
        patient: &driver_llm,
        retrieval: &retrieval_llm,
        strategy: &strategy_llm,
    };
    let corpus = Corpus {
        wikipedia: vec![WikiPage {
            title: "Cyanosis".into(),
            extract: "Cyanosis is a bluish discoloration of the skin and fingernails.".into(),
        }],
        pubmed: Vec::new(),
    };
    let wiki: Arc<dyn DocumentSource> = Arc::new(WikipediaClient::new(
        WIKIPEDIA_API,
        Arc::new(CorpusTransport::new(corpus)),
        RetryPolicy::no_delay(1),
        Arc::new(Throttle::unlimited()),
    ));
    let retriever = Retriever {
        wikipedia: Some(wiki),
        pubmed: None,
        top_k: 3,
    };
    let config = DriverConfig {
        policy: IterationPolicy {
            max_iterations: iterations,
            ..IterationPolicy::default()
        },
        patient: PatientMode::Oracle,
        ..DriverConfig::default()
    };
    let prompts = PromptSet::default();
    let strategy = StrategyAgent::zero_shot(Reasoning::Standard, 10);
    let c = case();
    let trace = Trace::logical(c.case_id.clone());
    let driver = Driver {
        config: &config,
        prompts: &prompts,
        backends,
        retriever: &retriever,
        strategy: &strategy,
        trace: &trace,
    };
    let state = driver.run_case(c)?;
    let ranks: Vec<u32> = state
        .ddx_history
        .iter()
        .map(|d| rank_of_truth(d, &state.case.ground_truth))
        .collect();
    let delta = delta_progress::<f64>(&[RankTrajectory::new(
        state.case.case_id.clone(),
        ranks.clone(),
    )?])?;
    Ok(ScenarioOutcome {
        state,
        events: trace.events(),
        ranks,
        delta_progress: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::prompt_leaks;

    #[test]
    fn truth_climbs_each_iteration() {
        let out = run(3).unwrap();
        assert_eq!(out.ranks, [7, 3, 1]);
        assert_eq!(out.delta_progress, 3.0);
        assert_eq!(out.state.profile.len(), 2 + 3);
        assert!(prompt_leaks(&out.events, &out.state.case.ground_truth).is_empty());
    }

    #[test]
    fn single_iteration_has_no_progress() {
        let out = run(1).unwrap();
        assert_eq!(out.ranks, [7]);
        assert_eq!(out.delta_progress, 0.0);
    }
}
