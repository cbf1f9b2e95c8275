//! Runs many cases, optionally in parallel, writing one trace file per case
//! and an `index.jsonl` summary in case order.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::PatientCase;
use crate::orchestrator::{Driver, DriverConfig, RoleBackends};
use crate::prompts::PromptSet;
use crate::retrieval::Retriever;
use crate::strategy::StrategyAgent;
use crate::trace::{write_trace, Clock, LogicalClock, SystemClock, Trace, TraceHeader};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    System,
    /// Per-case tick counter; makes traces reproducible.
    Logical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub status: CaseStatus,
    pub trace_file: String,
    pub iterations: u32,
    pub final_ddx: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub results: Vec<CaseResult>,
}

impl RunOutcome {
    pub fn completed(&self) -> usize {
        self.results
            .iter()
            .filter(|r| r.status == CaseStatus::Completed)
            .count()
    }

    pub fn failed(&self) -> impl Iterator<Item = &CaseResult> {
        self.results
            .iter()
            .filter(|r| r.status == CaseStatus::Failed)
    }
}

/// File name for a case trace: the id with unsafe characters replaced.
pub fn trace_file_name(case_id: &str) -> String {
    let safe: String = case_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.jsonl")
}

/// Builds the role backends for one case.
pub type BackendFactory<'a> = dyn Fn() -> Result<RoleBackends> + Sync + 'a;

/// Shared collaborators for every case of a run. Backends come from a
/// factory so stateful scripted backends start fresh for each case.
pub struct CaseRunner<'a> {
    pub config: &'a DriverConfig,
    pub prompts: &'a PromptSet,
    pub backends: &'a BackendFactory<'a>,
    pub retriever: &'a Retriever,
    pub strategy: &'a StrategyAgent<f64>,
    pub clock: ClockKind,
}

impl CaseRunner<'_> {
    /// Run one case and write its trace. A failed case still gets a trace.
    pub fn run_one(&self, case: &PatientCase, out_dir: &Path) -> Result<CaseResult> {
        let clock: Arc<dyn Clock> = match self.clock {
            ClockKind::System => Arc::new(SystemClock),
            ClockKind::Logical => Arc::new(LogicalClock::default()),
        };
        let trace = Trace::new(case.case_id.clone(), clock);
        let roles = (self.backends)()?;
        let driver = Driver {
            config: self.config,
            prompts: self.prompts,
            backends: roles.borrow(),
            retriever: self.retriever,
            strategy: self.strategy,
            trace: &trace,
        };
        let outcome = driver.run_case(case.clone());
        let file = trace_file_name(&case.case_id);
        let header = TraceHeader::new(&case.case_id, case.dataset, &case.ground_truth);
        write_trace(&out_dir.join(&file), &header, &trace.events())?;
        Ok(match outcome {
            Ok(state) => CaseResult {
                case_id: case.case_id.clone(),
                status: CaseStatus::Completed,
                trace_file: file,
                iterations: state.iteration,
                final_ddx: state
                    .ddx_history
                    .last()
                    .map(|d| d.entries.clone())
                    .unwrap_or_default(),
                error: None,
            },
            Err(e) => CaseResult {
                case_id: case.case_id.clone(),
                status: CaseStatus::Failed,
                trace_file: file,
                iterations: trace.iteration(),
                final_ddx: Vec::new(),
                error: Some(e.to_string()),
            },
        })
    }

    /// Run every case with up to `parallelism` worker threads. Results and
    /// the index keep the input order.
    pub fn run_all(
        &self,
        cases: &[PatientCase],
        out_dir: &Path,
        parallelism: usize,
    ) -> Result<RunOutcome> {
        std::fs::create_dir_all(out_dir)?;
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<CaseResult>>>> =
            Mutex::new((0..cases.len()).map(|_| None).collect());
        let workers = parallelism.clamp(1, cases.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(case) = cases.get(i) else { break };
                    let r = self.run_one(case, out_dir);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                });
            }
        });
        let results = slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|r| r.expect("every slot is filled"))
            .collect::<Result<Vec<_>>>()?;
        write_index(&out_dir.join(INDEX_FILE), &results)?;
        Ok(RunOutcome { results })
    }
}

fn write_index(path: &Path, results: &[CaseResult]) -> Result<()> {
    let dir = path
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    for r in results {
        serde_json::to_writer(&mut tmp, r)?;
        std::io::Write::write_all(&mut tmp, b"\n")?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<CaseResult>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
