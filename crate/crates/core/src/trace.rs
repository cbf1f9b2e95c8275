//! Thought/action/observation trace of one case run.
//!
//! A trace file is line-delimited JSON. The first line is a [`TraceHeader`];
//! every following line is one [`TraceEvent`] with the fields
//! `case_id, iteration, step, component, payload, wall_time`. Payloads are
//! tagged by their `type` field.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{DialogueTurn, EndReason};
use crate::llm::ChatMessage;
use crate::model::{normalize_text, Dataset};

pub const TRACE_SCHEMA: &str = "ddx-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Thought,
    Action,
    Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Driver,
    Simulator,
    Retrieval,
    Strategy,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Driver => "driver",
            Component::Simulator => "simulator",
            Component::Retrieval => "retrieval",
            Component::Strategy => "strategy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRef {
    pub source_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Thought {
        text: String,
    },
    /// The driver hands an instruction list to a component.
    Dispatch {
        instruction: Vec<String>,
        #[serde(default)]
        fallback: bool,
    },
    LlmRequest {
        purpose: String,
        model_id: String,
        system_prompt: String,
        messages: Vec<ChatMessage>,
    },
    LlmResponse {
        purpose: String,
        text: String,
        attempts: u32,
    },
    LlmFailure {
        purpose: String,
        error: String,
    },
    Search {
        source: String,
        keywords: Vec<String>,
    },
    SearchResults {
        documents: Vec<DocumentRef>,
    },
    Dialogue {
        turns: Vec<DialogueTurn>,
        ended_by: EndReason,
        new_facts: Vec<String>,
    },
    Evidence {
        summary: String,
        cited_documents: Vec<String>,
    },
    Diagnosis {
        entries: Vec<String>,
        #[serde(default)]
        dropped: Vec<String>,
        #[serde(default)]
        warnings: Vec<String>,
    },
    StepFailed {
        error: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        partial_turns: Vec<DialogueTurn>,
    },
    Fallback {
        reason: String,
        detail: String,
    },
    Stop {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub case_id: String,
    pub iteration: u32,
    pub step: Step,
    pub component: Component,
    pub payload: Payload,
    /// Milliseconds since the Unix epoch, or logical ticks under a
    /// [`LogicalClock`].
    pub wall_time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub case_id: String,
    pub dataset: Dataset,
    /// Stored for scoring only; never rendered into prompts.
    pub ground_truth: String,
}

impl TraceHeader {
    pub fn new(case_id: &str, dataset: Dataset, ground_truth: &str) -> Self {
        Self {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            case_id: case_id.into(),
            dataset,
            ground_truth: ground_truth.into(),
        }
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock: every reading advances by one tick.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

struct TraceInner {
    iteration: u32,
    events: Vec<TraceEvent>,
}

/// In-memory event recorder owned by one case run.
pub struct Trace {
    case_id: String,
    clock: Arc<dyn Clock>,
    inner: Mutex<TraceInner>,
}

impl Trace {
    pub fn new(case_id: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        Self {
            case_id: case_id.into(),
            clock,
            inner: Mutex::new(TraceInner {
                iteration: 0,
                events: Vec::new(),
            }),
        }
    }

    /// A trace on a fresh logical clock.
    pub fn logical(case_id: impl Into<String>) -> Self {
        Self::new(case_id, Arc::new(LogicalClock::default()))
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn set_iteration(&self, iteration: u32) {
        self.lock().iteration = iteration;
    }

    pub fn iteration(&self) -> u32 {
        self.lock().iteration
    }

    pub fn record(&self, step: Step, component: Component, payload: Payload) {
        let wall_time = self.clock.now_ms();
        let mut inner = self.lock();
        let iteration = inner.iteration;
        inner.events.push(TraceEvent {
            case_id: self.case_id.clone(),
            iteration,
            step,
            component,
            payload,
            wall_time,
        });
    }

    pub fn thought(&self, component: Component, text: impl Into<String>) {
        self.record(
            Step::Thought,
            component,
            Payload::Thought { text: text.into() },
        );
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.lock().events.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, TraceInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A parsed trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseTrace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

pub fn write_trace(path: &Path, header: &TraceHeader, events: &[TraceEvent]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for event in events {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a trace file. Errors name the offending 1-based line.
pub fn read_trace(path: &Path) -> Result<CaseTrace> {
    let reader = BufReader::new(File::open(path)?);
    let mut header: Option<TraceHeader> = None;
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| {
            Error::ParseFailure(format!("{}: line {line_no}: {e}", path.display()))
        };
        match &header {
            None => {
                let h: TraceHeader = serde_json::from_str(&line).map_err(bad)?;
                if h.schema != TRACE_SCHEMA || h.version != TRACE_VERSION {
                    return Err(Error::ParseFailure(format!(
                        "{}: line {line_no}: unsupported trace schema {} v{}",
                        path.display(),
                        h.schema,
                        h.version
                    )));
                }
                header = Some(h);
            }
            Some(_) => events.push(serde_json::from_str(&line).map_err(bad)?),
        }
    }
    let header = header
        .ok_or_else(|| Error::ParseFailure(format!("{}: empty trace file", path.display())))?;
    Ok(CaseTrace { header, events })
}

/// True when `term` occurs in `text` at word boundaries, after both are
/// normalized.
pub fn mentions(text: &str, term: &str) -> bool {
    let hay = normalize_text(text);
    let needle = normalize_text(term);
    if needle.is_empty() {
        return false;
    }
    let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
    hay.match_indices(&needle).any(|(i, _)| {
        boundary(hay[..i].chars().next_back()) && boundary(hay[i + needle.len()..].chars().next())
    })
}

fn request_text(system_prompt: &str, messages: &[ChatMessage]) -> String {
    let mut text = system_prompt.to_string();
    for m in messages {
        text.push('\n');
        text.push_str(&m.content);
    }
    text
}

/// Purposes whose model can see the hidden patient record.
const HIDDEN_RECORD_PURPOSES: &[&str] = &["patient"];

/// Indices of driver, simulator or retrieval prompts that mention the ground
/// truth before any model output or retrieved document surfaced it.
///
/// Diagnosis prompts are exempt: their option list contains every candidate.
/// Output from the simulated patient does not count as surfacing because
/// that model reads the hidden record.
pub fn prompt_leaks(events: &[TraceEvent], ground_truth: &str) -> Vec<usize> {
    let mut surfaced = false;
    let mut leaks = Vec::new();
    for (i, event) in events.iter().enumerate() {
        match &event.payload {
            Payload::LlmRequest {
                system_prompt,
                messages,
                ..
            } if event.component != Component::Strategy => {
                if !surfaced && mentions(&request_text(system_prompt, messages), ground_truth) {
                    leaks.push(i);
                }
            }
            Payload::LlmResponse { purpose, text, .. }
                if !HIDDEN_RECORD_PURPOSES.contains(&purpose.as_str()) =>
            {
                surfaced |= mentions(text, ground_truth);
            }
            Payload::SearchResults { documents } => {
                surfaced |= documents
                    .iter()
                    .any(|d| mentions(&d.title, ground_truth) || mentions(&d.body, ground_truth));
            }
            Payload::Diagnosis { entries, .. } => {
                surfaced |= entries.iter().any(|e| mentions(e, ground_truth));
            }
            _ => {}
        }
    }
    leaks
}
