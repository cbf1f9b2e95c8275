//! Text rendering of a case trace: thought/action/observation steps grouped
//! by iteration, with rank movement between consecutive differentials.

use std::fmt::Write as _;

use ddx_core::history::{render_turns, EndReason};
use ddx_core::metrics::rank_in;
use ddx_core::model::normalize_disease_name;
use ddx_core::trace::{CaseTrace, Payload, Step, TraceEvent};

/// Rendering options.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayOptions {
    /// Include model requests and responses.
    pub verbose: bool,
}

fn key(name: &str) -> String {
    normalize_disease_name(name).unwrap_or_default()
}

/// Movement label for each entry of `current` relative to `previous`.
pub fn ddx_moves(previous: Option<&[String]>, current: &[String]) -> Vec<String> {
    current
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let Some(prev) = previous else {
                return String::new();
            };
            match prev.iter().position(|p| key(p) == key(name)) {
                None => "new".into(),
                Some(j) if j == i => "=".into(),
                Some(j) if j > i => format!("up {}", j - i),
                Some(j) => format!("down {}", i - j),
            }
        })
        .collect()
}

fn step_label(step: Step) -> &'static str {
    match step {
        Step::Thought => "thought",
        Step::Action => "action",
        Step::Observation => "observation",
    }
}

fn end_label(r: EndReason) -> &'static str {
    match r {
        EndReason::MaxQuestions => "question budget",
        EndReason::DoctorEnded => "doctor",
        EndReason::GoalsMet => "goals met",
    }
}

fn indent(out: &mut String, text: &str, pad: &str) {
    for line in text.lines() {
        let _ = writeln!(out, "{pad}{line}");
    }
}

fn clip(text: &str, max: usize) -> String {
    let one_line = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if one_line.chars().count() <= max {
        one_line
    } else {
        let cut: String = one_line.chars().take(max).collect();
        format!("{cut}...")
    }
}

pub fn render(trace: &CaseTrace, options: ReplayOptions) -> String {
    let h = &trace.header;
    let mut out = String::new();
    let _ = writeln!(out, "Case {} ({})", h.case_id, h.dataset);
    let _ = writeln!(out, "Ground truth: {}", h.ground_truth);
    let mut iteration = None;
    let mut previous: Option<Vec<String>> = None;
    for event in &trace.events {
        if iteration != Some(event.iteration) {
            iteration = Some(event.iteration);
            let _ = writeln!(out, "\n=== Iteration {} ===", event.iteration);
        }
        render_event(&mut out, event, &mut previous, &h.ground_truth, options);
    }
    out
}

fn render_event(
    out: &mut String,
    event: &TraceEvent,
    previous: &mut Option<Vec<String>>,
    truth: &str,
    options: ReplayOptions,
) {
    let head = format!("[{}] {}", step_label(event.step), event.component);
    match &event.payload {
        Payload::Thought { text } => {
            let _ = writeln!(out, "{head}: {text}");
        }
        Payload::Dispatch {
            instruction,
            fallback,
        } => {
            let note = if *fallback {
                " (default instructions)"
            } else {
                ""
            };
            let _ = writeln!(out, "{head}: dispatch{note}");
            for (i, item) in instruction.iter().enumerate() {
                let _ = writeln!(out, "    {}. {item}", i + 1);
            }
        }
        Payload::LlmRequest {
            purpose, model_id, ..
        } => {
            if options.verbose {
                let _ = writeln!(out, "{head}: request {purpose} to {model_id}");
            }
        }
        Payload::LlmResponse {
            purpose,
            text,
            attempts,
        } => {
            if options.verbose {
                let _ = writeln!(
                    out,
                    "{head}: response {purpose} ({attempts} attempt(s)): {}",
                    clip(text, 100)
                );
            }
        }
        Payload::LlmFailure { purpose, error } => {
            let _ = writeln!(out, "!! {head}: model call {purpose} failed: {error}");
        }
        Payload::Search { source, keywords } => {
            let _ = writeln!(out, "{head}: search {source} for [{}]", keywords.join(", "));
        }
        Payload::SearchResults { documents } => {
            let _ = writeln!(out, "{head}: {} document(s)", documents.len());
            for d in documents {
                let _ = writeln!(out, "    - {} ({})", d.title, d.source_id);
            }
        }
        Payload::Dialogue {
            turns,
            ended_by,
            new_facts,
        } => {
            let doctor_turns = turns.len().div_ceil(2);
            let _ = writeln!(
                out,
                "{head}: dialogue of {doctor_turns} question(s), ended by {}, {} new fact(s)",
                end_label(*ended_by),
                new_facts.len()
            );
            indent(out, &render_turns(turns), "    ");
            for f in new_facts {
                let _ = writeln!(out, "    + {f}");
            }
        }
        Payload::Evidence {
            summary,
            cited_documents,
        } => {
            let _ = writeln!(
                out,
                "{head}: evidence citing [{}]",
                cited_documents.join(", ")
            );
            indent(out, summary, "    ");
        }
        Payload::Diagnosis {
            entries,
            dropped,
            warnings,
        } => {
            let _ = writeln!(
                out,
                "{head}: differential (truth rank {})",
                rank_in(entries, truth)
            );
            let moves = ddx_moves(previous.as_deref(), entries);
            let width = entries.iter().map(|e| e.chars().count()).max().unwrap_or(0);
            for (i, (e, m)) in entries.iter().zip(&moves).enumerate() {
                let line = format!("    {:>2}. {e:<width$}  {m}", i + 1);
                let _ = writeln!(out, "{}", line.trim_end());
            }
            if let Some(prev) = previous.as_ref() {
                for gone in prev
                    .iter()
                    .filter(|p| !entries.iter().any(|e| key(e) == key(p)))
                {
                    let _ = writeln!(out, "    out: {gone}");
                }
            }
            if !dropped.is_empty() {
                let _ = writeln!(out, "    not among the options: {}", dropped.join(", "));
            }
            for w in warnings {
                let _ = writeln!(out, "    warning: {w}");
            }
            *previous = Some(entries.clone());
        }
        Payload::StepFailed { error, .. } => {
            let _ = writeln!(out, "!! {head}: step failed: {error}");
        }
        Payload::Fallback { reason, detail } => {
            let _ = writeln!(out, "!! FALLBACK {head}: {reason}: {detail}");
        }
        Payload::Stop { reason } => {
            let _ = writeln!(out, "{head}: stop ({reason})");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn moves() {
        let prev = v(&["A", "B", "C"]);
        assert_eq!(
            ddx_moves(Some(&prev), &v(&["c", "A", "D"])),
            ["up 2", "down 1", "new"]
        );
        assert_eq!(ddx_moves(Some(&prev), &v(&["A"])), ["="]);
        assert_eq!(ddx_moves(None, &v(&["A"])), [""]);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip("a\nb", 10), "a b");
        assert_eq!(clip("abcdef", 3), "abc...");
    }
}
