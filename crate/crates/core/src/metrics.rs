//! Ground-truth rank, GTPA@k, average rank and Δ-Progress, plus run reports
//! rebuilt from trace files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_text, RankedDifferential, DDX_LENGTH};
use crate::scalar::Scalar;
use crate::trace::{read_trace, CaseTrace, Payload};

/// Rank assigned when the truth is outside the top ten.
pub const RANK_CAP: u32 = DDX_LENGTH as u32 + 1;

pub const DEFAULT_K_VALUES: [u32; 3] = [1, 3, 5];

/// 1-based position of `truth` among the first ten entries, else 11.
pub fn rank_of_truth(ddx: &RankedDifferential, truth: &str) -> u32 {
    rank_in(&ddx.entries, truth)
}

pub fn rank_in(entries: &[String], truth: &str) -> u32 {
    let key = normalize_text(truth);
    entries
        .iter()
        .take(DDX_LENGTH)
        .position(|e| normalize_text(e) == key)
        .map_or(RANK_CAP, |p| p as u32 + 1)
}

/// Ground-truth ranks of one case, one per diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTrajectory {
    pub case_id: String,
    pub ranks: Vec<u32>,
}

impl RankTrajectory {
    pub fn new(case_id: impl Into<String>, ranks: Vec<u32>) -> Result<Self> {
        let case_id = case_id.into();
        if ranks.is_empty() {
            return Err(Error::Metrics(format!("case {case_id}: empty trajectory")));
        }
        if let Some(r) = ranks.iter().find(|r| !(1..=RANK_CAP).contains(*r)) {
            return Err(Error::Metrics(format!(
                "case {case_id}: rank {r} outside 1..=11"
            )));
        }
        Ok(Self { case_id, ranks })
    }

    pub fn final_rank(&self) -> u32 {
        *self.ranks.last().expect("trajectories are non-empty")
    }

    /// Mean of `r_t - r_{t+1}`; zero for a single diagnosis.
    pub fn progress<S: Scalar>(&self) -> S {
        if self.ranks.len() < 2 {
            return S::zero();
        }
        let sum = self.ranks.windows(2).fold(S::zero(), |acc, w| {
            acc + S::from_int(i64::from(w[0]) - i64::from(w[1]))
        });
        sum / S::from_count(self.ranks.len() - 1)
    }
}

fn nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Metrics(format!("{what}: no cases")));
    }
    Ok(())
}

/// Fraction of final ranks at most `k`.
pub fn gtpa_at_k<S: Scalar>(ranks: &[u32], k: u32) -> Result<S> {
    nonempty(ranks, "gtpa")?;
    if k == 0 {
        return Err(Error::Metrics("k must be at least 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(S::from_count(hits) / S::from_count(ranks.len()))
}

pub fn avg_rank<S: Scalar>(ranks: &[u32]) -> Result<S> {
    nonempty(ranks, "avg_rank")?;
    let sum = ranks.iter().fold(S::zero(), |acc, &r| {
        acc + S::from_int(i64::from(r.min(RANK_CAP)))
    });
    Ok(sum / S::from_count(ranks.len()))
}

/// Mean over cases of each case's mean rank improvement per step.
pub fn delta_progress<S: Scalar>(trajectories: &[RankTrajectory]) -> Result<S> {
    nonempty(trajectories, "delta_progress")?;
    let sum = trajectories
        .iter()
        .fold(S::zero(), |acc, t| acc + t.progress::<S>());
    Ok(sum / S::from_count(trajectories.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub final_rank: u32,
    pub trajectory: Vec<u32>,
    /// Set when the case produced no diagnosis.
    #[serde(default)]
    pub flagged: bool,
    #[serde(default)]
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<S = f64> {
    pub m: usize,
    pub gtpa: BTreeMap<u32, S>,
    pub avg_rank: S,
    pub delta_progress: S,
    pub per_case: Vec<CaseScore>,
}

impl<S: Scalar> RunReport<S> {
    pub fn from_scores(per_case: Vec<CaseScore>, k_values: &[u32]) -> Result<Self> {
        nonempty(&per_case, "report")?;
        let trajectories = per_case
            .iter()
            .map(|c| RankTrajectory::new(c.case_id.clone(), c.trajectory.clone()))
            .collect::<Result<Vec<_>>>()?;
        let finals: Vec<u32> = trajectories
            .iter()
            .map(RankTrajectory::final_rank)
            .collect();
        let gtpa = k_values
            .iter()
            .map(|&k| gtpa_at_k(&finals, k).map(|v| (k, v)))
            .collect::<Result<_>>()?;
        Ok(Self {
            m: per_case.len(),
            gtpa,
            avg_rank: avg_rank(&finals)?,
            delta_progress: delta_progress(&trajectories)?,
            per_case,
        })
    }

    pub fn flagged(&self) -> impl Iterator<Item = &CaseScore> {
        self.per_case.iter().filter(|c| c.flagged)
    }
}

/// Score one parsed trace. A case without a diagnosis gets rank 11 at every
/// iteration it reached and is flagged.
pub fn score_trace(trace: &CaseTrace) -> CaseScore {
    let truth = &trace.header.ground_truth;
    let trajectory: Vec<u32> = trace
        .events
        .iter()
        .filter_map(|e| match &e.payload {
            Payload::Diagnosis { entries, .. } => Some(rank_in(entries, truth)),
            _ => None,
        })
        .collect();
    let flagged = trajectory.is_empty();
    let trajectory = if flagged {
        let iterations = trace
            .events
            .iter()
            .map(|e| e.iteration)
            .max()
            .unwrap_or(0)
            .max(1);
        vec![RANK_CAP; iterations as usize]
    } else {
        trajectory
    };
    let wall_time_ms = match (trace.events.first(), trace.events.last()) {
        (Some(a), Some(b)) => b.wall_time.saturating_sub(a.wall_time),
        _ => 0,
    };
    CaseScore {
        case_id: trace.header.case_id.clone(),
        final_rank: *trajectory.last().expect("non-empty"),
        trajectory,
        flagged,
        wall_time_ms,
    }
}

/// Case trace files in a run directory, sorted by name.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "jsonl")
                && p.file_name().is_some_and(|n| n != "index.jsonl")
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn build_report<S: Scalar>(traces: &[PathBuf], k_values: &[u32]) -> Result<RunReport<S>> {
    let scores = traces
        .iter()
        .map(|p| {
            read_trace(p)
                .map(|t| score_trace(&t))
                .map_err(|e| Error::Metrics(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    RunReport::from_scores(scores, k_values)
}

/// Fixed-width comparison table, one row per labelled report.
pub fn render_table<S: Scalar>(rows: &[(&str, &RunReport<S>)]) -> String {
    let mut ks: Vec<u32> = rows
        .iter()
        .flat_map(|(_, r)| r.gtpa.keys().copied())
        .collect();
    ks.sort_unstable();
    ks.dedup();
    let mut header = vec!["Run".to_string(), "M".to_string()];
    header.extend(ks.iter().map(|k| format!("GTPA@{k}")));
    header.push("Avg Rank".into());
    header.push("Δ Progress".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.to_string(), r.m.to_string()];
            row.extend(ks.iter().map(|k| {
                r.gtpa
                    .get(k)
                    .map_or("-".into(), |v| format!("{:.1}%", v.to_f64() * 100.0))
            }));
            row.push(format!("{:.2}", r.avg_rank.to_f64()));
            row.push(format!("{:.2}", r.delta_progress.to_f64()));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in &body {
        line(&mut out, row);
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::Dataset;
    use crate::scalar::Rational;
    use crate::trace::{write_trace, Component, Step, Trace, TraceHeader};

    fn ddx(names: &[&str]) -> RankedDifferential {
        RankedDifferential::new(names.iter().map(|s| s.to_string()).collect(), 1).unwrap()
    }

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn rank_examples() {
        let ten: Vec<String> = (1..=10).map(|i| format!("d{i}")).collect();
        let list = RankedDifferential::new(ten, 1).unwrap();
        assert_eq!(rank_of_truth(&list, "d1"), 1);
        assert_eq!(rank_of_truth(&list, "D10 "), 10);
        assert_eq!(rank_of_truth(&list, "d11"), 11);
        let long: Vec<String> = (1..=12).map(|i| format!("d{i}")).collect();
        assert_eq!(rank_in(&long, "d11"), 11);
        assert_eq!(rank_of_truth(&ddx(&[]), "x"), 11);
    }

    #[test]
    fn gtpa_examples() {
        assert_eq!(gtpa_at_k::<Rational>(&[1, 2, 6], 1).unwrap(), q(1, 3));
        assert_eq!(gtpa_at_k::<Rational>(&[1, 2, 6], 5).unwrap(), q(2, 3));
        for k in 1..=10 {
            assert_eq!(gtpa_at_k::<f64>(&[11, 11], k).unwrap(), 0.0);
        }
        assert!(gtpa_at_k::<f64>(&[], 1).is_err());
        assert!(gtpa_at_k::<f64>(&[1], 0).is_err());
    }

    #[test]
    fn avg_rank_examples() {
        assert_eq!(avg_rank::<f64>(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(avg_rank::<f64>(&[1, 11]).unwrap(), 6.0);
        assert_eq!(avg_rank::<Rational>(&[2, 3, 5, 11]).unwrap(), q(21, 4));
        assert!(avg_rank::<f32>(&[]).is_err());
    }

    #[test]
    fn delta_progress_examples() {
        let t = |r: &[u32]| RankTrajectory::new("c", r.to_vec()).unwrap();
        assert_eq!(
            delta_progress::<Rational>(&[t(&[5, 3, 2])]).unwrap(),
            q(3, 2)
        );
        assert_eq!(delta_progress::<f64>(&[t(&[4])]).unwrap(), 0.0);
        assert_eq!(delta_progress::<f64>(&[t(&[3, 3, 3])]).unwrap(), 0.0);
        assert_eq!(
            delta_progress::<Rational>(&[t(&[5, 3, 2]), t(&[7])]).unwrap(),
            q(3, 4)
        );
        assert!(delta_progress::<f64>(&[]).is_err());
        assert!(RankTrajectory::new("c", vec![]).is_err());
        assert!(RankTrajectory::new("c", vec![0]).is_err());
        assert!(RankTrajectory::new("c", vec![12]).is_err());
    }

    fn write_case(
        dir: &Path,
        id: &str,
        truth: &str,
        lists: &[&[&str]],
        version: Option<u32>,
    ) -> PathBuf {
        let trace = Trace::logical(id);
        for (i, l) in lists.iter().enumerate() {
            trace.set_iteration(i as u32 + 1);
            trace.record(
                Step::Observation,
                Component::Strategy,
                Payload::Diagnosis {
                    entries: l.iter().map(|s| s.to_string()).collect(),
                    dropped: vec![],
                    warnings: vec![],
                },
            );
        }
        if lists.is_empty() {
            trace.set_iteration(2);
            trace.thought(Component::Driver, "nothing");
        }
        let mut header = TraceHeader::new(id, Dataset::DDxPlus, truth);
        if let Some(v) = version {
            header.version = v;
        }
        let path = dir.join(format!("{id}.jsonl"));
        write_trace(&path, &header, &trace.events()).unwrap();
        path
    }

    #[test]
    fn report_from_trace_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = vec![
            write_case(dir.path(), "a", "X", &[&["Y", "X"], &["X", "Y"]], None),
            write_case(
                dir.path(),
                "b",
                "X",
                &[&["Y", "Z", "W", "X"], &["Y", "X"], &["Y", "Z", "X"]],
                None,
            ),
            write_case(dir.path(), "c", "X", &[], None),
        ];
        std::fs::write(dir.path().join("index.jsonl"), "{}\n").unwrap();
        assert_eq!(trace_files(dir.path()).unwrap(), files);

        let r: RunReport<Rational> = build_report(&files, &[1, 3, 5]).unwrap();
        assert_eq!(r.m, 3);
        // finals 1, 3, 11
        assert_eq!(r.gtpa[&1], q(1, 3));
        assert_eq!(r.gtpa[&3], q(2, 3));
        assert_eq!(r.gtpa[&5], q(2, 3));
        assert_eq!(r.avg_rank, q(15, 3));
        // a: 1; b: ((4-2)+(2-3))/2 = 1/2; c: 0
        assert_eq!(r.delta_progress, q(1, 2));
        let flagged: Vec<_> = r.flagged().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].trajectory, [11, 11]);

        let table = render_table(&[("run", &r)]);
        assert!(table.contains("GTPA@1"));
        assert!(table.contains("33.3%"));
        assert!(table.lines().count() == 3);
    }

    #[test]
    fn schema_mismatch_is_metrics_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = write_case(dir.path(), "a", "X", &[&["X"]], Some(99));
        assert!(matches!(
            build_report::<f64>(&[f], &[1]),
            Err(Error::Metrics(_))
        ));
    }

    /// Brute force: counts by hand, telescoped progress.
    fn oracle(trajs: &[Vec<u32>], k: u32) -> (Rational, Rational, Rational) {
        let m = trajs.len() as i64;
        let mut hits = 0;
        let mut rank_sum = 0;
        let mut progress = Rational::from_integer(0);
        for t in trajs {
            let last = *t.last().unwrap();
            if last <= k {
                hits += 1;
            }
            rank_sum += i64::from(last);
            if t.len() > 1 {
                progress += Rational::new(i64::from(t[0]) - i64::from(last), t.len() as i64 - 1);
            }
        }
        (
            Rational::new(hits, m),
            Rational::new(rank_sum, m),
            progress / Rational::from_integer(m),
        )
    }

    fn trajectories() -> impl Strategy<Value = Vec<Vec<u32>>> {
        prop::collection::vec(prop::collection::vec(1u32..=11, 1..6), 1..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn metrics_match_brute_force(trajs in trajectories(), k in 1u32..=10) {
            let ts: Vec<RankTrajectory> = trajs
                .iter()
                .enumerate()
                .map(|(i, r)| RankTrajectory::new(i.to_string(), r.clone()).unwrap())
                .collect();
            let finals: Vec<u32> = trajs.iter().map(|t| *t.last().unwrap()).collect();
            let (g, a, d) = oracle(&trajs, k);
            prop_assert_eq!(gtpa_at_k::<Rational>(&finals, k).unwrap(), g);
            prop_assert_eq!(avg_rank::<Rational>(&finals).unwrap(), a);
            prop_assert_eq!(delta_progress::<Rational>(&ts).unwrap(), d);
            prop_assert!((delta_progress::<f64>(&ts).unwrap() - d.to_f64()).abs() < 1e-12);
            prop_assert!((avg_rank::<f64>(&finals).unwrap() - a.to_f64()).abs() < 1e-12);
        }

        #[test]
        fn bounds_and_monotonicity(trajs in trajectories()) {
            let ts: Vec<RankTrajectory> = trajs
                .iter()
                .map(|r| RankTrajectory::new("c", r.clone()).unwrap())
                .collect();
            let finals: Vec<u32> = ts.iter().map(RankTrajectory::final_rank).collect();
            let mut prev = Rational::from_integer(0);
            for k in 1..=11 {
                let g = gtpa_at_k::<Rational>(&finals, k).unwrap();
                prop_assert!(g >= prev && g <= Rational::from_integer(1));
                prev = g;
            }
            let a = avg_rank::<Rational>(&finals).unwrap();
            prop_assert!(a >= Rational::from_integer(1) && a <= Rational::from_integer(11));
            let d = delta_progress::<Rational>(&ts).unwrap();
            prop_assert!(d >= Rational::from_integer(-10) && d <= Rational::from_integer(10));
        }

        #[test]
        fn constant_trajectories(firsts in prop::collection::vec(1u32..=11, 1..10), n in 1usize..5) {
            let ts: Vec<RankTrajectory> = firsts
                .iter()
                .map(|&r| RankTrajectory::new("c", vec![r; n]).unwrap())
                .collect();
            let finals: Vec<u32> = ts.iter().map(RankTrajectory::final_rank).collect();
            prop_assert_eq!(delta_progress::<Rational>(&ts).unwrap(), Rational::from_integer(0));
            prop_assert_eq!(avg_rank::<Rational>(&finals).unwrap(), avg_rank::<Rational>(&firsts).unwrap());
        }
    }
}
