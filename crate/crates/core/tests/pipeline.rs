use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ddx_core::ingest::{
    build_disease_set, load_ddxplus, load_icraft, load_rarebench, sample_cases,
    split_example_store, DedupMode, RareBenchSubset,
};
use ddx_core::metrics::{build_report, score_trace, trace_files};
use ddx_core::model::Dataset;
use ddx_core::trace::{prompt_leaks, read_trace, write_trace, TraceHeader};
use ddx_core::{scenario, ExactReport, Rational};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn scenario_trace_survives_disk_and_scores() {
    let outcome = scenario::run(3).unwrap();
    let case = &outcome.state.case;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(format!("{}.jsonl", case.case_id));
    let header = TraceHeader::new(&case.case_id, case.dataset, &case.ground_truth);
    write_trace(&path, &header, &outcome.events).unwrap();

    let back = read_trace(&path).unwrap();
    assert_eq!(back.events, outcome.events);
    assert!(prompt_leaks(&back.events, &back.header.ground_truth).is_empty());

    let score = score_trace(&back);
    assert_eq!(score.trajectory, outcome.ranks);
    assert!(!score.flagged);

    let report: ExactReport = build_report(&trace_files(dir.path()).unwrap(), &[1, 3, 5]).unwrap();
    assert_eq!(report.m, 1);
    assert_eq!(report.gtpa[&1], Rational::from_integer(1));
    let first = i64::from(outcome.ranks[0]);
    assert_eq!(report.delta_progress, Rational::new(first - 1, 2));
}

#[test]
fn fixtures_load_with_attached_disease_sets() {
    let f = fixtures();
    let mut all = vec![
        load_ddxplus(&f.join("ddxplus")).unwrap(),
        load_icraft(&f.join("icraft/icraft.jsonl")).unwrap(),
    ];
    for s in RareBenchSubset::ALL {
        all.push(load_rarebench(&f.join("rarebench"), s).unwrap());
    }
    for report in &mut all {
        assert!(report.skipped.len() * 10 <= report.total_records);
        let built = build_disease_set(&report.cases, DedupMode::Exact, None).unwrap();
        built.set.attach(&mut report.cases).unwrap();
        for case in &report.cases {
            case.validate().unwrap();
            assert!(case
                .diagnosis_options
                .iter()
                .any(|o| o == &case.ground_truth));
        }
    }
    let datasets: HashSet<Dataset> = all
        .iter()
        .flat_map(|r| r.cases.iter().map(|c| c.dataset))
        .collect();
    assert_eq!(datasets.len(), 3);
}

#[test]
fn sampling_is_seeded_and_pool_is_disjoint() {
    let cases = load_ddxplus(&fixtures().join("ddxplus")).unwrap().cases;
    let a = sample_cases(&cases, 4, 7).unwrap();
    let b = sample_cases(&cases, 4, 7).unwrap();
    assert_eq!(a, b);
    let ids: HashSet<String> = a.iter().map(|c| c.case_id.clone()).collect();
    assert_eq!(ids.len(), 4);
    let pool = split_example_store(&cases, &ids);
    assert_eq!(pool.len(), cases.len() - 4);
    assert!(pool.iter().all(|c| !ids.contains(&c.case_id)));
    assert!(sample_cases(&cases, cases.len() + 1, 7).is_err());
}
