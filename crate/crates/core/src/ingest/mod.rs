//! Benchmark loading: upstream layouts to [`PatientCase`], disease-option
//! sets, seeded sampling and the example-store split.
//!
//! Expected on-disk layouts:
//!
//! * DDxPlus: a directory holding `conditions.json` (array of condition
//!   names, or an object keyed by name) and `patients.jsonl`, one object per
//!   line with `id`, `age`, `sex`, `chief_complaint`, `evidences` (rendered
//!   sentences), `pathology` and `differential_diagnosis` (`[[name, prob], ..]`).
//! * iCraft-MD: one `.jsonl` file, one object per line with `id`,
//!   `initial_info` (`age`, `sex`, `chief_complaint`), `context` (facts) and
//!   `answer`.
//! * RareBench: a directory holding `<SUBSET>.jsonl` with `Phenotype` (HPO
//!   ids) and `RareDisease` (OMIM/ORPHA ids) per line, plus
//!   `phenotype_mapping.json` and `disease_mapping.json` mapping ids to names.
//! * Unified: a JSON array of [`PatientCase`] objects.

mod adapters;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::TracedChat;
use crate::model::{normalize_text, Dataset, PatientCase};
use crate::prompts::{bullet_list, PromptSet};

pub use adapters::{load_ddxplus, load_icraft, load_rarebench};

/// Name of the sampling algorithm recorded in manifests.
pub const SAMPLER: &str = "chacha8-partial-fisher-yates-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RareBenchSubset {
    #[serde(rename = "RAMEDIS")]
    Ramedis,
    #[serde(rename = "MME")]
    Mme,
    #[serde(rename = "PUMCH")]
    Pumch,
}

impl RareBenchSubset {
    pub const ALL: [RareBenchSubset; 3] = [Self::Ramedis, Self::Mme, Self::Pumch];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ramedis => "RAMEDIS",
            Self::Mme => "MME",
            Self::Pumch => "PUMCH",
        }
    }
}

impl fmt::Display for RareBenchSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RareBenchSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown RareBench subset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub kind: Dataset,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<RareBenchSubset>,
}

impl DatasetDescriptor {
    pub fn new(
        kind: Dataset,
        path: impl Into<PathBuf>,
        subset: Option<RareBenchSubset>,
    ) -> Result<Self> {
        let d = Self {
            kind,
            path: path.into(),
            subset,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.subset) {
            (Dataset::RareBench, None) => {
                Err(Error::InvalidArgument("RareBench needs a subset".into()))
            }
            (Dataset::RareBench, Some(_)) | (_, None) => Ok(()),
            (k, Some(_)) => Err(Error::InvalidArgument(format!("{k} takes no subset"))),
        }
    }
}

/// A record the loader could not use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    /// 1-based line number in the source file.
    pub record: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub cases: Vec<PatientCase>,
    pub skipped: Vec<SkippedRecord>,
    pub total_records: usize,
}

impl IngestReport {
    /// Fails when more than a tenth of the records were skipped.
    pub(crate) fn finish(self) -> Result<Self> {
        if self.total_records == 0 {
            return Err(Error::Ingest("no records found".into()));
        }
        if self.skipped.len() * 10 > self.total_records {
            return Err(Error::SchemaDrift {
                skipped: self.skipped.len(),
                total: self.total_records,
            });
        }
        Ok(self)
    }
}

pub fn load_dataset(desc: &DatasetDescriptor) -> Result<IngestReport> {
    desc.validate()?;
    match (desc.kind, desc.subset) {
        (Dataset::DDxPlus, _) => load_ddxplus(&desc.path),
        (Dataset::ICraftMD, _) => load_icraft(&desc.path),
        (Dataset::RareBench, Some(subset)) => load_rarebench(&desc.path, subset),
        (Dataset::RareBench, None) => unreachable!("validated above"),
    }
}

/// Sorted, duplicate-free disease names. Each entry keeps the first spelling
/// seen for its normalized form; order is by normalized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseSet {
    pub diseases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DatasetDescriptor>,
    /// Variant to canonical name, from backend-assisted merging.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub merged: BTreeMap<String, String>,
}

impl DiseaseSet {
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut by_key: BTreeMap<String, String> = BTreeMap::new();
        for n in names {
            let raw = n.as_ref().split_whitespace().collect::<Vec<_>>().join(" ");
            let key = normalize_text(&raw);
            if !key.is_empty() {
                by_key.entry(key).or_insert(raw);
            }
        }
        Self {
            diseases: by_key.into_values().collect(),
            source: None,
            merged: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.diseases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diseases.is_empty()
    }

    /// The set entry `name` resolves to, following merges.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        let key = normalize_text(name);
        let target = self
            .merged
            .iter()
            .find(|(v, _)| normalize_text(v) == key)
            .map_or(key, |(_, c)| normalize_text(c));
        self.diseases
            .iter()
            .find(|d| normalize_text(d) == target)
            .map(String::as_str)
    }

    /// Give every case this option set, rewriting merged ground truths.
    pub fn attach(&self, cases: &mut [PatientCase]) -> Result<()> {
        for case in cases.iter_mut() {
            let truth = self.canonical(&case.ground_truth).ok_or_else(|| {
                Error::Ingest(format!(
                    "case {}: ground truth {:?} missing from disease set",
                    case.case_id, case.ground_truth
                ))
            })?;
            case.ground_truth = truth.to_string();
            if let Some(ddx) = &mut case.ground_truth_ddx {
                for entry in ddx.iter_mut() {
                    if let Some(c) = self.canonical(entry) {
                        *entry = c.to_string();
                    }
                }
            }
            case.diagnosis_options = self.diseases.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    Exact,
    BackendAssisted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseSetBuild {
    pub set: DiseaseSet,
    pub warnings: Vec<String>,
}

/// Union of ground truths and listed options. `BackendAssisted` also asks the
/// model to merge redundant names and falls back to `Exact` if that fails.
pub fn build_disease_set(
    cases: &[PatientCase],
    mode: DedupMode,
    assist: Option<(&TracedChat<'_>, &PromptSet)>,
) -> Result<DiseaseSetBuild> {
    if cases.is_empty() {
        return Err(Error::Ingest(
            "cannot build a disease set from zero cases".into(),
        ));
    }
    let exact = DiseaseSet::from_names(
        cases
            .iter()
            .flat_map(|c| std::iter::once(&c.ground_truth).chain(&c.diagnosis_options)),
    );
    if mode == DedupMode::Exact {
        return Ok(DiseaseSetBuild {
            set: exact,
            warnings: Vec::new(),
        });
    }
    let result = match assist {
        Some((chat, prompts)) => {
            request_merges(chat, prompts, &exact).and_then(|m| apply_merges(&exact, m))
        }
        None => Err(Error::Config(
            "backend-assisted dedup needs a chat backend".into(),
        )),
    };
    Ok(match result {
        Ok(set) => DiseaseSetBuild {
            set,
            warnings: Vec::new(),
        },
        Err(e) => DiseaseSetBuild {
            set: exact,
            warnings: vec![format!("disease merge failed, using exact set: {e}")],
        },
    })
}

fn request_merges(
    chat: &TracedChat<'_>,
    prompts: &PromptSet,
    set: &DiseaseSet,
) -> Result<Vec<(String, String)>> {
    let system = prompts.disease_merge_system.render(&[])?;
    let input = prompts
        .disease_merge_input
        .render(&[("DISEASE_NAMES", &bullet_list(&set.diseases))])?;
    let reply = chat.ask("disease_merge", &system, &input)?;
    parse_merge_mapping(&reply)
}

/// `variant => canonical` lines; `NONE` means no merges.
pub fn parse_merge_mapping(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line.eq_ignore_ascii_case("none") {
            continue;
        }
        let line = line.trim_start_matches(['-', '*', ' ']);
        let (variant, canonical) = line
            .split_once("=>")
            .ok_or_else(|| Error::ParseFailure(format!("bad merge line {line:?}")))?;
        let (variant, canonical) = (variant.trim(), canonical.trim());
        if variant.is_empty() || canonical.is_empty() {
            return Err(Error::ParseFailure(format!("bad merge line {line:?}")));
        }
        out.push((variant.to_string(), canonical.to_string()));
    }
    Ok(out)
}

/// Drop each variant in favour of its canonical name. Both names must be
/// in the set and a canonical name may not itself be merged away.
pub fn apply_merges(set: &DiseaseSet, merges: Vec<(String, String)>) -> Result<DiseaseSet> {
    let find = |n: &str| {
        set.diseases
            .iter()
            .find(|d| normalize_text(d) == normalize_text(n))
    };
    let mut merged = BTreeMap::new();
    for (variant, canonical) in &merges {
        let (Some(v), Some(c)) = (find(variant), find(canonical)) else {
            return Err(Error::Ingest(format!(
                "merge {variant:?} => {canonical:?} names an unknown disease"
            )));
        };
        if v != c {
            merged.insert(v.clone(), c.clone());
        }
    }
    if let Some(c) = merged.values().find(|c| merged.contains_key(*c)) {
        return Err(Error::Ingest(format!(
            "merge target {c:?} is itself merged"
        )));
    }
    Ok(DiseaseSet {
        diseases: set
            .diseases
            .iter()
            .filter(|d| !merged.contains_key(*d))
            .cloned()
            .collect(),
        source: set.source.clone(),
        merged,
    })
}

/// Uniform draw from `0..range` by rejection sampling on `next_u64`.
fn bounded(rng: &mut ChaCha8Rng, range: u64) -> u64 {
    let limit = u64::MAX - u64::MAX % range;
    loop {
        let x = rng.next_u64();
        if x < limit {
            return x % range;
        }
    }
}

/// Draw `n` cases without replacement.
///
/// The generator is ChaCha8 seeded with `seed_from_u64(seed)`. Position `i`
/// (from 0) is swapped with `i + u`, where `u` is uniform on
/// `0..len - i` by rejection: draw `x = next_u64()` until
/// `x < u64::MAX - u64::MAX % (len - i)`, then take `x % (len - i)`. The
/// first `n` positions are the sample, in order.
pub fn sample_cases(cases: &[PatientCase], n: usize, seed: u64) -> Result<Vec<PatientCase>> {
    if n > cases.len() {
        return Err(Error::Ingest(format!(
            "cannot sample {n} cases from {}",
            cases.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for i in 0..n {
        let j = i + bounded(&mut rng, (order.len() - i) as u64) as usize;
        order.swap(i, j);
    }
    Ok(order[..n].iter().map(|&i| cases[i].clone()).collect())
}

/// Cases outside the evaluation sample.
pub fn split_example_store(cases: &[PatientCase], eval_ids: &HashSet<String>) -> Vec<PatientCase> {
    cases
        .iter()
        .filter(|c| !eval_ids.contains(&c.case_id))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub dataset: Dataset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<RareBenchSubset>,
    pub sampler: String,
    pub seed: u64,
    pub n: usize,
    pub case_ids: Vec<String>,
    pub skipped_records: usize,
    pub total_records: usize,
}

/// Read a unified case file, validating every case.
pub fn read_cases(path: &Path) -> Result<Vec<PatientCase>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let cases: Vec<PatientCase> = serde_json::from_str(&text)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    for c in &cases {
        c.validate()?;
        if !seen.insert(c.case_id.as_str()) {
            return Err(Error::Ingest(format!("duplicate case id {}", c.case_id)));
        }
    }
    Ok(cases)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_chacha::rand_core::{RngCore as _, SeedableRng as _};

    use super::*;
    use crate::llm::{ChatSettings, ScriptedBackend};
    use crate::trace::{Component, Trace};

    pub(crate) fn toy(id: &str, truth: &str) -> PatientCase {
        PatientCase {
            case_id: id.into(),
            dataset: Dataset::ICraftMD,
            initial_info: None,
            full_profile: vec!["fact".into()],
            diagnosis_options: vec![],
            ground_truth: truth.into(),
            ground_truth_ddx: None,
        }
    }

    fn toys(n: usize) -> Vec<PatientCase> {
        (0..n).map(|i| toy(&format!("c{i}"), "x")).collect()
    }

    fn ids(cases: &[PatientCase]) -> Vec<String> {
        cases.iter().map(|c| c.case_id.clone()).collect()
    }

    #[test]
    fn exact_set_collapses_normalized_names() {
        let cases = [toy("a", "URTI"), toy("b", "urti ")];
        let b = build_disease_set(&cases, DedupMode::Exact, None).unwrap();
        assert_eq!(b.set.diseases, ["URTI"]);
    }

    #[test]
    fn exact_set_is_sorted_by_normalized_form() {
        let set = DiseaseSet::from_names(["bronchitis", "Asthma", "  croup", "asthma"]);
        assert_eq!(set.diseases, ["Asthma", "bronchitis", "croup"]);
    }

    #[test]
    fn scripted_merge_collapses_synonyms() {
        let cases: Vec<_> = [
            "Acne vulgaris",
            "Acne",
            "Psoriasis",
            "Eczema",
            "Atopic dermatitis",
        ]
        .iter()
        .enumerate()
        .map(|(i, t)| toy(&i.to_string(), t))
        .collect();
        let backend =
            ScriptedBackend::new("s", "Acne => Acne vulgaris\nEczema => Atopic dermatitis");
        let trace = Trace::logical("ingest");
        let chat = TracedChat::new(&backend, ChatSettings::default(), &trace, Component::Driver);
        let prompts = PromptSet::default();
        let b =
            build_disease_set(&cases, DedupMode::BackendAssisted, Some((&chat, &prompts))).unwrap();
        assert!(b.warnings.is_empty());
        assert_eq!(b.set.len(), 3);
        assert_eq!(b.set.canonical("eczema"), Some("Atopic dermatitis"));

        let mut attached = cases.clone();
        b.set.attach(&mut attached).unwrap();
        assert_eq!(attached[1].ground_truth, "Acne vulgaris");
        for c in &attached {
            c.validate().unwrap();
        }
    }

    #[test]
    fn five_names_two_synonyms_gives_four() {
        let set = DiseaseSet::from_names(["A", "B", "C", "D", "E"]);
        let merged = apply_merges(&set, vec![("B".into(), "A".into())]).unwrap();
        assert_eq!(merged.len(), 4);
        assert!(apply_merges(&set, vec![("B".into(), "Z".into())]).is_err());
        assert!(apply_merges(
            &set,
            vec![("B".into(), "A".into()), ("A".into(), "C".into())]
        )
        .is_err());
    }

    #[test]
    fn merge_failure_falls_back_to_exact() {
        let cases = [toy("a", "A"), toy("b", "B")];
        let backend = ScriptedBackend::new("s", "garbled reply");
        let trace = Trace::logical("ingest");
        let chat = TracedChat::new(&backend, ChatSettings::default(), &trace, Component::Driver);
        let prompts = PromptSet::default();
        let b =
            build_disease_set(&cases, DedupMode::BackendAssisted, Some((&chat, &prompts))).unwrap();
        assert_eq!(b.set.len(), 2);
        assert_eq!(b.warnings.len(), 1);
        assert_eq!(parse_merge_mapping("NONE").unwrap(), vec![]);
    }

    #[test]
    fn empty_cases_rejected() {
        assert!(build_disease_set(&[], DedupMode::Exact, None).is_err());
    }

    /// The documented generator, written out directly.
    fn reference_sample(len: usize, n: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let range = (len - i) as u64;
            let x = loop {
                let x = rng.next_u64();
                if x < u64::MAX - u64::MAX % range {
                    break x;
                }
            };
            v.swap(i, i + (x % range) as usize);
        }
        v.truncate(n);
        v
    }

    #[test]
    fn sampling_follows_documented_generator() {
        let cases = toys(10);
        for seed in [1, 2] {
            let expected: Vec<String> = reference_sample(10, 10, seed)
                .into_iter()
                .map(|i| format!("c{i}"))
                .collect();
            assert_eq!(ids(&sample_cases(&cases, 10, seed).unwrap()), expected);
        }
        assert_ne!(
            ids(&sample_cases(&cases, 10, 1).unwrap()),
            ids(&sample_cases(&cases, 10, 2).unwrap())
        );
    }

    #[test]
    fn sampling_errors_and_full_permutation() {
        let cases = toys(5);
        assert!(sample_cases(&cases, 6, 0).is_err());
        let mut all = ids(&sample_cases(&cases, 5, 9).unwrap());
        all.sort();
        assert_eq!(all, ids(&cases));
    }

    #[test]
    fn split_is_set_difference() {
        let cases = toys(10);
        let eval: HashSet<String> = ids(&sample_cases(&cases, 4, 3).unwrap())
            .into_iter()
            .collect();
        let store = split_example_store(&cases, &eval);
        assert_eq!(store.len(), 6);
        assert!(store.iter().all(|c| !eval.contains(&c.case_id)));
        assert!(split_example_store(&cases, &ids(&cases).into_iter().collect()).is_empty());
        assert_eq!(split_example_store(&cases, &HashSet::new()).len(), 10);
    }

    #[test]
    fn descriptor_subset_rule() {
        assert!(DatasetDescriptor::new(Dataset::RareBench, "x", None).is_err());
        assert!(DatasetDescriptor::new(Dataset::DDxPlus, "x", Some(RareBenchSubset::Mme)).is_err());
        assert!(
            DatasetDescriptor::new(Dataset::RareBench, "x", Some(RareBenchSubset::Mme)).is_ok()
        );
        assert_eq!(
            "pumch".parse::<RareBenchSubset>().unwrap(),
            RareBenchSubset::Pumch
        );
    }

    #[test]
    fn schema_drift_threshold() {
        let skipped = |k: usize| IngestReport {
            cases: vec![],
            skipped: (0..k)
                .map(|i| SkippedRecord {
                    record: i,
                    reason: "bad".into(),
                })
                .collect(),
            total_records: 20,
        };
        assert!(skipped(2).finish().is_ok());
        assert!(matches!(
            skipped(3).finish(),
            Err(Error::SchemaDrift {
                skipped: 3,
                total: 20
            })
        ));
    }

    proptest! {
        #[test]
        fn sample_is_deterministic_and_repeat_free(len in 1usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let n = ((len as f64) * frac) as usize;
            let cases = toys(len);
            let a = ids(&sample_cases(&cases, n, seed).unwrap());
            let b = ids(&sample_cases(&cases, n, seed).unwrap());
            prop_assert_eq!(&a, &b);
            let unique: HashSet<_> = a.iter().collect();
            prop_assert_eq!(unique.len(), n);
        }
    }
}
