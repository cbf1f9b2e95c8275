use std::collections::HashMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{DiseaseSet, IngestReport, RareBenchSubset, SkippedRecord};
use crate::error::{Error, Result};
use crate::model::{Dataset, InitialInfo, PatientCase, Sex};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

/// Parse each non-blank line with `convert`; failures become skip records.
fn jsonl<T, F>(path: &Path, mut convert: F) -> Result<IngestReport>
where
    T: DeserializeOwned,
    F: FnMut(usize, T) -> std::result::Result<PatientCase, String>,
{
    let text = read(path)?;
    let mut report = IngestReport {
        cases: Vec::new(),
        skipped: Vec::new(),
        total_records: 0,
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.total_records += 1;
        let record = i + 1;
        let parsed = serde_json::from_str::<T>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| convert(record, r))
            .and_then(|c| c.validate().map(|_| c).map_err(|e| e.to_string()));
        match parsed {
            Ok(case) => {
                if report.cases.iter().any(|c| c.case_id == case.case_id) {
                    report.skipped.push(SkippedRecord {
                        record,
                        reason: format!("duplicate case id {}", case.case_id),
                    });
                } else {
                    report.cases.push(case);
                }
            }
            Err(reason) => report.skipped.push(SkippedRecord { record, reason }),
        }
    }
    Ok(report)
}

fn nonempty(facts: Vec<String>) -> Vec<String> {
    facts
        .into_iter()
        .map(|f| f.trim().to_string())
        .filter(|f| !f.is_empty())
        .collect()
}

fn required(field: &str, value: Option<String>) -> std::result::Result<String, String> {
    value
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .ok_or_else(|| format!("missing {field}"))
}

/// Leading integer of values like `61`, `"61"` or `"61 years"`.
fn parse_age(value: &serde_json::Value) -> Option<u32> {
    match value {
        serde_json::Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        serde_json::Value::String(s) => {
            let digits: String = s.trim().chars().take_while(char::is_ascii_digit).collect();
            digits.parse().ok()
        }
        _ => None,
    }
}

fn initial_info(
    age: Option<&serde_json::Value>,
    sex: Option<String>,
    complaint: Option<String>,
) -> Option<InitialInfo> {
    let info = InitialInfo {
        age: age.and_then(parse_age),
        sex: sex.filter(|s| !s.trim().is_empty()).map(Sex::from),
        chief_complaint: complaint
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty()),
    };
    (!info.is_empty()).then_some(info)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Conditions {
    Names(Vec<String>),
    Keyed(HashMap<String, serde_json::Value>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DdxEntry {
    Scored(String, f64),
    Name(String),
}

#[derive(Deserialize)]
struct DdxPlusRecord {
    id: serde_json::Value,
    #[serde(default)]
    age: Option<serde_json::Value>,
    #[serde(default)]
    sex: Option<String>,
    #[serde(default)]
    chief_complaint: Option<String>,
    #[serde(default)]
    evidences: Vec<String>,
    #[serde(default)]
    pathology: Option<String>,
    #[serde(default)]
    differential_diagnosis: Vec<DdxEntry>,
}

fn id_string(id: &serde_json::Value) -> std::result::Result<String, String> {
    match id {
        serde_json::Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        _ => Err("missing id".into()),
    }
}

/// DDxPlus directory: `conditions.json` plus `patients.jsonl`. Options are
/// the full condition list; the differential is ordered by probability.
pub fn load_ddxplus(dir: &Path) -> Result<IngestReport> {
    let conditions = match read_json::<Conditions>(&dir.join("conditions.json"))? {
        Conditions::Names(v) => v,
        Conditions::Keyed(m) => m.into_keys().collect(),
    };
    let options = DiseaseSet::from_names(&conditions);
    if options.is_empty() {
        return Err(Error::Ingest("conditions.json lists no conditions".into()));
    }
    let report = jsonl(&dir.join("patients.jsonl"), |_, r: DdxPlusRecord| {
        let case_id = format!("ddxplus-{}", id_string(&r.id)?);
        let pathology = required("pathology", r.pathology)?;
        let truth = options
            .canonical(&pathology)
            .ok_or_else(|| format!("pathology {pathology:?} is not a known condition"))?;
        let mut ddx: Vec<(String, f64)> = r
            .differential_diagnosis
            .into_iter()
            .map(|e| match e {
                DdxEntry::Scored(n, p) => (n, p),
                DdxEntry::Name(n) => (n, f64::NAN),
            })
            .collect();
        if ddx.iter().all(|(_, p)| !p.is_nan()) {
            ddx.sort_by(|a, b| b.1.total_cmp(&a.1));
        }
        let ddx: Vec<String> = ddx
            .into_iter()
            .filter_map(|(n, _)| options.canonical(&n).map(str::to_string))
            .collect();
        Ok(PatientCase {
            case_id,
            dataset: Dataset::DDxPlus,
            initial_info: initial_info(r.age.as_ref(), r.sex, r.chief_complaint),
            full_profile: nonempty(r.evidences),
            diagnosis_options: options.diseases.clone(),
            ground_truth: truth.to_string(),
            ground_truth_ddx: (!ddx.is_empty()).then_some(ddx),
        })
    })?;
    report.finish()
}

#[derive(Deserialize)]
struct ICraftInitial {
    #[serde(default)]
    age: Option<serde_json::Value>,
    #[serde(default)]
    sex: Option<String>,
    #[serde(default)]
    chief_complaint: Option<String>,
}

#[derive(Deserialize)]
struct ICraftRecord {
    id: serde_json::Value,
    #[serde(default)]
    initial_info: Option<ICraftInitial>,
    #[serde(default)]
    context: Vec<String>,
    #[serde(default)]
    answer: Option<String>,
}

/// Attach the exact disease set over the loaded cases.
fn with_case_options(report: IngestReport) -> Result<IngestReport> {
    let mut report = report.finish()?;
    let set = DiseaseSet::from_names(report.cases.iter().map(|c| &c.ground_truth));
    set.attach(&mut report.cases)?;
    Ok(report)
}

/// iCraft-MD jsonl. The initial case details become the initial info; the
/// options are every distinct answer in the file.
pub fn load_icraft(path: &Path) -> Result<IngestReport> {
    let report = jsonl(path, |_, r: ICraftRecord| {
        let truth = required("answer", r.answer)?;
        let info = r
            .initial_info
            .and_then(|i| initial_info(i.age.as_ref(), i.sex, i.chief_complaint));
        Ok(PatientCase {
            case_id: format!("icraft-{}", id_string(&r.id)?),
            dataset: Dataset::ICraftMD,
            initial_info: info,
            full_profile: nonempty(r.context),
            diagnosis_options: vec![truth.clone()],
            ground_truth: truth,
            ground_truth_ddx: None,
        })
    })?;
    with_case_options(report)
}

#[derive(Deserialize)]
struct RareBenchRecord {
    #[serde(rename = "Phenotype", default)]
    phenotype: Vec<String>,
    #[serde(rename = "RareDisease", default)]
    rare_disease: Vec<String>,
}

/// RareBench subset file with its id-to-name mappings. Unknown phenotype ids
/// are dropped; the first disease id with a name is the ground truth.
pub fn load_rarebench(dir: &Path, subset: RareBenchSubset) -> Result<IngestReport> {
    let phenotypes: HashMap<String, String> = read_json(&dir.join("phenotype_mapping.json"))?;
    let diseases: HashMap<String, String> = read_json(&dir.join("disease_mapping.json"))?;
    let path = dir.join(format!("{}.jsonl", subset.as_str()));
    let report = jsonl(&path, |record, r: RareBenchRecord| {
        let profile: Vec<String> = r
            .phenotype
            .iter()
            .filter_map(|id| phenotypes.get(id.trim()).cloned())
            .collect();
        if profile.is_empty() {
            return Err("no known phenotype ids".into());
        }
        let truth = r
            .rare_disease
            .iter()
            .find_map(|id| diseases.get(id.trim()).cloned())
            .ok_or_else(|| format!("no known disease id among {:?}", r.rare_disease))?;
        Ok(PatientCase {
            case_id: format!("{}-{record:04}", subset.as_str().to_lowercase()),
            dataset: Dataset::RareBench,
            initial_info: None,
            full_profile: profile,
            diagnosis_options: vec![truth.clone()],
            ground_truth: truth,
            ground_truth_ddx: None,
        })
    })?;
    with_case_options(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn ddxplus_record() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "conditions.json",
            r#"["URTI", "Acute otitis media", "Chagas", "Bronchitis"]"#,
        );
        write(
            dir.path(),
            "patients.jsonl",
            r#"{"id": 7, "age": 41, "sex": "F", "chief_complaint": "nasal congestion", "evidences": ["I have a fever."], "pathology": "acute otitis media", "differential_diagnosis": [["URTI", 0.3], ["Acute otitis media", 0.5], ["Chagas", 0.2], ["Unknown", 0.1]]}"#,
        );
        let r = load_ddxplus(dir.path()).unwrap();
        let c = &r.cases[0];
        assert_eq!(c.case_id, "ddxplus-7");
        assert_eq!(c.ground_truth, "Acute otitis media");
        assert_eq!(
            c.ground_truth_ddx.as_deref().unwrap(),
            ["Acute otitis media", "URTI", "Chagas"]
        );
        assert_eq!(c.diagnosis_options.len(), 4);
        assert_eq!(c.initial_info.as_ref().unwrap().sex, Some(Sex::F));
    }

    #[test]
    fn missing_ground_truth_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("icraft.jsonl");
        let mut lines: Vec<String> = (0..10)
            .map(|i| format!(r#"{{"id": {i}, "context": ["fact"], "answer": "Acne"}}"#))
            .collect();
        lines.push(r#"{"id": 99, "context": ["fact"]}"#.into());
        std::fs::write(&path, lines.join("\n")).unwrap();
        let r = load_icraft(&path).unwrap();
        assert_eq!(r.cases.len(), 10);
        assert_eq!(r.total_records, 11);
        assert_eq!(r.skipped[0].record, 11);
        assert!(r.skipped[0].reason.contains("answer"));

        lines.push("not json".into());
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(
            load_icraft(&path),
            Err(Error::SchemaDrift {
                skipped: 2,
                total: 12
            })
        ));
    }

    #[test]
    fn unreadable_file_is_ingest_error() {
        assert!(matches!(
            load_icraft(Path::new("/nonexistent/x.jsonl")),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn age_forms() {
        assert_eq!(parse_age(&serde_json::json!(61)), Some(61));
        assert_eq!(parse_age(&serde_json::json!("61 years")), Some(61));
        assert_eq!(parse_age(&serde_json::json!("adult")), None);
    }
}
