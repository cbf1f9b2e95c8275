use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::llm::{normalize_unit, squared_l2, EmbeddingProvider, EmbeddingVector, TracedChat};
use crate::model::{Dataset, PatientCase, PatientProfile};
use crate::prompts::{bullet_list, PromptSet};
use crate::scalar::Real;

pub const EXAMPLE_STORE_SCHEMA: &str = "ddx-example-store";
pub const EXAMPLE_STORE_VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-6;

/// A solved case used as a few-shot reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceExample {
    pub case: PatientCase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl ReferenceExample {
    /// Initial information lines followed by the full profile.
    pub fn profile_facts(&self) -> Vec<String> {
        let mut facts = self
            .case
            .initial_info
            .as_ref()
            .map(|i| i.facts())
            .unwrap_or_default();
        facts.extend(self.case.full_profile.iter().cloned());
        facts
    }
}

/// Text embedded for a reference case.
pub fn example_embedding_text(example: &ReferenceExample) -> String {
    example.profile_facts().join("\n")
}

/// Text embedded for the patient being diagnosed. The profile already starts
/// with the initial information.
pub fn profile_embedding_text(profile: &PatientProfile) -> String {
    profile
        .facts()
        .iter()
        .map(|f| f.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reference cases with optional unit-norm embeddings, one row per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ExampleStore<T = f64> {
    examples: Vec<ReferenceExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<Vec<Vec<T>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct StoreFile<T> {
    schema: String,
    version: u32,
    content_hash: String,
    #[serde(flatten)]
    store: ExampleStore<T>,
}

impl<T: Real> ExampleStore<T> {
    pub fn new(examples: Vec<ReferenceExample>) -> Self {
        Self {
            examples,
            embedding_model: None,
            embeddings: None,
        }
    }

    pub fn from_cases(cases: Vec<PatientCase>) -> Self {
        Self::new(
            cases
                .into_iter()
                .map(|case| ReferenceExample {
                    case,
                    rationale: None,
                })
                .collect(),
        )
    }

    /// Attach precomputed rows. Each row must be unit-norm.
    pub fn with_embeddings(mut self, model_id: &str, rows: Vec<Vec<T>>) -> Result<Self> {
        self.embedding_model = Some(model_id.to_string());
        self.embeddings = Some(rows);
        self.validate()?;
        Ok(self)
    }

    /// Embed and normalize every example with `provider`.
    pub fn embed_with(self, provider: &dyn EmbeddingProvider<T>) -> Result<Self> {
        let rows = self
            .examples
            .iter()
            .map(|e| {
                let v = provider.embed(&example_embedding_text(e))?;
                Ok(normalize_unit(&v)?.values)
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_embeddings(provider.model_id(), rows)
    }

    pub fn examples(&self) -> &[ReferenceExample] {
        &self.examples
    }

    pub fn examples_mut(&mut self) -> &mut [ReferenceExample] {
        &mut self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn embedding_model(&self) -> Option<&str> {
        self.embedding_model.as_deref()
    }

    pub fn embeddings(&self) -> Option<&[Vec<T>]> {
        self.embeddings.as_deref()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(rows) = &self.embeddings else {
            return Ok(());
        };
        if rows.len() != self.examples.len() {
            return Err(Error::Config(format!(
                "example store has {} embedding rows for {} examples",
                rows.len(),
                self.examples.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Config(format!(
                    "embedding row {i} has dimension {}, expected {dim}",
                    row.len()
                )));
            }
            let norm = crate::llm::dot(row, row).sqrt().to_f64();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Config(format!(
                    "embedding row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }

    fn content_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = StoreFile {
            schema: EXAMPLE_STORE_SCHEMA.into(),
            version: EXAMPLE_STORE_VERSION,
            content_hash: self.content_hash()?,
            store: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Load and verify schema, version, content hash and unit norms.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: StoreFile<T> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if file.schema != EXAMPLE_STORE_SCHEMA || file.version != EXAMPLE_STORE_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported example store {} v{}",
                path.display(),
                file.schema,
                file.version
            )));
        }
        let hash = file.store.content_hash()?;
        if hash != file.content_hash {
            return Err(Error::Config(format!(
                "{}: content hash mismatch (file says {}, content is {hash})",
                path.display(),
                file.content_hash
            )));
        }
        file.store.validate()?;
        Ok(file.store)
    }

    /// The first `k` examples in store order.
    pub fn select_static(&self, k: usize) -> Result<Vec<&ReferenceExample>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.examples.is_empty() {
            return Err(Error::InvalidArgument("example store is empty".into()));
        }
        Ok(self.examples.iter().take(k).collect())
    }

    /// Indices of the `k` rows nearest to the unit vector `query` in squared
    /// Euclidean distance, nearest first, ties to the lower index.
    pub fn nearest(&self, query: &[T], k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let rows = self
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::Strategy("example store has no embeddings".into()))?;
        if let Some(row) = rows.first() {
            if row.len() != query.len() {
                return Err(Error::Strategy(format!(
                    "query dimension {} does not match store dimension {}",
                    query.len(),
                    row.len()
                )));
            }
        }
        let mut scored: Vec<(T, usize)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (squared_l2(r, query), i))
            .collect();
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
    }

    /// Embed the profile, normalize, and return the `k` nearest examples.
    pub fn select_dynamic(
        &self,
        provider: &dyn EmbeddingProvider<T>,
        profile: &PatientProfile,
        k: usize,
    ) -> Result<Vec<&ReferenceExample>> {
        if profile.is_empty() {
            return Err(Error::InvalidArgument("query profile is empty".into()));
        }
        if let Some(model) = &self.embedding_model {
            if model != provider.model_id() {
                return Err(Error::Strategy(format!(
                    "store embedded with {model}, query provider is {}",
                    provider.model_id()
                )));
            }
        }
        let wrap = |e: Error| match e {
            Error::Strategy(_) => e,
            other => Error::Strategy(format!("dynamic example selection: {other}")),
        };
        let v: EmbeddingVector<T> = provider
            .embed(&profile_embedding_text(profile))
            .map_err(wrap)?;
        let q = normalize_unit(&v).map_err(wrap)?;
        Ok(self
            .nearest(&q.values, k)?
            .into_iter()
            .map(|i| &self.examples[i])
            .collect())
    }

    /// Write a model rationale for every example that lacks one.
    pub fn generate_rationales(
        &mut self,
        chat: &TracedChat<'_>,
        prompts: &PromptSet,
        dataset: Dataset,
    ) -> Result<usize> {
        let system = prompts
            .rationale_system
            .render(&[("SPECIALIST_PREFACE", dataset.specialist_preface())])?;
        let mut written = 0;
        for example in self.examples.iter_mut().filter(|e| e.rationale.is_none()) {
            let input = prompts.rationale_input.render(&[
                ("PATIENT_PROFILE", &bullet_list(&example.profile_facts())),
                ("DIAGNOSIS", &example.case.ground_truth),
            ])?;
            example.rationale = Some(chat.ask("rationale", &system, &input)?.trim().to_string());
            written += 1;
        }
        Ok(written)
    }

    /// Fill missing rationales with a fixed template, for offline runs.
    pub fn placeholder_rationales(&mut self) -> usize {
        let mut written = 0;
        for example in self.examples.iter_mut().filter(|e| e.rationale.is_none()) {
            example.rationale = Some(format!(
                "The findings ({}) are most consistent with {}.",
                example.case.full_profile.join("; "),
                example.case.ground_truth
            ));
            written += 1;
        }
        written
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::llm::{dot, ScriptedEmbedder};
    use crate::model::Provenance;

    fn case(i: usize) -> PatientCase {
        PatientCase {
            case_id: format!("ex{i}"),
            dataset: Dataset::DDxPlus,
            initial_info: None,
            full_profile: vec![format!("finding {i}")],
            diagnosis_options: vec![format!("D{i}")],
            ground_truth: format!("D{i}"),
            ground_truth_ddx: None,
        }
    }

    fn store(n: usize) -> ExampleStore<f64> {
        ExampleStore::from_cases((0..n).map(case).collect())
    }

    #[test]
    fn static_selection() {
        let s = store(10);
        let ids: Vec<_> = s
            .select_static(5)
            .unwrap()
            .iter()
            .map(|e| e.case.case_id.clone())
            .collect();
        assert_eq!(ids, ["ex0", "ex1", "ex2", "ex3", "ex4"]);
        assert_eq!(store(3).select_static(5).unwrap().len(), 3);
        assert!(s.select_static(0).is_err());
    }

    #[test]
    fn nearest_brute_force_example() {
        let b = (1.0f64 - 0.99f64 * 0.99).sqrt();
        let s = store(3)
            .with_embeddings("m", vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.99, b]])
            .unwrap();
        assert_eq!(s.nearest(&[1.0, 0.0], 2).unwrap(), [0, 2]);
        assert_eq!(s.nearest(&[1.0, 0.0], 3).unwrap(), [0, 2, 1]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = store(3)
            .with_embeddings("m", vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]])
            .unwrap();
        assert_eq!(s.nearest(&[1.0, 0.0], 2).unwrap(), [1, 2]);
        assert_eq!(s.nearest(&[h, h], 3).unwrap(), [0, 1, 2]);
    }

    #[test]
    fn rejects_non_unit_rows() {
        assert!(store(1).with_embeddings("m", vec![vec![2.0, 0.0]]).is_err());
        assert!(store(2).with_embeddings("m", vec![vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn dynamic_selection_embeds_profile() {
        let embedder = ScriptedEmbedder::new("m")
            .with("finding 0", vec![1.0, 0.0])
            .with("finding 1", vec![0.0, 3.0])
            .with("finding 2", vec![2.0, 0.1])
            .with("cough", vec![0.0, 1.0]);
        let s = store(3).embed_with(&embedder).unwrap();
        let mut profile = PatientProfile::new();
        profile.merge(["cough"], Provenance::Dialogue);
        let picked = s.select_dynamic(&embedder, &profile, 1).unwrap();
        assert_eq!(picked[0].case.case_id, "ex1");
        assert!(s
            .select_dynamic(&embedder, &PatientProfile::new(), 1)
            .is_err());
        let other = ScriptedEmbedder::new("other").with("cough", vec![0.0, 1.0]);
        assert!(matches!(
            s.select_dynamic(&other, &profile, 1),
            Err(Error::Strategy(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        let mut s = store(2)
            .with_embeddings("m", vec![vec![1.0, 0.0], vec![0.6, 0.8]])
            .unwrap();
        s.placeholder_rationales();
        s.save(&path).unwrap();
        let back = ExampleStore::<f64>::load(&path).unwrap();
        assert_eq!(back, s);

        let tampered = std::fs::read_to_string(&path)
            .unwrap()
            .replace("finding 1", "finding 9");
        std::fs::write(&path, tampered).unwrap();
        let err = ExampleStore::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("content hash"), "{err}");
    }

    proptest! {
        #[test]
        fn l2_order_matches_cosine_order(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..20),
            q in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            prop_assume!(rows.iter().all(|r| dot(r, r) > 1e-6) && dot(&q, &q) > 1e-6);
            let unit = |v: &Vec<f64>| {
                normalize_unit(&EmbeddingVector::new(v.clone(), "m")).unwrap().values
            };
            let rows: Vec<Vec<f64>> = rows.iter().map(unit).collect();
            let q = unit(&q);
            let n = rows.len();
            let s = store(n).with_embeddings("m", rows.clone()).unwrap();
            let by_l2 = s.nearest(&q, n).unwrap();
            let mut by_cos: Vec<usize> = (0..n).collect();
            by_cos.sort_by(|&a, &b| {
                dot(&rows[b], &q).partial_cmp(&dot(&rows[a], &q)).unwrap().then(a.cmp(&b))
            });
            // Orders may differ only between rows whose similarities are equal
            // up to rounding.
            for (x, y) in by_l2.iter().zip(&by_cos) {
                prop_assert!((dot(&rows[*x], &q) - dot(&rows[*y], &q)).abs() < 1e-12);
            }
        }
    }
}
