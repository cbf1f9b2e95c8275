use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::http::{HttpTransport, RetryPolicy};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EmbeddingVector<T> {
    pub values: Vec<T>,
    pub model_id: String,
}

impl<T: Real> EmbeddingVector<T> {
    pub fn new(values: Vec<T>, model_id: impl Into<String>) -> Self {
        Self {
            values,
            model_id: model_id.into(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        dot(&self.values, &self.values).sqrt()
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

pub fn squared_l2<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| {
        let d = *x - *y;
        acc + d * d
    })
}

/// Scale `v` to Euclidean norm 1.
pub fn normalize_unit<T: Real>(v: &EmbeddingVector<T>) -> Result<EmbeddingVector<T>> {
    let norm = v.norm();
    if !norm.is_finite() || norm <= T::zero() {
        return Err(Error::DegenerateVector(format!(
            "cannot normalize a vector of norm {:?} from {}",
            norm, v.model_id
        )));
    }
    Ok(EmbeddingVector {
        values: v.values.iter().map(|x| *x / norm).collect(),
        model_id: v.model_id.clone(),
    })
}

pub trait EmbeddingProvider<T: Real>: Send + Sync {
    fn model_id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>>;
}

impl<T: Real, P: EmbeddingProvider<T> + ?Sized> EmbeddingProvider<T> for Arc<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        (**self).embed(text)
    }
}

fn require_text(text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot embed empty text".into()));
    }
    Ok(())
}

/// Memory and optional on-disk cache in front of a provider, keyed by the
/// exact text. Disk entries are named by the SHA-256 of model id and text.
/// Also enforces one dimension per model.
pub struct CachedEmbedder<T: Real, P> {
    inner: P,
    memory: Mutex<HashMap<String, EmbeddingVector<T>>>,
    dir: Option<PathBuf>,
    dimension: Mutex<Option<usize>>,
}

impl<T: Real, P: EmbeddingProvider<T>> CachedEmbedder<T, P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            memory: Mutex::new(HashMap::new()),
            dir: None,
            dimension: Mutex::new(None),
        }
    }

    pub fn with_disk_cache(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn disk_path(&self, text: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        let mut h = Sha256::new();
        h.update(self.inner.model_id().as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        Some(dir.join(format!("{}.json", hex::encode(h.finalize()))))
    }

    fn read_disk(&self, text: &str) -> Option<EmbeddingVector<T>> {
        let raw = std::fs::read_to_string(self.disk_path(text)?).ok()?;
        serde_json::from_str(&raw).ok()
    }

    fn write_disk(&self, text: &str, v: &EmbeddingVector<T>) -> Result<()> {
        let Some(path) = self.disk_path(text) else {
            return Ok(());
        };
        let tmp = tempfile::NamedTempFile::new_in(path.parent().unwrap_or(Path::new(".")))?;
        serde_json::to_writer(&tmp, v)?;
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    fn check_dimension(&self, v: &EmbeddingVector<T>) -> Result<()> {
        let mut dim = self.dimension.lock().unwrap_or_else(|e| e.into_inner());
        match *dim {
            Some(d) if d != v.dimension() => Err(Error::InvalidArgument(format!(
                "{} returned dimension {} after {}",
                self.inner.model_id(),
                v.dimension(),
                d
            ))),
            Some(_) => Ok(()),
            None => {
                *dim = Some(v.dimension());
                Ok(())
            }
        }
    }
}

impl<T: Real, P: EmbeddingProvider<T>> EmbeddingProvider<T> for CachedEmbedder<T, P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        require_text(text)?;
        if let Some(v) = self
            .memory
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(text)
        {
            return Ok(v.clone());
        }
        let v = match self.read_disk(text) {
            Some(v) => v,
            None => {
                let v = self.inner.embed(text)?;
                self.check_dimension(&v)?;
                self.write_disk(text, &v)?;
                v
            }
        };
        self.check_dimension(&v)?;
        self.memory
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// Client for an OpenAI-compatible `POST {base_url}/embeddings` endpoint:
/// body `{"model", "input"}`, vector read from `data[0].embedding`.
pub struct HttpEmbeddingProvider {
    url: String,
    model_id: String,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
}

impl HttpEmbeddingProvider {
    pub fn new(
        base_url: &str,
        model_id: &str,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model_id: model_id.to_string(),
            api_key,
            transport,
            retry,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl<T: Real> EmbeddingProvider<T> for HttpEmbeddingProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        require_text(text)?;
        let body = json!({"model": self.model_id, "input": text}).to_string();
        let auth = self.api_key.as_ref().map(|k| format!("Bearer {k}"));
        let headers: Vec<(&str, &str)> = auth
            .as_deref()
            .map(|a| vec![("Authorization", a)])
            .unwrap_or_default();
        let (values, _) = self.retry.run(|_| {
            let raw = self
                .transport
                .post_json(&self.url, &headers, &body)?
                .into_success()?;
            let parsed: EmbeddingBody = serde_json::from_str(&raw)
                .map_err(|e| Error::ParseFailure(format!("embedding body: {e}")))?;
            parsed
                .data
                .into_iter()
                .next()
                .map(|d| d.embedding)
                .ok_or_else(|| Error::ParseFailure("embedding response has no data".into()))
        })?;
        let values = values
            .into_iter()
            .map(|x| T::from(x).unwrap_or_else(T::nan))
            .collect();
        Ok(EmbeddingVector::new(values, &self.model_id))
    }
}

/// Offline signed feature-hashing embedder over lower-cased word tokens.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    model_id: String,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            model_id: format!("hashing-{dimension}"),
        }
    }

    pub fn embed_values<T: Real>(&self, text: &str) -> Vec<T> {
        let mut values = vec![T::zero(); self.dimension];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let digest = Sha256::digest(token.to_lowercase().as_bytes());
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&digest[..8]);
            let h = u64::from_le_bytes(bytes);
            let idx = (h % self.dimension as u64) as usize;
            if digest[8] & 1 == 0 {
                values[idx] = values[idx] + T::one();
            } else {
                values[idx] = values[idx] - T::one();
            }
        }
        values
    }
}

impl<T: Real> EmbeddingProvider<T> for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        require_text(text)?;
        Ok(EmbeddingVector::new(
            self.embed_values(text),
            &self.model_id,
        ))
    }
}

/// Fixed text-to-vector table for tests, optionally backed by a hashing
/// embedder for unknown text. Counts provider calls.
pub struct ScriptedEmbedder<T> {
    model_id: String,
    table: HashMap<String, Vec<T>>,
    fallback: Option<HashingEmbedder>,
    calls: AtomicUsize,
}

impl<T: Real> ScriptedEmbedder<T> {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            table: HashMap::new(),
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with(mut self, text: &str, values: Vec<T>) -> Self {
        self.table.insert(text.to_string(), values);
        self
    }

    pub fn with_fallback(mut self, fallback: HashingEmbedder) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: Real> EmbeddingProvider<T> for ScriptedEmbedder<T> {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        require_text(text)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let values = match (self.table.get(text), &self.fallback) {
            (Some(v), _) => v.clone(),
            (None, Some(h)) => h.embed_values(text),
            (None, None) => {
                return Err(Error::InvalidArgument(format!(
                    "no scripted embedding for {text:?}"
                )))
            }
        };
        Ok(EmbeddingVector::new(values, &self.model_id))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn v(values: Vec<f64>) -> EmbeddingVector<f64> {
        EmbeddingVector::new(values, "m")
    }

    #[test]
    fn normalize_examples() {
        let u = normalize_unit(&v(vec![3.0, 4.0])).unwrap();
        assert!((u.values[0] - 0.6).abs() < 1e-12 && (u.values[1] - 0.8).abs() < 1e-12);
        assert_eq!(
            normalize_unit(&v(vec![1.0, 0.0, 0.0])).unwrap().values,
            [1.0, 0.0, 0.0]
        );
        let u = normalize_unit(&v(vec![2.0, 2.0])).unwrap();
        let expect = 1.0 / 2f64.sqrt();
        assert!(u.values.iter().all(|x| (x - expect).abs() < 1e-8));
        assert!(matches!(
            normalize_unit(&v(vec![0.0, 0.0])),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn normalize_in_f32() {
        let u = normalize_unit(&EmbeddingVector::new(vec![3.0f32, 4.0], "m")).unwrap();
        assert!((u.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cache_serves_repeats() {
        let provider = ScriptedEmbedder::new("s").with("abc", vec![1.0f64, 0.0, 0.0]);
        let cached = CachedEmbedder::new(provider);
        assert_eq!(cached.embed("abc").unwrap().values, [1.0, 0.0, 0.0]);
        cached.embed("abc").unwrap();
        assert_eq!(cached.inner().calls(), 1);
    }

    #[test]
    fn cache_keys_exact_text() {
        let provider = ScriptedEmbedder::<f64>::new("s").with_fallback(HashingEmbedder::new(8));
        let cached = CachedEmbedder::new(provider);
        cached.embed("abc").unwrap();
        cached.embed("abc ").unwrap();
        assert_eq!(cached.inner().calls(), 2);
    }

    #[test]
    fn disk_cache_survives_new_instance() {
        let dir = tempfile::tempdir().unwrap();
        let first = CachedEmbedder::new(ScriptedEmbedder::new("s").with("x", vec![0.5f64, 0.5]))
            .with_disk_cache(dir.path())
            .unwrap();
        first.embed("x").unwrap();
        let second = CachedEmbedder::new(ScriptedEmbedder::new("s").with("x", vec![9.0f64, 9.0]))
            .with_disk_cache(dir.path())
            .unwrap();
        assert_eq!(second.embed("x").unwrap().values, [0.5, 0.5]);
        assert_eq!(second.inner().calls(), 0);
    }

    #[test]
    fn dimension_is_fixed_per_model() {
        let cached = CachedEmbedder::new(
            ScriptedEmbedder::new("s")
                .with("a", vec![1.0f64, 0.0])
                .with("b", vec![1.0, 0.0, 0.0]),
        );
        cached.embed("a").unwrap();
        assert!(cached.embed("b").is_err());
        assert!(cached.embed("").is_err());
    }

    #[test]
    fn hashing_embedder_is_deterministic() {
        let h = HashingEmbedder::new(32);
        let a: EmbeddingVector<f64> = h.embed("Fever and cough").unwrap();
        let b: EmbeddingVector<f64> = h.embed("fever AND cough").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dimension(), 32);
    }

    proptest! {
        #[test]
        fn unit_norm_and_direction(values in prop::collection::vec(-100.0f64..100.0, 1..32)) {
            let vec = v(values.clone());
            prop_assume!(vec.norm() > 1e-9);
            let u = normalize_unit(&vec).unwrap();
            prop_assert!((u.norm() - 1.0).abs() < 1e-6);
            let cos = dot(&u.values, &values) / vec.norm();
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }

        #[test]
        fn l2_cosine_identity(
            a in prop::collection::vec(-1.0f64..1.0, 8),
            b in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let (a, b) = (v(a), v(b));
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let (a, b) = (normalize_unit(&a).unwrap(), normalize_unit(&b).unwrap());
            let lhs = squared_l2(&a.values, &b.values);
            let rhs = 2.0 - 2.0 * dot(&a.values, &b.values);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
