use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::{KeywordSet, RetrievedDocument, Source};
use crate::error::{Error, Result};

/// A searchable document collection.
pub trait DocumentSource: Send + Sync {
    fn source(&self) -> Source;

    /// Up to `top_k` documents for one keyword search.
    fn search_keyword(&self, keyword: &str, top_k: usize) -> Result<Vec<RetrievedDocument>>;
}

impl<S: DocumentSource + ?Sized> DocumentSource for std::sync::Arc<S> {
    fn source(&self) -> Source {
        (**self).source()
    }

    fn search_keyword(&self, keyword: &str, top_k: usize) -> Result<Vec<RetrievedDocument>> {
        (**self).search_keyword(keyword, top_k)
    }
}

/// Search every keyword concurrently, then merge in keyword order,
/// dropping repeated `source_id`s. At most `top_k` documents per keyword.
pub fn search_all(
    source: &dyn DocumentSource,
    keywords: &KeywordSet,
    top_k: usize,
) -> Result<Vec<RetrievedDocument>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let results: Vec<Result<Vec<RetrievedDocument>>> = thread::scope(|s| {
        let handles: Vec<_> = keywords
            .keywords()
            .iter()
            .map(|k| s.spawn(move || source.search_keyword(k, top_k)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Retrieval("search thread panicked".into())))
            })
            .collect()
    });
    let mut merged: Vec<RetrievedDocument> = Vec::new();
    for (keyword, result) in keywords.keywords().iter().zip(results) {
        let docs = result.map_err(|e| match e {
            Error::Retrieval(_) => e,
            other => Error::Retrieval(format!(
                "{} search for {keyword:?}: {other}",
                source.source()
            )),
        })?;
        for doc in docs.into_iter().take(top_k) {
            if doc.body.trim().is_empty() || merged.iter().any(|d| d.source_id == doc.source_id) {
                continue;
            }
            merged.push(doc);
        }
    }
    Ok(merged)
}

/// Spaces requests at least `1 / requests_per_second` apart. Shared by all
/// clients of one source.
#[derive(Debug)]
pub struct Throttle {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Throttle {
    /// `requests_per_second <= 0` disables throttling.
    pub fn new(requests_per_second: f64) -> Self {
        let interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(0.0)
    }

    pub fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let slot = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

fn unix_day() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() / 86_400)
        .unwrap_or(0)
}

/// On-disk cache of keyword searches keyed by (source, keyword, top_k, day).
pub struct CachedSource<S> {
    inner: S,
    dir: PathBuf,
}

impl<S: DocumentSource> CachedSource<S> {
    pub fn new(inner: S, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            inner,
            dir: dir.to_path_buf(),
        })
    }

    fn path(&self, keyword: &str, top_k: usize, day: u64) -> PathBuf {
        let mut h = Sha256::new();
        for part in [
            self.inner.source().as_str(),
            keyword,
            &top_k.to_string(),
            &day.to_string(),
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        self.dir.join(format!("{}.json", hex::encode(h.finalize())))
    }
}

impl<S: DocumentSource> DocumentSource for CachedSource<S> {
    fn source(&self) -> Source {
        self.inner.source()
    }

    fn search_keyword(&self, keyword: &str, top_k: usize) -> Result<Vec<RetrievedDocument>> {
        let path = self.path(keyword, top_k, unix_day());
        if let Ok(raw) = std::fs::read_to_string(&path) {
            if let Ok(docs) = serde_json::from_str(&raw) {
                return Ok(docs);
            }
        }
        let docs = self.inner.search_keyword(keyword, top_k)?;
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer(&tmp, &docs)?;
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        Ok(docs)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    struct Fake {
        calls: AtomicUsize,
    }

    fn doc(id: &str) -> RetrievedDocument {
        RetrievedDocument {
            source: Source::Wikipedia,
            title: id.into(),
            body: format!("about {id}"),
            source_id: id.into(),
            fetched_at: 0,
        }
    }

    impl DocumentSource for Fake {
        fn source(&self) -> Source {
            Source::Wikipedia
        }

        fn search_keyword(&self, keyword: &str, top_k: usize) -> Result<Vec<RetrievedDocument>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(match keyword {
                "fever" => vec![doc("Fever"), doc("Malaria"), doc("Flu")],
                "rash" => vec![doc("Measles"), doc("Malaria")],
                "fail" => return Err(Error::Transport("down".into())),
                _ => vec![],
            }
            .into_iter()
            .take(top_k)
            .collect())
        }
    }

    fn fake() -> Fake {
        Fake {
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn merge_dedups_and_caps() {
        let kws = KeywordSet::new(vec!["fever".into(), "rash".into(), "nothing".into()]).unwrap();
        let docs = search_all(&fake(), &kws, 2).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.source_id.as_str()).collect();
        assert_eq!(ids, ["Fever", "Malaria", "Measles"]);
        assert!(docs.len() <= 2 * kws.len());
    }

    #[test]
    fn failures_become_retrieval_errors() {
        let kws = KeywordSet::new(vec!["fever".into(), "fail".into()]).unwrap();
        assert!(matches!(
            search_all(&fake(), &kws, 2),
            Err(Error::Retrieval(_))
        ));
        assert!(search_all(&fake(), &kws, 0).is_err());
    }

    #[test]
    fn cache_hits_on_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedSource::new(fake(), dir.path()).unwrap();
        let a = cached.search_keyword("fever", 3).unwrap();
        let b = cached.search_keyword("fever", 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
        cached.search_keyword("fever", 2).unwrap();
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn throttle_spaces_requests() {
        let t = Throttle::new(50.0);
        let start = Instant::now();
        for _ in 0..4 {
            t.wait();
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
        let u = Throttle::unlimited();
        let start = Instant::now();
        for _ in 0..100 {
            u.wait();
        }
        assert!(start.elapsed() < Duration::from_millis(50));
    }
}
