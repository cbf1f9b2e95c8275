use std::sync::Arc;

use serde::Deserialize;

use super::sources::{DocumentSource, Throttle};
use super::{now_secs, RetrievedDocument, Source};
use crate::error::{Error, Result};
use crate::llm::{HttpTransport, RetryPolicy};

pub const WIKIPEDIA_API: &str = "https://en.wikipedia.org/w/api.php";

/// MediaWiki action API client: `list=search` for titles, then
/// `prop=extracts` for the plain-text lead section of each page.
pub struct WikipediaClient {
    endpoint: String,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
    throttle: Arc<Throttle>,
}

#[derive(Deserialize)]
struct SearchBody {
    query: Option<SearchQueryBody>,
}

#[derive(Deserialize)]
struct SearchQueryBody {
    #[serde(default)]
    search: Vec<SearchHit>,
}

#[derive(Deserialize)]
struct SearchHit {
    title: String,
}

#[derive(Deserialize)]
struct ExtractBody {
    query: Option<ExtractQueryBody>,
}

#[derive(Deserialize)]
struct ExtractQueryBody {
    #[serde(default)]
    pages: Vec<Page>,
}

#[derive(Deserialize)]
struct Page {
    title: String,
    #[serde(default)]
    extract: Option<String>,
}

impl WikipediaClient {
    pub fn new(
        endpoint: &str,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
        throttle: Arc<Throttle>,
    ) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            transport,
            retry,
            throttle,
        }
    }

    fn get_json<T: for<'de> Deserialize<'de>>(&self, query: &[(&str, &str)]) -> Result<T> {
        let (body, _) = self.retry.run(|_| {
            self.throttle.wait();
            self.transport.get(&self.endpoint, query)?.into_success()
        })?;
        serde_json::from_str(&body)
            .map_err(|e| Error::Retrieval(format!("wikipedia response: {e}")))
    }
}

impl DocumentSource for WikipediaClient {
    fn source(&self) -> Source {
        Source::Wikipedia
    }

    fn search_keyword(&self, keyword: &str, top_k: usize) -> Result<Vec<RetrievedDocument>> {
        let limit = top_k.to_string();
        let search: SearchBody = self.get_json(&[
            ("action", "query"),
            ("list", "search"),
            ("srsearch", keyword),
            ("srlimit", &limit),
            ("format", "json"),
            ("formatversion", "2"),
        ])?;
        let titles: Vec<String> = search
            .query
            .map(|q| q.search.into_iter().map(|h| h.title).take(top_k).collect())
            .unwrap_or_default();
        if titles.is_empty() {
            return Ok(Vec::new());
        }
        let joined = titles.join("|");
        let extracts: ExtractBody = self.get_json(&[
            ("action", "query"),
            ("prop", "extracts"),
            ("exintro", "1"),
            ("explaintext", "1"),
            ("titles", &joined),
            ("format", "json"),
            ("formatversion", "2"),
        ])?;
        let pages = extracts.query.map(|q| q.pages).unwrap_or_default();
        let fetched_at = now_secs();
        Ok(titles
            .iter()
            .filter_map(|t| pages.iter().find(|p| &p.title == t))
            .filter_map(|p| {
                let body = p.extract.as_deref()?.trim();
                (!body.is_empty()).then(|| RetrievedDocument {
                    source: Source::Wikipedia,
                    title: p.title.clone(),
                    body: body.to_string(),
                    source_id: p.title.clone(),
                    fetched_at,
                })
            })
            .collect())
    }
}
