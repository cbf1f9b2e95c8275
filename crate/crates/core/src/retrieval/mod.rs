//! Knowledge retrieval: keyword extraction, Wikipedia and PubMed search, and
//! evidence synthesis.

mod corpus;
mod pubmed;
mod sources;
mod wikipedia;

use std::fmt;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{ChatMessage, TracedChat};
use crate::model::normalize_text;
use crate::prompts::{bullet_list, PromptSet};
use crate::trace::{DocumentRef, Payload, Step};

pub use corpus::{Corpus, CorpusTransport, PubMedRecord, WikiPage};
pub use pubmed::{PubMedClient, EUTILS_BASE};
pub use sources::{search_all, CachedSource, DocumentSource, Throttle};
pub use wikipedia::{WikipediaClient, WIKIPEDIA_API};

/// Most keyword searches run per query.
pub const MAX_KEYWORDS: usize = 3;
/// Default documents fetched per keyword.
pub const DEFAULT_TOP_K: usize = 3;
/// Summary used when a search returns nothing.
pub const NO_EVIDENCE_SUMMARY: &str =
    "No evidence found: the search returned no documents for this query.";

pub(crate) fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wikipedia,
    PubMed,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Wikipedia => "wikipedia",
            Source::PubMed => "pubmed",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis_options: Option<Vec<String>>,
}

impl SearchQuery {
    pub fn new(text: impl Into<String>, source: Source) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("search query is empty".into()));
        }
        Ok(Self {
            text,
            source,
            diagnosis_options: None,
        })
    }
}

/// One to [`MAX_KEYWORDS`] distinct keyword searches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    keywords: Vec<String>,
}

impl KeywordSet {
    /// Trims, drops blanks and repeats, and keeps the first
    /// [`MAX_KEYWORDS`].
    pub fn new(raw: Vec<String>) -> Result<Self> {
        let mut keywords: Vec<String> = Vec::new();
        for k in raw {
            let k = k.trim();
            if k.is_empty()
                || keywords
                    .iter()
                    .any(|e| normalize_text(e) == normalize_text(k))
            {
                continue;
            }
            keywords.push(k.to_string());
        }
        keywords.truncate(MAX_KEYWORDS);
        if keywords.is_empty() {
            return Err(Error::ParseFailure("keyword list is empty".into()));
        }
        Ok(Self { keywords })
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedDocument {
    pub source: Source,
    pub title: String,
    pub body: String,
    pub source_id: String,
    /// Unix seconds.
    pub fetched_at: u64,
}

impl RetrievedDocument {
    pub fn to_ref(&self) -> DocumentRef {
        DocumentRef {
            source_id: self.source_id.clone(),
            title: self.title.clone(),
            body: self.body.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSummary {
    pub text: String,
    pub cited_documents: Vec<String>,
    pub query: SearchQuery,
}

/// Parse a `[a, b, c]` list. Items may be quoted.
pub fn parse_keyword_list(text: &str) -> Result<Vec<String>> {
    let open = text
        .find('[')
        .ok_or_else(|| Error::ParseFailure("no bracketed list".into()))?;
    let close = text[open..]
        .find(']')
        .map(|c| open + c)
        .ok_or_else(|| Error::ParseFailure("unterminated bracketed list".into()))?;
    let items: Vec<String> = text[open + 1..close]
        .split(',')
        .map(|s| {
            s.trim()
                .trim_matches(|c| c == '"' || c == '\'')
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::ParseFailure("bracketed list is empty".into()));
    }
    Ok(items)
}

/// Ask the model to split the query into keyword searches, re-prompting once
/// on an unusable reply.
pub fn extract_keywords(
    chat: &TracedChat<'_>,
    prompts: &PromptSet,
    query: &SearchQuery,
) -> Result<KeywordSet> {
    if query.text.trim().is_empty() {
        return Err(Error::InvalidArgument("search query is empty".into()));
    }
    let max = MAX_KEYWORDS.to_string();
    let system = prompts.keywords_system.render(&[("MAX_KEYWORDS", &max)])?;
    let input = prompts
        .keywords_input
        .render(&[("INPUT_SEARCH", query.text.trim())])?;
    let mut messages = vec![ChatMessage::user(input)];
    let reply = chat.complete("keywords", &system, messages.clone())?;
    let parsed = parse_keyword_list(&reply).and_then(KeywordSet::new);
    match parsed {
        Ok(k) => Ok(k),
        Err(first) => {
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(format!(
                "Your reply could not be parsed ({first}). Respond only with a bracketed list such as [keyword one, keyword two]."
            )));
            let retry = chat.complete("keywords", &system, messages)?;
            parse_keyword_list(&retry)
                .and_then(KeywordSet::new)
                .map_err(|e| {
                    Error::Retrieval(format!("keyword list unusable after re-prompt: {e}"))
                })
        }
    }
}

fn render_documents(docs: &[RetrievedDocument]) -> String {
    docs.iter()
        .map(|d| format!("[{}] {}\n{}", d.source_id, d.title, d.body.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Summarize `docs` for the query. With no documents, returns
/// [`NO_EVIDENCE_SUMMARY`] without calling the model.
///
/// Cited documents are those whose identifier the summary mentions, or all
/// documents when it mentions none.
pub fn synthesize_evidence(
    chat: &TracedChat<'_>,
    prompts: &PromptSet,
    query: &SearchQuery,
    docs: &[RetrievedDocument],
) -> Result<EvidenceSummary> {
    if docs.is_empty() {
        return Ok(EvidenceSummary {
            text: NO_EVIDENCE_SUMMARY.to_string(),
            cited_documents: Vec::new(),
            query: query.clone(),
        });
    }
    let system = prompts.synthesis_system.render(&[])?;
    let options = match &query.diagnosis_options {
        Some(opts) if !opts.is_empty() => format!("\nDiagnosis Options:\n{}\n", bullet_list(opts)),
        _ => String::new(),
    };
    let input = prompts.synthesis_input.render(&[
        ("INPUT_SEARCH", query.text.trim()),
        ("SEARCH_RESULTS", &render_documents(docs)),
        ("DIAGNOSIS_OPTIONS", &options),
    ])?;
    let text = chat
        .ask("synthesis", &system, &input)
        .map_err(|e| Error::Retrieval(format!("evidence synthesis: {e}")))?;
    let lower = text.to_lowercase();
    let mut cited: Vec<String> = docs
        .iter()
        .filter(|d| lower.contains(&d.source_id.to_lowercase()))
        .map(|d| d.source_id.clone())
        .collect();
    if cited.is_empty() {
        cited = docs.iter().map(|d| d.source_id.clone()).collect();
    }
    Ok(EvidenceSummary {
        text: text.trim().to_string(),
        cited_documents: cited,
        query: query.clone(),
    })
}

/// The configured document sources.
#[derive(Clone)]
pub struct Retriever {
    pub wikipedia: Option<Arc<dyn DocumentSource>>,
    pub pubmed: Option<Arc<dyn DocumentSource>>,
    pub top_k: usize,
}

impl Retriever {
    pub fn source(&self, source: Source) -> Result<&dyn DocumentSource> {
        let s = match source {
            Source::Wikipedia => self.wikipedia.as_deref(),
            Source::PubMed => self.pubmed.as_deref(),
        };
        s.ok_or_else(|| Error::Config(format!("no {source} source configured")))
    }

    /// Keywords, search and synthesis for one query, traced on the chat's
    /// component.
    pub fn retrieve(
        &self,
        chat: &TracedChat<'_>,
        prompts: &PromptSet,
        query: &SearchQuery,
    ) -> Result<EvidenceSummary> {
        let source = self.source(query.source)?;
        let keywords = extract_keywords(chat, prompts, query)?;
        chat.trace.record(
            Step::Action,
            chat.component,
            Payload::Search {
                source: query.source.to_string(),
                keywords: keywords.keywords().to_vec(),
            },
        );
        let docs = search_all(source, &keywords, self.top_k)?;
        chat.trace.record(
            Step::Observation,
            chat.component,
            Payload::SearchResults {
                documents: docs.iter().map(RetrievedDocument::to_ref).collect(),
            },
        );
        let summary = synthesize_evidence(chat, prompts, query, &docs)?;
        chat.trace.record(
            Step::Observation,
            chat.component,
            Payload::Evidence {
                summary: summary.text.clone(),
                cited_documents: summary.cited_documents.clone(),
            },
        );
        Ok(summary)
    }
}
