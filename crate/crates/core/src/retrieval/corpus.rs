use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::llm::{HttpResponse, HttpTransport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WikiPage {
    pub title: String,
    pub extract: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PubMedRecord {
    pub pmid: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub open_access: bool,
}

/// An offline document collection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    #[serde(default)]
    pub wikipedia: Vec<WikiPage>,
    #[serde(default)]
    pub pubmed: Vec<PubMedRecord>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let w = w.to_lowercase();
            if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") {
                w[..w.len() - 1].to_string()
            } else {
                w
            }
        })
        .collect()
}

/// Indices of documents containing every word of `query`; title hits first.
fn matching(query: &str, docs: &[(&str, &str)]) -> Vec<usize> {
    let wanted = words(query);
    if wanted.is_empty() {
        return Vec::new();
    }
    let mut hits: Vec<(bool, usize)> = docs
        .iter()
        .enumerate()
        .filter_map(|(i, (title, body))| {
            let title_words = words(title);
            let mut all = title_words.clone();
            all.extend(words(body));
            wanted.iter().all(|w| all.contains(w)).then(|| {
                let in_title = wanted.iter().all(|w| title_words.contains(w));
                (!in_title, i)
            })
        })
        .collect();
    hits.sort();
    hits.into_iter().map(|(_, i)| i).collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Answers MediaWiki and E-utilities requests from a [`Corpus`], so the
/// real clients run offline. Requests are logged.
pub struct CorpusTransport {
    corpus: Corpus,
    log: Mutex<Vec<String>>,
}

impl CorpusTransport {
    pub fn new(corpus: Corpus) -> Self {
        Self {
            corpus,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<String> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn wiki(&self, q: &dyn Fn(&str) -> Option<String>) -> serde_json::Value {
        if q("list").as_deref() == Some("search") {
            let limit: usize = q("srlimit").and_then(|s| s.parse().ok()).unwrap_or(10);
            let docs: Vec<(&str, &str)> = self
                .corpus
                .wikipedia
                .iter()
                .map(|p| (p.title.as_str(), p.extract.as_str()))
                .collect();
            let hits: Vec<_> = matching(&q("srsearch").unwrap_or_default(), &docs)
                .into_iter()
                .take(limit)
                .map(|i| json!({"title": self.corpus.wikipedia[i].title}))
                .collect();
            json!({"query": {"search": hits}})
        } else {
            let titles = q("titles").unwrap_or_default();
            let pages: Vec<_> = titles
                .split('|')
                .filter_map(|t| self.corpus.wikipedia.iter().find(|p| p.title == t))
                .map(|p| json!({"title": p.title, "extract": p.extract}))
                .collect();
            json!({"query": {"pages": pages}})
        }
    }

    fn esearch(&self, q: &dyn Fn(&str) -> Option<String>) -> String {
        let limit: usize = q("retmax").and_then(|s| s.parse().ok()).unwrap_or(20);
        let docs: Vec<(&str, &str)> = self
            .corpus
            .pubmed
            .iter()
            .map(|r| (r.title.as_str(), r.abstract_text.as_str()))
            .collect();
        let ids: Vec<_> = matching(&q("term").unwrap_or_default(), &docs)
            .into_iter()
            .take(limit)
            .map(|i| self.corpus.pubmed[i].pmid.clone())
            .collect();
        json!({"esearchresult": {"count": ids.len().to_string(), "idlist": ids}}).to_string()
    }

    fn efetch(&self, q: &dyn Fn(&str) -> Option<String>) -> String {
        let mut xml = String::from("<?xml version=\"1.0\"?>\n<PubmedArticleSet>\n");
        for id in q("id").unwrap_or_default().split(',') {
            let Some(r) = self.corpus.pubmed.iter().find(|r| r.pmid == id) else {
                continue;
            };
            xml.push_str(&format!(
                "<PubmedArticle><MedlineCitation><PMID>{}</PMID><Article><ArticleTitle>{}</ArticleTitle><Abstract><AbstractText>{}</AbstractText></Abstract></Article></MedlineCitation><PubmedData><ArticleIdList><ArticleId IdType=\"pubmed\">{}</ArticleId>",
                xml_escape(&r.pmid),
                xml_escape(&r.title),
                xml_escape(&r.abstract_text),
                xml_escape(&r.pmid),
            ));
            if r.open_access {
                xml.push_str(&format!(
                    "<ArticleId IdType=\"pmc\">PMC{}</ArticleId>",
                    xml_escape(&r.pmid)
                ));
            }
            xml.push_str("</ArticleIdList></PubmedData></PubmedArticle>\n");
        }
        xml.push_str("</PubmedArticleSet>\n");
        xml
    }
}

impl HttpTransport for CorpusTransport {
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<HttpResponse> {
        let q = |k: &str| {
            query
                .iter()
                .find(|(key, _)| *key == k)
                .map(|(_, v)| v.to_string())
        };
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(format!("GET {url} {query:?}"));
        let body = if url.ends_with("api.php") {
            self.wiki(&q).to_string()
        } else if url.ends_with("esearch.fcgi") {
            self.esearch(&q)
        } else if url.ends_with("efetch.fcgi") {
            self.efetch(&q)
        } else {
            return Ok(HttpResponse {
                status: 404,
                body: format!("no corpus route for {url}"),
            });
        };
        Ok(HttpResponse { status: 200, body })
    }

    fn post_json(&self, url: &str, _: &[(&str, &str)], _: &str) -> Result<HttpResponse> {
        Ok(HttpResponse {
            status: 404,
            body: format!("no corpus route for POST {url}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_requires_all_words_and_prefers_titles() {
        let docs = [
            ("Malaria", "A fever disease spread by mosquitoes"),
            ("Fever", "Raised body temperature"),
            ("Rash", "Skin eruption"),
        ];
        assert_eq!(matching("fever", &docs), [1, 0]);
        assert_eq!(matching("mosquitoes fever", &docs), [0]);
        assert!(matching("", &docs).is_empty());
        assert!(matching("cough", &docs).is_empty());
    }

    #[test]
    fn escapes_xml() {
        assert_eq!(xml_escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }
}
