use std::sync::Arc;

use serde::Deserialize;

use super::sources::{DocumentSource, Throttle};
use super::{now_secs, RetrievedDocument, Source};
use crate::error::{Error, Result};
use crate::llm::{HttpTransport, RetryPolicy};

pub const EUTILS_BASE: &str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils";

/// NCBI E-utilities client: `esearch` for PubMed IDs, then `efetch` for
/// titles and abstracts.
///
/// With `open_access_only`, only articles that carry a PubMed Central id
/// are kept, so every returned abstract has a freely available full text.
pub struct PubMedClient {
    base: String,
    api_key: Option<String>,
    open_access_only: bool,
    transport: Arc<dyn HttpTransport>,
    retry: RetryPolicy,
    throttle: Arc<Throttle>,
}

#[derive(Deserialize)]
struct ESearchBody {
    esearchresult: ESearchResult,
}

#[derive(Deserialize)]
struct ESearchResult {
    #[serde(default)]
    idlist: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Article {
    pub pmid: String,
    pub title: String,
    pub abstract_text: String,
    pub pmc_id: Option<String>,
}

impl PubMedClient {
    pub fn new(
        base: &str,
        api_key: Option<String>,
        open_access_only: bool,
        transport: Arc<dyn HttpTransport>,
        retry: RetryPolicy,
        throttle: Arc<Throttle>,
    ) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            api_key,
            open_access_only,
            transport,
            retry,
            throttle,
        }
    }

    fn get(&self, endpoint: &str, query: &[(&str, &str)]) -> Result<String> {
        let url = format!("{}/{endpoint}", self.base);
        let mut query = query.to_vec();
        if let Some(key) = &self.api_key {
            query.push(("api_key", key));
        }
        let (body, _) = self.retry.run(|_| {
            self.throttle.wait();
            self.transport.get(&url, &query)?.into_success()
        })?;
        Ok(body)
    }
}

fn element_text(node: roxmltree::Node<'_, '_>) -> String {
    node.descendants()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn parse_efetch(xml: &str) -> Result<Vec<Article>> {
    let doc = roxmltree::Document::parse(xml)
        .map_err(|e| Error::Retrieval(format!("efetch XML: {e}")))?;
    let mut out = Vec::new();
    for article in doc
        .descendants()
        .filter(|n| n.has_tag_name("PubmedArticle"))
    {
        let find = |name: &str| article.descendants().find(|n| n.has_tag_name(name));
        let Some(pmid) = find("PMID").map(element_text) else {
            continue;
        };
        let title = find("ArticleTitle").map(element_text).unwrap_or_default();
        let abstract_text = article
            .descendants()
            .filter(|n| n.has_tag_name("AbstractText"))
            .map(|n| match n.attribute("Label") {
                Some(label) => format!("{label}: {}", element_text(n)),
                None => element_text(n),
            })
            .collect::<Vec<_>>()
            .join(" ");
        let pmc_id = article
            .descendants()
            .filter(|n| n.has_tag_name("ArticleId"))
            .find(|n| n.attribute("IdType") == Some("pmc"))
            .map(element_text);
        out.push(Article {
            pmid,
            title,
            abstract_text,
            pmc_id,
        });
    }
    Ok(out)
}

impl DocumentSource for PubMedClient {
    fn source(&self) -> Source {
        Source::PubMed
    }

    fn search_keyword(&self, keyword: &str, top_k: usize) -> Result<Vec<RetrievedDocument>> {
        // Over-fetch when filtering so closed articles do not starve the result.
        let retmax = if self.open_access_only {
            (top_k * 3).min(100)
        } else {
            top_k
        }
        .to_string();
        let raw = self.get(
            "esearch.fcgi",
            &[
                ("db", "pubmed"),
                ("term", keyword),
                ("retmax", &retmax),
                ("retmode", "json"),
            ],
        )?;
        let ids = serde_json::from_str::<ESearchBody>(&raw)
            .map_err(|e| Error::Retrieval(format!("esearch response: {e}")))?
            .esearchresult
            .idlist;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let joined = ids.join(",");
        let xml = self.get(
            "efetch.fcgi",
            &[("db", "pubmed"), ("id", &joined), ("retmode", "xml")],
        )?;
        let articles = parse_efetch(&xml)?;
        let fetched_at = now_secs();
        Ok(ids
            .iter()
            .filter_map(|id| articles.iter().find(|a| &a.pmid == id))
            .filter(|a| !self.open_access_only || a.pmc_id.is_some())
            .filter(|a| !a.abstract_text.trim().is_empty())
            .take(top_k)
            .map(|a| RetrievedDocument {
                source: Source::PubMed,
                title: a.title.clone(),
                body: a.abstract_text.clone(),
                source_id: format!("PMID {}", a.pmid),
                fetched_at,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_structured_abstracts() {
        let xml = r#"<?xml version="1.0"?>
<PubmedArticleSet>
 <PubmedArticle>
  <MedlineCitation><PMID Version="1">111</PMID>
   <Article><ArticleTitle>Fever <i>in</i> kids</ArticleTitle>
    <Abstract>
     <AbstractText Label="BACKGROUND">Fever is common.</AbstractText>
     <AbstractText Label="RESULTS">It  resolves.</AbstractText>
    </Abstract>
   </Article>
  </MedlineCitation>
  <PubmedData><ArticleIdList>
   <ArticleId IdType="pubmed">111</ArticleId>
   <ArticleId IdType="pmc">PMC42</ArticleId>
  </ArticleIdList></PubmedData>
 </PubmedArticle>
 <PubmedArticle>
  <MedlineCitation><PMID>222</PMID><Article><ArticleTitle>Closed</ArticleTitle>
   <Abstract><AbstractText>Text &amp; more.</AbstractText></Abstract></Article></MedlineCitation>
 </PubmedArticle>
</PubmedArticleSet>"#;
        let a = parse_efetch(xml).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].title, "Fever in kids");
        assert_eq!(
            a[0].abstract_text,
            "BACKGROUND: Fever is common. RESULTS: It resolves."
        );
        assert_eq!(a[0].pmc_id.as_deref(), Some("PMC42"));
        assert_eq!(a[1].abstract_text, "Text & more.");
        assert_eq!(a[1].pmc_id, None);
        assert!(parse_efetch("<broken").is_err());
    }
}
