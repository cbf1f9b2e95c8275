//! Shared domain types, disease-name normalization and the ranked-list wire
//! format.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of entries in a ranked differential.
pub const DDX_LENGTH: usize = 10;

/// Trim, case-fold and collapse internal whitespace.
pub fn normalize_disease_name(raw: &str) -> Result<String> {
    let normalized = normalize_text(raw);
    if normalized.is_empty() {
        return Err(Error::InvalidName(raw.to_string()));
    }
    Ok(normalized)
}

/// The same normalization as [`normalize_disease_name`], total on all input.
pub(crate) fn normalize_text(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A disease name together with its normalized matching key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiseaseName {
    pub raw: String,
    pub normalized: String,
}

impl DiseaseName {
    pub fn new(raw: &str) -> Result<Self> {
        Ok(Self {
            normalized: normalize_disease_name(raw)?,
            raw: raw.trim().to_string(),
        })
    }

    pub fn matches(&self, other: &str) -> bool {
        normalize_text(other) == self.normalized
    }
}

impl PartialEq for DiseaseName {
    fn eq(&self, other: &Self) -> bool {
        self.normalized == other.normalized
    }
}

impl Eq for DiseaseName {}

impl fmt::Display for DiseaseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "ddxplus", alias = "DDxPlus")]
    DDxPlus,
    #[serde(rename = "icraftmd", alias = "ICraftMD", alias = "icraft-md")]
    ICraftMD,
    #[serde(rename = "rarebench", alias = "RareBench")]
    RareBench,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::DDxPlus => "ddxplus",
            Dataset::ICraftMD => "icraftmd",
            Dataset::RareBench => "rarebench",
        }
    }

    /// Opening line of every agent system prompt for this dataset's domain.
    pub fn specialist_preface(self) -> &'static str {
        match self {
            Dataset::DDxPlus => {
                "You are a physician specializing in respiratory and general internal medicine."
            }
            Dataset::ICraftMD => "You are a dermatologist.",
            Dataset::RareBench => "You are a physician specializing in rare diseases.",
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ddxplus" => Ok(Dataset::DDxPlus),
            "icraftmd" => Ok(Dataset::ICraftMD),
            "rarebench" => Ok(Dataset::RareBench),
            _ => Err(Error::InvalidArgument(format!("unknown dataset {s:?}"))),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Sex {
    M,
    F,
    Other(String),
}

impl From<String> for Sex {
    fn from(s: String) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" | "man" => Sex::M,
            "f" | "female" | "woman" => Sex::F,
            _ => Sex::Other(s.trim().to_string()),
        }
    }
}

impl From<Sex> for String {
    fn from(s: Sex) -> Self {
        match s {
            Sex::M => "M".into(),
            Sex::F => "F".into(),
            Sex::Other(o) => o,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sex::M => f.write_str("M"),
            Sex::F => f.write_str("F"),
            Sex::Other(o) => f.write_str(o),
        }
    }
}

/// Information the patient self-reports before any dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InitialInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chief_complaint: Option<String>,
}

impl InitialInfo {
    pub fn is_empty(&self) -> bool {
        self.age.is_none() && self.sex.is_none() && self.chief_complaint.is_none()
    }

    /// One line per present field, in age/sex/complaint order.
    pub fn facts(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(age) = self.age {
            out.push(format!("Age: {age}"));
        }
        if let Some(sex) = &self.sex {
            out.push(format!("Sex: {sex}"));
        }
        if let Some(cc) = &self.chief_complaint {
            out.push(format!("Chief complaint: {cc}"));
        }
        out
    }

    pub fn render(&self) -> String {
        self.facts().join("\n")
    }
}

/// One benchmark unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCase {
    pub case_id: String,
    pub dataset: Dataset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_info: Option<InitialInfo>,
    pub full_profile: Vec<String>,
    pub diagnosis_options: Vec<String>,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_ddx: Option<Vec<String>>,
}

impl PatientCase {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidArgument(format!(
                "case {}: {msg}",
                self.case_id
            )))
        };
        if self.full_profile.iter().all(|f| f.trim().is_empty()) {
            return bad("full_profile is empty".into());
        }
        let truth = normalize_disease_name(&self.ground_truth)?;
        if !self
            .diagnosis_options
            .iter()
            .any(|o| normalize_text(o) == truth)
        {
            return bad(format!(
                "ground truth {:?} is not among the diagnosis options",
                self.ground_truth
            ));
        }
        match (&self.initial_info, self.dataset) {
            (Some(_), Dataset::RareBench) => bad("RareBench cases carry no initial info".into()),
            (Some(info), _) if info.is_empty() => bad("initial_info has no fields".into()),
            _ => Ok(()),
        }
    }

    /// The diagnosis option whose normalized form equals `name`, if any.
    pub fn canonical_option(&self, name: &str) -> Option<&str> {
        let key = normalize_text(name);
        self.diagnosis_options
            .iter()
            .find(|o| normalize_text(o) == key)
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    Dialogue,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileFact {
    pub text: String,
    pub source: Provenance,
}

/// The facts the orchestrator knows about a patient. Append-only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    facts: Vec<ProfileFact>,
}

impl PatientProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_initial(info: Option<&InitialInfo>) -> Self {
        let mut profile = Self::new();
        if let Some(info) = info {
            profile.merge(info.facts(), Provenance::Initial);
        }
        profile
    }

    pub fn facts(&self) -> &[ProfileFact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn contains(&self, fact: &str) -> bool {
        let key = normalize_text(fact);
        self.facts.iter().any(|f| normalize_text(&f.text) == key)
    }

    /// Append the facts not already present; returns how many were added.
    pub fn merge<I, S>(&mut self, new_facts: I, source: Provenance) -> usize
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut added = 0;
        for fact in new_facts {
            let text = fact.as_ref().trim();
            if text.is_empty() || self.contains(text) {
                continue;
            }
            self.facts.push(ProfileFact {
                text: text.to_string(),
                source,
            });
            added += 1;
        }
        added
    }

    /// Newline-joined fact text.
    pub fn render(&self) -> String {
        self.facts
            .iter()
            .map(|f| format!("- {}", f.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Ordered list of disease names, most likely first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedDifferential {
    pub entries: Vec<String>,
    pub produced_at_iteration: u32,
}

impl RankedDifferential {
    pub fn new(entries: Vec<String>, produced_at_iteration: u32) -> Result<Self> {
        let mut seen = Vec::with_capacity(entries.len());
        for e in &entries {
            let key = normalize_disease_name(e)?;
            if seen.contains(&key) {
                return Err(Error::InvalidArgument(format!("duplicate entry {e:?}")));
            }
            seen.push(key);
        }
        Ok(Self {
            entries,
            produced_at_iteration,
        })
    }

    /// Zero-based position of `name` after normalization.
    pub fn position(&self, name: &str) -> Option<usize> {
        let key = normalize_text(name);
        self.entries.iter().position(|e| normalize_text(e) == key)
    }

    pub fn same_entries(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| normalize_text(a) == normalize_text(b))
    }
}

/// Result of [`parse_ranked_list`]: the list plus any dedup warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRanking {
    pub ddx: RankedDifferential,
    pub warnings: Vec<String>,
}

fn rank_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.)]\s+(.*\S)\s*$").expect("valid regex"))
}

fn clean_entry(name: &str) -> &str {
    let mut s = name.trim();
    s = s.strip_suffix('.').map(str::trim_end).unwrap_or(s);
    for (open, close) in [("**", "**"), ("[", "]")] {
        if s.len() > open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
            s = s[open.len()..s.len() - close.len()].trim();
        }
    }
    s.strip_suffix('.').map(str::trim_end).unwrap_or(s)
}

/// Extract a `N. name` list from model output.
///
/// Lines before the first and after the last list line are ignored; blank
/// lines inside the list are tolerated. Ranks must run 1, 2, 3, ... and
/// repeated names are dropped with a warning. The output keeps at most
/// `max_len` entries.
pub fn parse_ranked_list(text: &str, max_len: usize) -> Result<ParsedRanking> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let lines: Vec<&str> = text.lines().collect();
    let matches: Vec<(usize, u64, &str)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, line)| {
            let caps = rank_line().captures(line)?;
            let rank = caps[1].parse().ok()?;
            Some((i, rank, caps.get(2)?.as_str()))
        })
        .collect();

    let (first, last) = match (matches.first(), matches.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => return Err(Error::ParseFailure("no ranked list lines found".into())),
    };
    if let Some(stray) = lines[first..=last]
        .iter()
        .enumerate()
        .find(|(i, l)| !l.trim().is_empty() && !matches.iter().any(|m| m.0 == first + i))
    {
        return Err(Error::ParseFailure(format!(
            "unexpected line inside ranked list: {:?}",
            stray.1
        )));
    }

    let mut entries: Vec<String> = Vec::new();
    let mut keys: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    for (expected, (_, rank, raw)) in (1u64..).zip(&matches) {
        if *rank != expected {
            return Err(Error::ParseFailure(format!(
                "expected rank {expected}, found {rank}"
            )));
        }
        let name = clean_entry(raw);
        let key = normalize_disease_name(name)
            .map_err(|_| Error::ParseFailure(format!("empty name at rank {rank}")))?;
        if keys.contains(&key) {
            warnings.push(format!("duplicate entry {name:?} at rank {rank} dropped"));
            continue;
        }
        keys.push(key);
        entries.push(name.to_string());
    }
    entries.truncate(max_len);
    Ok(ParsedRanking {
        ddx: RankedDifferential {
            entries,
            produced_at_iteration: 1,
        },
        warnings,
    })
}

/// One entry per line as `N. name`, no trailing newline.
pub fn render_ranked_list(ddx: &RankedDifferential) -> Result<String> {
    if ddx.entries.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty list".into()));
    }
    Ok(ddx
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {e}", i + 1))
        .collect::<Vec<_>>()
        .join("\n"))
}
