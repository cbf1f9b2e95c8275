//! The run configuration file (TOML).
//!
//! `${VAR}` anywhere in the file is replaced by the environment variable
//! `VAR` before parsing; an unset variable is an error. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use ddx_core::ingest::RareBenchSubset;
use ddx_core::llm::RetryPolicy;
use ddx_core::model::{Dataset, DDX_LENGTH};
use ddx_core::orchestrator::DriverConfig;
use ddx_core::retrieval::{EUTILS_BASE, WIKIPEDIA_API};
use ddx_core::runner::ClockKind;
use ddx_core::strategy::StrategyMode;
use ddx_core::{Error, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default = "default_ddx_length")]
    pub ddx_length: usize,
    /// Directory of prompt overrides, one `<name>.txt` per template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleConfig>,
    #[serde(default)]
    pub driver: DriverConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingConfig>,
    pub backends: BackendsConfig,
}

fn default_parallelism() -> usize {
    1
}

fn default_ddx_length() -> usize {
    DDX_LENGTH
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// One of the upstream layouts, chosen by `kind`.
    #[default]
    Upstream,
    /// A JSON array of cases, as written by `ddx ingest`.
    Unified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: Dataset,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<RareBenchSubset>,
    #[serde(default)]
    pub format: DatasetFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleSource {
    /// Template rationales; no model calls.
    #[default]
    Placeholder,
    /// Ask the strategy backend for each example.
    Generate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub mode: StrategyMode,
    /// A saved example store. Without one, few-shot modes draw examples from
    /// the dataset cases outside the evaluation sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// A unified case file to build the example store from, such as the
    /// `example_pool.json` written by `ddx ingest`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<PathBuf>,
    pub rationales: RationaleSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    /// Serve both sources from a local corpus file instead of the network.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub wikipedia_endpoint: String,
    pub pubmed_base: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pubmed_api_key_env: Option<String>,
    pub open_access_only: bool,
    pub requests_per_second: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: ddx_core::retrieval::DEFAULT_TOP_K,
            corpus: None,
            wikipedia_endpoint: WIKIPEDIA_API.into(),
            pubmed_base: EUTILS_BASE.into(),
            pubmed_api_key_env: None,
            open_access_only: true,
            requests_per_second: 3.0,
            cache_dir: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Hashing {
        dimension: usize,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Canned responses from a script file.
    Scripted { script: PathBuf },
    /// An OpenAI-compatible chat completions endpoint.
    OpenAi {
        base_url: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub default: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doctor: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<BackendSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<BackendSpec>,
}

impl BackendsConfig {
    pub fn role(&self, role: &str) -> &BackendSpec {
        let spec = match role {
            "driver" => &self.driver,
            "doctor" => &self.doctor,
            "patient" => &self.patient,
            "retrieval" => &self.retrieval,
            "strategy" => &self.strategy,
            _ => &None,
        };
        spec.as_ref().unwrap_or(&self.default)
    }
}

/// Replace every `${VAR}` with the environment value.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex");
    let mut missing = Vec::new();
    let out = re.replace_all(text, |c: &regex::Captures<'_>| {
        lookup(&c[1]).unwrap_or_else(|| {
            missing.push(c[1].to_string());
            String::new()
        })
    });
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "unset environment variables: {}",
            missing.join(", ")
        )));
    }
    Ok(out.into_owned())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = lexical_join(base, p);
    }
}

/// `base.join(rel)` with `.` and `..` components folded away.
fn lexical_join(base: &Path, rel: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = base.to_path_buf();
    for c in rel.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let text = interpolate(text, |v| std::env::var(v).ok())?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config =
            Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        config.resolve_paths(&base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        resolve(base, &mut self.dataset.path);
        for p in [
            self.prompts_dir.as_mut(),
            self.strategy.store.as_mut(),
            self.strategy.pool.as_mut(),
            self.retrieval.corpus.as_mut(),
            self.retrieval.cache_dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        if let Some(EmbeddingConfig::Http {
            cache_dir: Some(p), ..
        }) = &mut self.embedding
        {
            resolve(base, p);
        }
        let b = &mut self.backends;
        for spec in std::iter::once(&mut b.default).chain(
            [
                &mut b.driver,
                &mut b.doctor,
                &mut b.patient,
                &mut b.retrieval,
                &mut b.strategy,
            ]
            .into_iter()
            .filter_map(Option::as_mut),
        ) {
            if let BackendSpec::Scripted { script } = spec {
                resolve(base, script);
            }
        }
    }

    /// Checks that need no I/O beyond path existence.
    pub fn validate(&self) -> Result<()> {
        self.driver.policy.validate()?;
        self.strategy.mode.validate()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.ddx_length == 0 {
            return Err(Error::Config("ddx_length must be at least 1".into()));
        }
        if self.retrieval.top_k == 0 {
            return Err(Error::Config("retrieval.top_k must be at least 1".into()));
        }
        if self.dataset.format == DatasetFormat::Upstream {
            ddx_core::ingest::DatasetDescriptor::new(
                self.dataset.kind,
                self.dataset.path.clone(),
                self.dataset.subset,
            )?;
        }
        let mut paths = vec![&self.dataset.path];
        paths.extend(self.prompts_dir.iter());
        paths.extend(self.strategy.store.iter());
        paths.extend(self.strategy.pool.iter());
        paths.extend(self.retrieval.corpus.iter());
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
output_dir = "runs/x"
parallelism = 2
clock = "logical"

[dataset]
kind = "ddxplus"
path = "data/ddxplus"

[sample]
n = 3
seed = 7

[driver]
patient = "oracle"

[driver.policy]
kind = "dynamic"
max_iterations = 2
questions_per_iteration = 10

[strategy.mode]
shots = "few_shot_dynamic"
reasoning = "cot"
embedding_model = "hashing-64"

[embedding]
kind = "hashing"
dimension = 64

[backends.default]
kind = "scripted"
script = "s.json"

[backends.strategy]
kind = "open_ai"
base_url = "${BASE}"
model = "gpt-4o"
api_key_env = "OPENAI_API_KEY"
"#;

    #[test]
    fn interpolation() {
        let env = |v: &str| (v == "HOST").then(|| "example.org".to_string());
        assert_eq!(
            interpolate("https://${HOST}/v1", env).unwrap(),
            "https://example.org/v1"
        );
        assert!(matches!(interpolate("${NOPE}", env), Err(Error::Config(m)) if m.contains("NOPE")));
        assert_eq!(
            interpolate("no vars {here}", env).unwrap(),
            "no vars {here}"
        );
    }

    #[test]
    fn round_trip() {
        let text = interpolate(SAMPLE, |v| {
            (v == "BASE").then(|| "http://localhost:8000/v1".into())
        })
        .unwrap();
        let config: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config.driver.policy.max_iterations, 2);
        assert_eq!(config.strategy.mode.k_examples, 5);
        assert_eq!(config.backends.role("doctor"), &config.backends.default);
        let again: RunConfig = toml::from_str(&config.to_toml().unwrap()).unwrap();
        assert_eq!(again, config);
        assert_eq!(again.hash(), config.hash());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let text = interpolate(SAMPLE, |_| Some("x".into())).unwrap();
        let mut config: RunConfig = toml::from_str(&text).unwrap();
        config.resolve_paths(Path::new("/etc/ddx"));
        assert_eq!(config.dataset.path, Path::new("/etc/ddx/data/ddxplus"));
        assert_eq!(
            lexical_join(Path::new("/a/b"), Path::new("../c/./d")),
            Path::new("/a/c/d")
        );
        assert_eq!(
            config.backends.default,
            BackendSpec::Scripted {
                script: "/etc/ddx/s.json".into()
            }
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = interpolate(SAMPLE, |_| Some("x".into())).unwrap();
        let bad = text.replace("parallelism = 2", "parallelism = 2\ncolour = 1");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
    }
}
