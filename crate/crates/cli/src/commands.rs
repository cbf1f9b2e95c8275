use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ddx_core::ingest::{
    build_disease_set, load_dataset, read_cases, sample_cases, split_example_store, write_json,
    DatasetDescriptor, DedupMode, RareBenchSubset, SampleManifest, SAMPLER,
};
use ddx_core::llm::{
    CachedEmbedder, ChatBackend, EmbeddingProvider, HashingEmbedder, HttpEmbeddingProvider,
    HttpTransport, OpenAiChatBackend, ScriptFile, ScriptedBackend, TracedChat, UreqTransport,
};
use ddx_core::metrics::{build_report, render_table, trace_files, RunReport};
use ddx_core::model::{Dataset, PatientCase};
use ddx_core::orchestrator::RoleBackends;
use ddx_core::prompts::PromptSet;
use ddx_core::retrieval::{
    CachedSource, Corpus, CorpusTransport, DocumentSource, PubMedClient, Retriever, Throttle,
    WikipediaClient,
};
use ddx_core::runner::{CaseRunner, CaseStatus, RunOutcome};
use ddx_core::strategy::{ExampleStore, Shots, StrategyAgent};
use ddx_core::trace::{write_trace, Component, LogicalClock, Trace, TraceHeader};
use ddx_core::{Error, Rational, Result, Scalar};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{
    BackendSpec, BackendsConfig, DatasetFormat, EmbeddingConfig, RationaleSource, RunConfig,
};
use crate::replay::{render, ReplayOptions};
use crate::{EvalArgs, IngestArgs, ReplayArgs, RunArgs, ScalarArg, EXIT_NONE_COMPLETED, EXIT_OK};

pub const CASES_FILE: &str = "cases.json";
pub const POOL_FILE: &str = "example_pool.json";
pub const DISEASES_FILE: &str = "diseases.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SKIPPED_FILE: &str = "skipped.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const STORE_FILE: &str = "example_store.json";
/// Traces of model calls made outside case runs.
pub const AUX_DIR: &str = "aux";

const ROLES: [&str; 5] = ["driver", "doctor", "patient", "retrieval", "strategy"];

pub fn ingest(args: &IngestArgs) -> Result<i32> {
    let desc = DatasetDescriptor::new(args.dataset, args.path.clone(), args.subset)?;
    let report = load_dataset(&desc)?;
    let mode: DedupMode = args.dedup.into();
    let build = match mode {
        DedupMode::Exact => build_disease_set(&report.cases, mode, None)?,
        DedupMode::BackendAssisted => {
            let path = args
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("assisted dedup needs --config".into()))?;
            let config = RunConfig::load(path)?;
            let backends = BackendPool::new(&config.backends)?.instantiate()?;
            let trace = Trace::new("disease-merge", Arc::new(LogicalClock::default()));
            let chat = TracedChat::new(
                backends.driver.as_ref(),
                config.driver.chat,
                &trace,
                Component::Driver,
            );
            let prompts = load_prompts(&config)?;
            let build = build_disease_set(&report.cases, mode, Some((&chat, &prompts)))?;
            let header = TraceHeader::new("disease-merge", args.dataset, "");
            write_aux_trace(&args.out, "disease_merge.jsonl", &header, &trace)?;
            build
        }
    };
    for w in &build.warnings {
        eprintln!("warning: {w}");
    }
    let mut cases = report.cases;
    build.set.attach(&mut cases)?;
    let n = args.n.unwrap_or(cases.len());
    let sample = sample_cases(&cases, n, args.seed)?;
    let ids: HashSet<String> = sample.iter().map(|c| c.case_id.clone()).collect();
    let pool = split_example_store(&cases, &ids);
    let manifest = SampleManifest {
        dataset: args.dataset,
        subset: args.subset,
        sampler: SAMPLER.into(),
        seed: args.seed,
        n,
        case_ids: sample.iter().map(|c| c.case_id.clone()).collect(),
        skipped_records: report.skipped.len(),
        total_records: report.total_records,
    };
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join(CASES_FILE), &sample)?;
    write_json(&args.out.join(POOL_FILE), &pool)?;
    write_json(&args.out.join(DISEASES_FILE), &build.set)?;
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    write_json(&args.out.join(SKIPPED_FILE), &report.skipped)?;
    println!(
        "{}: {} cases sampled, {} in the example pool, {} diseases, {} of {} records skipped",
        args.out.display(),
        sample.len(),
        pool.len(),
        build.set.len(),
        report.skipped.len(),
        report.total_records
    );
    Ok(EXIT_OK)
}

fn write_aux_trace(out_dir: &Path, name: &str, header: &TraceHeader, trace: &Trace) -> Result<()> {
    let dir = out_dir.join(AUX_DIR);
    std::fs::create_dir_all(&dir)?;
    write_trace(&dir.join(name), header, &trace.events())
}

enum Prepared {
    /// Instantiated per case so response counters start fresh.
    Scripted(ScriptFile),
    Shared(Arc<dyn ChatBackend>),
}

/// One prepared backend per distinct spec; roles sharing a spec share an
/// instance within a case.
pub struct BackendPool {
    prepared: Vec<Prepared>,
    roles: [usize; 5],
}

impl BackendPool {
    pub fn new(config: &BackendsConfig) -> Result<Self> {
        let mut specs: Vec<&BackendSpec> = Vec::new();
        let mut prepared = Vec::new();
        let mut roles = [0; 5];
        for (slot, role) in roles.iter_mut().zip(ROLES) {
            let spec = config.role(role);
            *slot = match specs.iter().position(|s| *s == spec) {
                Some(i) => i,
                None => {
                    specs.push(spec);
                    prepared.push(prepare(spec)?);
                    specs.len() - 1
                }
            };
        }
        Ok(Self { prepared, roles })
    }

    pub fn instantiate(&self) -> Result<RoleBackends> {
        let made = self
            .prepared
            .iter()
            .map(|p| -> Result<Arc<dyn ChatBackend>> {
                Ok(match p {
                    Prepared::Scripted(script) => Arc::new(ScriptedBackend::from_script(script)?),
                    Prepared::Shared(b) => b.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let [driver, doctor, patient, retrieval, strategy] = self.roles.map(|i| made[i].clone());
        Ok(RoleBackends {
            driver,
            doctor,
            patient,
            retrieval,
            strategy,
        })
    }
}

fn prepare(spec: &BackendSpec) -> Result<Prepared> {
    Ok(match spec {
        BackendSpec::Scripted { script } => {
            let text = std::fs::read_to_string(script)
                .map_err(|e| Error::Config(format!("{}: {e}", script.display())))?;
            let file: ScriptFile = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", script.display())))?;
            ScriptedBackend::from_script(&file)?;
            Prepared::Scripted(file)
        }
        BackendSpec::OpenAi {
            base_url,
            model,
            api_key_env,
            timeout_secs,
            retry,
        } => {
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(*timeout_secs)));
            Prepared::Shared(Arc::new(OpenAiChatBackend::from_env(
                base_url,
                model,
                api_key_env.as_deref(),
                transport,
                *retry,
            )?))
        }
    })
}

fn env_secret(var: Option<&str>) -> Result<Option<String>> {
    var.map(|v| {
        std::env::var(v).map_err(|_| Error::Config(format!("environment variable {v} is not set")))
    })
    .transpose()
}

fn load_prompts(config: &RunConfig) -> Result<PromptSet> {
    match &config.prompts_dir {
        Some(dir) => PromptSet::load_dir(dir),
        None => Ok(PromptSet::default()),
    }
}

/// SHA-256 over every template name and text.
pub fn prompts_hash(prompts: &PromptSet) -> String {
    let mut h = Sha256::new();
    for t in prompts.templates() {
        h.update(t.name().as_bytes());
        h.update([0]);
        h.update(t.text().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

struct LoadedCases {
    eval: Vec<PatientCase>,
    /// Dataset cases outside the evaluation set.
    rest: Vec<PatientCase>,
}

fn load_cases(config: &RunConfig) -> Result<LoadedCases> {
    let ds = &config.dataset;
    let all = match ds.format {
        DatasetFormat::Unified => read_cases(&ds.path)?,
        DatasetFormat::Upstream => {
            let desc = DatasetDescriptor::new(ds.kind, ds.path.clone(), ds.subset)?;
            let report = load_dataset(&desc)?;
            let mut cases = report.cases;
            build_disease_set(&cases, DedupMode::Exact, None)?
                .set
                .attach(&mut cases)?;
            cases
        }
    };
    if let Some(c) = all.iter().find(|c| c.dataset != ds.kind) {
        return Err(Error::Config(format!(
            "case {} is {}, config says {}",
            c.case_id, c.dataset, ds.kind
        )));
    }
    let eval = match config.sample {
        Some(s) => sample_cases(&all, s.n, s.seed)?,
        None => all.clone(),
    };
    let ids: HashSet<String> = eval.iter().map(|c| c.case_id.clone()).collect();
    Ok(LoadedCases {
        rest: split_example_store(&all, &ids),
        eval,
    })
}

fn build_embedder(config: &RunConfig) -> Result<Option<Arc<dyn EmbeddingProvider<f64>>>> {
    Ok(match &config.embedding {
        None => None,
        Some(EmbeddingConfig::Hashing { dimension }) => {
            Some(Arc::new(HashingEmbedder::new(*dimension)))
        }
        Some(EmbeddingConfig::Http {
            base_url,
            model,
            api_key_env,
            cache_dir,
        }) => {
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(60)));
            let inner = HttpEmbeddingProvider::new(
                base_url,
                model,
                env_secret(api_key_env.as_deref())?,
                transport,
                config.retrieval.retry,
            );
            let mut cached = CachedEmbedder::new(inner);
            if let Some(dir) = cache_dir {
                cached = cached.with_disk_cache(dir)?;
            }
            Some(Arc::new(cached))
        }
    })
}

fn build_strategy(
    config: &RunConfig,
    rest: Vec<PatientCase>,
    prompts: &PromptSet,
    backends: &BackendPool,
    out_dir: &Path,
) -> Result<StrategyAgent<f64>> {
    let mode = config.strategy.mode.clone();
    let embedder = build_embedder(config)?;
    let store = if mode.shots == Shots::ZeroShot {
        None
    } else {
        let mut store = match (&config.strategy.store, &config.strategy.pool) {
            (Some(path), _) => ExampleStore::load(path)?,
            (None, Some(pool)) => ExampleStore::from_cases(read_cases(pool)?),
            (None, None) => ExampleStore::from_cases(rest),
        };
        if store.is_empty() {
            return Err(Error::Config(
                "few-shot mode needs at least one example case".into(),
            ));
        }
        match config.strategy.rationales {
            RationaleSource::Placeholder => {
                store.placeholder_rationales();
            }
            RationaleSource::Generate => {
                let roles = backends.instantiate()?;
                let trace = Trace::new("rationales", Arc::new(LogicalClock::default()));
                let chat = TracedChat::new(
                    roles.strategy.as_ref(),
                    config.driver.chat,
                    &trace,
                    Component::Strategy,
                );
                let result = store.generate_rationales(&chat, prompts, config.dataset.kind);
                let header = TraceHeader::new("rationales", config.dataset.kind, "");
                write_aux_trace(out_dir, "rationales.jsonl", &header, &trace)?;
                result?;
            }
        }
        if mode.shots == Shots::FewShotDynamic {
            let e = embedder.as_deref().ok_or_else(|| {
                Error::Config("dynamic few-shot needs an [embedding] section".into())
            })?;
            if store.embedding_model() != Some(e.model_id()) {
                store = store.embed_with(e)?;
            }
        }
        store.save(&out_dir.join(STORE_FILE))?;
        Some(Arc::new(store))
    };
    let agent = StrategyAgent {
        mode,
        store,
        embedder,
        ddx_length: config.ddx_length,
    };
    agent.validate()?;
    Ok(agent)
}

fn build_retriever(config: &RunConfig) -> Result<Retriever> {
    let r = &config.retrieval;
    let (transport, throttle): (Arc<dyn HttpTransport>, Arc<Throttle>) = match &r.corpus {
        Some(path) => (
            Arc::new(CorpusTransport::new(Corpus::load(path)?)),
            Arc::new(Throttle::unlimited()),
        ),
        None => (
            Arc::new(UreqTransport::new(Duration::from_secs(30))),
            Arc::new(Throttle::new(r.requests_per_second)),
        ),
    };
    let wiki = WikipediaClient::new(
        &r.wikipedia_endpoint,
        transport.clone(),
        r.retry,
        throttle.clone(),
    );
    let pubmed = PubMedClient::new(
        &r.pubmed_base,
        env_secret(r.pubmed_api_key_env.as_deref())?,
        r.open_access_only,
        transport,
        r.retry,
        throttle,
    );
    let (wikipedia, pubmed): (Arc<dyn DocumentSource>, Arc<dyn DocumentSource>) = match &r.cache_dir
    {
        Some(dir) => (
            Arc::new(CachedSource::new(wiki, &dir.join("wikipedia"))?),
            Arc::new(CachedSource::new(pubmed, &dir.join("pubmed"))?),
        ),
        None => (Arc::new(wiki), Arc::new(pubmed)),
    };
    Ok(Retriever {
        wikipedia: Some(wikipedia),
        pubmed: Some(pubmed),
        top_k: r.top_k,
    })
}

/// Everything needed to reproduce a run. Holds no timestamps, so repeated
/// runs of one config write identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    /// Hash of the config with `output_dir` cleared.
    pub config_sha256: String,
    pub prompts_sha256: String,
    pub dataset: Dataset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<RareBenchSubset>,
    pub sampler: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub n: usize,
    pub case_ids: Vec<String>,
    pub models: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    pub example_count: usize,
    pub completed: usize,
    pub failed: Vec<String>,
}

fn apply_overrides(config: &mut RunConfig, args: &RunArgs) -> Result<()> {
    if let Some(o) = &args.output {
        config.output_dir = o.clone();
    }
    let policy = &mut config.driver.policy;
    if let Some(p) = args.policy {
        policy.kind = p.into();
    }
    if let Some(m) = args.max_iterations {
        policy.max_iterations = m;
    }
    if let Some(q) = args.questions {
        policy.questions_per_iteration = q;
    }
    if args.stop_on_stable {
        policy.stop_on_stable = true;
    }
    if let Some(p) = args.parallelism {
        config.parallelism = p;
    }
    match (args.n, args.seed, &mut config.sample) {
        (None, None, _) => {}
        (n, seed, Some(s)) => {
            s.n = n.unwrap_or(s.n);
            s.seed = seed.unwrap_or(s.seed);
        }
        (Some(n), seed, None) => {
            config.sample = Some(crate::config::SampleConfig {
                n,
                seed: seed.unwrap_or(0),
            })
        }
        (None, Some(_), None) => {
            return Err(Error::Config(
                "--seed needs --n or a [sample] section".into(),
            ))
        }
    }
    Ok(())
}

pub fn run(args: &RunArgs) -> Result<i32> {
    let mut config = RunConfig::load(&args.config)?;
    apply_overrides(&mut config, args)?;
    config.validate()?;
    let prompts = load_prompts(&config)?;
    let loaded = load_cases(&config)?;
    let out_dir = config.output_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    let pool = BackendPool::new(&config.backends)?;
    let strategy = build_strategy(&config, loaded.rest, &prompts, &pool, &out_dir)?;
    let retriever = build_retriever(&config)?;
    let factory = || pool.instantiate();
    let runner = CaseRunner {
        config: &config.driver,
        prompts: &prompts,
        backends: &factory,
        retriever: &retriever,
        strategy: &strategy,
        clock: config.clock,
    };
    let outcome = runner.run_all(&loaded.eval, &out_dir, config.parallelism)?;
    let manifest = manifest(&config, &prompts, &loaded.eval, &pool, &strategy, &outcome)?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    for f in outcome.failed() {
        eprintln!(
            "case {} failed: {}",
            f.case_id,
            f.error.as_deref().unwrap_or("")
        );
    }
    // Sorted by file name, as `eval` reads them.
    let mut files: Vec<PathBuf> = outcome
        .results
        .iter()
        .map(|r| out_dir.join(&r.trace_file))
        .collect();
    files.sort();
    if !files.is_empty() {
        let report = build_report::<f64>(&files, &ddx_core::metrics::DEFAULT_K_VALUES)?;
        write_json(&out_dir.join(REPORT_JSON), &report)?;
        let label = out_dir.file_name().map_or_else(
            || out_dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let table = render_table(&[(label.as_str(), &report)]);
        std::fs::write(out_dir.join(REPORT_TXT), &table)?;
        print!("{table}");
    }
    println!(
        "{} of {} cases completed; traces in {}",
        outcome.completed(),
        outcome.results.len(),
        out_dir.display()
    );
    Ok(if outcome.completed() == 0 {
        EXIT_NONE_COMPLETED
    } else {
        EXIT_OK
    })
}

fn manifest(
    config: &RunConfig,
    prompts: &PromptSet,
    cases: &[PatientCase],
    pool: &BackendPool,
    strategy: &StrategyAgent<f64>,
    outcome: &RunOutcome,
) -> Result<RunManifest> {
    let mut hashed = config.clone();
    hashed.output_dir = PathBuf::new();
    let models = pool
        .instantiate()?
        .model_ids()
        .into_iter()
        .map(|(role, id)| (role.to_string(), id))
        .collect();
    Ok(RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        config_sha256: hashed.hash(),
        prompts_sha256: prompts_hash(prompts),
        dataset: config.dataset.kind,
        subset: config.dataset.subset,
        sampler: SAMPLER.into(),
        seed: config.sample.map(|s| s.seed),
        n: cases.len(),
        case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
        models,
        embedding_model: strategy.embedder.as_ref().map(|e| e.model_id().to_string()),
        example_count: strategy.store.as_ref().map_or(0, |s| s.len()),
        completed: outcome.completed(),
        failed: outcome
            .results
            .iter()
            .filter(|r| r.status == CaseStatus::Failed)
            .map(|r| r.case_id.clone())
            .collect(),
    })
}

fn reports<S: Scalar>(runs: &[(String, Vec<PathBuf>)], k: &[u32]) -> Result<Vec<RunReport<S>>> {
    runs.iter()
        .map(|(_, files)| build_report::<S>(files, k))
        .collect()
}

fn table<S: Scalar>(runs: &[(String, Vec<PathBuf>)], k: &[u32]) -> Result<String> {
    let reports = reports::<S>(runs, k)?;
    let rows: Vec<(&str, &RunReport<S>)> =
        runs.iter().map(|(n, _)| n.as_str()).zip(&reports).collect();
    Ok(render_table(&rows))
}

pub fn eval(args: &EvalArgs) -> Result<i32> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        let files =
            trace_files(dir).map_err(|e| Error::Metrics(format!("{}: {e}", dir.display())))?;
        if files.is_empty() {
            return Err(Error::Metrics(format!("no traces in {}", dir.display())));
        }
        runs.push((dir.display().to_string(), files));
    }
    let text = match args.scalar {
        ScalarArg::F32 => table::<f32>(&runs, &args.k)?,
        ScalarArg::F64 => table::<f64>(&runs, &args.k)?,
        ScalarArg::Exact => table::<Rational>(&runs, &args.k)?,
    };
    print!("{text}");
    if let Some(out) = &args.out {
        let reports = reports::<f64>(&runs, &args.k)?;
        let named: BTreeMap<&str, &RunReport<f64>> =
            runs.iter().map(|(n, _)| n.as_str()).zip(&reports).collect();
        write_json(out, &named)?;
    }
    Ok(EXIT_OK)
}

pub fn replay(args: &ReplayArgs) -> Result<i32> {
    let trace = ddx_core::trace::read_trace(&args.trace).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("{}: {io}", args.trace.display())),
        other => other,
    })?;
    print!(
        "{}",
        render(
            &trace,
            ReplayOptions {
                verbose: args.verbose
            }
        )
    );
    Ok(EXIT_OK)
}
