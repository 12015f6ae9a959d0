//! Command-line driver: each subcommand runs one pipeline stage from a TOML
//! run configuration and leaves its artifacts under the output directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! split.json                  topic split of the retrieval corpus
//! summaries/<corpus>.jsonl    summary stores
//! index.bin, index.meta.json  embedding index and its stamp
//! cache/                      response cache
//! reports/{run,ablate}/       report.{json,txt,csv}, records.jsonl, manifest.json
//! ```

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgAction, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{info, warn, Level};

use valuesrag::backends::{
    BackendConfig, EchoGenerator, Embedder, GenerationService, Generator, HashAnswerer, HashEmbedder, HttpEmbedder,
    HttpGenerator, HttpReranker, OverlapReranker, Reranker, ResponseCache,
};
use valuesrag::corpus::{ingest_corpus, stratified_split, Corpus, CorpusRole, Manifest, TopicSplit};
use valuesrag::eval::{
    ablate_k, render_report, run_evaluation, EvalContext, EvalDataset, EvalRecord, EvalReport, ReportFormat,
};
use valuesrag::index::{build_index, EmbeddingIndex};
use valuesrag::prompt::{PromptBuilder, TemplateSet};
use valuesrag::summarize::{run_summary_pipeline, PipelineOptions, SummaryMode, SummaryStore};
use valuesrag::synth::{generate_corpus, HiddenTruth, OracleAnswerer};
use valuesrag::util::{digest_bytes, digest_parts};

use config::{parse_methods, BackendChoice, CorpusEntry, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PREREQUISITE: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing prerequisite from stage `{stage}`: {message}")]
    Prerequisite { stage: &'static str, message: String },
    #[error("stage `{stage}`: {failed} of {total} backend calls failed, over the budget of {budget}")]
    Budget { stage: &'static str, failed: usize, total: usize, budget: f64 },
    #[error("{0}")]
    Fatal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Fatal(_) => EXIT_CONFIG,
            CliError::Prerequisite { .. } => EXIT_PREREQUISITE,
            CliError::Budget { .. } => EXIT_BUDGET,
        }
    }

    /// Machine-readable error record.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config(m) => json!({"error": "config", "message": m}),
            CliError::Fatal(m) => json!({"error": "fatal", "message": m}),
            CliError::Prerequisite { stage, message } => {
                json!({"error": "prerequisite_missing", "stage": stage, "message": message})
            }
            CliError::Budget { stage, failed, total, budget } => json!({
                "error": "backend_failure_budget", "stage": stage, "failed": failed, "total": total, "budget": budget
            }),
        }
    }
}

fn fatal(e: impl std::fmt::Display) -> CliError {
    CliError::Fatal(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "valuesrag", version, about = "Values summary retrieval pipeline for survey answering")]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "valuesrag.toml")]
    pub config: PathBuf,
    /// Top-level seed; every stage derives its randomness from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Backend override, `stage=name` or a bare name for every stage.
    #[arg(long = "backend", global = true)]
    pub backends: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert delimited survey tables into canonical corpora.
    Ingest,
    /// Generate synthetic corpora.
    Synth,
    /// Split the retrieval corpus's values questions into train and validation.
    Split,
    /// Generate topic, values and demographic summaries.
    Summarize,
    /// Embed retrieval-corpus demographic summaries.
    Index,
    /// Evaluate methods and write reports.
    Run {
        /// Comma-separated methods, e.g. `all` or `zero_shot,values_rag:k=5`.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Sweep the number of retrieved summaries.
    Ablate {
        #[arg(long)]
        ks: Option<String>,
    },
    /// Print every report in the output directory.
    Report,
}

/// Parse arguments, run, print any error as JSON on stderr, return the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        backends: cli.backends.clone(),
        methods: match &cli.command {
            Command::Run { methods } => methods.clone(),
            _ => None,
        },
        ks: match &cli.command {
            Command::Ablate { ks } => ks.clone(),
            _ => None,
        },
    };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallelism).build_global();
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Config(format!("output_dir: {e}")))?;
    let p = Pipeline { cfg, templates: TemplateSet::builtin() };
    match &cli.command {
        Command::Ingest => p.ingest(),
        Command::Synth => p.synth(),
        Command::Split => p.split().map(|_| ()),
        Command::Summarize => p.summarize(),
        Command::Index => p.index().map(|_| ()),
        Command::Run { .. } => p.evaluate(false),
        Command::Ablate { .. } => p.evaluate(true),
        Command::Report => p.report(),
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SplitArtifact {
    fingerprint: String,
    split: TopicSplit,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct IndexStamp {
    fingerprint: String,
    store_digest: String,
    backend_id: String,
    rows: usize,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    stage: String,
    /// Shared by every report built from the same upstream artifacts.
    fingerprint: String,
    /// Also covers the methods or ks of this report.
    run_fingerprint: String,
    report_fingerprint: String,
    seed: u64,
    split_seed: u64,
    backends: BTreeMap<String, String>,
    templates: BTreeMap<String, String>,
    methods: Vec<String>,
    datasets: Vec<String>,
}

struct Loaded {
    entry: CorpusEntry,
    corpus: Corpus,
    digest: String,
}

struct Pipeline {
    cfg: RunConfig,
    templates: TemplateSet,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fatal)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(fatal)?;
    fs::rename(&tmp, path).map_err(fatal)
}

fn hidden_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("hidden.json")
}

fn over_budget(failed: usize, total: usize, budget: f64) -> bool {
    total > 0 && failed as f64 > budget * total as f64
}

impl Pipeline {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn ingest(&self) -> Result<(), CliError> {
        let mut done = 0;
        for entry in &self.cfg.corpora {
            let (Some(source), Some(manifest)) = (&entry.source, &entry.manifest) else { continue };
            let manifest = Manifest::from_path(manifest).map_err(|e| CliError::Config(e.to_string()))?;
            if manifest.role != entry.role {
                return Err(CliError::Config(format!("manifest role {} differs from configured {}", manifest.role, entry.role)));
            }
            let (corpus, diagnostics) = ingest_corpus(source, &manifest).map_err(fatal)?;
            write_atomic(&entry.path, &corpus.to_canonical_bytes())?;
            let mut diag = String::new();
            for d in &diagnostics {
                diag.push_str(&serde_json::to_string(d).map_err(fatal)?);
                diag.push('\n');
            }
            write_atomic(&self.out(&format!("ingest/{}.diagnostics.jsonl", corpus.name())), diag.as_bytes())?;
            println!(
                "ingested {} ({} respondents, {} rows rejected) -> {}",
                corpus.name(),
                corpus.respondents().len(),
                diagnostics.len(),
                entry.path.display()
            );
            done += 1;
        }
        if done == 0 {
            return Err(CliError::Config("no corpus has both `source` and `manifest`".into()));
        }
        Ok(())
    }

    fn synth(&self) -> Result<(), CliError> {
        let mut done = 0;
        for entry in &self.cfg.corpora {
            let Some(synth) = &entry.synth else { continue };
            let cfg = valuesrag::synth::SynthConfig { seed: self.cfg.seed, role: entry.role, ..synth.clone() };
            let (corpus, hidden) = generate_corpus(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            write_atomic(&entry.path, &corpus.to_canonical_bytes())?;
            hidden.write(&hidden_path(&entry.path)).map_err(fatal)?;
            println!("generated {} ({} respondents) -> {}", corpus.name(), corpus.respondents().len(), entry.path.display());
            done += 1;
        }
        if done == 0 {
            return Err(CliError::Config("no corpus has a `synth` section".into()));
        }
        Ok(())
    }

    fn load(&self, entry: &CorpusEntry) -> Result<Loaded, CliError> {
        if !entry.path.exists() {
            let stage = if entry.synth.is_some() { "synth" } else { "ingest" };
            return Err(CliError::Prerequisite { stage, message: format!("corpus {} not found", entry.path.display()) });
        }
        let bytes = fs::read(&entry.path).map_err(fatal)?;
        let corpus = Corpus::read_canonical(&entry.path).map_err(fatal)?;
        if corpus.role() != entry.role {
            return Err(CliError::Config(format!(
                "corpus {} has role {} but is configured as {}",
                corpus.name(),
                corpus.role(),
                entry.role
            )));
        }
        Ok(Loaded { entry: entry.clone(), corpus, digest: digest_bytes(&bytes) })
    }

    fn corpora(&self) -> Result<(Loaded, Vec<Loaded>), CliError> {
        let mut retrieval = None;
        let mut tests = Vec::new();
        for entry in &self.cfg.corpora {
            let l = self.load(entry)?;
            match entry.role {
                CorpusRole::Retrieval => retrieval = Some(l),
                CorpusRole::Test => tests.push(l),
            }
        }
        let mut names: Vec<&str> = tests.iter().map(|t| t.corpus.name()).collect();
        names.extend(retrieval.iter().map(|r| r.corpus.name()));
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("corpus names must be distinct".into()));
        }
        Ok((retrieval.expect("validated: one retrieval corpus"), tests))
    }

    fn split_fingerprint(&self, retrieval: &Loaded) -> String {
        digest_parts(["split/v1", &retrieval.digest, &self.cfg.split.fraction.to_string(), &self.cfg.split_seed().to_string()])
    }

    fn split(&self) -> Result<TopicSplit, CliError> {
        let (retrieval, _) = self.corpora()?;
        let fingerprint = self.split_fingerprint(&retrieval);
        let path = self.out("split.json");
        if let Ok(existing) = self.read_split(&retrieval) {
            println!("split up to date: {}", path.display());
            return Ok(existing);
        }
        let split = stratified_split(&retrieval.corpus, self.cfg.split.fraction, self.cfg.split_seed())
            .map_err(|e| CliError::Config(e.to_string()))?;
        let artifact = SplitArtifact { fingerprint, split };
        write_atomic(&path, &serde_json::to_vec_pretty(&artifact).map_err(fatal)?)?;
        println!(
            "split {}: {} train, {} validation -> {}",
            retrieval.corpus.name(),
            artifact.split.train_qids.len(),
            artifact.split.validation_qids.len(),
            path.display()
        );
        Ok(artifact.split)
    }

    fn read_split(&self, retrieval: &Loaded) -> Result<TopicSplit, CliError> {
        let path = self.out("split.json");
        let missing = |m: String| CliError::Prerequisite { stage: "split", message: m };
        let bytes = fs::read(&path).map_err(|_| missing(format!("{} not found", path.display())))?;
        let artifact: SplitArtifact = serde_json::from_slice(&bytes).map_err(|e| missing(e.to_string()))?;
        if artifact.fingerprint != self.split_fingerprint(retrieval) {
            return Err(missing(format!("{} is stale", path.display())));
        }
        Ok(artifact.split)
    }

    // -- backends

    fn cache(&self, profile: Option<&BackendConfig>) -> Result<ResponseCache, CliError> {
        let dir = profile.and_then(|p| p.cache_dir.clone()).unwrap_or_else(|| self.out("cache"));
        ResponseCache::new(dir).map_err(fatal)
    }

    fn profile(&self, stage: &str) -> Result<Option<BackendConfig>, CliError> {
        match self.cfg.backend(stage) {
            BackendChoice::Http(c) => Ok(Some(c)),
            BackendChoice::Named(name) => match self.cfg.profiles.get(&name) {
                Some(c) => Ok(Some(c.clone())),
                None => Ok(None),
            },
        }
    }

    fn mock_name(&self, stage: &str) -> String {
        match self.cfg.backend(stage) {
            BackendChoice::Named(n) => n,
            BackendChoice::Http(_) => String::new(),
        }
    }

    fn unknown(&self, stage: &str, name: &str) -> CliError {
        CliError::Config(format!("unknown backend `{name}` for stage `{stage}`"))
    }

    fn generator(&self) -> Result<GenerationService, CliError> {
        let profile = self.profile("generate")?;
        let backend: Arc<dyn Generator> = match &profile {
            Some(c) => Arc::new(HttpGenerator::new(c.clone()).map_err(|e| CliError::Config(e.to_string()))?),
            None => match self.mock_name("generate").as_str() {
                "mock" | "echo" => Arc::new(EchoGenerator::new()),
                other => return Err(self.unknown("generate", other)),
            },
        };
        Ok(GenerationService::new(backend, Some(self.cache(profile.as_ref())?)))
    }

    fn answerer(&self, retrieval: &Loaded) -> Result<GenerationService, CliError> {
        let profile = self.profile("answer")?;
        let backend: Arc<dyn Generator> = match &profile {
            Some(c) => Arc::new(HttpGenerator::new(c.clone()).map_err(|e| CliError::Config(e.to_string()))?),
            None => match self.mock_name("answer").as_str() {
                "mock" | "hash" => Arc::new(HashAnswerer::new()),
                "oracle" => {
                    let path = hidden_path(&retrieval.entry.path);
                    if !path.exists() {
                        return Err(CliError::Prerequisite {
                            stage: "synth",
                            message: format!("oracle answerer needs {}", path.display()),
                        });
                    }
                    let hidden = HiddenTruth::read(&path).map_err(fatal)?;
                    Arc::new(OracleAnswerer::new(&retrieval.corpus, &hidden))
                }
                other => return Err(self.unknown("answer", other)),
            },
        };
        Ok(GenerationService::new(backend, Some(self.cache(profile.as_ref())?)))
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        match self.profile("embed")? {
            Some(c) => Ok(Box::new(HttpEmbedder::new(c).map_err(|e| CliError::Config(e.to_string()))?)),
            None => match self.mock_name("embed").as_str() {
                "mock" | "hash" => Ok(Box::new(HashEmbedder::new(self.cfg.mock_embed_dim))),
                other => Err(self.unknown("embed", other)),
            },
        }
    }

    fn reranker(&self) -> Result<Box<dyn Reranker>, CliError> {
        match self.profile("rerank")? {
            Some(c) => Ok(Box::new(HttpReranker::new(c).map_err(|e| CliError::Config(e.to_string()))?)),
            None => match self.mock_name("rerank").as_str() {
                "mock" | "overlap" => Ok(Box::new(OverlapReranker::new())),
                other => Err(self.unknown("rerank", other)),
            },
        }
    }

    // -- summaries

    fn store_path(&self, corpus: &Corpus) -> PathBuf {
        self.out(&format!("summaries/{}.jsonl", corpus.name()))
    }

    fn summary_fingerprint(&self, loaded: &Loaded, split_fp: Option<&str>, generator_id: &str) -> String {
        digest_parts([
            "summaries/v1",
            &loaded.digest,
            split_fp.unwrap_or("-"),
            generator_id,
            &self.templates.fingerprint(),
        ])
    }

    fn summarize(&self) -> Result<(), CliError> {
        let (retrieval, tests) = self.corpora()?;
        let split = self.read_split(&retrieval)?;
        let split_fp = self.split_fingerprint(&retrieval);
        let service = self.generator()?;
        let gen_id = service.backend_id();
        let jobs = std::iter::once((&retrieval, SummaryMode::Full)).chain(tests.iter().map(|t| (t, SummaryMode::DemographicsOnly)));
        for (loaded, mode) in jobs {
            let split_ref = (mode == SummaryMode::Full).then_some(&split);
            let fingerprint = self.summary_fingerprint(loaded, split_ref.map(|_| split_fp.as_str()), &gen_id);
            let path = self.store_path(&loaded.corpus);
            if path.exists() {
                let stale = SummaryStore::load(&path).map(|s| s.header.fingerprint != fingerprint).unwrap_or(true);
                if stale {
                    warn!(path = %path.display(), "summary store was built from other inputs; starting over");
                    fs::remove_file(&path).map_err(fatal)?;
                }
            }
            let opts = PipelineOptions { mode, fingerprint, parallelism: self.cfg.parallelism };
            let (store, report) = run_summary_pipeline(&loaded.corpus, split_ref, &service, &self.templates, &path, &opts)
                .map_err(fatal)?;
            println!(
                "summarized {}: {} new, {} already complete, {} failed -> {}",
                loaded.corpus.name(),
                report.summarized,
                report.already_complete,
                report.failures.len(),
                path.display()
            );
            let total = loaded.corpus.respondents().len();
            if over_budget(report.failures.len(), total, self.cfg.failure_budget) {
                for (id, e) in report.failures.iter().take(5) {
                    warn!(respondent = %id, error = %e, "summary failure");
                }
                return Err(CliError::Budget {
                    stage: "summarize",
                    failed: report.failures.len(),
                    total,
                    budget: self.cfg.failure_budget,
                });
            }
            info!(records = store.len(), "store written");
        }
        Ok(())
    }

    fn read_store(&self, loaded: &Loaded, fingerprint: &str) -> Result<SummaryStore, CliError> {
        let path = self.store_path(&loaded.corpus);
        let missing = |m: String| CliError::Prerequisite { stage: "summarize", message: m };
        if !path.exists() {
            return Err(missing(format!("{} not found", path.display())));
        }
        let store = SummaryStore::load(&path).map_err(|e| missing(e.to_string()))?;
        if store.header.fingerprint != fingerprint {
            return Err(missing(format!("{} is stale", path.display())));
        }
        Ok(store)
    }

    fn stores(&self, retrieval: &Loaded, tests: &[Loaded]) -> Result<(SummaryStore, Vec<SummaryStore>, Vec<String>), CliError> {
        self.read_split(retrieval)?;
        let split_fp = self.split_fingerprint(retrieval);
        let gen_id = self.generator()?.backend_id();
        let rfp = self.summary_fingerprint(retrieval, Some(&split_fp), &gen_id);
        let rstore = self.read_store(retrieval, &rfp)?;
        let mut fps = vec![rfp];
        let mut tstores = Vec::new();
        for t in tests {
            let fp = self.summary_fingerprint(t, None, &gen_id);
            tstores.push(self.read_store(t, &fp)?);
            fps.push(fp);
        }
        Ok((rstore, tstores, fps))
    }

    // -- index

    fn index(&self) -> Result<(EmbeddingIndex, String), CliError> {
        let (retrieval, _) = self.corpora()?;
        self.read_split(&retrieval)?;
        let split_fp = self.split_fingerprint(&retrieval);
        let gen_id = self.generator()?.backend_id();
        let rfp = self.summary_fingerprint(&retrieval, Some(&split_fp), &gen_id);
        let store = self.read_store(&retrieval, &rfp)?;
        let embedder = self.embedder()?;
        let fingerprint = digest_parts(["index/v1", &rfp, &embedder.backend_id()]);
        let store_digest = digest_bytes(&fs::read(self.store_path(&retrieval.corpus)).map_err(fatal)?);
        let (bin, meta) = (self.out("index.bin"), self.out("index.meta.json"));
        if let (Ok(stamp), true) = (fs::read(&meta), bin.exists()) {
            let stamp: Option<IndexStamp> = serde_json::from_slice(&stamp).ok();
            if stamp.is_some_and(|s| s.fingerprint == fingerprint && s.store_digest == store_digest) {
                let index = EmbeddingIndex::read(&bin).map_err(fatal)?;
                println!("index up to date: {}", bin.display());
                return Ok((index, fingerprint));
            }
        }
        let index = build_index(&store, embedder.as_ref(), 64).map_err(fatal)?;
        index.write(&bin).map_err(fatal)?;
        let stamp = IndexStamp {
            fingerprint: fingerprint.clone(),
            store_digest,
            backend_id: index.backend_id().to_string(),
            rows: index.len(),
            dim: index.dim(),
        };
        write_atomic(&meta, &serde_json::to_vec_pretty(&stamp).map_err(fatal)?)?;
        println!("indexed {} rows (d={}) -> {}", index.len(), index.dim(), bin.display());
        Ok((index, fingerprint))
    }

    fn read_index(&self, retrieval: &Loaded, summary_fp: &str) -> Result<(EmbeddingIndex, String), CliError> {
        let missing = |m: String| CliError::Prerequisite { stage: "index", message: m };
        let (bin, meta) = (self.out("index.bin"), self.out("index.meta.json"));
        let stamp = fs::read(&meta).map_err(|_| missing(format!("{} not found", meta.display())))?;
        let stamp: IndexStamp = serde_json::from_slice(&stamp).map_err(|e| missing(e.to_string()))?;
        let fingerprint = digest_parts(["index/v1", summary_fp, &self.embedder()?.backend_id()]);
        let store_digest = digest_bytes(&fs::read(self.store_path(&retrieval.corpus)).map_err(fatal)?);
        if stamp.fingerprint != fingerprint || stamp.store_digest != store_digest {
            return Err(missing(format!("{} is stale", bin.display())));
        }
        let index = EmbeddingIndex::read(&bin).map_err(|e| missing(e.to_string()))?;
        Ok((index, fingerprint))
    }

    // -- evaluation

    fn evaluate(&self, sweep: bool) -> Result<(), CliError> {
        let (retrieval, tests) = self.corpora()?;
        let (rstore, tstores, summary_fps) = self.stores(&retrieval, &tests)?;
        let (index, index_fp) = self.read_index(&retrieval, &summary_fps[0])?;
        let split = self.read_split(&retrieval)?;
        let answerer = self.answerer(&retrieval)?;
        let embedder = self.embedder()?;
        let reranker = self.reranker()?;
        let builder = PromptBuilder::new(self.templates.clone());

        let mut backends = BTreeMap::new();
        backends.insert("generate".to_string(), self.generator()?.backend_id());
        backends.insert("answer".to_string(), answerer.backend_id());
        backends.insert("embed".to_string(), embedder.backend_id());
        backends.insert("rerank".to_string(), reranker.backend_id());
        let mut parts = vec!["pipeline/v1".to_string(), index_fp];
        parts.extend(summary_fps.iter().cloned());
        parts.extend(backends.values().cloned());
        parts.extend([
            self.cfg.top_n.to_string(),
            format!("{:?}", self.cfg.temperature),
            self.cfg.seed.to_string(),
            self.cfg.evaluate_retrieval.to_string(),
        ]);
        let fingerprint = digest_parts(&parts);

        let methods = parse_methods(&self.cfg.methods, self.cfg.seed)?;
        let labels: Vec<String> = if sweep {
            self.cfg.ks.iter().map(|k| format!("values_rag(k={k})")).collect()
        } else {
            methods.iter().map(|m| m.label()).collect()
        };
        let stage = if sweep { "ablate" } else { "run" };
        let run_fingerprint = digest_parts(std::iter::once(fingerprint.clone()).chain(labels.iter().cloned()));
        let dir = self.out(&format!("reports/{stage}"));
        if let Ok(bytes) = fs::read(dir.join("manifest.json")) {
            let existing: Option<RunManifest> = serde_json::from_slice(&bytes).ok();
            if existing.is_some_and(|m| m.run_fingerprint == run_fingerprint) && dir.join("report.json").exists() {
                println!("{stage} report up to date: {}", dir.display());
                return Ok(());
            }
        }

        let mut datasets: Vec<EvalDataset<'_>> = tests
            .iter()
            .zip(&tstores)
            .map(|(t, s)| EvalDataset { corpus: &t.corpus, store: s, split: None })
            .collect();
        if self.cfg.evaluate_retrieval || datasets.is_empty() {
            datasets.push(EvalDataset { corpus: &retrieval.corpus, store: &rstore, split: Some(&split) });
        }
        let mut ctx = EvalContext::new(&rstore, &index, embedder.as_ref(), reranker.as_ref(), &answerer, &builder);
        ctx.top_n = self.cfg.top_n;
        ctx.temperature = self.cfg.temperature;
        ctx.fingerprint = fingerprint.clone();
        let (report, records) = if sweep {
            ablate_k(&ctx, &datasets, &self.cfg.ks, self.cfg.seed)
        } else {
            run_evaluation(&ctx, &datasets, &methods)
        }
        .map_err(|e| CliError::Config(e.to_string()))?;

        self.write_report(&dir, &report, &records)?;
        let manifest = RunManifest {
            stage: stage.into(),
            fingerprint,
            run_fingerprint,
            report_fingerprint: report.config_fingerprint.clone(),
            seed: self.cfg.seed,
            split_seed: self.cfg.split_seed(),
            backends,
            templates: self.templates.hashes(),
            methods: report.methods.clone(),
            datasets: report.datasets.clone(),
        };
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).map_err(fatal)?)?;
        print!("{}", render_report(&report, ReportFormat::Text).map_err(fatal)?);
        println!("wrote {}", dir.display());

        let failed = records.iter().filter(|r| r.is_backend_failure()).count();
        if over_budget(failed, records.len(), self.cfg.failure_budget) {
            return Err(CliError::Budget {
                stage: if sweep { "ablate" } else { "run" },
                failed,
                total: records.len(),
                budget: self.cfg.failure_budget,
            });
        }
        Ok(())
    }

    fn write_report(&self, dir: &Path, report: &EvalReport, records: &[EvalRecord]) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(fatal)?;
        // records last, so a complete report.json implies complete records
        let mut lines = Vec::new();
        for r in records {
            serde_json::to_writer(&mut lines, r).map_err(fatal)?;
            lines.write_all(b"\n").map_err(fatal)?;
        }
        write_atomic(&dir.join("records.jsonl"), &lines)?;
        write_atomic(&dir.join("report.txt"), render_report(report, ReportFormat::Text).map_err(fatal)?.as_bytes())?;
        write_atomic(&dir.join("report.csv"), render_report(report, ReportFormat::Csv).map_err(fatal)?.as_bytes())?;
        write_atomic(&dir.join("report.json"), report.to_json().as_bytes())
    }

    fn report(&self) -> Result<(), CliError> {
        let mut found = Vec::new();
        for stage in ["run", "ablate"] {
            let dir = self.out(&format!("reports/{stage}"));
            let (Ok(m), Ok(r)) = (fs::read(dir.join("manifest.json")), fs::read(dir.join("report.json"))) else { continue };
            let manifest: RunManifest = serde_json::from_slice(&m).map_err(fatal)?;
            let report: EvalReport = serde_json::from_slice(&r).map_err(fatal)?;
            if report.config_fingerprint != manifest.report_fingerprint {
                return Err(fatal(format!("{} does not match its manifest", dir.join("report.json").display())));
            }
            found.push((stage, manifest, report));
        }
        if found.is_empty() {
            return Err(CliError::Prerequisite { stage: "run", message: "no reports found".into() });
        }
        if let Some((_, first, _)) = found.first() {
            if let Some((stage, m, _)) = found.iter().find(|(_, m, _)| m.fingerprint != first.fingerprint) {
                return Err(CliError::Config(format!(
                    "reports come from different pipeline runs ({stage} has fingerprint {}, expected {})",
                    m.fingerprint, first.fingerprint
                )));
            }
        }
        let mut out = String::new();
        for (stage, _, report) in &found {
            out.push_str(&format!("== {stage}\n"));
            out.push_str(&render_report(report, ReportFormat::Text).map_err(fatal)?);
            out.push('\n');
        }
        write_atomic(&self.out("reports/summary.txt"), out.as_bytes())?;
        print!("{out}");
        Ok(())
    }
}
