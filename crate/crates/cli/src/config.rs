//! Run configuration file and command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use valuesrag::backends::BackendConfig;
use valuesrag::corpus::{CorpusRole, Fraction};
use valuesrag::prompt::Method;
use valuesrag::synth::SynthConfig;

use crate::CliError;

/// Pipeline stages that talk to a backend.
pub const STAGES: [&str; 4] = ["generate", "answer", "embed", "rerank"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    /// Canonical corpus file, written by `ingest` or `synth`.
    pub path: PathBuf,
    pub role: CorpusRole,
    /// Delimited respondents table for `ingest`.
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// Schema manifest for `ingest`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Generator settings for `synth`. Seed and role come from the run.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_fraction")]
    pub fraction: Fraction,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_fraction() -> Fraction {
    Fraction::new(1, 5).expect("valid fraction")
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fraction: default_fraction(), seed: None }
    }
}

/// A stage's backend: a mock or profile name, or an inline HTTP config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendChoice {
    Named(String),
    Http(BackendConfig),
}

impl Default for BackendChoice {
    fn default() -> Self {
        BackendChoice::Named("mock".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpora: Vec<CorpusEntry>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Stage → backend.
    #[serde(default)]
    pub backends: BTreeMap<String, BackendChoice>,
    /// Named HTTP backends that stages can refer to.
    #[serde(default)]
    pub profiles: BTreeMap<String, BackendConfig>,
    #[serde(default = "default_embed_dim")]
    pub mock_embed_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    /// Largest tolerated share of backend failures per stage.
    #[serde(default)]
    pub failure_budget: f64,
    /// Respondents processed concurrently.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Also evaluate the retrieval corpus on its validation questions.
    #[serde(default)]
    pub evaluate_retrieval: bool,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

fn default_methods() -> Vec<String> {
    vec!["all".into()]
}

fn default_embed_dim() -> usize {
    256
}

fn default_temperature() -> f64 {
    valuesrag::backends::DEFAULT_TEMPERATURE
}

fn default_top_n() -> usize {
    valuesrag::index::DEFAULT_TOP_N
}

fn default_parallelism() -> usize {
    4
}

fn default_ks() -> Vec<usize> {
    valuesrag::eval::DEFAULT_KS.to_vec()
}

/// Flags that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `stage=name` or a bare name applied to every stage.
    pub backends: Vec<String>,
    pub methods: Option<String>,
    pub ks: Option<String>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Comma-separated methods; `all` expands to the six defaults.
pub fn parse_methods(list: &[String], seed: u64) -> Result<Vec<Method>, CliError> {
    let mut out = Vec::new();
    for item in list.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        if item == "all" {
            out.extend(Method::all());
        } else {
            out.push(item.parse::<Method>().map_err(|e| config_err(e.to_string()))?);
        }
    }
    if out.is_empty() {
        return Err(config_err("no methods selected"));
    }
    Ok(out.into_iter().map(|m| m.with_seed(seed)).collect())
}

pub fn parse_ks(s: &str) -> Result<Vec<usize>, CliError> {
    let ks = s
        .split(',')
        .map(|k| k.trim().parse::<usize>().map_err(|_| config_err(format!("bad k `{k}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(config_err("ks must be positive"));
    }
    Ok(ks)
}

impl RunConfig {
    /// Read, resolve relative paths against the file's directory, apply
    /// overrides and validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for c in &mut self.corpora {
            fix(&mut c.path);
            if let Some(s) = c.source.as_mut() {
                fix(s);
            }
            if let Some(m) = c.manifest.as_mut() {
                fix(m);
            }
        }
        for p in self.profiles.values_mut() {
            if let Some(d) = p.cache_dir.as_mut() {
                fix(d);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        for b in &o.backends {
            match b.split_once('=') {
                Some((stage, name)) => {
                    let stage = canonical_stage(stage).ok_or_else(|| config_err(format!("unknown stage `{stage}`")))?;
                    self.backends.insert(stage.into(), BackendChoice::Named(name.into()));
                }
                None => {
                    for stage in STAGES {
                        self.backends.insert(stage.into(), BackendChoice::Named(b.clone()));
                    }
                }
            }
        }
        if let Some(m) = &o.methods {
            self.methods = vec![m.clone()];
        }
        if let Some(ks) = &o.ks {
            self.ks = parse_ks(ks)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let retrieval = self.corpora.iter().filter(|c| c.role == CorpusRole::Retrieval).count();
        if retrieval != 1 {
            return Err(config_err(format!("exactly one retrieval corpus is required, found {retrieval}")));
        }
        for stage in self.backends.keys() {
            if !STAGES.contains(&stage.as_str()) {
                return Err(config_err(format!("unknown backend stage `{stage}`")));
            }
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return Err(config_err("failure_budget must lie in [0, 1]"));
        }
        if self.parallelism == 0 || self.top_n == 0 || self.mock_embed_dim == 0 {
            return Err(config_err("parallelism, top_n and mock_embed_dim must be positive"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(config_err("ks must be positive"));
        }
        parse_methods(&self.methods, self.seed)?;
        let mut names = std::collections::BTreeSet::new();
        for c in &self.corpora {
            if !names.insert(c.path.clone()) {
                return Err(config_err(format!("corpus path {} listed twice", c.path.display())));
            }
        }
        Ok(())
    }

    pub fn backend(&self, stage: &str) -> BackendChoice {
        self.backends.get(stage).cloned().unwrap_or_default()
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }
}

/// Accepts stage names and the commands that use them.
pub fn canonical_stage(s: &str) -> Option<&'static str> {
    match s {
        "generate" | "summarize" => Some("generate"),
        "answer" | "run" => Some("answer"),
        "embed" | "index" => Some("embed"),
        "rerank" => Some("rerank"),
        _ => None,
    }
}
