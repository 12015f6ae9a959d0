//! Binarized accuracy, paired significance testing with Holm-Bonferroni
//! correction, the evaluation loop over methods, and report rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;
use tracing::info;

use crate::backends::{embed_batch, Embedder, GenerationRequest, GenerationService, Reranker};
use crate::corpus::{Answer, Corpus, CorpusRole, Question, ResponseScale, TopicSplit};
use crate::index::{rerank_top_k, IndexError, retrieve_top_n, EmbeddingIndex, RerankedSet, DEFAULT_TOP_N};
use crate::prompt::{parse_answer, FewShotExample, Method, MethodKind, PromptBuilder, PromptBundle, ShotSource};
use crate::summarize::SummaryStore;
use crate::util::digest_parts;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];
/// Prefix of item errors caused by a backend rather than missing inputs.
pub const BACKEND_ERROR_PREFIX: &str = "backend: ";
pub const HOLM_FAMILY: &str = "per dataset: values_rag against each baseline present";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("code {code} is a missing-value code")]
    MissingCode { code: i64 },
    #[error("code {code} is outside {min}..={max}")]
    OutOfRange { code: i64, min: i64, max: i64 },
    #[error("no valid records to score")]
    NoValidRecords,
    #[error("paired samples differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("paired test needs at least two units, got {0}")]
    TooFewUnits(usize),
    #[error("p-value {0} is outside [0, 1]")]
    InvalidP(f64),
    #[error("alpha {0} is outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("report has no cells")]
    EmptyReport,
    #[error("dataset `{0}` is the retrieval corpus but no split was supplied")]
    MissingSplit(String),
    #[error("{0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Scoring

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    Disagree = 0,
    Agree = 1,
}

impl BinaryLabel {
    pub fn value(self) -> u8 {
        self as u8
    }
}

/// 0 iff `code` ≤ (min+max)/2, compared exactly as 2·code ≤ min+max.
pub fn binarize(code: i64, scale: &ResponseScale) -> Result<BinaryLabel, EvalError> {
    if scale.is_missing(code) {
        return Err(EvalError::MissingCode { code });
    }
    if !scale.contains(code) {
        return Err(EvalError::OutOfRange { code, min: scale.min, max: scale.max });
    }
    Ok(if 2 * code <= scale.twice_midpoint() { BinaryLabel::Disagree } else { BinaryLabel::Agree })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Scored,
    /// Model output had no usable option code.
    Invalid,
    /// Prompt could not be built or the backend failed.
    Failed,
    /// Unordered scale; excluded from binarized scoring.
    NonBinarizable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub method: String,
    pub respondent_id: String,
    pub question_id: String,
    pub status: ItemStatus,
    pub predicted_code: Option<i64>,
    pub gold_code: i64,
    pub predicted_binary: Option<BinaryLabel>,
    pub gold_binary: Option<BinaryLabel>,
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot_source: Option<ShotSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub accuracy: f64,
    pub n: usize,
    pub invalid: usize,
}

/// Correct over scored records; invalid outputs are tallied but excluded.
pub fn accuracy(records: &[EvalRecord]) -> Result<AccuracySummary, EvalError> {
    let n = records.iter().filter(|r| r.correct.is_some()).count();
    let invalid = records.iter().filter(|r| r.status == ItemStatus::Invalid).count();
    if n == 0 {
        return Err(EvalError::NoValidRecords);
    }
    let correct = records.iter().filter(|r| r.correct == Some(true)).count();
    Ok(AccuracySummary { accuracy: correct as f64 / n as f64, n, invalid })
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Undefined when the differences have zero variance.
    pub t: Option<f64>,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    /// Zero variance of differences: p is 1 for a zero mean, 0 otherwise.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a − b` with n−1 degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewUnits(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(TTest { t: None, p, df, mean_diff: mean, degenerate: true });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTest { t: Some(t), p, df, mean_diff: mean, degenerate: false })
}

fn check_inputs(p_values: &[f64], alpha: f64) -> Result<(), EvalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvalError::InvalidAlpha(alpha));
    }
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::InvalidP(p));
    }
    Ok(())
}

/// Step-down Holm procedure; rejections in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, EvalError> {
    check_inputs(p_values, alpha)?;
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut out = vec![false; m];
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= alpha / (m - rank) as f64 {
            out[i] = true;
        } else {
            break;
        }
    }
    Ok(out)
}

/// Plain Bonferroni: reject p ≤ alpha/m.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, EvalError> {
    check_inputs(p_values, alpha)?;
    let m = p_values.len() as f64;
    Ok(p_values.iter().map(|&p| p <= alpha / m).collect())
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Methods,
    KSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub method: String,
    pub accuracy: Option<f64>,
    pub n: usize,
    pub invalid: usize,
    pub failed: usize,
    pub non_binarizable: usize,
    /// Hash over the cell's item outcomes and request hashes.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub method: String,
    pub baseline: String,
    pub n_pairs: usize,
    pub mean_diff: f64,
    pub t: Option<f64>,
    pub p_raw: f64,
    pub degenerate: bool,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    pub cells: Vec<Cell>,
    pub significance: Vec<Comparison>,
    pub alpha: f64,
    pub holm_family: String,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn cell(&self, dataset: &str, method: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.dataset == dataset && c.method == method)
    }

    /// True when every comparison for `method` on `dataset` is rejected in
    /// its favor.
    pub fn significant(&self, dataset: &str, method: &str) -> bool {
        let mut family = self.significance.iter().filter(|c| c.dataset == dataset && c.method == method).peekable();
        family.peek().is_some() && family.all(|c| c.rejected && c.mean_diff > 0.0)
    }

    /// Mean of available accuracies across datasets.
    pub fn average(&self, method: &str) -> Option<f64> {
        let accs: Vec<f64> = self.cells.iter().filter(|c| c.method == method).filter_map(|c| c.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rank {
    Best,
    Second,
    Other,
}

/// Best and second-best distinct values in a column; ties share a rank.
fn ranks(values: &[Option<f64>]) -> Vec<Rank> {
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    values
        .iter()
        .map(|v| match v {
            Some(x) if distinct.first() == Some(x) => Rank::Best,
            Some(x) if distinct.get(1) == Some(x) => Rank::Second,
            _ => Rank::Other,
        })
        .collect()
}

struct Grid {
    columns: Vec<String>,
    rows: Vec<(String, Vec<Option<f64>>, Vec<bool>)>,
}

fn grid(report: &EvalReport) -> Grid {
    let mut columns = report.datasets.clone();
    columns.push("average".into());
    let rows = report
        .methods
        .iter()
        .map(|m| {
            let mut vals: Vec<Option<f64>> =
                report.datasets.iter().map(|d| report.cell(d, m).and_then(|c| c.accuracy)).collect();
            vals.push(report.average(m));
            let mut sig: Vec<bool> = report.datasets.iter().map(|d| report.significant(d, m)).collect();
            sig.push(false);
            (m.clone(), vals, sig)
        })
        .collect();
    Grid { columns, rows }
}

/// Text table (methods × datasets + average) or long-form CSV.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String, EvalError> {
    if report.cells.is_empty() || report.methods.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let g = grid(report);
    let col_ranks: Vec<Vec<Rank>> = (0..g.columns.len())
        .map(|c| ranks(&g.rows.iter().map(|(_, v, _)| v[c]).collect::<Vec<_>>()))
        .collect();
    match format {
        ReportFormat::Text => {
            let text: Vec<Vec<String>> = g
                .rows
                .iter()
                .enumerate()
                .map(|(r, (_, vals, sig))| {
                    vals.iter()
                        .enumerate()
                        .map(|(c, v)| match v {
                            None => "n/a".to_string(),
                            Some(x) => {
                                let mark = match col_ranks[c][r] {
                                    Rank::Best => " (best)",
                                    Rank::Second => " (2nd)",
                                    Rank::Other => "",
                                };
                                format!("{x:.4}{}{mark}", if sig[c] { "*" } else { "" })
                            }
                        })
                        .collect()
                })
                .collect();
            let method_w = g.rows.iter().map(|(m, _, _)| m.len()).max().unwrap_or(0).max("method".len());
            let widths: Vec<usize> = (0..g.columns.len())
                .map(|c| text.iter().map(|row| row[c].len()).max().unwrap_or(0).max(g.columns[c].len()))
                .collect();
            let mut out = String::new();
            let _ = write!(out, "{:<method_w$}", "method");
            for (c, name) in g.columns.iter().enumerate() {
                let _ = write!(out, "  {:>w$}", name, w = widths[c]);
            }
            out.push('\n');
            let _ = writeln!(out, "{}", "-".repeat(method_w + widths.iter().map(|w| w + 2).sum::<usize>()));
            for (r, (m, _, _)) in g.rows.iter().enumerate() {
                let _ = write!(out, "{m:<method_w$}");
                for (c, cell) in text[r].iter().enumerate() {
                    let _ = write!(out, "  {:>w$}", cell, w = widths[c]);
                }
                out.push('\n');
            }
            out.push('\n');
            let _ = writeln!(
                out,
                "(best) highest, (2nd) second highest per column; * Holm-Bonferroni rejects every baseline comparison at alpha={}",
                report.alpha
            );
            let _ = writeln!(out, "config fingerprint: {}", report.config_fingerprint);
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header =
                ["method", "dataset", "accuracy", "n", "invalid", "failed", "non_binarizable", "best", "second", "significant", "provenance", "fingerprint"];
            w.write_record(header).map_err(|e| EvalError::Config(e.to_string()))?;
            for (r, (m, vals, sig)) in g.rows.iter().enumerate() {
                for (c, col) in g.columns.iter().enumerate() {
                    let cell = report.cell(col, m);
                    let acc = vals[c].map(|x| format!("{x:.6}")).unwrap_or_default();
                    let count = |f: fn(&Cell) -> usize| cell.map(|x| f(x).to_string()).unwrap_or_default();
                    w.write_record([
                        m.as_str(),
                        col.as_str(),
                        &acc,
                        &count(|x| x.n),
                        &count(|x| x.invalid),
                        &count(|x| x.failed),
                        &count(|x| x.non_binarizable),
                        &(col_ranks[c][r] == Rank::Best).to_string(),
                        &(col_ranks[c][r] == Rank::Second).to_string(),
                        &sig[c].to_string(),
                        cell.map(|x| x.provenance.as_str()).unwrap_or(""),
                        &report.config_fingerprint,
                    ])
                    .map_err(|e| EvalError::Config(e.to_string()))?;
                }
            }
            let bytes = w.into_inner().map_err(|e| EvalError::Config(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation loop

/// One corpus to evaluate with its demographic summaries.
pub struct EvalDataset<'a> {
    pub corpus: &'a Corpus,
    pub store: &'a SummaryStore,
    /// Required when `corpus` is the retrieval corpus: only its validation
    /// questions are targets.
    pub split: Option<&'a TopicSplit>,
}

impl EvalDataset<'_> {
    /// Target questions: every values question of a test corpus, or the
    /// validation questions of the retrieval corpus.
    pub fn targets(&self) -> Result<Vec<&Question>, EvalError> {
        let all = self.corpus.values_questions();
        match self.corpus.role() {
            CorpusRole::Test => Ok(all.collect()),
            CorpusRole::Retrieval => {
                let split = self.split.ok_or_else(|| EvalError::MissingSplit(self.corpus.name().into()))?;
                Ok(all.filter(|q| split.is_validation(&q.id)).collect())
            }
        }
    }
}

/// Everything shared across datasets.
pub struct EvalContext<'a> {
    pub retrieval_store: &'a SummaryStore,
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
    pub answerer: &'a GenerationService,
    pub builder: &'a PromptBuilder,
    pub top_n: usize,
    pub temperature: f64,
    pub alpha: f64,
    /// Fingerprint of the configuration that produced the inputs.
    pub fingerprint: String,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        retrieval_store: &'a SummaryStore,
        index: &'a EmbeddingIndex,
        embedder: &'a dyn Embedder,
        reranker: &'a dyn Reranker,
        answerer: &'a GenerationService,
        builder: &'a PromptBuilder,
    ) -> Self {
        Self {
            retrieval_store,
            index,
            embedder,
            reranker,
            answerer,
            builder,
            top_n: DEFAULT_TOP_N,
            temperature: crate::backends::DEFAULT_TEMPERATURE,
            alpha: DEFAULT_ALPHA,
            fingerprint: String::new(),
        }
    }

    fn report_fingerprint(&self, methods: &[Method]) -> String {
        let mut parts = vec![
            "report/v1".to_string(),
            self.fingerprint.clone(),
            HOLM_FAMILY.into(),
            format!("{:?}", self.alpha),
            format!("{:?}", self.temperature),
            self.top_n.to_string(),
            self.builder.templates().fingerprint(),
            self.answerer.backend_id(),
            self.embedder.backend_id(),
            self.reranker.backend_id(),
            self.index.backend_id().to_string(),
        ];
        parts.extend(methods.iter().map(|m| format!("{}:{}:{}", m.label(), m.seed, m.n_shots)));
        digest_parts(parts)
    }
}

/// Per-respondent retrieval results for a dataset, reranked to the largest k.
type Retrieved = HashMap<String, Result<RerankedSet, String>>;

fn retrieve_all(ctx: &EvalContext<'_>, ds: &EvalDataset<'_>, k_max: usize) -> Retrieved {
    let self_retrieval = ds.corpus.name() == ctx.retrieval_store.header.corpus;
    let people: Vec<(&str, Option<&str>)> = ds
        .corpus
        .respondents()
        .iter()
        .map(|r| (r.id.as_str(), ds.store.get(&r.id).map(|s| s.demographic_summary.as_str())))
        .collect();
    let mut out = HashMap::new();
    for chunk in people.chunks(64) {
        let texts: Vec<String> = chunk.iter().filter_map(|(_, d)| d.map(str::to_string)).collect();
        let embedded = if texts.is_empty() { Ok(Vec::new()) } else { embed_batch(&texts, ctx.embedder) };
        let mut vecs = match embedded {
            Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
            Err(e) => vec![Err(format!("{BACKEND_ERROR_PREFIX}embedding: {e}")); texts.len()],
        }
        .into_iter();
        let jobs: Vec<(&str, Option<&str>, Option<Result<Vec<f32>, String>>)> =
            chunk.iter().map(|(id, d)| (*id, *d, d.and_then(|_| vecs.next()))).collect();
        let results: Vec<(String, Result<RerankedSet, String>)> = jobs
            .into_par_iter()
            .with_max_len(1)
            .map(|(id, demo, vec)| {
                let res = match (demo, vec) {
                    (Some(demo), Some(Ok(q))) => {
                        let exclude = self_retrieval.then_some(id);
                        retrieve_top_n(ctx.index, &q, ctx.top_n, exclude)
                            .and_then(|c| rerank_top_k(demo, &c, ctx.retrieval_store, ctx.reranker, k_max))
                            .map_err(|e| match e {
                                IndexError::Backend(b) => format!("{BACKEND_ERROR_PREFIX}retrieval: {b}"),
                                other => format!("retrieval: {other}"),
                            })
                    }
                    (_, Some(Err(e))) => Err(e),
                    _ => Err("no demographic summary".to_string()),
                };
                (id.to_string(), res)
            })
            .collect();
        out.extend(results);
    }
    out
}

fn prefix(set: &RerankedSet, k: usize) -> RerankedSet {
    RerankedSet { k, entries: set.entries.iter().take(k).cloned().collect() }
}

/// Few-shot pools: each respondent's answered target items, and all of them.
struct ShotPools {
    own: HashMap<String, Vec<FewShotExample>>,
    all: Vec<FewShotExample>,
}

fn shot_pools(ds: &EvalDataset<'_>, targets: &[&Question]) -> ShotPools {
    let mut own = HashMap::new();
    let mut all = Vec::new();
    for r in ds.corpus.respondents() {
        let mut mine = Vec::new();
        for q in targets {
            if let Answer::Valid(code) = ds.corpus.answer(r, &q.id) {
                if let Some(label) = q.label(code) {
                    mine.push(FewShotExample {
                        question_id: q.id.clone(),
                        question_text: q.text.clone(),
                        answer_label: label.to_string(),
                    });
                }
            }
        }
        all.extend(mine.iter().cloned());
        own.insert(r.id.clone(), mine);
    }
    ShotPools { own, all }
}

struct ItemInputs<'x> {
    demo: Option<&'x str>,
    values: Option<&'x str>,
    retrieved: Option<&'x Result<RerankedSet, String>>,
    pools: &'x ShotPools,
}

fn build_prompt(
    builder: &PromptBuilder,
    method: &Method,
    rid: &str,
    q: &Question,
    inputs: &ItemInputs<'_>,
) -> Result<PromptBundle, String> {
    let demo = || inputs.demo.ok_or_else(|| "no demographic summary".to_string());
    let values = || inputs.values.ok_or_else(|| "values summary unavailable".to_string());
    let shots = |pool_owner: &dyn Fn(&[FewShotExample], ShotSource) -> Result<PromptBundle, String>| {
        let own = inputs.pools.own.get(rid).map(Vec::as_slice).unwrap_or(&[]);
        let eligible = own.iter().filter(|e| e.question_id != q.id).count();
        if eligible >= method.n_shots {
            pool_owner(own, ShotSource::SameRespondent)
        } else {
            pool_owner(&inputs.pools.all, ShotSource::DatasetWide)
        }
    };
    let e = |e: crate::prompt::PromptError| e.to_string();
    match method.kind {
        MethodKind::ZeroShot => builder.build_zero_shot(rid, q).map_err(e),
        MethodKind::RoleAssignment => builder.build_role_assignment(rid, demo()?, q).map_err(e),
        MethodKind::FewShot => shots(&|pool, src| {
            let mut b = builder.build_few_shot(rid, pool, q, method.n_shots, method.seed).map_err(e)?;
            b.shot_source = Some(src);
            Ok(b)
        }),
        MethodKind::Hybrid => {
            let d = demo()?;
            shots(&|pool, src| {
                let mut b = builder.build_hybrid(rid, d, pool, q, method.n_shots, method.seed).map_err(e)?;
                b.shot_source = Some(src);
                Ok(b)
            })
        }
        MethodKind::ValuesAugmented if method.values_only => builder.build_values_only(rid, values()?, q).map_err(e),
        MethodKind::ValuesAugmented => builder.build_values_augmented(rid, values()?, demo()?, q).map_err(e),
        MethodKind::ValuesRag => {
            let set = match inputs.retrieved {
                Some(Ok(set)) => prefix(set, method.k),
                Some(Err(err)) => return Err(err.clone()),
                None => return Err("retrieval not run".into()),
            };
            builder.build_values_rag(rid, demo()?, &set, q).map_err(e)
        }
    }
}

fn evaluate_item(
    ctx: &EvalContext<'_>,
    dataset: &str,
    method: &Method,
    rid: &str,
    q: &Question,
    gold: i64,
    inputs: &ItemInputs<'_>,
) -> EvalRecord {
    let mut rec = EvalRecord {
        dataset: dataset.to_string(),
        method: method.label(),
        respondent_id: rid.to_string(),
        question_id: q.id.clone(),
        status: ItemStatus::Failed,
        predicted_code: None,
        gold_code: gold,
        predicted_binary: None,
        gold_binary: None,
        correct: None,
        error: None,
        request_hash: None,
        shot_source: None,
    };
    if !q.scale.ordered {
        rec.status = ItemStatus::NonBinarizable;
        return rec;
    }
    let bundle = match build_prompt(ctx.builder, method, rid, q, inputs) {
        Ok(b) => b,
        Err(e) => {
            rec.error = Some(e);
            return rec;
        }
    };
    rec.shot_source = bundle.shot_source;
    let req = GenerationRequest::new(bundle.system, bundle.user, format!("answer/{dataset}/{}/{rid}/{}", rec.method, q.id))
        .with_temperature(ctx.temperature);
    let generation = match ctx.answerer.generate(&req) {
        Ok(g) => g,
        Err(e) => {
            rec.error = Some(format!("{BACKEND_ERROR_PREFIX}{e}"));
            return rec;
        }
    };
    rec.request_hash = Some(generation.request_hash);
    let parsed = match parse_answer(&generation.text, q) {
        Ok(p) => p,
        Err(e) => {
            rec.status = ItemStatus::Invalid;
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.predicted_code = Some(parsed.option_code);
    match (binarize(parsed.option_code, &q.scale), binarize(gold, &q.scale)) {
        (Ok(p), Ok(g)) => {
            rec.status = ItemStatus::Scored;
            rec.predicted_binary = Some(p);
            rec.gold_binary = Some(g);
            rec.correct = Some(p == g);
        }
        (Err(e), _) => {
            // a declared option that is a missing code, e.g. "don't know"
            rec.status = ItemStatus::Invalid;
            rec.error = Some(e.to_string());
        }
        (_, Err(e)) => rec.error = Some(e.to_string()),
    }
    rec
}

impl EvalRecord {
    pub fn is_backend_failure(&self) -> bool {
        self.error.as_deref().is_some_and(|e| e.starts_with(BACKEND_ERROR_PREFIX))
    }
}

fn cell_of(dataset: &str, method: &str, records: &[&EvalRecord]) -> Cell {
    let count = |s: ItemStatus| records.iter().filter(|r| r.status == s).count();
    let n = records.iter().filter(|r| r.correct.is_some()).count();
    let correct = records.iter().filter(|r| r.correct == Some(true)).count();
    let mut parts = vec!["cell/v1".to_string(), dataset.to_string(), method.to_string()];
    for r in records {
        parts.push(format!(
            "{}|{}|{:?}|{:?}|{}",
            r.respondent_id,
            r.question_id,
            r.predicted_code,
            r.correct,
            r.request_hash.as_deref().unwrap_or("-")
        ));
    }
    Cell {
        dataset: dataset.to_string(),
        method: method.to_string(),
        accuracy: (n > 0).then(|| correct as f64 / n as f64),
        n,
        invalid: count(ItemStatus::Invalid),
        failed: count(ItemStatus::Failed),
        non_binarizable: count(ItemStatus::NonBinarizable),
        provenance: digest_parts(parts),
    }
}

/// Significance of each ValuesRAG variant against every baseline on one
/// dataset, Holm-corrected within that family.
fn compare(dataset: &str, methods: &[Method], records: &[EvalRecord], alpha: f64) -> Vec<Comparison> {
    let correctness = |label: &str| -> BTreeMap<(&str, &str), f64> {
        records
            .iter()
            .filter(|r| r.dataset == dataset && r.method == label)
            .filter_map(|r| r.correct.map(|c| ((r.respondent_id.as_str(), r.question_id.as_str()), c as u8 as f64)))
            .collect()
    };
    let baselines: Vec<String> = methods.iter().filter(|m| m.kind.is_baseline()).map(Method::label).collect();
    let mut out = Vec::new();
    for rag in methods.iter().filter(|m| m.kind == MethodKind::ValuesRag) {
        let label = rag.label();
        let ours = correctness(&label);
        let mut family = Vec::new();
        for base in &baselines {
            let theirs = correctness(base);
            let (a, b): (Vec<f64>, Vec<f64>) =
                ours.iter().filter_map(|(k, &x)| theirs.get(k).map(|&y| (x, y))).unzip();
            if let Ok(t) = paired_t_test(&a, &b) {
                family.push(Comparison {
                    dataset: dataset.to_string(),
                    method: label.clone(),
                    baseline: base.clone(),
                    n_pairs: a.len(),
                    mean_diff: t.mean_diff,
                    t: t.t,
                    p_raw: t.p,
                    degenerate: t.degenerate,
                    rejected: false,
                });
            }
        }
        let ps: Vec<f64> = family.iter().map(|c| c.p_raw).collect();
        if let Ok(rejected) = holm_bonferroni(&ps, alpha) {
            for (c, r) in family.iter_mut().zip(rejected) {
                c.rejected = r;
            }
        }
        out.extend(family);
    }
    out
}

/// Answer every target item of every dataset with every method.
pub fn run_evaluation(
    ctx: &EvalContext<'_>,
    datasets: &[EvalDataset<'_>],
    methods: &[Method],
) -> Result<(EvalReport, Vec<EvalRecord>), EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Config("no methods to evaluate".into()));
    }
    for m in methods {
        m.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    }
    let mut labels: Vec<String> = Vec::new();
    for m in methods {
        let l = m.label();
        if labels.contains(&l) {
            return Err(EvalError::Config(format!("method `{l}` listed twice")));
        }
        labels.push(l);
    }
    let k_max = methods.iter().filter(|m| m.kind == MethodKind::ValuesRag).map(|m| m.k).max();

    let mut records = Vec::new();
    let mut cells = Vec::new();
    let mut significance = Vec::new();
    for ds in datasets {
        let name = ds.corpus.name();
        let targets = ds.targets()?;
        info!(dataset = name, targets = targets.len(), respondents = ds.corpus.respondents().len(), "evaluating");
        let retrieved = k_max.map(|k| retrieve_all(ctx, ds, k)).unwrap_or_default();
        let pools = shot_pools(ds, &targets);
        let mut ds_records = Vec::new();
        for method in methods {
            let per_respondent: Vec<Vec<EvalRecord>> = ds
                .corpus
                .respondents()
                .par_iter()
                .with_max_len(1)
                .map(|r| {
                    let summary = ds.store.get(&r.id);
                    let inputs = ItemInputs {
                        demo: summary.map(|s| s.demographic_summary.as_str()),
                        values: summary.and_then(|s| s.values_summary.as_deref()),
                        retrieved: retrieved.get(&r.id),
                        pools: &pools,
                    };
                    targets
                        .iter()
                        .filter_map(|q| match ds.corpus.answer(r, &q.id) {
                            Answer::Valid(gold) => Some(evaluate_item(ctx, name, method, &r.id, q, gold, &inputs)),
                            _ => None,
                        })
                        .collect()
                })
                .collect();
            let method_records: Vec<EvalRecord> = per_respondent.into_iter().flatten().collect();
            let refs: Vec<&EvalRecord> = method_records.iter().collect();
            cells.push(cell_of(name, &method.label(), &refs));
            ds_records.extend(method_records);
        }
        significance.extend(compare(name, methods, &ds_records, ctx.alpha));
        records.extend(ds_records);
    }
    let only_rag = methods.iter().all(|m| m.kind == MethodKind::ValuesRag);
    let report = EvalReport {
        kind: if only_rag && methods.len() > 1 { ReportKind::KSweep } else { ReportKind::Methods },
        datasets: datasets.iter().map(|d| d.corpus.name().to_string()).collect(),
        methods: labels,
        cells,
        significance,
        alpha: ctx.alpha,
        holm_family: HOLM_FAMILY.into(),
        config_fingerprint: ctx.report_fingerprint(methods),
    };
    Ok((report, records))
}

/// One ValuesRAG evaluation per k, reported together.
pub fn ablate_k(
    ctx: &EvalContext<'_>,
    datasets: &[EvalDataset<'_>],
    ks: &[usize],
    seed: u64,
) -> Result<(EvalReport, Vec<EvalRecord>), EvalError> {
    if ks.is_empty() {
        return Err(EvalError::Config("no k values".into()));
    }
    let methods: Vec<Method> = ks.iter().map(|&k| Method::values_rag(k).with_seed(seed)).collect();
    let (mut report, records) = run_evaluation(ctx, datasets, &methods)?;
    report.kind = ReportKind::KSweep;
    Ok((report, records))
}
