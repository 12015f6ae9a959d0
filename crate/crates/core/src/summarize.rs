//! Per-topic values summaries, demographic summaries, and their composition
//! into one values summary per respondent.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::{BackendError, CacheRecord, Generation, GenerationRequest, GenerationService};
use crate::corpus::{Corpus, CorpusError, QaPair, Respondent, TopicSplit};
use crate::prompt::TemplateSet;

pub const STORE_FORMAT: &str = "valuesrag-summaries";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SummarizeError {
    #[error("question `{question_id}` is not a train question of topic `{topic}`; refusing to summarize it")]
    Leakage { topic: String, question_id: String },
    #[error("respondent `{0}` answered no demographic questions")]
    NoDemographics(String),
    #[error("no topic summaries to compose")]
    EmptyInput,
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("split was built for corpus `{split}`, not `{corpus}`")]
    SplitMismatch { split: String, corpus: String },
    #[error("full summaries need a topic split")]
    MissingSplit,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("summary store {path}: {reason}")]
    Store { path: PathBuf, reason: String },
    #[error("summary store {path} belongs to a different run (fingerprint {found}, expected {expected})")]
    StaleStore { path: PathBuf, expected: String, found: String },
}

impl From<CorpusError> for SummarizeError {
    fn from(e: CorpusError) -> Self {
        SummarizeError::Corpus(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSummary {
    pub topic: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub respondent_id: String,
    /// Canonical topic order.
    pub topic_summaries: Vec<TopicSummary>,
    /// Topics with no answered train question.
    #[serde(default)]
    pub skipped_topics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values_summary: Option<String>,
    pub demographic_summary: String,
    /// `topic:<name>`, `values`, `demographics` → request hash.
    pub provenance: BTreeMap<String, String>,
}

impl SummaryRecord {
    pub fn topic_summary(&self, topic: &str) -> Option<&str> {
        self.topic_summaries.iter().find(|t| t.topic == topic).map(|t| t.text.as_str())
    }
}

/// What a store holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    /// Topic, values and demographic summaries (retrieval corpora).
    Full,
    /// Demographic summaries only (test corpora).
    DemographicsOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format: String,
    pub version: u32,
    pub corpus: String,
    pub mode: SummaryMode,
    pub fingerprint: String,
}

/// Line-oriented summary store: a header line then one record per line.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStore {
    pub header: StoreHeader,
    records: Vec<SummaryRecord>,
    by_id: HashMap<String, usize>,
}

fn store_err(path: &Path) -> impl Fn(std::io::Error) -> SummarizeError + '_ {
    move |e| SummarizeError::Store { path: path.to_path_buf(), reason: e.to_string() }
}

impl SummaryStore {
    pub fn new(header: StoreHeader) -> Self {
        Self { header, records: Vec::new(), by_id: HashMap::new() }
    }

    pub fn records(&self) -> &[SummaryRecord] {
        &self.records
    }

    pub fn get(&self, respondent_id: &str) -> Option<&SummaryRecord> {
        self.by_id.get(respondent_id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn insert(&mut self, record: SummaryRecord) {
        match self.by_id.get(&record.respondent_id) {
            Some(&i) => self.records[i] = record,
            None => {
                self.by_id.insert(record.respondent_id.clone(), self.records.len());
                self.records.push(record);
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, SummarizeError> {
        let file = File::open(path).map_err(store_err(path))?;
        let bad = |line: usize, reason: String| SummarizeError::Store {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = lines.next().ok_or_else(|| bad(1, "empty file".into()))?.map_err(store_err(path))?;
        let header: StoreHeader = serde_json::from_str(&header_line).map_err(|e| bad(1, e.to_string()))?;
        if header.format != STORE_FORMAT || header.version != STORE_VERSION {
            return Err(bad(1, format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut store = Self::new(header);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(store_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SummaryRecord>(&line) {
                Ok(r) => store.insert(r),
                // a torn final line from an interrupted append; it is redone
                Err(e) => warn!(line = i + 2, error = %e, "skipping unreadable summary record"),
            }
        }
        Ok(store)
    }

    /// Write header and all records, replacing `path`.
    pub fn save(&self, path: &Path) -> Result<(), SummarizeError> {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out).map_err(store_err(path))?;
        fs::rename(&tmp, path).map_err(store_err(path))
    }

    fn append(&mut self, path: &Path, records: Vec<SummaryRecord>) -> Result<(), SummarizeError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for r in &records {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        let mut f = OpenOptions::new().append(true).open(path).map_err(store_err(path))?;
        f.write_all(buf.as_bytes()).map_err(store_err(path))?;
        f.sync_data().map_err(store_err(path))?;
        for r in records {
            self.insert(r);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Operations

fn context(pairs: &[QaPair<'_>]) -> String {
    let mut out = String::from("Context:");
    for p in pairs {
        out.push_str(&format!("\nQ: {}\nA: {}", p.text, p.label));
    }
    out
}

/// Result of summarizing one topic.
#[derive(Debug, Clone, PartialEq)]
pub enum TopicOutcome {
    Summary(Generation),
    /// The respondent answered none of the topic's train questions.
    Skipped,
}

/// Summarize `qids` of `topic`, refusing before any backend call if one of
/// them is not a train question of that topic.
pub fn summarize_topic_questions(
    corpus: &Corpus,
    respondent: &Respondent,
    topic: &str,
    qids: &[&str],
    split: &TopicSplit,
    service: &GenerationService,
    templates: &TemplateSet,
) -> Result<TopicOutcome, SummarizeError> {
    for qid in qids {
        let in_topic = corpus.question(qid).is_some_and(|q| q.topic == topic && q.is_values());
        if !in_topic || !split.is_train(qid) {
            return Err(SummarizeError::Leakage { topic: topic.into(), question_id: qid.to_string() });
        }
    }
    let pairs = corpus.qa_pairs(respondent, qids)?;
    if pairs.is_empty() {
        return Ok(TopicOutcome::Skipped);
    }
    let req = GenerationRequest::new(
        &templates.get("values_summary").body,
        context(&pairs),
        format!("summary/topic/{}/{topic}", respondent.id),
    );
    Ok(TopicOutcome::Summary(service.generate(&req)?))
}

/// Summarize every train question of `topic`.
pub fn summarize_topic(
    corpus: &Corpus,
    respondent: &Respondent,
    topic: &str,
    split: &TopicSplit,
    service: &GenerationService,
    templates: &TemplateSet,
) -> Result<TopicOutcome, SummarizeError> {
    if !corpus.topics().iter().any(|t| t == topic) {
        return Err(SummarizeError::UnknownTopic(topic.into()));
    }
    let qids: Vec<&str> = corpus
        .values_questions()
        .filter(|q| q.topic == topic && split.is_train(&q.id))
        .map(|q| q.id.as_str())
        .collect();
    summarize_topic_questions(corpus, respondent, topic, &qids, split, service, templates)
}

pub fn summarize_demographics(
    corpus: &Corpus,
    respondent: &Respondent,
    service: &GenerationService,
    templates: &TemplateSet,
) -> Result<Generation, SummarizeError> {
    let qids: Vec<&str> = corpus.demographic_questions().map(|q| q.id.as_str()).collect();
    let pairs = corpus.qa_pairs(respondent, &qids)?;
    if pairs.is_empty() {
        return Err(SummarizeError::NoDemographics(respondent.id.clone()));
    }
    let req = GenerationRequest::new(
        &templates.get("demographic_summary").body,
        context(&pairs),
        format!("summary/demographics/{}", respondent.id),
    );
    Ok(service.generate(&req)?)
}

/// The composition prompt's user text: topic summaries in `topic_order`.
pub fn composition_context(summaries: &[TopicSummary], topic_order: &[String]) -> Result<String, SummarizeError> {
    if summaries.is_empty() {
        return Err(SummarizeError::EmptyInput);
    }
    let rank: HashMap<&str, usize> = topic_order.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut ordered: Vec<(usize, &TopicSummary)> = summaries
        .iter()
        .map(|s| rank.get(s.topic.as_str()).map(|&r| (r, s)).ok_or_else(|| SummarizeError::UnknownTopic(s.topic.clone())))
        .collect::<Result<_, _>>()?;
    ordered.sort_by_key(|(r, _)| *r);
    let blocks: Vec<String> = ordered.iter().map(|(_, s)| format!("Topic: {}\n{}", s.topic, s.text.trim())).collect();
    Ok(format!("Context:\n{}", blocks.join("\n\n")))
}

/// Compose topic summaries into one values summary. The values-summary
/// instruction is reused with the topic summaries as context.
pub fn compose_values_summary(
    respondent_id: &str,
    summaries: &[TopicSummary],
    topic_order: &[String],
    service: &GenerationService,
    templates: &TemplateSet,
) -> Result<Generation, SummarizeError> {
    let user = composition_context(summaries, topic_order)?;
    let req = GenerationRequest::new(&templates.get("values_summary").body, user, format!("summary/values/{respondent_id}"));
    Ok(service.generate(&req)?)
}

/// All summaries for one respondent, topics then composition.
pub fn summarize_respondent(
    corpus: &Corpus,
    respondent: &Respondent,
    split: Option<&TopicSplit>,
    mode: SummaryMode,
    service: &GenerationService,
    templates: &TemplateSet,
) -> Result<SummaryRecord, SummarizeError> {
    let mut provenance = BTreeMap::new();
    let demo = summarize_demographics(corpus, respondent, service, templates)?;
    provenance.insert("demographics".to_string(), demo.request_hash);
    let mut record = SummaryRecord {
        respondent_id: respondent.id.clone(),
        topic_summaries: Vec::new(),
        skipped_topics: Vec::new(),
        values_summary: None,
        demographic_summary: demo.text,
        provenance,
    };
    if mode == SummaryMode::DemographicsOnly {
        return Ok(record);
    }
    let split = split.ok_or(SummarizeError::MissingSplit)?;
    for topic in corpus.topics() {
        match summarize_topic(corpus, respondent, topic, split, service, templates)? {
            TopicOutcome::Summary(g) => {
                record.provenance.insert(format!("topic:{topic}"), g.request_hash);
                record.topic_summaries.push(TopicSummary { topic: topic.clone(), text: g.text });
            }
            TopicOutcome::Skipped => record.skipped_topics.push(topic.clone()),
        }
    }
    if !record.topic_summaries.is_empty() {
        let g = compose_values_summary(&respondent.id, &record.topic_summaries, corpus.topics(), service, templates)?;
        record.provenance.insert("values".to_string(), g.request_hash);
        record.values_summary = Some(g.text);
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub mode: SummaryMode,
    /// Identifies the configuration; a store with another fingerprint is refused.
    pub fingerprint: String,
    /// Respondents processed concurrently.
    pub parallelism: usize,
}

#[derive(Debug, Default)]
pub struct PipelineReport {
    pub summarized: usize,
    pub already_complete: usize,
    pub failures: Vec<(String, SummarizeError)>,
}

/// Summarize every respondent of `corpus` into the store at `store_path`.
///
/// Respondents already in the store are skipped, so a rerun after an
/// interruption only does the remaining work. Per-respondent failures are
/// reported and leave no record; a rerun retries them.
pub fn run_summary_pipeline(
    corpus: &Corpus,
    split: Option<&TopicSplit>,
    service: &GenerationService,
    templates: &TemplateSet,
    store_path: &Path,
    opts: &PipelineOptions,
) -> Result<(SummaryStore, PipelineReport), SummarizeError> {
    if opts.mode == SummaryMode::Full {
        let split = split.ok_or(SummarizeError::MissingSplit)?;
        if split.corpus != corpus.name() {
            return Err(SummarizeError::SplitMismatch { split: split.corpus.clone(), corpus: corpus.name().into() });
        }
    }
    let mut store = if store_path.exists() {
        let s = SummaryStore::load(store_path)?;
        if s.header.fingerprint != opts.fingerprint || s.header.mode != opts.mode || s.header.corpus != corpus.name() {
            return Err(SummarizeError::StaleStore {
                path: store_path.to_path_buf(),
                expected: opts.fingerprint.clone(),
                found: s.header.fingerprint,
            });
        }
        s
    } else {
        if let Some(parent) = store_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(store_err(store_path))?;
        }
        let s = SummaryStore::new(StoreHeader {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            corpus: corpus.name().into(),
            mode: opts.mode,
            fingerprint: opts.fingerprint.clone(),
        });
        s.save(store_path)?;
        s
    };

    let mut report = PipelineReport::default();
    let pending: Vec<&Respondent> = corpus
        .respondents()
        .iter()
        .filter(|r| {
            let done = store.get(&r.id).is_some();
            report.already_complete += done as usize;
            !done
        })
        .collect();
    info!(corpus = corpus.name(), pending = pending.len(), done = report.already_complete, "summarizing");

    for chunk in pending.chunks(opts.parallelism.max(1) * 4) {
        let results: Vec<Result<SummaryRecord, SummarizeError>> = chunk
            .par_iter()
            .with_max_len(1)
            .map(|r| summarize_respondent(corpus, r, split, opts.mode, service, templates))
            .collect();
        let mut ok = Vec::new();
        for (r, res) in chunk.iter().zip(results) {
            match res {
                Ok(rec) => ok.push(rec),
                Err(e) => {
                    warn!(respondent = %r.id, error = %e, "summary failed");
                    report.failures.push((r.id.clone(), e));
                }
            }
        }
        report.summarized += ok.len();
        store.append(store_path, ok)?;
    }
    Ok((store, report))
}

// ---------------------------------------------------------------------------
// Leakage audit

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakFinding {
    pub request_hash: String,
    pub tag: String,
    pub question_id: String,
}

/// Scan recorded summarization prompts for any validation question text.
pub fn scan_for_leakage(records: &[CacheRecord], corpus: &Corpus, split: &TopicSplit) -> Vec<LeakFinding> {
    let texts: Vec<(&str, &str)> = corpus
        .values_questions()
        .filter(|q| split.is_validation(&q.id))
        .map(|q| (q.id.as_str(), q.text.as_str()))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| r.tag.starts_with("summary/")) {
        for (qid, text) in &texts {
            if (rec.user_prompt.contains(text) || rec.system_prompt.contains(text))
                && seen.insert((rec.request_hash.clone(), qid.to_string()))
            {
                out.push(LeakFinding { request_hash: rec.request_hash.clone(), tag: rec.tag.clone(), question_id: qid.to_string() });
            }
        }
    }
    out
}
