//! Survey corpus data model, ingestion, canonical storage and the
//! topic-stratified validation split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::substream;

pub const CORPUS_FORMAT: &str = "valuesrag-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("manifest/column mismatch: {0}")]
    ColumnMismatch(String),
    #[error("duplicate {what} id `{id}`")]
    DuplicateId { what: &'static str, id: String },
    #[error("invalid question `{id}`: {reason}")]
    InvalidQuestion { id: String, reason: String },
    #[error("invalid respondent `{id}`: {reason}")]
    InvalidRespondent { id: String, reason: String },
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),
    #[error("topic `{0}` has no values questions")]
    EmptyTopic(String),
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    FractionOutOfRange(Fraction),
    #[error("malformed fraction `{0}`")]
    MalformedFraction(String),
    #[error("canonical file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::MissingFile(path.to_path_buf())
        } else {
            CorpusError::Io { path: path.to_path_buf(), source }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Values,
    Demographic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    Retrieval,
    Test,
}

impl fmt::Display for CorpusRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusRole::Retrieval => "retrieval",
            CorpusRole::Test => "test",
        })
    }
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// Integer answer scale. The midpoint is kept implicitly as `(min + max) / 2`
/// and compared exactly through [`ResponseScale::twice_midpoint`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseScale {
    pub min: i64,
    pub max: i64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub missing_codes: BTreeSet<i64>,
    /// Categorical items without an ordering cannot be binarized.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub ordered: bool,
}

impl ResponseScale {
    pub fn new(min: i64, max: i64) -> Self {
        Self { min, max, missing_codes: BTreeSet::new(), ordered: true }
    }

    pub fn with_missing(mut self, codes: impl IntoIterator<Item = i64>) -> Self {
        self.missing_codes.extend(codes);
        self
    }

    pub fn twice_midpoint(&self) -> i64 {
        self.min + self.max
    }

    pub fn midpoint(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }

    pub fn is_missing(&self, code: i64) -> bool {
        self.missing_codes.contains(&code)
    }

    pub fn contains(&self, code: i64) -> bool {
        (self.min..=self.max).contains(&code)
    }

    fn validate(&self) -> Result<(), String> {
        if self.min >= self.max {
            return Err(format!("scale min {} must be below max {}", self.min, self.max));
        }
        if let Some(c) = self.missing_codes.iter().find(|c| self.contains(**c)) {
            return Err(format!("missing code {c} lies inside the answer range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub code: i64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub kind: QuestionKind,
    pub scale: ResponseScale,
    pub options: Vec<AnswerOption>,
}

impl Question {
    pub fn label(&self, code: i64) -> Option<&str> {
        self.options.iter().find(|o| o.code == code).map(|o| o.label.as_str())
    }

    pub fn code_for_label(&self, label: &str) -> Option<i64> {
        self.options.iter().find(|o| o.label == label).map(|o| o.code)
    }

    pub fn has_option(&self, code: i64) -> bool {
        self.options.iter().any(|o| o.code == code)
    }

    pub fn is_values(&self) -> bool {
        self.kind == QuestionKind::Values
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |reason: String| CorpusError::InvalidQuestion { id: self.id.clone(), reason };
        if self.id.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(bad("empty text".into()));
        }
        self.scale.validate().map_err(bad)?;
        if self.options.windows(2).any(|w| w[0].code >= w[1].code) {
            return Err(bad("option codes must be unique and strictly increasing".into()));
        }
        let (Some(first), Some(last)) = (self.options.first(), self.options.last()) else {
            return Err(bad("no options".into()));
        };
        if first.code != self.scale.min || last.code != self.scale.max {
            return Err(bad(format!(
                "scale [{}, {}] does not match option codes [{}, {}]",
                self.scale.min, self.scale.max, first.code, last.code
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    pub dataset: String,
    pub answers: BTreeMap<String, i64>,
}

/// What a respondent said to one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Valid(i64),
    /// A declared refusal / don't-know code, kept but never used.
    Missing(i64),
    Absent,
}

/// A validated, immutable survey corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    name: String,
    region: String,
    role: CorpusRole,
    topics: Vec<String>,
    questions: Vec<Question>,
    respondents: Vec<Respondent>,
    question_index: HashMap<String, usize>,
    respondent_index: HashMap<String, usize>,
}

impl Corpus {
    /// Validate and index. `topics` gives the canonical topic order; when
    /// empty it is taken from first appearance among values questions.
    pub fn new(
        name: impl Into<String>,
        region: impl Into<String>,
        role: CorpusRole,
        topics: Vec<String>,
        questions: Vec<Question>,
        respondents: Vec<Respondent>,
    ) -> Result<Self, CorpusError> {
        let name = name.into();
        let mut question_index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            q.validate()?;
            if question_index.insert(q.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { what: "question", id: q.id.clone() });
            }
        }
        if !questions.iter().any(|q| q.kind == QuestionKind::Values) {
            return Err(CorpusError::InvalidCorpus("no values questions".into()));
        }
        if !questions.iter().any(|q| q.kind == QuestionKind::Demographic) {
            return Err(CorpusError::InvalidCorpus("no demographic questions".into()));
        }

        let topics = if topics.is_empty() {
            let mut seen = HashSet::new();
            questions
                .iter()
                .filter(|q| q.is_values() && seen.insert(q.topic.as_str()))
                .map(|q| q.topic.clone())
                .collect()
        } else {
            let mut seen = HashSet::new();
            if let Some(t) = topics.iter().find(|t| !seen.insert(t.as_str())) {
                return Err(CorpusError::InvalidCorpus(format!("topic `{t}` declared twice")));
            }
            if let Some(q) = questions.iter().find(|q| q.is_values() && !seen.contains(q.topic.as_str())) {
                return Err(CorpusError::InvalidQuestion {
                    id: q.id.clone(),
                    reason: format!("topic `{}` is not declared", q.topic),
                });
            }
            topics
        };

        let mut respondent_index = HashMap::with_capacity(respondents.len());
        for (i, r) in respondents.iter().enumerate() {
            if respondent_index.insert(r.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { what: "respondent", id: r.id.clone() });
            }
            for (qid, code) in &r.answers {
                let Some(&qi) = question_index.get(qid) else {
                    return Err(CorpusError::InvalidRespondent {
                        id: r.id.clone(),
                        reason: format!("answer for unknown question `{qid}`"),
                    });
                };
                let q = &questions[qi];
                if !q.has_option(*code) && !q.scale.is_missing(*code) {
                    return Err(CorpusError::InvalidRespondent {
                        id: r.id.clone(),
                        reason: format!("code {code} is not declared for `{qid}`"),
                    });
                }
            }
        }

        Ok(Self {
            name,
            region: region.into(),
            role,
            topics,
            questions,
            respondents,
            question_index,
            respondent_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    /// Canonical topic order.
    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn respondents(&self) -> &[Respondent] {
        &self.respondents
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_index.get(id).map(|&i| &self.questions[i])
    }

    pub fn respondent(&self, id: &str) -> Option<&Respondent> {
        self.respondent_index.get(id).map(|&i| &self.respondents[i])
    }

    pub fn values_questions(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.kind == QuestionKind::Values)
    }

    pub fn demographic_questions(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.kind == QuestionKind::Demographic)
    }

    pub fn answer(&self, respondent: &Respondent, qid: &str) -> Answer {
        match (respondent.answers.get(qid), self.question(qid)) {
            (Some(&code), Some(q)) if q.scale.is_missing(code) => Answer::Missing(code),
            (Some(&code), _) => Answer::Valid(code),
            (None, _) => Answer::Absent,
        }
    }

    /// Selected-option QA pairs for `qids`, in the given order. Missing and
    /// absent answers are omitted.
    pub fn qa_pairs<'a>(
        &'a self,
        respondent: &Respondent,
        qids: &[&str],
    ) -> Result<Vec<QaPair<'a>>, CorpusError> {
        let mut out = Vec::with_capacity(qids.len());
        for qid in qids {
            let q = self.question(qid).ok_or_else(|| CorpusError::UnknownQuestion(qid.to_string()))?;
            if let Answer::Valid(code) = self.answer(respondent, qid) {
                if let Some(label) = q.label(code) {
                    out.push(QaPair { question_id: &q.id, text: &q.text, label });
                }
            }
        }
        Ok(out)
    }

    /// Write the canonical line-oriented form.
    pub fn write_canonical(&self, path: &Path) -> Result<(), CorpusError> {
        let bytes = self.to_canonical_bytes();
        fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            name: self.name.clone(),
            region: self.region.clone(),
            role: self.role,
            topics: self.topics.clone(),
        };
        push_json_line(&mut out, &header);
        for q in &self.questions {
            push_json_line(&mut out, &CorpusLine::Question(q.clone()));
        }
        for r in &self.respondents {
            push_json_line(&mut out, &CorpusLine::Respondent(r.clone()));
        }
        out
    }

    pub fn read_canonical(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let fmt_err = |reason: String| CorpusError::Format { path: path.to_path_buf(), reason };
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| fmt_err("empty file".into()))?
            .map_err(io_err(path))?;
        let header: CorpusHeader =
            serde_json::from_str(&header_line).map_err(|e| fmt_err(format!("header: {e}")))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(fmt_err(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut questions = Vec::new();
        let mut respondents = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| fmt_err(format!("line {}: {e}", n + 2)))? {
                CorpusLine::Question(q) => questions.push(q),
                CorpusLine::Respondent(r) => respondents.push(r),
            }
        }
        Corpus::new(header.name, header.region, header.role, header.topics, questions, respondents)
    }
}

pub(crate) fn push_json_line<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    serde_json::to_writer(&mut *out, value).expect("records serialize");
    out.push(b'\n');
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    name: String,
    region: String,
    role: CorpusRole,
    topics: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CorpusLine {
    Question(Question),
    Respondent(Respondent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QaPair<'a> {
    pub question_id: &'a str,
    pub text: &'a str,
    pub label: &'a str,
}

// ---------------------------------------------------------------------------
// Ingestion

/// Per-column metadata declared by a corpus manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestQuestion {
    pub id: String,
    pub topic: String,
    pub kind: QuestionKind,
    pub text: String,
    /// `(code, label)` pairs.
    pub options: Vec<(i64, String)>,
    #[serde(default)]
    pub min: Option<i64>,
    #[serde(default)]
    pub max: Option<i64>,
    #[serde(default)]
    pub missing_codes: Vec<i64>,
    #[serde(default = "default_true")]
    pub ordered: bool,
}

/// Schema descriptor for one delimiter-separated respondents table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    #[serde(default)]
    pub region: String,
    pub role: CorpusRole,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Canonical topic order; defaults to first appearance.
    #[serde(default)]
    pub topics: Vec<String>,
    pub questions: Vec<ManifestQuestion>,
}

fn default_id_column() -> String {
    "id".into()
}

fn default_delimiter() -> char {
    ','
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| CorpusError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn build_questions(&self) -> Result<Vec<Question>, CorpusError> {
        self.questions
            .iter()
            .map(|m| {
                let options: Vec<AnswerOption> = m
                    .options
                    .iter()
                    .map(|(code, label)| AnswerOption { code: *code, label: label.clone() })
                    .collect();
                let lo = options.first().map(|o| o.code).unwrap_or_default();
                let hi = options.last().map(|o| o.code).unwrap_or_default();
                let scale = ResponseScale {
                    min: m.min.unwrap_or(lo),
                    max: m.max.unwrap_or(hi),
                    missing_codes: m.missing_codes.iter().copied().collect(),
                    ordered: m.ordered,
                };
                Ok(Question {
                    id: m.id.clone(),
                    topic: m.topic.clone(),
                    text: m.text.clone(),
                    kind: m.kind,
                    scale,
                    options,
                })
            })
            .collect()
    }
}

/// A rejected row from an ingested table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowDiagnostic {
    /// 1-based data row (header excluded).
    pub row: usize,
    pub respondent_id: Option<String>,
    pub message: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.respondent_id {
            Some(id) => write!(f, "row {} ({id}): {}", self.row, self.message),
            None => write!(f, "row {}: {}", self.row, self.message),
        }
    }
}

fn malformed_id(id: &str) -> Option<&'static str> {
    if id.is_empty() {
        Some("empty respondent id")
    } else if id.chars().any(|c| c.is_whitespace() || c.is_control()) {
        Some("respondent id contains whitespace or control characters")
    } else {
        None
    }
}

/// Read a respondents table against its manifest. Rows that cannot be
/// trusted (malformed id, unparseable or undeclared codes) are dropped and
/// reported; structural problems fail the whole ingest.
pub fn ingest_corpus(
    path: &Path,
    manifest: &Manifest,
) -> Result<(Corpus, Vec<RowDiagnostic>), CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let questions = manifest.build_questions()?;
    let delimiter = u8::try_from(manifest.delimiter)
        .map_err(|_| CorpusError::Manifest("delimiter must be a single-byte character".into()))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| CorpusError::Manifest(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::ColumnMismatch(e.to_string()))?
        .clone();

    let id_col = headers
        .iter()
        .position(|h| h == manifest.id_column)
        .ok_or_else(|| CorpusError::ColumnMismatch(format!("id column `{}` not found", manifest.id_column)))?;
    let declared: HashMap<&str, usize> =
        questions.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    let mut columns: Vec<(usize, usize)> = Vec::new();
    let mut seen_cols = HashSet::new();
    for (ci, h) in headers.iter().enumerate() {
        if ci == id_col {
            continue;
        }
        if !seen_cols.insert(h) {
            return Err(CorpusError::ColumnMismatch(format!("column `{h}` appears twice")));
        }
        match declared.get(h) {
            Some(&qi) => columns.push((ci, qi)),
            None => {
                return Err(CorpusError::ColumnMismatch(format!("column `{h}` is not declared in the manifest")))
            }
        }
    }
    if let Some(q) = questions.iter().find(|q| !seen_cols.contains(q.id.as_str())) {
        return Err(CorpusError::ColumnMismatch(format!("declared question `{}` has no column", q.id)));
    }

    let mut respondents = Vec::new();
    let mut diagnostics = Vec::new();
    let mut ids = HashSet::new();
    for (n, record) in reader.records().enumerate() {
        let row = n + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(RowDiagnostic { row, respondent_id: None, message: e.to_string() });
                continue;
            }
        };
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        if let Some(msg) = malformed_id(&id) {
            diagnostics.push(RowDiagnostic { row, respondent_id: None, message: msg.into() });
            continue;
        }
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { what: "respondent", id });
        }
        let mut answers = BTreeMap::new();
        let mut problem = None;
        for &(ci, qi) in &columns {
            let cell = record.get(ci).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let q = &questions[qi];
            match cell.parse::<i64>() {
                Ok(code) if q.has_option(code) || q.scale.is_missing(code) => {
                    answers.insert(q.id.clone(), code);
                }
                Ok(code) => {
                    problem = Some(format!("code {code} is not declared for `{}`", q.id));
                    break;
                }
                Err(_) => {
                    problem = Some(format!("non-integer value `{cell}` for `{}`", q.id));
                    break;
                }
            }
        }
        if let Some(message) = problem {
            diagnostics.push(RowDiagnostic { row, respondent_id: Some(id), message });
            continue;
        }
        respondents.push(Respondent { id, dataset: manifest.name.clone(), answers });
    }

    let corpus = Corpus::new(
        manifest.name.clone(),
        manifest.region.clone(),
        manifest.role,
        manifest.topics.clone(),
        questions,
        respondents,
    )?;
    Ok((corpus, diagnostics))
}

// ---------------------------------------------------------------------------
// Topic-stratified split

/// Exact non-negative rational, used for split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self, CorpusError> {
        if den == 0 {
            return Err(CorpusError::MalformedFraction(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(self * n)` with halves rounded up, in exact arithmetic.
    pub fn round_mul(&self, n: u64) -> u64 {
        (2 * n * self.num + self.den) / (2 * self.den)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = CorpusError;

    /// Accepts `a/b` or a plain decimal such as `0.2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::MalformedFraction(s.to_string());
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Fraction::new(a, b);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Fraction::new(int * den + frac_v, den)
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Train/validation partition of a corpus's values questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSplit {
    pub corpus: String,
    pub train_qids: BTreeSet<String>,
    pub validation_qids: BTreeSet<String>,
    pub seed: u64,
    pub fraction: Fraction,
    /// Validation count per topic, in canonical topic order.
    pub allocation: Vec<(String, usize)>,
}

impl TopicSplit {
    pub fn is_train(&self, qid: &str) -> bool {
        self.train_qids.contains(qid)
    }

    pub fn is_validation(&self, qid: &str) -> bool {
        self.validation_qids.contains(qid)
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        f.write_all(json.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CorpusError::Format { path: path.to_path_buf(), reason: e.to_string() })
    }
}

/// Per-topic validation counts by largest remainder: floors of
/// `fraction * size`, then one extra question to the topics with the largest
/// remainders until the total reaches `round(fraction * N)`. Equal remainders
/// are ordered by a seeded shuffle.
pub fn allocate_largest_remainder(sizes: &[u64], fraction: Fraction, seed: u64) -> Vec<u64> {
    let total_n: u64 = sizes.iter().sum();
    let target = fraction.round_mul(total_n);
    let mut quota: Vec<u64> = sizes.iter().map(|&s| s * fraction.num / fraction.den).collect();
    let assigned: u64 = quota.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut substream(seed, &["split", "tie-break"]));
    // Stable sort keeps the shuffled order within equal remainders.
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i] * fraction.num % fraction.den));
    for &i in order.iter().take((target - assigned) as usize) {
        quota[i] += 1;
    }
    quota
}

pub fn stratified_split(corpus: &Corpus, fraction: Fraction, seed: u64) -> Result<TopicSplit, CorpusError> {
    if fraction.num == 0 || fraction.num >= fraction.den {
        return Err(CorpusError::FractionOutOfRange(fraction));
    }
    let by_topic: Vec<Vec<&str>> = corpus
        .topics()
        .iter()
        .map(|t| corpus.values_questions().filter(|q| &q.topic == t).map(|q| q.id.as_str()).collect())
        .collect();
    if let Some(i) = by_topic.iter().position(|qs| qs.is_empty()) {
        return Err(CorpusError::EmptyTopic(corpus.topics()[i].clone()));
    }
    let sizes: Vec<u64> = by_topic.iter().map(|qs| qs.len() as u64).collect();
    let quota = allocate_largest_remainder(&sizes, fraction, seed);

    let mut train = BTreeSet::new();
    let mut validation = BTreeSet::new();
    let mut allocation = Vec::with_capacity(quota.len());
    for ((topic, qids), &q) in corpus.topics().iter().zip(&by_topic).zip(&quota) {
        let mut shuffled = qids.clone();
        shuffled.shuffle(&mut substream(seed, &["split", "topic", topic]));
        let (val, rest) = shuffled.split_at(q as usize);
        validation.extend(val.iter().map(|s| s.to_string()));
        train.extend(rest.iter().map(|s| s.to_string()));
        allocation.push((topic.clone(), q as usize));
    }
    Ok(TopicSplit {
        corpus: corpus.name().to_string(),
        train_qids: train,
        validation_qids: validation,
        seed,
        fraction,
        allocation,
    })
}
