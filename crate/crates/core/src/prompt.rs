//! Prompt assembly for every answering method and parsing of model output.
//!
//! Prompt text lives in versioned template assets with `{{slot}}`
//! placeholders. Slot values are inserted in a single pass and never
//! re-scanned, so braces inside summaries cannot inject further slots.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Question;
use crate::index::RerankedSet;
use crate::util::{digest_bytes, substream};

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("{0} summary is empty")]
    EmptySummary(&'static str),
    #[error("question `{0}` is demographic and cannot be a target")]
    DemographicTarget(String),
    #[error("few-shot pool too small: need {need}, have {have} after excluding the target")]
    PoolTooSmall { need: usize, have: usize },
    #[error("no retrieved summaries to prompt with")]
    EmptyRetrieval,
    #[error("template `{template}`: {reason}")]
    Template { template: String, reason: String },
    #[error("invalid method `{0}`")]
    InvalidMethod(String),
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub body: String,
}

impl Template {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body: String = body.into();
        Self { name: name.into(), body: body.trim_end_matches('\n').to_string() }
    }

    pub fn hash(&self) -> String {
        digest_bytes(self.body.as_bytes())
    }

    /// Slot names in order of appearance.
    pub fn slots(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    out.push(&after[..end]);
                    rest = &after[end + 2..];
                }
                None => break,
            }
        }
        out
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let err = |reason: String| PromptError::Template { template: self.name.clone(), reason };
        let mut out = String::with_capacity(self.body.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| err("unterminated slot".into()))?;
            let slot = &after[..end];
            let value = values
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| err(format!("no value for slot `{slot}`")))?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("qa_system", include_str!("../templates/qa_system.txt")),
    ("values_summary", include_str!("../templates/values_summary.txt")),
    ("demographic_summary", include_str!("../templates/demographic_summary.txt")),
    ("zero_shot_system", include_str!("../templates/zero_shot_system.txt")),
    ("role_system", include_str!("../templates/role_system.txt")),
    ("few_shot_system", include_str!("../templates/few_shot_system.txt")),
    ("values_augmented_system", include_str!("../templates/values_augmented_system.txt")),
    ("values_augmented_user", include_str!("../templates/values_augmented_user.txt")),
    ("values_only_user", include_str!("../templates/values_only_user.txt")),
    ("values_rag_user", include_str!("../templates/values_rag_user.txt")),
    ("retrieved_block", include_str!("../templates/retrieved_block.txt")),
    ("question_block", include_str!("../templates/question_block.txt")),
];

/// The full set of named templates used by the builders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN.iter().map(|(n, b)| (n.to_string(), Template::new(*n, *b))).collect();
        Self { templates }
    }

    /// Builtins overridden by any `<name>.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for (name, _) in BUILTIN {
            let p = dir.join(format!("{name}.txt"));
            if p.exists() {
                let body = fs::read_to_string(&p).map_err(|e| PromptError::Template {
                    template: name.to_string(),
                    reason: e.to_string(),
                })?;
                set.templates.insert(name.to_string(), Template::new(*name, body));
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &Template {
        self.templates.get(name).unwrap_or_else(|| panic!("template `{name}` is not registered"))
    }

    /// Template name → content hash, cited by run manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates.iter().map(|(n, t)| (n.clone(), t.hash())).collect()
    }

    /// One hash over all templates.
    pub fn fingerprint(&self) -> String {
        let joined: Vec<String> = self.hashes().into_iter().map(|(n, h)| format!("{n}={h}")).collect();
        digest_bytes(format!("v{TEMPLATE_VERSION}\n{}", joined.join("\n")).as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Methods and bundles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    ZeroShot,
    RoleAssignment,
    FewShot,
    Hybrid,
    ValuesAugmented,
    ValuesRag,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::ZeroShot,
        MethodKind::RoleAssignment,
        MethodKind::FewShot,
        MethodKind::Hybrid,
        MethodKind::ValuesAugmented,
        MethodKind::ValuesRag,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::ZeroShot => "zero_shot",
            MethodKind::RoleAssignment => "role_assignment",
            MethodKind::FewShot => "few_shot",
            MethodKind::Hybrid => "hybrid",
            MethodKind::ValuesAugmented => "values_augmented",
            MethodKind::ValuesRag => "values_rag",
        }
    }

    /// The comparison baselines for significance testing.
    pub fn is_baseline(&self) -> bool {
        matches!(
            self,
            MethodKind::ZeroShot | MethodKind::RoleAssignment | MethodKind::FewShot | MethodKind::Hybrid
        )
    }
}

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_SHOTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_shots")]
    pub n_shots: usize,
    #[serde(default)]
    pub seed: u64,
    /// Values-only ablation: values summary without demographics.
    #[serde(default)]
    pub values_only: bool,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_shots() -> usize {
    DEFAULT_SHOTS
}

impl Method {
    pub fn new(kind: MethodKind) -> Self {
        Self { kind, k: DEFAULT_K, n_shots: DEFAULT_SHOTS, seed: 0, values_only: false }
    }

    pub fn values_rag(k: usize) -> Self {
        Self { k, ..Self::new(MethodKind::ValuesRag) }
    }

    pub fn values_only() -> Self {
        Self { values_only: true, ..Self::new(MethodKind::ValuesAugmented) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The six methods with default settings.
    pub fn all() -> Vec<Method> {
        MethodKind::ALL.iter().map(|k| Method::new(*k)).collect()
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.kind == MethodKind::ValuesRag && self.k == 0 {
            return Err(PromptError::InvalidMethod("values_rag needs k >= 1".into()));
        }
        if matches!(self.kind, MethodKind::FewShot | MethodKind::Hybrid) && self.n_shots == 0 {
            return Err(PromptError::InvalidMethod(format!("{} needs n_shots >= 1", self.kind.name())));
        }
        if self.values_only && self.kind != MethodKind::ValuesAugmented {
            return Err(PromptError::InvalidMethod("values_only applies to values_augmented only".into()));
        }
        Ok(())
    }

    /// Row label used in reports.
    pub fn label(&self) -> String {
        match self.kind {
            MethodKind::ValuesRag => format!("values_rag(k={})", self.k),
            MethodKind::ValuesAugmented if self.values_only => "values_only".into(),
            MethodKind::FewShot | MethodKind::Hybrid if self.n_shots != DEFAULT_SHOTS => {
                format!("{}(shots={})", self.kind.name(), self.n_shots)
            }
            k => k.name().into(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = PromptError;

    /// `zero_shot`, `values_rag`, `values_rag:k=5`, `few_shot:shots=3`,
    /// `values_only`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PromptError::InvalidMethod(s.to_string());
        let mut parts = s.trim().split(':');
        let name = parts.next().ok_or_else(bad)?;
        let mut m = if name == "values_only" {
            Method::values_only()
        } else {
            let kind = MethodKind::ALL.iter().find(|k| k.name() == name).ok_or_else(bad)?;
            Method::new(*kind)
        };
        for p in parts {
            let (key, val) = p.split_once('=').ok_or_else(bad)?;
            let val: usize = val.parse().map_err(|_| bad())?;
            match key {
                "k" => m.k = val,
                "shots" => m.n_shots = val,
                _ => return Err(bad()),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// Where few-shot examples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotSource {
    SameRespondent,
    DatasetWide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub method: String,
    pub question_id: String,
    pub respondent_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot_source: Option<ShotSource>,
}

/// One answered item usable as a few-shot example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question_id: String,
    pub question_text: String,
    pub answer_label: String,
}

/// Renders bundles from a [`TemplateSet`].
#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    templates: TemplateSet,
}

fn non_empty(text: &str, what: &'static str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        Err(PromptError::EmptySummary(what))
    } else {
        Ok(())
    }
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet) -> Self {
        Self { templates }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        self.templates.get(name).render(values)
    }

    /// The question with its numbered options and the JSON answer instruction.
    pub fn question_block(&self, question: &Question) -> Result<String, PromptError> {
        if !question.is_values() {
            return Err(PromptError::DemographicTarget(question.id.clone()));
        }
        let options: Vec<String> = question.options.iter().map(|o| format!("{}. {}", o.code, o.label)).collect();
        self.render("question_block", &[("question", &question.text), ("options", &options.join("\n"))])
    }

    fn bundle(&self, method: &Method, respondent_id: &str, question: &Question, system: String, user: String) -> PromptBundle {
        PromptBundle {
            system,
            user,
            method: method.label(),
            question_id: question.id.clone(),
            respondent_id: respondent_id.to_string(),
            shot_source: None,
        }
    }

    pub fn build_zero_shot(&self, respondent_id: &str, question: &Question) -> Result<PromptBundle, PromptError> {
        let user = self.question_block(question)?;
        let system = self.render("zero_shot_system", &[])?;
        Ok(self.bundle(&Method::new(MethodKind::ZeroShot), respondent_id, question, system, user))
    }

    pub fn role_system(&self, demo_summary: &str) -> Result<String, PromptError> {
        non_empty(demo_summary, "demographic")?;
        self.render("role_system", &[("demographics", demo_summary.trim())])
    }

    pub fn build_role_assignment(
        &self,
        respondent_id: &str,
        demo_summary: &str,
        question: &Question,
    ) -> Result<PromptBundle, PromptError> {
        let system = self.role_system(demo_summary)?;
        let user = self.question_block(question)?;
        Ok(self.bundle(&Method::new(MethodKind::RoleAssignment), respondent_id, question, system, user))
    }

    /// Seeded sample of `n_shots` examples, the target question excluded.
    pub fn sample_shots<'a>(
        &self,
        respondent_id: &str,
        pool: &'a [FewShotExample],
        question: &Question,
        n_shots: usize,
        seed: u64,
    ) -> Result<Vec<&'a FewShotExample>, PromptError> {
        let eligible: Vec<&FewShotExample> = pool.iter().filter(|e| e.question_id != question.id).collect();
        if n_shots == 0 || eligible.len() < n_shots {
            return Err(PromptError::PoolTooSmall { need: n_shots, have: eligible.len() });
        }
        let mut rng = substream(seed, &["few-shot", respondent_id, &question.id]);
        Ok(eligible.choose_multiple(&mut rng, n_shots).copied().collect())
    }

    fn shots_text(&self, shots: &[&FewShotExample]) -> String {
        shots
            .iter()
            .enumerate()
            .map(|(i, e)| format!("Example {}:\nQ: {}\nA: {}", i + 1, e.question_text, e.answer_label))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn build_few_shot(
        &self,
        respondent_id: &str,
        pool: &[FewShotExample],
        question: &Question,
        n_shots: usize,
        seed: u64,
    ) -> Result<PromptBundle, PromptError> {
        let block = self.question_block(question)?;
        let shots = self.sample_shots(respondent_id, pool, question, n_shots, seed)?;
        let user = format!("{}\n\n{block}", self.shots_text(&shots));
        let system = self.render("few_shot_system", &[])?;
        let method = Method { n_shots, seed, ..Method::new(MethodKind::FewShot) };
        Ok(self.bundle(&method, respondent_id, question, system, user))
    }

    pub fn build_hybrid(
        &self,
        respondent_id: &str,
        demo_summary: &str,
        pool: &[FewShotExample],
        question: &Question,
        n_shots: usize,
        seed: u64,
    ) -> Result<PromptBundle, PromptError> {
        let system = self.role_system(demo_summary)?;
        let block = self.question_block(question)?;
        let shots = self.sample_shots(respondent_id, pool, question, n_shots, seed)?;
        let user = format!("{}\n\n{block}", self.shots_text(&shots));
        let method = Method { n_shots, seed, ..Method::new(MethodKind::Hybrid) };
        Ok(self.bundle(&method, respondent_id, question, system, user))
    }

    /// Own values summary, then demographics, then the question, with a
    /// step-by-step reasoning instruction.
    pub fn build_values_augmented(
        &self,
        respondent_id: &str,
        values_summary: &str,
        demo_summary: &str,
        question: &Question,
    ) -> Result<PromptBundle, PromptError> {
        non_empty(values_summary, "values")?;
        non_empty(demo_summary, "demographic")?;
        let block = self.question_block(question)?;
        let user = self.render(
            "values_augmented_user",
            &[("values", values_summary.trim()), ("demographics", demo_summary.trim()), ("question", &block)],
        )?;
        let system = self.render("values_augmented_system", &[])?;
        Ok(self.bundle(&Method::new(MethodKind::ValuesAugmented), respondent_id, question, system, user))
    }

    pub fn build_values_only(
        &self,
        respondent_id: &str,
        values_summary: &str,
        question: &Question,
    ) -> Result<PromptBundle, PromptError> {
        non_empty(values_summary, "values")?;
        let block = self.question_block(question)?;
        let user = self.render("values_only_user", &[("values", values_summary.trim()), ("question", &block)])?;
        let system = self.render("values_augmented_system", &[])?;
        Ok(self.bundle(&Method::values_only(), respondent_id, question, system, user))
    }

    /// Target demographics, then one labeled block per retrieved individual in
    /// rerank order, then the question, under the QA task system prompt.
    pub fn build_values_rag(
        &self,
        respondent_id: &str,
        demo_test: &str,
        reranked: &RerankedSet,
        question: &Question,
    ) -> Result<PromptBundle, PromptError> {
        non_empty(demo_test, "demographic")?;
        if reranked.entries.is_empty() {
            return Err(PromptError::EmptyRetrieval);
        }
        let block = self.question_block(question)?;
        let retrieved = reranked
            .entries
            .iter()
            .map(|e| {
                self.render(
                    "retrieved_block",
                    &[
                        ("id", &e.respondent_id),
                        ("demographics", e.demographic_summary.trim()),
                        ("values", e.values_summary.trim()),
                    ],
                )
            })
            .collect::<Result<Vec<_>, _>>()?
            .join("\n\n");
        let user = self.render(
            "values_rag_user",
            &[("demographics", demo_test.trim()), ("retrieved", &retrieved), ("question", &block)],
        )?;
        let system = self.render("qa_system", &[])?;
        Ok(self.bundle(&Method::values_rag(reranked.k), respondent_id, question, system, user))
    }
}

/// Number of retrieved-individual blocks in a rendered ValuesRAG prompt.
pub fn retrieved_block_count(user: &str) -> usize {
    user.lines().filter(|l| l.starts_with("[Individual ") && l.ends_with(']')).count()
}

// ---------------------------------------------------------------------------
// Answer parsing

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub option_code: i64,
    pub raw: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseError {
    #[error("no integer answer found")]
    NoInteger,
    #[error("answer {0} is not a declared option")]
    InvalidOption(i64),
}

/// Canonical answer form.
pub fn render_answer(code: i64) -> String {
    format!("{{\"answer\": {code}}}")
}

fn integer_of(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn integer_in_object(obj: &serde_json::Map<String, Value>) -> Option<i64> {
    if let Some(v) = obj.get("answer").and_then(integer_of) {
        return Some(v);
    }
    let ints: Vec<i64> = obj.values().filter_map(integer_of).collect();
    match ints.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

fn integer_in_json(v: &Value) -> Option<i64> {
    match v {
        Value::Object(o) => integer_in_object(o),
        other => integer_of(other),
    }
}

/// The last balanced `{...}` block that parses as a JSON object.
fn terminal_json_block(text: &str) -> Option<Value> {
    let close = text.rfind('}')?;
    let head = &text[..=close];
    head.match_indices('{')
        .map(|(i, _)| i)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .find_map(|open| serde_json::from_str::<Value>(&head[open..]).ok().filter(Value::is_object))
}

/// Accepts a JSON answer object, a bare integer, or text ending in a JSON
/// block, then checks the code against the question's options.
pub fn parse_answer(raw: &str, question: &Question) -> Result<ParsedAnswer, ParseError> {
    let trimmed = raw.trim();
    let unfenced = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed)
        .trim();
    let code = serde_json::from_str::<Value>(unfenced)
        .ok()
        .and_then(|v| integer_in_json(&v))
        .or_else(|| unfenced.parse::<i64>().ok())
        .or_else(|| terminal_json_block(trimmed).and_then(|v| integer_in_json(&v)))
        .ok_or(ParseError::NoInteger)?;
    if !question.has_option(code) {
        return Err(ParseError::InvalidOption(code));
    }
    Ok(ParsedAnswer { option_code: code, raw: raw.to_string() })
}

/// Options for answering a question, keyed by code.
pub fn option_map(question: &Question) -> HashMap<i64, &str> {
    question.options.iter().map(|o| (o.code, o.label.as_str())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{demo, likert};
    use crate::index::RerankedEntry;
    use proptest::prelude::*;

    /// Editing any built-in template changes every downstream fingerprint.
    /// Update this value deliberately when a template changes.
    #[test]
    fn builtin_template_fingerprint_is_pinned() {
        let set = TemplateSet::builtin();
        assert_eq!(set.hashes().len(), 12);
        assert_eq!(set.fingerprint(), "e91bdc7722a59dd252530356f1763790ea9f1b41079c019bdc0a6efd6cc0e42b");
    }

    fn q10() -> Question {
        likert("q1", "trust", "How much do you trust strangers?", 10)
    }

    fn pool(n: usize) -> Vec<FewShotExample> {
        (0..n)
            .map(|i| FewShotExample {
                question_id: format!("p{i}"),
                question_text: format!("Pool question {i}?"),
                answer_label: format!("answer {i}"),
            })
            .collect()
    }

    fn reranked(k: usize) -> RerankedSet {
        RerankedSet {
            k,
            entries: (0..k)
                .map(|i| RerankedEntry {
                    respondent_id: format!("w{i}"),
                    rerank_score: 1.0 - i as f64 / 10.0,
                    demographic_summary: format!("demo of w{i}"),
                    values_summary: format!("values of w{i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn template_render_is_single_pass() {
        let t = Template::new("t", "a {{x}} b {{y}}");
        assert_eq!(t.slots(), ["x", "y"]);
        assert_eq!(t.render(&[("x", "{{y}}"), ("y", "}}{{")]).unwrap(), "a {{y}} b }}{{");
        assert!(t.render(&[("x", "1")]).is_err());
    }

    #[test]
    fn builtin_templates_are_complete() {
        let set = TemplateSet::builtin();
        assert_eq!(set.hashes().len(), BUILTIN.len());
        assert!(set.get("qa_system").body.starts_with("Task:\nRespond to the question as the target individual"));
        assert!(set.get("values_summary").body.ends_with("summarize this person's values in one paragraph."));
        assert_eq!(set.fingerprint(), TemplateSet::builtin().fingerprint());
    }

    #[test]
    fn template_dir_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("zero_shot_system.txt"), "Custom.\n").unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.get("zero_shot_system").body, "Custom.");
        assert_ne!(set.fingerprint(), TemplateSet::builtin().fingerprint());
    }

    #[test]
    fn zero_shot_lists_each_option_once() {
        let b = PromptBuilder::default();
        let bundle = b.build_zero_shot("r1", &q10()).unwrap();
        for code in 1..=10 {
            let line = format!("{code}. option {code}");
            assert_eq!(bundle.user.lines().filter(|l| *l == line).count(), 1);
        }
        assert_eq!(bundle.user.matches("How much do you trust strangers?").count(), 1);
        assert_eq!(b.build_zero_shot("r1", &q10()).unwrap(), bundle);
        let other = b.build_zero_shot("r1", &likert("q2", "trust", "Another?", 10)).unwrap();
        assert_eq!(other.system, bundle.system);
        assert_ne!(other.user, bundle.user);
        assert!(matches!(
            b.build_zero_shot("r1", &demo("d", "Age", &["a", "b"])),
            Err(PromptError::DemographicTarget(_))
        ));
    }

    #[test]
    fn role_assignment_embeds_persona_verbatim() {
        let b = PromptBuilder::default();
        let persona = "A 63-year-old middle-class Protestant male from the U.S.";
        let bundle = b.build_role_assignment("r", persona, &q10()).unwrap();
        assert!(bundle.system.contains(persona));
        assert!(!bundle.user.contains(persona));
        let braces = b.build_role_assignment("r", "likes {{question}} and {curly}", &q10()).unwrap();
        assert!(braces.system.contains("likes {{question}} and {curly}"));
        assert_eq!(b.build_role_assignment("r", "", &q10()), Err(PromptError::EmptySummary("demographic")));
    }

    #[test]
    fn few_shot_excludes_target_and_is_seeded() {
        let b = PromptBuilder::default();
        let mut p = pool(5);
        p.push(FewShotExample {
            question_id: "q1".into(),
            question_text: "Target leak?".into(),
            answer_label: "x".into(),
        });
        let bundle = b.build_few_shot("r", &p, &q10(), 5, 1).unwrap();
        assert!(!bundle.user.contains("Target leak?"));
        for i in 0..5 {
            assert!(bundle.user.contains(&format!("Pool question {i}?")));
        }
        assert_eq!(bundle.user.matches("Example ").count(), 5);
        assert_eq!(b.build_few_shot("r", &p, &q10(), 5, 1).unwrap(), bundle);

        let big = pool(30);
        let a = b.build_few_shot("r", &big, &q10(), 5, 1).unwrap();
        let c = b.build_few_shot("r", &big, &q10(), 5, 2).unwrap();
        assert_ne!(a.user, c.user);
        assert_eq!(
            b.build_few_shot("r", &pool(3), &q10(), 5, 1),
            Err(PromptError::PoolTooSmall { need: 5, have: 3 })
        );
    }

    #[test]
    fn hybrid_composes_role_and_shots() {
        let b = PromptBuilder::default();
        let big = pool(30);
        let role = b.build_role_assignment("r", "young urban teacher", &q10()).unwrap();
        let h1 = b.build_hybrid("r", "young urban teacher", &big, &q10(), 5, 1).unwrap();
        let h2 = b.build_hybrid("r", "young urban teacher", &big, &q10(), 5, 2).unwrap();
        assert_eq!(h1.system, role.system);
        assert_eq!(h1.user.matches("Example ").count(), 5);
        assert_eq!(h1.system, h2.system);
        assert_ne!(h1.user, h2.user);
        assert_eq!(
            b.build_hybrid("r", "x", &pool(2), &q10(), 5, 1),
            b.build_few_shot("r", &pool(2), &q10(), 5, 1)
        );
    }

    #[test]
    fn values_augmented_slot_order() {
        let b = PromptBuilder::default();
        let bundle = b.build_values_augmented("r", "VALUES-TEXT", "DEMO-TEXT", &q10()).unwrap();
        let v = bundle.user.find("VALUES-TEXT").unwrap();
        let d = bundle.user.find("DEMO-TEXT").unwrap();
        let q = bundle.user.find("How much do you trust").unwrap();
        assert!(v < d && d < q);
        assert!(bundle.system.contains("step by step"));
        assert_eq!(b.build_values_augmented("r", "V", "", &q10()), Err(PromptError::EmptySummary("demographic")));
        assert_eq!(b.build_values_augmented("r", "V", "D", &q10()), b.build_values_augmented("r", "V", "D", &q10()));

        let only = b.build_values_only("r", "VALUES-TEXT", &q10()).unwrap();
        assert_eq!(only.method, "values_only");
        assert!(!only.user.contains("Demographic summary"));
    }

    #[test]
    fn values_rag_has_k_blocks_in_order() {
        let b = PromptBuilder::default();
        let bundle = b.build_values_rag("t", "TARGET-DEMO", &reranked(3), &q10()).unwrap();
        assert_eq!(retrieved_block_count(&bundle.user), 3);
        let pos: Vec<usize> = (0..3).map(|i| bundle.user.find(&format!("[Individual w{i}]")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(bundle.user.find("TARGET-DEMO").unwrap() < pos[0]);
        assert!(bundle.user.find("Question:").unwrap() > pos[2]);
        assert!(bundle.system.contains("Steps for Inferring:"));
        assert!(bundle.user.contains("values of w2") && bundle.user.contains("demo of w1"));
        assert_eq!(bundle.method, "values_rag(k=3)");

        let one = b.build_values_rag("t", "TARGET-DEMO", &reranked(1), &q10()).unwrap();
        assert_eq!(retrieved_block_count(&one.user), 1);
        assert_eq!(one.system, bundle.system);
        assert_eq!(b.build_values_rag("t", "TARGET-DEMO", &reranked(3), &q10()).unwrap(), bundle);
        assert_eq!(b.build_values_rag("t", "D", &reranked(0), &q10()), Err(PromptError::EmptyRetrieval));
    }

    #[test]
    fn separation_of_context() {
        let b = PromptBuilder::default();
        let z = b.build_zero_shot("r", &q10()).unwrap();
        assert!(!z.user.contains("summary") && !z.system.contains("summary"));
        let r = b.build_role_assignment("r", "DEMO", &q10()).unwrap();
        assert!(!r.user.contains("Values") && !r.system.contains("Values summary"));
    }

    #[test]
    fn parse_answer_forms() {
        let q = q10();
        assert_eq!(parse_answer(r#"{"answer": 3}"#, &q).unwrap().option_code, 3);
        assert_eq!(parse_answer("3", &q).unwrap().option_code, 3);
        assert_eq!(parse_answer(" 7\n", &q).unwrap().option_code, 7);
        assert_eq!(parse_answer("```json\n{\"answer\": \"4\"}\n```", &q).unwrap().option_code, 4);
        assert_eq!(
            parse_answer("The person values family {a lot}. Final:\n{\"answer\": 9}", &q).unwrap().option_code,
            9
        );
        assert_eq!(parse_answer(r#"{"selected_option": 2}"#, &q).unwrap().option_code, 2);
        assert_eq!(parse_answer(r#"{"answer": 42}"#, &q), Err(ParseError::InvalidOption(42)));
        assert_eq!(parse_answer("no idea", &q), Err(ParseError::NoInteger));
        assert_eq!(parse_answer(r#"{"a": 1, "b": 2}"#, &q), Err(ParseError::NoInteger));
    }

    #[test]
    fn method_labels_and_parsing() {
        assert_eq!("values_rag".parse::<Method>().unwrap(), Method::values_rag(3));
        assert_eq!("values_rag:k=5".parse::<Method>().unwrap().label(), "values_rag(k=5)");
        assert_eq!("few_shot:shots=2".parse::<Method>().unwrap().n_shots, 2);
        assert_eq!("values_only".parse::<Method>().unwrap(), Method::values_only());
        assert!("values_rag:k=0".parse::<Method>().is_err());
        assert!("nonsense".parse::<Method>().is_err());
        assert_eq!(Method::all().len(), 6);
    }

    proptest! {
        #[test]
        fn parse_inverts_render(n in 2i64..12, pick in 0usize..12) {
            let q = likert("q", "t", "Q?", n);
            let code = q.options[pick % q.options.len()].code;
            prop_assert_eq!(parse_answer(&render_answer(code), &q).unwrap().option_code, code);
        }
    }
}
