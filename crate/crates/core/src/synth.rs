//! Seeded synthetic survey corpora with a latent demographic/values model,
//! plus a value-aware mock answerer that reads evidence out of prompts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{listed_option_codes, BackendError, GenerationRequest, Generator};
use crate::corpus::{AnswerOption, Corpus, CorpusError, CorpusRole, Question, QuestionKind, ResponseScale};
use crate::prompt::render_answer;
use crate::util::substream;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthetic corpus needs at least one {0}")]
    Empty(&'static str),
    #[error("coupling must lie in [0, 1], got {0}")]
    Coupling(f64),
    #[error("missing rate must lie in [0, 1), got {0}")]
    MissingRate(f64),
    #[error("scale {min}..{max} needs at least two codes")]
    Scale { min: i64, max: i64 },
    #[error("question `{0}` is not a linked values question")]
    NotLinked(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("hidden truth file {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProfile {
    /// In [0, 1]^d.
    pub demo_vector: Vec<f64>,
    /// In [-1, 1]^v.
    pub value_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub name: String,
    pub questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub region: String,
    pub role: CorpusRole,
    pub id_prefix: String,
    pub n_respondents: usize,
    pub topics: Vec<TopicSpec>,
    /// Demographic traits, one question each.
    pub demo_dims: usize,
    pub demo_levels: usize,
    pub value_dims: usize,
    pub coupling: f64,
    pub scale_min: i64,
    pub scale_max: i64,
    /// Share of values answers replaced by the refusal code.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            region: "synthetic".into(),
            role: CorpusRole::Retrieval,
            id_prefix: "r".into(),
            n_respondents: 200,
            topics: (0..4).map(|i| TopicSpec { name: format!("topic{i:02}"), questions: 5 }).collect(),
            demo_dims: 8,
            demo_levels: 5,
            value_dims: 16,
            coupling: 0.9,
            scale_min: 1,
            scale_max: 10,
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

pub const MISSING_CODE: i64 = -1;

/// The 13 values topics of the World Values Survey codebook with their
/// question counts.
pub fn wvs_topics() -> Vec<TopicSpec> {
    [
        ("Social Values, Norms, Stereotypes", 45),
        ("Happiness and Wellbeing", 11),
        ("Social Capital, Trust and Organizational Membership", 47),
        ("Economic Values", 6),
        ("Perceptions of Corruption", 9),
        ("Perceptions of Migration", 10),
        ("Perceptions of Security", 21),
        ("Index of Postmaterialism", 6),
        ("Perceptions about Science and Technology", 6),
        ("Religious Values", 12),
        ("Ethical Values", 23),
        ("Political Interest and Political Participation", 35),
        ("Political Culture and Political Regimes", 25),
    ]
    .into_iter()
    .map(|(n, q)| TopicSpec { name: n.into(), questions: q })
    .collect()
}

const TRAIT_NAMES: &[&str] = &[
    "age", "sex", "education", "class", "income", "religion", "urbanity", "employment", "marital", "household",
    "language", "ethnicity", "region", "immigrant", "children", "occupation",
];

fn trait_name(i: usize) -> String {
    match TRAIT_NAMES.get(i) {
        Some(n) => n.to_string(),
        None => format!("trait{i}"),
    }
}

/// Hidden generator state, written next to a synthetic corpus for tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    pub seed: u64,
    pub coupling: f64,
    pub question_dims: BTreeMap<String, usize>,
    pub profiles: BTreeMap<String, LatentProfile>,
}

impl HiddenTruth {
    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let io = |e: std::io::Error| SynthError::Io { path: path.display().to_string(), reason: e.to_string() };
        fs::write(path, serde_json::to_vec_pretty(self).expect("hidden truth serializes")).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        let err = |reason: String| SynthError::Io { path: path.display().to_string(), reason };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }
}

/// Uniform bucketing of [-1, 1] into the scale's codes: half-open buckets,
/// the top one closed at +1. A value of exactly 0 on a 1..10 scale gives 6.
pub fn discretize(x: f64, min: i64, max: i64) -> i64 {
    let k = (max - min + 1) as f64;
    let bucket = (((x.clamp(-1.0, 1.0) + 1.0) / 2.0) * k).floor().min(k - 1.0);
    min + bucket as i64
}

/// Center of the bucket for `code`.
pub fn bucket_center(code: i64, min: i64, max: i64) -> f64 {
    let k = (max - min + 1) as f64;
    -1.0 + ((code - min) as f64 + 0.5) * 2.0 / k
}

/// The demographic level (1-based) for a trait value in [0, 1].
fn demo_level(x: f64, levels: usize) -> i64 {
    ((x * levels as f64).floor() as i64).min(levels as i64 - 1) + 1
}

pub fn values_question_id(j: usize) -> String {
    format!("v{j:04}")
}

fn values_question_text(id: &str, topic: &str) -> String {
    format!("Statement {id} on {topic}: how much do you agree?")
}

/// Generator matrix, v×d. Keyed by seed alone so corpora generated with the
/// same seed share the demographic/values link.
fn generator_matrix(seed: u64, v: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, &["synth", "W"]);
    let a = 1.5 / (d as f64).sqrt();
    (0..v).map(|_| (0..d).map(|_| rng.random_range(-a..=a)).collect()).collect()
}

/// Latent profile for one respondent. The coupling term uses the centered
/// demographic vector (2·demo − 1) so W acts symmetrically around zero.
pub fn latent_profile(config: &SynthConfig, w: &[Vec<f64>], respondent_id: &str) -> LatentProfile {
    let mut rng = substream(config.seed, &["synth", "respondent", &config.name, respondent_id]);
    let demo: Vec<f64> = (0..config.demo_dims).map(|_| rng.random::<f64>()).collect();
    let rho = config.coupling;
    let value = w
        .iter()
        .map(|row| {
            let coupled: f64 = row.iter().zip(&demo).map(|(wij, dj)| wij * (2.0 * dj - 1.0)).sum();
            let noise: f64 = rng.random_range(-1.0..=1.0);
            (rho * coupled + (1.0 - rho) * noise).clamp(-1.0, 1.0)
        })
        .collect();
    LatentProfile { demo_vector: demo, value_vector: value }
}

pub fn generate_corpus(config: &SynthConfig) -> Result<(Corpus, HiddenTruth), SynthError> {
    let n_questions: usize = config.topics.iter().map(|t| t.questions).sum();
    if n_questions == 0 {
        return Err(SynthError::Empty("values question"));
    }
    if config.n_respondents == 0 {
        return Err(SynthError::Empty("respondent"));
    }
    if config.demo_dims == 0 || config.value_dims == 0 || config.demo_levels == 0 {
        return Err(SynthError::Empty("latent dimension"));
    }
    if !(0.0..=1.0).contains(&config.coupling) {
        return Err(SynthError::Coupling(config.coupling));
    }
    if !(0.0..1.0).contains(&config.missing_rate) {
        return Err(SynthError::MissingRate(config.missing_rate));
    }
    if config.scale_max <= config.scale_min || config.scale_min <= MISSING_CODE && config.scale_max >= MISSING_CODE {
        return Err(SynthError::Scale { min: config.scale_min, max: config.scale_max });
    }

    let scale = ResponseScale::new(config.scale_min, config.scale_max).with_missing([MISSING_CODE]);
    let options: Vec<AnswerOption> =
        (config.scale_min..=config.scale_max).map(|c| AnswerOption { code: c, label: format!("point {c}") }).collect();
    let mut questions = Vec::with_capacity(n_questions + config.demo_dims);
    let mut question_dims = BTreeMap::new();
    let mut j = 0;
    for topic in &config.topics {
        for _ in 0..topic.questions {
            let id = values_question_id(j);
            question_dims.insert(id.clone(), j % config.value_dims);
            questions.push(Question {
                text: values_question_text(&id, &topic.name),
                id,
                topic: topic.name.clone(),
                kind: QuestionKind::Values,
                scale: scale.clone(),
                options: options.clone(),
            });
            j += 1;
        }
    }
    for t in 0..config.demo_dims {
        let name = trait_name(t);
        let levels = config.demo_levels as i64;
        questions.push(Question {
            id: format!("d_{name}"),
            topic: "demographics".into(),
            text: format!("Demographic trait: {name}"),
            kind: QuestionKind::Demographic,
            scale: ResponseScale::new(1, levels).with_missing([MISSING_CODE]),
            options: (1..=levels).map(|l| AnswerOption { code: l, label: format!("{name}_{l}") }).collect(),
        });
    }

    let w = generator_matrix(config.seed, config.value_dims, config.demo_dims);
    let width = (config.n_respondents.max(2) - 1).to_string().len();
    let mut respondents = Vec::with_capacity(config.n_respondents);
    let mut profiles = BTreeMap::new();
    for i in 0..config.n_respondents {
        let id = format!("{}{i:0width$}", config.id_prefix);
        let profile = latent_profile(config, &w, &id);
        let mut miss = substream(config.seed, &["synth", "missing", &config.name, &id]);
        let mut answers = BTreeMap::new();
        for (qid, &dim) in &question_dims {
            let code = if config.missing_rate > 0.0 && miss.random::<f64>() < config.missing_rate {
                MISSING_CODE
            } else {
                discretize(profile.value_vector[dim], config.scale_min, config.scale_max)
            };
            answers.insert(qid.clone(), code);
        }
        for (t, x) in profile.demo_vector.iter().enumerate() {
            answers.insert(format!("d_{}", trait_name(t)), demo_level(*x, config.demo_levels));
        }
        respondents.push(crate::corpus::Respondent { id: id.clone(), dataset: config.name.clone(), answers });
        profiles.insert(id, profile);
    }
    let topics = config.topics.iter().map(|t| t.name.clone()).collect();
    let corpus = Corpus::new(&config.name, &config.region, config.role, topics, questions, respondents)?;
    Ok((corpus, HiddenTruth { seed: config.seed, coupling: config.coupling, question_dims, profiles }))
}

/// The code a respondent with `profile` gives to `question`.
pub fn oracle_answer(profile: &LatentProfile, question: &Question, hidden: &HiddenTruth) -> Result<i64, SynthError> {
    if !question.is_values() {
        return Err(SynthError::NotLinked(question.id.clone()));
    }
    let dim = *hidden.question_dims.get(&question.id).ok_or_else(|| SynthError::NotLinked(question.id.clone()))?;
    let x = *profile.value_vector.get(dim).ok_or_else(|| SynthError::NotLinked(question.id.clone()))?;
    Ok(discretize(x, question.scale.min, question.scale.max))
}

// ---------------------------------------------------------------------------
// Value-aware answering mock

struct LinkedQuestion {
    dim: usize,
    min: i64,
    max: i64,
    labels: HashMap<String, i64>,
}

/// Answers like a respondent whose latent values are estimated from any
/// `Q:`/`A:` pairs in the prompt on the target question's dimension, or
/// from a population prior when the prompt carries no such evidence.
pub struct OracleAnswerer {
    by_text: HashMap<String, LinkedQuestion>,
    prior: Vec<f64>,
}

impl OracleAnswerer {
    /// `reference` supplies question texts and the population prior.
    pub fn new(reference: &Corpus, hidden: &HiddenTruth) -> Self {
        let n_dims = hidden.question_dims.values().max().map_or(0, |m| m + 1);
        let mut by_text = HashMap::new();
        let (mut sum, mut count) = (vec![0.0; n_dims], vec![0usize; n_dims]);
        for q in reference.values_questions() {
            let Some(&dim) = hidden.question_dims.get(&q.id) else { continue };
            for r in reference.respondents() {
                if let crate::corpus::Answer::Valid(code) = reference.answer(r, &q.id) {
                    sum[dim] += bucket_center(code, q.scale.min, q.scale.max);
                    count[dim] += 1;
                }
            }
            by_text.insert(
                q.text.clone(),
                LinkedQuestion {
                    dim,
                    min: q.scale.min,
                    max: q.scale.max,
                    labels: q.options.iter().map(|o| (o.label.clone(), o.code)).collect(),
                },
            );
        }
        let prior = sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
        Self { by_text, prior }
    }

    /// Latent estimate on `dim` from prompt evidence, if any.
    fn evidence(&self, context: &str, dim: usize) -> Option<f64> {
        let mut lines = context.lines().peekable();
        let (mut sum, mut n) = (0.0, 0usize);
        while let Some(line) = lines.next() {
            let Some(text) = line.trim().strip_prefix("Q: ") else { continue };
            let Some(label) = lines.peek().and_then(|l| l.trim().strip_prefix("A: ")) else { continue };
            if let Some(q) = self.by_text.get(text).filter(|q| q.dim == dim) {
                if let Some(&code) = q.labels.get(label) {
                    sum += bucket_center(code, q.min, q.max);
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

impl Generator for OracleAnswerer {
    fn backend_id(&self) -> String {
        "mock-oracle-answerer".into()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let prompt = &req.user_prompt;
        let at = prompt.rfind("Question: ").ok_or_else(|| BackendError::InvalidRequest("no question block".into()))?;
        let text = prompt[at + "Question: ".len()..].lines().next().unwrap_or_default().trim();
        let options = listed_option_codes(&prompt[at..]);
        let Some(q) = self.by_text.get(text) else {
            // unknown question: answer the lowest listed option
            let code = options.first().copied().ok_or_else(|| BackendError::InvalidRequest("no options".into()))?;
            return Ok(render_answer(code));
        };
        let x = self.evidence(&prompt[..at], q.dim).unwrap_or(self.prior[q.dim]);
        Ok(render_answer(discretize(x, q.min, q.max)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptBuilder;

    fn config(n: usize, rho: f64) -> SynthConfig {
        SynthConfig { n_respondents: n, coupling: rho, seed: 7, ..SynthConfig::default() }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn discretization_pins() {
        assert_eq!(discretize(1.0, 1, 10), 10);
        assert_eq!(discretize(-1.0, 1, 10), 1);
        assert_eq!(discretize(0.0, 1, 10), 6);
        assert_eq!(discretize(-0.0001, 1, 10), 5);
        assert_eq!(discretize(0.0, 1, 5), 3);
        for c in 1..=10 {
            assert_eq!(discretize(bucket_center(c, 1, 10), 1, 10), c);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, ha) = generate_corpus(&config(30, 0.5)).unwrap();
        let (b, hb) = generate_corpus(&config(30, 0.5)).unwrap();
        assert_eq!(a.to_canonical_bytes(), b.to_canonical_bytes());
        assert_eq!(ha, hb);
        let (c, _) = generate_corpus(&SynthConfig { seed: 8, ..config(30, 0.5) }).unwrap();
        assert_ne!(a.to_canonical_bytes(), c.to_canonical_bytes());
    }

    #[test]
    fn answers_follow_latent_values() {
        let (c, hidden) = generate_corpus(&config(20, 0.7)).unwrap();
        for r in c.respondents() {
            let p = &hidden.profiles[&r.id];
            for q in c.values_questions() {
                assert_eq!(r.answers[&q.id], oracle_answer(p, q, &hidden).unwrap());
            }
        }
        let demo = c.demographic_questions().next().unwrap();
        assert!(oracle_answer(&hidden.profiles["r00"], demo, &hidden).is_err());
    }

    #[test]
    fn full_coupling_equal_demographics_equal_values() {
        let cfg = config(2, 1.0);
        let w = generator_matrix(cfg.seed, cfg.value_dims, cfg.demo_dims);
        let a = latent_profile(&cfg, &w, "x");
        let b = latent_profile(&cfg, &w, "y");
        assert_ne!(a.demo_vector, b.demo_vector);
        let value_of = |demo: &[f64]| -> Vec<f64> {
            w.iter().map(|row| row.iter().zip(demo).map(|(wij, d)| wij * (2.0 * d - 1.0)).sum::<f64>().clamp(-1.0, 1.0)).collect()
        };
        assert_eq!(value_of(&a.demo_vector), a.value_vector);
        assert_eq!(value_of(&b.demo_vector), b.value_vector);
        let (c, hidden) = generate_corpus(&config(40, 1.0)).unwrap();
        // any two respondents in the same demographic cell at rho=1 have
        // values determined by their demo vectors alone
        for r in c.respondents() {
            assert_eq!(value_of(&hidden.profiles[&r.id].demo_vector), hidden.profiles[&r.id].value_vector);
        }
    }

    #[test]
    fn zero_coupling_decorrelates() {
        let cfg = SynthConfig { n_respondents: 2000, coupling: 0.0, seed: 7, ..SynthConfig::default() };
        let (_, hidden) = generate_corpus(&cfg).unwrap();
        let profiles: Vec<&LatentProfile> = hidden.profiles.values().collect();
        let mut rng = substream(1, &["pairs"]);
        let (mut dd, mut vd) = (Vec::new(), Vec::new());
        for _ in 0..5000 {
            let i = rng.random_range(0..profiles.len());
            let j = rng.random_range(0..profiles.len());
            if i == j {
                continue;
            }
            dd.push(dist(&profiles[i].demo_vector, &profiles[j].demo_vector));
            vd.push(dist(&profiles[i].value_vector, &profiles[j].value_vector));
        }
        assert!(pearson(&dd, &vd).abs() < 0.1);
    }

    #[test]
    fn coupling_shrinks_neighbor_value_distance() {
        let mean_nn = |rho: f64| {
            let (_, hidden) = generate_corpus(&config(300, rho)).unwrap();
            let p: Vec<&LatentProfile> = hidden.profiles.values().collect();
            let mut total = 0.0;
            for (i, a) in p.iter().enumerate() {
                let nn = (0..p.len())
                    .filter(|&j| j != i)
                    .min_by(|&x, &y| {
                        dist(&a.demo_vector, &p[x].demo_vector).partial_cmp(&dist(&a.demo_vector, &p[y].demo_vector)).unwrap()
                    })
                    .unwrap();
                total += a.value_vector.iter().zip(&p[nn].value_vector).map(|(x, y)| (x - y).abs()).sum::<f64>()
                    / a.value_vector.len() as f64;
            }
            total / p.len() as f64
        };
        let (d0, d5, d1) = (mean_nn(0.0), mean_nn(0.5), mean_nn(1.0));
        assert!(d0 >= d5 && d5 >= d1, "{d0} {d5} {d1}");
    }

    #[test]
    fn oracle_answer_is_monotone() {
        let (c, hidden) = generate_corpus(&config(1, 0.5)).unwrap();
        let q = c.values_questions().next().unwrap();
        let dim = hidden.question_dims[&q.id];
        let mut last = i64::MIN;
        for step in 0..=200 {
            let mut p = hidden.profiles["r0"].clone();
            p.value_vector[dim] = -1.0 + step as f64 * 0.01;
            let code = oracle_answer(&p, q, &hidden).unwrap();
            assert!(code >= last);
            last = code;
        }
        assert_eq!(last, 10);
    }

    #[test]
    fn wvs_layout_shape() {
        let cfg = SynthConfig { n_respondents: 3, topics: wvs_topics(), demo_dims: 31, ..SynthConfig::default() };
        let (c, _) = generate_corpus(&cfg).unwrap();
        assert_eq!(c.topics().len(), 13);
        assert_eq!(c.values_questions().count(), 256);
        assert_eq!(c.demographic_questions().count(), 31);
    }

    #[test]
    fn missing_rate_and_config_errors() {
        let (c, _) = generate_corpus(&SynthConfig { missing_rate: 0.3, ..config(50, 0.5) }).unwrap();
        let missing = c.respondents().iter().flat_map(|r| r.answers.values()).filter(|&&v| v == MISSING_CODE).count();
        assert!(missing > 0);
        assert!(matches!(generate_corpus(&config(0, 0.5)), Err(SynthError::Empty("respondent"))));
        assert!(matches!(generate_corpus(&config(3, 1.5)), Err(SynthError::Coupling(_))));
        assert!(matches!(
            generate_corpus(&SynthConfig { topics: vec![], ..config(3, 0.5) }),
            Err(SynthError::Empty("values question"))
        ));
    }

    #[test]
    fn oracle_answerer_uses_evidence_then_prior() {
        let (c, hidden) = generate_corpus(&config(50, 0.9)).unwrap();
        let oracle = OracleAnswerer::new(&c, &hidden);
        let target = c.question("v0000").unwrap();
        let same_dim = c.question(&values_question_id(16)).unwrap();
        let b = PromptBuilder::default();

        let zero = b.build_zero_shot("r", target).unwrap();
        let prior_code: i64 = {
            let out = oracle.complete(&GenerationRequest::new(&zero.system, &zero.user, "t")).unwrap();
            crate::prompt::parse_answer(&out, target).unwrap().option_code
        };
        assert_eq!(prior_code, discretize(oracle.prior[0], 1, 10));

        let user = format!("Context:\nQ: {}\nA: point 2\n\n{}", same_dim.text, zero.user);
        let out = oracle.complete(&GenerationRequest::new("s", user, "t")).unwrap();
        assert_eq!(crate::prompt::parse_answer(&out, target).unwrap().option_code, 2);
    }
}
