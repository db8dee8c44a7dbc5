//! Retrieval-grounded explanations and 1 to 5 consistency scoring.
//!
//! Text generation goes through [`TextGenBackend`]. [`StubBackend`] is an
//! offline, deterministic rater used by tests and the default CLI path;
//! [`RemoteBackend`] talks to an HTTP completion endpoint and is opt-in.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{display_name, Corpus, CorpusSample, Finding};
use crate::encoders::ModelParams;
use crate::retrieval::{build_index, conditioned_index, query_filtered, EmbeddingIndex, Modality};
use crate::{Error, Result};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend request failed: {0}")]
    Request(String),
    #[error("backend request timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend answered HTTP {0}")]
    Status(u16),
    #[error("environment variable `{0}` holding the backend token is not set")]
    MissingToken(String),
    #[error("backend response is malformed: {0}")]
    Malformed(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
}

impl BackendError {
    /// Transport-level failures worth retrying.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Request(_) | BackendError::Timeout(_))
    }
}

/// A text completion service.
pub trait TextGenBackend: Sync {
    /// Identity recorded next to every score.
    fn name(&self) -> String;
    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError>;
}

/// One retrieved case handed to the explanation prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedReport {
    pub rank: usize,
    pub sample_id: String,
    /// The case's description at the conditioning region.
    pub description: String,
    pub findings: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRequest {
    pub query_id: String,
    pub condition: Finding,
    pub reports: Vec<RetrievedReport>,
}

impl ExplanationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.condition.region().is_none() {
            return Err(Error::InvalidArgument("explanations are conditioned on a lesion region".into()));
        }
        if self.reports.is_empty() {
            return Err(Error::Empty("retrieved reports".into()));
        }
        for (i, r) in self.reports.iter().enumerate() {
            if r.rank != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "retrieved ranks must run 1, 2, ...; position {} has rank {}",
                    i + 1,
                    r.rank
                )));
            }
            if r.description.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("report `{}` has an empty description", r.sample_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub score: u8,
    pub rater: String,
    pub raw: String,
}

/// What a case shows at `region`: its finding there, or an explicit
/// "no findings" sentence.
pub fn regional_description(sample: &CorpusSample, region: &str) -> String {
    match sample.lesions().find(|f| f.region() == Some(region)) {
        Some(f) => f.describe(),
        None => format!("no findings at the {}", display_name(region)),
    }
}

pub fn build_explanation_prompt(request: &ExplanationRequest) -> Result<String> {
    request.validate()?;
    let region = display_name(request.condition.region().expect("validated"));
    let mut out = String::new();
    out.push_str("You are assisting with a chest X-ray review.\n");
    out.push_str(&format!("The query image was flagged for the {region} region.\n"));
    out.push_str(&format!(
        "The most similar patient cases retrieved for the {region} region are listed below, most similar first.\n"
    ));
    for r in &request.reports {
        out.push_str(&format!("Case {} ({}): {}\n", r.rank, r.sample_id, r.description));
    }
    out.push_str(&format!(
        "Based only on these retrieved cases, explain what is likely present in the {region} region of the query image and give a preliminary diagnosis in one or two sentences.\n"
    ));
    Ok(out)
}

pub const SCORING_PROMPT_HEAD: &str = "Can you rate the consistency of the following two descriptions of a patient X-ray report in a scale of 1-5? Score 1 represents completely inconsistent disease diagnose and symptom descriptions. Score 2 represents inconsistent disease diagnose with little consistent symptom descriptions. Score 3 represents roughly consistent disease diagnose with certain degree of inconsistent symptom descriptions. Score 4 represents consistent disease diagnose with some inconsistent symptom descriptions. Score 5 represents completely consistent disease diagnose and symptom descriptions. Following are the two descriptions: ";

const SCORING_A: &str = "A. (";
const SCORING_B: &str = "). B. (";

/// The rating prompt with the two placeholders filled in.
pub fn build_scoring_prompt(generated: &str, ground_truth: &str) -> Result<String> {
    if generated.trim().is_empty() {
        return Err(Error::InvalidArgument("generated explanation is empty".into()));
    }
    if ground_truth.trim().is_empty() {
        return Err(Error::InvalidArgument("ground-truth description is empty".into()));
    }
    Ok(format!("{SCORING_PROMPT_HEAD}{SCORING_A}{generated}{SCORING_B}{ground_truth})"))
}

/// First digit 1 to 5 not adjacent to another letter or digit.
pub fn parse_score(raw: &str) -> Option<u8> {
    let chars: Vec<char> = raw.chars().collect();
    (0..chars.len()).find_map(|i| {
        let c = chars[i];
        let isolated = |j: Option<usize>| j.and_then(|j| chars.get(j)).is_none_or(|n| !n.is_alphanumeric());
        if ('1'..='5').contains(&c) && isolated(i.checked_sub(1)) && isolated(Some(i + 1)) {
            Some(c as u8 - b'0')
        } else {
            None
        }
    })
}

pub fn generate_explanation(backend: &dyn TextGenBackend, request: &ExplanationRequest) -> Result<String> {
    let prompt = build_explanation_prompt(request)?;
    let text = backend.complete(&prompt)?;
    if text.trim().is_empty() {
        return Err(BackendError::EmptyCompletion.into());
    }
    Ok(text)
}

pub fn score_consistency(
    backend: &dyn TextGenBackend,
    generated: &str,
    ground_truth: &str,
) -> Result<ConsistencyScore> {
    let prompt = build_scoring_prompt(generated, ground_truth)?;
    let raw = backend.complete(&prompt)?;
    match parse_score(&raw) {
        Some(score) => Ok(ConsistencyScore {
            score,
            rater: backend.name(),
            raw,
        }),
        None => Err(Error::UnparseableScore { raw }),
    }
}

/// Offline backend whose output is a pure function of the prompt.
///
/// Generation prompts are answered with a sentence naming the labels found in
/// the top-ranked case. Scoring prompts are rated by comparing the labels of
/// descriptions A and B:
///
/// | disease | region | score |
/// |---|---|---|
/// | same | same | 5, or 4 when `strict_wording` is set and the texts differ |
/// | same | different | 3 |
/// | related | any | 2 |
/// | otherwise | | 1 |
///
/// "No findings" counts as its own disease label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubBackend {
    pub diseases: Vec<String>,
    pub regions: Vec<String>,
    /// Unordered pairs of related diseases.
    pub related: Vec<(String, String)>,
    pub strict_wording: bool,
}

const NO_FINDINGS: &str = "no findings";

impl StubBackend {
    pub fn new(diseases: Vec<String>, regions: Vec<String>) -> Self {
        let related = default_related(&diseases);
        Self {
            diseases,
            regions,
            related,
            strict_wording: false,
        }
    }

    pub fn for_corpus(corpus: &Corpus) -> Self {
        Self::new(
            corpus.diseases.iter().map(|d| d.name.clone()).collect(),
            corpus.layout.regions.iter().map(|r| r.name.clone()).collect(),
        )
    }

    /// Labels mentioned in `text`, earliest mention first (longest on ties).
    pub fn labels(&self, text: &str) -> (Option<String>, Option<String>) {
        let lower = text.to_lowercase();
        let first = |names: &mut dyn Iterator<Item = &String>| -> Option<String> {
            names
                .filter_map(|n| {
                    let hit = [n.to_lowercase(), display_name(n).to_lowercase()]
                        .iter()
                        .filter_map(|form| lower.find(form.as_str()).map(|at| (at, form.len())))
                        .min_by_key(|&(at, len)| (at, std::cmp::Reverse(len)))?;
                    Some((hit, n.clone()))
                })
                .min_by_key(|&((at, len), _)| (at, std::cmp::Reverse(len)))
                .map(|(_, n)| n)
        };
        let disease = if lower.contains(NO_FINDINGS) {
            Some(NO_FINDINGS.to_string())
        } else {
            first(&mut self.diseases.iter())
        };
        (disease, first(&mut self.regions.iter()))
    }

    pub fn are_related(&self, a: &str, b: &str) -> bool {
        self.related
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    /// The documented truth table applied to two descriptions.
    pub fn rate(&self, generated: &str, ground_truth: &str) -> u8 {
        let (da, ra) = self.labels(generated);
        let (db, rb) = self.labels(ground_truth);
        match (da, db) {
            (Some(a), Some(b)) if a == b => {
                if ra != rb {
                    3
                } else if self.strict_wording && normalize(generated) != normalize(ground_truth) {
                    4
                } else {
                    5
                }
            }
            (Some(a), Some(b)) if self.are_related(&a, &b) => 2,
            _ => 1,
        }
    }

    fn answer_generation(&self, prompt: &str) -> String {
        let top = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Case 1 ").and_then(|rest| rest.split_once(": ")))
            .map(|(_, desc)| desc)
            .unwrap_or(prompt);
        match self.labels(top) {
            (Some(d), Some(r)) if d != NO_FINDINGS => format!(
                "Preliminary diagnosis: {} at the {} ({d}@{r}), as in the most similar retrieved case.",
                display_name(&d),
                display_name(&r)
            ),
            (_, Some(r)) => format!(
                "Preliminary diagnosis: no findings at the {}, as in the most similar retrieved case.",
                display_name(&r)
            ),
            _ => "Preliminary diagnosis: undetermined from the retrieved cases.".to_string(),
        }
    }
}

fn normalize(s: &str) -> String {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fluid-type and collapse-type pairings among the default disease names.
fn default_related(diseases: &[String]) -> Vec<(String, String)> {
    const PAIRS: [(&str, &str); 2] = [("pleural-effusion", "edema"), ("consolidation", "atelectasis")];
    PAIRS
        .iter()
        .filter(|(a, b)| diseases.iter().any(|d| d == a) && diseases.iter().any(|d| d == b))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

impl TextGenBackend for StubBackend {
    fn name(&self) -> String {
        "stub".to_string()
    }

    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        if let Some(body) = prompt.strip_prefix(SCORING_PROMPT_HEAD) {
            let pair = body
                .strip_prefix(SCORING_A)
                .and_then(|b| b.strip_suffix(')'))
                .and_then(|b| b.rsplit_once(SCORING_B));
            return Ok(match pair {
                Some((a, b)) => format!("Score: {}", self.rate(a, b)),
                None => "Score: 1".to_string(),
            });
        }
        Ok(self.answer_generation(prompt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8080/v1/completions".to_string(),
            token_env: "LOCRET_LLM_TOKEN".to_string(),
            model: "gpt-4o-mini".to_string(),
            timeout_secs: 60,
        }
    }
}

/// Client for an endpoint taking `{"model", "prompt"}` and answering
/// `{"completion"}`.
pub struct RemoteBackend {
    config: RemoteConfig,
    token: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> std::result::Result<Self, BackendError> {
        let token = std::env::var(&config.token_env).map_err(|_| BackendError::MissingToken(config.token_env.clone()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, token, agent })
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    completion: String,
}

impl TextGenBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn complete(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        let sent = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", format!("Bearer {}", self.token))
            .send_json(CompletionRequest {
                model: &self.config.model,
                prompt,
            });
        let mut response = sent.map_err(|e| match e {
            ureq::Error::StatusCode(code) => BackendError::Status(code),
            ureq::Error::Timeout(_) => BackendError::Timeout(Duration::from_secs(self.config.timeout_secs)),
            other => BackendError::Request(other.to_string()),
        })?;
        let body: CompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        if body.completion.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(body.completion)
    }
}

/// How the top-ranked case was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    RegionQuery,
    GlobalImage,
    PseudoGt,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::RegionQuery => "region-query",
            Setting::GlobalImage => "global-image",
            Setting::PseudoGt => "pseudo-gt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub query_id: String,
    pub region: String,
    pub mode: Setting,
    pub retrieved_id: String,
    pub explanation: String,
    pub score: u8,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mode: Setting,
    pub count: usize,
    pub mean: f64,
    pub per_region: BTreeMap<String, f64>,
}

impl ScoreSummary {
    pub fn from_records(mode: Setting, records: &[ExplainRecord]) -> Result<Self> {
        let mine: Vec<&ExplainRecord> = records.iter().filter(|r| r.mode == mode).collect();
        if mine.is_empty() {
            return Err(Error::Empty(format!("{} scores", mode.as_str())));
        }
        let mut by_region: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &mine {
            let e = by_region.entry(r.region.clone()).or_default();
            e.0 += r.score as f64;
            e.1 += 1;
        }
        Ok(Self {
            mode,
            count: mine.len(),
            mean: mine.iter().map(|r| r.score as f64).sum::<f64>() / mine.len() as f64,
            per_region: by_region.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub backend: String,
    pub retrieval: ScoreSummary,
    pub pseudo_gt: ScoreSummary,
    pub records: Vec<ExplainRecord>,
}

impl ExplainReport {
    /// One JSON object per record.
    pub fn write_records(&self, out: &mut impl std::io::Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainOptions {
    /// Retrieved cases shown to the generator.
    pub k: usize,
    /// Concurrent backend calls.
    pub parallelism: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { k: 1, parallelism: 4 }
    }
}

struct Job {
    query_id: String,
    condition: Finding,
    mode: Setting,
    request: ExplanationRequest,
}

/// Retrieves, explains and scores every (sample, lesion finding) of `corpus`.
///
/// `mode` picks the retrieval embedding; a pseudo ground-truth pass runs
/// alongside, where the top case is the best-ranked gallery sample sharing the
/// query finding, or the query's own description when the gallery holds none.
pub fn evaluate_explainability(
    params: &ModelParams,
    corpus: &Corpus,
    mode: Modality,
    backend: &dyn TextGenBackend,
    options: ExplainOptions,
) -> Result<ExplainReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("test corpus".into()));
    }
    if options.k == 0 || options.parallelism == 0 {
        return Err(Error::InvalidArgument("k and parallelism must be at least 1".into()));
    }
    let setting = match mode {
        Modality::RegionQuery => Setting::RegionQuery,
        Modality::GlobalImage => Setting::GlobalImage,
        Modality::Report => {
            return Err(Error::InvalidArgument("explanations retrieve with image-side embeddings".into()))
        }
    };
    let global = match mode {
        Modality::GlobalImage => Some(build_index(params, corpus, Modality::GlobalImage)?),
        _ => None,
    };
    let mut jobs = Vec::new();
    for r in &corpus.layout.regions {
        let queries: Vec<(&CorpusSample, &Finding)> = corpus
            .samples
            .iter()
            .filter_map(|s| s.lesions().find(|f| f.region() == Some(r.name.as_str())).map(|f| (s, f)))
            .collect();
        if queries.is_empty() {
            continue;
        }
        let conditioned;
        let index: &EmbeddingIndex = match &global {
            Some(g) => g,
            None => {
                conditioned = conditioned_index(params, corpus, &r.name)?;
                &conditioned
            }
        };
        for (s, f) in queries {
            let pos = index
                .entries
                .iter()
                .position(|e| e.sample_id == s.id)
                .expect("every sample is indexed");
            let q = index.vectors.row(pos).to_owned();
            let ranking = query_filtered(index, &q, index.len(), |e| e.sample_id != s.id)?;
            let case = |rank: usize, id: &str| -> RetrievedReport {
                let sample = corpus.sample(id).expect("indexed sample");
                RetrievedReport {
                    rank,
                    sample_id: id.to_string(),
                    description: regional_description(sample, &r.name),
                    findings: sample.findings.clone(),
                }
            };
            let reports: Vec<RetrievedReport> = ranking
                .items
                .iter()
                .take(options.k)
                .enumerate()
                .map(|(i, it)| case(i + 1, &it.sample_id))
                .collect();
            if reports.is_empty() {
                return Err(Error::Empty(format!("gallery for query `{}`", s.id)));
            }
            let truth = ranking
                .items
                .iter()
                .find(|it| corpus.sample(&it.sample_id).is_some_and(|g| g.findings.contains(f)))
                .map(|it| case(1, &it.sample_id))
                .unwrap_or_else(|| case(1, &s.id));
            for (mode, reports) in [(setting, reports), (Setting::PseudoGt, vec![truth])] {
                jobs.push(Job {
                    query_id: s.id.clone(),
                    condition: f.clone(),
                    mode,
                    request: ExplanationRequest {
                        query_id: s.id.clone(),
                        condition: f.clone(),
                        reports,
                    },
                });
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::Empty("corpus has no lesion findings to explain".into()));
    }
    let records = run_jobs(backend, &jobs, options.parallelism)?;
    Ok(ExplainReport {
        backend: backend.name(),
        retrieval: ScoreSummary::from_records(setting, &records)?,
        pseudo_gt: ScoreSummary::from_records(Setting::PseudoGt, &records)?,
        records,
    })
}

fn run_one(backend: &dyn TextGenBackend, job: &Job) -> Result<ExplainRecord> {
    let explanation = generate_explanation(backend, &job.request)?;
    let score = score_consistency(backend, &explanation, &job.condition.describe())?;
    Ok(ExplainRecord {
        query_id: job.query_id.clone(),
        region: job.condition.region().expect("lesion").to_string(),
        mode: job.mode,
        retrieved_id: job.request.reports[0].sample_id.clone(),
        explanation,
        score: score.score,
        backend: score.rater,
    })
}

/// Runs jobs on up to `parallelism` threads; output order is job order.
fn run_jobs(backend: &dyn TextGenBackend, jobs: &[Job], parallelism: usize) -> Result<Vec<ExplainRecord>> {
    let slots: Vec<Mutex<Option<Result<ExplainRecord>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(run_one(backend, job));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}
