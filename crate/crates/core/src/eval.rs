//! Language-model evaluation: prompt construction, endpoint clients, output
//! parsing, a resumable runner and macro-F1 scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, LazyLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::DataTable;
use crate::genset::DatasetInstance;
use crate::rules::{descriptor, report_order, rule_catalog, Category, ViolationSet};
use crate::spec::emit_spec;

/// Rows of the source table embedded in each prompt, at most.
pub const PROMPT_ROWS: usize = 50;
pub const TEMPLATE_COUNT: usize = 5;
pub const PROBLEMS_PLACEHOLDER: &str = "{problems}";
pub const SPEC_PLACEHOLDER: &str = "{vega-spec}";
/// Environment variable holding the bearer token for HTTP endpoints.
pub const API_KEY_ENV: &str = "VIZLINT_API_KEY";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("template {index} must contain `{placeholder}` exactly once")]
    MissingPlaceholder {
        index: usize,
        placeholder: &'static str,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("instance `{instance}` refers to unknown table `{table}`")]
    UnknownTable { instance: String, table: String },
    #[error("no ground truth for instance `{0}`")]
    MissingGroundTruth(String),
    #[error("duplicate record for instance `{instance}` repetition {repetition}")]
    DuplicateRecord { instance: String, repetition: u32 },
    #[error("unknown mock `{0}`; expected oracle, empty, prose or noisy:<p>")]
    UnknownMock(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phrasing {
    #[default]
    Natural,
    Formal,
}

impl FromStr for Phrasing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "natural" => Ok(Phrasing::Natural),
            "formal" => Ok(Phrasing::Formal),
            other => Err(format!(
                "unknown phrasing `{other}`; expected natural or formal"
            )),
        }
    }
}

impl fmt::Display for Phrasing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phrasing::Natural => "natural",
            Phrasing::Formal => "formal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    /// 1-based.
    pub index: usize,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(index: usize, body: impl Into<String>) -> Result<Self, EvalError> {
        let body = body.into();
        for placeholder in [PROBLEMS_PLACEHOLDER, SPEC_PLACEHOLDER] {
            if body.matches(placeholder).count() != 1 {
                return Err(EvalError::MissingPlaceholder { index, placeholder });
            }
        }
        Ok(PromptTemplate { index, body })
    }
}

const TEMPLATE_BODIES: [&str; TEMPLATE_COUNT] = [
    include_str!("../data/prompts/prompt1.txt"),
    include_str!("../data/prompts/prompt2.txt"),
    include_str!("../data/prompts/prompt3.txt"),
    include_str!("../data/prompts/prompt4.txt"),
    include_str!("../data/prompts/prompt5.txt"),
];

static TEMPLATES: LazyLock<Vec<PromptTemplate>> = LazyLock::new(|| {
    TEMPLATE_BODIES
        .iter()
        .enumerate()
        .map(|(i, body)| {
            PromptTemplate::new(i + 1, *body).expect("bundled templates are well-formed")
        })
        .collect()
});

/// The five bundled prompt variants, indexed 1..=5 by position + 1.
pub fn templates() -> &'static [PromptTemplate] {
    &TEMPLATES
}

pub fn template(index: usize) -> Option<&'static PromptTemplate> {
    index.checked_sub(1).and_then(|i| TEMPLATES.get(i))
}

/// The catalog as `name: <id>\n<description>` blocks separated by blank lines.
///
/// Rules without a formal phrasing fall back to natural text; each fallback
/// is reported in the returned warnings.
pub fn render_problems(phrasing: Phrasing) -> (String, Vec<String>) {
    let mut warnings = Vec::new();
    let blocks: Vec<String> = rule_catalog()
        .iter()
        .map(|d| {
            let text = match (phrasing, d.description_asp) {
                (Phrasing::Formal, Some(asp)) => asp,
                (Phrasing::Formal, None) => {
                    warnings.push(format!(
                        "rule `{}` has no formal phrasing; using natural text",
                        d.name
                    ));
                    d.description_nl
                }
                (Phrasing::Natural, _) => d.description_nl,
            };
            format!("name: {}\n{}", d.name, text)
        })
        .collect();
    (blocks.join("\n\n"), warnings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub embedded_rows: usize,
    pub warnings: Vec<String>,
}

fn substitute(body: &str, problems: &str, spec: &str) -> String {
    let mut out = String::with_capacity(body.len() + problems.len() + spec.len());
    let mut rest = body;
    while let Some(start) = rest.find('{') {
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with(PROBLEMS_PLACEHOLDER) {
            (problems, PROBLEMS_PLACEHOLDER.len())
        } else if tail.starts_with(SPEC_PLACEHOLDER) {
            (spec, SPEC_PLACEHOLDER.len())
        } else {
            out.push_str(&rest[..=start]);
            rest = &rest[start + 1..];
            continue;
        };
        out.push_str(&rest[..start]);
        out.push_str(value);
        rest = &rest[start + len..];
    }
    out.push_str(rest);
    out
}

/// Fill a template with the rule catalog and the instance's chart, inlining
/// the first `min(50, row_count)` rows of its table.
pub fn build_prompt(
    template: &PromptTemplate,
    instance: &DatasetInstance,
    table: &DataTable,
    phrasing: Phrasing,
) -> Result<Prompt, EvalError> {
    let template = PromptTemplate::new(template.index, template.body.as_str())?;
    let (problems, warnings) = render_problems(phrasing);
    let rows = table.json_rows(PROMPT_ROWS);
    let spec = emit_spec(&instance.spec, Some(&rows));
    Ok(Prompt {
        text: substitute(&template.body, &problems, &spec),
        embedded_rows: rows.len(),
        warnings,
    })
}

/// Template for `(seed, instance, repetition)`, uniform over 1..=5 and
/// independent of scheduling.
pub fn template_index(seed: u64, instance_id: &str, repetition: u32) -> usize {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((instance_id.len() as u64).to_le_bytes());
    hasher.update(instance_id.as_bytes());
    hasher.update(repetition.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(key).random_range(1..=TEMPLATE_COUNT)
}

#[derive(Debug, Clone, Copy)]
pub struct ModelRequest<'a> {
    pub prompt: &'a str,
    pub instance_id: &'a str,
    pub repetition: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("request timed out after {elapsed:.1}s")]
    Timeout { elapsed: f64 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response envelope: {0}")]
    MalformedResponseEnvelope(String),
}

/// Something that turns a prompt into completion text.
pub trait ModelClient: Sync {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, QueryError>;
}

/// Chat-completion endpoint client.
///
/// Sends `{model, messages: [{role: "user", content}]}` with no sampling
/// overrides and reads `choices[0].message.content`. Transport failures are
/// retried with exponential backoff; timeouts are not.
pub struct HttpClient {
    url: String,
    model: String,
    timeout: Duration,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: &str, model: &str, timeout: Duration) -> Self {
        let trimmed = base_url.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_owned()
        } else {
            format!("{trimmed}/chat/completions")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpClient {
            url,
            model: model.to_owned(),
            timeout,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retries: 2,
            backoff: Duration::from_millis(500),
            agent,
        }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &str) -> Result<String, QueryError> {
        let started = Instant::now();
        let mut request = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let timed_out = |e: &ureq::Error| {
            matches!(e, ureq::Error::Timeout(_))
                || matches!(e, ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut)
        };
        let mut response = request.send(body).map_err(|e| {
            if timed_out(&e) {
                QueryError::Timeout {
                    elapsed: started.elapsed().as_secs_f64(),
                }
            } else {
                QueryError::Transport(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| {
            if timed_out(&e) {
                QueryError::Timeout {
                    elapsed: started.elapsed().as_secs_f64(),
                }
            } else {
                QueryError::Transport(e.to_string())
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(QueryError::Transport(format!("HTTP status {status}")));
        }
        extract_completion(&text)
    }
}

/// `choices[0].message.content` of a chat-completion response body.
pub fn extract_completion(body: &str) -> Result<String, QueryError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| QueryError::MalformedResponseEnvelope(format!("not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| {
            QueryError::MalformedResponseEnvelope("missing choices[0].message.content".into())
        })
}

impl ModelClient for HttpClient {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, QueryError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
        })
        .to_string();
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(QueryError::Transport(msg)) if attempt < self.retries => {
                    log::debug!(
                        "{} rep {}: {msg}; retrying in {delay:?}",
                        request.instance_id,
                        request.repetition
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpClient")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .field("api_key", &self.api_key.as_ref().map(|_| "<set>"))
            .finish()
    }
}

/// Offline endpoints for exercising the pipeline without a model.
#[derive(Debug, Clone)]
pub enum MockClient {
    /// Answers with the instance's ground-truth set.
    Oracle(HashMap<String, ViolationSet>),
    /// Always answers `[]`.
    Empty,
    /// Answers with prose and no array.
    Prose,
    /// Ground truth with each rule's membership flipped with probability `p`,
    /// seeded by (instance, repetition).
    Noisy {
        p: f64,
        truth: HashMap<String, ViolationSet>,
    },
}

impl MockClient {
    /// Parse `oracle`, `empty`, `prose` or `noisy:<p>`.
    pub fn parse(kind: &str, truth: HashMap<String, ViolationSet>) -> Result<Self, EvalError> {
        match kind {
            "oracle" => Ok(MockClient::Oracle(truth)),
            "empty" => Ok(MockClient::Empty),
            "prose" => Ok(MockClient::Prose),
            other => {
                let p = other
                    .strip_prefix("noisy:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| EvalError::UnknownMock(other.to_owned()))?;
                Ok(MockClient::Noisy { p, truth })
            }
        }
    }

    pub fn truth_from(dataset: &[DatasetInstance]) -> HashMap<String, ViolationSet> {
        dataset
            .iter()
            .map(|i| (i.id.clone(), i.violations.clone()))
            .collect()
    }
}

fn render_array<'a>(names: impl Iterator<Item = &'a str>) -> String {
    serde_json::to_string(&names.collect::<Vec<_>>()).expect("strings serialize")
}

impl ModelClient for MockClient {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, QueryError> {
        let lookup = |truth: &HashMap<String, ViolationSet>| {
            truth.get(request.instance_id).cloned().ok_or_else(|| {
                QueryError::Transport(format!("mock has no answer for `{}`", request.instance_id))
            })
        };
        match self {
            MockClient::Oracle(truth) => Ok(render_array(lookup(truth)?.iter())),
            MockClient::Empty => Ok("[]".to_owned()),
            MockClient::Prose => {
                Ok("I looked at the chart and it seems mostly fine to me.".to_owned())
            }
            MockClient::Noisy { p, truth } => {
                let actual = lookup(truth)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(noisy_seed(request.instance_id, request.repetition));
                let names = rule_catalog()
                    .iter()
                    .map(|d| d.name)
                    .filter(|n| actual.contains(n) != rng.random_bool(*p));
                Ok(render_array(names))
            }
        }
    }
}

fn noisy_seed(instance_id: &str, repetition: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"noisy");
    hasher.update(instance_id.as_bytes());
    hasher.update(repetition.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFailure {
    #[error("no JSON array of strings found")]
    NoArray,
    #[error("`{0}` is not a catalog rule name")]
    UnknownName(String),
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```(.*?)```").expect("fence pattern"));
static INFO_STRING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z0-9_+.-]*$").expect("info pattern"));

fn last_fenced_block(raw: &str) -> Option<&str> {
    let inner = FENCE.captures_iter(raw).last()?.get(1)?.as_str();
    Some(match inner.split_once('\n') {
        Some((info, body)) if INFO_STRING.is_match(info.trim_end()) => body,
        _ => inner,
    })
}

fn first_string_array(text: &str) -> Option<Vec<String>> {
    text.match_indices('[').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Array(items))) => items
                .into_iter()
                .map(|v| v.as_str().map(str::to_owned))
                .collect(),
            _ => None,
        }
    })
}

/// Extract a rule list from raw model output.
///
/// Uses the last fenced code block if any, else the whole text; takes the
/// first well-formed JSON array whose elements are all strings; requires
/// every element to be an exact catalog name; drops repeats keeping the
/// first occurrence.
pub fn parse_output(raw: &str) -> Result<Vec<String>, ParseFailure> {
    let region = last_fenced_block(raw).unwrap_or(raw);
    let names = first_string_array(region).ok_or(ParseFailure::NoArray)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        if descriptor(&name).is_none() {
            return Err(ParseFailure::UnknownName(name));
        }
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Failure {
    Timeout,
    Transport,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    /// 1-based.
    pub repetition: u32,
    pub template_index: usize,
    pub raw_output: String,
    pub parsed: Option<Vec<String>>,
    pub adherent: bool,
    /// Seconds.
    pub latency: f64,
    pub failure: Option<Failure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn key(&self) -> (&str, u32) {
        (&self.instance_id, self.repetition)
    }

    /// Predicted rules; non-adherent records predict nothing.
    pub fn prediction(&self) -> BTreeSet<&str> {
        match (&self.parsed, self.adherent) {
            (Some(names), true) => names.iter().map(String::as_str).collect(),
            _ => BTreeSet::new(),
        }
    }

    fn from_outcome(
        instance_id: &str,
        repetition: u32,
        template_index: usize,
        outcome: Result<String, QueryError>,
        latency: f64,
    ) -> Self {
        let mut record = EvalRecord {
            instance_id: instance_id.to_owned(),
            repetition,
            template_index,
            raw_output: String::new(),
            parsed: None,
            adherent: false,
            latency,
            failure: None,
            error: None,
        };
        match outcome {
            Ok(raw) => {
                match parse_output(&raw) {
                    Ok(names) => {
                        record.parsed = Some(names);
                        record.adherent = true;
                    }
                    Err(e) => {
                        record.failure = Some(Failure::Parse);
                        record.error = Some(e.to_string());
                    }
                }
                record.raw_output = raw;
            }
            Err(e) => {
                record.failure = Some(match e {
                    QueryError::Timeout { .. } => Failure::Timeout,
                    _ => Failure::Transport,
                });
                record.error = Some(e.to_string());
            }
        }
        record
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: f64,
    pub parallel: usize,
    pub k: u32,
    pub seed: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            timeout_secs: 120.0,
            parallel: 4,
            k: 5,
            seed: 0,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(EvalError::InvalidConfig("timeout must be positive".into()));
        }
        if self.k < 1 {
            return Err(EvalError::InvalidConfig("k must be at least 1".into()));
        }
        if self.parallel < 1 {
            return Err(EvalError::InvalidConfig(
                "parallel must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    /// Records taken from an existing journal instead of re-queried.
    pub resumed: usize,
    pub warnings: Vec<String>,
}

/// Read a possibly interrupted journal, skipping an unreadable trailing line.
pub fn read_journal(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(record) => out.push(record),
            Err(e) => log::warn!("{}: skipping unreadable journal line: {e}", path.display()),
        }
    }
    Ok(out)
}

struct Job<'a> {
    instance: &'a DatasetInstance,
    table: &'a DataTable,
    repetition: u32,
    template: usize,
}

/// Query every instance `k` times, one randomly chosen template per query.
///
/// With a journal path, completed records are appended as they arrive and
/// any already present are reused, so an interrupted run can be resumed.
/// Records come back ordered by instance then repetition.
pub fn run_eval(
    dataset: &[DatasetInstance],
    tables: &[DataTable],
    client: &dyn ModelClient,
    endpoint: &EndpointConfig,
    phrasing: Phrasing,
    journal: Option<&Path>,
) -> Result<EvalRun, EvalError> {
    endpoint.validate()?;
    if dataset.is_empty() {
        return Err(EvalError::InvalidConfig("dataset is empty".into()));
    }
    let mut ids = HashSet::new();
    let mut jobs = Vec::with_capacity(dataset.len() * endpoint.k as usize);
    for instance in dataset {
        if !ids.insert(instance.id.as_str()) {
            return Err(EvalError::InvalidConfig(format!(
                "duplicate instance id `{}`",
                instance.id
            )));
        }
        let table = tables
            .iter()
            .find(|t| t.name == instance.table_ref)
            .ok_or_else(|| EvalError::UnknownTable {
                instance: instance.id.clone(),
                table: instance.table_ref.clone(),
            })?;
        for repetition in 1..=endpoint.k {
            jobs.push(Job {
                instance,
                table,
                repetition,
                template: template_index(endpoint.seed, &instance.id, repetition),
            });
        }
    }

    let mut done: HashMap<(String, u32), EvalRecord> = HashMap::new();
    if let Some(path) = journal {
        for record in read_journal(path)? {
            done.insert((record.instance_id.clone(), record.repetition), record);
        }
    }
    let mut slots: Vec<Option<EvalRecord>> = jobs
        .iter()
        .map(|j| {
            done.remove(&(j.instance.id.clone(), j.repetition))
                .filter(|r| r.template_index == j.template)
        })
        .collect();
    let resumed = slots.iter().filter(|s| s.is_some()).count();
    let pending: Vec<usize> = (0..jobs.len()).filter(|&i| slots[i].is_none()).collect();

    let mut warnings = Vec::new();
    let (_, phrasing_warnings) = render_problems(phrasing);
    warnings.extend(phrasing_warnings);

    let mut sink = match journal {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?,
            )
        }
        None => None,
    };

    let next = AtomicUsize::new(0);
    let workers = endpoint.parallel.min(pending.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, Result<EvalRecord, EvalError>)>();
    std::thread::scope(|scope| -> Result<(), EvalError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, pending, next) = (&jobs, &pending, &next);
            scope.spawn(move || {
                while let Some(&slot) = pending.get(next.fetch_add(1, Ordering::Relaxed)) {
                    let job = &jobs[slot];
                    let record = template(job.template)
                        .ok_or(EvalError::InvalidConfig(format!(
                            "no template {}",
                            job.template
                        )))
                        .and_then(|t| build_prompt(t, job.instance, job.table, phrasing))
                        .map(|prompt| {
                            let request = ModelRequest {
                                prompt: &prompt.text,
                                instance_id: &job.instance.id,
                                repetition: job.repetition,
                            };
                            let started = Instant::now();
                            let outcome = client.complete(&request);
                            let latency = started.elapsed().as_secs_f64();
                            EvalRecord::from_outcome(
                                &job.instance.id,
                                job.repetition,
                                job.template,
                                outcome,
                                latency,
                            )
                        });
                    if tx.send((slot, record)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for (slot, record) in rx {
            let record = record?;
            if let Some(file) = sink.as_mut() {
                let line = serde_json::to_string(&record).expect("records serialize");
                writeln!(file, "{line}")?;
                file.flush()?;
            }
            slots[slot] = Some(record);
        }
        Ok(())
    })?;

    let records: Vec<EvalRecord> = slots
        .into_iter()
        .map(|r| r.expect("every job completes"))
        .collect();
    let failed = records
        .iter()
        .filter(|r| matches!(r.failure, Some(Failure::Transport | Failure::Timeout)))
        .count();
    if failed > 0 {
        warnings.push(format!(
            "{failed} of {} requests failed at the endpoint",
            records.len()
        ));
    }
    Ok(EvalRun {
        records,
        resumed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean F1 across repetitions, for rules present or predicted.
    pub per_problem_f1: BTreeMap<String, f64>,
    /// Sample standard deviation of F1 across repetitions.
    pub per_problem_std: BTreeMap<String, f64>,
    /// Evaluated instances whose ground truth contains the rule.
    pub per_problem_support: BTreeMap<String, u64>,
    pub per_category_avg: BTreeMap<String, f64>,
    pub global_avg: Option<f64>,
    pub adherence: f64,
    pub adherent: u64,
    pub total: u64,
    pub repetitions: Vec<u32>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Per-rule F1 against ground truth, averaged over repetitions.
///
/// Each repetition is scored on its own: F1 = 2TP / (2TP + FP + FN), left
/// undefined for a repetition where the rule is neither present nor
/// predicted. Non-adherent records count as predicting nothing. Category and
/// global averages are unweighted means over rules with nonzero support, so
/// a rule that is only ever falsely predicted reports F1 0 without entering
/// the averages.
pub fn score(
    records: &[EvalRecord],
    truth: &BTreeMap<String, ViolationSet>,
) -> Result<Metrics, EvalError> {
    let mut by_rep: BTreeMap<u32, Vec<&EvalRecord>> = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut instances = BTreeSet::new();
    for record in records {
        if !truth.contains_key(&record.instance_id) {
            return Err(EvalError::MissingGroundTruth(record.instance_id.clone()));
        }
        if !seen.insert(record.key()) {
            return Err(EvalError::DuplicateRecord {
                instance: record.instance_id.clone(),
                repetition: record.repetition,
            });
        }
        instances.insert(record.instance_id.as_str());
        by_rep.entry(record.repetition).or_default().push(record);
    }

    let mut f1s: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for recs in by_rep.values() {
        let mut tp: HashMap<&str, u64> = HashMap::new();
        let mut fp: HashMap<&str, u64> = HashMap::new();
        let mut fn_: HashMap<&str, u64> = HashMap::new();
        for record in recs {
            let actual = &truth[&record.instance_id];
            let predicted = record.prediction();
            for name in actual.iter() {
                let slot = if predicted.contains(name) {
                    &mut tp
                } else {
                    &mut fn_
                };
                *slot
                    .entry(descriptor(name).map_or(name, |d| d.name))
                    .or_default() += 1;
            }
            for &name in predicted.iter().filter(|n| !actual.contains(n)) {
                *fp.entry(descriptor(name).map_or(name, |d| d.name))
                    .or_default() += 1;
            }
        }
        for d in rule_catalog() {
            let t = tp.get(d.name).copied().unwrap_or(0) as f64;
            let p = fp.get(d.name).copied().unwrap_or(0) as f64;
            let n = fn_.get(d.name).copied().unwrap_or(0) as f64;
            if t + p + n > 0.0 {
                f1s.entry(d.name)
                    .or_default()
                    .push(2.0 * t / (2.0 * t + p + n));
            }
        }
    }

    let mut per_problem_support = BTreeMap::new();
    for d in rule_catalog() {
        let support = instances
            .iter()
            .filter(|id| truth[**id].contains(d.name))
            .count() as u64;
        per_problem_support.insert(d.name.to_owned(), support);
    }
    let per_problem_f1: BTreeMap<String, f64> =
        f1s.iter().map(|(k, v)| (k.to_string(), mean(v))).collect();
    let per_problem_std = f1s
        .iter()
        .map(|(k, v)| (k.to_string(), sample_std(v)))
        .collect();
    let per_category_avg = Category::ALL
        .into_iter()
        .filter_map(|c| {
            let values: Vec<f64> = crate::rules::category_members(c)
                .filter(|n| per_problem_support[*n] > 0)
                .filter_map(|n| per_problem_f1.get(n).copied())
                .collect();
            (!values.is_empty()).then(|| (c.as_str().to_owned(), mean(&values)))
        })
        .collect();
    let all: Vec<f64> = per_problem_f1
        .iter()
        .filter(|(n, _)| per_problem_support[n.as_str()] > 0)
        .map(|(_, v)| *v)
        .collect();
    let adherent = records.iter().filter(|r| r.adherent).count() as u64;
    let total = records.len() as u64;
    Ok(Metrics {
        per_problem_f1,
        per_problem_std,
        per_problem_support,
        per_category_avg,
        global_avg: (!all.is_empty()).then(|| mean(&all)),
        adherence: if total == 0 {
            0.0
        } else {
            adherent as f64 / total as f64
        },
        adherent,
        total,
        repetitions: by_rep.keys().copied().collect(),
    })
}

/// Results table: rules grouped by category with F1 and STD columns,
/// category averages and the global average.
pub fn render_report(metrics: &Metrics) -> String {
    let width = rule_catalog()
        .iter()
        .map(|d| d.name.len())
        .max()
        .unwrap_or(0)
        .max(12);
    let mut out = String::new();
    let cell = |v: Option<&f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}"));
    let _ = writeln!(
        out,
        "{:<10} {:<width$} {:>6} {:>6} {:>8}",
        "Category", "Problem", "F1", "STD", "Support"
    );
    for (category, names) in report_order() {
        for (i, name) in names.iter().enumerate() {
            let label = if i == 0 { category.as_str() } else { "" };
            let _ = writeln!(
                out,
                "{:<10} {:<width$} {:>6} {:>6} {:>8}",
                label,
                name,
                cell(metrics.per_problem_f1.get(*name)),
                cell(metrics.per_problem_std.get(*name)),
                metrics.per_problem_support.get(*name).copied().unwrap_or(0),
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:<width$} {:>6}",
            "",
            "Avg.",
            cell(metrics.per_category_avg.get(category.as_str()))
        );
    }
    let _ = writeln!(
        out,
        "{:<10} {:<width$} {:>6}",
        "Global",
        "Avg.",
        cell(metrics.global_avg.as_ref())
    );
    let _ = writeln!(
        out,
        "{:<10} {:<width$} {:>6} ({}/{})",
        "Adherence",
        "",
        format!("{:.2}", metrics.adherence),
        metrics.adherent,
        metrics.total
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_have_both_placeholders_once() {
        assert_eq!(templates().len(), TEMPLATE_COUNT);
        assert!(templates()[0]
            .body
            .starts_with("You are an expert in data visualization design using Vega-Lite."));
        assert!(matches!(
            PromptTemplate::new(9, "no placeholders"),
            Err(EvalError::MissingPlaceholder { index: 9, .. })
        ));
        assert!(PromptTemplate::new(9, "{problems}{vega-spec}{problems}").is_err());
    }

    #[test]
    fn substitution_is_single_pass() {
        assert_eq!(
            substitute("a {problems} b {vega-spec} {x}", "{vega-spec}", "S"),
            "a {vega-spec} b S {x}"
        );
    }

    #[test]
    fn parser_examples() {
        assert_eq!(
            parse_output(r#"["log_x", "c_c_line"]"#).unwrap(),
            ["log_x", "c_c_line"]
        );
        assert_eq!(
            parse_output("Sure! Here you go:\n```\n[\"log_x\"]\n```").unwrap(),
            ["log_x"]
        );
        assert_eq!(
            parse_output(r#"["log_x", "not_a_rule"]"#),
            Err(ParseFailure::UnknownName("not_a_rule".into()))
        );
        assert_eq!(parse_output("[]").unwrap(), Vec::<String>::new());
        assert_eq!(
            parse_output(r#"["log_x","log_x","log_y"]"#).unwrap(),
            ["log_x", "log_y"]
        );
    }

    #[test]
    fn template_assignment_is_stable_and_covers_all() {
        let picks: BTreeSet<usize> = (0..200)
            .map(|i| template_index(3, &format!("vl-{i}"), 1))
            .collect();
        assert_eq!(picks, (1..=5).collect());
        assert_eq!(template_index(3, "vl-1", 2), template_index(3, "vl-1", 2));
    }

    #[test]
    fn hand_computed_f1() {
        let truth =
            BTreeMap::from([("a".to_owned(), ViolationSet::from_names(["log_x"]).unwrap())]);
        let record = EvalRecord::from_outcome("a", 1, 1, Ok(r#"["log_x","log_y"]"#.into()), 0.0);
        let m = score(&[record], &truth).unwrap();
        assert_eq!(m.per_problem_f1["log_x"], 1.0);
        assert_eq!(m.per_problem_f1["log_y"], 0.0);
        assert_eq!(m.per_problem_support["log_y"], 0);
        assert_eq!(m.global_avg, Some(1.0));
    }

    #[test]
    fn envelope_extraction() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"[]"}}]}"#;
        assert_eq!(extract_completion(ok).unwrap(), "[]");
        assert!(matches!(
            extract_completion(r#"{"output":"[]"}"#),
            Err(QueryError::MalformedResponseEnvelope(_))
        ));
        assert!(matches!(
            extract_completion("<html>"),
            Err(QueryError::MalformedResponseEnvelope(_))
        ));
    }
}
