//! Balanced dataset synthesis.
//!
//! Candidates are sampled at random, annotated with [`Linter::lint`], and run
//! through a KL-divergence acceptance filter that steers the problem
//! histogram toward uniform. Candidate `i` draws from its own ChaCha stream,
//! so candidates are sampled and linted in parallel batches while acceptance
//! is applied strictly in candidate order.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::data::{DataTable, FieldKind};
use crate::io::{read_json_lines, to_json_lines, write_atomic, JsonLinesError};
use crate::par::{self, Execution};
use crate::rules::{rule_catalog, Linter, ViolationSet, CATALOG_SIZE};
use crate::spec::{
    emit_spec, validate_with_columns, Aggregate, Channel, ChartSpec, Coordinates, Encoding,
    MarkType, ScaleType,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("histogram has no support")]
    EmptyHistogram,
    #[error("candidate budget exhausted: {accepted} of {target} instances after {candidates} candidates")]
    BudgetExhausted {
        accepted: usize,
        target: usize,
        candidates: u64,
    },
    #[error("instance {0} no longer matches its stored violations")]
    IntegrityViolation(String),
    #[error("table `{0}` is not loaded")]
    UnknownTable(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    JsonLines(#[from] JsonLinesError),
}

/// Probabilities steering the random chart sampler toward diverse problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub min_encodings: usize,
    pub max_encodings: usize,
    /// Sampling weight of `x` and `y` relative to each non-positional channel.
    pub positional_weight: f64,
    /// Chance of picking a scale that does not suit the field's kind.
    pub illegal_scale_p: f64,
    pub bin_p: f64,
    pub aggregate_p: f64,
    /// Chance a `count` aggregate drops its field.
    pub fieldless_count_p: f64,
    pub stack_p: f64,
    pub polar_p: f64,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_encodings: 1,
            max_encodings: 4,
            positional_weight: 2.0,
            illegal_scale_p: 0.25,
            bin_p: 0.15,
            aggregate_p: 0.2,
            fieldless_count_p: 0.5,
            stack_p: 0.2,
            polar_p: 0.05,
            max_retries: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub target_size: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub seed: u64,
    pub max_candidates: u64,
    /// Apply the KL acceptance filter; when false every annotated candidate is kept.
    pub filter: bool,
    /// Instances accepted unconditionally before the filter engages.
    pub warmup: usize,
    /// Pseudo-count added to every rule when computing the divergence.
    pub smoothing: f64,
    /// Candidates sampled per parallel batch. Does not affect the output.
    pub batch_size: usize,
    pub execution: Execution,
    pub sampler: SamplerConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            target_size: 2000,
            epsilon: 1e-3,
            temperature: 1e-4,
            seed: 0,
            max_candidates: 5_000_000,
            filter: true,
            warmup: 10,
            smoothing: 1.0,
            batch_size: 4096,
            execution: Execution::Parallel,
            sampler: SamplerConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.to_owned()));
        if self.target_size < 1 {
            return bad("target size must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.smoothing < 0.0 {
            return bad("smoothing must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        let s = &self.sampler;
        if s.min_encodings < 1
            || s.min_encodings > s.max_encodings
            || s.max_encodings > Channel::ALL.len()
        {
            return bad("encoding count range must lie within 1..=7");
        }
        Ok(())
    }
}

/// The random stream for candidate `index` under `seed`.
pub fn candidate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn acceptance_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_acce_9700_0001);
    rng.set_stream(u64::MAX);
    rng
}

fn legal_scales(kind: FieldKind) -> (&'static [ScaleType], &'static [ScaleType]) {
    match kind {
        FieldKind::Number => (
            &[ScaleType::Linear, ScaleType::Log, ScaleType::Ordinal],
            &[ScaleType::Categorical],
        ),
        FieldKind::String => (
            &[ScaleType::Ordinal, ScaleType::Categorical],
            &[ScaleType::Linear, ScaleType::Log],
        ),
    }
}

fn pick_channels<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    positional_weight: f64,
) -> Vec<Channel> {
    let mut pool: Vec<Channel> = Channel::ALL.to_vec();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !pool.is_empty() {
        let weight = |c: &Channel| {
            if c.is_positional() {
                positional_weight
            } else {
                1.0
            }
        };
        let total: f64 = pool.iter().map(weight).sum();
        let mut draw = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, c) in pool.iter().enumerate() {
            draw -= weight(c);
            if draw < 0.0 {
                pick = i;
                break;
            }
        }
        out.push(pool.remove(pick));
    }
    out
}

fn sample_once<R: Rng + ?Sized>(rng: &mut R, table: &DataTable, cfg: &SamplerConfig) -> ChartSpec {
    let mark = *MarkType::ALL.choose(rng).expect("marks are non-empty");
    let count = rng.random_range(cfg.min_encodings..=cfg.max_encodings);
    let mut spec = ChartSpec::new(mark, &table.name);
    let mut stacked = false;
    for channel in pick_channels(rng, count, cfg.positional_weight) {
        let aggregate = if rng.random_bool(cfg.aggregate_p) {
            Some(
                *Aggregate::ALL
                    .choose(rng)
                    .expect("aggregates are non-empty"),
            )
        } else {
            None
        };
        let column = rng.random_range(0..table.columns.len());
        let fieldless =
            aggregate == Some(Aggregate::Count) && rng.random_bool(cfg.fieldless_count_p);
        let (legal, illegal) = legal_scales(table.kinds[column]);
        let scales = if rng.random_bool(cfg.illegal_scale_p) {
            illegal
        } else {
            legal
        };
        let mut scale = *scales.choose(rng).expect("scale sets are non-empty");
        let field = if fieldless {
            scale = ScaleType::Linear;
            None
        } else {
            Some(table.columns[column].clone())
        };
        let binned = rng.random_bool(cfg.bin_p);
        let stack = channel.is_positional() && !stacked && rng.random_bool(cfg.stack_p);
        stacked |= stack;
        spec.encodings.push(Encoding {
            channel,
            field,
            scale,
            binned,
            aggregate,
            stacked: stack,
        });
    }
    if rng.random_bool(cfg.polar_p) {
        spec.coordinates = Coordinates::Polar;
    }
    spec
}

/// Draw a random valid chart over `table`.
///
/// Mark is uniform over the seven marks; each of 1 to 4 distinct channels
/// is drawn with `x`/`y` weighted over the rest; each encoding picks a
/// uniform field and a scale suited to the field's kind, or with some
/// probability one that is not.
pub fn sample_spec<R: Rng + ?Sized>(
    rng: &mut R,
    table: &DataTable,
    cfg: &SamplerConfig,
) -> ChartSpec {
    assert!(
        !table.columns.is_empty(),
        "sample_spec needs a table with columns"
    );
    let mut spec = sample_once(rng, table, cfg);
    for _ in 0..cfg.max_retries {
        if validate_with_columns(&spec, &table.columns).is_empty() {
            return spec;
        }
        spec = sample_once(rng, table, cfg);
    }
    // The sampler only builds valid charts; retries guard future sampler changes.
    debug_assert!(validate_with_columns(&spec, &table.columns).is_empty());
    spec
}

/// KL divergence from uniform of a smoothed histogram, in nats.
///
/// Each count gets `smoothing` pseudo-counts before normalising.
pub fn kl_of_counts(counts: &[u64], smoothing: f64) -> Result<f64, GenError> {
    let k = counts.len();
    let total: f64 = counts.iter().map(|&c| c as f64 + smoothing).sum();
    if k == 0 || total <= 0.0 {
        return Err(GenError::EmptyHistogram);
    }
    let k = k as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            let p = (c as f64 + smoothing) / total;
            if p > 0.0 {
                p * (p * k).ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0))
}

/// Violation counts per catalog rule over accepted instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemHistogram {
    counts: Vec<u64>,
}

impl Default for ProblemHistogram {
    fn default() -> Self {
        ProblemHistogram {
            counts: vec![0; CATALOG_SIZE],
        }
    }
}

impl ProblemHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, rule: &str) -> u64 {
        crate::rules::rule_index(rule).map_or(0, |i| self.counts[i])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// One increment per violated rule.
    pub fn add(&mut self, violations: &ViolationSet) {
        for name in violations.iter() {
            if let Some(i) = crate::rules::rule_index(name) {
                self.counts[i] += 1;
            }
        }
    }

    pub fn with(&self, violations: &ViolationSet) -> ProblemHistogram {
        let mut next = self.clone();
        next.add(violations);
        next
    }

    /// Rules with at least one occurrence.
    pub fn support(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

impl Serialize for ProblemHistogram {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let map: Map<String, Value> = rule_catalog()
            .iter()
            .zip(&self.counts)
            .map(|(d, c)| (d.name.to_owned(), Value::from(*c)))
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProblemHistogram {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = Map::<String, Value>::deserialize(d)?;
        let mut hist = ProblemHistogram::new();
        for (name, v) in map {
            let i = crate::rules::rule_index(&name)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown rule `{name}`")))?;
            hist.counts[i] = v
                .as_u64()
                .ok_or_else(|| serde::de::Error::custom("counts must be integers"))?;
        }
        Ok(hist)
    }
}

/// Divergence of `hist` from uniform over the catalog with one pseudo-count per rule.
pub fn kl_to_uniform(hist: &ProblemHistogram) -> Result<f64, GenError> {
    kl_of_counts(&hist.counts, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Divergence dropped by at least epsilon.
    Improved,
    /// Accepted by the temperature draw.
    Sampled,
    Rejected,
    /// Accepted before the filter engaged.
    Warmup,
    /// Accepted with the filter disabled.
    Unfiltered,
}

impl Decision {
    pub fn accepted(self) -> bool {
        self != Decision::Rejected
    }
}

/// Deterministic accept when the divergence drops by at least `epsilon`,
/// otherwise accept with probability `min(1, exp((kl_old - kl_new) / temperature))`
/// from one uniform draw.
pub fn accept_candidate<R: RngCore + ?Sized>(
    kl_old: f64,
    kl_new: f64,
    epsilon: f64,
    temperature: f64,
    rng: &mut R,
) -> Decision {
    let delta = kl_old - kl_new;
    if delta >= epsilon {
        return Decision::Improved;
    }
    let p = (delta / temperature).exp().min(1.0);
    let u: f64 = rng.random();
    if u < p {
        Decision::Sampled
    } else {
        Decision::Rejected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epsilon: f64,
    pub temperature: f64,
    /// Index of the candidate stream that produced the chart.
    pub candidate: u64,
    pub filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub id: String,
    pub table_ref: String,
    pub spec: ChartSpec,
    pub emitted_doc: String,
    pub violations: ViolationSet,
    pub generator: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub candidates: u64,
    pub skipped_clean: u64,
    pub improved: u64,
    pub sampled: u64,
    pub rejected: u64,
    pub warmup: u64,
    pub unfiltered: u64,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub instances: Vec<DatasetInstance>,
    pub histogram: ProblemHistogram,
    /// Divergence before any acceptance.
    pub initial_kl: f64,
    /// Divergence after each acceptance.
    pub kl_trace: Vec<f64>,
    /// How each instance was accepted, aligned with `kl_trace`.
    pub decisions: Vec<Decision>,
    pub stats: GenStats,
}

impl GeneratedDataset {
    pub fn final_kl(&self) -> f64 {
        self.kl_trace.last().copied().unwrap_or(self.initial_kl)
    }
}

struct Candidate {
    index: u64,
    table: usize,
    spec: ChartSpec,
    violations: ViolationSet,
}

/// Sample, annotate and filter candidates until `config.target_size`
/// instances are accepted.
pub fn generate_dataset(
    config: &GenConfig,
    tables: &[DataTable],
) -> Result<GeneratedDataset, GenError> {
    config.validate()?;
    if tables.is_empty() {
        return Err(GenError::InvalidConfig(
            "at least one table is required".into(),
        ));
    }
    if let Some(t) = tables
        .iter()
        .find(|t| t.rows.is_empty() || t.columns.is_empty())
    {
        return Err(GenError::InvalidConfig(format!(
            "table `{}` is empty",
            t.name
        )));
    }
    let linters: Vec<Linter> = tables.iter().map(Linter::new).collect();
    let sample = |index: u64| -> Result<Candidate, GenError> {
        let mut rng = candidate_rng(config.seed, index);
        let table = rng.random_range(0..tables.len());
        let spec = sample_spec(&mut rng, &tables[table], &config.sampler);
        let violations = linters[table].lint(&spec)?;
        Ok(Candidate {
            index,
            table,
            spec,
            violations,
        })
    };

    let mut accept_rng = acceptance_rng(config.seed);
    let mut hist = ProblemHistogram::new();
    let initial_kl = kl_of_counts(hist.counts(), config.smoothing)?;
    let mut kl = initial_kl;
    let mut instances: Vec<DatasetInstance> = Vec::with_capacity(config.target_size);
    let mut kl_trace = Vec::with_capacity(config.target_size);
    let mut decisions = Vec::with_capacity(config.target_size);
    let mut stats = GenStats::default();
    let mut next = 0u64;

    'outer: while instances.len() < config.target_size && next < config.max_candidates {
        let end = (next + config.batch_size as u64).min(config.max_candidates);
        let batch = par::map_range(config.execution, next..end, sample);
        next = end;
        for candidate in batch {
            let candidate = candidate?;
            stats.candidates += 1;
            if candidate.violations.is_empty() {
                stats.skipped_clean += 1;
                continue;
            }
            let tentative = hist.with(&candidate.violations);
            let kl_new = kl_of_counts(tentative.counts(), config.smoothing)?;
            let decision = if !config.filter {
                Decision::Unfiltered
            } else if instances.len() < config.warmup {
                Decision::Warmup
            } else {
                accept_candidate(
                    kl,
                    kl_new,
                    config.epsilon,
                    config.temperature,
                    &mut accept_rng,
                )
            };
            match decision {
                Decision::Improved => stats.improved += 1,
                Decision::Sampled => stats.sampled += 1,
                Decision::Rejected => stats.rejected += 1,
                Decision::Warmup => stats.warmup += 1,
                Decision::Unfiltered => stats.unfiltered += 1,
            }
            if !decision.accepted() {
                continue;
            }
            hist = tentative;
            kl = kl_new;
            kl_trace.push(kl);
            decisions.push(decision);
            let table = &tables[candidate.table];
            instances.push(DatasetInstance {
                id: format!("vl-{:05}", instances.len()),
                table_ref: table.name.clone(),
                emitted_doc: emit_spec(&candidate.spec, None),
                spec: candidate.spec,
                violations: candidate.violations,
                generator: Provenance {
                    seed: config.seed,
                    epsilon: config.epsilon,
                    temperature: config.temperature,
                    candidate: candidate.index,
                    filter: config.filter,
                },
            });
            if instances.len() == config.target_size {
                break 'outer;
            }
        }
    }

    if instances.len() < config.target_size {
        return Err(GenError::BudgetExhausted {
            accepted: instances.len(),
            target: config.target_size,
            candidates: stats.candidates,
        });
    }
    verify_instances(&instances, tables, config.execution)?;
    Ok(GeneratedDataset {
        instances,
        histogram: hist,
        initial_kl,
        kl_trace,
        decisions,
        stats,
    })
}

/// Re-lint every instance and require exact agreement with its stored set.
pub fn verify_instances(
    instances: &[DatasetInstance],
    tables: &[DataTable],
    exec: Execution,
) -> Result<(), GenError> {
    let checks = par::map(exec, instances, |inst| -> Result<(), GenError> {
        let table = tables
            .iter()
            .find(|t| t.name == inst.table_ref)
            .ok_or_else(|| GenError::UnknownTable(inst.table_ref.clone()))?;
        if crate::rules::lint(&inst.spec, table)? != inst.violations {
            return Err(GenError::IntegrityViolation(inst.id.clone()));
        }
        Ok(())
    });
    checks.into_iter().collect()
}

/// Summary written next to a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub tables: Vec<String>,
    pub instances: usize,
    pub histogram: ProblemHistogram,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub kl_trace: Vec<f64>,
    pub decisions: Vec<Decision>,
    pub stats: GenStats,
}

impl Manifest {
    pub fn new(config: &GenConfig, tables: &[DataTable], out: &GeneratedDataset) -> Self {
        Manifest {
            config: config.clone(),
            tables: tables.iter().map(|t| t.name.clone()).collect(),
            instances: out.instances.len(),
            histogram: out.histogram.clone(),
            initial_kl: out.initial_kl,
            final_kl: out.final_kl(),
            kl_trace: out.kl_trace.clone(),
            decisions: out.decisions.clone(),
            stats: out.stats.clone(),
        }
    }
}

/// `<dataset>.manifest.json`
pub fn manifest_path(dataset: &Path) -> std::path::PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".manifest.json");
    name.into()
}

pub fn write_dataset(path: &Path, instances: &[DatasetInstance]) -> Result<(), GenError> {
    write_atomic(path, to_json_lines(instances).as_bytes())?;
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), GenError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetInstance>, GenError> {
    Ok(read_json_lines(path)?)
}
