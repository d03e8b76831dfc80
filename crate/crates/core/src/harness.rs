//! Evaluation protocols: single editing, batch editing, sequential editing
//! and per-edit timing.
//!
//! Single editing injects each record's own statement into the prompt.
//! Batch and sequential editing put `n` statements into a memory bank and
//! answer every query through retrieval. Batch builds a fresh bank per size;
//! sequential appends to one bank in stream order and evaluates once the
//! stream reaches each size.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::corpus::{Benchmark, QueryCase, Scope};
use crate::embed::Embedder;
use crate::memory::{MemoryBank, MemoryError, RetrievalResult};
use crate::metrics::{
    dimension_accuracy, fluency, p_at_1, top_k_hit_rate, CaseCounts, CaseResult, Dimension,
    FluencyWeights, LocalityMode, MatchMode, MetricReport, MetricsError,
};
use crate::prompt::PromptTemplate;

const MAX_RECORDED_ERRORS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("no records")]
    NoRecords,
    #[error("benchmark `{name}` has {len} records but {needed} are required")]
    BenchmarkTooSmall {
        name: String,
        len: usize,
        needed: usize,
    },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("aborted: {failed} of {total} backend calls failed (first error: {first_error})")]
    Aborted {
        failed: usize,
        total: usize,
        first_error: String,
    },
    #[error("backend failure during timing run: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Single,
    Batch,
    Sequential,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Single => "single",
            EvalMode::Batch => "batch",
            EvalMode::Sequential => "sequential",
        }
    }

    pub fn default_sizes(self) -> Vec<usize> {
        match self {
            EvalMode::Single => Vec::new(),
            EvalMode::Batch => vec![1, 10, 100, 1000],
            EvalMode::Sequential => vec![1, 10, 100, 500, 1000],
        }
    }
}

impl FromStr for EvalMode {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(EvalMode::Single),
            "batch" => Ok(EvalMode::Batch),
            "sequential" => Ok(EvalMode::Sequential),
            _ => Err(HarnessError::InvalidConfig(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: EvalMode,
    pub sizes: Vec<usize>,
    pub k: usize,
    pub parallelism: usize,
    pub seed: u64,
    pub match_mode: MatchMode,
    pub locality_mode: LocalityMode,
    /// Single mode only: send bare queries with no Updated Information.
    pub plain_control: bool,
    /// Sequential mode only: evaluate after every insertion.
    pub eval_each_step: bool,
    pub fluency_weights: FluencyWeights,
    pub max_new_tokens: u32,
    pub temperature: f64,
    /// Abort when more than this fraction of backend calls fail.
    pub max_failure_fraction: f64,
    pub snapshot_dir: Option<PathBuf>,
    pub template: PromptTemplate,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Single,
            sizes: Vec::new(),
            k: 3,
            parallelism: 1,
            seed: 0,
            match_mode: MatchMode::Substring,
            locality_mode: LocalityMode::Gold,
            plain_control: false,
            eval_each_step: false,
            fluency_weights: FluencyWeights::default(),
            max_new_tokens: 100,
            temperature: 0.0,
            max_failure_fraction: 0.10,
            snapshot_dir: None,
            template: PromptTemplate::default(),
        }
    }
}

impl RunConfig {
    pub fn for_mode(mode: EvalMode) -> Self {
        Self {
            mode,
            sizes: mode.default_sizes(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if self.parallelism < 1 {
            return bad("parallelism must be >= 1");
        }
        if self.mode != EvalMode::Single {
            if self.sizes.is_empty() {
                return bad("sizes must not be empty");
            }
            if self.sizes[0] == 0 || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
                return bad("sizes must be positive and strictly ascending");
            }
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must be in [0, 1]");
        }
        Ok(())
    }

    fn request(&self, prompt: String) -> GenerationRequest {
        GenerationRequest {
            prompt,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingReport {
    /// Mean seconds per memory insertion.
    pub edit_time_s: f64,
    /// Mean seconds per answered query.
    pub inference_time_s: f64,
    pub total_time_s: f64,
}

impl TimingReport {
    pub fn new(edit_time_s: f64, inference_time_s: f64) -> Self {
        Self {
            edit_time_s,
            inference_time_s,
            total_time_s: edit_time_s + inference_time_s,
        }
    }

    /// `edit / inference / total` to two decimals.
    pub fn display(&self) -> String {
        format!(
            "{:.2} / {:.2} / {:.2}",
            self.edit_time_s, self.inference_time_s, self.total_time_s
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalDiagnostics {
    pub p_at_1: Option<f64>,
    pub top_k_hit_rate: Option<f64>,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FailureSummary {
    pub backend_calls: usize,
    pub failed_calls: usize,
    /// Cases dropped from scoring because a backend call failed.
    pub excluded_cases: usize,
    /// Locality cases without a gold answer under gold-mode scoring.
    pub unscored_cases: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    pub per_benchmark: BTreeMap<String, MetricReport>,
    pub average: MetricReport,
    pub timing: TimingReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalDiagnostics>,
    pub failures: FailureSummary,
    pub run_config: RunConfig,
}

impl EvalReport {
    /// The report without wall-clock fields, for comparing runs.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            timing: TimingReport::default(),
            ..self.clone()
        }
    }
}

/// Runs `f(0..n)` on up to `parallelism` threads; results keep index order.
fn run_indexed<T: Send>(n: usize, parallelism: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = parallelism.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut parts: Vec<Vec<(usize, T)>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        local.push((i, f(i)));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut all: Vec<(usize, T)> = parts.iter_mut().flat_map(std::mem::take).collect();
    all.sort_by_key(|(i, _)| *i);
    all.into_iter().map(|(_, t)| t).collect()
}

/// How Updated Information is chosen for a query.
enum Injection<'a> {
    /// The record's own statement (or nothing, for the plain control).
    Exact { plain: bool },
    /// Retrieval from one bank per benchmark.
    Retrieve { banks: &'a [MemoryBank] },
}

struct Job<'a> {
    bench: usize,
    record: usize,
    case: &'a QueryCase,
    statement: &'a str,
}

struct JobOutcome {
    generated: Result<String, BackendError>,
    baseline: Option<Result<String, BackendError>>,
    retrieval: Option<RetrievalResult>,
    seconds: f64,
}

fn run_job(
    job: &Job<'_>,
    injection: &Injection<'_>,
    backend: &dyn Backend,
    cfg: &RunConfig,
) -> Result<JobOutcome, MemoryError> {
    let start = Instant::now();
    let (info, retrieval) = match injection {
        Injection::Exact { plain: true } => (Vec::new(), None),
        Injection::Exact { plain: false } => (vec![job.statement.to_string()], None),
        Injection::Retrieve { banks } => {
            let r = banks[job.bench].retrieve(&job.case.prompt, cfg.k)?;
            (r.statements(), Some(r))
        }
    };
    let prompt = cfg.template.render_str(&info, &job.case.prompt);
    let generated = backend.generate(&cfg.request(prompt)).map(|g| g.text);
    let seconds = start.elapsed().as_secs_f64();
    let baseline = (job.case.scope == Scope::OutOfScope
        && cfg.locality_mode == LocalityMode::BaselineConsistency)
        .then(|| {
            backend
                .generate(&cfg.request(job.case.prompt.clone()))
                .map(|g| g.text)
        });
    Ok(JobOutcome {
        generated,
        baseline,
        retrieval,
        seconds,
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean over benchmarks of each dimension present in every benchmark.
fn average(per_benchmark: &BTreeMap<String, MetricReport>) -> MetricReport {
    let reports: Vec<&MetricReport> = per_benchmark.values().collect();
    let avg = |get: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = reports.iter().map(|r| get(r)).collect();
        vals.and_then(|v| mean(&v))
    };
    let sum_counts =
        |get: &dyn Fn(&CaseCounts) -> usize| reports.iter().map(|r| get(&r.n_cases)).sum();
    MetricReport {
        edit_success: avg(&|r| r.edit_success),
        portability: avg(&|r| r.portability),
        locality: avg(&|r| r.locality),
        fluency: avg(&|r| r.fluency),
        p_at_1: avg(&|r| r.p_at_1),
        top_k_hit_rate: avg(&|r| r.top_k_hit_rate),
        n_cases: CaseCounts {
            edit_success: sum_counts(&|c| c.edit_success),
            portability: sum_counts(&|c| c.portability),
            locality: sum_counts(&|c| c.locality),
            fluency: sum_counts(&|c| c.fluency),
        },
    }
}

struct Evaluation {
    per_benchmark: BTreeMap<String, MetricReport>,
    retrieval: Option<RetrievalDiagnostics>,
    failures: FailureSummary,
    inference_time_s: f64,
}

/// Answers and scores every case of the first `limit` records of each
/// benchmark. Gold entry ids for retrieval equal record positions.
fn evaluate(
    benchmarks: &[Benchmark],
    limit: usize,
    injection: &Injection<'_>,
    backend: &dyn Backend,
    cfg: &RunConfig,
) -> Result<Evaluation, HarnessError> {
    let mut jobs = Vec::new();
    for (bi, b) in benchmarks.iter().enumerate() {
        for (ri, r) in b.records.iter().take(limit).enumerate() {
            for case in &r.cases {
                jobs.push(Job {
                    bench: bi,
                    record: ri,
                    case,
                    statement: &r.descriptor.statement,
                });
            }
        }
    }
    let outcomes = run_indexed(jobs.len(), cfg.parallelism, |i| {
        run_job(&jobs[i], injection, backend, cfg)
    });
    let outcomes: Vec<JobOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    let mut failures = FailureSummary::default();
    let note_error = |failures: &mut FailureSummary, e: &BackendError| {
        failures.failed_calls += 1;
        if failures.errors.len() < MAX_RECORDED_ERRORS {
            failures.errors.push(e.to_string());
        }
    };

    let mut per_benchmark = BTreeMap::new();
    let mut all_retrievals: Vec<(u64, &RetrievalResult)> = Vec::new();
    let mut seconds = Vec::with_capacity(outcomes.len());

    for (bi, b) in benchmarks.iter().enumerate() {
        let mut by_dim: BTreeMap<Dimension, Vec<CaseResult>> = BTreeMap::new();
        let mut record_text: BTreeMap<usize, String> = BTreeMap::new();
        let mut retrievals: Vec<(u64, &RetrievalResult)> = Vec::new();

        for (job, out) in jobs.iter().zip(&outcomes).filter(|(j, _)| j.bench == bi) {
            seconds.push(out.seconds);
            failures.backend_calls += 1 + usize::from(out.baseline.is_some());
            if let (Some(r), Scope::InScope) = (&out.retrieval, job.case.scope) {
                retrievals.push((job.record as u64, r));
            }
            let generated = match &out.generated {
                Ok(t) => t.clone(),
                Err(e) => {
                    note_error(&mut failures, e);
                    if let Some(Err(be)) = &out.baseline {
                        note_error(&mut failures, be);
                    }
                    failures.excluded_cases += 1;
                    continue;
                }
            };
            let text = record_text.entry(job.record).or_default();
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str(&generated);

            let baseline = match &out.baseline {
                Some(Err(e)) => {
                    note_error(&mut failures, e);
                    failures.excluded_cases += 1;
                    continue;
                }
                Some(Ok(t)) => Some(t.clone()),
                None => None,
            };
            let dim = Dimension::of(job.case);
            if dim == Dimension::Locality
                && cfg.locality_mode == LocalityMode::Gold
                && job.case.gold_answer.is_none()
            {
                failures.unscored_cases += 1;
                continue;
            }
            by_dim.entry(dim).or_default().push(CaseResult::score(
                job.case.clone(),
                generated,
                baseline,
                cfg.match_mode,
            ));
        }

        let acc = |d: Dimension| -> Result<Option<f64>, MetricsError> {
            match by_dim.get(&d) {
                Some(rs) => dimension_accuracy(rs, d, cfg.locality_mode, cfg.match_mode),
                None => Ok(None),
            }
        };
        let fluencies: Vec<f64> = record_text
            .values()
            .map(|t| fluency(t, cfg.fluency_weights))
            .collect();
        let count = |d: Dimension| by_dim.get(&d).map_or(0, Vec::len);
        let report = MetricReport {
            edit_success: acc(Dimension::EditSuccess)?,
            portability: acc(Dimension::Portability)?,
            locality: acc(Dimension::Locality)?,
            fluency: mean(&fluencies),
            p_at_1: p_at_1(&retrievals),
            top_k_hit_rate: top_k_hit_rate(&retrievals),
            n_cases: CaseCounts {
                edit_success: count(Dimension::EditSuccess),
                portability: count(Dimension::Portability),
                locality: count(Dimension::Locality),
                fluency: fluencies.len(),
            },
        };
        per_benchmark.insert(b.name.clone(), report);
        all_retrievals.extend(retrievals);
    }

    if failures.backend_calls > 0
        && failures.failed_calls as f64 > cfg.max_failure_fraction * failures.backend_calls as f64
    {
        return Err(HarnessError::Aborted {
            failed: failures.failed_calls,
            total: failures.backend_calls,
            first_error: failures.errors.first().cloned().unwrap_or_default(),
        });
    }

    let retrieval = matches!(injection, Injection::Retrieve { .. }).then(|| RetrievalDiagnostics {
        p_at_1: p_at_1(&all_retrievals),
        top_k_hit_rate: top_k_hit_rate(&all_retrievals),
        queries: all_retrievals.len(),
    });
    Ok(Evaluation {
        per_benchmark,
        retrieval,
        failures,
        inference_time_s: mean(&seconds).unwrap_or(0.0),
    })
}

fn check_names(benchmarks: &[Benchmark]) -> Result<(), HarnessError> {
    let mut seen = std::collections::HashSet::new();
    for b in benchmarks {
        if !seen.insert(b.name.as_str()) {
            return Err(HarnessError::InvalidConfig(format!(
                "duplicate benchmark name `{}`",
                b.name
            )));
        }
    }
    Ok(())
}

/// Single editing: each query is answered with its own record's statement
/// as the Updated Information (no retrieval).
pub fn eval_single(
    benchmarks: &[Benchmark],
    backend: &dyn Backend,
    cfg: &RunConfig,
) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    check_names(benchmarks)?;
    if benchmarks.iter().all(Benchmark::is_empty) {
        return Err(HarnessError::NoRecords);
    }
    let injection = Injection::Exact {
        plain: cfg.plain_control,
    };
    let ev = evaluate(benchmarks, usize::MAX, &injection, backend, cfg)?;
    Ok(EvalReport {
        mode: EvalMode::Single,
        size: None,
        average: average(&ev.per_benchmark),
        per_benchmark: ev.per_benchmark,
        timing: TimingReport::new(0.0, ev.inference_time_s),
        retrieval: None,
        failures: ev.failures,
        run_config: cfg.clone(),
    })
}

/// Memory banks (one per benchmark) fed from the benchmark streams.
pub struct MassState<'a> {
    benchmarks: &'a [Benchmark],
    banks: Vec<MemoryBank>,
    position: usize,
    edit_seconds: f64,
    edits: usize,
}

impl<'a> MassState<'a> {
    pub fn new(benchmarks: &'a [Benchmark], embedder: Arc<dyn Embedder>) -> Self {
        Self {
            benchmarks,
            banks: benchmarks
                .iter()
                .map(|_| MemoryBank::new(embedder.clone()))
                .collect(),
            position: 0,
            edit_seconds: 0.0,
            edits: 0,
        }
    }

    fn snapshot_path(dir: &Path, mode: EvalMode, name: &str, position: usize) -> PathBuf {
        dir.join(format!(
            "memory-{}-{}-{}.jsonl",
            mode.as_str(),
            name,
            position
        ))
    }

    /// Restores banks written by [`MassState::snapshot`] at `position`.
    pub fn restore(
        benchmarks: &'a [Benchmark],
        embedder: Arc<dyn Embedder>,
        dir: &Path,
        mode: EvalMode,
        position: usize,
    ) -> Result<Self, HarnessError> {
        let mut banks = Vec::with_capacity(benchmarks.len());
        for b in benchmarks {
            let bank = MemoryBank::restore(
                &Self::snapshot_path(dir, mode, &b.name, position),
                embedder.clone(),
            )?;
            if bank.len() != position.min(b.len()) {
                return Err(HarnessError::InvalidConfig(format!(
                    "snapshot for `{}` holds {} entries, expected {}",
                    b.name,
                    bank.len(),
                    position
                )));
            }
            banks.push(bank);
        }
        Ok(Self {
            benchmarks,
            banks,
            position,
            edit_seconds: 0.0,
            edits: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn banks(&self) -> &[MemoryBank] {
        &self.banks
    }

    /// Appends records one at a time until `n` are stored per benchmark.
    pub fn insert_until(&mut self, n: usize) -> Result<(), HarnessError> {
        while self.position < n {
            for (bank, b) in self.banks.iter_mut().zip(self.benchmarks) {
                if let Some(r) = b.records.get(self.position) {
                    let start = Instant::now();
                    bank.add_edit(r.descriptor.clone())?;
                    self.edit_seconds += start.elapsed().as_secs_f64();
                    self.edits += 1;
                }
            }
            self.position += 1;
        }
        Ok(())
    }

    /// Inserts the first `n` records of every stream in one batch.
    pub fn insert_batch(&mut self, n: usize) -> Result<(), HarnessError> {
        for (bank, b) in self.banks.iter_mut().zip(self.benchmarks) {
            let descriptors: Vec<_> = b.records[self.position.min(b.len())..n.min(b.len())]
                .iter()
                .map(|r| r.descriptor.clone())
                .collect();
            let count = descriptors.len();
            let start = Instant::now();
            for p in bank.prepare_batch(descriptors)? {
                bank.commit(p)?;
            }
            self.edit_seconds += start.elapsed().as_secs_f64();
            self.edits += count;
        }
        self.position = self.position.max(n);
        Ok(())
    }

    pub fn snapshot(&self, dir: &Path, mode: EvalMode) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (bank, b) in self.banks.iter().zip(self.benchmarks) {
            bank.snapshot(&Self::snapshot_path(dir, mode, &b.name, self.position))?;
        }
        Ok(())
    }

    /// Evaluates the queries of the first `position` records through
    /// retrieval.
    pub fn evaluate(
        &self,
        mode: EvalMode,
        backend: &dyn Backend,
        cfg: &RunConfig,
    ) -> Result<EvalReport, HarnessError> {
        let injection = Injection::Retrieve { banks: &self.banks };
        let ev = evaluate(self.benchmarks, self.position, &injection, backend, cfg)?;
        let edit_time = if self.edits == 0 {
            0.0
        } else {
            self.edit_seconds / self.edits as f64
        };
        Ok(EvalReport {
            mode,
            size: Some(self.position),
            average: average(&ev.per_benchmark),
            per_benchmark: ev.per_benchmark,
            timing: TimingReport::new(edit_time, ev.inference_time_s),
            retrieval: ev.retrieval,
            failures: ev.failures,
            run_config: cfg.clone(),
        })
    }
}

/// Batch or sequential editing; one report per size.
pub fn eval_mass(
    benchmarks: &[Benchmark],
    backend: &dyn Backend,
    embedder: Arc<dyn Embedder>,
    cfg: &RunConfig,
) -> Result<Vec<EvalReport>, HarnessError> {
    cfg.validate()?;
    check_names(benchmarks)?;
    if benchmarks.iter().all(Benchmark::is_empty) {
        return Err(HarnessError::NoRecords);
    }
    let sizes: Vec<usize> = match cfg.mode {
        EvalMode::Single => {
            return Err(HarnessError::InvalidConfig(
                "eval_mass needs batch or sequential mode".into(),
            ))
        }
        EvalMode::Sequential if cfg.eval_each_step => {
            (1..=*cfg.sizes.last().expect("validated")).collect()
        }
        _ => cfg.sizes.clone(),
    };
    let needed = *sizes.last().expect("validated");
    for b in benchmarks {
        if b.len() < needed {
            return Err(HarnessError::BenchmarkTooSmall {
                name: b.name.clone(),
                len: b.len(),
                needed,
            });
        }
    }

    let mut reports = Vec::with_capacity(sizes.len());
    match cfg.mode {
        EvalMode::Batch => {
            for &n in &sizes {
                let mut state = MassState::new(benchmarks, embedder.clone());
                state.insert_batch(n)?;
                if let Some(dir) = &cfg.snapshot_dir {
                    state.snapshot(dir, EvalMode::Batch)?;
                }
                reports.push(state.evaluate(EvalMode::Batch, backend, cfg)?);
            }
        }
        EvalMode::Sequential => {
            let mut state = MassState::new(benchmarks, embedder);
            for &n in &sizes {
                state.insert_until(n)?;
                if let Some(dir) = &cfg.snapshot_dir {
                    state.snapshot(dir, EvalMode::Sequential)?;
                }
                reports.push(state.evaluate(EvalMode::Sequential, backend, cfg)?);
            }
        }
        EvalMode::Single => unreachable!(),
    }
    Ok(reports)
}

/// Mean insertion and query latency over the first 10 records. Each record
/// is inserted, then its reliability query is answered through retrieval.
pub fn time_per_edit(
    benchmark: &Benchmark,
    backend: &dyn Backend,
    embedder: Arc<dyn Embedder>,
    cfg: &RunConfig,
) -> Result<TimingReport, HarnessError> {
    const EDITS: usize = 10;
    if benchmark.len() < EDITS {
        return Err(HarnessError::BenchmarkTooSmall {
            name: benchmark.name.clone(),
            len: benchmark.len(),
            needed: EDITS,
        });
    }
    if cfg.k < 1 {
        return Err(HarnessError::InvalidConfig("k must be >= 1".into()));
    }
    let mut bank = MemoryBank::new(embedder);
    let mut edit = 0.0;
    let mut inference = 0.0;
    for record in benchmark.records.iter().take(EDITS) {
        let start = Instant::now();
        bank.add_edit(record.descriptor.clone())?;
        edit += start.elapsed().as_secs_f64();

        let query = &record.descriptor.edit_input;
        let start = Instant::now();
        let info = bank.retrieve(query, cfg.k)?.statements();
        let prompt = cfg.template.render_str(&info, query);
        backend.generate(&cfg.request(prompt))?;
        inference += start.elapsed().as_secs_f64();
    }
    Ok(TimingReport::new(
        edit / EDITS as f64,
        inference / EDITS as f64,
    ))
}

/// Baseline pass: records without a pre-edit answer get the backend's reply
/// to their bare edit input. Returns how many records were filled.
pub fn fill_original_answers(
    benchmark: &mut Benchmark,
    backend: &dyn Backend,
    cfg: &RunConfig,
) -> Result<usize, HarnessError> {
    let missing: Vec<usize> = (0..benchmark.len())
        .filter(|&i| benchmark.records[i].original_answer.is_none())
        .collect();
    let answers = run_indexed(missing.len(), cfg.parallelism, |j| {
        let query = benchmark.records[missing[j]].descriptor.edit_input.clone();
        backend
            .generate(&cfg.request(query))
            .map(|g| g.text.trim().to_string())
    });
    for (i, answer) in missing.iter().zip(answers) {
        benchmark.records[*i].original_answer = Some(answer?);
    }
    Ok(missing.len())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Plain-text results table with one row per benchmark plus the average.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let size = report
        .size
        .map(|n| format!(" size={n}"))
        .unwrap_or_default();
    let _ = writeln!(
        out,
        "mode={}{size} k={}",
        report.mode.as_str(),
        report.run_config.k
    );
    let _ = writeln!(
        out,
        "{:<24} {:>10} {:>12} {:>10} {:>10}",
        "Benchmark", "Edit Succ.", "Portability", "Locality", "Fluency"
    );
    let rows = report
        .per_benchmark
        .iter()
        .map(|(n, r)| (n.as_str(), r))
        .chain(std::iter::once(("Average", &report.average)));
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>12} {:>10} {:>10}",
            name,
            fmt_opt(r.edit_success),
            fmt_opt(r.portability),
            fmt_opt(r.locality),
            fmt_opt(r.fluency)
        );
    }
    if let Some(d) = &report.retrieval {
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.3}"));
        let _ = writeln!(
            out,
            "P@1: {}  top-k hit rate: {}",
            f(d.p_at_1),
            f(d.top_k_hit_rate)
        );
    }
    let _ = writeln!(
        out,
        "Time per edit (edit / inference / total, s): {}",
        report.timing.display()
    );
    if report.failures.failed_calls > 0 {
        let _ = writeln!(
            out,
            "Backend failures: {} of {} calls, {} cases excluded",
            report.failures.failed_calls,
            report.failures.backend_calls,
            report.failures.excluded_cases
        );
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`.
pub fn write_report(
    report: &EvalReport,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| HarnessError::Io { path: p, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let json = dir.join(format!("{stem}.json"));
    let txt = dir.join(format!("{stem}.txt"));
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&json, text + "\n").map_err(io(&json))?;
    fs::write(&txt, render_table(report)).map_err(io(&txt))?;
    Ok((json, txt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockOracle, MockOracleConfig};
    use crate::corpus::{BenchmarkRecord, CaseCategory, EditDescriptor};
    use crate::embed::ReferenceEmbedder;

    struct FailingBackend {
        every: usize,
        calls: AtomicUsize,
    }

    impl Backend for FailingBackend {
        fn id(&self) -> &str {
            "failing"
        }
        fn generate(
            &self,
            _r: &GenerationRequest,
        ) -> Result<crate::backend::GenerationResult, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n.is_multiple_of(self.every) {
                Err(BackendError::Config("boom".into()))
            } else {
                Ok(crate::backend::GenerationResult {
                    text: "x".into(),
                    latency_seconds: 0.0,
                    backend_id: "failing".into(),
                })
            }
        }
    }

    fn bench(n: usize) -> Benchmark {
        let records = (0..n)
            .map(|i| {
                BenchmarkRecord::new(EditDescriptor::new(
                    format!("r{i:04}"),
                    format!("Who leads realm R{i:04}?"),
                    format!("Ruler {i:04}"),
                    Some(format!("Realm R{i:04} is now led by Ruler {i:04}")),
                ))
                .with_case(QueryCase::out_of_scope(
                    format!("What river crosses realm R{i:04}?"),
                    Some(format!("River {i:04}")),
                    CaseCategory::UnrelatedAttribute,
                ))
            })
            .collect();
        Benchmark::new("synthetic", records)
    }

    #[test]
    fn empty_benchmark_errors() {
        let m = MockOracle::new(MockOracleConfig::default()).unwrap();
        let err =
            eval_single(&[Benchmark::new("e", vec![])], &m, &RunConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "no records");
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::for_mode(EvalMode::Batch);
        assert!(c.validate().is_ok());
        c.sizes = vec![10, 1];
        assert!(c.validate().is_err());
        c.sizes = vec![0, 1];
        assert!(c.validate().is_err());
        let c = RunConfig {
            k: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn perfect_oracle_single() {
        let b = bench(20);
        let m = MockOracle::new(MockOracleConfig::perfect_for([&b])).unwrap();
        let r = eval_single(&[b], &m, &RunConfig::default()).unwrap();
        assert_eq!(r.average.edit_success, Some(100.0));
        assert_eq!(r.average.locality, Some(100.0));
        assert_eq!(r.average.portability, None);
        assert_eq!(r.per_benchmark["synthetic"].n_cases.edit_success, 20);
        assert_eq!(r.per_benchmark["synthetic"].n_cases.locality, 20);
    }

    #[test]
    fn plain_control_loses_edits() {
        let b = bench(5);
        let m = MockOracle::new(MockOracleConfig::perfect_for([&b])).unwrap();
        let cfg = RunConfig {
            plain_control: true,
            ..RunConfig::default()
        };
        let r = eval_single(&[b], &m, &cfg).unwrap();
        assert_eq!(r.average.edit_success, Some(0.0));
        assert_eq!(r.average.locality, Some(100.0));
    }

    #[test]
    fn failures_are_excluded_not_zero_scored() {
        let b = bench(50);
        // 1 in 20 calls fails: 5% < 10%.
        let f = FailingBackend {
            every: 20,
            calls: AtomicUsize::new(0),
        };
        let r = eval_single(std::slice::from_ref(&b), &f, &RunConfig::default()).unwrap();
        assert_eq!(r.failures.backend_calls, 100);
        assert_eq!(r.failures.failed_calls, 5);
        assert_eq!(r.failures.excluded_cases, 5);
        let counted = r.per_benchmark["synthetic"].n_cases;
        assert_eq!(counted.edit_success + counted.locality, 95);
        // 1 in 5 fails: 20% > 10%.
        let f = FailingBackend {
            every: 5,
            calls: AtomicUsize::new(0),
        };
        assert!(matches!(
            eval_single(&[b], &f, &RunConfig::default()),
            Err(HarnessError::Aborted { .. })
        ));
    }

    #[test]
    fn mass_requires_enough_records() {
        let b = bench(5);
        let m = MockOracle::new(MockOracleConfig::perfect_for([&b])).unwrap();
        let cfg = RunConfig {
            sizes: vec![1, 10],
            ..RunConfig::for_mode(EvalMode::Batch)
        };
        assert!(matches!(
            eval_mass(&[b], &m, Arc::new(ReferenceEmbedder::default()), &cfg),
            Err(HarnessError::BenchmarkTooSmall { needed: 10, .. })
        ));
    }

    #[test]
    fn eval_each_step_reports_every_size() {
        let b = bench(6);
        let m = MockOracle::new(MockOracleConfig::perfect_for([&b])).unwrap();
        let cfg = RunConfig {
            sizes: vec![2, 6],
            eval_each_step: true,
            ..RunConfig::for_mode(EvalMode::Sequential)
        };
        let reports = eval_mass(&[b], &m, Arc::new(ReferenceEmbedder::default()), &cfg).unwrap();
        let sizes: Vec<_> = reports.iter().map(|r| r.size.unwrap()).collect();
        assert_eq!(sizes, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn table_mentions_columns() {
        let b = bench(3);
        let m = MockOracle::new(MockOracleConfig::perfect_for([&b])).unwrap();
        let r = eval_single(&[b], &m, &RunConfig::default()).unwrap();
        let t = render_table(&r);
        for col in [
            "Edit Succ.",
            "Portability",
            "Locality",
            "Fluency",
            "Average",
            "synthetic",
            "100.00",
        ] {
            assert!(t.contains(col), "{t}");
        }
    }

    #[test]
    fn baseline_pass_fills_only_missing() {
        let mut b = bench(4);
        b.records[1].original_answer = Some("kept".into());
        let m = MockOracle::new(MockOracleConfig::default()).unwrap();
        assert_eq!(
            fill_original_answers(&mut b, &m, &RunConfig::default()).unwrap(),
            3
        );
        assert_eq!(b.records[0].original_answer.as_deref(), Some("UNKNOWN"));
        assert_eq!(b.records[1].original_answer.as_deref(), Some("kept"));
    }

    #[test]
    fn run_indexed_preserves_order() {
        let v = run_indexed(100, 8, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
        assert!(run_indexed(0, 4, |i| i).is_empty());
    }

    #[test]
    fn averaging_requires_dimension_everywhere() {
        let mut per = BTreeMap::new();
        per.insert(
            "a".to_string(),
            MetricReport {
                edit_success: Some(100.0),
                portability: Some(50.0),
                ..Default::default()
            },
        );
        per.insert(
            "b".to_string(),
            MetricReport {
                edit_success: Some(80.0),
                portability: None,
                ..Default::default()
            },
        );
        let avg = average(&per);
        assert_eq!(avg.edit_success, Some(90.0));
        assert_eq!(avg.portability, None);
    }
}
