//! Construction of the parallel alignment dataset.
//!
//! Every selected (in-scope, out-of-scope) case pair of a record yields four
//! samples: each query with and without the knowledge-editing prompt. The
//! in-scope pair teaches the model to apply an edit (edited answer with the
//! prompt, pre-edit answer without it); the out-of-scope pair has the same
//! target both ways, which teaches it when not to.
//!
//! The Updated Information of with-prompt samples is drawn by the threefold
//! sampler: the exact statement alone, or together with the one or two most
//! similar other statements from the pool.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Benchmark, BenchmarkRecord, CaseCategory, EditDescriptor, QueryCase};
use crate::embed::Embedder;
use crate::memory::{MemoryBank, MemoryError};
use crate::prompt::PromptTemplate;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("threefold probabilities must be non-negative and sum to 1, got ({0}, {1}, {2})")]
    BadProbabilities(f64, f64, f64),
    #[error("nothing to export: sample list is empty")]
    NoSamples,
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    InScopeWithPrompt,
    InScopePlain,
    OutScopeWithPrompt,
    OutScopePlain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::InScopeWithPrompt,
        Variant::InScopePlain,
        Variant::OutScopeWithPrompt,
        Variant::OutScopePlain,
    ];

    pub fn with_prompt(self) -> bool {
        matches!(
            self,
            Variant::InScopeWithPrompt | Variant::OutScopeWithPrompt
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreefoldBranch {
    ExactOnly,
    PlusTop1,
    PlusTop2,
}

impl ThreefoldBranch {
    pub fn similar_count(self) -> usize {
        match self {
            ThreefoldBranch::ExactOnly => 0,
            ThreefoldBranch::PlusTop1 => 1,
            ThreefoldBranch::PlusTop2 => 2,
        }
    }

    fn from_similar_count(n: usize) -> Self {
        match n {
            0 => ThreefoldBranch::ExactOnly,
            1 => ThreefoldBranch::PlusTop1,
            _ => ThreefoldBranch::PlusTop2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThreefoldConfig {
    pub p_exact_only: f64,
    pub p_plus_top1: f64,
    pub p_plus_top2: f64,
    pub rng_seed: u64,
    /// Keep the exact statement first instead of at a random position.
    pub rank_order: bool,
}

impl Default for ThreefoldConfig {
    fn default() -> Self {
        Self {
            p_exact_only: 0.50,
            p_plus_top1: 0.25,
            p_plus_top2: 0.25,
            rng_seed: 0,
            rank_order: false,
        }
    }
}

impl ThreefoldConfig {
    pub fn with_probabilities(p1: f64, p2: f64, p3: f64) -> Result<Self, AlignError> {
        let cfg = Self {
            p_exact_only: p1,
            p_plus_top1: p2,
            p_plus_top2: p3,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let (a, b, c) = (self.p_exact_only, self.p_plus_top1, self.p_plus_top2);
        let ok = [a, b, c].iter().all(|p| p.is_finite() && *p >= 0.0)
            && ((a + b + c) - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(AlignError::BadProbabilities(a, b, c));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> ThreefoldBranch {
        let u: f64 = rng.gen();
        if u < self.p_exact_only {
            ThreefoldBranch::ExactOnly
        } else if u < self.p_exact_only + self.p_plus_top1 {
            ThreefoldBranch::PlusTop1
        } else {
            ThreefoldBranch::PlusTop2
        }
    }
}

/// Memory bank over every descriptor of the training corpus, indexed by
/// descriptor id.
pub struct SimilarityPool {
    bank: MemoryBank,
    by_id: HashMap<String, u64>,
}

impl SimilarityPool {
    pub fn new(bank: MemoryBank) -> Self {
        let by_id = bank
            .entries()
            .iter()
            .map(|e| (e.descriptor.id.clone(), e.entry_id))
            .collect();
        Self { bank, by_id }
    }

    pub fn from_descriptors<'a>(
        descriptors: impl IntoIterator<Item = &'a EditDescriptor>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, AlignError> {
        let mut bank = MemoryBank::new(embedder);
        let prepared = bank.prepare_batch(descriptors.into_iter().cloned().collect())?;
        for p in prepared {
            bank.commit(p)?;
        }
        Ok(Self::new(bank))
    }

    pub fn from_benchmarks<'a>(
        benchmarks: impl IntoIterator<Item = &'a Benchmark>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, AlignError> {
        Self::from_descriptors(
            benchmarks
                .into_iter()
                .flat_map(|b| b.records.iter().map(|r| &r.descriptor)),
            embedder,
        )
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    /// Up to `n` most similar statements to `descriptor`, never including
    /// the descriptor itself or any entry with a byte-identical statement.
    pub fn similar(
        &self,
        descriptor: &EditDescriptor,
        n: usize,
    ) -> Result<Vec<String>, AlignError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let stored = self
            .by_id
            .get(&descriptor.id)
            .and_then(|id| self.bank.get(*id))
            .filter(|e| e.descriptor.statement == descriptor.statement);
        let query = match stored {
            Some(e) => e.vector.clone(),
            None => self
                .bank
                .embedder()
                .embed(&descriptor.statement)
                .map_err(MemoryError::from)?,
        };
        let result = self.bank.retrieve_vector(&query, n, |e| {
            e.descriptor.id == descriptor.id || e.descriptor.statement == descriptor.statement
        })?;
        Ok(result.statements())
    }

    /// Number of pool entries usable as similar statements for `descriptor`.
    fn candidates(&self, descriptor: &EditDescriptor, cap: usize) -> usize {
        self.bank
            .entries()
            .iter()
            .filter(|e| {
                e.descriptor.id != descriptor.id && e.descriptor.statement != descriptor.statement
            })
            .take(cap)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreefoldDraw {
    pub statements: Vec<String>,
    pub drawn: ThreefoldBranch,
    pub used: ThreefoldBranch,
    /// Index of the exact statement within `statements`.
    pub exact_position: usize,
}

impl ThreefoldDraw {
    pub fn fell_back(&self) -> bool {
        self.used != self.drawn
    }
}

/// Draws the Updated Information list for one with-prompt sample.
pub fn threefold_updated_information(
    descriptor: &EditDescriptor,
    pool: &SimilarityPool,
    cfg: &ThreefoldConfig,
    rng: &mut impl Rng,
) -> Result<ThreefoldDraw, AlignError> {
    let drawn = cfg.draw(rng);
    let wanted = drawn.similar_count();
    let available = pool.candidates(descriptor, wanted);
    let similar = pool.similar(descriptor, available)?;
    let used = ThreefoldBranch::from_similar_count(similar.len());
    if used != drawn {
        tracing::debug!(id = %descriptor.id, ?drawn, ?used, "threefold fallback: pool too small");
    }
    let exact_position = if cfg.rank_order || similar.is_empty() {
        0
    } else {
        rng.gen_range(0..=similar.len())
    };
    let mut statements = similar;
    statements.insert(exact_position, descriptor.statement.clone());
    Ok(ThreefoldDraw {
        statements,
        drawn,
        used,
        exact_position,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub input_text: String,
    pub target_text: String,
    pub variant: Variant,
    pub source_record_id: String,
    pub updated_information_count: usize,
    pub category: CaseCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<ThreefoldBranch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub threefold: ThreefoldConfig,
    /// Case pairs taken per record, in case order.
    pub max_pairs_per_record: usize,
    pub template: PromptTemplate,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            threefold: ThreefoldConfig::default(),
            max_pairs_per_record: 1,
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub records_seen: usize,
    pub records_contributing: usize,
    pub per_variant: BTreeMap<Variant, usize>,
    pub branch_drawn: BTreeMap<ThreefoldBranch, usize>,
    pub branch_used: BTreeMap<ThreefoldBranch, usize>,
    /// Draws that fell back to a smaller branch because the pool was too small.
    pub threefold_fallbacks: usize,
    /// Pairs skipped because the record has no pre-edit answer.
    pub skipped_missing_original: usize,
    /// Out-of-scope cases skipped for lacking a gold answer.
    pub skipped_out_scope_without_gold: usize,
    /// Records emitting only the in-scope pair.
    pub records_without_out_scope: usize,
}

impl BuildStats {
    fn record_draw(&mut self, draw: &ThreefoldDraw) {
        *self.branch_drawn.entry(draw.drawn).or_default() += 1;
        *self.branch_used.entry(draw.used).or_default() += 1;
        if draw.fell_back() {
            self.threefold_fallbacks += 1;
        }
    }

    fn merge(&mut self, other: &BuildStats) {
        self.records_seen += other.records_seen;
        self.records_contributing += other.records_contributing;
        for (k, v) in &other.per_variant {
            *self.per_variant.entry(*k).or_default() += v;
        }
        for (k, v) in &other.branch_drawn {
            *self.branch_drawn.entry(*k).or_default() += v;
        }
        for (k, v) in &other.branch_used {
            *self.branch_used.entry(*k).or_default() += v;
        }
        self.threefold_fallbacks += other.threefold_fallbacks;
        self.skipped_missing_original += other.skipped_missing_original;
        self.skipped_out_scope_without_gold += other.skipped_out_scope_without_gold;
        self.records_without_out_scope += other.records_without_out_scope;
    }
}

#[allow(clippy::too_many_arguments)]
fn with_prompt_sample(
    record: &BenchmarkRecord,
    case: &QueryCase,
    target: &str,
    variant: Variant,
    pool: &SimilarityPool,
    cfg: &BuildConfig,
    rng: &mut impl Rng,
    stats: &mut BuildStats,
) -> Result<TrainingSample, AlignError> {
    let draw = threefold_updated_information(&record.descriptor, pool, &cfg.threefold, rng)?;
    stats.record_draw(&draw);
    Ok(TrainingSample {
        input_text: cfg.template.render_str(&draw.statements, &case.prompt),
        target_text: target.to_string(),
        variant,
        source_record_id: record.descriptor.id.clone(),
        updated_information_count: draw.statements.len(),
        category: case.category,
        branch: Some(draw.used),
    })
}

fn plain_sample(
    record: &BenchmarkRecord,
    case: &QueryCase,
    target: &str,
    variant: Variant,
) -> TrainingSample {
    TrainingSample {
        input_text: case.prompt.clone(),
        target_text: target.to_string(),
        variant,
        source_record_id: record.descriptor.id.clone(),
        updated_information_count: 0,
        category: case.category,
        branch: None,
    }
}

/// Emits the parallel samples of one record. Pre-edit answers are never
/// made up: without `original_answer` the record contributes nothing.
pub fn build_parallel_samples(
    record: &BenchmarkRecord,
    pool: &SimilarityPool,
    cfg: &BuildConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<TrainingSample>, BuildStats), AlignError> {
    let mut stats = BuildStats {
        records_seen: 1,
        ..Default::default()
    };
    let mut samples = Vec::new();
    let Some(original) = record
        .original_answer
        .as_deref()
        .filter(|s| !s.trim().is_empty())
    else {
        stats.skipped_missing_original += 1;
        return Ok((samples, stats));
    };

    let in_cases: Vec<(&QueryCase, &str)> = record
        .in_scope_cases()
        .filter_map(|c| c.gold_answer.as_deref().map(|g| (c, g)))
        .collect();
    let mut out_cases: Vec<(&QueryCase, &str)> = Vec::new();
    for c in record.out_of_scope_cases() {
        match c.gold_answer.as_deref() {
            Some(g) if !g.trim().is_empty() => out_cases.push((c, g)),
            _ => stats.skipped_out_scope_without_gold += 1,
        }
    }

    let pairs = if out_cases.is_empty() {
        stats.records_without_out_scope += 1;
        in_cases.len().min(cfg.max_pairs_per_record)
    } else {
        in_cases
            .len()
            .min(out_cases.len())
            .min(cfg.max_pairs_per_record)
    };

    for (i, &(in_case, edited)) in in_cases.iter().enumerate().take(pairs) {
        samples.push(with_prompt_sample(
            record,
            in_case,
            edited,
            Variant::InScopeWithPrompt,
            pool,
            cfg,
            rng,
            &mut stats,
        )?);
        samples.push(plain_sample(
            record,
            in_case,
            original,
            Variant::InScopePlain,
        ));
        if let Some(&(out_case, gold)) = out_cases.get(i) {
            samples.push(with_prompt_sample(
                record,
                out_case,
                gold,
                Variant::OutScopeWithPrompt,
                pool,
                cfg,
                rng,
                &mut stats,
            )?);
            samples.push(plain_sample(record, out_case, gold, Variant::OutScopePlain));
        }
    }
    if !samples.is_empty() {
        stats.records_contributing += 1;
    }
    for s in &samples {
        *stats.per_variant.entry(s.variant).or_default() += 1;
    }
    Ok((samples, stats))
}

/// Per-record generator: stream `index` of a ChaCha8 generator seeded with
/// `seed`. Records can therefore be built in any order with the same result.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub stats: BuildStats,
}

/// Builds samples for every record of `benchmarks`, in record order.
pub fn build_dataset(
    benchmarks: &[Benchmark],
    pool: &SimilarityPool,
    cfg: &BuildConfig,
) -> Result<Dataset, AlignError> {
    cfg.threefold.validate()?;
    let mut samples = Vec::new();
    let mut stats = BuildStats::default();
    let records = benchmarks.iter().flat_map(|b| b.records.iter());
    for (index, record) in records.enumerate() {
        let mut rng = record_rng(cfg.threefold.rng_seed, index);
        let (s, st) = build_parallel_samples(record, pool, cfg, &mut rng)?;
        samples.extend(s);
        stats.merge(&st);
    }
    Ok(Dataset { samples, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparameters {
    pub batch_size: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub max_length: u32,
    pub optimizer: String,
    pub scheduler: String,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

/// Fine-tuning settings recorded in the manifest for the downstream trainer.
/// Nothing in this crate reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPreset {
    pub standard_ft: TrainingHyperparameters,
    pub lora: TrainingHyperparameters,
}

impl Default for TrainingPreset {
    fn default() -> Self {
        let standard_ft = TrainingHyperparameters {
            batch_size: 128,
            learning_rate: 2e-5,
            epochs: 3,
            max_length: 2048,
            optimizer: "AdamW".into(),
            scheduler: "cosine".into(),
            weight_decay: 0.0,
            warmup_ratio: 0.03,
        };
        let lora = TrainingHyperparameters {
            learning_rate: 3e-4,
            ..standard_ft.clone()
        };
        Self { standard_ft, lora }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format: String,
    pub data_file: String,
    pub total: usize,
    pub counts_per_variant: BTreeMap<Variant, usize>,
    pub threefold_branch_drawn: BTreeMap<ThreefoldBranch, usize>,
    pub threefold_branch_used: BTreeMap<ThreefoldBranch, usize>,
    pub threefold: ThreefoldConfig,
    pub rng_seed: u64,
    pub build_stats: BuildStats,
    pub training_preset: TrainingPreset,
}

#[derive(Serialize)]
struct MaskedLine<'a> {
    input: &'a str,
    output: &'a str,
    loss_on: &'static str,
    variant: Variant,
    meta: LineMeta<'a>,
}

#[derive(Serialize)]
struct LineMeta<'a> {
    source_record_id: &'a str,
    updated_information_count: usize,
    category: CaseCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    branch: Option<ThreefoldBranch>,
}

/// Path of the manifest written next to `data_path`.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("manifest.json")
}

/// Writes `masked_jsonl` training data plus a manifest; returns the manifest.
pub fn export_sft(
    dataset: &Dataset,
    cfg: &BuildConfig,
    path: &Path,
) -> Result<ExportManifest, AlignError> {
    if dataset.samples.is_empty() {
        return Err(AlignError::NoSamples);
    }
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |source| AlignError::Io { path: p, source }
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut counts: BTreeMap<Variant, usize> = BTreeMap::new();
    for s in &dataset.samples {
        *counts.entry(s.variant).or_default() += 1;
        let line = MaskedLine {
            input: &s.input_text,
            output: &s.target_text,
            loss_on: "output_only",
            variant: s.variant,
            meta: LineMeta {
                source_record_id: &s.source_record_id,
                updated_information_count: s.updated_information_count,
                category: s.category,
                branch: s.branch,
            },
        };
        serde_json::to_writer(&mut w, &line).expect("sample serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let manifest = ExportManifest {
        format: "masked_jsonl".into(),
        data_file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total: dataset.samples.len(),
        counts_per_variant: counts,
        threefold_branch_drawn: dataset.stats.branch_drawn.clone(),
        threefold_branch_used: dataset.stats.branch_used.clone(),
        threefold: cfg.threefold,
        rng_seed: cfg.threefold.rng_seed,
        build_stats: dataset.stats.clone(),
        training_preset: TrainingPreset::default(),
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}
