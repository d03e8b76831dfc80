//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use lte_core::alignbuild::{
    build_dataset, export_sft, BuildConfig, SimilarityPool, ThreefoldConfig,
};
use lte_core::backend::{ChatClientConfig, MockOracleConfig, NoiseScope};
use lte_core::corpus::{export_native, load_benchmark, validate, Benchmark, BenchmarkFormat};
use lte_core::embed::{Embedder, ReferenceEmbedderConfig, RemoteEmbedderConfig};
use lte_core::harness::{
    eval_mass, eval_single, fill_original_answers, time_per_edit, write_report, EvalMode, RunConfig,
};
use lte_core::memory::MemoryBank;
use lte_core::metrics::{FluencyWeights, LocalityMode, MatchMode};

use crate::config::{BackendConfig, EmbedderConfig, ServeConfig};

#[derive(Debug, Parser)]
#[command(
    name = "lte",
    version,
    about = "Knowledge editing with retrieved Updated Information"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a benchmark; optionally export it as native JSONL.
    Ingest(IngestArgs),
    /// Build parallel fine-tuning samples from benchmark records.
    BuildData(BuildDataArgs),
    /// Run single, batch or sequential editing evaluation.
    Eval(EvalArgs),
    /// Measure per-edit insertion and inference time over 10 edits.
    BenchTime(BenchTimeArgs),
    /// Run the HTTP edit/query service.
    Serve(ServeArgs),
    /// Build or inspect memory snapshots.
    #[command(subcommand)]
    Snapshot(SnapshotCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Knowedit,
    Native,
}

impl From<FormatArg> for BenchmarkFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Knowedit => BenchmarkFormat::KnowEditJsonl,
            FormatArg::Native => BenchmarkFormat::NativeJsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmbedderArgs {
    #[arg(long, value_enum, default_value = "reference")]
    pub embedder: EmbedderKind,
    /// Reference embedder dimension.
    #[arg(long, default_value_t = 256)]
    pub embed_dim: usize,
    /// Reference embedder hash seed.
    #[arg(long, default_value_t = 0)]
    pub embed_seed: u64,
    /// Remote embedding service base URL.
    #[arg(long, required_if_eq("embedder", "remote"))]
    pub embed_url: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
}

impl EmbedderArgs {
    pub fn config(&self) -> EmbedderConfig {
        match self.embedder {
            EmbedderKind::Reference => EmbedderConfig::Reference(ReferenceEmbedderConfig {
                dim: self.embed_dim,
                seed: self.embed_seed,
            }),
            EmbedderKind::Remote => {
                let mut c = RemoteEmbedderConfig {
                    base_url: self.embed_url.clone().unwrap_or_default(),
                    ..Default::default()
                };
                if let Some(m) = &self.embed_model {
                    c.model = m.clone();
                }
                EmbedderConfig::Remote(c)
            }
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Chat-completion base URL, e.g. http://localhost:8000/v1.
    #[arg(long, required_if_eq("backend", "remote"))]
    pub backend_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 120.0)]
    pub timeout_secs: f64,
    /// Mock rule tables as JSON; defaults to a perfect oracle for the loaded
    /// benchmarks.
    #[arg(long)]
    pub mock_config: Option<PathBuf>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long, value_parser = ["all", "edited_only"])]
    pub noise_scope: Option<String>,
    #[arg(long)]
    pub mock_seed: Option<u64>,
}

impl BackendArgs {
    pub fn config(&self, benchmarks: &[Benchmark]) -> Result<BackendConfig> {
        Ok(match self.backend {
            BackendKind::Remote => {
                let mut c = ChatClientConfig {
                    base_url: self.backend_url.clone().unwrap_or_default(),
                    timeout_secs: self.timeout_secs,
                    ..Default::default()
                };
                if let Some(m) = &self.model {
                    c.model = m.clone();
                }
                BackendConfig::Remote(c)
            }
            BackendKind::Mock => {
                let mut c = match &self.mock_config {
                    Some(p) => {
                        let text = fs::read_to_string(p)
                            .with_context(|| format!("reading {}", p.display()))?;
                        serde_json::from_str::<MockOracleConfig>(&text)
                            .with_context(|| format!("parsing {}", p.display()))?
                    }
                    None => MockOracleConfig::perfect_for(benchmarks),
                };
                if let Some(r) = self.noise_rate {
                    c.noise_rate = r;
                }
                if let Some(s) = &self.noise_scope {
                    c.noise_scope = if s == "all" {
                        NoiseScope::All
                    } else {
                        NoiseScope::EditedOnly
                    };
                }
                if let Some(seed) = self.mock_seed {
                    c.rng_seed = seed;
                }
                BackendConfig::Mock(c)
            }
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    /// Benchmark JSONL file; repeat for several benchmarks.
    #[arg(long = "bench", required = true)]
    pub benches: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "knowedit")]
    pub format: FormatArg,
    /// Use only the first N records of each benchmark.
    #[arg(long)]
    pub limit: Option<usize>,
}

impl BenchArgs {
    pub fn load(&self) -> Result<Vec<Benchmark>> {
        self.benches
            .iter()
            .map(|p| {
                let b = load_benchmark(p, self.format.into())?;
                Ok(match self.limit {
                    Some(n) => b.truncated(n),
                    None => b,
                })
            })
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    /// Write the loaded records as native JSONL (single benchmark only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fill missing pre-edit answers with a baseline backend pass.
    #[arg(long)]
    pub fill_original: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

fn parse_threefold(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated probabilities".into()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Source {
    pub path: PathBuf,
    pub quota: Option<usize>,
}

fn parse_source(s: &str) -> Result<Source, String> {
    match s.rsplit_once('@') {
        Some((p, q)) if !p.is_empty() => {
            let quota = q
                .parse::<usize>()
                .map_err(|e| format!("quota `{q}`: {e}"))?;
            Ok(Source {
                path: p.into(),
                quota: Some(quota),
            })
        }
        _ => Ok(Source {
            path: s.into(),
            quota: None,
        }),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDataArgs {
    /// Source benchmark, optionally capped as PATH@N records.
    #[arg(long = "source", required = true, value_parser = parse_source)]
    pub sources: Vec<Source>,
    #[arg(long, value_enum, default_value = "native")]
    pub format: FormatArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Threefold branch probabilities: exact only, plus top-1, plus top-2.
    #[arg(long, default_value = "0.5,0.25,0.25", value_parser = parse_threefold)]
    pub threefold: (f64, f64, f64),
    /// Keep similar statements in rank order after the exact one.
    #[arg(long)]
    pub rank_order: bool,
    #[arg(long, default_value_t = 1)]
    pub pairs_per_record: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Single,
    Batch,
    Sequential,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => EvalMode::Single,
            ModeArg::Batch => EvalMode::Batch,
            ModeArg::Sequential => EvalMode::Sequential,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: ModeArg,
    /// Comma-separated sizes; defaults depend on the mode.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long = "match", default_value = "substring")]
    pub match_mode: String,
    #[arg(long, default_value = "gold")]
    pub locality_mode: String,
    /// Single mode: query without any Updated Information.
    #[arg(long)]
    pub plain: bool,
    #[arg(long)]
    pub eval_each_step: bool,
    #[arg(long, default_value_t = 0.5)]
    pub bigram_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    pub trigram_weight: f64,
    #[arg(long, default_value_t = 100)]
    pub max_new_tokens: u32,
    #[arg(long, default_value = "runs/eval")]
    pub out_dir: PathBuf,
    /// Write memory snapshots per size into the output directory.
    #[arg(long)]
    pub snapshots: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

impl EvalArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mode: EvalMode = self.mode.into();
        let cfg = RunConfig {
            mode,
            sizes: self.sizes.clone().unwrap_or_else(|| mode.default_sizes()),
            k: self.k,
            parallelism: self.parallelism,
            seed: self.seed,
            match_mode: self.match_mode.parse::<MatchMode>()?,
            locality_mode: self.locality_mode.parse::<LocalityMode>()?,
            plain_control: self.plain,
            eval_each_step: self.eval_each_step,
            fluency_weights: FluencyWeights::new(self.bigram_weight, self.trigram_weight)?,
            max_new_tokens: self.max_new_tokens,
            snapshot_dir: self.snapshots.then(|| self.out_dir.join("snapshots")),
            ..RunConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BenchTimeArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured listen address.
    #[arg(long)]
    pub listen: Option<std::net::SocketAddr>,
}

#[derive(Debug, Subcommand)]
pub enum SnapshotCommand {
    /// Insert every record's statement into a fresh bank and write it.
    Build {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
    /// Restore a snapshot and print its summary.
    Inspect {
        path: PathBuf,
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn bench_summary(benches: &[Benchmark], paths: &[PathBuf]) -> Vec<Value> {
    benches
        .iter()
        .zip(paths)
        .map(
            |(b, p)| json!({ "name": b.name, "path": p.display().to_string(), "records": b.len() }),
        )
        .collect()
}

fn ingest(args: IngestArgs) -> Result<()> {
    let mut benches = args.bench.load()?;
    if args.fill_original {
        let backend = args.backend.config(&benches)?.build()?;
        for b in &mut benches {
            let n = fill_original_answers(b, backend.as_ref(), &RunConfig::default())?;
            tracing::info!(benchmark = %b.name, filled = n, "baseline answers");
        }
    }
    let reports: Vec<Value> = benches
        .iter()
        .map(|b| json!({ "name": b.name, "report": validate(b) }))
        .collect();
    println!("{}", serde_json::to_string_pretty(&reports)?);
    if let Some(out) = &args.out {
        if benches.len() != 1 {
            bail!("--out needs exactly one --bench");
        }
        export_native(&benches[0], out)?;
    }
    Ok(())
}

fn build_data(args: BuildDataArgs) -> Result<()> {
    let mut benches = Vec::with_capacity(args.sources.len());
    for s in &args.sources {
        let b = load_benchmark(&s.path, args.format.into())?;
        benches.push(match s.quota {
            Some(q) => b.truncated(q),
            None => b,
        });
    }
    let (p1, p2, p3) = args.threefold;
    let threefold = ThreefoldConfig {
        rng_seed: args.seed,
        rank_order: args.rank_order,
        ..ThreefoldConfig::with_probabilities(p1, p2, p3)?
    };
    let cfg = BuildConfig {
        threefold,
        max_pairs_per_record: args.pairs_per_record,
        ..BuildConfig::default()
    };
    let embedder = args.embedder.config().build()?;
    let pool = SimilarityPool::from_benchmarks(&benches, embedder.clone())?;
    let dataset = build_dataset(&benches, &pool, &cfg)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let manifest = export_sft(&dataset, &cfg, &args.out)?;
    let run_manifest = json!({
        "command": "build-data",
        "args": args,
        "embedder": embedder.fingerprint(),
        "build_config": cfg,
        "export": manifest,
    });
    write_json(&args.out.with_extension("run.json"), &run_manifest)?;
    println!("{}", serde_json::to_string_pretty(&dataset.stats)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.run_config()?;
    let benches = args.bench.load()?;
    let backend_cfg = args.backend.config(&benches)?;
    let backend = backend_cfg.build()?;
    let embedder_cfg = args.embedder.config();

    let mut files = Vec::new();
    let mut fingerprint = Value::Null;
    let reports = match cfg.mode {
        EvalMode::Single => vec![eval_single(&benches, backend.as_ref(), &cfg)?],
        _ => {
            let embedder: Arc<dyn Embedder> = embedder_cfg.build()?;
            fingerprint = serde_json::to_value(embedder.fingerprint())?;
            eval_mass(&benches, backend.as_ref(), embedder, &cfg)?
        }
    };
    for r in &reports {
        let stem = match r.size {
            Some(n) => format!("report-{}-{n}", r.mode.as_str()),
            None => format!("report-{}", r.mode.as_str()),
        };
        let (json_path, txt_path) = write_report(r, &args.out_dir, &stem)?;
        print!("{}", fs::read_to_string(&txt_path)?);
        files.push(json!({ "json": json_path.display().to_string(), "text": txt_path.display().to_string() }));
    }
    let manifest = json!({
        "command": "eval",
        "args": args,
        "run_config": cfg,
        "benchmarks": bench_summary(&benches, &args.bench.benches),
        "backend": backend_cfg,
        "backend_id": backend.id(),
        "embedder": embedder_cfg,
        "embedder_fingerprint": fingerprint,
        "reports": files,
    });
    write_json(
        &args
            .out_dir
            .join(format!("manifest-{}.json", cfg.mode.as_str())),
        &manifest,
    )
}

fn bench_time(args: BenchTimeArgs) -> Result<()> {
    let benches = args.bench.load()?;
    if benches.len() != 1 {
        bail!("bench-time needs exactly one --bench");
    }
    let backend_cfg = args.backend.config(&benches)?;
    let backend = backend_cfg.build()?;
    let embedder = args.embedder.config().build()?;
    let cfg = RunConfig {
        k: args.k,
        ..RunConfig::default()
    };
    let timing = time_per_edit(&benches[0], backend.as_ref(), embedder, &cfg)?;
    println!(
        "Time per edit (edit / inference / total, s): {}",
        timing.display()
    );
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({ "command": "bench-time", "args": args, "backend": backend_cfg, "timing": timing }),
        )?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ServeConfig::load(p)?,
        None => ServeConfig::default(),
    };
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("building runtime")?;
    runtime.block_on(crate::service::serve(cfg))
}

fn snapshot(cmd: SnapshotCommand) -> Result<()> {
    match cmd {
        SnapshotCommand::Build {
            bench,
            out,
            embedder,
        } => {
            let benches = bench.load()?;
            let mut bank = MemoryBank::new(embedder.config().build()?);
            let descriptors = benches
                .iter()
                .flat_map(|b| b.records.iter().map(|r| r.descriptor.clone()))
                .collect();
            for p in bank.prepare_batch(descriptors)? {
                bank.commit(p)?;
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            bank.snapshot(&out)?;
            println!(
                "{}",
                json!({ "path": out.display().to_string(), "entries": bank.len() })
            );
        }
        SnapshotCommand::Inspect { path, embedder } => {
            let bank = MemoryBank::restore(&path, embedder.config().build()?)?;
            let summary = json!({
                "path": path.display().to_string(),
                "entries": bank.len(),
                "dim": bank.dim(),
                "embedder": bank.embedder().fingerprint(),
                "first_ids": bank.entries().iter().take(5).map(|e| e.entry_id).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::BuildData(a) => build_data(a),
        Command::Eval(a) => eval(a),
        Command::BenchTime(a) => bench_time(a),
        Command::Serve(a) => serve(a),
        Command::Snapshot(c) => snapshot(c),
    }
}
