//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use capital::backend::ResponseCache;
use capital::config::{BackendKind, ConfigError, RunConfig};
use capital::estimator::Pipeline;
use capital::eval::{build_training_store, load_dataset, run_evaluation, EvalOptions, Method};
use capital::model::Ablation;
use capital::prompting::Prompter;
use capital::retrieval::{load_store_jsonl, save_store_jsonl, DemoStore};
use capital::scm::{sweep, Cards, SweepParams};
use clap::{Args, Parser, Subcommand};

const DEFAULT_CACHE_DIR: &str = ".capital-cache";

#[derive(Parser)]
#[command(name = "capital", version, about = "Front-door adjusted CoT prompting for implicit sentiment analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a method over a dataset and write a report.
    Run(RunArgs),
    /// Generate wrong/correct CoT pairs for a training set.
    BuildStore(BuildStoreArgs),
    /// Sweep synthetic causal models and write CSV.
    Simulate(SimulateArgs),
    /// Inspect or clear the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

/// Settings shared by commands that call a backend. Flags override the
/// config file, which overrides the defaults.
#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `scripted` or `openai`.
    #[arg(long)]
    backend: Option<String>,
    /// Script file for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Chat endpoint base URL (openai backend).
    #[arg(long)]
    base_url: Option<String>,
    /// Chat model name (openai backend).
    #[arg(long)]
    model: Option<String>,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// CoT samples per item (A).
    #[arg(long)]
    samples: Option<usize>,
    /// Parallel workers.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset JSONL with {id, text, aspect, label, slice}.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `capital`, `cot-sc` or `icl`.
    #[arg(long, default_value = "capital")]
    method: Method,
    /// Ablation flag; repeatable (nwgm-reverse, nwgm-random, no-kmeans, no-weighting).
    #[arg(long)]
    ablation: Vec<Ablation>,
    /// Demonstration store JSONL.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Clusters (K).
    #[arg(long)]
    clusters: Option<usize>,
    /// Stage-2 queries per cluster (N).
    #[arg(long)]
    queries: Option<usize>,
    /// Stage-1 demonstrations (R).
    #[arg(long)]
    demos_r: Option<usize>,
    /// Revision demonstrations (L).
    #[arg(long)]
    demos_l: Option<usize>,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the text table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct BuildStoreArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset JSONL.
    #[arg(long)]
    train: PathBuf,
    /// Output store JSONL.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Seeds per strength level.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Comma-separated confounding strengths.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,1")]
    strengths: Vec<f64>,
    /// Cardinalities |Z|,|X|,|T|,|Y|.
    #[arg(long, value_delimiter = ',', default_value = "3,3,3,3")]
    cards: Vec<usize>,
    /// Stage-1 draws per estimate.
    #[arg(short, long, default_value_t = 20)]
    a: usize,
    /// Stage-2 draws per distinct mediator value.
    #[arg(short, long, default_value_t = 5)]
    n: usize,
    /// CSV path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CacheAction {
    /// Print entry count and size.
    Stats(CacheArgs),
    /// Delete every entry.
    Clear(CacheArgs),
}

#[derive(Args)]
struct CacheArgs {
    /// Cache directory (defaults to the config's cache_dir, then .capital-cache).
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse(_) | ConfigError::Invalid(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(kind) = &common.backend {
        cfg.backend.kind = match kind.as_str() {
            "scripted" => BackendKind::Scripted,
            "openai" => BackendKind::Openai,
            other => return Err(Failure::Usage(format!("--backend must be scripted or openai, got {other:?}"))),
        };
    }
    if common.script.is_some() {
        cfg.backend.script.clone_from(&common.script);
    }
    if let Some(url) = &common.base_url {
        cfg.backend.base_url.clone_from(url);
    }
    if let Some(model) = &common.model {
        cfg.backend.model.clone_from(model);
    }
    if common.cache_dir.is_some() {
        cfg.cache_dir.clone_from(&common.cache_dir);
    }
    if common.templates.is_some() {
        cfg.templates_dir.clone_from(&common.templates);
    }
    if let Some(seed) = common.seed {
        cfg.pipeline.rng_seed = seed;
    }
    if let Some(a) = common.samples {
        cfg.pipeline.cot_samples_a = a;
    }
    if let Some(p) = common.parallelism {
        cfg.parallelism = p;
    }
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| runtime(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout().write_all(contents.as_bytes()).map_err(runtime),
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Failure> {
    let mut cfg = load_config(&args.common)?;
    if args.dataset.is_some() {
        cfg.dataset.clone_from(&args.dataset);
    }
    if args.store.is_some() {
        cfg.store.clone_from(&args.store);
    }
    if !args.ablation.is_empty() {
        cfg.pipeline.ablations.clone_from(&args.ablation);
    }
    let p = &mut cfg.pipeline;
    for (flag, slot) in [
        (args.clusters, &mut p.clusters_k),
        (args.queries, &mut p.revision_queries_n),
        (args.demos_r, &mut p.demos_r),
        (args.demos_l, &mut p.revision_demos_l),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let dataset_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Failure::Usage("no dataset given: pass --dataset <PATH> or set `dataset` in the config".into()))?;
    if !dataset_path.is_file() {
        return Err(Failure::Usage(format!("--dataset {} does not exist", dataset_path.display())));
    }
    cfg.validate()?;

    let scheme = cfg.pipeline.label_scheme;
    let dataset = load_dataset(&dataset_path, scheme).map_err(|e| runtime(format!("{}: {e}", dataset_path.display())))?;
    let encoder = cfg.build_encoder()?;
    let demos = match &cfg.store {
        Some(path) => load_store_jsonl(path, scheme).map_err(runtime)?,
        None => Vec::new(),
    };
    let store = DemoStore::index(demos, encoder.as_ref()).map_err(runtime)?;
    let backend = cfg.build_backend()?;
    let prompter = Prompter::new(cfg.templates()?, scheme);
    let pipeline = Pipeline {
        config: &cfg.pipeline,
        prompter: &prompter,
        store: &store,
        backend: backend.as_ref(),
        encoder: encoder.as_ref(),
    };

    let cancel = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&cancel);
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupt: finishing in-flight items, then writing a partial report");
        flag.store(true, Ordering::SeqCst);
    }) {
        tracing::warn!("cannot install Ctrl-C handler: {e}");
    }
    let progress = |done: usize, total: usize, id: &str| eprintln!("[{done}/{total}] {id}");
    let mut echo = serde_json::to_value(&cfg).map_err(runtime)?;
    echo["method"] = serde_json::Value::String(args.method.as_str().into());
    let options = EvalOptions {
        parallelism: cfg.parallelism,
        cancel: Some(&cancel),
        progress: Some(&progress),
        config_echo: echo,
    };
    let report = run_evaluation(&dataset, args.method, &pipeline, &options).map_err(runtime)?;

    write_or_print(args.output.as_deref(), &report.to_json())?;
    let table = report.text_table();
    match &args.table {
        Some(path) => fs::write(path, &table).map_err(runtime)?,
        None => eprint!("{table}"),
    }
    Ok(if report.failed > 0 || report.incomplete {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_build_store(args: BuildStoreArgs) -> Result<ExitCode, Failure> {
    let mut cfg = load_config(&args.common)?;
    // Clustering plays no part here, so a small --samples must not trip K <= A.
    cfg.pipeline.clusters_k = cfg.pipeline.clusters_k.min(cfg.pipeline.cot_samples_a);
    cfg.validate()?;
    let scheme = cfg.pipeline.label_scheme;
    let items = load_dataset(&args.train, scheme).map_err(|e| runtime(format!("{}: {e}", args.train.display())))?;
    let backend = cfg.build_backend()?;
    let prompter = Prompter::new(cfg.templates()?, scheme);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(runtime)?;
    let (demos, summary) = pool.install(|| {
        build_training_store(
            &items,
            &prompter,
            backend.as_ref(),
            cfg.pipeline.cot_samples_a,
            cfg.pipeline.sampling_temperature,
            cfg.pipeline.max_tokens,
        )
    });
    save_store_jsonl(&demos, &args.output).map_err(runtime)?;
    println!(
        "items: {}  kept: {}  dropped (no wrong CoT): {}  dropped (no correct CoT): {}  failed: {}  backend calls: {}",
        summary.items,
        summary.kept,
        summary.dropped_no_wrong,
        summary.dropped_no_correct,
        summary.failed,
        summary.backend_calls
    );
    Ok(if summary.failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Failure> {
    let [z, x, t, y] = args.cards[..] else {
        return Err(Failure::Usage("--cards needs four values: z,x,t,y".into()));
    };
    if args.a == 0 || args.n == 0 {
        return Err(Failure::Usage("-a and -n must be at least 1".into()));
    }
    let params = SweepParams {
        cards: Cards::new(z, x, t, y),
        seeds: args.seeds,
        strengths: args.strengths,
        a: args.a,
        n: args.n,
    };
    let rows = sweep(&params).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        writer.serialize(row).map_err(runtime)?;
    }
    let bytes = writer.into_inner().map_err(runtime)?;
    write_or_print(args.output.as_deref(), &String::from_utf8(bytes).map_err(runtime)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_cache(action: CacheAction) -> Result<ExitCode, Failure> {
    let (args, clear) = match action {
        CacheAction::Stats(a) => (a, false),
        CacheAction::Clear(a) => (a, true),
    };
    let from_config = match &args.config {
        Some(path) => RunConfig::load(path)?.cache_dir,
        None => None,
    };
    let dir = args
        .dir
        .or(from_config)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));
    let cache = ResponseCache::open(&dir).map_err(runtime)?;
    if clear {
        let removed = cache.clear().map_err(runtime)?;
        println!("removed {removed} entries from {}", dir.display());
    } else {
        let stats = cache.stats().map_err(runtime)?;
        println!("{}: {} entries, {} bytes", dir.display(), stats.entries, stats.bytes);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::BuildStore(args) => cmd_build_store(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Cache { action } => cmd_cache(action),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
