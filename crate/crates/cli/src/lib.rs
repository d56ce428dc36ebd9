//! Batch commands behind the `gmn` binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gmn_core::config::{Task, TrainConfig};
use gmn_core::dataset::load_dataset;
use gmn_core::graph::Labels;
use gmn_core::harness::{self, BenchOptions, Fixture, WlReport};
use gmn_core::model::{GmnModel, PreparedGraph, Target};
use gmn_core::tokenizer::{tokenize_graph, TokenCache};
use gmn_core::train::{
    self, evaluate, infer_dims, metrics_csv, model_grad_check, split_dataset, Checkpoint,
    GradCheckOptions, GradCheckReport, MetricRow,
};
use gmn_core::{GmnError, Graph, Matrix};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "gmn", version, about = "Graph Mamba Network tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample walk tokens for a dataset and write the token cache.
    Tokenize(IoArgs),
    /// Train a model; writes checkpoint.json and metrics.csv into --out.
    Train {
        #[command(flatten)]
        io: IoArgs,
        /// Token cache to reuse when its key matches the dataset.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time tokenization plus one forward pass on random regular graphs.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Sizes below this are reported but left out of the scaling fit.
        #[arg(long, default_value_t = 256)]
        warmup_below: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare built-in graph pairs under 1-WL and walk-token signatures.
    WlCheck {
        /// a, b, triangle or all.
        #[arg(long, default_value = "all")]
        fixture: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every gradient on a 5-node graph.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GmnError),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 0 success, 1 validation, 2 numerical, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(GmnError::Io { .. }) => 3,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(_) => 1,
            CliError::Check(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| GmnError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| {
        GmnError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

pub fn cmd_tokenize(cfg: &TrainConfig, data: &Path, out: &Path) -> CliResult<TokenCache> {
    let graphs = load_dataset(data)?;
    let cache = TokenCache::build(&graphs, &cfg.tokenizer_params())?;
    write(out, &serde_json::to_string(&cache).expect("cache serializes"))?;
    Ok(cache)
}

pub fn read_token_cache(path: &Path) -> CliResult<TokenCache> {
    let text = std::fs::read_to_string(path).map_err(|source| GmnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| GmnError::Parse(format!("token cache: {e}")).into())
}

pub struct TrainRun {
    pub outcome: train::TrainOutcome,
    pub used_cache: bool,
}

/// Trains and writes `checkpoint.json` and `metrics.csv` into `out_dir`.
pub fn cmd_train(
    cfg: &TrainConfig,
    data: &Path,
    out_dir: &Path,
    tokens: Option<&Path>,
) -> CliResult<TrainRun> {
    cfg.validate()?;
    let graphs = load_dataset(data)?;
    let mut used_cache = false;
    let outcome = match tokens {
        Some(p) => {
            let cache = read_token_cache(p)?;
            if cache.matches(&graphs, &cfg.tokenizer_params()) {
                used_cache = true;
                train::train_with_tokens(&graphs, cfg, cache.graphs)?
            } else {
                train::train(&graphs, cfg)?
            }
        }
        None => train::train(&graphs, cfg)?,
    };
    write(&out_dir.join("metrics.csv"), &metrics_csv(&outcome.history))?;
    Checkpoint::from_model(&outcome.model).save(&out_dir.join("checkpoint.json"))?;
    Ok(TrainRun {
        outcome,
        used_cache,
    })
}

/// Loss and metric of a checkpoint on the train split, the validation split
/// and every labeled example.
pub fn cmd_eval(checkpoint: &Path, data: &Path) -> CliResult<Vec<MetricRow>> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let cfg = &model.config;
    let graphs = load_dataset(data)?;
    let dims = infer_dims(&graphs, cfg)?;
    if dims.in_features != model.dims.in_features {
        return Err(GmnError::Config("dataset features do not match the checkpoint".into()).into());
    }
    let tokens = train::tokenize_dataset(&graphs, cfg, cfg.seed)?;
    let prepared = train::prepare_all(&model, &graphs, &tokens)?;
    let split = split_dataset(&graphs, cfg)?;
    let all: Vec<(usize, usize)> = split.train.iter().chain(&split.val).copied().collect();
    let mut rows = Vec::new();
    for (name, members) in [("train", &split.train), ("val", &split.val), ("all", &all)] {
        let targets = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| targets_of(g, cfg.task, i, members))
            .collect::<CliResult<Vec<_>>>()?;
        if let Some((loss, metric)) = evaluate(&model, &prepared, &targets)? {
            rows.push(MetricRow {
                epoch: cfg.epochs,
                split: name.to_string(),
                loss,
                metric,
            });
        }
    }
    Ok(rows)
}

fn targets_of(g: &Graph, task: Task, i: usize, members: &[(usize, usize)]) -> CliResult<Option<Target>> {
    let nodes: Vec<usize> = members.iter().filter(|m| m.0 == i).map(|m| m.1).collect();
    if nodes.is_empty() {
        return Ok(None);
    }
    let bad = || CliError::from(GmnError::Labels(format!("graph {i} labels do not fit the task")));
    Ok(Some(match (task, g.labels()) {
        (Task::GraphReg, Some(Labels::Graph(y))) => Target::Values(Arc::new(Matrix::filled(1, 1, *y))),
        (Task::GraphClass, Some(Labels::Graph(y))) => Target::Classes(Arc::new(vec![(0, *y as usize)])),
        (Task::NodeClass, Some(Labels::Nodes(l))) => {
            Target::Classes(Arc::new(nodes.iter().map(|&v| (v, l[v] as usize)).collect()))
        }
        _ => return Err(bad()),
    }))
}

pub fn cmd_bench(cfg: &TrainConfig, sizes: &[usize], opts: &BenchOptions) -> CliResult<Vec<harness::BenchRow>> {
    Ok(harness::bench(cfg, sizes, opts)?)
}

pub fn parse_fixtures(name: &str) -> CliResult<Vec<Fixture>> {
    if name.eq_ignore_ascii_case("all") {
        return Ok(vec![Fixture::A, Fixture::B, Fixture::TriangleVsPath]);
    }
    Ok(vec![name.parse()?])
}

pub fn cmd_wl_check(fixtures: &[Fixture], seed: u64) -> CliResult<Vec<WlReport>> {
    Ok(fixtures
        .iter()
        .map(|&f| harness::wl_check(f, seed))
        .collect::<Result<Vec<_>, _>>()?)
}

/// The 5-node "house": a 4-cycle with a roof node on one edge.
pub fn grad_check_graph(task: Task) -> Graph {
    let g = Graph::new(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)]).expect("fixture");
    let labels = match task {
        Task::NodeClass => Labels::Nodes(vec![0, 1, 0, 1, 1]),
        Task::GraphClass => Labels::Graph(1.0),
        Task::GraphReg => Labels::Graph(0.75),
    };
    g.with_labels(labels).expect("fixture labels")
}

pub fn cmd_grad_check(cfg: &TrainConfig) -> CliResult<GradCheckReport> {
    cfg.validate()?;
    let g = grad_check_graph(cfg.task);
    let graphs = std::slice::from_ref(&g);
    let dims = infer_dims(graphs, cfg)?;
    let model = GmnModel::new(cfg.clone(), dims)?;
    let tokens = tokenize_graph(&g, &cfg.tokenizer_params())?;
    let pg = PreparedGraph::new(&model, &g, &tokens)?;
    let all: Vec<(usize, usize)> = (0..g.num_nodes()).map(|v| (0, v)).collect();
    let members = if cfg.task.is_graph_level() { &all[..1] } else { &all[..] };
    let target = targets_of(&g, cfg.task, 0, members)?.expect("fixture is labeled");
    let opts = GradCheckOptions {
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    Ok(model_grad_check(&model, &pg, &target, &opts)?)
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Tokenize(io) => {
            let cfg = load_config(io.config.as_deref(), io.seed)?;
            let cache = cmd_tokenize(&cfg, &io.data, &io.out)?;
            let records: usize = cache.graphs.iter().flatten().map(|s| s.tokens.len()).sum();
            println!("tokenized {} graphs, {records} token records", cache.graphs.len());
        }
        Command::Train { io, tokens } => {
            let cfg = load_config(io.config.as_deref(), io.seed)?;
            for note in cfg.off_grid() {
                eprintln!("note: {note}");
            }
            let run = cmd_train(&cfg, &io.data, &io.out, tokens.as_deref())?;
            if tokens.is_some() && !run.used_cache {
                eprintln!("note: token cache key did not match; tokens were resampled");
            }
            for row in run.outcome.history.iter().rev().take(2).rev() {
                println!("epoch {} {}: loss {:.6} metric {:.4}", row.epoch, row.split, row.loss, row.metric);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let rows = cmd_eval(&checkpoint, &data)?;
            let csv = metrics_csv(&rows);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Bench {
            config,
            sizes,
            repeats,
            warmup_below,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let opts = BenchOptions {
                repeats,
                warmup_below,
                seed: cfg.seed,
                ..BenchOptions::default()
            };
            let rows = cmd_bench(&cfg, &sizes, &opts)?;
            let csv = harness::bench_csv(&rows);
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
            for (n, r) in harness::doubling_ratios(&rows) {
                println!("doubling to n={n}: ratio {r:.3}");
            }
        }
        Command::WlCheck { fixture, out, seed } => {
            let reports = cmd_wl_check(&parse_fixtures(&fixture)?, seed)?;
            for r in &reports {
                println!("{:?}: {} [{}]", r.fixture, r.summary(), if r.passed() { "PASS" } else { "FAIL" });
            }
            if let Some(p) = out {
                write(&p, &serde_json::to_string_pretty(&reports).expect("report serializes"))?;
            }
            if reports.iter().any(|r| !r.passed()) {
                return Err(CliError::Check("wl-check fixture failed".into()));
            }
        }
        Command::GradCheck { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let report = cmd_grad_check(&cfg)?;
            for p in &report.params {
                println!("{:<32} {:>6} coords  max rel-err {:.3e}", p.name, p.checked, p.max_rel_err);
            }
            if let Some(p) = out {
                write(&p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            }
            if !report.passed() {
                return Err(CliError::Check(format!(
                    "{} coordinates exceed rel-err {:e}",
                    report.failures.len(),
                    report.tolerance
                )));
            }
            println!("all {} coordinates within {:e}", report.coords_checked(), report.tolerance);
        }
    }
    Ok(())
}

/// Sizes the global thread pool from `GMN_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("GMN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| GmnError::Config(format!("GMN_THREADS={v:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| GmnError::Config(format!("thread pool: {e}")))?;
    Ok(())
}
