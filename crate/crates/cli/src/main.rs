//! Command-line front end binding datasets, training, scoring and reporting
//! into reproducible experiments.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 training error,
//! 5 evaluation error.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use mirage_core::datasets::fetch::BenchmarkCorpus;
use mirage_core::datasets::OneClassSplit;
use mirage_core::scoring::{aggregate_benchmark, score_model, BenchmarkEntry};
use mirage_core::trainer::{self, train_run, RunRecord, TrainError};
use mirage_core::Real;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAINING: u8 = 4;
const EXIT_EVALUATION: u8 = 5;

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    source: anyhow::Error,
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

trait ExitCtx<T> {
    fn or_exit(self, code: u8) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ExitCtx<T> for std::result::Result<T, E> {
    fn or_exit(self, code: u8) -> CliResult<T> {
        self.map_err(|e| CliError {
            code,
            source: e.into(),
        })
    }
}

fn train_exit_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Data(_) => EXIT_DATA,
        TrainError::Config(_) => EXIT_CONFIG,
        _ => EXIT_TRAINING,
    }
}

#[derive(Parser)]
#[command(
    name = "mirage",
    version,
    about = "Reconstruction-based anomaly detection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override both the dataset and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel cells for benchmark sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite an existing run directory with the same config hash.
    #[arg(long, global = true)]
    force: bool,
    /// Disable the contextual adversarial mechanism (no second generator pass).
    #[arg(long = "no-adcon", global = true)]
    no_adcon: bool,
    /// Batch-norm strategy: shared, advprop, freeze or advprop+freeze.
    #[arg(long, global = true)]
    bn_strategy: Option<String>,
    /// Generator backbone: naive, skip or dense_skip.
    #[arg(long, global = true)]
    backbone: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save a one-class split manifest.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Manifest destination (default: <run_root>/split-...json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one experiment cell into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Existing manifest to train on instead of building one inline.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint against a split manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split manifest (default: rebuilt from the config's dataset block).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Experiment config (default: inferred from the run directory).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory (default: <run dir>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep (class, gamma, seed) cells and aggregate benchmark tables.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<u32>,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Aggregate completed run directories into benchmark tables.
    Report {
        /// Directory scanned recursively for run.json files.
        #[arg(long)]
        from: PathBuf,
        /// Table destination (default: the scanned directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download a benchmark corpus in its standard distribution format.
    Fetch {
        /// mnist, fashion_mnist, cifar10 or cifar100.
        corpus: String,
        #[arg(long, default_value = "data")]
        dest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Prepare { config, out } => cmd_prepare(cli, config, out.as_deref()),
        Command::Train {
            config,
            manifest,
            resume,
        } => cmd_train(cli, config, manifest.as_deref(), resume.as_deref()).map(|_| ()),
        Command::Evaluate {
            checkpoint,
            manifest,
            config,
            out,
        } => cmd_evaluate(checkpoint, manifest.as_deref(), config.as_deref(), out.as_deref()),
        Command::Benchmark {
            config,
            classes,
            gammas,
            seeds,
        } => cmd_benchmark(cli, config, classes, gammas, seeds),
        Command::Report { from, out } => cmd_report(from, out.as_deref()),
        Command::Fetch { corpus, dest } => cmd_fetch(corpus, dest),
    }
}

/// Loads the config and applies the global flag overrides.
fn load_config(cli: &Cli, path: &Path) -> CliResult<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).or_exit(EXIT_CONFIG)?;
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
        config.train.seed = seed;
    }
    if cli.no_adcon {
        config.train.adcon_enabled = false;
    }
    if let Some(s) = &cli.bn_strategy {
        config.train.bn_strategy = s
            .parse()
            .map_err(|e: String| anyhow!(e))
            .or_exit(EXIT_CONFIG)?;
    }
    if let Some(b) = &cli.backbone {
        config.train.backbone.backbone = b
            .parse()
            .map_err(|e: String| anyhow!(e))
            .or_exit(EXIT_CONFIG)?;
    }
    Ok(config)
}

fn cmd_prepare(cli: &Cli, config_path: &Path, out: Option<&Path>) -> CliResult {
    let config = load_config(cli, config_path)?;
    let corpus = config.load_corpus().or_exit(EXIT_DATA)?;
    let split = config.build_split(&corpus).or_exit(EXIT_DATA)?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&config.output.run_root).or_exit(EXIT_DATA)?;
            config.output.run_root.join(format!(
                "split-c{}-g{}-s{}.json",
                split.normal_class, split.gamma, split.seed
            ))
        }
    };
    split.save(&out_path).or_exit(EXIT_DATA)?;
    println!(
        "manifest {}\n  normals {}  anomalies {}  test {}\n  gamma requested {}  achieved {:.6}",
        out_path.display(),
        split.train_normals.len(),
        split.train_anomalies.len(),
        split.test.len(),
        split.gamma,
        split.achieved_gamma(),
    );
    Ok(())
}

/// Trains one cell; returns the run directory and its record.
fn cmd_train(
    cli: &Cli,
    config_path: &Path,
    manifest: Option<&Path>,
    resume: Option<&Path>,
) -> CliResult<(PathBuf, RunRecord)> {
    let config = load_config(cli, config_path)?;
    let corpus = config.load_corpus().or_exit(EXIT_DATA)?;
    let split = match manifest {
        Some(path) => OneClassSplit::load(path).or_exit(EXIT_DATA)?,
        None => config.build_split(&corpus).or_exit(EXIT_DATA)?,
    };
    let resolved = ExperimentConfig {
        train: config.resolved_train(&corpus),
        ..config.clone()
    };
    let run_dir = run_dir_for(&resolved, &split);
    prepare_run_dir(&run_dir, cli.force)?;
    write_config_snapshot(&run_dir, &resolved)?;
    let record = train_run::<Real>(&corpus, &split, &resolved.train, &run_dir, resume)
        .map_err(|e| CliError {
            code: train_exit_code(&e),
            source: anyhow!("{e} (run dir {})", run_dir.display()),
        })?;
    println!(
        "run {}\n  final AUROC {:.4}  best AUROC {:.4} (epoch {})",
        run_dir.display(),
        record.final_auroc,
        record.best_auroc,
        record.best_epoch
    );
    Ok((run_dir, record))
}

fn run_dir_for(resolved: &ExperimentConfig, split: &OneClassSplit) -> PathBuf {
    resolved.output.run_root.join(format!(
        "c{}-g{}-s{}-{}",
        split.normal_class,
        split.gamma,
        resolved.train.seed,
        resolved.hash()
    ))
}

/// Run directories are append-only: an existing directory is refused unless
/// forced.
fn prepare_run_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        if !force {
            return Err(CliError {
                code: EXIT_CONFIG,
                source: anyhow!(
                    "run directory {} already exists; pass --force to overwrite",
                    dir.display()
                ),
            });
        }
        std::fs::remove_dir_all(dir).or_exit(EXIT_DATA)?;
    }
    std::fs::create_dir_all(dir).or_exit(EXIT_DATA)?;
    Ok(())
}

fn write_config_snapshot(dir: &Path, config: &ExperimentConfig) -> CliResult {
    let json = serde_json::to_string_pretty(config).or_exit(EXIT_CONFIG)?;
    std::fs::write(dir.join("config.json"), json).or_exit(EXIT_DATA)?;
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    manifest: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> CliResult {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => infer_config_path(checkpoint).or_exit(EXIT_CONFIG)?,
    };
    let config = ExperimentConfig::load(&config_path).or_exit(EXIT_CONFIG)?;
    let corpus = config.load_corpus().or_exit(EXIT_DATA)?;
    // without a manifest the split is rebuilt from the config snapshot, so a
    // run directory can be re-evaluated from its own contents
    let split = match manifest {
        Some(path) => OneClassSplit::load(path).or_exit(EXIT_DATA)?,
        None => config.build_split(&corpus).or_exit(EXIT_DATA)?,
    };
    let report = score_model::<Real>(checkpoint, &corpus, &split, config.output.eval_batch)
        .or_exit(EXIT_EVALUATION)?;
    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .and_then(|p| p.parent())
            .map(|p| p.join("eval"))
            .unwrap_or_else(|| PathBuf::from("eval")),
    };
    std::fs::create_dir_all(&out_dir).or_exit(EXIT_DATA)?;
    report
        .save_json(&out_dir.join("report.json"))
        .or_exit(EXIT_EVALUATION)?;
    if config.output.export_csv {
        report
            .save_csv(&out_dir.join("report.csv"))
            .or_exit(EXIT_EVALUATION)?;
    }
    println!(
        "AUROC {:.6} over {} examples -> {}",
        report.auroc,
        report.scores.len(),
        out_dir.display()
    );
    Ok(())
}

/// `<run dir>/checkpoints/<name>` is the expected checkpoint layout.
fn infer_config_path(checkpoint: &Path) -> Result<PathBuf> {
    let run_dir = checkpoint
        .parent()
        .and_then(|p| p.parent())
        .ok_or_else(|| anyhow!("cannot infer the run directory from {}", checkpoint.display()))?;
    let candidate = run_dir.join("config.json");
    if !candidate.exists() {
        bail!(
            "no config.json under {}; pass --config explicitly",
            run_dir.display()
        );
    }
    Ok(candidate)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellResult {
    class: u32,
    gamma: f64,
    seed: u64,
    dir: PathBuf,
    auroc: Option<f64>,
    error: Option<String>,
    skipped: bool,
}

fn cmd_benchmark(
    cli: &Cli,
    config_path: &Path,
    classes: &[u32],
    gammas: &[f64],
    seeds: &[u64],
) -> CliResult {
    let base = load_config(cli, config_path)?;
    if classes.is_empty() || gammas.is_empty() || seeds.is_empty() {
        return Err(CliError {
            code: EXIT_CONFIG,
            source: anyhow!("benchmark needs non-empty --classes, --gammas and --seeds"),
        });
    }
    let bench_root = base.output.run_root.join(format!("bench-{}", base.hash()));
    std::fs::create_dir_all(&bench_root).or_exit(EXIT_DATA)?;

    // every (class, gamma, seed) cell is an independent experiment
    let mut cells = Vec::new();
    for &class in classes {
        for &gamma in gammas {
            for &seed in seeds {
                let mut cell = base.clone();
                cell.dataset.normal_class = Some(class);
                cell.dataset.gamma = gamma;
                cell.dataset.seed = seed;
                cell.train.seed = seed;
                let dir = bench_root.join(format!("c{class}-g{gamma}/seed-{seed}"));
                cells.push((class, gamma, seed, cell, dir));
            }
        }
    }

    let queue: Mutex<Vec<_>> = Mutex::new(cells.into_iter().rev().collect());
    let results: Mutex<Vec<CellResult>> = Mutex::new(Vec::new());
    let force = cli.force;
    let jobs = cli.jobs.max(1);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let Some((class, gamma, seed, cell, dir)) = queue.lock().unwrap().pop() else {
                    break;
                };
                let result = run_benchmark_cell(class, gamma, seed, &cell, &dir, force);
                results.lock().unwrap().push(result);
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by(|a, b| {
        (a.class, a.seed)
            .cmp(&(b.class, b.seed))
            .then(a.gamma.partial_cmp(&b.gamma).unwrap())
    });
    std::fs::write(
        bench_root.join("benchmark.json"),
        serde_json::to_string_pretty(&results).or_exit(EXIT_DATA)?,
    )
    .or_exit(EXIT_DATA)?;

    // combined per-cell CSV plus one table per gamma
    let mut combined = String::from("class,gamma,seed,auroc\n");
    for r in &results {
        combined.push_str(&format!(
            "{},{},{},{}\n",
            r.class,
            r.gamma,
            r.seed,
            r.auroc.map(|a| a.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(bench_root.join("combined.csv"), combined).or_exit(EXIT_DATA)?;

    let mut any_failed = false;
    for &gamma in gammas {
        let entries: Vec<BenchmarkEntry> = results
            .iter()
            .filter(|r| r.gamma == gamma && r.auroc.is_some())
            .map(|r| BenchmarkEntry {
                class: r.class,
                seed: r.seed,
                auroc: r.auroc.unwrap(),
            })
            .collect();
        let complete = results
            .iter()
            .filter(|r| r.gamma == gamma)
            .all(|r| r.auroc.is_some());
        if !complete {
            any_failed = true;
            eprintln!("gamma {gamma}: incomplete cells, table skipped");
            continue;
        }
        let table = aggregate_benchmark(&entries).or_exit(EXIT_DATA)?;
        let tag = format!("table-g{gamma}");
        table
            .save(
                &bench_root.join(format!("{tag}.csv")),
                &bench_root.join(format!("{tag}.txt")),
            )
            .or_exit(EXIT_DATA)?;
        println!("gamma {gamma}\n{}", table.to_text());
    }
    println!("benchmark artifacts in {}", bench_root.display());
    if any_failed {
        return Err(CliError {
            code: EXIT_TRAINING,
            source: anyhow!("one or more benchmark cells failed; see benchmark.json"),
        });
    }
    Ok(())
}

fn run_benchmark_cell(
    class: u32,
    gamma: f64,
    seed: u64,
    cell: &ExperimentConfig,
    dir: &Path,
    force: bool,
) -> CellResult {
    let mut result = CellResult {
        class,
        gamma,
        seed,
        dir: dir.to_path_buf(),
        auroc: None,
        error: None,
        skipped: false,
    };
    // idempotent resume: a finished cell with the same config hash is reused
    if !force {
        if let Ok(record) = RunRecord::load(&dir.join(trainer::RUN_RECORD_FILE)) {
            if let Ok(snapshot) = ExperimentConfig::load(&dir.join("config.json")) {
                if snapshot.hash() == resolve_cell_hash(cell) {
                    result.auroc = Some(record.final_auroc);
                    result.skipped = true;
                    return result;
                }
            }
        }
    }
    match train_cell(cell, dir, force) {
        Ok(record) => result.auroc = Some(record.final_auroc),
        Err(e) => result.error = Some(format!("{:#}", e.source)),
    }
    result
}

/// Hash of the cell config after channel resolution, matching the snapshot.
fn resolve_cell_hash(cell: &ExperimentConfig) -> String {
    match cell.load_corpus() {
        Ok(corpus) => ExperimentConfig {
            train: cell.resolved_train(&corpus),
            ..cell.clone()
        }
        .hash(),
        Err(_) => cell.hash(),
    }
}

fn train_cell(cell: &ExperimentConfig, dir: &Path, force: bool) -> CliResult<RunRecord> {
    let corpus = cell.load_corpus().or_exit(EXIT_DATA)?;
    let split = cell.build_split(&corpus).or_exit(EXIT_DATA)?;
    let resolved = ExperimentConfig {
        train: cell.resolved_train(&corpus),
        ..cell.clone()
    };
    if dir.exists() && force {
        std::fs::remove_dir_all(dir).or_exit(EXIT_DATA)?;
    }
    std::fs::create_dir_all(dir).or_exit(EXIT_DATA)?;
    write_config_snapshot(dir, &resolved)?;
    train_run::<Real>(&corpus, &split, &resolved.train, dir, None).map_err(|e| CliError {
        code: train_exit_code(&e),
        source: anyhow!("{e}"),
    })
}

fn cmd_report(from: &Path, out: Option<&Path>) -> CliResult {
    let mut runs = Vec::new();
    collect_runs(from, &mut runs).or_exit(EXIT_DATA)?;
    if runs.is_empty() {
        return Err(CliError {
            code: EXIT_DATA,
            source: anyhow!("no run.json files under {}", from.display()),
        });
    }
    let mut by_gamma: BTreeMap<String, Vec<BenchmarkEntry>> = BTreeMap::new();
    for (config, record) in &runs {
        by_gamma
            .entry(format!("{}", config.dataset.gamma))
            .or_default()
            .push(BenchmarkEntry {
                class: config.dataset.normal_class.unwrap_or_default(),
                seed: record.seed,
                auroc: record.final_auroc,
            });
    }
    let out_dir = out.unwrap_or(from);
    std::fs::create_dir_all(out_dir).or_exit(EXIT_DATA)?;
    for (gamma, entries) in &by_gamma {
        let table = aggregate_benchmark(entries).or_exit(EXIT_DATA)?;
        let tag = format!("table-g{gamma}");
        table
            .save(
                &out_dir.join(format!("{tag}.csv")),
                &out_dir.join(format!("{tag}.txt")),
            )
            .or_exit(EXIT_DATA)?;
        println!("gamma {gamma}\n{}", table.to_text());
    }
    Ok(())
}

fn collect_runs(dir: &Path, out: &mut Vec<(ExperimentConfig, RunRecord)>) -> Result<()> {
    let record_path = dir.join(trainer::RUN_RECORD_FILE);
    if record_path.exists() {
        let record = RunRecord::load(&record_path)
            .map_err(|e| anyhow!("{}: {e}", record_path.display()))?;
        let config = ExperimentConfig::load(&dir.join("config.json"))
            .with_context(|| format!("config snapshot for {}", dir.display()))?;
        out.push((config, record));
        return Ok(());
    }
    if dir.is_dir() {
        let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        for child in children {
            collect_runs(&child, out)?;
        }
    }
    Ok(())
}

fn cmd_fetch(corpus: &str, dest: &Path) -> CliResult {
    let corpus: BenchmarkCorpus = corpus
        .parse()
        .map_err(|e: String| anyhow!(e))
        .or_exit(EXIT_CONFIG)?;
    let dir = corpus.fetch(dest).or_exit(EXIT_DATA)?;
    println!("corpus ready under {}", dir.display());
    Ok(())
}
