//! `psca`: dataset generation, experiment grids, detector training and
//! result summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};

use psca_core::dataset::{load_dataset, save_dataset};
use psca_core::harness::{self, ExperimentGrid, Family, MethodId, Sweep, METHODS};
use psca_core::sysmodel::generate_dataset;
use psca_core::unroll::{dataset_fingerprint, train, TrainBudget, TrainedModel, UnrolledConfig};
use psca_core::{Sample, SystemConfig};

#[derive(Parser)]
#[command(name = "psca", version, about = "Covariance-based device activity detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded scene dataset as binary tensors plus a manifest.
    GenData(GenData),
    /// Run methods over a parameter sweep and write one CSV row per method, point and seed.
    Run(Run),
    /// Train an unrolled detector and save it as JSON.
    TrainNet(TrainNet),
    /// Summarize a results CSV.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// System configuration JSON; defaults to the desk-scale scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: u64,
    /// Index of the first sample to write.
    #[arg(long, default_value_t = 0)]
    first: u64,
}

#[derive(Args)]
struct Run {
    /// Experiment grid JSON. Without it the desk-scale grid is used and `--sweep` is required.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the grid's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated method ids.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Sweep such as `L=10,16,24,32` or `M=32,64,128`.
    #[arg(long)]
    sweep: Option<String>,
    /// Also write per-iteration JSON-lines traces of the untrained methods into this directory.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct TrainNet {
    /// System configuration JSON; ignored when `--data` is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`; generated from `--seed` otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "psca-ml-k-net")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 15)]
    blocks: usize,
    /// Training budget JSON.
    #[arg(long)]
    budget: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    /// Results CSV written by `run`.
    csv: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn system_config(path: Option<&Path>) -> Result<SystemConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => SystemConfig::desk(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: GenData) -> Result<ExitCode> {
    let cfg = system_config(args.config.as_deref())?;
    let samples = generate_dataset(&cfg, args.seed, args.first..args.first + args.count)?;
    save_dataset(&args.out, &cfg, args.seed, args.first, &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn build_grid(args: &Run) -> Result<ExperimentGrid> {
    let sweep = args.sweep.as_deref().map(Sweep::parse).transpose()?;
    let mut grid = match (&args.config, sweep.clone()) {
        (Some(path), _) => read_json::<ExperimentGrid>(path)?,
        (None, Some(sweep)) => {
            let untrained = METHODS.iter().filter(|m| !m.ends_with("-net")).map(|m| m.to_string()).collect();
            ExperimentGrid::desk(untrained, sweep)
        }
        (None, None) => bail!("either --config or --sweep is required"),
    };
    if let Some(sweep) = sweep {
        grid.sweep = sweep;
    }
    if let Some(methods) = &args.methods {
        grid.methods = methods.iter().map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect();
    }
    if let Some(seed) = args.seed {
        grid.seeds = vec![seed];
    }
    if let Some(workers) = args.workers {
        grid.workers = workers;
    }
    grid.validate()?;
    Ok(grid)
}

fn run(args: Run) -> Result<ExitCode> {
    let grid = build_grid(&args)?;
    let rows = harness::run_grid(&grid)?;
    match &args.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            harness::write_csv(&rows, BufWriter::new(file))?;
        }
        None => harness::write_csv(&rows, std::io::stdout().lock())?,
    }
    if let Some(dir) = &args.traces {
        std::fs::create_dir_all(dir)?;
        for t in harness::trace_grid(&grid)? {
            let mut out = BufWriter::new(File::create(dir.join(format!("{}.jsonl", t.label)))?);
            t.trace.write_jsonl(&mut out)?;
            out.flush()?;
        }
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.error.is_empty()).collect();
    for r in &failed {
        eprintln!("{} (N={}, L={}, M={}, seed {}): {}", r.method, r.n, r.l, r.m, r.seed, r.error);
    }
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn split_samples(mut samples: Vec<Sample>, n_train: usize, n_val: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.len() < n_train + n_val {
        bail!("dataset has {} samples, {} requested", samples.len(), n_train + n_val);
    }
    samples.truncate(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok((samples, val))
}

fn train_net(args: TrainNet) -> Result<ExitCode> {
    let id: MethodId = args.method.parse()?;
    if id.family != Family::Net {
        bail!("{} is not a trainable method", args.method);
    }
    let (cfg, samples) = match &args.data {
        Some(dir) => {
            let (manifest, samples) = load_dataset(dir)?;
            (manifest.config, samples)
        }
        None => {
            let cfg = system_config(args.config.as_deref())?;
            let samples = generate_dataset(&cfg, args.seed, 0..(args.n_train + args.n_val) as u64)?;
            (cfg, samples)
        }
    };
    let (train_set, val_set) = split_samples(samples, args.n_train, args.n_val)?;
    let budget = match &args.budget {
        Some(p) => read_json(p)?,
        None => TrainBudget { seed: args.seed, ..TrainBudget::default() },
    };
    let ctx = harness::Context::new(&cfg, harness::DEFAULT_MVB_SMOOTHING)?;
    let net = UnrolledConfig::new(ctx.kind(id.problem), args.blocks);
    let (trained, report) = train(&net, &train_set, &val_set, &budget)?;
    eprintln!(
        "{}: validation error rate {:.5}, threshold {:.4e}, {} evaluations",
        id, report.val_error_rate, report.threshold, report.stopped_epoch
    );
    let model = TrainedModel {
        config: trained,
        threshold: report.threshold,
        system: cfg,
        dataset_fingerprint: dataset_fingerprint(&train_set),
        report: Some(report),
    };
    model.save(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn report(args: Report) -> Result<ExitCode> {
    let file = File::open(&args.csv).with_context(|| format!("cannot open {}", args.csv.display()))?;
    let rows = harness::read_csv(file)?;
    print!("{}", harness::summarize(&rows));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::TrainNet(a) => train_net(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
