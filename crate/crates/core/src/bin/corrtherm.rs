use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use corrtherm::cli::{run, ExperimentConfig, Task};
use corrtherm::kernel::StartPoint;
use corrtherm::{Error, Result};

/// Thermodynamic formalism for expanding correspondences.
#[derive(Parser, Debug)]
#[command(name = "corrtherm", version)]
struct Args {
    task: Task,
    /// JSON experiment configuration; optional for `check`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    /// Starting point as comma-separated coordinates, or `lebesgue`.
    #[arg(long)]
    x0: Option<String>,
}

fn parse_start(s: &str) -> Result<StartPoint> {
    if s.eq_ignore_ascii_case("lebesgue") {
        return Ok(StartPoint::Lebesgue);
    }
    s.split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(StartPoint::Fixed)
        .map_err(|e| Error::Config(format!("bad --x0 {s:?}: {e}")))
}

fn execute(args: Args) -> Result<i32> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if args.task == Task::Check => ExperimentConfig::for_task(Task::Check),
        None => return Err(Error::Config("--config is required".into())),
    };
    if let Some(s) = args.steps {
        config.markov.steps = s;
    }
    if let Some(b) = args.burnin {
        config.markov.burnin = b;
    }
    if let Some(x) = &args.x0 {
        config.markov.x0 = parse_start(x)?;
    }
    let config = config.resolve(Some(args.task), args.seed, args.out)?;
    let manifest = run(&config)?;
    for row in &manifest.checks {
        println!("{}", row.line());
    }
    for (key, value) in &manifest.summary {
        println!("{key}: {value}");
    }
    Ok(manifest.exit_code())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
