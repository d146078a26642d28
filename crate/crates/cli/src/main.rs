use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use nudged_pf::harness::{self, ExperimentConfig, FilterKind, Manifest};
use nudged_pf::FilterError;

#[derive(Parser)]
#[command(name = "nudged-pf", version, about = "Nudged particle filters on stochastic Lorenz-63")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One twin experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// pf, npf or var-npf; defaults to the config's filter.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Paired Monte Carlo sweep of all three filters.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: usize,
        /// all, star, or a comma separated list such as star,1,4
        #[arg(long, default_value = "all")]
        ics: String,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary tables of an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<FilterError> for Failure {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Config(_) | FilterError::Toml(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(ExperimentConfig::from_toml_str(&text)?)
}

fn run(config: &Path, filter: Option<String>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(f) = filter {
        cfg.filter = f.parse()?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let clock = Instant::now();
    let record = harness::run_experiment(&cfg)?;
    let mut manifest = Manifest::new("run", &cfg, &[cfg.filter], cfg.seed);
    manifest.truth_hashes = vec![record.truth_hash];
    manifest.truth_secs = record.truth.generation_secs;
    manifest.wall_secs = clock.elapsed().as_secs_f64();
    harness::write_run_outputs(out, std::slice::from_ref(&record), &manifest)?;
    print!("{}", harness::format_report(out)?);
    Ok(())
}

fn monte_carlo(config: &Path, runs: usize, ics: &str, jobs: Option<usize>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ics = harness::parse_ic_selection(ics)?;
    if runs == 0 {
        return Err(Failure::Config("--runs must be >= 1".into()));
    }
    let clock = Instant::now();
    let summary = harness::run_monte_carlo(&cfg, &ics, runs, cfg.seed, &FilterKind::ALL, jobs)?;
    let mut manifest = Manifest::new("mc", &cfg, &FilterKind::ALL, cfg.seed);
    manifest.runs_per_ic = Some(runs);
    manifest.initial_conditions = ics;
    manifest.truth_hashes = summary
        .runs
        .iter()
        .filter(|r| r.filter == FilterKind::Pf)
        .map(|r| r.truth_hash)
        .collect();
    manifest.failures = summary.runs.iter().filter(|r| r.metrics.is_none()).count();
    manifest.wall_secs = clock.elapsed().as_secs_f64();
    harness::write_mc_outputs(out, &summary, &manifest)?;
    print!("{}", harness::format_report(out)?);
    if manifest.failures > 0 {
        eprintln!("{} filter runs failed; see runs.csv", manifest.failures);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run { config, filter, seed, out } => run(&config, filter, seed, &out),
        Command::Mc { config, runs, ics, jobs, out } => monte_carlo(&config, runs, &ics, jobs, &out),
        Command::Report { input } => harness::format_report(&input).map(|s| print!("{s}")).map_err(Failure::from),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("run failed: {m}");
            ExitCode::from(2)
        }
    }
}
