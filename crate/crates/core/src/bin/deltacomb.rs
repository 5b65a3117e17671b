use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deltacomb::acceptance::num;
use deltacomb::config::{load_config, parse_config, Experiment, RunConfig};
use deltacomb::run::{run, RunOptions};
use deltacomb::Error;

#[derive(Parser)]
#[command(name = "deltacomb", version, about = "Random delta-comb spectral experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (or a JSON manifest to re-run).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides `ensemble.master_seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Every delta of each realization's comb.
    DumpPotential,
    /// Convergence of the unperturbed block to its limit matrix.
    TransferReport,
    /// Prüfer variables and the three norm evaluations along each solution.
    PruferTrace,
    /// Growth exponent estimates per energy.
    ExponentSweep,
    /// Truncated Weyl function on E + i eps.
    MfuncScan,
    /// Jitomirskaya-Last inequality per eps.
    JlCheck,
    /// Local dimension slope of the spectral measure.
    DimensionScan,
    /// The full acceptance suite.
    Validate {
        /// Multiplies every tolerance; 0 forces failures.
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        /// Comma-separated criterion numbers (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
}

fn experiment(c: &Command) -> Experiment {
    match c {
        Command::DumpPotential => Experiment::DumpPotential,
        Command::TransferReport => Experiment::TransferReport,
        Command::PruferTrace => Experiment::PruferTrace,
        Command::ExponentSweep => Experiment::ExponentSweep,
        Command::MfuncScan => Experiment::MfuncScan,
        Command::JlCheck => Experiment::JlCheck,
        Command::DimensionScan => Experiment::DimensionScan,
        Command::Validate { .. } => Experiment::Validate,
    }
}

fn configure(cli: &Cli) -> Result<RunConfig, Error> {
    let x = experiment(&cli.command);
    let mut cfg = match &cli.common.config {
        Some(path) => load_config(path, Some(x))?,
        None => parse_config("", Some(x))?,
    };
    if let Some(dir) = &cli.common.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.common.seed {
        cfg.ensemble.master_seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {n} worker threads");
            return ExitCode::from(2);
        }
    }
    let cfg = match configure(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut opts = RunOptions::default();
    if let Command::Validate { tolerance_scale, only } = &cli.command {
        opts.tolerance_scale = *tolerance_scale;
        if !only.is_empty() {
            opts.criteria = only.clone();
        }
    }
    match run(&cfg, &opts) {
        Ok(m) => {
            for c in &m.checks {
                let status = if c.pass { "PASS" } else { "FAIL" };
                println!("[{status}] {}: {} ({})", c.name, num(c.measured), c.bound);
            }
            if let Some(f) = &m.failure {
                eprintln!("worker failure at {}: {}", f.site, f.message);
            }
            println!("manifest: {}", cfg.output_dir.join("manifest.json").display());
            if m.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
