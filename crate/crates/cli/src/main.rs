use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gle_cli::{config, parse_config, run, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "gle", version, about = "Simulate and homogenize generalized Langevin equations", after_long_help = config::SCHEMA_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment file (TOML). Optional for `presets`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Worker threads for path ensembles [default: all cores].
    #[arg(long, global = true, env = "GLE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Trajectories of the Markovian embedding: trajectories.csv
    Simulate,
    /// Build a limit system: limit.toml recipe, limit_trajectories.csv if limit.simulate
    Limit,
    /// Mean-squared displacement: msd_monte_carlo.csv, msd_exact.csv, msd_fit.csv
    Msd,
    /// Kernel and noise on frequency and time grids: spectrum.csv, kernel.csv
    Spectrum,
    /// Coupled epsilon-convergence study: convergence.csv
    Converge,
    /// List built-in kernel/noise presets
    Presets,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let cmd = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Limit => Command::Limit,
        Cmd::Msd => Command::Msd,
        Cmd::Spectrum => Command::Spectrum,
        Cmd::Converge => Command::Converge,
        Cmd::Presets => Command::Presets,
    };
    let mut cfg = match (&cli.config, cmd) {
        (Some(p), _) => parse_config(p)?,
        (None, Command::Presets) => ExperimentConfig::default(),
        (None, _) => return Err(CliError::Config("--config FILE is required".into())),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(p) = cli.paths {
        cfg.run.paths = p;
    }
    for f in run(cmd, &cfg, &cli.out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.stderr_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
