use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use memforce_cli::config::parse_config;
use memforce_cli::run::{cmd_energy, cmd_force, cmd_solve, cmd_sweep, cmd_verify, Context};
use memforce_cli::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Potential on the mesh or grid, face densities and solver metadata.
    Solve,
    /// Normal force at the face samples in all three forms.
    Force,
    /// Energy breakdown, `G` and `Π`.
    Energy,
    /// Cross-checks; exits with status 3 if any fails.
    Verify,
    /// One row per value of the `[sweep]` key.
    Sweep,
}

/// Poisson-Boltzmann energies and boundary forces for charged membranes.
#[derive(Debug, Parser)]
#[command(name = "memforce", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the artifacts.
    #[arg(long, env = "MEMFORCE_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concurrent sweep points; defaults to the number of CPUs.
    #[arg(long, env = "MEMFORCE_WORKERS")]
    workers: Option<usize>,
    /// No progress or tables.
    #[arg(long)]
    quiet: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let cfg = parse_config(&text)?;
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Config("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let ctx = Context {
        out: cli.out,
        seed: cli.seed,
        workers,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Solve => cmd_solve(&cfg, &ctx),
        Command::Force => cmd_force(&cfg, &ctx),
        Command::Energy => cmd_energy(&cfg, &ctx),
        Command::Verify => cmd_verify(&cfg, &ctx),
        Command::Sweep => cmd_sweep(&text, &cfg, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("memforce: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
