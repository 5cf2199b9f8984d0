mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fieldcraft::Method;

#[derive(Parser)]
#[command(name = "fieldcraft", version, about = "Simulate, infer and validate standardized field models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a ground truth and synthetic data from the configured model.
    Simulate(RunArgs),
    /// Fit the model to data with MAP, ADVI or MGVI.
    Infer(RunArgs),
    /// Exact posterior mean of a linear model.
    Wiener(RunArgs),
    /// Run the invariant suite and print a pass/fail table.
    Validate(RunArgs),
    /// Simulate a stochastic field and compare its spectrum with the kernel.
    Dynamics(RunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed of the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must not exist yet.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Numeric(_) => 1,
            Self::Config(_) => 2,
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("FIELDCRAFT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("FIELDCRAFT_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Infer(a) => commands::infer(a),
        Command::Wiener(a) => commands::wiener(a),
        Command::Validate(a) => commands::validate(a),
        Command::Dynamics(a) => commands::dynamics(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Numeric(m) => eprintln!("numerical failure: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
