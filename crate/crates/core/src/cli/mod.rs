//! The `fedkappa` command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "fedkappa", version, about = "Federated averaging over simulated imaging sites")]
pub struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Federation config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Create the output directory if it does not exist.
    #[arg(long, global = true)]
    pub create: bool,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one dataset file per site.
    GenData(GenDataArgs),
    /// Train local-only baselines and keep each site's validation-best model.
    TrainLocal(TrainLocalArgs),
    /// Run a federation in-process, as a server, or as one client.
    Federate(FederateArgs),
    /// Fine-tune each site's selected model on its own data.
    Finetune(FinetuneArgs),
    /// Evaluate every site's model on every site's test split.
    EvalMatrix(EvalMatrixArgs),
    /// Summaries and the comparison report from matrix CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Site profiles (TOML with `[[site]]` tables); defaults to the seven built-in sites.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Divisor applied to the built-in site sizes.
    #[arg(long, default_value_t = 50)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct TrainLocalArgs {
    /// Directory of `<site>.fkds` files.
    #[arg(long)]
    pub data: PathBuf,
    /// Epochs per site; defaults to the configured round count.
    #[arg(long)]
    pub rounds: Option<u32>,
}

#[derive(Debug, Args)]
#[group(id = "mode", required = true, multiple = false)]
pub struct FederateMode {
    /// Server and all clients in this process.
    #[arg(long, group = "mode")]
    pub simulate: bool,
    /// Serve on host:port.
    #[arg(long, value_name = "HOST:PORT", group = "mode", alias = "listen")]
    pub serve: Option<String>,
    /// Join the server at host:port as one client.
    #[arg(long, value_name = "HOST:PORT", group = "mode")]
    pub join: Option<String>,
}

#[derive(Debug, Args)]
pub struct FederateArgs {
    #[command(flatten)]
    pub mode: FederateMode,
    /// Dataset directory, or with --join a single `<site>.fkds` file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Client id for --join; defaults to the dataset file stem.
    #[arg(long)]
    pub client_id: Option<String>,
    /// Overrides the configured round count.
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Seconds a joining client keeps retrying the connection.
    #[arg(long, default_value_t = 60)]
    pub connect_timeout: u64,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Directory with `<site>/best.fkpv` per site.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the configured fine-tuning epochs.
    #[arg(long)]
    pub epochs: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EvalMatrixArgs {
    /// Directory with `<site>/best.fkpv` per site and optionally `global.fkpv`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output file stem; defaults to the models directory name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Local-only matrix CSV [default: <out>/local.csv].
    #[arg(long)]
    pub local: Option<PathBuf>,
    /// Federated matrix CSV [default: <out>/federated.csv].
    #[arg(long)]
    pub federated: Option<PathBuf>,
    /// Fine-tuned matrix CSV [default: <out>/finetuned.csv if present].
    #[arg(long)]
    pub finetuned: Option<PathBuf>,
}

/// Parses arguments, runs the subcommand and maps errors to exit code 1.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(manifest) => {
            log::info!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
