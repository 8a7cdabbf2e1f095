use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Continual-learning benchmark harness for shifted chest X-ray domains.
#[derive(Parser)]
#[command(name = "pneumonet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML key/value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting defaults: `full` or `smoke`
    #[arg(long, default_value = "full")]
    pub preset: String,
    /// Override one key, e.g. `--set seed=2`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an NPZ archive and export it in the flat format
    Ingest {
        #[arg(long)]
        npz: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a deterministic surrogate archive with the same split layout
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Divide every split size by this factor
        #[arg(long, default_value_t = 1)]
        scale_down: usize,
        #[arg(long)]
        force: bool,
    },
    /// Materialize the five transformed domains
    MakeDomains {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one configuration and write its report, CSVs and checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on every domain's test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional JSON output file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cartesian sweep over keys and seeds
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `key=v1,v2,...`; repeatable
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run directories (one group each) into a comparison table
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// CSV output; a `.txt` table is written alongside
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { npz, out, force } => commands::ingest(&npz, &out, force),
        Command::Synth {
            out,
            seed,
            scale_down,
            force,
        } => commands::synth(&out, seed, scale_down, force),
        Command::MakeDomains { cfg, out, force } => commands::make_domains(&cfg, &out, force),
        Command::Train { cfg, out, force } => commands::train(&cfg, &out, force),
        Command::Eval { cfg, checkpoint, out } => commands::eval(&cfg, &checkpoint, out.as_deref()),
        Command::Sweep {
            cfg,
            vary,
            seeds,
            out,
            force,
        } => commands::sweep(&cfg, &vary, &seeds, &out, force),
        Command::Report { runs, out } => commands::report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
