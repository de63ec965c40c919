//! `facepulse` command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 pipeline error.

mod commands;
mod eval;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facepulse::config::PipelineConfig;

#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent user input.
    Input(String),
    /// Failure while running the pipeline on valid input.
    Pipeline(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Pipeline(m) => write!(f, "pipeline error: {m}"),
        }
    }
}

impl From<facepulse::Error> for CliError {
    fn from(e: facepulse::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Pipeline(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "facepulse", version, about = "Motion-robust rPPG extraction and liveness scoring")]
struct Cli {
    /// Pipeline configuration JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the effective configuration to this path ("-" for stdout).
    #[arg(long, global = true)]
    config_dump: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic face video with ground truth.
    Synth(commands::SynthArgs),
    /// Stitch a sequence onto its template frame.
    Align(commands::AlignArgs),
    /// Export spatial-temporal tensors from aligned frames.
    Extract(commands::ExtractArgs),
    /// Spectral liveness score of tensor files, written as CSV.
    Score(commands::ScoreArgs),
    /// Error rates from a scores CSV with seeded dev/test folds.
    Eval(eval::EvalArgs),
    /// Vessel weight map from a mask image, or the bundled map.
    Weights(commands::WeightsArgs),
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_json(&text)?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dump_config(cfg: &PipelineConfig, path: &PathBuf) -> CliResult<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    if path.as_os_str() == "-" {
        println!("{text}");
        Ok(())
    } else {
        std::fs::write(path, text).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    if let Some(p) = &cli.config_dump {
        dump_config(&cfg, p)?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &cfg, cli.seed),
        Command::Align(a) => commands::align(&a, &cfg),
        Command::Extract(a) => commands::extract(&a, &cfg),
        Command::Score(a) => commands::score(&a),
        Command::Eval(a) => eval::eval(&a, &cfg),
        Command::Weights(a) => commands::weights(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("facepulse: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
