//! `chain`: harmonize concepts, explain instances and classes, compare
//! inference weights, or run the whole pipeline on a synthetic workspace.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chain_core::ChainError;
use config::{Flags, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "chain", version, about = "Concept-harmonized hierarchical explanations for CNNs")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit concept banks for every mapped level (or just `--layer`).
    Harmonize,
    /// Build the explanation tree for one manifest sample.
    ExplainInstance {
        sample_id: String,
    },
    /// Aggregate instance trees into a class chain.
    ExplainClass {
        class_id: String,
        sample_ids: Vec<String>,
    },
    /// Inference distances and 3D-PCA over sets listed in a `set_id,file` CSV.
    Distances {
        grouping: PathBuf,
    },
    /// Generate a synthetic workspace and run every stage on it.
    Demo,
}

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_MISSING_INPUT: u8 = 2;
pub const EXIT_MISSING_PREREQUISITE: u8 = 3;
pub const EXIT_UNKNOWN_ID: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn missing_input(message: String) -> Self {
        CliError { code: EXIT_MISSING_INPUT, message }
    }

    pub fn missing_prerequisite(message: String) -> Self {
        CliError { code: EXIT_MISSING_PREREQUISITE, message }
    }

    pub fn unknown_id(message: String) -> Self {
        CliError { code: EXIT_UNKNOWN_ID, message }
    }

    /// Bad option values and malformed inputs.
    pub fn invalid(message: String) -> Self {
        CliError { code: EXIT_MISSING_INPUT, message }
    }

    pub fn internal(message: String) -> Self {
        CliError { code: EXIT_INTERNAL, message }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        CliError {
            code: self.code,
            message: format!("stage `{stage}` failed: {}", self.message),
        }
    }
}

impl From<ChainError> for CliError {
    fn from(e: ChainError) -> Self {
        let code = match &e {
            ChainError::Io { .. } => EXIT_IO,
            ChainError::UnknownSample(_) | ChainError::UnknownConcept(_) | ChainError::UnknownLayer(_) => {
                EXIT_UNKNOWN_ID
            }
            ChainError::Parse { .. } => EXIT_MISSING_INPUT,
            _ => EXIT_INTERNAL,
        };
        CliError { code, message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Harmonize => commands::harmonize(&cfg),
        Command::ExplainInstance { sample_id } => commands::explain_instance_cmd(&cfg, &sample_id).map(drop),
        Command::ExplainClass { class_id, sample_ids } => {
            commands::explain_class_cmd(&cfg, &class_id, &sample_ids).map(drop)
        }
        Command::Distances { grouping } => commands::distances(&cfg, &grouping).map(drop),
        Command::Demo => commands::demo(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
