//! Command line interface.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Parser as ClapParser, Subcommand};
use facefill_core::checkpoint::Model;
use facefill_core::training::{train, TrainConfig};
use facefill_core::Error;
use serde::Serialize;

use crate::jobs::{run_evaluation, run_parser_job, EvalConfig, ParserJobConfig};
use crate::{complete_encoded, parse_encoded, random_seed};

pub const CHECKPOINT_ENV: &str = "FACEFILL_CHECKPOINT_DIR";

#[derive(Debug, ClapParser)]
#[command(name = "facefill", version, about = "Train, evaluate and serve face completion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a completion model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the face parser used by the semantic loss.
    TrainParser {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the standard masks, the size sweep and recognition.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = CHECKPOINT_ENV, required_unless_present = "identity_model")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the perfect completer instead of a checkpoint.
        #[arg(long)]
        identity_model: bool,
    },
    /// Complete one image under one mask.
    Complete {
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Single-channel PNG, 255 = missing.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Poisson-blend the filled region into its surroundings.
        #[arg(long)]
        blend: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the colour-coded parsing of one image.
    Parse {
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long, env = CHECKPOINT_ENV)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CHECKPOINT: u8 = 3;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

#[derive(Serialize)]
struct CompleteSummary<'a> {
    output: &'a Path,
    seed_used: u64,
    mask_area: usize,
    warnings: &'a [String],
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(dir) = std::env::var_os(CHECKPOINT_ENV) {
                cfg.checkpoint_dir = PathBuf::from(dir);
            }
            let outcome = train(&cfg)?;
            for c in &outcome.checkpoints {
                println!("{}", c.display());
            }
        }
        Command::TrainParser { config } => {
            let report = run_parser_job(&ParserJobConfig::load(&config)?)?;
            print_json(&report);
        }
        Command::Evaluate {
            config,
            checkpoint,
            identity_model,
        } => {
            let cfg = EvalConfig::load(&config)?;
            let model = match (identity_model, checkpoint) {
                (false, Some(dir)) => Some(Model::load(dir)?),
                _ => None,
            };
            for p in run_evaluation(&cfg, model.as_ref())? {
                println!("{}", p.display());
            }
        }
        Command::Complete {
            checkpoint,
            image,
            mask,
            seed,
            blend,
            out,
        } => {
            let model = Model::load(checkpoint)?;
            let seed = seed.unwrap_or_else(random_seed);
            let done = complete_encoded(&model, &read(&image)?, &read(&mask)?, seed, blend)?;
            write(&out, &done.png)?;
            print_json(&CompleteSummary {
                output: &out,
                seed_used: done.seed_used,
                mask_area: done.mask_area,
                warnings: &done.warnings,
            });
        }
        Command::Parse { checkpoint, image, out } => {
            let model = Model::load(checkpoint)?;
            let parser = model.parser.as_ref().ok_or_else(|| Failure {
                code: EXIT_CHECKPOINT,
                message: "checkpoint has no parser".into(),
            })?;
            write(&out, &parse_encoded(parser, &read(&image)?)?)?;
        }
        Command::Serve { checkpoint, host, port } => {
            let model = Model::load(checkpoint)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
                code: EXIT_FAILURE,
                message: e.to_string(),
            })?;
            runtime
                .block_on(crate::api::serve(model, SocketAddr::new(host, port)))
                .map_err(|e| Failure {
                    code: EXIT_FAILURE,
                    message: e.to_string(),
                })?;
        }
    }
    Ok(())
}
