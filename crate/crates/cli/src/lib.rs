//! Command-line driver: one subcommand per pipeline stage plus `pipeline`,
//! which chains them through the same files the individual stages write.
//!
//! Exit status: 0 on success, 1 for invalid configuration or input content,
//! 2 for missing or unreadable files.

pub mod commands;
pub mod config;
pub mod synthetic;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::Config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn missing(what: &str) -> Self {
        CliError::Io(format!("no {what} configured"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

macro_rules! classify {
    ($($t:ty => |$e:ident| $io:expr),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from($e: $t) -> Self {
                if $io { CliError::Io($e.to_string()) } else { CliError::Validation($e.to_string()) }
            }
        }
    )*};
}

classify! {
    wsireport::pyramid::PyramidError => |e| e.is_io(),
    wsireport::patching::PatchError => |e| matches!(&e, wsireport::patching::PatchError::Pyramid(p) if p.is_io()),
    wsireport::features::FeatureError => |e| e.is_io(),
    wsireport::decoder::DecoderError => |e| e.is_io(),
    wsireport::verification::VerificationError => |e| e.is_io(),
    wsireport::evaluation::EvalError => |e| matches!(e, wsireport::evaluation::EvalError::Io { .. }),
}

#[derive(Debug, Parser)]
#[command(name = "wsireport", version, about = "Whole-slide image to pathology report pipeline")]
pub struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print what would be done without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tissue masks (PGM) and per-level tissue summary.
    Segment {
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Candidate grid, quality filters and budget sampling.
    Patch {
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode the selected patches into a feature store.
    Extract {
        slide: PathBuf,
        /// Selection CSV written by `patch`.
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the decoder on a dataset directory holding `reports.tsv`.
    Train {
        dataset: PathBuf,
        /// Checkpoint to write; defaults to `paths.checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy report generation for one or more feature stores.
    Generate {
        #[arg(required = true)]
        stores: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score `id, generated, reference` rows.
    Score {
        pairs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace generated reports by their nearest reference above the threshold.
    Verify {
        generated: PathBuf,
        /// Reference corpus TSV; defaults to `paths.corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage from slide to scored report.
    Pipeline {
        slide: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic inputs.
    #[command(subcommand)]
    MakeSynthetic(SyntheticCommand),
}

#[derive(Debug, Subcommand)]
pub enum SyntheticCommand {
    /// The demo slide.
    Slide(SlideArgs),
    /// Feature stores, reports, corpus and a reference report.
    Dataset(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct SlideArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub size: u32,
    /// Comma-separated levels to store.
    #[arg(long, value_delimiter = ',', default_values_t = vec![3u32, 4, 5, 6])]
    pub levels: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

/// Parses arguments, loads configuration and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Validation("--jobs must be positive".into()));
        }
        // A pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    if cli.dry_run {
        for line in commands::plan(&cli.command, &cfg) {
            println!("{line}");
        }
        return Ok(());
    }
    commands::execute(&cli.command, &cfg)
}

/// Entry point shared by the binary: returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
