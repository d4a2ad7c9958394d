//! Command-line frontend and session service.
//!
//! Machine output goes to stdout (JSON by default, `--format table` for
//! people); progress and errors go to stderr. Exit codes: 0 success,
//! 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod library;
pub mod server;

#[derive(Debug, Parser)]
#[command(name = "gesture", version, about = "Learn, generate and score gestures from skeleton recordings")]
pub struct Cli {
    /// Machine output format.
    #[arg(long, value_enum, global = true, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    Directions,
    Positions,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a gesture model to a directory of NDJSON demos.
    Train {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, value_enum, default_value_t = EncodingArg::Directions)]
        encoding: EncodingArg,
        #[arg(long, default_value_t = 5)]
        components: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a pass threshold from demos (leave-one-out).
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = gesture_core::scoring::DEFAULT_MARGIN)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a recorded attempt against a model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the model's reference trajectory as NDJSON.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detected-part coverage per frame of a recording or estimator export.
    Coverage {
        #[arg(long)]
        input: PathBuf,
    },
    /// Convert an 18-keypoint estimator export to Body14 NDJSON frames.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a recording to a running service's ingest port.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        connect: String,
        #[arg(long)]
        session: String,
        /// Frames per second; 0 sends as fast as possible.
        #[arg(long, default_value_t = 30.0)]
        rate: f64,
    },
    /// Run the session service.
    Serve {
        #[arg(long)]
        http: SocketAddr,
        #[arg(long)]
        ingest: SocketAddr,
        #[arg(long)]
        gestures: PathBuf,
        /// Directory for per-session NDJSON logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Seconds after which an open capture window closes.
        #[arg(long, default_value_t = 5.0)]
        capture_timeout: f64,
    },
}

/// Parses `args` and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
