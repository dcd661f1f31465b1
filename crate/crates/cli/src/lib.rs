//! `crossdesc` command-line front-end.
//!
//! Every subcommand reads an optional strict JSON config (`--config`),
//! applies flag overrides on top, writes the resolved config next to its
//! outputs and prints a one-line JSON summary on stdout. Failures print a
//! one-line JSON reason on stderr and exit with 2 (usage), 3 (data) or
//! 4 (numerical).

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use crossdesc_core::error::ErrorClass;
use serde_json::{json, Value};

mod commands;
mod config;

pub use config::snapshot_path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] crossdesc_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.code(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Summary printed on stdout, plus an optional failure that still lets the
/// summary through (e.g. a gradient check above threshold).
pub struct Outcome {
    pub summary: Value,
    pub failure: Option<CliError>,
}

impl From<Value> for Outcome {
    fn from(summary: Value) -> Self {
        Outcome { summary, failure: None }
    }
}

#[derive(Parser, Debug)]
#[command(name = "crossdesc", version, about = "Shared 2D/3D local descriptors: data, training and benchmarks")]
struct Cli {
    /// Seed for every random choice of the run; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads. Results do not depend on it.
    #[arg(long, global = true, env = "LCD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene, place benchmark or fragment set.
    GenSynth(commands::data::GenSynthArgs),
    /// Extract 2D/3D correspondence records from a scene directory.
    GenData(commands::data::GenDataArgs),
    /// Train the dual auto-encoder on a record container.
    Train(commands::model::TrainArgs),
    /// Encode the 2D or 3D side of a record container.
    Encode(commands::model::EncodeArgs),
    /// 2D-to-2D matching precision between two frames of a scene.
    #[command(name = "match-2d")]
    Match2d(commands::geometry::Match2dArgs),
    /// Register two point cloud fragments.
    Register(commands::geometry::RegisterArgs),
    /// Registration recall over fragment pairs.
    BenchRegister(commands::geometry::BenchRegisterArgs),
    /// Build a place-recognition index from submaps.
    BuildIndex(commands::places::BuildIndexArgs),
    /// Rank index entries for query frames.
    Query(commands::places::QueryArgs),
    /// Place-recognition recall@N.
    BenchRecall(commands::places::BenchRecallArgs),
    /// Dense depth from an image and sparse depth samples.
    Depth(commands::depth::DepthArgs),
    /// Finite-difference check of every layer kind and loss term.
    GradCheck(commands::model::GradCheckArgs),
    /// Descriptors and patch thumbnails for external embedding tools.
    ExportEmbeddings(commands::model::ExportArgs),
    /// Gaussian pixel noise on records, images or scene frames.
    AddNoise(commands::data::AddNoiseArgs),
}

/// Global flags handed to every subcommand.
#[derive(Clone, Copy, Debug)]
pub struct Globals {
    pub seed: Option<u64>,
}

fn dispatch(cmd: Command, g: Globals) -> Result<Outcome> {
    use commands::*;
    match cmd {
        Command::GenSynth(a) => data::gen_synth(a, g),
        Command::GenData(a) => data::gen_data(a, g),
        Command::Train(a) => model::train(a, g),
        Command::Encode(a) => model::encode(a, g),
        Command::Match2d(a) => geometry::match_2d(a, g),
        Command::Register(a) => geometry::register(a, g),
        Command::BenchRegister(a) => geometry::bench_register(a, g),
        Command::BuildIndex(a) => places::build_index(a, g),
        Command::Query(a) => places::query(a, g),
        Command::BenchRecall(a) => places::bench_recall(a, g),
        Command::Depth(a) => depth::depth(a, g),
        Command::GradCheck(a) => model::grad_check(a, g),
        Command::ExportEmbeddings(a) => model::export(a, g),
        Command::AddNoise(a) => data::add_noise(a, g),
    }
}

fn error_line(e: &CliError) -> String {
    json!({ "error": e.code(), "exit": e.exit_code(), "reason": e.to_string() }).to_string()
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let reason = e.to_string();
            let first = reason.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line(&CliError::Usage(first.to_string())));
            return 2;
        }
    };
    let g = Globals { seed: cli.seed };
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, g)),
            Err(e) => Err(CliError::Usage(format!("thread pool: {e}"))),
        },
        None => dispatch(cli.command, g),
    };
    match result {
        Ok(out) => {
            println!("{}", out.summary);
            match out.failure {
                None => 0,
                Some(e) => {
                    eprintln!("{}", error_line(&e));
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
