mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CheckFlags, Mode, RuntimeFlags};

/// Build, run, profile, benchmark and fuzz PIR programs with run-time
/// partitioned sanitization.
#[derive(Debug, Parser)]
#[command(name = "varsan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where program input comes from. Without any of these the input is empty.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Read input bytes from a file.
    #[arg(long, conflicts_with_all = ["text", "hex"])]
    pub input: Option<PathBuf>,
    /// Use a literal string as input.
    #[arg(long, conflicts_with = "hex")]
    pub text: Option<String>,
    /// Use hex-encoded bytes as input.
    #[arg(long)]
    pub hex: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate variants, the dispatch table layout and metadata.
    Build {
        source: PathBuf,
        #[command(flatten)]
        runtime: RuntimeFlags,
        #[command(flatten)]
        checks: CheckFlags,
        /// Profile from `varsan profile`; functions below the threshold are cold.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        hot_threshold: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Output program [default: <source stem>.built.pir]
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Output metadata [default: next to the output program]
        #[arg(long)]
        metadata: Option<PathBuf>,
    },
    /// Run a program on training inputs and write per-function counts.
    Profile {
        source: PathBuf,
        /// Workload input files, one run each.
        inputs: Vec<PathBuf>,
        /// Literal workload inputs, one run each.
        #[arg(long)]
        text: Vec<String>,
        #[arg(long, default_value = "train")]
        workload: String,
        #[arg(short, long, default_value = "profile.json")]
        output: PathBuf,
    },
    /// Execute a built program under the partitioning runtime.
    Run {
        program: PathBuf,
        /// Metadata from `varsan build` [default: next to the program]
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        runtime: RuntimeFlags,
        /// Force every slot to its sanitized variant.
        #[arg(long, conflicts_with = "all_unsanitized")]
        all_sanitized: bool,
        /// Force every slot to its unsanitized variant.
        #[arg(long)]
        all_unsanitized: bool,
        /// Repartition every N cost units from inside the interpreter.
        #[arg(long, default_value_t = 10_000)]
        repartition_every: u64,
        /// Repartition from the background thread on wall-clock time.
        #[arg(long)]
        realtime: bool,
        /// Uninstrumented program to report instruction overhead against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        ub_recovery: bool,
        #[arg(long)]
        max_instructions: Option<u64>,
        /// Print a JSON summary instead of the program output.
        #[arg(long)]
        json: bool,
    },
    /// Measure instruction overhead and detection on the bundled corpus.
    Bench {
        /// Comma-separated program names [default: all]
        #[arg(long, value_delimiter = ',')]
        programs: Vec<String>,
        /// Seeds per partitioned configuration; the median is reported.
        #[arg(long, default_value_t = 3)]
        repeat: u64,
        #[arg(long, default_value_t = 0.01)]
        budget: f64,
        #[command(flatten)]
        checks: CheckFlags,
        #[arg(long, default_value_t = 1)]
        hot_threshold: u64,
        #[arg(long, default_value_t = 10_000)]
        repartition_every: u64,
        /// Repartition on wall-clock time; results vary between runs.
        #[arg(long)]
        realtime: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fuzz a program built with `--mode fuzz` (or `--mode fuzz-baseline`).
    Fuzz {
        program: PathBuf,
        /// Corpus directory; existing files are used as seeds.
        #[arg(long)]
        corpus: PathBuf,
        /// Extra seed directory.
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fuzzing")]
        policy: FuzzPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        max_executions: u64,
        /// Wall-clock limit in seconds.
        #[arg(long)]
        max_time: Option<f64>,
        #[arg(long, default_value_t = 4096)]
        max_len: usize,
        /// Log crashes and keep fuzzing.
        #[arg(long)]
        keep_going: bool,
        /// Write the campaign report here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the coverage time series here as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write crashing inputs here, named by content hash.
        #[arg(long)]
        crashes: Option<PathBuf>,
        /// An all-sanitized baseline build to run with the same settings for
        /// a throughput comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Re-run an input, by default with every slot sanitized.
    Replay {
        program: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Comma-separated variant index per slot.
        #[arg(long, value_delimiter = ',', conflicts_with = "report")]
        table: Option<Vec<u32>>,
        /// Fuzz report to take the crash input and table from.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0, requires = "report")]
        crash: usize,
    },
    /// Summarise a fuzz report, bench report, profile or metadata file.
    Report {
        file: PathBuf,
        /// Write a fuzz report's time series as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "kebab-case")]
pub enum FuzzPolicy {
    Fuzzing,
    AllSanitized,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
