//! `sass-sched`: optimize, simulate, test and compare instruction schedules.

mod config;
mod diff;
mod optimize;
mod store;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sass_sched::ir::Kernel;
use sass_sched::machine::simulate;
use sass_sched::testing::{run_tests, RunOptions, TestError};
use sass_sched::text::parse;
use serde_json::json;
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    NoCandidates(String),
    #[error("{0}")]
    Backend(String),
    #[error("result store: {0}")]
    Store(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Parse(_) | CliError::Store(_) => 2,
            CliError::NoCandidates(_) => 3,
            CliError::Backend(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "sass-sched", version, about = "Stochastic reordering of GPU assembly schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a faster schedule of a kernel.
    Optimize(OptimizeArgs),
    /// Print the simulator's timing report as JSON.
    Simulate {
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare two schedules on random inputs; prints the verdict as JSON.
    /// Exit 0 on pass, 1 on a mismatch, 5 if the kernels cannot be interpreted.
    Verify {
        reference: PathBuf,
        mutant: PathBuf,
        /// Config file with a [test] section.
        #[arg(long)]
        config: PathBuf,
        /// Number of random samples.
        #[arg(long)]
        tests: Option<usize>,
        #[arg(long)]
        fail_fast: bool,
    },
    /// List the adjacent swaps that turn the first schedule into the second.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
pub struct OptimizeArgs {
    pub input: PathBuf,
    /// TOML file with [anneal], [machine], [backend] and [test] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent chains; chain c uses seed + c.
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// `sim` or `external:<command>`; the command must contain {schedule_file}.
    #[arg(long)]
    pub backend: Option<String>,
    /// Samples in the final test of each chain's best schedule.
    #[arg(long)]
    pub tests: Option<usize>,
    /// Write the dependency graph of the input in DOT format.
    #[arg(long, value_name = "FILE")]
    pub emit_deps: Option<PathBuf>,
    /// Ignore dependency edges when moving instructions.
    #[arg(long)]
    pub unsafe_moves: bool,
    /// Stop the final test at the first mismatch.
    #[arg(long)]
    pub fail_fast: bool,
    /// Directory of the result store.
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// Write the best schedule found to this file.
    #[arg(long, short, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
pub fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Parses a file, printing warnings to stderr.
pub fn load_kernel(path: &Path) -> Result<(String, Kernel), CliError> {
    let text = read_text(path)?;
    match parse(&text) {
        Ok(parsed) => {
            for w in &parsed.warnings {
                eprintln!("{}: {w}", path.display());
            }
            Ok((text, parsed.kernel))
        }
        Err(errors) => {
            let lines: Vec<String> = errors
                .diagnostics
                .iter()
                .map(|d| format!("{}: {d}", path.display()))
                .collect();
            Err(CliError::Parse(lines.join("\n")))
        }
    }
}

fn cmd_simulate(input: &Path, config: Option<&Path>) -> Result<u8, CliError> {
    let cfg = RunConfig::load(config)?;
    let (_, k) = load_kernel(input)?;
    let report = simulate(&k, &cfg.machine);
    emit(&format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")));
    Ok(0)
}

fn cmd_verify(
    reference: &Path,
    mutant: &Path,
    config: &Path,
    tests: Option<usize>,
    fail_fast: bool,
) -> Result<u8, CliError> {
    let cfg = RunConfig::load(Some(config))?;
    let mut plan = cfg
        .test
        .ok_or_else(|| CliError::Input(format!("{}: no [test] section", config.display())))?;
    if let Some(n) = tests {
        plan.sample_count = n;
    }
    let (_, r) = load_kernel(reference)?;
    let (_, m) = load_kernel(mutant)?;
    let opts = RunOptions { fail_fast, ..RunOptions::default() };
    let (value, code) = match run_tests(&r, &m, &plan, &opts) {
        Ok(v) => {
            let status = if v.is_pass() { "pass" } else { "fail" };
            let code = if v.is_pass() { 0 } else { 1 };
            (json!({ "status": status, "verdict": v }), code)
        }
        Err(TestError::InvalidPlan(m)) => return Err(CliError::Input(m)),
        Err(e) => (json!({ "status": "inconclusive", "detail": e.to_string() }), 5),
    };
    emit(&format!("{}\n", serde_json::to_string_pretty(&value).expect("verdict serializes")));
    Ok(code)
}

fn cmd_diff(a: &Path, b: &Path, as_json: bool) -> Result<u8, CliError> {
    let (_, ka) = load_kernel(a)?;
    let (_, kb) = load_kernel(b)?;
    let swaps = diff::swap_sequence(&ka, &kb).map_err(CliError::Input)?;
    if as_json {
        emit(&format!("{}\n", serde_json::to_string_pretty(&swaps).expect("swaps serialize")));
    } else {
        let lines: String = swaps
            .iter()
            .map(|s| format!("swap {} {}: {} | {}\n", s.at, s.at + 1, s.raised, s.lowered))
            .collect();
        emit(&lines);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize(args) => optimize::run(args),
        Command::Simulate { input, config } => cmd_simulate(input, config.as_deref()),
        Command::Verify {
            reference,
            mutant,
            config,
            tests,
            fail_fast,
        } => cmd_verify(reference, mutant, config, *tests, *fail_fast),
        Command::Diff { a, b, json } => cmd_diff(a, b, *json),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
