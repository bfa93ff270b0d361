//! Cost backends: how a schedule's runtime is measured.
//!
//! The search loop only sees numbers. [`Simulator`] reports scoreboard cycles;
//! [`External`] hands the serialized schedule to a user command and reads
//! `{"time_ms": <float>}` from its stdout.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::ir::Kernel;
use crate::machine::{simulate, MachineConfig};
use crate::text::serialize_kernel;

/// Placeholder substituted with the path of the schedule file.
pub const SCHEDULE_PLACEHOLDER: &str = "{schedule_file}";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// This one measurement is unusable; the search may continue.
    #[error("measurement failed: {0}")]
    MeasurementFailed(String),
    /// The backend cannot measure anything; the search must stop.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

pub trait CostBackend: Send + Sync {
    /// Runtime of `k`, aggregated over `reps` runs where that is meaningful.
    fn measure(&self, k: &Kernel, reps: u32) -> Result<f64, BackendError>;

    /// Whether several threads may call `measure` at the same time.
    fn concurrency_safe(&self) -> bool;

    /// Unit of the numbers returned by `measure`.
    fn unit(&self) -> &'static str;
}

/// Deterministic scoreboard simulator. Repetitions collapse to one run.
#[derive(Debug, Clone, Default)]
pub struct Simulator {
    pub config: MachineConfig,
}

impl Simulator {
    pub fn new(config: MachineConfig) -> Self {
        Self { config }
    }
}

impl CostBackend for Simulator {
    fn measure(&self, k: &Kernel, _reps: u32) -> Result<f64, BackendError> {
        Ok(simulate(k, &self.config).total_cycles as f64)
    }

    fn concurrency_safe(&self) -> bool {
        true
    }

    fn unit(&self) -> &'static str {
        "cycles"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendDescriptor {
    #[default]
    Simulator,
    External {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default)]
        working_dir: Option<PathBuf>,
        #[serde(default)]
        concurrency_safe: bool,
    },
}

fn default_timeout() -> f64 {
    60.0
}

impl BackendDescriptor {
    pub fn build(&self, machine: &MachineConfig) -> Result<Box<dyn CostBackend>, BackendError> {
        Ok(match self {
            BackendDescriptor::Simulator => Box::new(Simulator::new(machine.clone())),
            BackendDescriptor::External {
                command,
                timeout_secs,
                working_dir,
                concurrency_safe,
            } => {
                if !timeout_secs.is_finite() || *timeout_secs <= 0.0 {
                    return Err(BackendError::Unavailable(format!(
                        "timeout must be positive, got {timeout_secs}"
                    )));
                }
                let mut ext = External::new(command)?;
                ext.timeout = Duration::from_secs_f64(*timeout_secs);
                ext.working_dir = working_dir.clone();
                ext.concurrency_safe = *concurrency_safe;
                Box::new(ext)
            }
        })
    }
}

/// Runs a user command per measurement.
///
/// The command line is split shell-style; every occurrence of
/// `{schedule_file}` is replaced by a temporary `.sass` path. The command must
/// exit 0 and print exactly one non-empty line, `{"time_ms": <float>}`.
#[derive(Debug, Clone)]
pub struct External {
    argv: Vec<String>,
    pub timeout: Duration,
    pub working_dir: Option<PathBuf>,
    pub concurrency_safe: bool,
}

impl External {
    pub fn new(template: &str) -> Result<Self, BackendError> {
        let argv = shlex::split(template)
            .ok_or_else(|| BackendError::Unavailable(format!("cannot split command `{template}`")))?;
        if argv.is_empty() {
            return Err(BackendError::Unavailable("empty command".into()));
        }
        if !argv.iter().any(|a| a.contains(SCHEDULE_PLACEHOLDER)) {
            return Err(BackendError::Unavailable(format!(
                "command must mention {SCHEDULE_PLACEHOLDER}"
            )));
        }
        Ok(Self {
            argv,
            timeout: Duration::from_secs_f64(default_timeout()),
            working_dir: None,
            concurrency_safe: false,
        })
    }

    fn run_once(&self, text: &str) -> Result<f64, BackendError> {
        let failed = BackendError::MeasurementFailed;
        let mut file = tempfile::Builder::new()
            .prefix("schedule-")
            .suffix(".sass")
            .tempfile()
            .map_err(|e| BackendError::Unavailable(format!("temp file: {e}")))?;
        file.write_all(text.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| BackendError::Unavailable(format!("temp file: {e}")))?;
        let path = file.path().to_string_lossy().into_owned();

        let args: Vec<String> = self
            .argv
            .iter()
            .map(|a| a.replace(SCHEDULE_PLACEHOLDER, &path))
            .collect();
        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.working_dir {
            cmd.current_dir(dir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| BackendError::Unavailable(format!("cannot run `{}`: {e}", args[0])))?;

        // drain pipes on threads so a chatty child cannot block on a full pipe
        let mut out_pipe = child.stdout.take().expect("piped");
        let mut err_pipe = child.stderr.take().expect("piped");
        let out = thread::spawn(move || {
            let mut s = String::new();
            out_pipe.read_to_string(&mut s).map(|_| s)
        });
        let err = thread::spawn(move || {
            let mut s = String::new();
            let _ = err_pipe.read_to_string(&mut s);
            s
        });

        let status = match child.wait_timeout(self.timeout) {
            Ok(Some(status)) => status,
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(failed(format!("timed out after {:?}", self.timeout)));
            }
            Err(e) => return Err(failed(format!("wait: {e}"))),
        };
        let stdout = out
            .join()
            .expect("reader thread")
            .map_err(|e| failed(format!("stdout is not UTF-8: {e}")))?;
        let stderr = err.join().expect("reader thread");

        if !status.success() {
            return Err(failed(format!("{status}; stderr: {}", stderr.trim())));
        }
        let after = std::fs::read(file.path()).map_err(|e| failed(format!("schedule file: {e}")))?;
        if after != text.as_bytes() {
            return Err(failed("command modified the schedule file".into()));
        }
        parse_time_line(&stdout).map_err(failed)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TimeLine {
    time_ms: f64,
}

/// Parses adapter stdout: exactly one non-empty line holding
/// `{"time_ms": <nonnegative float>}`.
pub fn parse_time_line(stdout: &str) -> Result<f64, String> {
    let lines: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty()).collect();
    let [line] = lines.as_slice() else {
        return Err(format!("expected exactly one output line, got {}", lines.len()));
    };
    let parsed: TimeLine =
        serde_json::from_str(line.trim()).map_err(|e| format!("malformed output `{line}`: {e}"))?;
    if !parsed.time_ms.is_finite() || parsed.time_ms < 0.0 {
        return Err(format!("time_ms must be a nonnegative number, got {}", parsed.time_ms));
    }
    Ok(parsed.time_ms)
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

impl CostBackend for External {
    fn measure(&self, k: &Kernel, reps: u32) -> Result<f64, BackendError> {
        let text = serialize_kernel(k);
        let mut times = (0..reps.max(1))
            .map(|_| self.run_once(&text))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(median(&mut times).expect("at least one repetition"))
    }

    fn concurrency_safe(&self) -> bool {
        self.concurrency_safe
    }

    fn unit(&self) -> &'static str {
        "ms"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::parse_kernel;

    #[test]
    fn simulator_on_empty_kernel() {
        let k = parse_kernel("").unwrap();
        assert_eq!(Simulator::default().measure(&k, 5).unwrap(), 0.0);
    }

    #[test]
    fn time_line_grammar() {
        assert_eq!(parse_time_line("{\"time_ms\": 1.5}\n"), Ok(1.5));
        assert_eq!(parse_time_line("\n{\"time_ms\":0}\n\n"), Ok(0.0));
        assert!(parse_time_line("").is_err());
        assert!(parse_time_line("{\"time_ms\": 1}\n{\"time_ms\": 2}\n").is_err());
        assert!(parse_time_line("{\"time_ms\": -1}").is_err());
        assert!(parse_time_line("{\"time_ms\": \"1\"}").is_err());
        assert!(parse_time_line("{\"time_ms\": 1, \"extra\": 2}").is_err());
        assert!(parse_time_line("time_ms=1").is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn template_needs_placeholder() {
        assert!(matches!(External::new("true"), Err(BackendError::Unavailable(_))));
        assert!(matches!(External::new(""), Err(BackendError::Unavailable(_))));
        assert!(External::new("sh -c 'cat {schedule_file} >/dev/null'").is_ok());
    }

    #[test]
    fn descriptor_json() {
        let d: BackendDescriptor =
            serde_json::from_str(r#"{"kind": "external", "command": "run {schedule_file}"}"#).unwrap();
        assert_eq!(
            d,
            BackendDescriptor::External {
                command: "run {schedule_file}".into(),
                timeout_secs: 60.0,
                working_dir: None,
                concurrency_safe: false,
            }
        );
        let d: BackendDescriptor = serde_json::from_str(r#"{"kind": "simulator"}"#).unwrap();
        assert_eq!(d, BackendDescriptor::Simulator);
    }
}
