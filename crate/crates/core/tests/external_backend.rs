//! The external-command backend against small shell mocks.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use sass_sched::anneal::{anneal, AnnealConfig};
use sass_sched::backend::{BackendDescriptor, BackendError, CostBackend, External, Simulator};
use sass_sched::ir::Kernel;
use sass_sched::machine::MachineConfig;
use sass_sched::text::serialize_kernel;

use common::*;

fn script(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    format!("sh {} {{schedule_file}}", path.display())
}

fn vec_add() -> Kernel {
    parse(&corpus("vec_add.sass"))
}

#[test]
fn reads_time_from_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let ext = External::new(&script(dir.path(), "ok.sh", "echo '{\"time_ms\": 1.5}'\n")).unwrap();
    assert_eq!(ext.measure(&vec_add(), 3).unwrap(), 1.5);
    assert_eq!(ext.unit(), "ms");
    assert!(!ext.concurrency_safe());
}

#[test]
fn command_sees_the_serialized_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("seen.sass");
    let body = format!("cp \"$1\" {}\necho '{{\"time_ms\": 2}}'\n", copy.display());
    let ext = External::new(&script(dir.path(), "copy.sh", &body)).unwrap();
    let k = vec_add();
    ext.measure(&k, 1).unwrap();
    assert_eq!(std::fs::read_to_string(copy).unwrap(), serialize_kernel(&k));
}

#[test]
fn median_over_repetitions() {
    let dir = tempfile::tempdir().unwrap();
    let counter = dir.path().join("n");
    // emits 5, 1, 3, 5, 1, ... on successive runs
    let body = format!(
        "n=$(cat {c} 2>/dev/null || echo 0)\necho $((n + 1)) > {c}\n\
         case $((n % 3)) in 0) t=5;; 1) t=1;; *) t=3;; esac\n\
         echo \"{{\\\"time_ms\\\": $t}}\"\n",
        c = counter.display()
    );
    let ext = External::new(&script(dir.path(), "vary.sh", &body)).unwrap();
    assert_eq!(ext.measure(&vec_add(), 3).unwrap(), 3.0);
    assert_eq!(std::fs::read_to_string(&counter).unwrap().trim(), "3");
}

fn measurement_failed(body: &str) -> BackendError {
    let dir = tempfile::tempdir().unwrap();
    let mut ext = External::new(&script(dir.path(), "bad.sh", body)).unwrap();
    ext.timeout = Duration::from_millis(300);
    ext.measure(&vec_add(), 1).unwrap_err()
}

#[test]
fn nonzero_exit_is_a_failed_measurement() {
    let e = measurement_failed("echo '{\"time_ms\": 1}'\necho oops >&2\nexit 3\n");
    assert!(matches!(&e, BackendError::MeasurementFailed(m) if m.contains("oops")), "{e}");
}

#[test]
fn malformed_output_is_a_failed_measurement() {
    for body in [
        "echo 'time: 1'\n",
        "echo '{\"time_ms\": 1}'\necho '{\"time_ms\": 2}'\n",
        "echo '{\"time_ms\": -4}'\n",
        "echo '{\"time_ms\": 1, \"runs\": 3}'\n",
        "true\n",
    ] {
        assert!(matches!(measurement_failed(body), BackendError::MeasurementFailed(_)), "{body}");
    }
}

#[test]
fn timeout_is_a_failed_measurement() {
    let start = Instant::now();
    let e = measurement_failed("sleep 10\necho '{\"time_ms\": 1}'\n");
    assert!(matches!(&e, BackendError::MeasurementFailed(m) if m.contains("timed out")), "{e}");
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn modifying_the_schedule_is_a_failed_measurement() {
    let e = measurement_failed("echo '// tampered' >> \"$1\"\necho '{\"time_ms\": 1}'\n");
    assert!(matches!(&e, BackendError::MeasurementFailed(m) if m.contains("modified")), "{e}");
}

#[test]
fn missing_program_makes_the_backend_unavailable() {
    let ext = External::new("/nonexistent/adapter-binary {schedule_file}").unwrap();
    assert!(matches!(ext.measure(&vec_add(), 1), Err(BackendError::Unavailable(_))));
}

#[test]
fn working_dir_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("time.json"), "{\"time_ms\": 7.25}\n").unwrap();
    let d = BackendDescriptor::External {
        command: "cat time.json {schedule_file}".into(),
        timeout_secs: 5.0,
        working_dir: Some(dir.path().to_path_buf()),
        concurrency_safe: true,
    };
    // cat also echoes the schedule, so that output is malformed; use a shell instead
    assert!(d.build(&MachineConfig::default()).unwrap().measure(&vec_add(), 1).is_err());
    let d = BackendDescriptor::External {
        command: "sh -c 'cat time.json' {schedule_file}".into(),
        timeout_secs: 5.0,
        working_dir: Some(dir.path().to_path_buf()),
        concurrency_safe: true,
    };
    let b = d.build(&MachineConfig::default()).unwrap();
    assert!(b.concurrency_safe());
    assert_eq!(b.measure(&vec_add(), 1).unwrap(), 7.25);
}

/// Wraps another backend without exposing anything but `measure`.
struct Opaque<'a>(&'a dyn CostBackend);

impl CostBackend for Opaque<'_> {
    fn measure(&self, k: &Kernel, reps: u32) -> Result<f64, BackendError> {
        self.0.measure(k, reps)
    }
    fn concurrency_safe(&self) -> bool {
        false
    }
    fn unit(&self) -> &'static str {
        "opaque"
    }
}

#[test]
fn search_depends_only_on_measured_numbers() {
    let k = parse(&latency_kernel(3));
    let cfg = AnnealConfig { seed: 11, ..AnnealConfig::default() };
    let sim = Simulator::default();
    let direct = anneal(&k, &sim, None, &cfg).unwrap();
    let wrapped = anneal(&k, &Opaque(&sim), None, &cfg).unwrap();
    assert_eq!(direct.history_jsonl(), wrapped.history_jsonl());
    assert_eq!(serialize_kernel(&direct.best), serialize_kernel(&wrapped.best));
}

#[test]
fn annealing_through_an_external_command() {
    // time = line number of the last global load; hoisting loads lowers it
    let dir = tempfile::tempdir().unwrap();
    let body = "awk '/LDG/ { n = NR } END { printf \"{\\\"time_ms\\\": %d}\\n\", n }' \"$1\"\n";
    let ext = External::new(&script(dir.path(), "pos.sh", body)).unwrap();
    let k = parse(&latency_kernel(5));
    let cfg = AnnealConfig { seed: 2, t_max: 0.1, t_min: 0.05, measure_reps: 3, ..AnnealConfig::default() };
    let state = anneal(&k, &ext, None, &cfg).unwrap();
    assert!(state.history.len() == cfg.iterations());
    assert!(state.best_time <= state.t0);
    assert_eq!(ext.measure(&state.best, 1).unwrap(), state.best_time);
}
