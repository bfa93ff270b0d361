//! The `optimize` command: search, test the winners, report and store.

use std::fmt::Write as _;

use sass_sched::anneal::{chain_seed, run_chains, AnnealError, AnnealState, Outcome};
use sass_sched::backend::BackendDescriptor;
use sass_sched::depgraph::DepGraph;
use sass_sched::perturb::candidates;
use sass_sched::testing::{run_tests, DifferentialTester, RunOptions, TestPlan, Tester};
use sass_sched::text::serialize_kernel;
use serde_json::json;

use crate::config::{parse_backend_flag, RunConfig};
use crate::store::{Record, Store, Stored};
use crate::{emit, load_kernel, CliError, OptimizeArgs};

/// Final verdict on one chain's best schedule.
struct Verdict {
    status: &'static str,
    summary: String,
    json: serde_json::Value,
}

impl Verdict {
    /// Whether the schedule may become the stored best.
    fn eligible(&self) -> bool {
        matches!(self.status, "pass" | "untested")
    }
}

fn verify(state: &AnnealState, k0: &sass_sched::ir::Kernel, plan: Option<&TestPlan>, fail_fast: bool) -> Verdict {
    let Some(plan) = plan else {
        return Verdict {
            status: "untested",
            summary: "untested".into(),
            json: json!({ "status": "untested" }),
        };
    };
    let opts = RunOptions { fail_fast, ..RunOptions::default() };
    match run_tests(k0, &state.best, plan, &opts) {
        Ok(v) => {
            let status = if v.is_pass() { "pass" } else { "fail" };
            Verdict {
                status,
                summary: format!("{status} {}/{}", v.passed, v.passed + v.failed),
                json: json!({ "status": status, "verdict": v }),
            }
        }
        Err(e) => Verdict {
            status: "inconclusive",
            summary: format!("inconclusive ({e})"),
            json: json!({ "status": "inconclusive", "detail": e.to_string() }),
        },
    }
}

fn percent(t0: f64, t: f64) -> f64 {
    (t0 - t) / t0 * 100.0
}

pub fn run(args: &OptimizeArgs) -> Result<u8, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.anneal.seed = seed;
    }
    if args.unsafe_moves {
        cfg.anneal.unsafe_moves = true;
    }
    if let Some(flag) = &args.backend {
        cfg.backend = parse_backend_flag(flag, &cfg.backend)?;
    }
    if let Some(n) = args.tests {
        match cfg.test.as_mut() {
            Some(plan) => plan.sample_count = n,
            None => return Err(CliError::Input("--tests needs a [test] section in the config".into())),
        }
    }
    if args.chains == 0 {
        return Err(CliError::Input("--chains must be at least 1".into()));
    }
    cfg.anneal.validate().map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(plan) = &cfg.test {
        plan.validate().map_err(|e| CliError::Input(e.to_string()))?;
    }

    let (text, k0) = load_kernel(&args.input)?;
    if let Some(path) = &args.emit_deps {
        let dot = DepGraph::build(&k0).to_dot(&k0);
        std::fs::write(path, dot).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    let movable = candidates(&k0).len();
    if movable == 0 {
        return Err(CliError::NoCandidates(format!(
            "{}: empty candidate set, the kernel has no global-memory instructions to move",
            args.input.display()
        )));
    }

    let backend = cfg.backend.build(&cfg.machine).map_err(|e| CliError::Backend(e.to_string()))?;
    let search_tester = cfg.test.as_ref().map(|plan| DifferentialTester {
        plan: TestPlan {
            sample_count: cfg.anneal.tests_per_step.max(1),
            ..plan.clone()
        },
        interp: Default::default(),
    });
    let tester = search_tester.as_ref().map(|t| t as &dyn Tester);

    let results = run_chains(&k0, backend.as_ref(), tester, &cfg.anneal, args.chains);
    let mut states = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => states.push(s),
            Err(AnnealError::NoCandidates(e)) => return Err(CliError::NoCandidates(e.to_string())),
            Err(e @ (AnnealError::Baseline(_) | AnnealError::Aborted { .. })) => {
                return Err(CliError::Backend(e.to_string()))
            }
            Err(e) => return Err(CliError::Input(e.to_string())),
        }
    }

    let unit = backend.unit();
    let t0 = states[0].t0;
    let backend_name = match &cfg.backend {
        BackendDescriptor::Simulator => "simulator".to_string(),
        BackendDescriptor::External { command, .. } => format!("external `{command}`"),
    };
    let mut report = String::new();
    let file_name = args.input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    writeln!(report, "kernel: {file_name} ({} instructions, {movable} movable)", k0.len()).unwrap();
    writeln!(report, "backend: {backend_name}").unwrap();
    writeln!(report, "baseline: {t0} {unit}").unwrap();
    writeln!(
        report,
        "search: {} chain(s) x {} iterations, seed {}",
        args.chains,
        cfg.anneal.iterations(),
        cfg.anneal.seed
    )
    .unwrap();

    let mut verdicts = Vec::with_capacity(states.len());
    for (c, s) in states.iter().enumerate() {
        let count = |o: Outcome| s.history.iter().filter(|h| h.outcome == o).count();
        let accepted = s.history.iter().filter(|h| h.accepted).count();
        let v = verify(s, &k0, cfg.test.as_ref(), args.fail_fast);
        writeln!(
            report,
            "chain {c} (seed {}): best {} {unit} ({:.2}% faster), {accepted} accepted, {} illegal, \
             {} test failures, {} failed measurements, {} inconclusive tests, final test {}",
            chain_seed(cfg.anneal.seed, c),
            s.best_time,
            percent(t0, s.best_time),
            count(Outcome::Illegal),
            count(Outcome::TestFailed),
            count(Outcome::MeasurementFailed),
            s.inconclusive_tests,
            v.summary,
        )
        .unwrap();
        verdicts.push(v);
    }

    // greedy rank: fastest eligible schedule, earliest chain on ties
    let winner = (0..states.len())
        .filter(|&c| verdicts[c].eligible() && states[c].best_time < t0)
        .min_by(|&a, &b| states[a].best_time.total_cmp(&states[b].best_time).then(a.cmp(&b)));
    let passing = verdicts.iter().filter(|v| v.status == "pass").count();
    match winner {
        Some(c) => writeln!(
            report,
            "best: chain {c}, {} {unit}, improvement {:.2}%",
            states[c].best_time,
            percent(t0, states[c].best_time)
        )
        .unwrap(),
        None => writeln!(report, "best: input schedule kept, improvement 0.00%").unwrap(),
    }
    if cfg.test.is_some() {
        writeln!(report, "tests: {passing}/{} chain results passed", states.len()).unwrap();
    } else {
        writeln!(report, "tests: none configured, results are untested").unwrap();
    }
    emit(&report);

    let best_text = match winner {
        Some(c) => serialize_kernel(&states[c].best),
        None => text.clone(),
    };
    if let Some(path) = &args.output {
        std::fs::write(path, &best_text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }

    if let Some(root) = &args.store {
        let mut store = Store::open(root, &text, unit, t0)?;
        for (c, (s, v)) in states.iter().zip(&verdicts).enumerate() {
            let seed = chain_seed(cfg.anneal.seed, c);
            let verdict = json!({ "time": s.best_time, "unit": unit, "test": v.json });
            let candidate = serialize_kernel(&s.best);
            let history = s.history_jsonl();
            let verdict = format!("{}\n", serde_json::to_string_pretty(&verdict).expect("verdict serializes"));
            let stored = store.record(&Record {
                seed,
                time: s.best_time,
                status: v.status,
                eligible: v.eligible(),
                candidate: &candidate,
                history: &history,
                verdict: &verdict,
            })?;
            let what = match stored {
                Stored::NewBest => "stored, new best",
                Stored::Written => "stored",
                Stored::Kept => "already stored, kept",
            };
            eprintln!("{}: seed {seed} {what}", store.dir().display());
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_is_relative_to_baseline() {
        assert_eq!(percent(200.0, 150.0), 25.0);
        assert_eq!(percent(100.0, 100.0), 0.0);
    }

    #[test]
    fn untested_and_passing_results_are_eligible() {
        let v = |status| Verdict { status, summary: String::new(), json: json!(null) };
        assert!(v("pass").eligible());
        assert!(v("untested").eligible());
        assert!(!v("fail").eligible());
        assert!(!v("inconclusive").eligible());
    }
}
