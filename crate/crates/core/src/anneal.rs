//! Simulated-annealing search over schedules.
//!
//! Energy is measured runtime divided by the baseline runtime `t0`, so the
//! acceptance probability `exp(-ΔE / T)` does not depend on the backend's unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CostBackend};
use crate::depgraph::DepGraph;
use crate::ir::Kernel;
use crate::perturb::{apply, candidates, sample_action, Action, MoveOptions, MoveRejected, PerturbError};
use crate::testing::{Check, Tester};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub t_max: f64,
    pub t_min: f64,
    /// Temperature divisor applied after every iteration.
    pub cooling: f64,
    pub seed: u64,
    /// Repetitions per measurement; the median is used.
    pub measure_reps: u32,
    /// Samples run against each proposed schedule; 0 disables testing.
    pub tests_per_step: usize,
    /// Ignore dependency edges when moving (block fences still hold).
    pub unsafe_moves: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            t_min: 0.01,
            cooling: 1.05,
            seed: 0,
            measure_reps: 5,
            tests_per_step: 32,
            unsafe_moves: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnealError {
    #[error("invalid annealing config: {0}")]
    InvalidConfig(String),
    #[error("baseline time must be positive, got {0}")]
    InvalidBaseline(f64),
    #[error(transparent)]
    NoCandidates(#[from] PerturbError),
    #[error("baseline measurement failed: {0}")]
    Baseline(BackendError),
    /// The backend stopped working; `partial` holds everything done so far.
    #[error("search aborted after {} iterations: {source}", partial.history.len())]
    Aborted {
        source: BackendError,
        partial: Box<AnnealState>,
    },
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<(), AnnealError> {
        let bad = |m: String| Err(AnnealError::InvalidConfig(m));
        if !(self.t_min.is_finite() && self.t_min > 0.0) {
            return bad(format!("t_min must be positive, got {}", self.t_min));
        }
        if !(self.t_max.is_finite() && self.t_max >= self.t_min) {
            return bad(format!("t_max must be at least t_min, got {}", self.t_max));
        }
        if !(self.cooling.is_finite() && self.cooling > 1.0) {
            return bad(format!("cooling must exceed 1, got {}", self.cooling));
        }
        if self.measure_reps < 3 {
            return bad(format!("measure_reps must be at least 3, got {}", self.measure_reps));
        }
        Ok(())
    }

    /// Number of loop iterations: `ceil(ln(t_max / t_min) / ln(cooling))`.
    pub fn iterations(&self) -> usize {
        let x = (self.t_max / self.t_min).ln() / self.cooling.ln();
        // absorb rounding when the ratio is an exact power of the divisor
        let x = if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
        x.ceil().max(0.0) as usize
    }

    /// Temperature during iteration `k`.
    pub fn temperature(&self, k: usize) -> f64 {
        self.t_max / self.cooling.powi(k as i32)
    }
}

/// `(t_prev - t_curr) / t0`: positive when the step made things faster.
pub fn feedback(t0: f64, t_prev: f64, t_curr: f64) -> Result<f64, AnnealError> {
    if !(t0 > 0.0) {
        return Err(AnnealError::InvalidBaseline(t0));
    }
    Ok((t_prev - t_curr) / t0)
}

/// Metropolis rule: improvements are always taken; otherwise accept when
/// `r < exp(-ΔE / T)` for a uniform `r` in `[0, 1)`.
pub fn metropolis<R: Rng + ?Sized>(delta_e: f64, temperature: f64, rng: &mut R) -> bool {
    if delta_e < 0.0 {
        return true;
    }
    let r: f64 = rng.gen();
    r < (-delta_e / temperature).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Lower energy; taken.
    Improved,
    /// Equal or higher energy; taken by the Metropolis draw.
    AcceptedWorse,
    /// Equal or higher energy; refused by the Metropolis draw.
    RejectedWorse,
    /// The move crossed a fence or broke a dependency.
    Illegal,
    /// The candidate disagreed with the reference on some test sample.
    TestFailed,
    /// The backend could not time the candidate.
    MeasurementFailed,
}

/// One history record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Step {
    pub iteration: usize,
    pub temperature: f64,
    pub action: Action,
    pub outcome: Outcome,
    pub accepted: bool,
    /// Energy of the proposed schedule, when it was measured.
    pub candidate_energy: Option<f64>,
    /// Energy of the current schedule after this step.
    pub energy: f64,
    pub best_energy: f64,
    /// Runtime improvement relative to the baseline; 0 for discarded steps.
    pub feedback: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AnnealState {
    pub current: Kernel,
    pub best: Kernel,
    pub temperature: f64,
    /// Baseline runtime of the input schedule.
    pub t0: f64,
    pub current_time: f64,
    pub best_time: f64,
    pub history: Vec<Step>,
    /// Steps whose test run was inconclusive; the candidate was kept.
    pub inconclusive_tests: usize,
}

impl PartialEq for AnnealState {
    fn eq(&self, other: &Self) -> bool {
        self.current == other.current
            && self.best == other.best
            && self.temperature == other.temperature
            && self.history == other.history
    }
}

impl AnnealState {
    pub fn best_energy(&self) -> f64 {
        self.best_time / self.t0
    }

    /// History as JSON lines.
    pub fn history_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.history {
            out.push_str(&serde_json::to_string(s).expect("history serializes"));
            out.push('\n');
        }
        out
    }
}

/// Runs one annealing chain from `k0`.
///
/// Each iteration draws one move; an illegal move, a failing test or a failed
/// measurement discards the proposal and still uses up the iteration.
pub fn anneal(
    k0: &Kernel,
    backend: &dyn CostBackend,
    tester: Option<&dyn Tester>,
    cfg: &AnnealConfig,
) -> Result<AnnealState, AnnealError> {
    cfg.validate()?;
    let cs = candidates(k0);
    if cs.is_empty() {
        return Err(PerturbError::NoCandidates.into());
    }
    let t0 = backend.measure(k0, cfg.measure_reps).map_err(AnnealError::Baseline)?;
    if !(t0 > 0.0) {
        return Err(AnnealError::InvalidBaseline(t0));
    }

    let moves = MoveOptions {
        unsafe_moves: cfg.unsafe_moves,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graph = DepGraph::build_with(k0, &moves.deps);
    let mut state = AnnealState {
        current: k0.clone(),
        best: k0.clone(),
        temperature: cfg.t_max,
        t0,
        current_time: t0,
        best_time: t0,
        history: Vec::with_capacity(cfg.iterations()),
        inconclusive_tests: 0,
    };

    for iteration in 0..cfg.iterations() {
        let temperature = cfg.temperature(iteration);
        state.temperature = temperature;
        // the candidate set has a fixed size: moves only permute positions
        let action = sample_action(&cs, &mut rng)?;
        let mut step = Step {
            iteration,
            temperature,
            action,
            outcome: Outcome::Illegal,
            accepted: false,
            candidate_energy: None,
            energy: state.current_time / t0,
            best_energy: state.best_time / t0,
            feedback: 0.0,
            note: None,
        };

        let moved = match apply(&state.current, &graph, action, &moves) {
            Ok(m) => m,
            Err(reason) => {
                step.note = Some(rejection_note(reason));
                state.history.push(step);
                continue;
            }
        };

        if let Some(t) = tester.filter(|_| cfg.tests_per_step > 0) {
            match t.check(k0, &moved.kernel) {
                Check::Pass => {}
                Check::Fail => {
                    step.outcome = Outcome::TestFailed;
                    state.history.push(step);
                    continue;
                }
                Check::Inconclusive(why) => {
                    state.inconclusive_tests += 1;
                    step.note = Some(format!("test inconclusive: {why}"));
                }
            }
        }

        let time = match backend.measure(&moved.kernel, cfg.measure_reps) {
            Ok(t) => t,
            Err(BackendError::MeasurementFailed(detail)) => {
                step.outcome = Outcome::MeasurementFailed;
                step.note = Some(detail);
                state.history.push(step);
                continue;
            }
            Err(source) => {
                return Err(AnnealError::Aborted {
                    source,
                    partial: Box::new(state),
                })
            }
        };

        let delta_e = (time - state.current_time) / t0;
        step.candidate_energy = Some(time / t0);
        step.feedback = feedback(t0, state.current_time, time)?;
        if metropolis(delta_e, temperature, &mut rng) {
            step.accepted = true;
            step.outcome = if delta_e < 0.0 { Outcome::Improved } else { Outcome::AcceptedWorse };
            state.current = moved.kernel;
            graph = moved.graph;
            state.current_time = time;
            if time < state.best_time {
                state.best = state.current.clone();
                state.best_time = time;
            }
        } else {
            step.outcome = Outcome::RejectedWorse;
        }
        step.energy = state.current_time / t0;
        step.best_energy = state.best_time / t0;
        state.history.push(step);
    }
    state.temperature = cfg.temperature(cfg.iterations());
    Ok(state)
}

fn rejection_note(reason: MoveRejected) -> String {
    match reason {
        MoveRejected::Boundary => "boundary".into(),
        MoveRejected::Dependency(kind) => format!("dependency {kind:?}"),
        MoveRejected::UnknownCandidate(i) => format!("unknown candidate {i}"),
    }
}

/// Seed of chain `c` for a run seeded with `seed`.
pub fn chain_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_add(c as u64)
}

/// Runs `chains` independent chains, in parallel when the backend allows it.
/// Results are in chain order regardless of scheduling.
pub fn run_chains(
    k0: &Kernel,
    backend: &dyn CostBackend,
    tester: Option<&dyn Tester>,
    cfg: &AnnealConfig,
    chains: usize,
) -> Vec<Result<AnnealState, AnnealError>> {
    let run = |c: usize| {
        let cfg = AnnealConfig {
            seed: chain_seed(cfg.seed, c),
            ..cfg.clone()
        };
        anneal(k0, backend, tester, &cfg)
    };
    if backend.concurrency_safe() {
        (0..chains).into_par_iter().map(run).collect()
    } else {
        (0..chains).map(run).collect()
    }
}
