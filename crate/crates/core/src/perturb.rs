//! Search space and mutation policy: only global-memory instructions move,
//! one slot up or down per step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::{Blocker, DepGraph, DepOptions, EdgeKind};
use crate::ir::Kernel;

/// Schedule positions of the movable (global-memory) instructions, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    positions: Vec<usize>,
}

impl CandidateSet {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, candidate: usize) -> Option<usize> {
        self.positions.get(candidate).copied()
    }
}

pub fn candidates(k: &Kernel) -> CandidateSet {
    CandidateSet {
        positions: k
            .schedule()
            .iter()
            .enumerate()
            .filter(|(_, ins)| ins.klass().is_global_memory())
            .map(|(i, _)| i)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Toward the start of the schedule.
    Up,
    Down,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

/// Which candidate to move and where: an index into the [`CandidateSet`]
/// and a direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub candidate: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerturbError {
    #[error("kernel has no global-memory instructions to move")]
    NoCandidates,
}

/// Draws a candidate and a direction uniformly.
pub fn sample_action<R: Rng + ?Sized>(cs: &CandidateSet, rng: &mut R) -> Result<Action, PerturbError> {
    if cs.is_empty() {
        return Err(PerturbError::NoCandidates);
    }
    let draw = rng.gen_range(0..2 * cs.len());
    Ok(Action {
        candidate: draw / 2,
        direction: if draw % 2 == 0 { Direction::Up } else { Direction::Down },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum MoveRejected {
    #[error("move leaves the schedule or crosses a block fence")]
    Boundary,
    #[error("move would break a {0:?} dependency")]
    Dependency(EdgeKind),
    #[error("candidate index {0} out of range")]
    UnknownCandidate(usize),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MoveOptions {
    /// Ignore dependency edges; block fences still apply.
    pub unsafe_moves: bool,
    pub deps: DepOptions,
}

/// Result of an accepted move.
#[derive(Debug, Clone)]
pub struct Moved {
    pub kernel: Kernel,
    pub graph: DepGraph,
    /// The exchanged pair was `(swapped_at, swapped_at + 1)`.
    pub swapped_at: usize,
}

/// Moves the instruction at `pos` one slot in `direction`.
pub fn move_at(
    k: &Kernel,
    g: &DepGraph,
    pos: usize,
    direction: Direction,
    opts: &MoveOptions,
) -> Result<Moved, MoveRejected> {
    let upper = match direction {
        Direction::Up => pos.checked_sub(1).ok_or(MoveRejected::Boundary)?,
        Direction::Down => pos,
    };
    if upper + 1 >= k.len() {
        return Err(MoveRejected::Boundary);
    }
    match g.blocker(upper) {
        None => {}
        Some(Blocker::Boundary) => return Err(MoveRejected::Boundary),
        Some(Blocker::Dependency(kind)) if !opts.unsafe_moves => {
            return Err(MoveRejected::Dependency(kind))
        }
        Some(Blocker::Dependency(_)) => {}
    }
    let kernel = k.with_swapped(upper);
    let graph = DepGraph::build_with(&kernel, &opts.deps);
    Ok(Moved {
        kernel,
        graph,
        swapped_at: upper,
    })
}

/// Applies an action to a kernel, returning a new kernel and its rebuilt graph.
pub fn apply(k: &Kernel, g: &DepGraph, a: Action, opts: &MoveOptions) -> Result<Moved, MoveRejected> {
    let pos = candidates(k)
        .position(a.candidate)
        .ok_or(MoveRejected::UnknownCandidate(a.candidate))?;
    move_at(k, g, pos, a.direction, opts)
}
