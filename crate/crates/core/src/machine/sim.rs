use std::collections::HashMap;

use serde::Serialize;

use super::MachineConfig;
use crate::depgraph::reads_writes;
use crate::ir::{Kernel, Reg, BARRIER_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stall {
    pub index: usize,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimReport {
    pub total_cycles: u64,
    /// Issue cycle of every instruction, in schedule order.
    pub issue_cycles: Vec<u64>,
    /// Instructions that could not issue as soon as the pipeline allowed.
    pub stalls: Vec<Stall>,
    /// Cycles spent waiting, attributed to each barrier in the wait mask.
    pub barrier_wait_cycles: Vec<u64>,
}

impl SimReport {
    pub fn stall_of(&self, index: usize) -> u64 {
        self.stalls
            .iter()
            .find(|s| s.index == index)
            .map_or(0, |s| s.cycles)
    }
}

/// Runs the schedule through a single-warp, single-issue scoreboard.
///
/// Instruction `i + 1` may issue `max(1, stall_cycles(i))` cycles after `i`,
/// and not before every barrier in its wait mask has cleared and every
/// register it reads has been produced. Barriers set by an instruction clear,
/// and its destinations become ready, after its latency. The kernel finishes
/// when the last instruction has issued and all outstanding results are in.
pub fn simulate(k: &Kernel, cfg: &MachineConfig) -> SimReport {
    let mut reg_ready: HashMap<Reg, u64> = HashMap::new();
    let mut barrier_clear = [0u64; BARRIER_COUNT as usize];
    let mut barrier_wait_cycles = vec![0u64; cfg.barrier_count as usize];
    let mut issue_cycles = Vec::with_capacity(k.len());
    let mut stalls = Vec::new();
    let mut next_issue = 0u64;
    let mut drained = 0u64;

    for (i, ins) in k.schedule().iter().enumerate() {
        let cc = ins.control();
        let (reads, writes) = reads_writes(ins);

        let earliest = next_issue;
        let mut ready = earliest;
        for b in cc.waited_barriers() {
            let clear = barrier_clear[b as usize];
            if let Some(slot) = barrier_wait_cycles.get_mut(b as usize) {
                *slot += clear.saturating_sub(earliest);
            }
            ready = ready.max(clear);
        }
        for r in &reads {
            if let Some(&t) = reg_ready.get(r) {
                ready = ready.max(t);
            }
        }

        let issue = ready;
        if issue > earliest {
            stalls.push(Stall {
                index: i,
                cycles: issue - earliest,
            });
        }
        issue_cycles.push(issue);

        let done = issue + u64::from(cfg.latency(ins));
        for r in writes {
            reg_ready.insert(r, done);
        }
        for b in cc.set_barriers() {
            let slot = &mut barrier_clear[b as usize];
            *slot = (*slot).max(done);
        }
        drained = drained.max(done);
        next_issue = issue + u64::from(cc.stall_cycles().max(1));
    }

    SimReport {
        total_cycles: if k.is_empty() { 0 } else { next_issue.max(drained) },
        issue_cycles,
        stalls,
        barrier_wait_cycles,
    }
}
