//! Shortest adjacent-swap sequence turning one schedule into another.

use std::collections::HashMap;

use sass_sched::ir::{Instruction, Kernel};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Swap {
    /// Slots `at` and `at + 1` were exchanged.
    pub at: usize,
    /// Instruction that moved from `at + 1` to `at`.
    pub raised: String,
    /// Instruction that moved from `at` to `at + 1`.
    pub lowered: String,
}

fn key(ins: &Instruction) -> String {
    if ins.has_explicit_control() {
        format!("{} {}", ins.control(), ins.body())
    } else {
        ins.body()
    }
}

/// Swaps that reorder `a` into `b`, in application order. The count equals
/// the number of inversions, which is minimal for adjacent exchanges.
/// Identical instructions keep their relative order.
pub fn swap_sequence(a: &Kernel, b: &Kernel) -> Result<Vec<Swap>, String> {
    if a.len() != b.len() {
        return Err(format!("schedules differ in length: {} vs {}", a.len(), b.len()));
    }
    let mut slots: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, ins) in b.schedule().iter().enumerate().rev() {
        slots.entry(key(ins)).or_default().push(i);
    }
    // target[i]: where a's i-th instruction sits in b
    let mut target = Vec::with_capacity(a.len());
    for ins in a.schedule() {
        let pos = slots
            .get_mut(&key(ins))
            .and_then(Vec::pop)
            .ok_or_else(|| format!("`{}` has no counterpart in the second schedule", ins.body()))?;
        target.push(pos);
    }

    let mut order: Vec<usize> = (0..a.len()).collect();
    let mut swaps = Vec::new();
    for want in 0..target.len() {
        let mut p = (want..order.len())
            .find(|&p| target[order[p]] == want)
            .expect("target is a permutation");
        while p > want {
            swaps.push(Swap {
                at: p - 1,
                raised: a.schedule()[order[p]].body(),
                lowered: a.schedule()[order[p - 1]].body(),
            });
            order.swap(p - 1, p);
            p -= 1;
        }
    }
    Ok(swaps)
}
