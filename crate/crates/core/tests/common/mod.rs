//! Helpers shared by the integration tests: a seeded generator of
//! latency-bound kernels and an exhaustive search over nearby schedules.

#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sass_sched::depgraph::DepGraph;
use sass_sched::ir::Kernel;
use sass_sched::machine::{simulate, MachineConfig};
use sass_sched::perturb::candidates;
use sass_sched::text::parse_kernel;

/// A kernel of 2 or 3 groups. Each group runs some independent multiplies,
/// issues one to three global loads on their own barriers and then a
/// consumer that waits for all of them. Loads only depend on the prologue, so
/// hoisting them above earlier compute (or earlier consumers) overlaps their
/// latency. A final store of the last consumer's result is also movable.
///
/// Every register read is initialized, so the kernel is interpretable with
/// argument 0 as a 64-word input buffer and argument 1 as a 1-word output.
pub fn latency_kernel(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut line = |cc: &str, body: String| out.push_str(&format!("{cc} {body} ;\n"));
    let plain = |stall: u32| format!("[B------:R-:W-:-:S{stall:02}]");

    line(&plain(1), "MOV R2, c[0x0][0x160]".into());
    line(&plain(1), "MOV R3, c[0x0][0x164]".into());
    line(&plain(1), "MOV R4, c[0x0][0x168]".into());
    line(&plain(1), "MOV R5, c[0x0][0x16c]".into());
    line(&plain(1), "MOV R20, 0x3".into());
    line(&plain(1), "MOV R21, 0x5".into());
    line(&plain(2), "MOV R22, 0x7".into());

    let groups = rng.gen_range(2..=3);
    let mut loads_left = 6;
    let mut next_load_reg = 40;
    let mut next_tmp = 10;
    let mut barrier = 0u8;
    let mut acc = None;
    for g in 0..groups {
        let remaining_groups = groups - g;
        let max_here = (loads_left - (remaining_groups - 1)).min(3);
        let n_loads = rng.gen_range(1..=max_here);
        loads_left -= n_loads;

        for _ in 0..rng.gen_range(1..=4) {
            let stall = rng.gen_range(4..=12);
            line(&plain(stall), format!("IMAD R{next_tmp}, R20, R21, R22"));
            next_tmp += 1;
        }
        let mut mask = String::from("------");
        let mut regs = Vec::new();
        for _ in 0..n_loads {
            let offset = 4 * rng.gen_range(0..64);
            let cc = format!("[B------:R-:W{barrier}:-:S01]");
            line(&cc, format!("LDG.E R{next_load_reg}, [R2.64+{offset:#x}]"));
            mask.replace_range(barrier as usize..barrier as usize + 1, &barrier.to_string());
            regs.push(next_load_reg);
            next_load_reg += 1;
            barrier += 1;
        }
        for _ in 0..rng.gen_range(0..=2) {
            let stall = rng.gen_range(4..=12);
            line(&plain(stall), format!("IMAD R{next_tmp}, R21, R22, R20"));
            next_tmp += 1;
        }
        let dst = 60 + g;
        let prev = acc.map_or("RZ".to_string(), |r: usize| format!("R{r}"));
        let first = format!("R{}", regs[0]);
        let second = regs.get(1).map_or("RZ".to_string(), |r| format!("R{r}"));
        line(&format!("[B{mask}:R-:W-:-:S04]"), format!("IADD3 R{dst}, {first}, {second}, {prev}"));
        if let Some(&third) = regs.get(2) {
            line(&plain(4), format!("IADD3 R{dst}, R{dst}, R{third}, RZ"));
        }
        acc = Some(dst);
    }
    line(&plain(1), format!("STG.E [R4.64], R{}", acc.expect("at least one group")));
    line(&plain(5), "EXIT".into());
    out
}

pub fn sim_cycles(k: &Kernel) -> u64 {
    simulate(k, &MachineConfig::default()).total_cycles
}

/// Minimum simulated cycles over every schedule reachable from `k` by legal
/// one-slot moves of movable instructions, where no movable instruction ever
/// strays more than `window` slots from where it started. Returns the
/// optimum and the number of schedules visited.
pub fn brute_force_optimum(k: &Kernel, window: usize) -> (u64, usize) {
    let start: Vec<usize> = (0..k.len()).collect();
    let movable: HashSet<usize> = candidates(k).positions().iter().copied().collect();
    let mut seen = HashSet::from([start.clone()]);
    let mut queue = VecDeque::from([start]);
    let mut best = u64::MAX;
    while let Some(order) = queue.pop_front() {
        let kernel = k.permuted(&order);
        best = best.min(sim_cycles(&kernel));
        let graph = DepGraph::build(&kernel);
        for pos in 0..order.len() {
            if !movable.contains(&order[pos]) {
                continue;
            }
            for upper in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
                if upper + 1 >= order.len() || !graph.swap_legal(upper) {
                    continue;
                }
                let mut next = order.clone();
                next.swap(upper, upper + 1);
                let within = [upper, upper + 1]
                    .iter()
                    .all(|&i| !movable.contains(&next[i]) || next[i].abs_diff(i) <= window);
                if within && seen.insert(next.clone()) {
                    queue.push_back(next);
                }
            }
        }
    }
    (best, seen.len())
}

pub fn parse(text: &str) -> Kernel {
    parse_kernel(text).expect("test kernel parses")
}

/// Seven-instruction prologue, `m` independent multiplies of stall 5, then a
/// global load whose consumer waits on its barrier, and a store of the sum.
pub fn producer_consumer_kernel(m: usize) -> String {
    let mut out = String::from(
        "[B------:R-:W-:-:S01] MOV R20, 0x3 ;\n\
         [B------:R-:W-:-:S01] MOV R21, 0x5 ;\n\
         [B------:R-:W-:-:S01] MOV R22, 0x7 ;\n\
         [B------:R-:W-:-:S01] MOV R2, c[0x0][0x160] ;\n\
         [B------:R-:W-:-:S01] MOV R3, c[0x0][0x164] ;\n\
         [B------:R-:W-:-:S01] MOV R4, c[0x0][0x168] ;\n\
         [B------:R-:W-:-:S02] MOV R5, c[0x0][0x16c] ;\n",
    );
    for j in 0..m {
        out.push_str(&format!("[B------:R-:W-:-:S05] IMAD R{}, R20, R21, R22 ;\n", 10 + j));
    }
    out.push_str(
        "[B------:R-:W0:-:S01] LDG.E R0, [R2.64+0x8] ;\n\
         [B0-----:R-:W-:-:S04] IADD3 R6, R0, R10, RZ ;\n\
         [B------:R-:W-:-:S01] STG.E [R4.64], R6 ;\n\
         [B------:R-:W-:-:S05] EXIT ;\n",
    );
    out
}

pub fn corpus_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus").join(name)
}

pub fn corpus(name: &str) -> String {
    std::fs::read_to_string(corpus_path(name)).expect("corpus file")
}
