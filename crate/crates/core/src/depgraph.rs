//! Dependency edges over schedule positions and the legality test for
//! exchanging two adjacent instructions.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::ir::{
    InstrClass, Instruction, Kernel, MemRef, Operand, OperandKind, Reg, BARRIER_COUNT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EdgeKind {
    RegRaw,
    RegWar,
    RegWaw,
    BarrierPair,
    MemOrder,
    BlockFence,
}

/// `from < to` always, so the graph is acyclic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

/// Why two adjacent instructions may not be exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocker {
    /// A label, control-flow instruction or barrier instruction separates them.
    Boundary,
    Dependency(EdgeKind),
}

#[derive(Debug, Clone, Copy)]
pub struct DepOptions {
    /// How many preceding instructions each memory access is compared with.
    pub alias_window: usize,
}

impl Default for DepOptions {
    fn default() -> Self {
        Self { alias_window: 64 }
    }
}

fn push_regs(set: &mut BTreeSet<Reg>, base: Reg, count: u8) {
    for n in 0..count as u16 {
        let r = base.offset(n);
        if !r.is_constant() {
            set.insert(r);
        }
    }
}

/// Register-looking tokens inside text we could not classify.
fn scan_registers(raw: &str) -> Vec<Reg> {
    raw.split(|c: char| !(c.is_ascii_alphanumeric()))
        .filter_map(Reg::parse)
        .filter(|r| !r.is_constant())
        .collect()
}

fn operand_reads(op: &Operand, data_regs: u8, reads: &mut BTreeSet<Reg>) {
    match &op.kind {
        OperandKind::Register { reg, regs, .. } => push_regs(reads, *reg, (*regs).max(data_regs)),
        OperandKind::Predicate { reg, .. } => push_regs(reads, *reg, 1),
        OperandKind::Memory(m) => reads.extend(m.address_regs().into_iter().filter(|r| !r.is_constant())),
        OperandKind::Descriptor { desc, mem } => {
            // descriptors occupy a uniform register pair
            push_regs(reads, *desc, 2);
            reads.extend(mem.address_regs().into_iter().filter(|r| !r.is_constant()));
        }
        OperandKind::Special(_) | OperandKind::Immediate(_) | OperandKind::ConstBank { .. } => {}
        OperandKind::Opaque => {}
    }
}

/// Registers read and written by one instruction.
///
/// Sources (including address bases and the guard predicate) are reads,
/// destinations are writes. `.WIDE` forms write a register pair and read the
/// addend as a pair; `.64`/`.128` widths widen load destinations and store
/// data. Operands of unknown shape add every register they mention to both
/// sets.
pub fn reads_writes(ins: &Instruction) -> (BTreeSet<Reg>, BTreeSet<Reg>) {
    let mut reads = BTreeSet::new();
    let mut writes = BTreeSet::new();

    if let Some(g) = ins.predicate() {
        push_regs(&mut reads, g.reg, 1);
    }

    let wide = ins.has_modifier("WIDE");
    let klass = ins.klass();
    let is_load = matches!(klass, InstrClass::GlobalLoad | InstrClass::SharedLoad);
    let is_store = matches!(klass, InstrClass::GlobalStore | InstrClass::SharedStore);

    for op in ins.dests() {
        match &op.kind {
            OperandKind::Register { reg, regs, .. } => {
                let width = if wide {
                    2
                } else if is_load {
                    ins.data_regs()
                } else {
                    1
                };
                push_regs(&mut writes, *reg, (*regs).max(width));
            }
            OperandKind::Predicate { reg, .. } => push_regs(&mut writes, *reg, 1),
            OperandKind::Opaque => {
                for r in scan_registers(&op.raw) {
                    reads.insert(r);
                    writes.insert(r);
                }
            }
            // odd shapes in destination position still name what they touch
            _ => operand_reads(op, 1, &mut reads),
        }
    }

    for (i, op) in ins.srcs().iter().enumerate() {
        if op.is_opaque() {
            for r in scan_registers(&op.raw) {
                reads.insert(r);
                writes.insert(r);
            }
            continue;
        }
        let width = if wide && i == 2 {
            2
        } else if is_store && op.memref().is_none() && !matches!(op.kind, OperandKind::Predicate { .. }) {
            ins.data_regs()
        } else {
            1
        };
        operand_reads(op, width, &mut reads);
    }

    (reads, writes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    Global,
    Shared,
    Generic,
}

#[derive(Debug, Clone)]
struct Access {
    space: Space,
    mem: MemRef,
    bytes: u32,
    write: bool,
    /// Address could not be parsed; aliases everything.
    unknown: bool,
    /// Reaching definition of each address register; equal keys mean the
    /// address registers hold the same values.
    defs: Vec<Option<usize>>,
}

fn memory_accesses(ins: &Instruction, last_writer: &HashMap<Reg, usize>) -> Vec<Access> {
    let mems: Vec<&MemRef> = ins.operands().filter_map(Operand::memref).collect();
    let bytes = ins.access_bytes();
    let make = |space, mem: &MemRef, write| Access {
        space,
        mem: *mem,
        bytes,
        write,
        unknown: false,
        defs: mem
            .address_regs()
            .iter()
            .map(|r| last_writer.get(r).copied())
            .collect(),
    };
    let opcode = ins.opcode();
    match (ins.klass(), mems.as_slice()) {
        (InstrClass::GlobalAsyncCopy, [dst, src, ..]) => {
            vec![make(Space::Shared, dst, true), make(Space::Global, src, false)]
        }
        (InstrClass::GlobalLoad, [m, ..]) => {
            let space = if opcode == "LD" { Space::Generic } else { Space::Global };
            vec![make(space, m, false)]
        }
        (InstrClass::GlobalStore, [m, ..]) => {
            let space = if opcode == "ST" { Space::Generic } else { Space::Global };
            vec![make(space, m, true)]
        }
        (InstrClass::SharedLoad, [m, ..]) => vec![make(Space::Shared, m, false)],
        (InstrClass::SharedStore, [m, ..]) => vec![make(Space::Shared, m, true)],
        (k, []) if k.is_memory() => vec![Access {
            space: Space::Generic,
            mem: MemRef {
                base: Reg::RZ,
                wide: false,
                uniform_offset: None,
                offset: 0,
            },
            bytes,
            write: true,
            unknown: true,
            defs: Vec::new(),
        }],
        (k, ms) if k.is_memory() || !ms.is_empty() => {
            // unfamiliar memory shape: every reference is a generic write
            ms.iter().map(|m| make(Space::Generic, m, true)).collect()
        }
        _ => Vec::new(),
    }
}

fn may_alias(a: &Access, b: &Access) -> bool {
    if !(a.write || b.write) {
        return false;
    }
    let spaces_meet = a.space == b.space || a.space == Space::Generic || b.space == Space::Generic;
    if !spaces_meet {
        return false;
    }
    if a.unknown || b.unknown {
        return true;
    }
    let same_address_regs = a.mem.base == b.mem.base
        && a.mem.wide == b.mem.wide
        && a.mem.uniform_offset == b.mem.uniform_offset
        && a.defs == b.defs;
    if !same_address_regs {
        return true;
    }
    let (a_lo, b_lo) = (a.mem.offset, b.mem.offset);
    let (a_hi, b_hi) = (a_lo + a.bytes as i64, b_lo + b.bytes as i64);
    a_lo < b_hi && b_lo < a_hi
}

/// Typed dependency edges over one schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepGraph {
    n: usize,
    edges: Vec<Edge>,
    /// Schedule gaps that a move may not cross (kernel cuts plus both sides
    /// of every barrier instruction).
    fences: Vec<usize>,
}

impl DepGraph {
    pub fn build(k: &Kernel) -> DepGraph {
        Self::build_with(k, &DepOptions::default())
    }

    pub fn build_with(k: &Kernel, opts: &DepOptions) -> DepGraph {
        let sched = k.schedule();
        let n = sched.len();
        let mut edges = Vec::new();

        let rw: Vec<_> = sched.iter().map(reads_writes).collect();
        let mut last_writer: HashMap<Reg, usize> = HashMap::new();
        let mut readers_since_write: HashMap<Reg, Vec<usize>> = HashMap::new();
        let mut last_setter: [Option<usize>; BARRIER_COUNT as usize] = [None; BARRIER_COUNT as usize];
        let mut accesses: Vec<(usize, Vec<Access>)> = Vec::new();

        for (j, ins) in sched.iter().enumerate() {
            let (reads, writes) = &rw[j];

            // memory accesses see the reaching definitions before `j` writes
            let acc = memory_accesses(ins, &last_writer);
            if !acc.is_empty() {
                let lo = j.saturating_sub(opts.alias_window);
                for (i, prev) in accesses.iter().rev().take_while(|(i, _)| *i >= lo) {
                    if prev.iter().any(|a| acc.iter().any(|b| may_alias(a, b))) {
                        edges.push(Edge { from: *i, to: j, kind: EdgeKind::MemOrder });
                    }
                }
            }

            for r in reads {
                if let Some(&i) = last_writer.get(r) {
                    edges.push(Edge { from: i, to: j, kind: EdgeKind::RegRaw });
                }
            }
            for r in writes {
                if let Some(rs) = readers_since_write.get(r) {
                    edges.extend(
                        rs.iter()
                            .filter(|&&i| i != j)
                            .map(|&i| Edge { from: i, to: j, kind: EdgeKind::RegWar }),
                    );
                }
                if let Some(&i) = last_writer.get(r) {
                    edges.push(Edge { from: i, to: j, kind: EdgeKind::RegWaw });
                }
            }
            for r in reads {
                readers_since_write.entry(*r).or_default().push(j);
            }
            for r in writes {
                last_writer.insert(*r, j);
                readers_since_write.remove(r);
            }

            let cc = ins.control();
            for b in cc.waited_barriers() {
                if let Some(i) = last_setter[b as usize] {
                    edges.push(Edge { from: i, to: j, kind: EdgeKind::BarrierPair });
                }
            }
            for b in cc.set_barriers() {
                last_setter[b as usize] = Some(j);
            }

            if !acc.is_empty() {
                accesses.push((j, acc));
            }
        }

        // barrier-class and control-flow instructions pin their whole block
        let mut fences: Vec<usize> = k.block_boundaries().to_vec();
        let mut block_start = 0;
        let cuts: Vec<usize> = k.block_boundaries().iter().copied().chain([n]).collect();
        for &block_end in &cuts {
            for f in block_start..block_end {
                if sched[f].klass().is_fence() {
                    edges.extend((block_start..f).map(|i| Edge { from: i, to: f, kind: EdgeKind::BlockFence }));
                    edges.extend((f + 1..block_end).map(|j| Edge { from: f, to: j, kind: EdgeKind::BlockFence }));
                    fences.push(f);
                    fences.push(f + 1);
                }
            }
            block_start = block_end;
        }
        fences.retain(|&g| g > 0 && g < n);
        fences.sort_unstable();
        fences.dedup();

        edges.sort_unstable();
        edges.dedup();
        DepGraph { n, edges, fences }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edges from `from` to `to`, if any.
    pub fn edges_between(&self, from: usize, to: usize) -> &[Edge] {
        let lo = self.edges.partition_point(|e| (e.from, e.to) < (from, to));
        let hi = self.edges.partition_point(|e| (e.from, e.to) <= (from, to));
        &self.edges[lo..hi]
    }

    /// What prevents exchanging positions `pos` and `pos + 1`, if anything.
    /// Positions past the end count as a boundary.
    pub fn blocker(&self, pos: usize) -> Option<Blocker> {
        if pos + 1 >= self.n || self.fences.binary_search(&(pos + 1)).is_ok() {
            return Some(Blocker::Boundary);
        }
        let between = self.edges_between(pos, pos + 1);
        if between.iter().any(|e| e.kind == EdgeKind::BlockFence) {
            return Some(Blocker::Boundary);
        }
        between.first().map(|e| Blocker::Dependency(e.kind))
    }

    /// Whether `schedule[pos]` and `schedule[pos + 1]` may exchange places.
    pub fn swap_legal(&self, pos: usize) -> bool {
        self.blocker(pos).is_none()
    }

    /// Graphviz rendering for debugging.
    pub fn to_dot(&self, k: &Kernel) -> String {
        let mut out = String::from("digraph deps {\n  node [shape=box, fontname=monospace];\n");
        for (i, ins) in k.schedule().iter().enumerate() {
            let label = ins.body().replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(out, "  n{i} [label=\"{i}: {label}\"];");
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::RegRaw => "color=black",
                EdgeKind::RegWar => "color=blue, style=dashed",
                EdgeKind::RegWaw => "color=blue",
                EdgeKind::BarrierPair => "color=red",
                EdgeKind::MemOrder => "color=darkgreen",
                EdgeKind::BlockFence => "color=gray, style=dotted",
            };
            let _ = writeln!(out, "  n{} -> n{} [label=\"{:?}\", {style}];", e.from, e.to, e.kind);
        }
        out.push_str("}\n");
        out
    }
}

/// Convenience: the legality test on a freshly built graph.
pub fn swap_legal(g: &DepGraph, k: &Kernel, pos: usize) -> bool {
    debug_assert_eq!(g.len(), k.len());
    g.swap_legal(pos)
}

/// Register names in a set, for messages and tests.
pub fn reg_names(set: &BTreeSet<Reg>) -> Vec<String> {
    set.iter().map(ToString::to_string).collect()
}
