//! In-memory model of native GPU instructions, their control codes and whole
//! kernel schedules.
//!
//! Every type here is immutable once built. Instructions keep the exact source
//! line they were parsed from, so a schedule can be permuted and written back
//! without disturbing spacing, address comments or encodings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of hardware scoreboard barriers addressable from a control code.
pub const BARRIER_COUNT: u8 = 6;

/// Largest stall count representable in the control code.
pub const MAX_STALL: u8 = 15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlCodeError {
    #[error("control code must have 5 ':'-separated fields, found {0}")]
    FieldCount(usize),
    #[error("malformed {field} field `{text}`")]
    Field { field: &'static str, text: String },
    #[error("barrier index {0} out of range 0..{BARRIER_COUNT}")]
    BarrierOutOfRange(u8),
    #[error("stall count {0} out of range 0..={MAX_STALL}")]
    StallOutOfRange(u8),
}

/// Scheduling metadata attached to one instruction, e.g. `[B------:R-:W2:-:S02]`.
///
/// Fields are wait mask, read barrier, write barrier, yield flag and stall
/// count, in that textual order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ControlCode {
    wait_mask: u8,
    read_barrier: Option<u8>,
    write_barrier: Option<u8>,
    yield_flag: bool,
    stall_cycles: u8,
}

impl ControlCode {
    pub fn new(
        wait_mask: u8,
        read_barrier: Option<u8>,
        write_barrier: Option<u8>,
        yield_flag: bool,
        stall_cycles: u8,
    ) -> Result<Self, ControlCodeError> {
        if wait_mask >> BARRIER_COUNT != 0 {
            let bad = (BARRIER_COUNT..8).find(|b| wait_mask & (1 << b) != 0).unwrap_or(7);
            return Err(ControlCodeError::BarrierOutOfRange(bad));
        }
        for b in read_barrier.into_iter().chain(write_barrier) {
            if b >= BARRIER_COUNT {
                return Err(ControlCodeError::BarrierOutOfRange(b));
            }
        }
        if stall_cycles > MAX_STALL {
            return Err(ControlCodeError::StallOutOfRange(stall_cycles));
        }
        Ok(Self {
            wait_mask,
            read_barrier,
            write_barrier,
            yield_flag,
            stall_cycles,
        })
    }

    /// Bit `b` set means the instruction waits for barrier `b` to clear.
    pub fn wait_mask(&self) -> u8 {
        self.wait_mask
    }

    pub fn waits_on(&self, barrier: u8) -> bool {
        barrier < 8 && self.wait_mask & (1 << barrier) != 0
    }

    /// Barrier indices in the wait mask, ascending.
    pub fn waited_barriers(&self) -> impl Iterator<Item = u8> + '_ {
        (0..BARRIER_COUNT).filter(move |b| self.waits_on(*b))
    }

    pub fn read_barrier(&self) -> Option<u8> {
        self.read_barrier
    }

    pub fn write_barrier(&self) -> Option<u8> {
        self.write_barrier
    }

    /// Barriers this instruction sets (read barrier first).
    pub fn set_barriers(&self) -> impl Iterator<Item = u8> {
        self.read_barrier.into_iter().chain(self.write_barrier)
    }

    pub fn yield_flag(&self) -> bool {
        self.yield_flag
    }

    pub fn stall_cycles(&self) -> u8 {
        self.stall_cycles
    }
}

fn parse_barrier_field(
    text: &str,
    prefix: char,
    field: &'static str,
) -> Result<Option<u8>, ControlCodeError> {
    let bad = || ControlCodeError::Field {
        field,
        text: text.to_string(),
    };
    let rest = text.strip_prefix(prefix).ok_or_else(bad)?;
    match rest {
        "-" => Ok(None),
        _ if rest.len() == 1 && rest.as_bytes()[0].is_ascii_digit() => {
            let b = rest.as_bytes()[0] - b'0';
            if b >= BARRIER_COUNT {
                Err(ControlCodeError::BarrierOutOfRange(b))
            } else {
                Ok(Some(b))
            }
        }
        _ => Err(bad()),
    }
}

impl FromStr for ControlCode {
    type Err = ControlCodeError;

    /// Accepts the canonical bracketed form; brackets are optional.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .unwrap_or(s);
        let fields: Vec<&str> = inner.split(':').collect();
        if fields.len() != 5 {
            return Err(ControlCodeError::FieldCount(fields.len()));
        }

        let wait = fields[0];
        let wait_bad = || ControlCodeError::Field {
            field: "wait mask",
            text: wait.to_string(),
        };
        let slots = wait.strip_prefix('B').ok_or_else(wait_bad)?;
        if slots.len() != BARRIER_COUNT as usize {
            return Err(wait_bad());
        }
        let mut wait_mask = 0u8;
        for (pos, c) in slots.bytes().enumerate() {
            match c {
                b'-' => {}
                // the digit must name its own slot, otherwise the text could
                // not be reproduced from the mask
                d if d.is_ascii_digit() && (d - b'0') as usize == pos => wait_mask |= 1 << pos,
                _ => return Err(wait_bad()),
            }
        }

        let read_barrier = parse_barrier_field(fields[1], 'R', "read barrier")?;
        let write_barrier = parse_barrier_field(fields[2], 'W', "write barrier")?;

        let yield_flag = match fields[3] {
            "-" => false,
            "Y" => true,
            other => {
                return Err(ControlCodeError::Field {
                    field: "yield",
                    text: other.to_string(),
                })
            }
        };

        let stall_text = fields[4];
        let stall_bad = || ControlCodeError::Field {
            field: "stall",
            text: stall_text.to_string(),
        };
        let digits = stall_text.strip_prefix('S').ok_or_else(stall_bad)?;
        if digits.len() != 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(stall_bad());
        }
        let stall_cycles: u8 = digits.parse().map_err(|_| stall_bad())?;

        ControlCode::new(wait_mask, read_barrier, write_barrier, yield_flag, stall_cycles)
    }
}

impl fmt::Display for ControlCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[B")?;
        for b in 0..BARRIER_COUNT {
            if self.waits_on(b) {
                write!(f, "{b}")?;
            } else {
                f.write_str("-")?;
            }
        }
        match self.read_barrier {
            Some(b) => write!(f, ":R{b}")?,
            None => f.write_str(":R-")?,
        }
        match self.write_barrier {
            Some(b) => write!(f, ":W{b}")?,
            None => f.write_str(":W-")?,
        }
        f.write_str(if self.yield_flag { ":Y" } else { ":-" })?;
        write!(f, ":S{:02}]", self.stall_cycles)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegFile {
    General,
    Uniform,
    Predicate,
    UniformPredicate,
}

/// A register identity. The hardware zero/true registers are encoded with
/// their architectural index: `RZ` = R255, `URZ` = UR63, `PT` = P7, `UPT` = UP7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg {
    pub file: RegFile,
    pub index: u16,
}

impl Reg {
    pub const RZ: Reg = Reg::gpr(255);
    pub const URZ: Reg = Reg::uniform(63);
    pub const PT: Reg = Reg::pred(7);
    pub const UPT: Reg = Reg {
        file: RegFile::UniformPredicate,
        index: 7,
    };

    pub const fn gpr(index: u16) -> Reg {
        Reg {
            file: RegFile::General,
            index,
        }
    }

    pub const fn uniform(index: u16) -> Reg {
        Reg {
            file: RegFile::Uniform,
            index,
        }
    }

    pub const fn pred(index: u16) -> Reg {
        Reg {
            file: RegFile::Predicate,
            index,
        }
    }

    /// True for RZ, URZ, PT and UPT, whose values never change.
    pub fn is_constant(&self) -> bool {
        *self == Reg::RZ || *self == Reg::URZ || *self == Reg::PT || *self == Reg::UPT
    }

    /// The `n`-th register of a consecutive group starting here.
    pub fn offset(&self, n: u16) -> Reg {
        if self.is_constant() {
            *self
        } else {
            Reg {
                file: self.file,
                index: self.index + n,
            }
        }
    }

    /// Parses a bare register name such as `R12`, `RZ`, `UR4`, `P0`, `UPT`.
    pub fn parse(name: &str) -> Option<Reg> {
        let (file, digits) = if let Some(rest) = name.strip_prefix("UR") {
            (RegFile::Uniform, rest)
        } else if let Some(rest) = name.strip_prefix("UP") {
            (RegFile::UniformPredicate, rest)
        } else if let Some(rest) = name.strip_prefix('R') {
            (RegFile::General, rest)
        } else if let Some(rest) = name.strip_prefix('P') {
            (RegFile::Predicate, rest)
        } else {
            return None;
        };
        let constant = match file {
            RegFile::General => (digits == "Z").then_some(Reg::RZ),
            RegFile::Uniform => (digits == "Z").then_some(Reg::URZ),
            RegFile::Predicate => (digits == "T").then_some(Reg::PT),
            RegFile::UniformPredicate => (digits == "T").then_some(Reg::UPT),
        };
        if constant.is_some() {
            return constant;
        }
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let index: u16 = digits.parse().ok()?;
        let limit = match file {
            RegFile::General => 255,
            RegFile::Uniform => 63,
            RegFile::Predicate | RegFile::UniformPredicate => 7,
        };
        (index < limit).then_some(Reg { file, index })
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Reg::RZ => f.write_str("RZ"),
            Reg::URZ => f.write_str("URZ"),
            Reg::PT => f.write_str("PT"),
            Reg::UPT => f.write_str("UPT"),
            Reg { file, index } => {
                let prefix = match file {
                    RegFile::General => "R",
                    RegFile::Uniform => "UR",
                    RegFile::Predicate => "P",
                    RegFile::UniformPredicate => "UP",
                };
                write!(f, "{prefix}{index}")
            }
        }
    }
}

/// Source modifiers on a register operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegMods {
    pub negate: bool,
    pub abs: bool,
    pub invert: bool,
    pub reuse: bool,
}

/// `[base(.64)? (+ UR)? (+ offset)?]`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRef {
    pub base: Reg,
    /// `.64` on the base: the address is the register pair base, base+1.
    pub wide: bool,
    pub uniform_offset: Option<Reg>,
    pub offset: i64,
}

impl MemRef {
    /// Registers that form the address.
    pub fn address_regs(&self) -> Vec<Reg> {
        let mut regs = vec![self.base];
        if self.wide {
            regs.push(self.base.offset(1));
        }
        regs.extend(self.uniform_offset);
        regs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Immediate {
    Int(i64),
    Float(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperandKind {
    /// General or uniform register; `regs` is the number of consecutive
    /// registers named by a `.64`/`.128` suffix.
    Register { reg: Reg, regs: u8, mods: RegMods },
    Predicate { reg: Reg, negated: bool },
    Special(String),
    Immediate(Immediate),
    Memory(MemRef),
    ConstBank { bank: u32, offset: u32 },
    Descriptor { desc: Reg, mem: MemRef },
    /// Anything not understood; kept verbatim.
    Opaque,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Operand {
    pub kind: OperandKind,
    pub raw: String,
}

fn parse_int(text: &str) -> Option<i64> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        body.parse::<i64>().ok()?
    };
    Some(if neg { value.wrapping_neg() } else { value })
}

fn parse_float(text: &str) -> Option<f64> {
    match text {
        "INF" | "+INF" => return Some(f64::INFINITY),
        "-INF" => return Some(f64::NEG_INFINITY),
        "QNAN" | "+QNAN" | "-QNAN" | "NAN" => return Some(f64::NAN),
        _ => {}
    }
    let digits_ok = text
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
    if !digits_ok || !text.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    text.parse().ok()
}

/// Parses a register with an optional `.64`/`.128`/`.reuse` suffix chain.
fn parse_reg_suffixed(text: &str) -> Option<(Reg, u8, bool)> {
    let mut parts = text.split('.');
    let reg = Reg::parse(parts.next()?)?;
    let mut regs = 1u8;
    let mut reuse = false;
    for suffix in parts {
        match suffix {
            "64" => regs = 2,
            "128" => regs = 4,
            "reuse" => reuse = true,
            // half selectors and similar still name the same register
            "H0" | "H1" | "B0" | "B1" | "B2" | "B3" | "H0_H0" | "H1_H1" | "F32" | "X" | "Y" => {}
            _ => return None,
        }
    }
    Some((reg, regs, reuse))
}

fn parse_memref(inner: &str) -> Option<MemRef> {
    // terms joined by '+'; offsets may carry their own sign: `R1+-0x10`
    let mut general = None;
    let mut uniform = None;
    let mut offset = 0i64;
    for term in inner.split('+').map(str::trim) {
        if term.is_empty() {
            return None;
        }
        if let Some(v) = parse_int(term) {
            offset = offset.wrapping_add(v);
            continue;
        }
        let (reg, regs, _) = parse_reg_suffixed(term)?;
        let slot = match reg.file {
            RegFile::General => &mut general,
            RegFile::Uniform => &mut uniform,
            _ => return None,
        };
        if slot.is_some() {
            return None;
        }
        *slot = Some((reg, regs == 2));
    }
    let ((base, wide), uniform_offset) = match (general, uniform) {
        (Some(g), u) => (g, u.map(|(r, _)| r)),
        (None, Some(u)) => (u, None),
        (None, None) => ((Reg::RZ, false), None),
    };
    Some(MemRef {
        base,
        wide,
        uniform_offset,
        offset,
    })
}

fn bracketed(text: &str) -> Option<(&str, &str)> {
    let rest = text.strip_prefix('[')?;
    let end = rest.find(']')?;
    Some((&rest[..end], &rest[end + 1..]))
}

impl Operand {
    /// Classifies one comma-separated operand. Never fails: text that fits no
    /// known shape becomes [`OperandKind::Opaque`].
    pub fn parse(raw: &str) -> Operand {
        let raw_owned = raw.to_string();
        let kind = Self::parse_kind(raw.trim()).unwrap_or(OperandKind::Opaque);
        Operand {
            kind,
            raw: raw_owned,
        }
    }

    fn parse_kind(text: &str) -> Option<OperandKind> {
        if text.is_empty() {
            return None;
        }
        if let Some(v) = parse_int(text) {
            return Some(OperandKind::Immediate(Immediate::Int(v)));
        }
        if let Some(v) = parse_float(text) {
            return Some(OperandKind::Immediate(Immediate::Float(v)));
        }
        if text.starts_with("SR_") {
            return Some(OperandKind::Special(text.to_string()));
        }
        if let Some((inner, rest)) = bracketed(text) {
            return rest.is_empty().then(|| parse_memref(inner).map(OperandKind::Memory))?;
        }
        if let Some(rest) = text.strip_prefix("c[") {
            let (bank, rest) = rest.split_once(']')?;
            let (offset, tail) = bracketed(rest)?;
            if !tail.is_empty() {
                return None;
            }
            let bank = u32::try_from(parse_int(bank)?).ok()?;
            let offset = u32::try_from(parse_int(offset)?).ok()?;
            return Some(OperandKind::ConstBank { bank, offset });
        }
        if let Some(rest) = text.strip_prefix("desc") {
            let (desc, rest) = bracketed(rest)?;
            let (mem, tail) = bracketed(rest)?;
            if !tail.is_empty() {
                return None;
            }
            let desc = Reg::parse(desc)?;
            return Some(OperandKind::Descriptor {
                desc,
                mem: parse_memref(mem)?,
            });
        }

        let mut mods = RegMods::default();
        let mut body = text;
        loop {
            if let Some(rest) = body.strip_prefix('-') {
                mods.negate = true;
                body = rest;
            } else if let Some(rest) = body.strip_prefix('~') {
                mods.invert = true;
                body = rest;
            } else if let Some(rest) = body.strip_prefix('!') {
                mods.invert = true;
                body = rest;
            } else {
                break;
            }
        }
        if let Some(inner) = body.strip_prefix('|').and_then(|b| b.strip_suffix('|')) {
            mods.abs = true;
            body = inner;
        }
        let (reg, regs, reuse) = parse_reg_suffixed(body)?;
        mods.reuse = reuse;
        match reg.file {
            RegFile::Predicate | RegFile::UniformPredicate => {
                if mods.negate || mods.abs {
                    return None;
                }
                Some(OperandKind::Predicate {
                    reg,
                    negated: mods.invert,
                })
            }
            RegFile::General | RegFile::Uniform => Some(OperandKind::Register { reg, regs, mods }),
        }
    }

    pub fn is_opaque(&self) -> bool {
        matches!(self.kind, OperandKind::Opaque)
    }

    /// The memory reference this operand addresses, if any.
    pub fn memref(&self) -> Option<&MemRef> {
        match &self.kind {
            OperandKind::Memory(m) => Some(m),
            OperandKind::Descriptor { mem, .. } => Some(mem),
            _ => None,
        }
    }
}

/// Coarse instruction category used for candidate pruning, dependency fences
/// and default latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstrClass {
    GlobalLoad,
    GlobalStore,
    GlobalAsyncCopy,
    SharedLoad,
    SharedStore,
    Compute,
    Barrier,
    ControlFlow,
    Other,
}

impl InstrClass {
    pub const ALL: [InstrClass; 9] = [
        InstrClass::GlobalLoad,
        InstrClass::GlobalStore,
        InstrClass::GlobalAsyncCopy,
        InstrClass::SharedLoad,
        InstrClass::SharedStore,
        InstrClass::Compute,
        InstrClass::Barrier,
        InstrClass::ControlFlow,
        InstrClass::Other,
    ];

    /// The movable class: global memory reads and writes.
    pub fn is_global_memory(self) -> bool {
        matches!(
            self,
            InstrClass::GlobalLoad | InstrClass::GlobalStore | InstrClass::GlobalAsyncCopy
        )
    }

    pub fn is_memory(self) -> bool {
        self.is_global_memory() || matches!(self, InstrClass::SharedLoad | InstrClass::SharedStore)
    }

    /// Instructions that no move may cross.
    pub fn is_fence(self) -> bool {
        matches!(self, InstrClass::Barrier | InstrClass::ControlFlow)
    }
}

const COMPUTE_OPCODES: &[&str] = &[
    "BFE", "BFI", "BMSK", "BREV", "CS2R", "DADD", "DFMA", "DMUL", "DSETP", "F2F", "F2I", "F2FP",
    "FADD", "FADD32I", "FCHK", "FFMA", "FFMA32I", "FLO", "FMNMX", "FMUL", "FMUL32I", "FSEL",
    "FSET", "FSETP", "FSWZADD", "HADD2", "HFMA2", "HMMA", "HMNMX2", "HMUL2", "HSET2", "HSETP2",
    "I2F", "I2I", "IABS", "IADD", "IADD3", "IADD32I", "IDP", "IMAD", "IMADSP", "IMMA", "IMNMX",
    "IMUL", "IMUL32I", "ISCADD", "ISETP", "LEA", "LOP", "LOP3", "LOP32I", "MOV", "MOV32I",
    "MUFU", "P2R", "PLOP3", "POPC", "PRMT", "PSETP", "R2P", "R2UR", "S2R", "S2UR", "SEL",
    "SGXT", "SHF", "SHFL", "SHL", "SHR", "UFLO", "UIADD3", "UIMAD", "UISETP", "ULDC", "ULEA",
    "ULOP3", "UMOV", "UPOPC", "UPRMT", "USEL", "USHF", "VOTE", "VOTEU", "XMAD",
];

/// Maps a mnemonic (with or without dot-modifiers) to its class. Total:
/// anything unrecognized is [`InstrClass::Other`].
pub fn classify(mnemonic: &str) -> InstrClass {
    let opcode = mnemonic.split('.').next().unwrap_or("");
    match opcode {
        "LDG" | "LD" => InstrClass::GlobalLoad,
        "STG" | "ST" | "RED" | "REDG" | "ATOM" | "ATOMG" => InstrClass::GlobalStore,
        "LDGSTS" => InstrClass::GlobalAsyncCopy,
        "LDS" | "LDSM" => InstrClass::SharedLoad,
        "STS" | "ATOMS" => InstrClass::SharedStore,
        "BAR" | "DEPBAR" | "LDGDEPBAR" | "MEMBAR" | "ERRBAR" | "WARPSYNC" | "CCTL" | "ARRIVES" => {
            InstrClass::Barrier
        }
        "BRA" | "BRX" | "BRXU" | "JMP" | "JMX" | "JMXU" | "CALL" | "RET" | "EXIT" | "BSSY"
        | "BSYNC" | "BREAK" | "BPT" | "KILL" | "SSY" | "SYNC" | "PBK" | "BRK" | "PCNT" | "CONT"
        | "WARPSYNC_EXIT" => InstrClass::ControlFlow,
        op if COMPUTE_OPCODES.contains(&op) => InstrClass::Compute,
        _ => InstrClass::Other,
    }
}

/// `@P0` / `@!P0` instruction guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guard {
    pub reg: Reg,
    pub negated: bool,
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}{}", if self.negated { "!" } else { "" }, self.reg)
    }
}

/// One native instruction together with the exact line it came from.
///
/// Equality is structural and ignores `source_line`.
#[derive(Debug, Clone)]
pub struct Instruction {
    text: String,
    control: ControlCode,
    explicit_control: bool,
    predicate: Option<Guard>,
    mnemonic: String,
    dests: Vec<Operand>,
    srcs: Vec<Operand>,
    klass: InstrClass,
    source_line: usize,
}

/// Mnemonics whose leading operands are destinations. Memory-first forms
/// (stores, async copies) have none.
fn dest_count(opcode: &str, klass: InstrClass, operands: &[Operand]) -> usize {
    if operands.is_empty() || klass.is_fence() {
        return 0;
    }
    if operands[0].memref().is_some() {
        return 0;
    }
    match opcode {
        "STG" | "ST" | "STS" | "RED" | "REDG" | "NOP" | "LDGSTS" => 0,
        op if op.ends_with("SETP") => 2.min(operands.len()),
        _ => 1,
    }
}

impl Instruction {
    /// Assembles an instruction from parsed parts. The operand list is split
    /// into destinations and sources here so that the partition is a pure
    /// function of the mnemonic and operand shapes.
    pub fn new(
        text: String,
        control: Option<ControlCode>,
        predicate: Option<Guard>,
        mnemonic: String,
        operands: Vec<Operand>,
        source_line: usize,
    ) -> Self {
        let klass = classify(&mnemonic);
        let opcode = mnemonic.split('.').next().unwrap_or("").to_string();
        let n_dest = dest_count(&opcode, klass, &operands);
        let mut dests = operands;
        let srcs = dests.split_off(n_dest);
        Self {
            text,
            explicit_control: control.is_some(),
            control: control.unwrap_or_default(),
            predicate,
            mnemonic,
            dests,
            srcs,
            klass,
            source_line,
        }
    }

    /// The verbatim source line.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn control(&self) -> &ControlCode {
        &self.control
    }

    /// Whether the source line carried a control block.
    pub fn has_explicit_control(&self) -> bool {
        self.explicit_control
    }

    pub fn predicate(&self) -> Option<&Guard> {
        self.predicate.as_ref()
    }

    pub fn mnemonic(&self) -> &str {
        &self.mnemonic
    }

    /// Mnemonic without modifiers, e.g. `IMAD` for `IMAD.WIDE.U32`.
    pub fn opcode(&self) -> &str {
        self.mnemonic.split('.').next().unwrap_or("")
    }

    pub fn modifiers(&self) -> impl Iterator<Item = &str> {
        self.mnemonic.split('.').skip(1)
    }

    pub fn has_modifier(&self, m: &str) -> bool {
        self.modifiers().any(|x| x == m)
    }

    pub fn dests(&self) -> &[Operand] {
        &self.dests
    }

    pub fn srcs(&self) -> &[Operand] {
        &self.srcs
    }

    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        self.dests.iter().chain(self.srcs.iter())
    }

    pub fn klass(&self) -> InstrClass {
        self.klass
    }

    pub fn source_line(&self) -> usize {
        self.source_line
    }

    /// Registers per data operand implied by a `.64`/`.128` width modifier.
    pub fn data_regs(&self) -> u8 {
        if self.has_modifier("128") {
            4
        } else if self.has_modifier("64") {
            2
        } else {
            1
        }
    }

    /// Bytes touched per memory access.
    pub fn access_bytes(&self) -> u32 {
        let mut bytes = 4;
        for m in self.modifiers() {
            bytes = match m {
                "128" => 16,
                "64" => 8,
                "U8" | "S8" => 1,
                "U16" | "S16" => 2,
                _ => continue,
            };
        }
        bytes
    }

    /// The instruction body without control code, address comment or trailing
    /// comment: `@P0 LDG.E R0, [R2.64] ;`.
    pub fn body(&self) -> String {
        let operands: Vec<&str> = self.operands().map(|o| o.raw.trim()).collect();
        let mut out = String::new();
        if let Some(g) = &self.predicate {
            out.push_str(&g.to_string());
            out.push(' ');
        }
        out.push_str(&self.mnemonic);
        if !operands.is_empty() {
            out.push(' ');
            out.push_str(&operands.join(", "));
        }
        out.push_str(" ;");
        out
    }
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
            && self.control == other.control
            && self.explicit_control == other.explicit_control
            && self.predicate == other.predicate
            && self.mnemonic == other.mnemonic
            && self.dests == other.dests
            && self.srcs == other.srcs
            && self.klass == other.klass
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineKind {
    Blank,
    Comment,
    Label,
    Directive,
}

/// A preserved non-instruction line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLine {
    pub text: String,
    pub kind: LineKind,
}

/// An ordered instruction schedule plus every non-instruction line of the
/// source, keyed by the schedule gap it precedes (gap `g` sits before
/// `schedule[g]`; gap `len` is the tail).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    name: String,
    schedule: Vec<Instruction>,
    interleaved: BTreeMap<usize, Vec<TextLine>>,
    block_boundaries: Vec<usize>,
    trailing_newline: bool,
}

impl Kernel {
    pub fn new(
        name: impl Into<String>,
        schedule: Vec<Instruction>,
        interleaved: BTreeMap<usize, Vec<TextLine>>,
        trailing_newline: bool,
    ) -> Self {
        let mut k = Self {
            name: name.into(),
            schedule,
            interleaved,
            block_boundaries: Vec::new(),
            trailing_newline,
        };
        k.block_boundaries = k.compute_boundaries();
        k
    }

    /// Cut points `b` (0 < b < len) where moving across `b-1 | b` is forbidden:
    /// labels in gap `b`, and both sides of every control-flow instruction.
    fn compute_boundaries(&self) -> Vec<usize> {
        let n = self.schedule.len();
        let mut cuts: Vec<usize> = self
            .interleaved
            .iter()
            .filter(|(_, lines)| lines.iter().any(|l| l.kind == LineKind::Label))
            .map(|(g, _)| *g)
            .collect();
        for (i, ins) in self.schedule.iter().enumerate() {
            if ins.klass() == InstrClass::ControlFlow {
                cuts.push(i);
                cuts.push(i + 1);
            }
        }
        cuts.retain(|&b| b > 0 && b < n);
        cuts.sort_unstable();
        cuts.dedup();
        cuts
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn schedule(&self) -> &[Instruction] {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    pub fn interleaved(&self) -> &BTreeMap<usize, Vec<TextLine>> {
        &self.interleaved
    }

    pub fn lines_before(&self, gap: usize) -> &[TextLine] {
        self.interleaved.get(&gap).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn block_boundaries(&self) -> &[usize] {
        &self.block_boundaries
    }

    /// Whether a cut separates `schedule[gap-1]` from `schedule[gap]`.
    pub fn is_boundary(&self, gap: usize) -> bool {
        self.block_boundaries.binary_search(&gap).is_ok()
    }

    pub fn trailing_newline(&self) -> bool {
        self.trailing_newline
    }

    /// A new kernel with `schedule[pos]` and `schedule[pos+1]` exchanged.
    /// Interleaved text stays anchored to its gap.
    ///
    /// # Panics
    /// If `pos + 1 >= len`.
    pub fn with_swapped(&self, pos: usize) -> Kernel {
        let mut schedule = self.schedule.clone();
        schedule.swap(pos, pos + 1);
        Kernel::new(
            self.name.clone(),
            schedule,
            self.interleaved.clone(),
            self.trailing_newline,
        )
    }

    /// A new kernel with the same text but a different instruction order.
    /// `order[i]` is the index in `self` of the instruction placed at `i`.
    pub fn permuted(&self, order: &[usize]) -> Kernel {
        assert_eq!(order.len(), self.len(), "permutation length mismatch");
        let schedule = order.iter().map(|&i| self.schedule[i].clone()).collect();
        Kernel::new(
            self.name.clone(),
            schedule,
            self.interleaved.clone(),
            self.trailing_newline,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_code_fields() {
        let cc: ControlCode = "[B------:R-:W2:-:S02]".parse().unwrap();
        assert_eq!(cc.wait_mask(), 0);
        assert_eq!(cc.read_barrier(), None);
        assert_eq!(cc.write_barrier(), Some(2));
        assert!(!cc.yield_flag());
        assert_eq!(cc.stall_cycles(), 2);
        assert_eq!(cc.to_string(), "[B------:R-:W2:-:S02]");

        let cc: ControlCode = "[B0-2--5:R1:W-:Y:S15]".parse().unwrap();
        assert_eq!(cc.wait_mask(), 0b100101);
        assert_eq!(cc.waited_barriers().collect::<Vec<_>>(), vec![0, 2, 5]);
        assert_eq!(cc.read_barrier(), Some(1));
        assert!(cc.yield_flag());
        assert_eq!(cc.to_string(), "[B0-2--5:R1:W-:Y:S15]");
    }

    #[test]
    fn control_code_rejects_bad_fields() {
        assert_eq!(
            "[B------:R-:W2:S02]".parse::<ControlCode>(),
            Err(ControlCodeError::FieldCount(4))
        );
        assert_eq!(
            "[B------:R-:W6:-:S02]".parse::<ControlCode>(),
            Err(ControlCodeError::BarrierOutOfRange(6))
        );
        assert_eq!(
            "[B------:R-:W-:-:S16]".parse::<ControlCode>(),
            Err(ControlCodeError::StallOutOfRange(16))
        );
        assert!("[B1-----:R-:W-:-:S01]".parse::<ControlCode>().is_err());
        assert!("[B------:R-:W-:Q:S01]".parse::<ControlCode>().is_err());
        assert!("[B------:R-:W-:-:S1]".parse::<ControlCode>().is_err());
        assert!(ControlCode::new(1 << 6, None, None, false, 0).is_err());
        assert!(ControlCode::new(0, Some(6), None, false, 0).is_err());
    }

    #[test]
    fn register_names() {
        assert_eq!(Reg::parse("R12"), Some(Reg::gpr(12)));
        assert_eq!(Reg::parse("RZ"), Some(Reg::RZ));
        assert_eq!(Reg::parse("UR16"), Some(Reg::uniform(16)));
        assert_eq!(Reg::parse("PT"), Some(Reg::PT));
        assert_eq!(Reg::parse("P8"), None);
        assert_eq!(Reg::parse("R"), None);
        assert_eq!(Reg::parse("RX"), None);
        for name in ["R0", "R254", "RZ", "UR3", "URZ", "P6", "PT", "UP0", "UPT"] {
            assert_eq!(Reg::parse(name).unwrap().to_string(), name);
        }
    }

    #[test]
    fn operand_shapes() {
        let op = Operand::parse("[R2.64]");
        assert_eq!(
            op.kind,
            OperandKind::Memory(MemRef {
                base: Reg::gpr(2),
                wide: true,
                uniform_offset: None,
                offset: 0
            })
        );
        let op = Operand::parse("[R219+0x4000]");
        assert_eq!(op.memref().unwrap().offset, 0x4000);
        let op = Operand::parse("[R1+-0x10]");
        assert_eq!(op.memref().unwrap().offset, -0x10);
        let op = Operand::parse("desc[UR16][R10.64]");
        match op.kind {
            OperandKind::Descriptor { desc, mem } => {
                assert_eq!(desc, Reg::uniform(16));
                assert_eq!(mem.base, Reg::gpr(10));
                assert!(mem.wide);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            Operand::parse("c[0x0][0x1b0]").kind,
            OperandKind::ConstBank {
                bank: 0,
                offset: 0x1b0
            }
        );
        assert_eq!(
            Operand::parse("0x80").kind,
            OperandKind::Immediate(Immediate::Int(0x80))
        );
        assert_eq!(
            Operand::parse("!P0").kind,
            OperandKind::Predicate {
                reg: Reg::pred(0),
                negated: true
            }
        );
        match Operand::parse("-R4.reuse").kind {
            OperandKind::Register { reg, mods, .. } => {
                assert_eq!(reg, Reg::gpr(4));
                assert!(mods.negate && mods.reuse);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            Operand::parse("SR_TID.X").kind,
            OperandKind::Special("SR_TID.X".into())
        );
        assert!(Operand::parse("%garbage%").is_opaque());
        assert!(Operand::parse("[R1").is_opaque());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify("LDG.E"), InstrClass::GlobalLoad);
        assert_eq!(classify("LDGSTS.E.BYPASS.128"), InstrClass::GlobalAsyncCopy);
        assert_eq!(classify("IMAD.WIDE"), InstrClass::Compute);
        assert_eq!(classify("FROBNICATE.X"), InstrClass::Other);
        assert_eq!(classify("STG.E.64"), InstrClass::GlobalStore);
        assert_eq!(classify("LDGDEPBAR"), InstrClass::Barrier);
        assert_eq!(classify("BRA"), InstrClass::ControlFlow);
        assert_eq!(classify("LDS.U.128"), InstrClass::SharedLoad);
    }

    #[test]
    fn unknown_mnemonics_are_never_memory() {
        for m in ["LDGX", "STGG", "XLDG.E", "LOADG", "FROB"] {
            assert!(!classify(m).is_memory(), "{m}");
        }
    }
}
