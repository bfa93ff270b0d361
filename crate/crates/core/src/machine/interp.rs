use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::ir::{Immediate, InstrClass, Instruction, Kernel, MemRef, Operand, OperandKind, Reg, RegFile};

/// Constant-bank offset of the first kernel parameter. Pointer parameter `i`
/// occupies `c[0x0][PARAM_BASE + 8 * i]` (low word) and the following word.
pub const PARAM_BASE: u32 = 0x160;

/// Device address at which buffer argument `arg` is placed.
pub fn buffer_address(arg: usize) -> u64 {
    0x1000_0000 + arg as u64 * 0x0100_0000
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpretError {
    #[error("instruction {index} (`{mnemonic}`) is outside the supported subset")]
    UnsupportedInstruction { index: usize, mnemonic: String },
    #[error("instruction {index} accesses unmapped address {address:#x}")]
    OutOfBoundsAccess { index: usize, address: u64 },
    #[error("instruction {index} reads {reg} before it is written")]
    UninitializedRegister { index: usize, reg: Reg },
    #[error("instruction {index} reads undefined constant c[{bank:#x}][{offset:#x}]")]
    UndefinedConstant { index: usize, bank: u32, offset: u32 },
    #[error("no buffer bound to argument {0}")]
    MissingBuffer(usize),
}

#[derive(Debug, Clone)]
pub struct InterpretOptions {
    /// Reading a register that was never written is an error instead of 0.
    pub strict: bool,
    pub shared_bytes: usize,
    /// Registers live on entry.
    pub initial_regs: BTreeMap<Reg, u32>,
    /// Extra 32-bit words of constant memory, keyed by (bank, offset).
    pub constants: BTreeMap<(u32, u32), u32>,
    /// Values of special registers such as `SR_TID.X`; unlisted ones read 0.
    pub special: BTreeMap<String, u32>,
}

impl Default for InterpretOptions {
    fn default() -> Self {
        Self {
            strict: true,
            shared_bytes: 64 * 1024,
            initial_regs: BTreeMap::new(),
            constants: BTreeMap::new(),
            special: BTreeMap::new(),
        }
    }
}

fn is_value(op: &Operand) -> bool {
    match &op.kind {
        OperandKind::Register { reg, regs, mods } => {
            *regs == 1
                && !mods.abs
                && matches!(reg.file, RegFile::General | RegFile::Uniform)
        }
        OperandKind::Immediate(_) | OperandKind::ConstBank { .. } | OperandKind::Special(_) => true,
        _ => false,
    }
}

fn is_pred(op: &Operand) -> bool {
    matches!(op.kind, OperandKind::Predicate { .. })
}

fn is_reg_dest(op: &Operand) -> bool {
    matches!(
        &op.kind,
        OperandKind::Register { reg, mods, .. }
            if matches!(reg.file, RegFile::General | RegFile::Uniform) && !mods.negate && !mods.invert && !mods.abs
    )
}

fn is_pred_dest(op: &Operand) -> bool {
    matches!(op.kind, OperandKind::Predicate { negated: false, .. })
}

fn values(ops: &[Operand]) -> bool {
    ops.iter().all(is_value)
}

fn mods_within(ins: &Instruction, allowed: &[&str]) -> bool {
    ins.modifiers().all(|m| allowed.contains(&m))
}

fn one_reg_dest(ins: &Instruction) -> bool {
    ins.dests().len() == 1 && is_reg_dest(&ins.dests()[0])
}

const CMP: [&str; 6] = ["LT", "EQ", "LE", "GT", "NE", "GE"];
const BOOL_OPS: [&str; 3] = ["AND", "OR", "XOR"];

fn supported(ins: &Instruction) -> bool {
    let s = ins.srcs();
    let simple = |n: usize| one_reg_dest(ins) && s.len() == n && values(s);
    match ins.opcode() {
        "MOV" | "MOV32I" | "UMOV" => {
            one_reg_dest(ins)
                && match s.len() {
                    1 => values(s),
                    // trailing lane mask
                    2 => is_value(&s[0]) && matches!(s[1].kind, OperandKind::Immediate(Immediate::Int(_))),
                    _ => false,
                }
                && ins.modifiers().next().is_none()
        }
        "LDC" | "ULDC" => {
            one_reg_dest(ins)
                && s.len() == 1
                && matches!(s[0].kind, OperandKind::ConstBank { .. })
                && mods_within(ins, &["64"])
        }
        "IADD3" | "IADD" => {
            let n = if ins.opcode() == "IADD3" { 3 } else { 2 };
            simple(n) && ins.modifiers().next().is_none()
        }
        "IMAD" => simple(3) && mods_within(ins, &["MOV", "U32", "SHL", "IADD", "WIDE"]),
        "LOP3" => {
            one_reg_dest(ins)
                && ins.mnemonic() == "LOP3.LUT"
                && (s.len() == 4 || (s.len() == 5 && is_pred(&s[4])))
                && values(&s[..4])
        }
        "SHF" => {
            simple(3)
                && ins.modifiers().filter(|m| matches!(*m, "L" | "R")).count() == 1
                && mods_within(ins, &["L", "R", "U32", "S32", "U64", "S64", "HI"])
        }
        "SHL" => simple(2) && ins.modifiers().next().is_none(),
        "SHR" => simple(2) && mods_within(ins, &["U32", "S32"]),
        "SEL" | "IMNMX" => {
            one_reg_dest(ins)
                && s.len() == 3
                && values(&s[..2])
                && is_pred(&s[2])
                && mods_within(ins, &["U32"])
        }
        "ISETP" => {
            let cmp = ins.modifiers().filter(|m| CMP.contains(m)).count();
            let bool_op = ins.modifiers().filter(|m| BOOL_OPS.contains(m)).count();
            ins.dests().len() == 2
                && ins.dests().iter().all(is_pred_dest)
                && s.len() == 3
                && values(&s[..2])
                && is_pred(&s[2])
                && cmp == 1
                && bool_op == 1
                && ins.modifiers().all(|m| CMP.contains(&m) || BOOL_OPS.contains(&m) || m == "U32")
        }
        "POPC" | "IABS" => simple(1) && ins.modifiers().next().is_none(),
        "LEA" => {
            if ins.has_modifier("HI") {
                simple(4) && mods_within(ins, &["HI"])
            } else {
                simple(3) && ins.modifiers().next().is_none()
            }
        }
        "S2R" => one_reg_dest(ins) && s.len() == 1 && matches!(s[0].kind, OperandKind::Special(_)),
        "FADD" | "FMUL" => simple(2) && ins.modifiers().next().is_none(),
        "FFMA" => simple(3) && ins.modifiers().next().is_none(),
        "LDG" | "LD" | "LDS" => {
            one_reg_dest(ins) && s.len() == 1 && matches!(s[0].kind, OperandKind::Memory(_))
        }
        "STG" | "ST" | "STS" => {
            ins.dests().is_empty()
                && s.len() == 2
                && matches!(s[0].kind, OperandKind::Memory(_))
                && is_reg_dest(&s[1])
        }
        "LDGSTS" => {
            ins.dests().is_empty()
                && (s.len() == 2 || (s.len() == 3 && is_pred(&s[2])))
                && matches!(s[0].kind, OperandKind::Memory(_))
                && matches!(s[1].kind, OperandKind::Memory(_) | OperandKind::Descriptor { .. })
        }
        "LDGDEPBAR" | "DEPBAR" | "BAR" | "MEMBAR" | "NOP" | "WARPSYNC" | "EXIT" => true,
        _ => false,
    }
}

/// Checks every instruction against the supported subset without running.
pub fn is_interpretable(k: &Kernel) -> Result<(), InterpretError> {
    for (index, ins) in k.schedule().iter().enumerate() {
        if !supported(ins) {
            return Err(InterpretError::UnsupportedInstruction {
                index,
                mnemonic: ins.mnemonic().to_string(),
            });
        }
    }
    Ok(())
}

struct Machine<'a> {
    opts: &'a InterpretOptions,
    regs: HashMap<Reg, u32>,
    preds: HashMap<Reg, bool>,
    buffers: BTreeMap<usize, Vec<u8>>,
    shared: Vec<u8>,
    index: usize,
}

enum Space {
    Global,
    Shared,
}

impl Machine<'_> {
    fn read_reg(&self, reg: Reg) -> Result<u32, InterpretError> {
        if reg.is_constant() {
            return Ok(0);
        }
        match self.regs.get(&reg) {
            Some(&v) => Ok(v),
            None if self.opts.strict => Err(InterpretError::UninitializedRegister {
                index: self.index,
                reg,
            }),
            None => Ok(0),
        }
    }

    fn write_reg(&mut self, reg: Reg, value: u32) {
        if !reg.is_constant() {
            self.regs.insert(reg, value);
        }
    }

    fn read_pred(&self, reg: Reg, negated: bool) -> Result<bool, InterpretError> {
        let v = if reg.is_constant() {
            true
        } else {
            match self.preds.get(&reg) {
                Some(&v) => v,
                None if self.opts.strict => {
                    return Err(InterpretError::UninitializedRegister {
                        index: self.index,
                        reg,
                    })
                }
                None => false,
            }
        };
        Ok(v != negated)
    }

    fn write_pred(&mut self, reg: Reg, value: bool) {
        if !reg.is_constant() {
            self.preds.insert(reg, value);
        }
    }

    fn constant(&self, bank: u32, offset: u32) -> Result<u32, InterpretError> {
        if let Some(&v) = self.opts.constants.get(&(bank, offset)) {
            return Ok(v);
        }
        if bank == 0 && offset >= PARAM_BASE && (offset - PARAM_BASE) % 4 == 0 {
            let slot = (offset - PARAM_BASE) / 4;
            let arg = (slot / 2) as usize;
            if self.buffers.contains_key(&arg) {
                let addr = buffer_address(arg);
                return Ok(if slot % 2 == 0 { addr as u32 } else { (addr >> 32) as u32 });
            }
        }
        Err(InterpretError::UndefinedConstant {
            index: self.index,
            bank,
            offset,
        })
    }

    fn value(&self, op: &Operand) -> Result<u32, InterpretError> {
        Ok(match &op.kind {
            OperandKind::Register { reg, mods, .. } => {
                let mut v = self.read_reg(*reg)?;
                if mods.invert {
                    v = !v;
                }
                if mods.negate {
                    v = v.wrapping_neg();
                }
                v
            }
            OperandKind::Immediate(Immediate::Int(v)) => *v as u32,
            OperandKind::Immediate(Immediate::Float(v)) => (*v as f32).to_bits(),
            OperandKind::ConstBank { bank, offset } => self.constant(*bank, *offset)?,
            OperandKind::Special(name) => self.opts.special.get(name).copied().unwrap_or(0),
            _ => unreachable!("operand shapes are checked before execution"),
        })
    }

    fn pred_operand(&self, op: &Operand) -> Result<bool, InterpretError> {
        match op.kind {
            OperandKind::Predicate { reg, negated } => self.read_pred(reg, negated),
            _ => unreachable!("operand shapes are checked before execution"),
        }
    }

    fn address(&self, mem: &MemRef) -> Result<u64, InterpretError> {
        let mut addr = u64::from(self.read_reg(mem.base)?);
        if mem.wide {
            addr |= u64::from(self.read_reg(mem.base.offset(1))?) << 32;
        }
        if let Some(u) = mem.uniform_offset {
            addr = addr.wrapping_add(u64::from(self.read_reg(u)?));
        }
        Ok(addr.wrapping_add(mem.offset as u64))
    }

    fn locate(&mut self, space: Space, addr: u64, len: usize) -> Result<&mut [u8], InterpretError> {
        let oob = InterpretError::OutOfBoundsAccess {
            index: self.index,
            address: addr,
        };
        let (mem, start) = match space {
            Space::Shared => (&mut self.shared, addr),
            Space::Global => {
                let (arg, buf) = self
                    .buffers
                    .iter_mut()
                    .find(|(arg, buf)| {
                        let base = buffer_address(**arg);
                        addr >= base && addr - base < buf.len() as u64
                    })
                    .ok_or(oob.clone())?;
                let base = buffer_address(*arg);
                (buf, addr - base)
            }
        };
        let start = usize::try_from(start).map_err(|_| oob.clone())?;
        let end = start.checked_add(len).ok_or(oob.clone())?;
        mem.get_mut(start..end).ok_or(oob)
    }

    fn load(&mut self, space: Space, addr: u64, len: usize) -> Result<Vec<u8>, InterpretError> {
        Ok(self.locate(space, addr, len)?.to_vec())
    }

    fn store(&mut self, space: Space, addr: u64, bytes: &[u8]) -> Result<(), InterpretError> {
        self.locate(space, addr, bytes.len())?.copy_from_slice(bytes);
        Ok(())
    }
}

fn dest_reg(op: &Operand) -> Reg {
    match op.kind {
        OperandKind::Register { reg, .. } | OperandKind::Predicate { reg, .. } => reg,
        _ => unreachable!("operand shapes are checked before execution"),
    }
}

fn memref(op: &Operand) -> &MemRef {
    op.memref().expect("operand shapes are checked before execution")
}

fn space_of(ins: &Instruction) -> Space {
    match ins.klass() {
        InstrClass::SharedLoad | InstrClass::SharedStore => Space::Shared,
        _ => Space::Global,
    }
}

fn lop3(a: u32, b: u32, c: u32, lut: u32) -> u32 {
    (0..8)
        .filter(|i| lut >> i & 1 == 1)
        .map(|i| {
            let pick = |bit: u32, x: u32| if i & bit != 0 { x } else { !x };
            pick(4, a) & pick(2, b) & pick(1, c)
        })
        .fold(0, |acc, m| acc | m)
}

fn compare(op: &str, a: u32, b: u32, unsigned: bool) -> bool {
    let ord = if unsigned { a.cmp(&b) } else { (a as i32).cmp(&(b as i32)) };
    match op {
        "LT" => ord.is_lt(),
        "EQ" => ord.is_eq(),
        "LE" => ord.is_le(),
        "GT" => ord.is_gt(),
        "NE" => ord.is_ne(),
        _ => ord.is_ge(),
    }
}

fn combine(op: &str, x: bool, y: bool) -> bool {
    match op {
        "AND" => x && y,
        "OR" => x || y,
        _ => x ^ y,
    }
}

/// Executes one instruction; returns `false` once the kernel exits.
fn step(m: &mut Machine, ins: &Instruction) -> Result<bool, InterpretError> {
    if let Some(g) = ins.predicate() {
        if !m.read_pred(g.reg, g.negated)? {
            return Ok(true);
        }
    }
    let s = ins.srcs();
    let d = ins.dests();
    let unsigned = ins.has_modifier("U32");
    match ins.opcode() {
        "MOV" | "MOV32I" | "UMOV" => {
            let v = m.value(&s[0])?;
            m.write_reg(dest_reg(&d[0]), v);
        }
        "LDC" | "ULDC" => {
            let OperandKind::ConstBank { bank, offset } = s[0].kind else { unreachable!() };
            let words = if ins.has_modifier("64") { 2 } else { 1 };
            let base = dest_reg(&d[0]);
            for w in 0..words {
                let v = m.constant(bank, offset + 4 * w)?;
                m.write_reg(base.offset(w as u16), v);
            }
        }
        "IADD3" | "IADD" => {
            let mut sum = 0u32;
            for op in s {
                sum = sum.wrapping_add(m.value(op)?);
            }
            m.write_reg(dest_reg(&d[0]), sum);
        }
        "IMAD" => {
            let (a, b) = (m.value(&s[0])?, m.value(&s[1])?);
            let dst = dest_reg(&d[0]);
            if ins.has_modifier("WIDE") {
                let c = match &s[2].kind {
                    OperandKind::Register { reg, .. } if !reg.is_constant() => {
                        u64::from(m.read_reg(*reg)?) | u64::from(m.read_reg(reg.offset(1))?) << 32
                    }
                    _ => {
                        let c = m.value(&s[2])?;
                        if unsigned { u64::from(c) } else { c as i32 as i64 as u64 }
                    }
                };
                let prod = if unsigned {
                    u64::from(a) * u64::from(b)
                } else {
                    (a as i32 as i64).wrapping_mul(b as i32 as i64) as u64
                };
                let r = prod.wrapping_add(c);
                m.write_reg(dst, r as u32);
                m.write_reg(dst.offset(1), (r >> 32) as u32);
            } else if ins.has_modifier("SHL") {
                let c = m.value(&s[2])?;
                m.write_reg(dst, a.wrapping_shl(b).wrapping_add(c));
            } else {
                let c = m.value(&s[2])?;
                m.write_reg(dst, a.wrapping_mul(b).wrapping_add(c));
            }
        }
        "LOP3" => {
            let r = lop3(m.value(&s[0])?, m.value(&s[1])?, m.value(&s[2])?, m.value(&s[3])? & 0xff);
            m.write_reg(dest_reg(&d[0]), r);
        }
        "SHF" => {
            let (lo, sh, hi) = (m.value(&s[0])?, m.value(&s[1])?, m.value(&s[2])?);
            let wide = ins.has_modifier("U64") || ins.has_modifier("S64");
            let sh = if wide { sh.min(63) } else { sh.min(32) };
            let v = u64::from(hi) << 32 | u64::from(lo);
            let r = if ins.has_modifier("L") {
                v << sh
            } else if ins.has_modifier("S32") || ins.has_modifier("S64") {
                ((v as i64) >> sh) as u64
            } else {
                v >> sh
            };
            let out = if ins.has_modifier("HI") { (r >> 32) as u32 } else { r as u32 };
            m.write_reg(dest_reg(&d[0]), out);
        }
        "SHL" => {
            let (a, sh) = (m.value(&s[0])?, m.value(&s[1])?);
            m.write_reg(dest_reg(&d[0]), if sh >= 32 { 0 } else { a << sh });
        }
        "SHR" => {
            let (a, sh) = (m.value(&s[0])?, m.value(&s[1])?.min(31));
            let r = if ins.has_modifier("S32") { ((a as i32) >> sh) as u32 } else { a >> sh };
            m.write_reg(dest_reg(&d[0]), r);
        }
        "SEL" => {
            let p = m.pred_operand(&s[2])?;
            let v = if p { m.value(&s[0])? } else { m.value(&s[1])? };
            m.write_reg(dest_reg(&d[0]), v);
        }
        "IMNMX" => {
            let (a, b) = (m.value(&s[0])?, m.value(&s[1])?);
            let min = m.pred_operand(&s[2])?;
            let a_first = if unsigned { a <= b } else { (a as i32) <= (b as i32) };
            let v = if a_first == min { a } else { b };
            m.write_reg(dest_reg(&d[0]), v);
        }
        "ISETP" => {
            let cmp = ins.modifiers().find(|x| CMP.contains(x)).unwrap_or("EQ");
            let op = ins.modifiers().find(|x| BOOL_OPS.contains(x)).unwrap_or("AND");
            let (a, b) = (m.value(&s[0])?, m.value(&s[1])?);
            let c = m.pred_operand(&s[2])?;
            let r = compare(cmp, a, b, unsigned);
            m.write_pred(dest_reg(&d[0]), combine(op, r, c));
            m.write_pred(dest_reg(&d[1]), combine(op, !r, c));
        }
        "POPC" => {
            let v = m.value(&s[0])?.count_ones();
            m.write_reg(dest_reg(&d[0]), v);
        }
        "IABS" => {
            let v = (m.value(&s[0])? as i32).unsigned_abs();
            m.write_reg(dest_reg(&d[0]), v);
        }
        "LEA" => {
            let r = if ins.has_modifier("HI") {
                let (a, b, c, sh) = (m.value(&s[0])?, m.value(&s[1])?, m.value(&s[2])?, m.value(&s[3])?);
                let v = u64::from(c) << 32 | u64::from(a);
                let shifted = (v << sh.min(32)) >> 32;
                (shifted as u32).wrapping_add(b)
            } else {
                let (a, b, sh) = (m.value(&s[0])?, m.value(&s[1])?, m.value(&s[2])?);
                a.checked_shl(sh).unwrap_or(0).wrapping_add(b)
            };
            m.write_reg(dest_reg(&d[0]), r);
        }
        "S2R" => {
            let v = m.value(&s[0])?;
            m.write_reg(dest_reg(&d[0]), v);
        }
        "FADD" | "FMUL" | "FFMA" => {
            let f = |v: u32| f32::from_bits(v);
            let a = f(m.value(&s[0])?);
            let b = f(m.value(&s[1])?);
            let r = match ins.opcode() {
                "FADD" => a + b,
                "FMUL" => a * b,
                _ => a.mul_add(b, f(m.value(&s[2])?)),
            };
            m.write_reg(dest_reg(&d[0]), r.to_bits());
        }
        "LDG" | "LD" | "LDS" => {
            let addr = m.address(memref(&s[0]))?;
            let bytes = ins.access_bytes() as usize;
            let data = m.load(space_of(ins), addr, bytes)?;
            let dst = dest_reg(&d[0]);
            if bytes < 4 {
                let v = match (bytes, ins.has_modifier("S8") || ins.has_modifier("S16")) {
                    (1, true) => data[0] as i8 as i32 as u32,
                    (1, false) => u32::from(data[0]),
                    (_, true) => i16::from_le_bytes([data[0], data[1]]) as i32 as u32,
                    (_, false) => u32::from(u16::from_le_bytes([data[0], data[1]])),
                };
                m.write_reg(dst, v);
            } else {
                for (w, chunk) in data.chunks_exact(4).enumerate() {
                    let v = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                    m.write_reg(dst.offset(w as u16), v);
                }
            }
        }
        "STG" | "ST" | "STS" => {
            let addr = m.address(memref(&s[0]))?;
            let bytes = ins.access_bytes() as usize;
            let src = dest_reg(&s[1]);
            let mut data = Vec::with_capacity(bytes.max(4));
            for w in 0..bytes.div_ceil(4) {
                data.extend_from_slice(&m.read_reg(src.offset(w as u16))?.to_le_bytes());
            }
            data.truncate(bytes);
            m.store(space_of(ins), addr, &data)?;
        }
        "LDGSTS" => {
            let dst = m.address(memref(&s[0]))?;
            let src = m.address(memref(&s[1]))?;
            let bytes = ins.access_bytes() as usize;
            // a false trailing predicate zero-fills instead of reading
            let fetch = match s.get(2) {
                Some(p) => m.pred_operand(p)?,
                None => true,
            };
            let data = if fetch {
                m.load(Space::Global, src, bytes)?
            } else {
                vec![0; bytes]
            };
            m.store(Space::Shared, dst, &data)?;
        }
        "EXIT" => return Ok(false),
        _ => {}
    }
    Ok(true)
}

/// Runs the kernel for a single thread and returns every buffer's final
/// contents. Control codes are ignored: instructions run in schedule order.
pub fn interpret_with(
    k: &Kernel,
    buffers: &BTreeMap<usize, Vec<u8>>,
    opts: &InterpretOptions,
) -> Result<BTreeMap<usize, Vec<u8>>, InterpretError> {
    is_interpretable(k)?;
    execute(k, buffers, opts)
}

/// [`interpret_with`] minus the support check, for callers that already ran
/// [`is_interpretable`] on `k`.
pub(crate) fn execute(
    k: &Kernel,
    buffers: &BTreeMap<usize, Vec<u8>>,
    opts: &InterpretOptions,
) -> Result<BTreeMap<usize, Vec<u8>>, InterpretError> {
    let mut regs = HashMap::new();
    let mut preds = HashMap::new();
    for (&reg, &v) in &opts.initial_regs {
        match reg.file {
            RegFile::Predicate | RegFile::UniformPredicate => {
                preds.insert(reg, v != 0);
            }
            _ => {
                regs.insert(reg, v);
            }
        }
    }
    let mut m = Machine {
        opts,
        regs,
        preds,
        buffers: buffers.clone(),
        shared: vec![0; opts.shared_bytes],
        index: 0,
    };
    for (index, ins) in k.schedule().iter().enumerate() {
        m.index = index;
        if !step(&mut m, ins)? {
            break;
        }
    }
    Ok(m.buffers)
}

/// Runs the kernel with default options and returns the contents of
/// buffer `ret_arg`.
pub fn interpret(
    k: &Kernel,
    buffers: &BTreeMap<usize, Vec<u8>>,
    ret_arg: usize,
) -> Result<Vec<u8>, InterpretError> {
    if !buffers.contains_key(&ret_arg) {
        return Err(InterpretError::MissingBuffer(ret_arg));
    }
    let mut out = interpret_with(k, buffers, &InterpretOptions::default())?;
    Ok(out.remove(&ret_arg).expect("checked above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::parse_kernel;

    fn words(v: &[u32]) -> Vec<u8> {
        v.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    fn unwords(b: &[u8]) -> Vec<u32> {
        b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
    }

    // out[0] = in[0] + in[1]
    const ADD_TWO: &str = "\
ULDC.64 UR4, c[0x0][0x160] ;
MOV R2, UR4 ;
MOV R3, UR5 ;
LDG.E R0, [R2.64] ;
LDG.E R1, [R2.64+0x4] ;
IADD3 R4, R0, R1, RZ ;
MOV R6, c[0x0][0x168] ;
MOV R7, c[0x0][0x16c] ;
STG.E [R6.64], R4 ;
EXIT ;
";

    #[test]
    fn loads_add_and_store() {
        let k = parse_kernel(ADD_TWO).unwrap();
        let bufs = BTreeMap::from([(0, words(&[40, 2])), (1, words(&[0]))]);
        assert_eq!(unwords(&interpret(&k, &bufs, 1).unwrap()), vec![42]);
    }

    #[test]
    fn missing_return_buffer() {
        let k = parse_kernel(ADD_TWO).unwrap();
        let bufs = BTreeMap::from([(0, words(&[1, 2]))]);
        assert_eq!(interpret(&k, &bufs, 1), Err(InterpretError::MissingBuffer(1)));
    }

    #[test]
    fn parameter_of_absent_buffer_is_undefined() {
        let k = parse_kernel(ADD_TWO).unwrap();
        let bufs = BTreeMap::from([(0, words(&[1, 2])), (2, words(&[0]))]);
        assert_eq!(
            interpret(&k, &bufs, 2),
            Err(InterpretError::UndefinedConstant { index: 6, bank: 0, offset: 0x168 })
        );
    }

    #[test]
    fn out_of_bounds() {
        let k = parse_kernel(ADD_TWO).unwrap();
        let bufs = BTreeMap::from([(0, words(&[1])), (1, words(&[0]))]);
        assert_eq!(
            interpret(&k, &bufs, 1),
            Err(InterpretError::OutOfBoundsAccess { index: 4, address: buffer_address(0) + 4 })
        );
    }

    #[test]
    fn uninitialized_reads_are_strict_by_default() {
        let k = parse_kernel("IADD3 R1, R2, RZ, RZ ;\n").unwrap();
        let err = interpret_with(&k, &BTreeMap::new(), &InterpretOptions::default()).unwrap_err();
        assert_eq!(err, InterpretError::UninitializedRegister { index: 0, reg: Reg::gpr(2) });
        let lax = InterpretOptions { strict: false, ..Default::default() };
        assert!(interpret_with(&k, &BTreeMap::new(), &lax).is_ok());
    }

    #[test]
    fn unsupported_is_reported_before_running() {
        let k = parse_kernel("MOV R1, 0x1 ;\nBRA `(.L_1) ;\n").unwrap();
        assert_eq!(
            is_interpretable(&k),
            Err(InterpretError::UnsupportedInstruction { index: 1, mnemonic: "BRA".into() })
        );
    }

    fn run_regs(text: &str, init: &[(Reg, u32)]) -> HashMap<Reg, u32> {
        let k = parse_kernel(text).unwrap();
        let opts = InterpretOptions {
            initial_regs: init.iter().copied().collect(),
            ..Default::default()
        };
        is_interpretable(&k).unwrap();
        let mut m = Machine {
            opts: &opts,
            regs: opts.initial_regs.iter().map(|(&r, &v)| (r, v)).collect(),
            preds: HashMap::new(),
            buffers: BTreeMap::new(),
            shared: vec![0; 64],
            index: 0,
        };
        for (i, ins) in k.schedule().iter().enumerate() {
            m.index = i;
            if !step(&mut m, ins).unwrap() {
                break;
            }
        }
        m.regs.into_iter().chain(m.preds.into_iter().map(|(r, b)| (r, b as u32))).collect()
    }

    #[test]
    fn integer_arithmetic() {
        let r = run_regs(
            "MOV R1, 0x7 ;\n\
             MOV R2, -0x3 ;\n\
             IMAD R3, R1, R2, 0x1 ;\n\
             IMAD.WIDE R4, R2, 0x2, R8 ;\n\
             IMAD.WIDE.U32 R10, R2, 0x2, R8 ;\n\
             IMAD.SHL R12, R1, 0x4, RZ ;\n\
             IADD3 R13, -R1, R1, 0x5 ;\n\
             LOP3.LUT R14, R1, 0x5, RZ, 0xc0, !PT ;\n\
             LOP3.LUT R15, R1, 0x5, RZ, 0xfc, !PT ;\n\
             SHF.R.S32.HI R16, RZ, 0x1f, R2 ;\n\
             SHF.L.U32 R17, R1, 0x3, RZ ;\n\
             POPC R18, R2 ;\n\
             IABS R19, R2 ;\n\
             LEA R20, R1, 0x100, 0x2 ;\n\
             ISETP.GE.AND P0, PT, R2, RZ, PT ;\n\
             SEL R21, R1, R2, P0 ;\n\
             IMNMX R22, R1, R2, PT ;\n\
             IMNMX.U32 R23, R1, R2, PT ;\n",
            &[(Reg::gpr(8), 10), (Reg::gpr(9), 0)],
        );
        let g = |i| r[&Reg::gpr(i)];
        assert_eq!(g(3), (-20i32) as u32);
        // -6 + 10 = 4 with the sign carried into the high word
        assert_eq!((g(4), g(5)), (4, 0));
        let wide = 0xffff_fffdu64 * 2 + 10;
        assert_eq!((g(10), g(11)), (wide as u32, (wide >> 32) as u32));
        assert_eq!(g(12), 0x70);
        assert_eq!(g(13), 5);
        assert_eq!(g(14), 7 & 5);
        assert_eq!(g(15), 7 | 5);
        assert_eq!(g(16), u32::MAX);
        assert_eq!(g(17), 56);
        assert_eq!(g(18), 31);
        assert_eq!(g(19), 3);
        assert_eq!(g(20), 0x11c);
        assert_eq!(r[&Reg::pred(0)], 0);
        assert_eq!(g(21), (-3i32) as u32);
        assert_eq!(g(22), (-3i32) as u32);
        assert_eq!(g(23), 7);
    }

    #[test]
    fn guards_skip_and_exit_stops() {
        let r = run_regs(
            "MOV R1, 0x1 ;\n\
             ISETP.NE.AND P0, PT, R1, RZ, PT ;\n\
             @!P0 MOV R1, 0x2 ;\n\
             @P0 MOV R2, 0x3 ;\n\
             EXIT ;\n\
             MOV R3, 0x4 ;\n",
            &[],
        );
        assert_eq!(r[&Reg::gpr(1)], 1);
        assert_eq!(r[&Reg::gpr(2)], 3);
        assert!(!r.contains_key(&Reg::gpr(3)));
    }

    #[test]
    fn lop3_matches_truth_table() {
        for lut in [0x00u32, 0xff, 0xf0, 0xcc, 0xaa, 0x96, 0xe8, 0x3c] {
            let (a, b, c) = (0xf0f0_1234u32, 0xcccc_5678u32, 0xaaaa_9abcu32);
            let expected = (0..32).fold(0u32, |acc, bit| {
                let idx = (a >> bit & 1) << 2 | (b >> bit & 1) << 1 | (c >> bit & 1);
                acc | (lut >> idx & 1) << bit
            });
            assert_eq!(lop3(a, b, c, lut), expected, "lut {lut:#x}");
        }
    }

    #[test]
    fn async_copy_through_shared() {
        let text = "\
MOV R10, c[0x0][0x160] ;
MOV R11, c[0x0][0x164] ;
MOV R20, RZ ;
ISETP.NE.AND P0, PT, RZ, RZ, PT ;
LDGSTS.E.BYPASS.128 [R20+0x10], desc[UR16][R10.64] ;
LDGSTS.E.BYPASS.128 [R20+0x20], desc[UR16][R10.64], P0 ;
LDGDEPBAR ;
DEPBAR.LE SB0, 0x0 ;
LDS.128 R0, [R20+0x10] ;
LDS R4, [R20+0x20] ;
MOV R12, c[0x0][0x168] ;
MOV R13, c[0x0][0x16c] ;
STG.E.128 [R12.64], R0 ;
STG.E [R12.64+0x10], R4 ;
";
        let k = parse_kernel(text).unwrap();
        let bufs = BTreeMap::from([(0, words(&[1, 2, 3, 4])), (1, words(&[9; 5]))]);
        assert_eq!(unwords(&interpret(&k, &bufs, 1).unwrap()), vec![1, 2, 3, 4, 0]);
    }

    #[test]
    fn narrow_loads_extend() {
        let text = "\
MOV R2, c[0x0][0x160] ;
MOV R3, c[0x0][0x164] ;
LDG.E.S8 R0, [R2.64] ;
LDG.E.U8 R1, [R2.64] ;
LDG.E.S16 R4, [R2.64] ;
STG.E [R2.64], R0 ;
STG.E [R2.64+0x4], R1 ;
STG.E [R2.64+0x8], R4 ;
";
        let k = parse_kernel(text).unwrap();
        let mut buf = vec![0u8; 12];
        buf[0] = 0xfe;
        buf[1] = 0xff;
        let out = unwords(&interpret(&k, &BTreeMap::from([(0, buf)]), 0).unwrap());
        assert_eq!(out, vec![(-2i32) as u32, 0xfe, (-2i32) as u32]);
    }
}
