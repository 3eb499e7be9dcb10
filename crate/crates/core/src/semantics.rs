//! Abstract execution over `Known(u64) | Bottom` values.
//!
//! Registers start unset and receive a fresh random value the first time they
//! are read. Memory is tracked per byte; each byte remembers its value and the
//! unrolled instruction that last stored to it. Integer arithmetic is computed
//! exactly, anything else produces `Bottom`, and `Bottom` absorbs every
//! operation it enters.

use std::collections::HashMap;

use rand::RngCore;

use crate::asmmodel::{
    instruction_address, Access, BinOp, Gpr, Instruction, MemOperand, Operand, Operation, RegName, Register, ShiftOp,
    UnOp, WidthClass,
};

/// Position of an executed instruction in the unrolled trace.
pub type UnrolledId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbstractValue {
    Known(u64),
    Bottom,
}

use AbstractValue::{Bottom, Known};

impl AbstractValue {
    pub fn known(self) -> Option<u64> {
        match self {
            Known(v) => Some(v),
            Bottom => None,
        }
    }

    pub fn is_bottom(self) -> bool {
        self == Bottom
    }

    pub fn map(self, f: impl FnOnce(u64) -> u64) -> Self {
        match self {
            Known(v) => Known(f(v)),
            Bottom => Bottom,
        }
    }

    pub fn zip(self, other: Self, f: impl FnOnce(u64, u64) -> u64) -> Self {
        match (self, other) {
            (Known(a), Known(b)) => Known(f(a, b)),
            _ => Bottom,
        }
    }
}

/// Draws a value uniformly from the full 64-bit range.
pub fn fresh_value<R: RngCore + ?Sized>(rng: &mut R) -> AbstractValue {
    Known(rng.next_u64())
}

pub(crate) fn width_mask(bytes: u8) -> u64 {
    if bytes >= 8 {
        u64::MAX
    } else {
        (1u64 << (8 * bytes as u32)) - 1
    }
}

pub(crate) fn sign_extend(value: u64, bytes: u8) -> u64 {
    if bytes >= 8 {
        return value;
    }
    let shift = 64 - 8 * bytes as u32;
    (((value << shift) as i64) >> shift) as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowRegFile {
    gprs: [Option<AbstractValue>; 16],
    /// Synthetic address of the instruction being executed.
    pub rip: u64,
}

impl ShadowRegFile {
    pub fn new(rip: u64) -> Self {
        ShadowRegFile { gprs: [None; 16], rip }
    }

    /// `None` until the register is first read or written.
    pub fn get(&self, reg: Gpr) -> Option<AbstractValue> {
        self.gprs[reg.index()]
    }

    pub fn set(&mut self, reg: Gpr, value: AbstractValue) {
        self.gprs[reg.index()] = Some(value);
    }

    /// Gives an unset register its fresh value.
    pub fn materialize<R: RngCore + ?Sized>(&mut self, reg: Gpr, rng: &mut R) -> AbstractValue {
        *self.gprs[reg.index()].get_or_insert_with(|| fresh_value(rng))
    }

    fn full(&self, reg: Gpr) -> AbstractValue {
        self.get(reg).unwrap_or(Bottom)
    }

    /// Value of the slice named by `reg`; vector registers read as `Bottom`.
    pub fn read(&self, reg: Register) -> AbstractValue {
        let Some(g) = reg.canonical_gpr() else {
            return match reg.name {
                RegName::Rip => Known(self.rip),
                _ => Bottom,
            };
        };
        let v = self.full(g);
        match reg.width {
            WidthClass::Full => v,
            WidthClass::Dword => v.map(|x| x & 0xffff_ffff),
            WidthClass::Word => v.map(|x| x & 0xffff),
            WidthClass::Byte => v.map(|x| x & 0xff),
            WidthClass::HighByte => v.map(|x| (x >> 8) & 0xff),
            WidthClass::Vector => Bottom,
        }
    }

    /// 32-bit writes zero-extend; 8/16-bit writes leave the register `Bottom`.
    pub fn write(&mut self, reg: Register, value: AbstractValue) {
        let Some(g) = reg.canonical_gpr() else {
            return;
        };
        let v = match reg.width {
            WidthClass::Full => value,
            WidthClass::Dword => value.map(|x| x & 0xffff_ffff),
            _ => Bottom,
        };
        self.set(g, v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowByte {
    /// `None` is a `Bottom` byte.
    pub value: Option<u8>,
    pub last_writer: Option<UnrolledId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShadowMemory {
    cells: HashMap<u64, ShadowByte>,
}

impl ShadowMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// `None` for never-accessed addresses.
    pub fn get(&self, addr: u64) -> Option<&ShadowByte> {
        self.cells.get(&addr)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn span(addr: u64, bytes: u8) -> impl Iterator<Item = u64> {
        (0..bytes as u64).map(move |i| addr.wrapping_add(i))
    }

    /// Reads `bytes` at `addr`, refilling the span with fresh bytes when any
    /// byte is unknown. Returns the little-endian value of the low 8 bytes and
    /// the distinct last writers of the span.
    pub fn load<R: RngCore + ?Sized>(&mut self, addr: u64, bytes: u8, rng: &mut R) -> (AbstractValue, Vec<UnrolledId>) {
        let complete = Self::span(addr, bytes).all(|a| self.cells.get(&a).is_some_and(|c| c.value.is_some()));
        if !complete {
            let mut fill = Vec::with_capacity(bytes as usize);
            while fill.len() < bytes as usize {
                fill.extend_from_slice(&rng.next_u64().to_le_bytes());
            }
            for (a, b) in Self::span(addr, bytes).zip(fill) {
                let cell = self.cells.entry(a).or_insert(ShadowByte { value: None, last_writer: None });
                cell.value = Some(b);
            }
        }
        let mut value = 0u64;
        let mut writers = Vec::new();
        for (i, a) in Self::span(addr, bytes).enumerate() {
            let cell = &self.cells[&a];
            if i < 8 {
                value |= (cell.value.expect("span filled") as u64) << (8 * i);
            }
            if let Some(w) = cell.last_writer {
                if !writers.contains(&w) {
                    writers.push(w);
                }
            }
        }
        writers.sort_unstable();
        let value = if bytes > 8 { Bottom } else { Known(value) };
        (value, writers)
    }

    /// Stores the low `bytes` of `value` (or `Bottom` bytes) tagged with `writer`.
    pub fn store(&mut self, addr: u64, bytes: u8, value: AbstractValue, writer: UnrolledId) {
        for (i, a) in Self::span(addr, bytes).enumerate() {
            let byte = match value {
                Known(v) if i < 8 => Some((v >> (8 * i)) as u8),
                _ => None,
            };
            self.cells.insert(a, ShadowByte { value: byte, last_writer: Some(writer) });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadEvent {
    pub id: UnrolledId,
    pub address: AbstractValue,
    pub bytes: u8,
    /// Sorted, distinct; empty when the address is `Bottom`.
    pub last_writers: Vec<UnrolledId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEvent {
    pub id: UnrolledId,
    pub address: AbstractValue,
    pub bytes: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub loads: Vec<LoadEvent>,
    pub stores: Vec<StoreEvent>,
}

/// `disp + base + index * scale`, wrapping; `Bottom` if a register is.
/// Unset registers count as `Bottom`: [`step`] materializes them beforehand.
pub fn eval_address(mem: &MemOperand, regs: &ShadowRegFile) -> AbstractValue {
    let mut addr = Known(mem.displacement as u64);
    if let Some(base) = mem.base {
        addr = addr.zip(regs.read(base), u64::wrapping_add);
    }
    if let Some(index) = mem.index {
        let scaled = regs.read(index).map(|v| v.wrapping_mul(mem.scale as u64));
        addr = addr.zip(scaled, u64::wrapping_add);
    }
    addr
}

/// Full analysis state: registers, memory and the dropped-store diagnostic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowState {
    pub regs: ShadowRegFile,
    pub mem: ShadowMemory,
    pub dropped_bottom_stores: u64,
    code_base: u64,
}

impl ShadowState {
    pub fn new(code_base: u64) -> Self {
        ShadowState {
            regs: ShadowRegFile::new(code_base),
            mem: ShadowMemory::new(),
            dropped_bottom_stores: 0,
            code_base,
        }
    }

    pub fn step<R: RngCore + ?Sized>(&mut self, instr: &Instruction, id: UnrolledId, rng: &mut R) -> StepEvents {
        step(self, instr, id, rng)
    }
}

/// A resolved operand: addresses are computed before anything is written.
#[derive(Clone, Copy)]
enum Loc {
    Imm(u64),
    Reg(Register),
    Mem(AbstractValue),
}

struct Exec<'a, R: RngCore + ?Sized> {
    state: &'a mut ShadowState,
    rng: &'a mut R,
    id: UnrolledId,
    events: StepEvents,
}

impl<R: RngCore + ?Sized> Exec<'_, R> {
    fn resolve(&self, op: &Operand) -> Loc {
        match op {
            Operand::Imm(v) => Loc::Imm(*v as u64),
            Operand::Reg(r) => Loc::Reg(*r),
            Operand::Mem(m) => Loc::Mem(eval_address(m, &self.state.regs)),
        }
    }

    fn read(&mut self, loc: Loc, bytes: u8) -> AbstractValue {
        match loc {
            Loc::Imm(v) => Known(v & width_mask(bytes)),
            Loc::Reg(r) => self.state.regs.read(r),
            Loc::Mem(address) => {
                let (value, last_writers) = match address {
                    Known(a) => self.state.mem.load(a, bytes, self.rng),
                    Bottom => (Bottom, Vec::new()),
                };
                self.events.loads.push(LoadEvent { id: self.id, address, bytes, last_writers });
                value
            }
        }
    }

    fn write(&mut self, loc: Loc, value: AbstractValue, bytes: u8) {
        let value = value.map(|v| v & width_mask(bytes));
        match loc {
            Loc::Imm(_) => unreachable!("parser rejects immediate destinations"),
            Loc::Reg(r) => self.state.regs.write(r, value),
            Loc::Mem(address) => {
                match address {
                    Known(a) => self.state.mem.store(a, bytes, value, self.id),
                    Bottom => self.state.dropped_bottom_stores += 1,
                }
                self.events.stores.push(StoreEvent { id: self.id, address, bytes });
            }
        }
    }
}

fn binary(op: BinOp, a: u64, b: u64) -> u64 {
    match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Mul => a.wrapping_mul(b),
    }
}

fn unary(op: UnOp, a: u64) -> u64 {
    match op {
        UnOp::Inc => a.wrapping_add(1),
        UnOp::Dec => a.wrapping_sub(1),
        UnOp::Neg => a.wrapping_neg(),
        UnOp::Not => !a,
    }
}

fn shift(op: ShiftOp, value: u64, count: u64, bytes: u8) -> u64 {
    let count = count & if bytes == 8 { 63 } else { 31 };
    match op {
        ShiftOp::Shl => value.checked_shl(count as u32).unwrap_or(0),
        ShiftOp::Shr => (value & width_mask(bytes)).checked_shr(count as u32).unwrap_or(0),
        ShiftOp::Sar => ((sign_extend(value, bytes) as i64) >> count.min(63)) as u64,
    }
}

/// Executes one instruction on the shadow state, tagging stores with `id`.
pub fn step<R: RngCore + ?Sized>(
    state: &mut ShadowState,
    instr: &Instruction,
    id: UnrolledId,
    rng: &mut R,
) -> StepEvents {
    state.regs.rip = instruction_address(state.code_base, instr.index);
    for access in &instr.reads {
        if let Access::Reg { reg: RegName::Gpr(g), .. } = access {
            state.regs.materialize(*g, rng);
        }
    }
    let mut ex = Exec { state, rng, id, events: StepEvents::default() };
    let ops = &instr.operands;
    match instr.operation {
        Operation::Mov { width } => {
            let (src, dst) = (ex.resolve(&ops[0]), ex.resolve(&ops[1]));
            let v = ex.read(src, width);
            ex.write(dst, v, width);
        }
        Operation::Extend { from, to, signed } => {
            let (src, dst) = (ex.resolve(&ops[0]), ex.resolve(&ops[1]));
            let v = ex.read(src, from);
            let v = if signed { v.map(|x| sign_extend(x, from)) } else { v };
            ex.write(dst, v, to);
        }
        Operation::Lea { width } => {
            let Operand::Mem(m) = &ops[0] else { unreachable!() };
            let addr = eval_address(m, &ex.state.regs);
            let dst = ex.resolve(&ops[1]);
            ex.write(dst, addr, width);
        }
        Operation::Binary { op, width } => {
            let (src, dst) = (ex.resolve(&ops[0]), ex.resolve(&ops[1]));
            let a = ex.read(dst, width);
            let b = ex.read(src, width);
            ex.write(dst, a.zip(b, |a, b| binary(op, a, b)), width);
        }
        Operation::Unary { op, width } => {
            let dst = ex.resolve(&ops[0]);
            let a = ex.read(dst, width);
            ex.write(dst, a.map(|a| unary(op, a)), width);
        }
        Operation::Shift { op, width } => {
            let dst = ex.resolve(ops.last().expect("shift destination"));
            let count = match ops.len() {
                1 => Known(1),
                _ => {
                    let c = ex.resolve(&ops[0]);
                    ex.read(c, 1)
                }
            };
            let a = ex.read(dst, width);
            ex.write(dst, a.zip(count, |a, c| shift(op, a, c, width)), width);
        }
        Operation::MulImm { width } => {
            let (imm, src, dst) = (ex.resolve(&ops[0]), ex.resolve(&ops[1]), ex.resolve(&ops[2]));
            let a = ex.read(src, width);
            let b = ex.read(imm, width);
            ex.write(dst, a.zip(b, u64::wrapping_mul), width);
        }
        Operation::Compare { width } => {
            let (a, b) = (ex.resolve(&ops[0]), ex.resolve(&ops[1]));
            ex.read(a, width);
            ex.read(b, width);
        }
        Operation::Cltq => {
            let eax = ex.state.regs.read(Register::alias(Gpr::Rax, WidthClass::Dword));
            ex.state.regs.set(Gpr::Rax, eax.map(|x| sign_extend(x, 4)));
        }
        Operation::Opaque => step_opaque(&mut ex, instr),
    }
    let events = ex.events;
    state.regs.rip = instruction_address(state.code_base, instr.index + 1);
    events
}

fn step_opaque<R: RngCore + ?Sized>(ex: &mut Exec<'_, R>, instr: &Instruction) {
    let mem_loc = |ex: &Exec<'_, R>, a: &Access| match a {
        Access::Mem { mem, bytes } => Some((Loc::Mem(eval_address(mem, &ex.state.regs)), *bytes)),
        Access::Reg { .. } => None,
    };
    let loads: Vec<_> = instr.reads.iter().filter_map(|a| mem_loc(ex, a)).collect();
    let stores: Vec<_> = instr.writes.iter().filter_map(|a| mem_loc(ex, a)).collect();
    for (loc, bytes) in loads {
        ex.read(loc, bytes);
    }
    for (loc, bytes) in stores {
        ex.write(loc, Bottom, bytes);
    }
    for access in &instr.writes {
        if let Access::Reg { reg: RegName::Gpr(g), .. } = access {
            ex.state.regs.set(*g, Bottom);
        }
    }
}
