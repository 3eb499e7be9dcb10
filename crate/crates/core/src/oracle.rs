//! Concrete-execution baseline.
//!
//! Runs the kernel for a fixed number of iterations on concrete 64-bit
//! registers and a sparse byte memory, and records every dynamic
//! read-after-write memory dependency. This interpreter shares the parsed
//! instruction model with the static analysis but none of its evaluation
//! code, so the two can be checked against each other.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::asmmodel::{
    instruction_address, Access, BinOp, Gpr, Instruction, Kernel, MemOperand, Operand, Operation, RegName, Register,
    ShiftOp, UnOp, WidthClass,
};
use crate::depcore::{DepKey, DepReport};

/// Register value BHive-style harnesses load into every GPR.
pub const BHIVE_REGISTER_INIT: u64 = 0x232_4000;
pub const DEFAULT_ITERATIONS: u64 = 64;
pub const DEFAULT_MEM_FILL: u64 = 0x232_4000;
pub const DEFAULT_DISTINCT_SEED: u64 = 42;
/// Byte written by instructions without modelled semantics.
pub const SENTINEL_BYTE: u8 = 0xA5;
/// Distinct-mode register values are resampled below this bound.
pub const MIN_DISTINCT_VALUE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("kernel contains no instructions")]
    EmptyKernel,
    #[error("invalid oracle configuration: {0}")]
    InvalidConfig(String),
    #[error("{iterations} iterations of a {len}-instruction kernel overflow the timestamp counter")]
    TimestampOverflow { iterations: u64, len: usize },
    #[error("coverage is undefined: the oracle observed no dependency")]
    UndefinedCoverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegInit {
    /// Every GPR holds the same constant.
    Uniform(u64),
    /// Every GPR is drawn independently from the seeded generator.
    Distinct(u64),
}

impl fmt::Display for RegInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegInit::Uniform(v) => write!(f, "uniform:{v:#x}"),
            RegInit::Distinct(s) => write!(f, "distinct:{s}"),
        }
    }
}

pub(crate) fn parse_u64_auto(text: &str) -> Option<u64> {
    let t = text.trim();
    match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => t.parse().ok(),
    }
}

pub(crate) fn parse_hex(text: &str) -> Option<u64> {
    let t = text.trim();
    u64::from_str_radix(t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t), 16).ok()
}

impl FromStr for RegInit {
    type Err = String;

    /// `uniform:HEX` or `distinct:SEED`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mode, arg) =
            s.split_once(':').ok_or_else(|| format!("expected uniform:HEX or distinct:SEED, got `{s}`"))?;
        match mode {
            "uniform" => parse_hex(arg).map(RegInit::Uniform).ok_or_else(|| format!("bad hex constant `{arg}`")),
            "distinct" => parse_u64_auto(arg).map(RegInit::Distinct).ok_or_else(|| format!("bad seed `{arg}`")),
            _ => Err(format!("unknown register init mode `{mode}`")),
        }
    }
}

impl Serialize for RegInit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RegInit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleConfig {
    pub iterations: u64,
    pub reg_init: RegInit,
    /// 8-byte pattern repeated over never-written memory, little-endian.
    pub mem_fill: u64,
    /// Maximum write-to-read distance, in executed instructions.
    pub lifetime: Option<u64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            iterations: DEFAULT_ITERATIONS,
            reg_init: RegInit::Distinct(DEFAULT_DISTINCT_SEED),
            mem_fill: DEFAULT_MEM_FILL,
            lifetime: None,
        }
    }
}

/// A dynamic dependency between two kernel instructions, iteration distance
/// discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynDependency {
    pub src: usize,
    pub dst: usize,
    pub rho: u64,
    /// First observed `(write, read)` timestamps.
    #[serde(skip)]
    pub example: (u64, u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicTrace {
    pub iterations: u64,
    pub reg_init: RegInit,
    pub deps: Vec<DynDependency>,
    pub suspicious_addresses: u64,
}

impl DynamicTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Occurrences per `(src, dst, delta_k)` after the lifetime filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletCounts {
    pub counts: BTreeMap<DepKey, u64>,
    pub suspicious_addresses: u64,
}

#[derive(Clone, Copy)]
struct WriteTag {
    pos: usize,
    iteration: u64,
    ts: u64,
}

#[derive(Clone, Copy)]
struct Cell {
    value: u8,
    writer: WriteTag,
}

struct Machine<'k> {
    regs: [u64; 16],
    mem: HashMap<u64, Cell>,
    fill: u64,
    base: u64,
    kernel: &'k Kernel,
    lifetime: Option<u64>,
    counts: BTreeMap<DepKey, (u64, (u64, u64))>,
    suspicious: u64,
    // current instruction
    pos: usize,
    iteration: u64,
    ts: u64,
    loaded_from: Vec<WriteTag>,
}

fn is_canonical(addr: u64) -> bool {
    let top = addr >> 47;
    top == 0 || top == (1 << 17) - 1
}

fn mask(bytes: u8) -> u64 {
    if bytes >= 8 {
        u64::MAX
    } else {
        (1u64 << (8 * bytes as u32)) - 1
    }
}

fn sext(value: u64, bytes: u8) -> u64 {
    match bytes {
        1 => value as u8 as i8 as i64 as u64,
        2 => value as u16 as i16 as i64 as u64,
        4 => value as u32 as i32 as i64 as u64,
        _ => value,
    }
}

impl Machine<'_> {
    fn reg(&self, r: Register) -> u64 {
        match r.name {
            RegName::Gpr(g) => {
                let v = self.regs[g.index()];
                match r.width {
                    WidthClass::Full => v,
                    WidthClass::Dword => v & 0xffff_ffff,
                    WidthClass::Word => v & 0xffff,
                    WidthClass::Byte => v & 0xff,
                    WidthClass::HighByte => (v >> 8) & 0xff,
                    WidthClass::Vector => unreachable!(),
                }
            }
            RegName::Rip => instruction_address(self.base, self.pos),
            RegName::Xmm(_) | RegName::Ymm(_) => 0,
        }
    }

    fn set_reg(&mut self, r: Register, value: u64) {
        let RegName::Gpr(g) = r.name else { return };
        let old = self.regs[g.index()];
        self.regs[g.index()] = match r.width {
            WidthClass::Full => value,
            WidthClass::Dword => value & 0xffff_ffff,
            WidthClass::Word => (old & !0xffff) | (value & 0xffff),
            WidthClass::Byte => (old & !0xff) | (value & 0xff),
            WidthClass::HighByte => (old & !0xff00) | ((value & 0xff) << 8),
            WidthClass::Vector => unreachable!(),
        };
    }

    fn address(&self, m: &MemOperand) -> u64 {
        let mut a = m.displacement as u64;
        if let Some(b) = m.base {
            a = a.wrapping_add(self.reg(b));
        }
        if let Some(i) = m.index {
            a = a.wrapping_add(self.reg(i).wrapping_mul(m.scale as u64));
        }
        a
    }

    fn note_address(&mut self, addr: u64) {
        if !is_canonical(addr) {
            self.suspicious += 1;
        }
    }

    fn load(&mut self, addr: u64, bytes: u8) -> u64 {
        self.note_address(addr);
        let mut value = 0u64;
        for i in 0..bytes as u64 {
            let a = addr.wrapping_add(i);
            let byte = match self.mem.get(&a) {
                Some(cell) => {
                    if !self.loaded_from.iter().any(|w| w.ts == cell.writer.ts) {
                        self.loaded_from.push(cell.writer);
                    }
                    cell.value
                }
                None => (self.fill >> (8 * (a & 7))) as u8,
            };
            if i < 8 {
                value |= (byte as u64) << (8 * i);
            }
        }
        value
    }

    fn store(&mut self, addr: u64, bytes: u8, value: Option<u64>) {
        self.note_address(addr);
        let writer = WriteTag { pos: self.pos, iteration: self.iteration, ts: self.ts };
        for i in 0..bytes as u64 {
            let byte = match value {
                Some(v) if i < 8 => (v >> (8 * i)) as u8,
                _ => SENTINEL_BYTE,
            };
            self.mem.insert(addr.wrapping_add(i), Cell { value: byte, writer });
        }
    }

    fn read_operand(&mut self, op: &Operand, bytes: u8, addr: Option<u64>) -> u64 {
        match op {
            Operand::Imm(v) => *v as u64 & mask(bytes),
            Operand::Reg(r) => self.reg(*r),
            Operand::Mem(_) => self.load(addr.expect("address resolved"), bytes),
        }
    }

    fn write_operand(&mut self, op: &Operand, bytes: u8, value: u64, addr: Option<u64>) {
        match op {
            Operand::Imm(_) => unreachable!(),
            Operand::Reg(r) => self.set_reg(*r, value),
            Operand::Mem(_) => self.store(addr.expect("address resolved"), bytes, Some(value & mask(bytes))),
        }
    }

    fn execute(&mut self, instr: &Instruction) {
        // A kernel instruction has at most one addressed operand outside the
        // opaque class; resolve it before any register changes.
        let addr = instr.operands.iter().find_map(Operand::as_mem).map(|m| self.address(m));
        let ops = &instr.operands;
        match instr.operation {
            Operation::Mov { width } => {
                let v = self.read_operand(&ops[0], width, addr);
                self.write_operand(&ops[1], width, v, addr);
            }
            Operation::Extend { from, to, signed } => {
                let v = self.read_operand(&ops[0], from, addr);
                let v = if signed { sext(v, from) } else { v };
                self.write_operand(&ops[1], to, v & mask(to), addr);
            }
            Operation::Lea { width } => {
                let a = addr.expect("lea has an address");
                self.write_operand(&ops[1], width, a & mask(width), None);
            }
            Operation::Binary { op, width } => {
                let d = self.read_operand(&ops[1], width, addr);
                let s = self.read_operand(&ops[0], width, addr);
                let r = match op {
                    BinOp::Add => d.wrapping_add(s),
                    BinOp::Sub => d.wrapping_sub(s),
                    BinOp::And => d & s,
                    BinOp::Or => d | s,
                    BinOp::Xor => d ^ s,
                    BinOp::Mul => d.wrapping_mul(s),
                };
                self.write_operand(&ops[1], width, r & mask(width), addr);
            }
            Operation::Unary { op, width } => {
                let d = self.read_operand(&ops[0], width, addr);
                let r = match op {
                    UnOp::Inc => d.wrapping_add(1),
                    UnOp::Dec => d.wrapping_sub(1),
                    UnOp::Neg => d.wrapping_neg(),
                    UnOp::Not => !d,
                };
                self.write_operand(&ops[0], width, r & mask(width), addr);
            }
            Operation::Shift { op, width } => {
                let dst = ops.last().expect("shift destination");
                let count = match ops.len() {
                    1 => 1,
                    _ => self.read_operand(&ops[0], 1, addr) & 0xff,
                } & if width == 8 { 0x3f } else { 0x1f };
                let d = self.read_operand(dst, width, addr);
                let r = match op {
                    ShiftOp::Shl if count >= 64 => 0,
                    ShiftOp::Shl => d << count,
                    ShiftOp::Shr => (d & mask(width)) >> count,
                    ShiftOp::Sar => ((sext(d, width) as i64) >> count) as u64,
                };
                self.write_operand(dst, width, r & mask(width), addr);
            }
            Operation::MulImm { width } => {
                let imm = self.read_operand(&ops[0], width, addr);
                let s = self.read_operand(&ops[1], width, addr);
                self.write_operand(&ops[2], width, s.wrapping_mul(imm) & mask(width), addr);
            }
            Operation::Compare { width } => {
                self.read_operand(&ops[0], width, addr);
                self.read_operand(&ops[1], width, addr);
            }
            Operation::Cltq => {
                let eax = self.regs[Gpr::Rax.index()] & 0xffff_ffff;
                self.regs[Gpr::Rax.index()] = sext(eax, 4);
            }
            Operation::Opaque => self.execute_opaque(instr),
        }
    }

    fn execute_opaque(&mut self, instr: &Instruction) {
        let resolve = |m: &Self, a: &Access| match a {
            Access::Mem { mem, bytes } => Some((m.address(mem), *bytes)),
            Access::Reg { .. } => None,
        };
        let loads: Vec<_> = instr.reads.iter().filter_map(|a| resolve(self, a)).collect();
        let stores: Vec<_> = instr.writes.iter().filter_map(|a| resolve(self, a)).collect();
        for (addr, bytes) in loads {
            self.load(addr, bytes);
        }
        for (addr, bytes) in stores {
            self.store(addr, bytes, None);
        }
        let sentinel = u64::from_le_bytes([SENTINEL_BYTE; 8]);
        for access in &instr.writes {
            if let Access::Reg { reg: RegName::Gpr(g), bytes } = *access {
                let width = match bytes {
                    8 => WidthClass::Full,
                    4 => WidthClass::Dword,
                    2 => WidthClass::Word,
                    _ => WidthClass::Byte,
                };
                self.set_reg(Register::alias(g, width), sentinel);
            }
        }
    }

    fn run(&mut self, iterations: u64) {
        let kernel = self.kernel;
        for iteration in 0..iterations {
            for instr in &kernel.instructions {
                self.pos = instr.index;
                self.iteration = iteration;
                self.loaded_from.clear();
                self.execute(instr);
                for w in std::mem::take(&mut self.loaded_from) {
                    let distance = self.ts - w.ts;
                    if self.lifetime.is_some_and(|l| distance > l) {
                        continue;
                    }
                    let key = (w.pos, self.pos, (iteration - w.iteration) as usize);
                    let entry = self.counts.entry(key).or_insert((0, (w.ts, self.ts)));
                    entry.0 += 1;
                }
                self.ts += 1;
            }
        }
    }
}

fn initial_registers(init: RegInit) -> [u64; 16] {
    match init {
        RegInit::Uniform(v) => [v; 16],
        RegInit::Distinct(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            std::array::from_fn(|_| loop {
                let v = rng.next_u64();
                if v >= MIN_DISTINCT_VALUE {
                    break v;
                }
            })
        }
    }
}

fn simulate<'k>(kernel: &'k Kernel, cfg: &OracleConfig) -> Result<Machine<'k>, OracleError> {
    if kernel.is_empty() {
        return Err(OracleError::EmptyKernel);
    }
    if cfg.iterations == 0 {
        return Err(OracleError::InvalidConfig("iterations must be at least 1".into()));
    }
    if cfg.lifetime == Some(0) {
        return Err(OracleError::InvalidConfig("lifetime must be at least 1".into()));
    }
    cfg.iterations
        .checked_mul(kernel.len() as u64)
        .ok_or(OracleError::TimestampOverflow { iterations: cfg.iterations, len: kernel.len() })?;
    let mut m = Machine {
        regs: initial_registers(cfg.reg_init),
        mem: HashMap::new(),
        fill: cfg.mem_fill,
        base: kernel.base_address,
        kernel,
        lifetime: cfg.lifetime,
        counts: BTreeMap::new(),
        suspicious: 0,
        pos: 0,
        iteration: 0,
        ts: 0,
        loaded_from: Vec::new(),
    };
    m.run(cfg.iterations);
    Ok(m)
}

/// Dynamic dependencies aggregated by `(src, dst)`.
pub fn run_concrete(kernel: &Kernel, cfg: &OracleConfig) -> Result<DynamicTrace, OracleError> {
    let m = simulate(kernel, cfg)?;
    let mut by_pair: BTreeMap<(usize, usize), DynDependency> = BTreeMap::new();
    for (&(src, dst, _), &(count, example)) in &m.counts {
        let d = by_pair.entry((src, dst)).or_insert(DynDependency { src, dst, rho: 0, example });
        d.rho += count;
        d.example = d.example.min(example);
    }
    Ok(DynamicTrace {
        iterations: cfg.iterations,
        reg_init: cfg.reg_init,
        deps: by_pair.into_values().collect(),
        suspicious_addresses: m.suspicious,
    })
}

/// Dynamic dependency occurrences keyed by `(src, dst, delta_k)`, where
/// `delta_k` is the reader's iteration minus the writer's.
pub fn run_concrete_triplets(kernel: &Kernel, cfg: &OracleConfig) -> Result<TripletCounts, OracleError> {
    let m = simulate(kernel, cfg)?;
    Ok(TripletCounts {
        counts: m.counts.into_iter().map(|(k, (c, _))| (k, c)).collect(),
        suspicious_addresses: m.suspicious,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classified {
    pub src: usize,
    pub dst: usize,
    pub rho: u64,
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub found: usize,
    pub missed: usize,
    pub cov_u: f64,
    pub cov_w: f64,
    pub deps: Vec<Classified>,
}

/// Classifies each dynamic `(src, dst)` as found when any static triplet
/// shares it, whatever its `delta_k`.
pub fn coverage(static_report: &DepReport, dynamic: &[DynDependency]) -> Result<CoverageReport, OracleError> {
    if dynamic.is_empty() {
        return Err(OracleError::UndefinedCoverage);
    }
    let deps: Vec<Classified> = dynamic
        .iter()
        .map(|d| Classified {
            src: d.src,
            dst: d.dst,
            rho: d.rho,
            found: static_report.deps.iter().any(|s| s.src == d.src && s.dst == d.dst),
        })
        .collect();
    let found = deps.iter().filter(|d| d.found).count();
    let missed = deps.len() - found;
    let rho_found: u64 = deps.iter().filter(|d| d.found).map(|d| d.rho).sum();
    let rho_all: u64 = deps.iter().map(|d| d.rho).sum();
    Ok(CoverageReport {
        found,
        missed,
        cov_u: found as f64 / deps.len() as f64,
        cov_w: if rho_all == 0 { 0.0 } else { rho_found as f64 / rho_all as f64 },
        deps,
    })
}
