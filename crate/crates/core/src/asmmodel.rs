//! Textual x86-64 AT&T assembly subset: registers, operands, instructions and
//! the straight-line kernels built from them.
//!
//! The parser accepts one instruction per line. Blank lines and `#` comments
//! are ignored. Control-flow mnemonics are rejected since a kernel is the body
//! of a single basic block. Mnemonics outside the supported integer table are
//! accepted and classified [`SemanticClass::Opaque`].

use std::fmt;

use thiserror::Error;

/// Synthetic encoding size assigned to every instruction.
pub const INSTRUCTION_SIZE: u64 = 16;

/// Default synthetic address of instruction 0.
pub const DEFAULT_BASE_ADDRESS: u64 = 0x40_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: `{mnemonic}` transfers control; a kernel must be a basic-block body")]
    ControlFlow { line: usize, mnemonic: String },
}

impl ParseError {
    pub fn line(&self) -> usize {
        match self {
            ParseError::Syntax { line, .. } | ParseError::ControlFlow { line, .. } => *line,
        }
    }
}

/// The sixteen general-purpose registers, in hardware encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gpr {
    Rax,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Gpr {
    pub const ALL: [Gpr; 16] = [
        Gpr::Rax,
        Gpr::Rcx,
        Gpr::Rdx,
        Gpr::Rbx,
        Gpr::Rsp,
        Gpr::Rbp,
        Gpr::Rsi,
        Gpr::Rdi,
        Gpr::R8,
        Gpr::R9,
        Gpr::R10,
        Gpr::R11,
        Gpr::R12,
        Gpr::R13,
        Gpr::R14,
        Gpr::R15,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    // [64, 32, 16, 8, high-8]
    fn spellings(self) -> [&'static str; 5] {
        match self {
            Gpr::Rax => ["rax", "eax", "ax", "al", "ah"],
            Gpr::Rcx => ["rcx", "ecx", "cx", "cl", "ch"],
            Gpr::Rdx => ["rdx", "edx", "dx", "dl", "dh"],
            Gpr::Rbx => ["rbx", "ebx", "bx", "bl", "bh"],
            Gpr::Rsp => ["rsp", "esp", "sp", "spl", ""],
            Gpr::Rbp => ["rbp", "ebp", "bp", "bpl", ""],
            Gpr::Rsi => ["rsi", "esi", "si", "sil", ""],
            Gpr::Rdi => ["rdi", "edi", "di", "dil", ""],
            Gpr::R8 => ["r8", "r8d", "r8w", "r8b", ""],
            Gpr::R9 => ["r9", "r9d", "r9w", "r9b", ""],
            Gpr::R10 => ["r10", "r10d", "r10w", "r10b", ""],
            Gpr::R11 => ["r11", "r11d", "r11w", "r11b", ""],
            Gpr::R12 => ["r12", "r12d", "r12w", "r12b", ""],
            Gpr::R13 => ["r13", "r13d", "r13w", "r13b", ""],
            Gpr::R14 => ["r14", "r14d", "r14w", "r14b", ""],
            Gpr::R15 => ["r15", "r15d", "r15w", "r15b", ""],
        }
    }
}

impl fmt::Display for Gpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spellings()[0])
    }
}

/// Which slice of a register an operand names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WidthClass {
    Full,
    Dword,
    Word,
    Byte,
    /// `ah`, `bh`, `ch`, `dh`: bits 8..16 of the canonical register.
    HighByte,
    Vector,
}

impl WidthClass {
    fn slot(self) -> usize {
        match self {
            WidthClass::Full => 0,
            WidthClass::Dword => 1,
            WidthClass::Word => 2,
            WidthClass::Byte => 3,
            WidthClass::HighByte => 4,
            WidthClass::Vector => unreachable!("vector registers have no GPR spelling"),
        }
    }
}

/// Canonical register identity: what an alias resolves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegName {
    Gpr(Gpr),
    Rip,
    Xmm(u8),
    Ymm(u8),
}

impl fmt::Display for RegName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegName::Gpr(g) => write!(f, "{g}"),
            RegName::Rip => f.write_str("rip"),
            RegName::Xmm(n) => write!(f, "xmm{n}"),
            RegName::Ymm(n) => write!(f, "ymm{n}"),
        }
    }
}

/// A register as spelled in an operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Register {
    pub name: RegName,
    pub width: WidthClass,
}

impl Register {
    pub const fn gpr(reg: Gpr) -> Self {
        Register { name: RegName::Gpr(reg), width: WidthClass::Full }
    }

    pub const fn alias(reg: Gpr, width: WidthClass) -> Self {
        Register { name: RegName::Gpr(reg), width }
    }

    /// Parses a register name without the leading `%`.
    pub fn parse(name: &str) -> Option<Register> {
        if name == "rip" {
            return Some(Register { name: RegName::Rip, width: WidthClass::Full });
        }
        for (prefix, ctor) in [("xmm", RegName::Xmm as fn(u8) -> RegName), ("ymm", RegName::Ymm)] {
            if let Some(num) = name.strip_prefix(prefix) {
                let n: u8 = num.parse().ok().filter(|n| *n < 16)?;
                if num.len() > 1 && num.starts_with('0') {
                    return None;
                }
                return Some(Register { name: ctor(n), width: WidthClass::Vector });
            }
        }
        // `r8l`..`r15l` are accepted as byte aliases.
        let name = match name.strip_suffix('l') {
            Some(stem) if stem.starts_with('r') && stem[1..].parse::<u8>().is_ok() => {
                return Register::parse(&format!("{stem}b"));
            }
            _ => name,
        };
        const CLASSES: [WidthClass; 5] =
            [WidthClass::Full, WidthClass::Dword, WidthClass::Word, WidthClass::Byte, WidthClass::HighByte];
        Gpr::ALL.iter().find_map(|&g| {
            g.spellings().iter().position(|s| !s.is_empty() && *s == name).map(|slot| Register::alias(g, CLASSES[slot]))
        })
    }

    /// Access width in bytes.
    pub fn bytes(&self) -> u8 {
        match (self.name, self.width) {
            (RegName::Xmm(_), _) => 16,
            (RegName::Ymm(_), _) => 32,
            (_, WidthClass::Full) => 8,
            (_, WidthClass::Dword) => 4,
            (_, WidthClass::Word) => 2,
            (_, WidthClass::Byte | WidthClass::HighByte) => 1,
            (_, WidthClass::Vector) => unreachable!(),
        }
    }

    pub fn canonical_gpr(&self) -> Option<Gpr> {
        match self.name {
            RegName::Gpr(g) => Some(g),
            _ => None,
        }
    }

    pub fn is_vector(&self) -> bool {
        matches!(self.name, RegName::Xmm(_) | RegName::Ymm(_))
    }

    /// 8/16-bit aliases: writes through them do not define the whole register.
    pub fn is_partial(&self) -> bool {
        matches!(self.width, WidthClass::Word | WidthClass::Byte | WidthClass::HighByte)
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            RegName::Gpr(g) => write!(f, "%{}", g.spellings()[self.width.slot()]),
            other => write!(f, "%{other}"),
        }
    }
}

/// `disp(base, index, scale)` address expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemOperand {
    pub displacement: i64,
    pub base: Option<Register>,
    pub index: Option<Register>,
    pub scale: u8,
    pub rip_relative: bool,
}

impl MemOperand {
    pub fn base_disp(base: Gpr, displacement: i64) -> Self {
        MemOperand { displacement, base: Some(Register::gpr(base)), index: None, scale: 1, rip_relative: false }
    }

    /// Registers the address computation reads.
    pub fn registers(&self) -> impl Iterator<Item = Register> + '_ {
        self.base.iter().chain(self.index.iter()).copied()
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.displacement != 0 || (self.base.is_none() && self.index.is_none()) {
            write!(f, "{}", self.displacement)?;
        }
        f.write_str("(")?;
        if let Some(base) = self.base {
            write!(f, "{base}")?;
        }
        if let Some(index) = self.index {
            write!(f, ",{index},{}", self.scale)?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Imm(i64),
    Reg(Register),
    Mem(MemOperand),
}

impl Operand {
    pub fn as_mem(&self) -> Option<&MemOperand> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Imm(v) => write!(f, "${v}"),
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Mem(m) => write!(f, "{m}"),
        }
    }
}

/// A register or memory access with its width in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Reg { reg: RegName, bytes: u8 },
    Mem { mem: MemOperand, bytes: u8 },
}

impl Access {
    pub fn bytes(&self) -> u8 {
        match self {
            Access::Reg { bytes, .. } | Access::Mem { bytes, .. } => *bytes,
        }
    }

    pub fn is_mem(&self) -> bool {
        matches!(self, Access::Mem { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemanticClass {
    SupportedInteger,
    Opaque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Inc,
    Dec,
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftOp {
    Shl,
    Shr,
    Sar,
}

/// Decoded operation shape. Operand positions follow AT&T order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    /// `src, dst`
    Mov {
        width: u8,
    },
    /// `src, dst` with sign or zero extension from `from` to `to` bytes.
    Extend {
        from: u8,
        to: u8,
        signed: bool,
    },
    /// `mem, dst`
    Lea {
        width: u8,
    },
    /// `src, dst`; `dst = dst op src`.
    Binary {
        op: BinOp,
        width: u8,
    },
    /// `dst`
    Unary {
        op: UnOp,
        width: u8,
    },
    /// `[count,] dst`; count is an immediate or `%cl`, absent means 1.
    Shift {
        op: ShiftOp,
        width: u8,
    },
    /// `imm, src, dst`
    MulImm {
        width: u8,
    },
    /// `cmp`/`test`: operands are read, nothing is written.
    Compare {
        width: u8,
    },
    /// `cltq`: `rax = sign_extend(eax)`.
    Cltq,
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub index: usize,
    pub mnemonic: String,
    pub operands: Vec<Operand>,
    pub operation: Operation,
    pub reads: Vec<Access>,
    pub writes: Vec<Access>,
}

impl Instruction {
    pub fn class(&self) -> SemanticClass {
        match self.operation {
            Operation::Opaque => SemanticClass::Opaque,
            _ => SemanticClass::SupportedInteger,
        }
    }

    /// Destination operand (last in AT&T order).
    pub fn destination(&self) -> Option<&Operand> {
        self.operands.last()
    }

    pub fn reads_memory(&self) -> bool {
        self.reads.iter().any(Access::is_mem)
    }

    pub fn writes_memory(&self) -> bool {
        self.writes.iter().any(Access::is_mem)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

/// Read and write access lists of an instruction.
pub fn access_descriptors(instr: &Instruction) -> (&[Access], &[Access]) {
    (&instr.reads, &instr.writes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kernel {
    pub instructions: Vec<Instruction>,
    /// Instruction lines as written, comments stripped.
    pub source_text: Vec<String>,
    pub base_address: u64,
}

impl Kernel {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn instruction_size(&self, _index: usize) -> u64 {
        INSTRUCTION_SIZE
    }

    /// Synthetic address of instruction `index`.
    pub fn address_of(&self, index: usize) -> u64 {
        instruction_address(self.base_address, index)
    }

    pub fn with_base_address(mut self, base: u64) -> Self {
        self.base_address = base;
        self
    }
}

pub fn instruction_address(base: u64, index: usize) -> u64 {
    base.wrapping_add(INSTRUCTION_SIZE.wrapping_mul(index as u64))
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for instr in &self.instructions {
            writeln!(f, "{instr}")?;
        }
        Ok(())
    }
}

/// Parses a kernel using [`DEFAULT_BASE_ADDRESS`].
pub fn parse_kernel(text: &str) -> Result<Kernel, ParseError> {
    parse_kernel_at(text, DEFAULT_BASE_ADDRESS)
}

pub fn parse_kernel_at(text: &str, base_address: u64) -> Result<Kernel, ParseError> {
    let mut instructions = Vec::new();
    let mut source_text = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let instr = parse_line(line, instructions.len()).map_err(|e| e.at_line(lineno + 1))?;
        instructions.push(instr);
        source_text.push(line.to_string());
    }
    Ok(Kernel { instructions, source_text, base_address })
}

enum LineError {
    Syntax(String),
    ControlFlow(String),
}

impl LineError {
    fn at_line(self, line: usize) -> ParseError {
        match self {
            LineError::Syntax(reason) => ParseError::Syntax { line, reason },
            LineError::ControlFlow(mnemonic) => ParseError::ControlFlow { line, mnemonic },
        }
    }
}

macro_rules! bail {
    ($($arg:tt)*) => { return Err(LineError::Syntax(format!($($arg)*))) };
}

fn parse_line(line: &str, index: usize) -> Result<Instruction, LineError> {
    let (mnemonic, rest) = match line.find(char::is_whitespace) {
        Some(pos) => (&line[..pos], line[pos..].trim()),
        None => (line, ""),
    };
    let mnemonic = mnemonic.to_ascii_lowercase();
    if !mnemonic.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
        bail!("malformed mnemonic `{mnemonic}`");
    }
    if is_control_flow(&mnemonic) {
        return Err(LineError::ControlFlow(mnemonic));
    }
    let operands = split_operands(rest)?.into_iter().map(parse_operand).collect::<Result<Vec<_>, _>>()?;
    let mem_count = operands.iter().filter(|o| o.as_mem().is_some()).count();
    let operation = decode(&mnemonic, &operands)?;
    if operation != Operation::Opaque && mem_count > 1 {
        bail!("`{mnemonic}` takes at most one memory operand");
    }
    let (reads, writes) = derive_accesses(&mnemonic, operation, &operands)?;
    Ok(Instruction { index, mnemonic, operands, operation, reads, writes })
}

fn is_control_flow(m: &str) -> bool {
    m.starts_with('j')
        || m.starts_with("call")
        || m.starts_with("ret")
        || m.starts_with("loop")
        || m.starts_with("iret")
        || matches!(m, "syscall" | "sysret" | "sysenter" | "sysexit" | "int" | "int3" | "into" | "ud2" | "hlt")
}

fn split_operands(rest: &str) -> Result<Vec<&str>, LineError> {
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in rest.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth = depth.checked_sub(1).ok_or_else(|| LineError::Syntax("unbalanced `)`".into()))?;
            }
            ',' if depth == 0 => {
                out.push(rest[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        bail!("unbalanced `(`");
    }
    out.push(rest[start..].trim());
    if let Some(empty) = out.iter().position(|s| s.is_empty()) {
        bail!("empty operand at position {}", empty + 1);
    }
    Ok(out)
}

fn parse_int(text: &str) -> Option<i64> {
    let (neg, body) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()?
    } else {
        if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        body.parse::<u64>().ok()?
    };
    let value = magnitude as i64;
    Some(if neg { value.wrapping_neg() } else { value })
}

fn parse_reg_token(tok: &str) -> Result<Register, LineError> {
    let tok = tok.trim();
    let name = tok.strip_prefix('%').ok_or_else(|| LineError::Syntax(format!("expected register, found `{tok}`")))?;
    Register::parse(&name.to_ascii_lowercase()).ok_or_else(|| LineError::Syntax(format!("unknown register `{tok}`")))
}

fn parse_operand(text: &str) -> Result<Operand, LineError> {
    if let Some(imm) = text.strip_prefix('$') {
        return parse_int(imm.trim())
            .map(Operand::Imm)
            .ok_or_else(|| LineError::Syntax(format!("malformed immediate `{text}`")));
    }
    if text.starts_with('%') {
        let reg = parse_reg_token(text)?;
        if reg.name == RegName::Rip {
            bail!("%rip is only valid as a memory base");
        }
        return Ok(Operand::Reg(reg));
    }
    let Some(open) = text.find('(') else {
        bail!("malformed operand `{text}` (immediates are written `$N`)");
    };
    if !text.ends_with(')') {
        bail!("trailing characters after `)` in `{text}`");
    }
    let disp_text = text[..open].trim();
    let displacement = if disp_text.is_empty() {
        0
    } else {
        parse_int(disp_text).ok_or_else(|| LineError::Syntax(format!("malformed displacement `{disp_text}`")))?
    };
    let inner = &text[open + 1..text.len() - 1];
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() > 3 {
        bail!("too many address components in `{text}`");
    }
    let base = match parts[0] {
        "" => None,
        tok => Some(parse_reg_token(tok)?),
    };
    let index = match parts.get(1) {
        None => None,
        Some(&"") => bail!("missing index register in `{text}`"),
        Some(tok) => Some(parse_reg_token(tok)?),
    };
    let scale = match parts.get(2) {
        None => 1,
        Some(tok) => match parse_int(tok) {
            Some(s @ (1 | 2 | 4 | 8)) => s as u8,
            _ => bail!("scale must be 1, 2, 4 or 8 in `{text}`"),
        },
    };
    if index.is_none() && parts.len() > 1 {
        bail!("scale without index in `{text}`");
    }
    let rip_relative = base.is_some_and(|b| b.name == RegName::Rip);
    for reg in base.iter().chain(index.iter()) {
        if reg.is_vector() {
            bail!("vector register {reg} cannot address memory");
        }
        if reg.name != RegName::Rip && reg.width != WidthClass::Full {
            bail!("address register {reg} must be a 64-bit register");
        }
    }
    if let Some(idx) = index {
        if rip_relative {
            bail!("%rip-relative addressing takes no index");
        }
        if matches!(idx.name, RegName::Rip | RegName::Gpr(Gpr::Rsp)) {
            bail!("{idx} cannot be an index register");
        }
    }
    Ok(Operand::Mem(MemOperand { displacement, base, index, scale, rip_relative }))
}

fn suffix_width(c: char) -> Option<u8> {
    match c {
        'q' => Some(8),
        'l' => Some(4),
        'w' => Some(2),
        'b' => Some(1),
        _ => None,
    }
}

#[derive(Clone, Copy)]
enum Family {
    Mov,
    Movabs,
    Lea,
    Binary(BinOp),
    Imul,
    Unary(UnOp),
    Shift(ShiftOp),
    Compare,
}

fn family(base: &str) -> Option<Family> {
    Some(match base {
        "mov" => Family::Mov,
        "movabs" => Family::Movabs,
        "lea" => Family::Lea,
        "add" => Family::Binary(BinOp::Add),
        "sub" => Family::Binary(BinOp::Sub),
        "and" => Family::Binary(BinOp::And),
        "or" => Family::Binary(BinOp::Or),
        "xor" => Family::Binary(BinOp::Xor),
        "imul" => Family::Imul,
        "inc" => Family::Unary(UnOp::Inc),
        "dec" => Family::Unary(UnOp::Dec),
        "neg" => Family::Unary(UnOp::Neg),
        "not" => Family::Unary(UnOp::Not),
        "shl" | "sal" => Family::Shift(ShiftOp::Shl),
        "shr" => Family::Shift(ShiftOp::Shr),
        "sar" => Family::Shift(ShiftOp::Sar),
        "cmp" | "test" => Family::Compare,
        _ => return None,
    })
}

/// Splits an integer mnemonic into its family and explicit size suffix.
fn integer_family(m: &str) -> Option<(Family, Option<u8>)> {
    if let Some(f) = family(m) {
        return Some((f, None));
    }
    let last = m.chars().last()?;
    let width = suffix_width(last)?;
    family(&m[..m.len() - 1]).map(|f| (f, Some(width)))
}

fn extend_form(m: &str) -> Option<Operation> {
    if m == "movslq" || m == "movsxd" {
        return Some(Operation::Extend { from: 4, to: 8, signed: true });
    }
    let rest = m.strip_prefix("mov")?;
    let mut chars = rest.chars();
    let signed = match chars.next()? {
        's' => true,
        'z' => false,
        _ => return None,
    };
    let from = match chars.next()? {
        'b' => 1,
        'w' => 2,
        _ => return None,
    };
    let to = suffix_width(chars.next()?)?;
    if chars.next().is_some() || to <= from {
        return None;
    }
    Some(Operation::Extend { from, to, signed })
}

fn gpr_operand_width(operands: &[Operand]) -> Option<u8> {
    operands.iter().find_map(|op| match op {
        Operand::Reg(r) if !r.is_vector() => Some(r.bytes()),
        _ => None,
    })
}

fn decode(m: &str, operands: &[Operand]) -> Result<Operation, LineError> {
    if operands.iter().any(|op| matches!(op, Operand::Reg(r) if r.is_vector())) {
        return Ok(Operation::Opaque);
    }
    if m == "cltq" {
        if !operands.is_empty() {
            bail!("`cltq` takes no operands");
        }
        return Ok(Operation::Cltq);
    }
    if let Some(op) = extend_form(m) {
        let (src, dst) = match operands {
            [src, Operand::Reg(dst)] => (src, dst),
            _ => bail!("`{m}` expects `src, %reg`"),
        };
        let (from, to) = match op {
            Operation::Extend { from, to, .. } => (from, to),
            _ => unreachable!(),
        };
        if dst.bytes() != to {
            bail!("destination {dst} does not match `{m}`");
        }
        match src {
            Operand::Reg(r) if r.bytes() != from => bail!("source {r} does not match `{m}`"),
            Operand::Imm(_) => bail!("`{m}` cannot extend an immediate"),
            _ => {}
        }
        return Ok(op);
    }
    let Some((fam, suffix)) = integer_family(m) else {
        return Ok(Operation::Opaque);
    };
    let dst = operands.last();
    if let Some(dst) = dst {
        if matches!(dst, Operand::Imm(_)) && !matches!(fam, Family::Compare) {
            bail!("`{m}` cannot write to an immediate");
        }
    }
    // Shift counts and the `imul` immediate do not constrain the operand size.
    let sized: &[Operand] = match fam {
        Family::Shift(_) => &operands[operands.len().saturating_sub(1)..],
        Family::Imul if operands.len() == 3 => &operands[1..],
        _ => operands,
    };
    let reg_width = gpr_operand_width(sized);
    if let (Some(s), Some(r)) = (suffix, reg_width) {
        if !matches!(fam, Family::Lea) && s != r {
            bail!("operand size suffix of `{m}` does not match its registers");
        }
    }
    let width_of = |fam_name: &str| -> Result<u8, LineError> {
        let w = match (suffix, reg_width) {
            (Some(s), _) => s,
            (None, Some(r)) => r,
            (None, None) => bail!("cannot determine operand size of `{fam_name}`; add a size suffix"),
        };
        for op in sized {
            if let Operand::Reg(r) = op {
                if r.bytes() != w && !matches!(fam, Family::Lea) {
                    bail!("register {r} does not match operand size of `{m}`");
                }
            }
        }
        Ok(w)
    };
    let n = operands.len();
    Ok(match fam {
        Family::Mov | Family::Movabs => {
            if n != 2 {
                bail!("`{m}` expects 2 operands");
            }
            let width = width_of(m)?;
            if matches!(fam, Family::Movabs) && width != 8 {
                bail!("`movabs` is a 64-bit move");
            }
            Operation::Mov { width }
        }
        Family::Lea => {
            let [Operand::Mem(_), Operand::Reg(dst)] = operands else {
                bail!("`{m}` expects `mem, %reg`");
            };
            let width = suffix.unwrap_or(dst.bytes());
            if width != dst.bytes() || width == 1 {
                bail!("invalid destination {dst} for `{m}`");
            }
            Operation::Lea { width }
        }
        Family::Binary(op) => {
            if n != 2 {
                bail!("`{m}` expects 2 operands");
            }
            Operation::Binary { op, width: width_of(m)? }
        }
        Family::Imul => match n {
            2 => {
                if !matches!(operands[1], Operand::Reg(_)) {
                    bail!("two-operand `{m}` writes a register");
                }
                Operation::Binary { op: BinOp::Mul, width: width_of(m)? }
            }
            3 => {
                if !matches!(operands[0], Operand::Imm(_)) || !matches!(operands[2], Operand::Reg(_)) {
                    bail!("three-operand `{m}` expects `$imm, src, %reg`");
                }
                Operation::MulImm { width: width_of(m)? }
            }
            // One-operand widening multiply writes rdx:rax; modelled as opaque.
            1 => Operation::Opaque,
            _ => bail!("`{m}` expects 1 to 3 operands"),
        },
        Family::Unary(op) => {
            if n != 1 {
                bail!("`{m}` expects 1 operand");
            }
            Operation::Unary { op, width: width_of(m)? }
        }
        Family::Shift(op) => {
            match operands {
                [_] => {}
                [Operand::Imm(_), _] => {}
                [Operand::Reg(r), _] if *r == Register::alias(Gpr::Rcx, WidthClass::Byte) => {}
                _ => bail!("`{m}` expects `[$imm | %cl,] dst`"),
            }
            Operation::Shift { op, width: width_of(m)? }
        }
        Family::Compare => {
            if n != 2 {
                bail!("`{m}` expects 2 operands");
            }
            if matches!(operands[1], Operand::Imm(_)) {
                bail!("`{m}` second operand cannot be an immediate");
            }
            Operation::Compare { width: width_of(m)? }
        }
    })
}

/// Memory access width of an opaque instruction.
fn opaque_mem_width(m: &str, operands: &[Operand]) -> Option<u8> {
    let has_ymm = operands.iter().any(|o| matches!(o, Operand::Reg(Register { name: RegName::Ymm(_), .. })));
    let has_xmm = operands.iter().any(|o| matches!(o, Operand::Reg(Register { name: RegName::Xmm(_), .. })));
    let stem = m.strip_prefix('v').unwrap_or(m);
    match stem {
        "movss" => return Some(4),
        "movsd" | "mulsd" | "fmadd231sd" => return Some(8),
        "movaps" | "movups" | "movdqa" | "movdqu" => return Some(if has_ymm { 32 } else { 16 }),
        "movq" => return Some(8),
        "movd" => return Some(4),
        _ => {}
    }
    if stem.ends_with("sd") {
        return Some(8);
    }
    if stem.ends_with("ss") {
        return Some(4);
    }
    if has_ymm {
        return Some(32);
    }
    if has_xmm {
        return Some(16);
    }
    gpr_operand_width(operands).or_else(|| m.chars().last().and_then(suffix_width))
}

struct Accesses {
    reads: Vec<Access>,
    writes: Vec<Access>,
}

impl Accesses {
    fn push(list: &mut Vec<Access>, a: Access) {
        if !list.contains(&a) {
            list.push(a);
        }
    }

    fn addr_regs(&mut self, mem: &MemOperand) {
        for r in mem.registers() {
            Self::push(&mut self.reads, Access::Reg { reg: r.name, bytes: 8 });
        }
    }

    fn read(&mut self, op: &Operand, mem_width: u8) {
        match op {
            Operand::Imm(_) => {}
            Operand::Reg(r) => Self::push(&mut self.reads, Access::Reg { reg: r.name, bytes: r.bytes() }),
            Operand::Mem(m) => {
                self.addr_regs(m);
                Self::push(&mut self.reads, Access::Mem { mem: *m, bytes: mem_width });
            }
        }
    }

    fn write(&mut self, op: &Operand, mem_width: u8) {
        match op {
            Operand::Imm(_) => {}
            Operand::Reg(r) => Self::push(&mut self.writes, Access::Reg { reg: r.name, bytes: r.bytes() }),
            Operand::Mem(m) => {
                self.addr_regs(m);
                Self::push(&mut self.writes, Access::Mem { mem: *m, bytes: mem_width });
            }
        }
    }

    fn reg_read(&mut self, g: Gpr, bytes: u8) {
        Self::push(&mut self.reads, Access::Reg { reg: RegName::Gpr(g), bytes });
    }

    fn reg_write(&mut self, g: Gpr, bytes: u8) {
        Self::push(&mut self.writes, Access::Reg { reg: RegName::Gpr(g), bytes });
    }
}

fn derive_accesses(
    m: &str,
    operation: Operation,
    operands: &[Operand],
) -> Result<(Vec<Access>, Vec<Access>), LineError> {
    let mut acc = Accesses { reads: Vec::new(), writes: Vec::new() };
    match operation {
        Operation::Mov { width } => {
            acc.read(&operands[0], width);
            acc.write(&operands[1], width);
        }
        Operation::Extend { from, to, .. } => {
            acc.read(&operands[0], from);
            acc.write(&operands[1], to);
        }
        Operation::Lea { .. } => {
            if let Operand::Mem(mem) = &operands[0] {
                acc.addr_regs(mem);
            }
            acc.write(&operands[1], 8);
        }
        Operation::Binary { width, .. } => {
            acc.read(&operands[0], width);
            acc.read(&operands[1], width);
            acc.write(&operands[1], width);
        }
        Operation::Unary { width, .. } => {
            acc.read(&operands[0], width);
            acc.write(&operands[0], width);
        }
        Operation::Shift { width, .. } => {
            for op in operands {
                acc.read(op, width);
            }
            acc.write(operands.last().expect("shift has a destination"), width);
        }
        Operation::MulImm { width } => {
            acc.read(&operands[1], width);
            acc.write(&operands[2], width);
        }
        Operation::Compare { width } => {
            acc.read(&operands[0], width);
            acc.read(&operands[1], width);
        }
        Operation::Cltq => {
            acc.reg_read(Gpr::Rax, 4);
            acc.reg_write(Gpr::Rax, 8);
        }
        Operation::Opaque => opaque_accesses(&mut acc, m, operands)?,
    }
    Ok((acc.reads, acc.writes))
}

fn opaque_accesses(acc: &mut Accesses, m: &str, operands: &[Operand]) -> Result<(), LineError> {
    let mem_width = if operands.iter().any(|o| o.as_mem().is_some()) {
        opaque_mem_width(m, operands)
            .ok_or_else(|| LineError::Syntax(format!("cannot determine memory access width of `{m}`")))?
    } else {
        0
    };
    const IMPLICIT: [&str; 5] = ["mul", "imul", "div", "idiv", "xchg"];
    let stem = if IMPLICIT.contains(&m) {
        m
    } else {
        match m.char_indices().last() {
            Some((i, c)) if suffix_width(c).is_some() && IMPLICIT.contains(&&m[..i]) => &m[..i],
            _ => m,
        }
    };
    match (stem, operands) {
        // Widening multiply / divide: implicit rdx:rax.
        ("mul" | "imul" | "div" | "idiv", [src]) => {
            acc.read(src, mem_width);
            acc.reg_read(Gpr::Rax, 8);
            if matches!(stem, "div" | "idiv") {
                acc.reg_read(Gpr::Rdx, 8);
            }
            acc.reg_write(Gpr::Rax, 8);
            acc.reg_write(Gpr::Rdx, 8);
        }
        ("xchg", [a, b]) => {
            for op in [a, b] {
                acc.read(op, mem_width);
                acc.write(op, mem_width);
            }
        }
        _ if matches!(m, "cqto" | "cqo" | "cltd" | "cdq") => {
            acc.reg_read(Gpr::Rax, 8);
            acc.reg_write(Gpr::Rdx, 8);
        }
        _ if matches!(m, "cwtl" | "cwde") => {
            acc.reg_read(Gpr::Rax, 2);
            acc.reg_write(Gpr::Rax, 8);
        }
        (_, []) => {}
        (_, [only]) => {
            acc.read(only, mem_width);
            acc.write(only, mem_width);
        }
        (_, [sources @ .., dst]) => {
            for op in sources {
                acc.read(op, mem_width);
            }
            acc.write(dst, mem_width);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(text: &str) -> Instruction {
        let k = parse_kernel(text).unwrap();
        assert_eq!(k.len(), 1);
        k.instructions.into_iter().next().unwrap()
    }

    fn mem(base: Gpr, disp: i64, bytes: u8) -> Access {
        Access::Mem { mem: MemOperand::base_disp(base, disp), bytes }
    }

    fn reg(g: Gpr, bytes: u8) -> Access {
        Access::Reg { reg: RegName::Gpr(g), bytes }
    }

    #[test]
    fn vector_kernel_structure() {
        let k = parse_kernel("vmulsd (%rax), %xmm0, %xmm1\nvmovsd %xmm1, (%r10)").unwrap();
        assert_eq!(k.len(), 2);
        let [mul, st] = &k.instructions[..] else { panic!() };
        assert_eq!(mul.class(), SemanticClass::Opaque);
        assert!(mul.reads.contains(&mem(Gpr::Rax, 0, 8)));
        assert!(!mul.writes_memory());
        assert_eq!(st.class(), SemanticClass::Opaque);
        assert_eq!(st.writes, vec![mem(Gpr::R10, 0, 8)]);
        assert!(!st.reads_memory());
    }

    #[test]
    fn empty_input() {
        assert!(parse_kernel("").unwrap().is_empty());
        assert!(parse_kernel("\n  # just a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn register_arithmetic() {
        let i = one("addq $8, %rax");
        assert_eq!(i.class(), SemanticClass::SupportedInteger);
        assert_eq!(i.writes, vec![reg(Gpr::Rax, 8)]);
        assert!(!i.reads_memory() && !i.writes_memory());
    }

    #[test]
    fn read_modify_write_memory() {
        let i = one("addq $1, (%rax)");
        let (reads, writes) = access_descriptors(&i);
        assert_eq!(reads.iter().filter(|a| a.is_mem()).collect::<Vec<_>>(), vec![&mem(Gpr::Rax, 0, 8)]);
        assert_eq!(writes, &[mem(Gpr::Rax, 0, 8)]);
    }

    #[test]
    fn lea_touches_no_memory() {
        let i = one("lea 16(%rax,%rbx,4), %rcx");
        assert_eq!(i.reads, vec![reg(Gpr::Rax, 8), reg(Gpr::Rbx, 8)]);
        assert_eq!(i.writes, vec![reg(Gpr::Rcx, 8)]);
        assert_eq!(i.operation, Operation::Lea { width: 8 });
    }

    #[test]
    fn movslq_from_stack() {
        let i = one("movslq -4(%rsp), %rdx");
        assert_eq!(i.reads, vec![reg(Gpr::Rsp, 8), mem(Gpr::Rsp, -4, 4)]);
        assert_eq!(i.writes, vec![reg(Gpr::Rdx, 8)]);
    }

    #[test]
    fn control_flow_rejected_with_line() {
        let err = parse_kernel("addq $1, %rax\n\njne .L2").unwrap_err();
        assert_eq!(err, ParseError::ControlFlow { line: 3, mnemonic: "jne".into() });
        for m in ["jmp 1(%rax)", "call 0(%rip)", "ret", "retq", "loop 4(%rax)"] {
            assert!(matches!(parse_kernel(m), Err(ParseError::ControlFlow { .. })), "{m}");
        }
    }

    #[test]
    fn unknown_mnemonic_is_opaque() {
        let i = one("popcntq (%rdi), %rsi");
        assert_eq!(i.class(), SemanticClass::Opaque);
        assert!(i.reads.contains(&mem(Gpr::Rdi, 0, 8)));
        assert_eq!(i.writes, vec![reg(Gpr::Rsi, 8)]);
    }

    #[test]
    fn rip_relative_operand() {
        let i = one("movq 0x20(%rip), %rax");
        let m = i.operands[0].as_mem().unwrap();
        assert!(m.rip_relative);
        assert_eq!(m.displacement, 0x20);
        assert!(parse_kernel("movq 0(%rip,%rax,2), %rbx").is_err());
    }

    #[test]
    fn syntax_errors() {
        for bad in [
            "movq 8, %rax",
            "movq $x, %rax",
            "movq (%rax, %rbx",
            "movq (%eax), %rbx",
            "movq (%rax,%rbx,3), %rcx",
            "movq (%rax,%rsp), %rcx",
            "movq %rax, $1",
            "movq (%rax), (%rbx)",
            "movq %eax, %rbx",
            "movq $1, (%rax),",
            "addq %rip, %rax",
            "movq (%xmm0), %rax",
            "mov $1, (%rax)",
            "leaq %rax, %rbx",
        ] {
            assert!(matches!(parse_kernel(bad), Err(ParseError::Syntax { line: 1, .. })), "{bad}");
        }
    }

    #[test]
    fn widths_follow_table() {
        assert_eq!(one("movss (%rax), %xmm0").reads[1].bytes(), 4);
        assert_eq!(one("vfmadd231sd (%rax), %xmm1, %xmm2").reads[1].bytes(), 8);
        assert_eq!(one("movaps %xmm0, (%rax)").writes[0].bytes(), 16);
        assert_eq!(one("vmovups %ymm3, 32(%rax)").writes[0].bytes(), 32);
        assert_eq!(one("movq %xmm0, (%rax)").writes[0].bytes(), 8);
        assert_eq!(one("movb %al, (%rdi)").writes[0].bytes(), 1);
        assert_eq!(one("movzbl (%rdi), %eax").reads[1].bytes(), 1);
        assert_eq!(one("movw $3, 2(%rsi)").writes[0].bytes(), 2);
    }

    #[test]
    fn aliases_resolve_to_canonical() {
        for (name, g, bytes) in [
            ("eax", Gpr::Rax, 4),
            ("ah", Gpr::Rax, 1),
            ("r10d", Gpr::R10, 4),
            ("r9w", Gpr::R9, 2),
            ("r15b", Gpr::R15, 1),
            ("r15l", Gpr::R15, 1),
            ("sil", Gpr::Rsi, 1),
        ] {
            let r = Register::parse(name).unwrap();
            assert_eq!(r.canonical_gpr(), Some(g), "{name}");
            assert_eq!(r.bytes(), bytes, "{name}");
        }
        assert!(Register::parse("xmm16").is_none());
        assert!(Register::parse("r16").is_none());
    }

    #[test]
    fn synthetic_addresses() {
        let k = parse_kernel_at("nop\nnop\nnop", 0x1000).unwrap();
        assert_eq!(k.address_of(2), 0x1020);
    }
}
