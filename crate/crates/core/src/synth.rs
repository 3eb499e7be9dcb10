//! Random kernel generator for property tests and benchmarks.
//!
//! [`Mode::SteadyState`] kernels split the registers in two roles. Pointer
//! registers (`rax`..`rbp`) change only by self-affine updates, so every
//! address advances by a fixed stride per iteration and no address depends
//! on loaded data. Data registers (`r8`..`r15`) take loads, stores and
//! arithmetic freely. On such kernels every memory dependency recurs in
//! each iteration once it first appears.
//!
//! [`Mode::General`] additionally clobbers pointers with data, loads,
//! masking, partial writes and opaque instructions.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::asmmodel::{parse_kernel, Kernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SteadyState,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub mode: Mode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { min_len: 3, max_len: 20, mode: Mode::SteadyState }
    }
}

const POINTERS: [&str; 8] = ["rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rsp", "rbp"];
const DATA: [&str; 8] = ["r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"];
const DISPS: [i64; 12] = [-32, -24, -16, -8, -4, 0, 4, 8, 12, 16, 24, 32];
const STRIDES: [i64; 6] = [1, 2, 4, 8, 16, 24];

fn pick<'a, R: Rng + ?Sized, T>(rng: &mut R, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty")
}

fn mem<R: Rng + ?Sized>(rng: &mut R) -> String {
    let base = pick(rng, &POINTERS);
    let disp = *pick(rng, &DISPS);
    let disp = if disp == 0 { String::new() } else { disp.to_string() };
    if rng.random_bool(0.25) {
        let index = pick(rng, &POINTERS[..6]);
        let scale = pick(rng, &[1, 2, 4, 8]);
        format!("{disp}(%{base},%{index},{scale})")
    } else {
        format!("{disp}(%{base})")
    }
}

/// Data register name at `bytes` width.
fn data_reg(name: &str, bytes: u8) -> String {
    match bytes {
        8 => format!("%{name}"),
        4 => format!("%{name}d"),
        2 => format!("%{name}w"),
        _ => format!("%{name}b"),
    }
}

fn sized<R: Rng + ?Sized>(rng: &mut R) -> (char, u8) {
    *pick(rng, &[('q', 8), ('q', 8), ('l', 4), ('w', 2), ('b', 1)])
}

fn steady_instruction<R: Rng + ?Sized>(rng: &mut R) -> String {
    let d = pick(rng, &DATA);
    let d2 = pick(rng, &DATA);
    let p = pick(rng, &POINTERS);
    match rng.random_range(0..14) {
        0 | 1 => {
            let (s, b) = sized(rng);
            format!("mov{s} {}, {}", mem(rng), data_reg(d, b))
        }
        2 | 3 => {
            let (s, b) = sized(rng);
            format!("mov{s} {}, {}", data_reg(d, b), mem(rng))
        }
        4 => format!("movq ${}, {}", rng.random_range(-100..100), mem(rng)),
        5 => {
            let op = pick(rng, &["add", "sub", "and", "or", "xor"]);
            let (s, b) = *pick(rng, &[('q', 8), ('l', 4)]);
            format!("{op}{s} {}, {}", data_reg(d, b), mem(rng))
        }
        6 => match rng.random_range(0..3) {
            0 => format!("addq ${}, {}", rng.random_range(1..50), mem(rng)),
            1 => format!("incq {}", mem(rng)),
            _ => format!("negl {}", mem(rng)),
        },
        7 => {
            let op = pick(rng, &["add", "sub", "imul", "xor", "cmp"]);
            format!("{op}q {}, %{d}", mem(rng))
        }
        8 => match rng.random_range(0..3) {
            0 => format!("movzbl {}, %{d}d", mem(rng)),
            1 => format!("movslq {}, %{d}", mem(rng)),
            _ => format!("movswq {}, %{d}", mem(rng)),
        },
        9 => match rng.random_range(0..5) {
            0 => format!("addq %{d2}, %{d}"),
            1 => format!("imulq $3, %{d2}, %{d}"),
            2 => format!("shlq ${}, %{d}", rng.random_range(1..8)),
            3 => format!("movq %{p}, %{d}"),
            _ => format!("leaq 8(%{p},%{d2},2), %{d}"),
        },
        10 | 11 => {
            let k = *pick(rng, &STRIDES);
            match rng.random_range(0..5) {
                0 => format!("addq ${k}, %{p}"),
                1 => format!("subq ${k}, %{p}"),
                2 => format!("incq %{p}"),
                3 => format!("decq %{p}"),
                _ => format!("leaq {k}(%{p}), %{p}"),
            }
        }
        12 => match rng.random_range(0..3) {
            0 => format!("vmovsd {}, %xmm{}", mem(rng), rng.random_range(0..16)),
            1 => format!("vmovsd %xmm{}, {}", rng.random_range(0..16), mem(rng)),
            _ => format!("vmulsd {}, %xmm1, %xmm2", mem(rng)),
        },
        _ => format!("popcntq {}, %{d}", mem(rng)),
    }
}

fn clobbering_instruction<R: Rng + ?Sized>(rng: &mut R) -> String {
    let p = pick(rng, &POINTERS);
    let p2 = pick(rng, &POINTERS);
    let d = pick(rng, &DATA);
    match rng.random_range(0..13) {
        0 => format!("movq {}, %{p}", mem(rng)),
        1 => format!("addq %{d}, %{p}"),
        2 => format!("movl %{d}d, %e{}", &p[1..]),
        3 => format!("movb $1, %{}", pick(rng, &["al", "bl", "ah", "sil"])),
        4 => format!("xorq %{p}, %{p}"),
        5 => format!("shrq $3, %{p}"),
        6 => format!("imulq %{p2}, %{p}"),
        7 => "cqto".into(),
        8 => format!("mulq %{d}"),
        9 => format!("xchgq %{p}, %{p2}"),
        10 => format!("movq {}(%rip), %{d}", 8 * rng.random_range(-4..4)),
        11 => format!("andq $15, %{p}"),
        _ => format!("movq %{d}, {}(%rip)", 8 * rng.random_range(-4..4)),
    }
}

pub fn kernel_text<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> String {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut out = String::new();
    for _ in 0..len {
        let line = match cfg.mode {
            Mode::General if rng.random_bool(0.3) => clobbering_instruction(rng),
            _ => steady_instruction(rng),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn kernel<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Kernel {
    let text = kernel_text(rng, cfg);
    parse_kernel(&text).unwrap_or_else(|e| panic!("generated kernel does not parse: {e}\n{text}"))
}
