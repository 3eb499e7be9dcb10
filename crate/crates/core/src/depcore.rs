//! Memory-carried read-after-write dependency detection.
//!
//! The kernel is unrolled until it spans the reorder buffer plus one full
//! kernel, executed abstractly under a seeded random environment, and every
//! load is linked to the store that last wrote its bytes. Links whose
//! unrolled distance is at least the ROB size cannot stall issue and are
//! dropped. The rest are re-rolled into `(src, dst, delta_k)` triplets; a
//! triplet observed in fewer than `spurious_threshold` of the iterations where
//! it could occur is treated as initialization noise. Running several seeds
//! and intersecting the results removes accidental aliasing between random
//! values.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asmmodel::{Kernel, DEFAULT_BASE_ADDRESS};
use crate::exec::{self, Strategy};
use crate::semantics::{ShadowState, UnrolledId};

/// Skylake reorder buffer capacity.
pub const DEFAULT_ROB_SIZE: usize = 224;
pub const DEFAULT_SPURIOUS_THRESHOLD: f64 = 0.80;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DepError {
    #[error("kernel contains no instructions")]
    EmptyKernel,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepConfig {
    pub rob_size: usize,
    pub spurious_threshold: f64,
    pub seeds: Vec<u64>,
    pub base_address: u64,
}

impl Default for DepConfig {
    fn default() -> Self {
        DepConfig {
            rob_size: DEFAULT_ROB_SIZE,
            spurious_threshold: DEFAULT_SPURIOUS_THRESHOLD,
            seeds: DEFAULT_SEEDS.to_vec(),
            base_address: DEFAULT_BASE_ADDRESS,
        }
    }
}

impl DepConfig {
    pub fn validate(&self) -> Result<(), DepError> {
        self.validate_window()?;
        if self.seeds.is_empty() {
            return Err(DepError::InvalidConfig("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Checks everything but the seed list.
    fn validate_window(&self) -> Result<(), DepError> {
        if self.rob_size == 0 {
            return Err(DepError::InvalidConfig("rob size must be at least 1".into()));
        }
        if !(self.spurious_threshold > 0.0 && self.spurious_threshold <= 1.0) {
            return Err(DepError::InvalidConfig(format!(
                "spurious threshold must lie in (0, 1], got {}",
                self.spurious_threshold
            )));
        }
        Ok(())
    }
}

/// A re-rolled dependency: instruction `src` of iteration `k` writes bytes
/// that instruction `dst` of iteration `k + delta_k` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dependency {
    pub src: usize,
    pub dst: usize,
    #[serde(rename = "dk")]
    pub delta_k: usize,
    pub hits: u64,
    pub eligible: u64,
}

pub type DepKey = (usize, usize, usize);

impl Dependency {
    pub fn key(&self) -> DepKey {
        (self.src, self.dst, self.delta_k)
    }

    pub fn hit_ratio(&self) -> f64 {
        self.hits as f64 / self.eligible as f64
    }

    /// Observed in fewer than `threshold` of its eligible iterations.
    pub fn is_spurious(&self, threshold: f64) -> bool {
        // Slack absorbs the rounding of `threshold * eligible` (0.7 * 10 > 7).
        let needed = threshold * self.eligible as f64;
        (self.hits as f64) < needed - 1e-9 * self.eligible as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepReport {
    pub kernel_sha256: String,
    pub rob_size: usize,
    pub seeds: Vec<u64>,
    pub copies: usize,
    pub deps: Vec<Dependency>,
    pub dropped_bottom_stores: u64,
}

impl DepReport {
    pub fn keys(&self) -> BTreeSet<DepKey> {
        self.deps.iter().map(Dependency::key).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// SHA-256 of the kernel's canonical text.
pub fn kernel_digest(kernel: &Kernel) -> String {
    hex::encode(Sha256::digest(kernel.to_string().as_bytes()))
}

/// Smallest `n` with `n * kernel_len >= rob_size + kernel_len`.
pub fn unroll_count(kernel_len: usize, rob_size: usize) -> Result<usize, DepError> {
    if kernel_len == 0 {
        return Err(DepError::EmptyKernel);
    }
    Ok(rob_size.div_ceil(kernel_len) + 1)
}

/// Writer/reader pairs of one abstract run over the unrolled kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTrace {
    pub copies: usize,
    /// `(writer, reader)` unrolled ids, distance below the ROB size, sorted.
    pub pairs: Vec<(UnrolledId, UnrolledId)>,
    pub dropped_bottom_stores: u64,
}

pub fn raw_dependencies<R: RngCore + ?Sized>(
    kernel: &Kernel,
    cfg: &DepConfig,
    rng: &mut R,
) -> Result<RawTrace, DepError> {
    let copies = unroll_count(kernel.len(), cfg.rob_size)?;
    let mut state = ShadowState::new(cfg.base_address);
    let mut pairs = Vec::new();
    let mut writers = Vec::new();
    for copy in 0..copies {
        for instr in &kernel.instructions {
            let id = copy * kernel.len() + instr.index;
            let events = state.step(instr, id, rng);
            writers.clear();
            for load in &events.loads {
                writers.extend(load.last_writers.iter().copied().filter(|&w| id - w < cfg.rob_size));
            }
            writers.sort_unstable();
            writers.dedup();
            pairs.extend(writers.iter().map(|&w| (w, id)));
        }
    }
    Ok(RawTrace { copies, pairs, dropped_bottom_stores: state.dropped_bottom_stores })
}

/// Folds unrolled pairs into triplets with hit and eligibility counts.
pub fn reroll(pairs: &[(UnrolledId, UnrolledId)], kernel_len: usize, copies: usize) -> Vec<Dependency> {
    let mut hits: BTreeMap<DepKey, u64> = BTreeMap::new();
    for &(w, r) in pairs {
        let (k1, src) = (w / kernel_len, w % kernel_len);
        let (k2, dst) = (r / kernel_len, r % kernel_len);
        *hits.entry((src, dst, k2 - k1)).or_default() += 1;
    }
    hits.into_iter()
        .map(|((src, dst, delta_k), hits)| {
            assert!(delta_k < copies, "triplet reaches past the unrolled window");
            let eligible = (copies - delta_k) as u64;
            debug_assert!(hits <= eligible);
            Dependency { src, dst, delta_k, hits, eligible }
        })
        .collect()
}

/// Drops triplets seen in fewer than `threshold` of their eligible iterations.
pub fn filter_spurious(candidates: Vec<Dependency>, threshold: f64) -> Vec<Dependency> {
    candidates.into_iter().filter(|d| !d.is_spurious(threshold)).collect()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Single-seed analysis.
pub fn analyze(kernel: &Kernel, cfg: &DepConfig, seed: u64) -> Result<DepReport, DepError> {
    analyze_with_rng(kernel, cfg, seed, &mut seeded_rng(seed))
}

/// Single-seed analysis drawing fresh values from `rng`; `seed` is only echoed.
pub fn analyze_with_rng<R: RngCore + ?Sized>(
    kernel: &Kernel,
    cfg: &DepConfig,
    seed: u64,
    rng: &mut R,
) -> Result<DepReport, DepError> {
    cfg.validate_window()?;
    if kernel.is_empty() {
        return Err(DepError::EmptyKernel);
    }
    let trace = raw_dependencies(kernel, cfg, rng)?;
    let deps = filter_spurious(reroll(&trace.pairs, kernel.len(), trace.copies), cfg.spurious_threshold);
    Ok(DepReport {
        kernel_sha256: kernel_digest(kernel),
        rob_size: cfg.rob_size,
        seeds: vec![seed],
        copies: trace.copies,
        deps,
        dropped_bottom_stores: trace.dropped_bottom_stores,
    })
}

/// Intersection of the per-seed analyses over `cfg.seeds`.
pub fn analyze_amplified(kernel: &Kernel, cfg: &DepConfig) -> Result<DepReport, DepError> {
    analyze_amplified_with(kernel, cfg, Strategy::default(), seeded_rng)
}

/// Like [`analyze_amplified`], with an explicit execution strategy and
/// per-seed random source.
pub fn analyze_amplified_with<R, F>(
    kernel: &Kernel,
    cfg: &DepConfig,
    strategy: Strategy,
    make_rng: F,
) -> Result<DepReport, DepError>
where
    R: RngCore,
    F: Fn(u64) -> R + Sync + Send,
{
    cfg.validate()?;
    if kernel.is_empty() {
        return Err(DepError::EmptyKernel);
    }
    let runs = exec::map(&cfg.seeds, strategy, |&seed| analyze_with_rng(kernel, cfg, seed, &mut make_rng(seed)));
    let mut runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter();
    let mut report = runs.next().expect("seeds validated non-empty");
    for other in runs {
        let keep = other.keys();
        report.deps.retain(|d| keep.contains(&d.key()));
    }
    report.seeds = cfg.seeds.clone();
    Ok(report)
}

/// Amplified analysis of many kernels; parallel across kernels.
pub fn analyze_batch(kernels: &[Kernel], cfg: &DepConfig, strategy: Strategy) -> Vec<Result<DepReport, DepError>> {
    exec::map(kernels, strategy, |k| analyze_amplified_with(k, cfg, Strategy::Sequential, seeded_rng))
}
