//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use staticdeps::asmmodel::{parse_kernel, Kernel};
use staticdeps::depcore::{
    analyze_amplified, filter_spurious, seeded_rng, unroll_count, DepConfig, DepKey, Dependency,
};
use staticdeps::liftstats::{self, kendall_tau, lift, summarize, BlockPrediction, Lifted, Prediction};
use staticdeps::oracle::{run_concrete, run_concrete_triplets, OracleConfig, RegInit};
use staticdeps::synth::{self, Mode, SynthConfig};

const FIB: &str = "movq -8(%rax), %rbx\naddq -16(%rax), %rbx\nmovq %rbx, (%rax)\naddq $8, %rax\n";
const ALIAS: &str = "vmulsd (%rax), %xmm0, %xmm1\nvmovsd %xmm1, (%r10)\n";
// Both pointers collapse to 0 or 8, so whether they alias depends on the seed.
const COIN_ALIAS: &str = "andq $8, %rax\nandq $8, %rbx\nmovq %r8, (%rax)\nmovq (%rbx), %r9\n";
// Reads the store from 200 iterations back: 600 executed instructions.
const FAR_READ: &str = "movq %r8, (%rax)\nmovq -200(%rax), %r9\naddq $1, %rax\n";

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:?}, limit {limit:?}"))?;
    Ok(t)
}

fn oracle_keys(kernel: &Kernel, rob: usize, seed: u64) -> BTreeSet<DepKey> {
    let cfg = OracleConfig {
        iterations: 3 * unroll_count(kernel.len(), rob).unwrap() as u64,
        reg_init: RegInit::Distinct(seed),
        // The ROB window admits writer-reader distances up to rob - 1.
        lifetime: Some(rob as u64 - 1),
        ..OracleConfig::default()
    };
    run_concrete_triplets(kernel, &cfg).unwrap().counts.into_keys().collect()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = DepConfig::default();
    let mut rng = seeded_rng(0x5eed);
    let (mut total_deps, mut with_deps) = (0, 0);
    for i in 0..1000 {
        let kernel = synth::kernel(&mut rng, &SynthConfig::default());
        let stat = analyze_amplified(&kernel, &cfg).unwrap().keys();
        let dynamic = oracle_keys(&kernel, cfg.rob_size, 42 + i);
        if stat != dynamic {
            return Err(format!(
                "kernel {i}: static-only {:?}, oracle-only {:?}\n{kernel}",
                stat.difference(&dynamic).collect::<Vec<_>>(),
                dynamic.difference(&stat).collect::<Vec<_>>()
            ));
        }
        total_deps += stat.len();
        with_deps += usize::from(!stat.is_empty());
    }
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("1000 kernels, {with_deps} with dependencies, {total_deps} triplets, {t:.2?}"))
}

fn fibonacci_exactness() -> Outcome {
    let start = Instant::now();
    let report = analyze_amplified(&parse_kernel(FIB).unwrap(), &DepConfig::default()).unwrap();
    let got: Vec<_> = report.deps.iter().map(|d| (d.key(), d.hits == d.eligible)).collect();
    ensure(got == [((2, 0, 1), true), ((2, 1, 2), true)], || format!("got {:?}", report.deps))?;
    let t = within(start, Duration::from_secs(1))?;
    Ok(format!("{{(2,0,1), (2,1,2)}} at 100%, {t:.2?}"))
}

fn alias_reproduction() -> Outcome {
    let start = Instant::now();
    let kernel = parse_kernel(ALIAS).unwrap();
    let uniform = OracleConfig { reg_init: RegInit::Uniform(0x232_4000), ..OracleConfig::default() };
    let trace = run_concrete(&kernel, &uniform).unwrap();
    let deps: Vec<_> = trace.deps.iter().map(|d| (d.src, d.dst, d.rho)).collect();
    ensure(deps == [(1, 0, uniform.iterations - 1)], || format!("uniform oracle gave {deps:?}"))?;
    let distinct = run_concrete(&kernel, &OracleConfig::default()).unwrap();
    ensure(distinct.deps.is_empty(), || format!("distinct oracle gave {:?}", distinct.deps))?;
    let report = analyze_amplified(&kernel, &DepConfig::default()).unwrap();
    ensure(report.deps.is_empty(), || format!("static gave {:?}", report.deps))?;

    let dir = std::env::temp_dir().join(format!("staticdeps-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("alias.s");
    std::fs::write(&path, ALIAS).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_staticdeps"))
        .args(["cov", path.to_str().unwrap(), "--reg-init", "uniform:0x2324000"])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success() && stdout.lines().next() == Some("cov_u 0.0%"), || {
        format!("cov printed {stdout:?}, status {}", out.status)
    })?;
    let t = within(start, Duration::from_secs(1))?;
    Ok(format!("uniform rho {}, distinct 0, static 0, cov_u 0.0%, {t:.2?}", uniform.iterations - 1))
}

fn spurious_boundary() -> Outcome {
    let table = vec![
        Dependency { src: 0, dst: 1, delta_k: 1, hits: 79, eligible: 100 },
        Dependency { src: 2, dst: 3, delta_k: 1, hits: 80, eligible: 100 },
    ];
    let kept: Vec<_> = filter_spurious(table, 0.80).iter().map(Dependency::key).collect();
    ensure(kept == [(2, 3, 1)], || format!("kept {kept:?}"))?;
    Ok("0.79 discarded, 0.80 retained".into())
}

fn unroll_bound() -> Outcome {
    let mut rng = seeded_rng(5);
    for _ in 0..200 {
        let len = rng.random_range(1..=300usize);
        let rob = rng.random_range(1..=1024usize);
        let n = unroll_count(len, rob).unwrap();
        ensure(n * len >= rob + len && (n - 1) * len < rob + len, || format!("|K|={len} rob={rob} n={n}"))?;
    }
    Ok("200 random pairs".into())
}

/// Seeds are added in this order; seed 4 aliases the coin kernel, seed 5 does not.
const SEED_ORDER: [u64; 5] = [4, 2, 5, 1, 3];

fn determinism_and_amplification() -> Outcome {
    let mut rng = seeded_rng(6);
    let mut shrunk = 0;
    for i in 0..=100 {
        let mode = if i % 2 == 0 { Mode::SteadyState } else { Mode::General };
        let kernel = if i == 100 {
            parse_kernel(COIN_ALIAS).unwrap()
        } else {
            synth::kernel(&mut rng, &SynthConfig { mode, ..SynthConfig::default() })
        };
        let with = |seeds: &[u64]| DepConfig { seeds: seeds.to_vec(), ..DepConfig::default() };
        let a = analyze_amplified(&kernel, &with(&[1, 2, 3])).unwrap();
        let b = analyze_amplified(&kernel, &with(&[1, 2, 3])).unwrap();
        ensure(a.to_json() == b.to_json(), || format!("kernel {i}: reports differ"))?;
        let mut prev: Option<BTreeSet<DepKey>> = None;
        for n in 1..=SEED_ORDER.len() {
            let keys = analyze_amplified(&kernel, &with(&SEED_ORDER[..n])).unwrap().keys();
            if let Some(p) = &prev {
                ensure(keys.is_subset(p), || format!("kernel {i}: {n} seeds grew the set"))?;
                shrunk += usize::from(keys.len() < p.len());
            }
            prev = Some(keys);
        }
    }
    ensure(shrunk > 0, || "no kernel exercised amplification".into())?;
    Ok(format!("100 random kernels plus a seed-dependent alias, byte-identical JSON, non-increasing over 5 seeds ({shrunk} strict shrinks)"))
}

fn brute_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut s, mut n0, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    let sign = |d: f64| (d > 0.0) as i64 - (d < 0.0) as i64;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (a, b) = (sign(x[i] - x[j]), sign(y[i] - y[j]));
            n0 += 1;
            s += a * b;
            tx += i64::from(a == 0);
            ty += i64::from(b == 0);
        }
    }
    let d = (((n0 - tx) * (n0 - ty)) as f64).sqrt();
    (d > 0.0).then(|| s as f64 / d)
}

fn lists(n: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..3usize.pow(n as u32)).map(move |mut code| {
        (0..n)
            .map(|_| {
                let v = code % 3;
                code /= 3;
                (v + 1) as f64
            })
            .collect()
    })
}

fn tau_agrees(x: &[f64], y: &[f64]) -> Result<(), String> {
    match (brute_tau(x, y), kendall_tau(x, y)) {
        (Some(b), Ok(t)) if (b - t).abs() < 1e-12 => Ok(()),
        (None, Err(liftstats::StatsError::UndefinedTau)) => Ok(()),
        (b, t) => Err(format!("tau({x:?}, {y:?}): brute {b:?}, fast {t:?}")),
    }
}

fn lifting_and_stats() -> Outcome {
    let mut rng = seeded_rng(7);
    for r in 0..50 {
        let blocks: Vec<BlockPrediction> = (0..rng.random_range(1..12))
            .map(|b| BlockPrediction {
                block: format!("b{b}"),
                occurrences: rng.random_range(1..100_000),
                // Quarter-cycle steps keep every sum exact in f64.
                prediction: Prediction::Cycles(rng.random_range(0..4000u32) as f64 / 4.0),
            })
            .collect();
        let quarters: u128 = blocks
            .iter()
            .map(|b| match b.prediction {
                Prediction::Cycles(c) => b.occurrences as u128 * (c * 4.0) as u128,
                Prediction::Failed => unreachable!(),
            })
            .sum();
        let expected = quarters as f64 / 4.0;
        ensure(lift(&blocks) == Lifted::Cycles(expected), || format!("record {r}: {:?} vs {expected}", lift(&blocks)))?;
        let mut failing = blocks.clone();
        let at = rng.random_range(0..failing.len());
        failing[at].prediction = Prediction::Failed;
        ensure(lift(&failing) == Lifted::Discarded, || format!("record {r}: FAIL not propagated"))?;
    }

    let mut pairs = 0u64;
    for n in 2..=8 {
        for x in lists(n) {
            // Beyond six elements, fixing x sorted covers every multiset of
            // pairs; tau depends only on that multiset.
            if n > 6 && x.windows(2).any(|w| w[0] > w[1]) {
                continue;
            }
            for y in lists(n) {
                tau_agrees(&x, &y)?;
                pairs += 1;
            }
        }
    }

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let s = summarize(&[0.0, 0.1, 0.2, 0.3], 0).map_err(|e| e.to_string())?;
    ensure(close(s.q1, 7.5) && close(s.median, 15.0) && close(s.q3, 22.5), || format!("{s:?}"))?;
    let s = summarize(&[0.1], 0).map_err(|e| e.to_string())?;
    ensure(close(s.q1, 10.0) && close(s.median, 10.0) && close(s.q3, 10.0), || format!("{s:?}"))?;
    let s = summarize(&[0.1, 0.2, 0.3], 0).map_err(|e| e.to_string())?;
    ensure(close(s.mape, 20.0) && close(s.median, 20.0), || format!("{s:?}"))?;
    Ok(format!("50 records exact, FAIL discards, tau agrees on {pairs} list pairs, quartiles to 1e-9"))
}

fn lifetime_monotonicity() -> Outcome {
    let mut rng = seeded_rng(8);
    let mut strict = 0;
    for i in 0..=100 {
        let mode = if i % 2 == 0 { Mode::SteadyState } else { Mode::General };
        let kernel = if i == 100 {
            parse_kernel(FAR_READ).unwrap()
        } else {
            synth::kernel(&mut rng, &SynthConfig { mode, ..SynthConfig::default() })
        };
        let rho = |lifetime| {
            let cfg = OracleConfig { iterations: 256, lifetime, ..OracleConfig::default() };
            run_concrete(&kernel, &cfg)
                .unwrap()
                .deps
                .into_iter()
                .map(|d| ((d.src, d.dst), d.rho))
                .collect::<std::collections::BTreeMap<_, _>>()
        };
        let (short, mid, all) = (rho(Some(512)), rho(Some(1024)), rho(None));
        let sub = |a: &std::collections::BTreeMap<_, u64>, b: &std::collections::BTreeMap<_, u64>| {
            a.iter().all(|(k, r)| b.get(k).is_some_and(|s| r <= s))
        };
        ensure(sub(&short, &mid) && sub(&mid, &all), || format!("kernel {i}: not nested\n{kernel}"))?;
        strict += usize::from(short != mid) + usize::from(mid != all);
    }
    ensure(strict > 0, || "no lifetime ever filtered anything".into())?;
    Ok(format!(
        "100 random kernels plus a long-distance read, nested 512 <= 1024 <= unfiltered ({strict} strict steps)"
    ))
}

fn performance_envelope() -> Outcome {
    let mut rng = seeded_rng(9);
    let cfg = SynthConfig { min_len: 50, max_len: 50, mode: Mode::SteadyState };
    let text = synth::kernel_text(&mut rng, &cfg);
    let dir = std::env::temp_dir().join(format!("staticdeps-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("k50.s");
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_staticdeps"))
        .args(["deps", path.to_str().unwrap(), "--rob-size", "224", "--seeds", "1,2,3"])
        .output()
        .map_err(|e| e.to_string())?;
    let t = within(start, Duration::from_secs(1))?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    Ok(format!("50 instructions, 3 seeds, {t:.2?} wall clock including process start"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("fibonacci exactness", fibonacci_exactness),
        ("alias reproduction", alias_reproduction),
        ("spurious filter boundary", spurious_boundary),
        ("unroll bound", unroll_bound),
        ("determinism and amplification", determinism_and_amplification),
        ("lifting and statistics", lifting_and_stats),
        ("lifetime monotonicity", lifetime_monotonicity),
        ("performance envelope", performance_envelope),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
