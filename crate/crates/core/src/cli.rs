//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 parse or usage error (including
//! malformed CSV), 3 empty kernel, 4 coverage undefined because the oracle
//! saw no dependency, 5 missing baseline.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::asmmodel::{parse_kernel_at, Kernel};
use crate::depcore::{analyze_amplified, DepConfig, DepError, DepReport, DEFAULT_ROB_SIZE, DEFAULT_SPURIOUS_THRESHOLD};
use crate::exec::Strategy;
use crate::liftstats::{self, StatsError};
use crate::oracle::{
    self, coverage, run_concrete, CoverageReport, DynamicTrace, OracleConfig, OracleError, RegInit, DEFAULT_ITERATIONS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EMPTY_KERNEL: i32 = 3;
pub const EXIT_NO_DYNAMIC_DEPS: i32 = 4;
pub const EXIT_MISSING_BASELINE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "staticdeps", version, about = "Memory-carried dependency detection for x86-64 basic blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Static dependencies of a kernel, amplified over seeds.
    Deps { kernel: PathBuf },
    /// Dependencies observed by concrete execution.
    Oracle { kernel: PathBuf },
    /// Coverage of the oracle's dependencies by the static analysis.
    Cov { kernel: PathBuf },
    /// Lift block predictions to benchmark level.
    Lift { predictions: PathBuf },
    /// Per-tool error statistics against measured baselines.
    Stats { predictions: PathBuf, baselines: PathBuf },
}

#[derive(Debug, Args)]
struct Options {
    #[arg(long, global = true, default_value_t = DEFAULT_ROB_SIZE)]
    rob_size: usize,
    #[arg(long, global = true, env = "STATICDEPS_SEEDS", value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, global = true, default_value_t = DEFAULT_SPURIOUS_THRESHOLD)]
    spurious_threshold: f64,
    #[arg(long, global = true, default_value_t = DEFAULT_ITERATIONS)]
    iterations: u64,
    /// `uniform:HEX` or `distinct:SEED`.
    #[arg(long, global = true, default_value = "distinct:42")]
    reg_init: RegInit,
    #[arg(long, global = true, value_parser = hex_arg, default_value = "0x2324000")]
    mem_fill: u64,
    #[arg(long, global = true)]
    lifetime: Option<u64>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(long, global = true, value_parser = hex_arg, default_value = "0x400000")]
    base_address: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
}

fn hex_arg(s: &str) -> Result<u64, String> {
    oracle::parse_hex(s).ok_or_else(|| format!("invalid hex value `{s}`"))
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<DepError> for Failure {
    fn from(e: DepError) -> Self {
        let code = match e {
            DepError::EmptyKernel => EXIT_EMPTY_KERNEL,
            DepError::InvalidConfig(_) => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        let code = match e {
            OracleError::EmptyKernel => EXIT_EMPTY_KERNEL,
            OracleError::UndefinedCoverage => EXIT_NO_DYNAMIC_DEPS,
            OracleError::InvalidConfig(_) | OracleError::TimestampOverflow { .. } => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<StatsError> for Failure {
    fn from(e: StatsError) -> Self {
        let code = match e {
            StatsError::MissingBaseline(_) => EXIT_MISSING_BASELINE,
            _ => EXIT_USAGE,
        };
        Failure::new(code, e.to_string())
    }
}

impl Options {
    fn dep_config(&self) -> DepConfig {
        DepConfig {
            rob_size: self.rob_size,
            spurious_threshold: self.spurious_threshold,
            seeds: self.seeds.clone(),
            base_address: self.base_address,
        }
    }

    fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            iterations: self.iterations,
            reg_init: self.reg_init,
            mem_fill: self.mem_fill,
            lifetime: self.lifetime,
        }
    }

    fn format(&self, default: Format, allowed: &[Format]) -> Result<Format, Failure> {
        let f = self.format.unwrap_or(default);
        if allowed.contains(&f) {
            Ok(f)
        } else {
            Err(Failure::new(EXIT_USAGE, format!("format {f:?} is not available for this command").to_lowercase()))
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<fs::File, Failure> {
    fs::File::open(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load_kernel(path: &Path, opts: &Options) -> Result<Kernel, Failure> {
    let text = read(path)?;
    let kernel = parse_kernel_at(&text, opts.base_address)
        .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    if kernel.is_empty() {
        return Err(Failure::new(EXIT_EMPTY_KERNEL, format!("{}: kernel contains no instructions", path.display())));
    }
    Ok(kernel)
}

fn deps_text(r: &DepReport) -> String {
    let mut s = format!("kernel {} rob {} copies {} seeds {:?}\n", r.kernel_sha256, r.rob_size, r.copies, r.seeds);
    for d in &r.deps {
        let _ = writeln!(s, "{} -> {} dk={} hits={}/{}", d.src, d.dst, d.delta_k, d.hits, d.eligible);
    }
    s
}

fn oracle_text(t: &DynamicTrace) -> String {
    let mut s = format!("iterations {} reg-init {} suspicious {}\n", t.iterations, t.reg_init, t.suspicious_addresses);
    for d in &t.deps {
        let _ = writeln!(s, "{} -> {} rho={}", d.src, d.dst, d.rho);
    }
    s
}

fn cov_text(c: &CoverageReport) -> String {
    format!("cov_u {:.1}%\ncov_w {:.1}%\n", 100.0 * c.cov_u, 100.0 * c.cov_w)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), StatsError>) -> Result<String, Failure> {
    let mut out = Vec::new();
    f(&mut out)?;
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

fn execute(cli: &Cli) -> Result<String, Failure> {
    let opts = &cli.opts;
    match &cli.command {
        Command::Deps { kernel } => {
            let format = opts.format(Format::Json, &[Format::Json, Format::Text])?;
            let report = analyze_amplified(&load_kernel(kernel, opts)?, &opts.dep_config())?;
            Ok(if format == Format::Json { json(&report) } else { deps_text(&report) })
        }
        Command::Oracle { kernel } => {
            let format = opts.format(Format::Json, &[Format::Json, Format::Text])?;
            let trace = run_concrete(&load_kernel(kernel, opts)?, &opts.oracle_config())?;
            Ok(if format == Format::Json { json(&trace) } else { oracle_text(&trace) })
        }
        Command::Cov { kernel } => {
            let format = opts.format(Format::Text, &[Format::Json, Format::Text])?;
            let kernel = load_kernel(kernel, opts)?;
            let report = analyze_amplified(&kernel, &opts.dep_config())?;
            let trace = run_concrete(&kernel, &opts.oracle_config())?;
            let cov = coverage(&report, &trace.deps)?;
            Ok(if format == Format::Json { json(&cov) } else { cov_text(&cov) })
        }
        Command::Lift { predictions } => {
            opts.format(Format::Csv, &[Format::Csv])?;
            let table = liftstats::read_predictions(open(predictions)?)?;
            csv_bytes(|out| liftstats::write_lift_csv(&liftstats::lift_table(&table), out))
        }
        Command::Stats { predictions, baselines } => {
            let format = opts.format(Format::Csv, &[Format::Csv, Format::Json])?;
            let table = liftstats::read_predictions(open(predictions)?)?;
            let baselines = liftstats::read_baselines(open(baselines)?)?;
            let records = liftstats::join(table, &baselines)?;
            let stats = liftstats::evaluate(&records, Strategy::default())?;
            if format == Format::Json {
                Ok(json(&stats))
            } else {
                csv_bytes(|out| liftstats::write_stats_csv(&stats, out))
            }
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(stderr, "staticdeps: {}", line.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(out) => match stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                let _ = writeln!(stderr, "staticdeps: writing output: {e}");
                EXIT_IO
            }
        },
        Err(f) => {
            let _ = writeln!(stderr, "staticdeps: {}", f.message);
            f.code
        }
    }
}
