//! Kernel-level throughput error statistics.
//!
//! Block-level predictions are lifted to a benchmark-level estimate by
//! weighting each block with its occurrence count. Lifted estimates are then
//! compared with measured baselines and summarized per tool.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Strategy};

/// Blocks below this fraction of the most frequent block's count are irrelevant.
pub const RELEVANCE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("no values to summarize")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least two observations are required")]
    TooShort,
    #[error("kendall tau is undefined: one series is constant")]
    UndefinedTau,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("no baseline for benchmark `{0}`")]
    MissingBaseline(String),
}

impl From<csv::Error> for StatsError {
    fn from(e: csv::Error) -> Self {
        StatsError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Cycles(f64),
    Failed,
}

impl FromStr for Prediction {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "FAIL" {
            return Ok(Prediction::Failed);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(Prediction::Cycles(v)),
            _ => Err(StatsError::Csv(format!("invalid pred_cycles `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrediction {
    pub block: String,
    pub occurrences: u64,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub benchmark: String,
    pub baseline_cycles: f64,
    pub tools: BTreeMap<String, Vec<BlockPrediction>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifted {
    Cycles(f64),
    /// The tool failed on at least one block.
    Discarded,
}

/// `sum(occurrences(b) * pred(b))`, or `Discarded` if any block failed.
pub fn lift(blocks: &[BlockPrediction]) -> Lifted {
    let mut total = 0.0;
    for b in blocks {
        match b.prediction {
            Prediction::Cycles(c) => total += b.occurrences as f64 * c,
            Prediction::Failed => return Lifted::Discarded,
        }
    }
    Lifted::Cycles(total)
}

impl BenchmarkRecord {
    /// `None` when the tool has no predictions for this benchmark.
    pub fn lift(&self, tool: &str) -> Option<Lifted> {
        self.tools.get(tool).map(|b| lift(b))
    }
}

pub fn relative_error(pred: f64, baseline: f64) -> Result<f64, StatsError> {
    if !pred.is_finite() || !baseline.is_finite() {
        return Err(StatsError::NonFinite);
    }
    if baseline <= 0.0 {
        return Err(StatsError::NonPositiveBaseline(baseline));
    }
    Ok((pred - baseline).abs() / baseline)
}

/// Quantile of sorted data, interpolating linearly between closest ranks.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-tool error summary. Percentages are in `[0, 100]` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub datapoints: usize,
    pub failures: usize,
    pub failure_pct: f64,
    pub mape: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub kendall_tau: Option<f64>,
}

/// Summary of relative errors (fractions); `kendall_tau` is left unset.
pub fn summarize(errors: &[f64], failures: usize) -> Result<ErrorStats, StatsError> {
    if errors.is_empty() {
        return Err(StatsError::Empty);
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = errors.len();
    Ok(ErrorStats {
        datapoints: n,
        failures,
        failure_pct: 100.0 * failures as f64 / (n + failures) as f64,
        mape: 100.0 * errors.iter().sum::<f64>() / n as f64,
        median: 100.0 * quantile(&sorted, 0.5),
        q1: 100.0 * quantile(&sorted, 0.25),
        q3: 100.0 * quantile(&sorted, 0.75),
        kendall_tau: None,
    })
}

fn tie_pairs<T>(sorted: &[T], same: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if same(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts by `y` and returns the number of inversions.
fn merge_count(v: &mut [(f64, f64)], buf: &mut Vec<(f64, f64)>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].1.total_cmp(&v[i].1) == Ordering::Less {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Tie-corrected Kendall rank correlation (tau-b), `O(n log n)`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooShort);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = x.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let ties_x = tie_pairs(&pairs, |a, b| a.0 == b.0);
    let ties_xy = tie_pairs(&pairs, |a, b| a == b);
    let swaps = merge_count(&mut pairs, &mut Vec::with_capacity(x.len()));
    let ties_y = tie_pairs(&pairs, |a, b| a.1 == b.1);
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(StatsError::UndefinedTau);
    }
    let numer = n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok(numer / denom)
}

/// Keeps blocks with at least 10% of the maximum occurrence count.
pub fn relevance_filter<T: Clone>(blocks: &[(T, u64)]) -> Result<Vec<(T, u64)>, StatsError> {
    let max = blocks.iter().map(|b| b.1).max().ok_or(StatsError::Empty)?;
    // occ >= 0.10 * max, in integers
    Ok(blocks.iter().filter(|b| b.1 * 10 >= max).cloned().collect())
}

/// Predictions grouped by benchmark, then tool, in file order per group.
pub type PredictionTable = BTreeMap<String, BTreeMap<String, Vec<BlockPrediction>>>;

#[derive(Debug, Deserialize)]
struct PredictionRow {
    benchmark: String,
    block: String,
    occurrences: u64,
    tool: String,
    pred_cycles: String,
}

#[derive(Debug, Deserialize)]
struct BaselineRow {
    benchmark: String,
    baseline_cycles: f64,
}

/// Reads `benchmark,block,occurrences,tool,pred_cycles`.
pub fn read_predictions<R: Read>(input: R) -> Result<PredictionTable, StatsError> {
    let mut table = PredictionTable::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    for row in reader.deserialize() {
        let row: PredictionRow = row?;
        if row.occurrences == 0 {
            return Err(StatsError::Csv(format!("block `{}` of `{}` has zero occurrences", row.block, row.benchmark)));
        }
        let prediction = row.pred_cycles.parse()?;
        table.entry(row.benchmark).or_default().entry(row.tool).or_default().push(BlockPrediction {
            block: row.block,
            occurrences: row.occurrences,
            prediction,
        });
    }
    Ok(table)
}

/// Reads `benchmark,baseline_cycles`.
pub fn read_baselines<R: Read>(input: R) -> Result<BTreeMap<String, f64>, StatsError> {
    let mut out = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    for row in reader.deserialize() {
        let row: BaselineRow = row?;
        if !(row.baseline_cycles.is_finite() && row.baseline_cycles > 0.0) {
            return Err(StatsError::NonPositiveBaseline(row.baseline_cycles));
        }
        out.insert(row.benchmark, row.baseline_cycles);
    }
    Ok(out)
}

pub fn join(table: PredictionTable, baselines: &BTreeMap<String, f64>) -> Result<Vec<BenchmarkRecord>, StatsError> {
    table
        .into_iter()
        .map(|(benchmark, tools)| {
            let baseline_cycles =
                *baselines.get(&benchmark).ok_or_else(|| StatsError::MissingBaseline(benchmark.clone()))?;
            Ok(BenchmarkRecord { benchmark, baseline_cycles, tools })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedRow {
    pub benchmark: String,
    pub tool: String,
    pub lifted: Lifted,
}

pub fn lift_table(table: &PredictionTable) -> Vec<LiftedRow> {
    table
        .iter()
        .flat_map(|(benchmark, tools)| {
            tools.iter().map(move |(tool, blocks)| LiftedRow {
                benchmark: benchmark.clone(),
                tool: tool.clone(),
                lifted: lift(blocks),
            })
        })
        .collect()
}

pub fn write_lift_csv<W: Write>(rows: &[LiftedRow], out: W) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["benchmark", "tool", "lifted_cycles"])?;
    for r in rows {
        let value = match r.lifted {
            Lifted::Cycles(c) => format!("{c:?}"),
            Lifted::Discarded => "DISCARDED".to_string(),
        };
        w.write_record([r.benchmark.as_str(), r.tool.as_str(), value.as_str()])?;
    }
    w.flush().map_err(|e| StatsError::Csv(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolStats {
    pub tool: String,
    /// `None` when every benchmark was discarded.
    pub stats: Option<ErrorStats>,
    pub failures: usize,
}

/// Lifts every record, scores each tool against the baselines, and
/// summarizes. Lifting runs across benchmarks with `strategy`.
pub fn evaluate(records: &[BenchmarkRecord], strategy: Strategy) -> Result<Vec<ToolStats>, StatsError> {
    let lifted = exec::map(records, strategy, |r| {
        r.tools.iter().map(|(tool, blocks)| (tool.clone(), lift(blocks), r.baseline_cycles)).collect::<Vec<_>>()
    });
    let mut per_tool: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (tool, l, baseline) in lifted.into_iter().flatten() {
        let entry = per_tool.entry(tool).or_default();
        match l {
            Lifted::Cycles(c) => {
                entry.0.push(c);
                entry.1.push(baseline);
            }
            Lifted::Discarded => entry.2 += 1,
        }
    }
    per_tool
        .into_iter()
        .map(|(tool, (preds, baselines, failures))| {
            if preds.is_empty() {
                return Ok(ToolStats { tool, stats: None, failures });
            }
            let errors =
                preds.iter().zip(&baselines).map(|(&p, &b)| relative_error(p, b)).collect::<Result<Vec<_>, _>>()?;
            let mut stats = summarize(&errors, failures)?;
            stats.kendall_tau = kendall_tau(&preds, &baselines).ok();
            Ok(ToolStats { tool, stats: Some(stats), failures })
        })
        .collect()
}

fn fixed2(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.2}"),
        _ => "NA".into(),
    }
}

/// `tool,datapoints,failures,failure_pct,mape,median,q1,q3,kendall_tau`
pub fn write_stats_csv<W: Write>(rows: &[ToolStats], out: W) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tool", "datapoints", "failures", "failure_pct", "mape", "median", "q1", "q3", "kendall_tau"])?;
    for r in rows {
        let s = r.stats.as_ref();
        let failure_pct = s.map(|s| s.failure_pct).or(Some(100.0));
        w.write_record([
            r.tool.clone(),
            s.map_or(0, |s| s.datapoints).to_string(),
            r.failures.to_string(),
            fixed2(failure_pct),
            fixed2(s.map(|s| s.mape)),
            fixed2(s.map(|s| s.median)),
            fixed2(s.map(|s| s.q1)),
            fixed2(s.map(|s| s.q3)),
            fixed2(s.and_then(|s| s.kendall_tau)),
        ])?;
    }
    w.flush().map_err(|e| StatsError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(pred: Option<f64>, occ: u64) -> BlockPrediction {
        BlockPrediction {
            block: "b".into(),
            occurrences: occ,
            prediction: pred.map_or(Prediction::Failed, Prediction::Cycles),
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    /// O(n^2) tau-b straight from the definition.
    fn tau_brute(x: &[f64], y: &[f64]) -> Option<f64> {
        let (mut s, mut tx, mut ty, mut n0) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                n0 += 1;
                let dx = (x[i] - x[j]).signum() as i64 * (x[i] != x[j]) as i64;
                let dy = (y[i] - y[j]).signum() as i64 * (y[i] != y[j]) as i64;
                s += dx * dy;
                tx += (dx == 0) as i64;
                ty += (dy == 0) as i64;
            }
        }
        let d = (((n0 - tx) * (n0 - ty)) as f64).sqrt();
        (d > 0.0).then(|| s as f64 / d)
    }

    #[test]
    fn lift_examples() {
        assert_eq!(lift(&[block(Some(10.0), 1)]), Lifted::Cycles(10.0));
        assert_eq!(lift(&[block(Some(2.0), 100), block(Some(5.0), 10)]), Lifted::Cycles(250.0));
        assert_eq!(lift(&[block(Some(2.0), 100), block(None, 10)]), Lifted::Discarded);
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(10.0, 10.0), Ok(0.0));
        assert!(close(relative_error(11.0, 10.0).unwrap(), 0.1));
        assert_eq!(relative_error(5.0, 10.0), Ok(0.5));
        assert_eq!(relative_error(5.0, 0.0), Err(StatsError::NonPositiveBaseline(0.0)));
        assert_eq!(relative_error(5.0, -1.0), Err(StatsError::NonPositiveBaseline(-1.0)));
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.1, 0.2, 0.3], 0).unwrap();
        assert!(close(s.mape, 20.0) && close(s.median, 20.0));
        let s = summarize(&[0.1], 2).unwrap();
        assert!(close(s.q1, 10.0) && close(s.median, 10.0) && close(s.q3, 10.0));
        assert!(close(s.failure_pct, 200.0 / 3.0));
        let s = summarize(&[0.3, 0.0, 0.2, 0.1], 0).unwrap();
        assert!(close(s.q1, 7.5) && close(s.median, 15.0) && close(s.q3, 22.5));
        assert_eq!(summarize(&[], 0), Err(StatsError::Empty));
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Ok(1.0));
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]), Ok(-1.0));
        let (x, y) = ([1.0, 2.0, 2.0, 3.0], [1.0, 3.0, 2.0, 4.0]);
        // concordant 5, discordant 0, one x tie: 5 / sqrt(5 * 6)
        let expected = 5.0 / 30f64.sqrt();
        assert_eq!(tau_brute(&x, &y), Some(expected));
        assert!(close(kendall_tau(&x, &y).unwrap(), expected));
        assert_eq!(kendall_tau(&[1.0], &[1.0]), Err(StatsError::TooShort));
        assert_eq!(kendall_tau(&[1.0, 2.0], &[1.0]), Err(StatsError::LengthMismatch(2, 1)));
        assert_eq!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::UndefinedTau));
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(relevance_filter(&[("A", 100), ("B", 9)]).unwrap(), vec![("A", 100)]);
        assert_eq!(relevance_filter(&[("A", 100), ("B", 10)]).unwrap(), vec![("A", 100), ("B", 10)]);
        assert_eq!(relevance_filter(&[("A", 5)]).unwrap(), vec![("A", 5)]);
        assert_eq!(relevance_filter::<&str>(&[]), Err(StatsError::Empty));
    }

    #[test]
    fn csv_pipeline() {
        let preds = "benchmark,block,occurrences,tool,pred_cycles\n\
                     bench1,b0,100,toolA,2.0\n\
                     bench1,b1,10,toolA,5.0\n\
                     bench2,b0,1,toolA,FAIL\n\
                     bench2,b0,1,toolB,3\n";
        let table = read_predictions(preds.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_lift_csv(&lift_table(&table), &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "benchmark,tool,lifted_cycles\nbench1,toolA,250.0\nbench2,toolA,DISCARDED\nbench2,toolB,3.0\n"
        );
        let baselines = read_baselines("benchmark,baseline_cycles\nbench1,250\nbench2,2.5\n".as_bytes()).unwrap();
        let records = join(table.clone(), &baselines).unwrap();
        let stats = evaluate(&records, exec::Strategy::Sequential).unwrap();
        let mut out = Vec::new();
        write_stats_csv(&stats, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "tool,datapoints,failures,failure_pct,mape,median,q1,q3,kendall_tau\n\
             toolA,1,1,50.00,0.00,0.00,0.00,0.00,NA\n\
             toolB,1,0,0.00,20.00,20.00,20.00,20.00,NA\n"
        );
        let missing = join(table, &BTreeMap::new());
        assert!(matches!(missing, Err(StatsError::MissingBaseline(b)) if b == "bench1"));
    }

    #[test]
    fn csv_errors() {
        for bad in [
            "benchmark,block,occurrences,tool,pred_cycles\nb,x,abc,t,1.0\n",
            "benchmark,block,occurrences,tool,pred_cycles\nb,x,1,t,fail\n",
            "benchmark,block,occurrences,tool,pred_cycles\nb,x,1,t,-2\n",
            "benchmark,block,occurrences,tool,pred_cycles\nb,x,0,t,2\n",
            "benchmark,block,occurrences,tool,pred_cycles\nb,x,1\n",
        ] {
            assert!(matches!(read_predictions(bad.as_bytes()), Err(StatsError::Csv(_))), "{bad}");
        }
        assert!(read_baselines("benchmark,baseline_cycles\nb,0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn tau_matches_brute_force(v in prop::collection::vec((0u8..6, 0u8..6), 2..40)) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            match tau_brute(&x, &y) {
                Some(t) => prop_assert!(close(kendall_tau(&x, &y).unwrap(), t)),
                None => prop_assert_eq!(kendall_tau(&x, &y), Err(StatsError::UndefinedTau)),
            }
        }

        #[test]
        fn tau_is_rank_invariant(v in prop::collection::vec((-50i32..50, -50i32..50), 2..30)) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            let xt: Vec<f64> = x.iter().map(|a| (a / 10.0).exp()).collect();
            let yt: Vec<f64> = y.iter().map(|a| a * 3.0 + 7.0).collect();
            prop_assert_eq!(kendall_tau(&x, &y).ok().map(|t| (t * 1e9).round()), kendall_tau(&xt, &yt).ok().map(|t| (t * 1e9).round()));
        }

        #[test]
        fn lift_is_linear(blocks in prop::collection::vec((0u32..1000, 1u64..1000), 1..20), c in 0u32..64) {
            // Dyadic predictions keep every sum exact.
            let scaled = |k: f64| blocks.iter().map(|&(p, o)| block(Some(p as f64 / 4.0 * k), o)).collect::<Vec<_>>();
            let (Lifted::Cycles(base), Lifted::Cycles(times)) = (lift(&scaled(1.0)), lift(&scaled(c as f64))) else { unreachable!() };
            prop_assert_eq!(times, base * c as f64);
        }

        #[test]
        fn quartiles_bracket_median(errors in prop::collection::vec(0.0f64..5.0, 1..50)) {
            let s = summarize(&errors, 0).unwrap();
            prop_assert!(s.q1 <= s.median && s.median <= s.q3);
        }

        #[test]
        fn relative_error_non_negative(pred in 0.0f64..1e6, base in 1e-3f64..1e6) {
            prop_assert!(relative_error(pred, base).unwrap() >= 0.0);
            prop_assert_eq!(relative_error(base, base), Ok(0.0));
        }
    }
}
