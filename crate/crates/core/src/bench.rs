//! Length-scaling benchmarks: analytic FLOP counts and wall time per sequence
//! length, with least-squares slopes in log-log space.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_flop_count, multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::numerics::Tensor;
use crate::ssm::{s4d_real_a, scan_flop_count, selective_scan_sequential, SelectionParams};

/// Width of the benchmarked layers: attention uses one head of width
/// `BENCH_WIDTH`, the scan `BENCH_WIDTH` channels with `BENCH_STATE` states.
pub const BENCH_WIDTH: usize = 4;
pub const BENCH_STATE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Attention,
    Scan,
}

impl BenchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "scan" => Ok(Self::Scan),
            other => Err(Error::Config(format!("unknown benchmark '{other}' (expected attention or scan)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Scan => "scan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRecord {
    pub length: usize,
    pub flops: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub records: Vec<BenchRecord>,
    pub flop_slope: f64,
    pub time_slope: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// At least five distinct positive lengths spanning a factor of eight.
pub fn check_lengths(lengths: &[usize]) -> Result<()> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 5 || sorted[0] == 0 {
        return Err(Error::Config(format!("need at least 5 distinct positive lengths, got {lengths:?}")));
    }
    if sorted[sorted.len() - 1] < 8 * sorted[0] {
        return Err(Error::Config(format!("lengths must span at least 8x, got {lengths:?}")));
    }
    Ok(())
}

/// Lengths `start, 2·start, …` up to and including `end`.
pub fn doubling(start: usize, end: usize) -> Vec<usize> {
    std::iter::successors(Some(start.max(1)), |n| Some(n * 2)).take_while(|n| *n <= end).collect()
}

fn time_it(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    // repeat short runs so the clock resolution does not dominate
    let mut reps = 0u32;
    let start = Instant::now();
    while reps == 0 || (start.elapsed().as_secs_f64() < 0.02 && reps < 64) {
        f()?;
        reps += 1;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// Runs one benchmark; FLOP counts are exact, times are informational.
pub fn run_bench(kind: BenchKind, lengths: &[usize], timing: bool) -> Result<BenchReport> {
    check_lengths(lengths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = BENCH_WIDTH;
    let mut records = Vec::with_capacity(lengths.len());
    match kind {
        BenchKind::Attention => {
            let p = AttentionParams::init(w, w, w, 1, &mut rng)?;
            for &n in lengths {
                let x = Tensor::uniform(&[n, w], 1.0, &mut rng);
                let seconds = if timing { time_it(|| multi_head_attention(&x, &p).map(|_| ()))? } else { 0.0 };
                records.push(BenchRecord { length: n, flops: attention_flop_count(n, &p), seconds });
            }
        }
        BenchKind::Scan => {
            let s = SelectionParams::init(w, BENCH_STATE, &mut rng);
            let a = s4d_real_a(w, BENCH_STATE);
            for &m in lengths {
                let x = Tensor::uniform(&[m, w], 1.0, &mut rng);
                let seconds = if timing { time_it(|| selective_scan_sequential(&x, &a, &s).map(|_| ()))? } else { 0.0 };
                records.push(BenchRecord { length: m, flops: scan_flop_count(m, w, BENCH_STATE), seconds });
            }
        }
    }
    let xs: Vec<f64> = records.iter().map(|r| r.length as f64).collect();
    let flops: Vec<f64> = records.iter().map(|r| r.flops as f64).collect();
    let times: Vec<f64> = records.iter().map(|r| r.seconds).collect();
    let time_slope = if timing { loglog_slope(&xs, &times) } else { f64::NAN };
    Ok(BenchReport { kind, flop_slope: loglog_slope(&xs, &flops), time_slope, records })
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("length,flops,seconds\n");
        for r in &self.records {
            writeln!(s, "{},{},{}", r.length, r.flops, g6(r.seconds)).expect("string write");
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} benchmark\n{:>8} {:>16} {:>12}\n", self.kind.name(), "length", "flops", "seconds");
        for r in &self.records {
            writeln!(s, "{:>8} {:>16} {:>12}", r.length, r.flops, g6(r.seconds)).expect("string write");
        }
        writeln!(s, "flop slope {}", g6(self.flop_slope)).expect("string write");
        writeln!(s, "time slope {}", g6(self.time_slope)).expect("string write");
        s
    }
}
