//! Self-check suites run by the command-line `check` subcommand. Each reports
//! the worst error seen against its tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{predict, DeMansia, DeMansiaConfig};
use crate::module::Module;
use crate::numerics::{rel_err, Tape, Tensor, FD_EPS};
use crate::ssm::{
    causal_convolve, selective_scan_parallel, selective_scan_sequential, ssm_conv_kernel, ssm_recurrence,
    ContinuousSsm, DiscreteSsm, ScanStrategy, SelectionParams,
};
use crate::token_labeling::record_total_loss;
use crate::training::{synth_examples, Example};

pub const SUITES: [&str; 4] = ["grad", "scan", "kernel", "fusion"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub suite: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

pub fn run_suite(name: &str) -> Result<CheckReport> {
    match name {
        "grad" => check_grad(&DeMansiaConfig::micro(), 0.5, 20, 0),
        "scan" => check_scan(100),
        "kernel" => check_kernel(20),
        "fusion" => check_fusion(200),
        other => Err(Error::Config(format!("unknown check '{other}' (expected one of {})", SUITES.join(", ")))),
    }
}

fn sample_loss(model: &DeMansia, ex: &Example, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = model.record(&mut tape, &ex.image)?;
    let terms = record_total_loss(&mut tape, l.class, ex.label, l.patch, &ex.targets, beta)?;
    Ok(tape.value(terms.total).item())
}

/// Tape gradients of the full objective against central differences at
/// `per_tensor` evenly spaced coordinates of every parameter tensor.
pub fn check_grad(config: &DeMansiaConfig, beta: f64, per_tensor: usize, seed: u64) -> Result<CheckReport> {
    let mut model = DeMansia::new(config.clone(), seed)?;
    // index 1 holds a shape, so both loss terms carry signal
    let ex = synth_examples(seed, 1, 1, config)?.remove(0);
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let l = model.record(&mut tape, &ex.image)?;
        let terms = record_total_loss(&mut tape, l.class, ex.label, l.patch, &ex.targets, beta)?;
        let g = tape.backward(terms.total)?;
        model
            .named_params()
            .iter()
            .map(|(_, t)| g.wrt(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };
    let (mut worst, mut cases) = (0.0f64, 0);
    for (i, grad) in analytic.iter().enumerate() {
        let numel = grad.len();
        let count = numel.min(per_tensor);
        for s in 0..count {
            let j = s * numel / count;
            let orig = model.named_params()[i].1.data()[j];
            let mut probe = |v: f64| -> Result<f64> {
                model.named_params_mut()[i].1.data_mut()[j] = v;
                sample_loss(&model, &ex, beta)
            };
            let up = probe(orig + FD_EPS)?;
            let down = probe(orig - FD_EPS)?;
            model.named_params_mut()[i].1.data_mut()[j] = orig;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * FD_EPS)));
            cases += 1;
        }
    }
    Ok(CheckReport { suite: "grad", cases, worst, tolerance: 1e-4 })
}

fn random_selection(rng: &mut ChaCha8Rng, ch: usize, n: usize) -> (Tensor, SelectionParams) {
    let a = Tensor::new(&[ch, n], (0..ch * n).map(|_| -rng.random_range(0.1..4.0)).collect()).expect("shape");
    (a, SelectionParams::init(ch, n, rng))
}

/// Parallel prefix scan against the sequential scan, lengths `1..=65`.
pub fn check_scan(seeds: u64) -> Result<CheckReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let (a, s) = random_selection(&mut rng, ch, n);
        let workers = 1 + (seed % 3) as usize;
        for m in 1..=65 {
            let x = Tensor::uniform(&[m, ch], 1.0, &mut rng);
            let seq = selective_scan_sequential(&x, &a, &s)?;
            let par = selective_scan_parallel(&x, &a, &s, ScanStrategy { workers })?;
            for (p, q) in seq.data().iter().zip(par.data()) {
                worst = worst.max(rel_err(*p, *q));
            }
            cases += 1;
        }
    }
    Ok(CheckReport { suite: "scan", cases, worst, tolerance: 1e-10 })
}

/// Convolution form against the recurrence for time-invariant systems.
pub fn check_kernel(seeds: u64) -> Result<CheckReport> {
    let (mut worst, mut cases) = (0.0f64, 0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Tensor::new(&[ch, n], (0..ch * n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
        };
        let a = draw(&mut rng, -4.0, -0.05);
        let b = draw(&mut rng, -1.0, 1.0);
        let c = draw(&mut rng, -1.0, 1.0);
        let delta: Vec<f64> = (0..ch).map(|_| rng.random_range(0.01..0.5)).collect();
        let ssm = ContinuousSsm::new(a, b, c.clone())?;
        for m in [1, 2, 3, 7, 16, 31, 64] {
            let d = DiscreteSsm::time_invariant(&ssm, &delta, m)?;
            let x = Tensor::uniform(&[m, ch], 1.0, &mut rng);
            let rec = ssm_recurrence(&d, &c, &x, None)?;
            let conv = causal_convolve(&x, &ssm_conv_kernel(&d, &c, m)?)?;
            for (p, q) in rec.data().iter().zip(conv.data()) {
                worst = worst.max(rel_err(*p, *q));
            }
            cases += 1;
        }
    }
    Ok(CheckReport { suite: "kernel", cases, worst, tolerance: 1e-10 })
}

/// Fused prediction against a brute-force per-class maximum.
pub fn check_fusion(cases: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.random_range(2..12);
        let j = rng.random_range(1..40);
        let class = Tensor::uniform(&[c], 5.0, &mut rng);
        let patch = Tensor::uniform(&[j, c], 5.0, &mut rng);
        let got = predict(&class, &patch)?;
        for k in 0..c {
            let mut column: Vec<f64> = (0..j).map(|r| patch.at(r, k)).collect();
            column.sort_by(f64::total_cmp);
            let expect = class.data()[k] + 0.5 * column[j - 1];
            worst = worst.max((got.data()[k] - expect).abs());
        }
    }
    Ok(CheckReport { suite: "fusion", cases, worst, tolerance: 0.0 })
}
