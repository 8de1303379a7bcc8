//! Diagonal state space layers: zero-order-hold discretization, the linear
//! recurrence and its convolution form, input-dependent selection, and the
//! selective scan evaluated either sequentially or as a parallel prefix scan.

pub mod kernel;
mod scan;

pub use scan::{combine, inclusive_scan, selective_scan_parallel, ScanElement, ScanStrategy};

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::module::{leaf_params, Module};
use crate::numerics::{self, kernels, Tape, Tensor, Var};

/// Continuous diagonal SSM `h' = A h + B x`, `y = C h`, one row per channel.
#[derive(Clone, Debug)]
pub struct ContinuousSsm {
    /// `channels × n`, strictly negative.
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl ContinuousSsm {
    pub fn new(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        if a.shape() != b.shape() || a.shape() != c.shape() {
            return Err(dim_err("ContinuousSsm", a.shape(), b.shape()));
        }
        a.dims2()?;
        if let Some(v) = a.data().iter().find(|v| **v >= 0.0) {
            return Err(Error::Domain(format!("state matrix entries must be negative, found {v}")));
        }
        Ok(Self { a, b, c })
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn n_state(&self) -> usize {
        self.a.shape()[1]
    }
}

/// `A[c, i] = -(i + 1)` for every channel.
pub fn s4d_real_a(channels: usize, n: usize) -> Tensor {
    let data = (0..channels * n).map(|j| -((j % n) as f64 + 1.0)).collect();
    Tensor::new(&[channels, n], data).expect("shape")
}

/// Zero-order-hold discretization of one diagonal SSM row.
///
/// `Ā = exp(ΔA)` and `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`, falling back to
/// `B̄ = ΔB` when `|ΔA| < 1e-8`.
pub fn discretize_zoh(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(dim_err("discretize_zoh", &[a.len()], &[b.len()]));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (ai, bi) in a.iter().zip(b) {
        let (ab, phi) = kernel::zoh_factors(delta, *ai);
        a_bar.push(ab);
        b_bar.push(phi * bi);
    }
    Ok((a_bar, b_bar))
}

/// Discretized SSM for a sequence of `steps`; each step holds `channels × n` gains.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    steps: usize,
    channels: usize,
    n: usize,
    a_bar: Vec<f64>,
    b_bar: Vec<f64>,
    delta: Vec<f64>,
}

impl DiscreteSsm {
    /// Discretizes `ssm` with per-step, per-channel step sizes `delta: steps × channels`.
    pub fn from_continuous(ssm: &ContinuousSsm, delta: &Tensor) -> Result<Self> {
        let (steps, channels) = delta.dims2()?;
        if channels != ssm.channels() {
            return Err(dim_err("DiscreteSsm", ssm.a.shape(), delta.shape()));
        }
        let n = ssm.n_state();
        let mut a_bar = Vec::with_capacity(steps * channels * n);
        let mut b_bar = Vec::with_capacity(steps * channels * n);
        for t in 0..steps {
            for k in 0..channels {
                let (ab, bb) = discretize_zoh(ssm.a.row(k), ssm.b.row(k), delta.at(t, k))?;
                a_bar.extend(ab);
                b_bar.extend(bb);
            }
        }
        Ok(Self { steps, channels, n, a_bar, b_bar, delta: delta.data().to_vec() })
    }

    /// Same step size `delta[k]` for every step.
    pub fn time_invariant(ssm: &ContinuousSsm, delta: &[f64], steps: usize) -> Result<Self> {
        let rows: Vec<f64> = (0..steps).flat_map(|_| delta.iter().copied()).collect();
        Self::from_continuous(ssm, &Tensor::new(&[steps, delta.len()], rows)?)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_state(&self) -> usize {
        self.n
    }

    pub fn a_bar(&self, t: usize, k: usize) -> &[f64] {
        let o = (t * self.channels + k) * self.n;
        &self.a_bar[o..o + self.n]
    }

    pub fn b_bar(&self, t: usize, k: usize) -> &[f64] {
        let o = (t * self.channels + k) * self.n;
        &self.b_bar[o..o + self.n]
    }

    pub fn delta(&self, t: usize, k: usize) -> f64 {
        self.delta[t * self.channels + k]
    }

    pub fn is_time_invariant(&self) -> bool {
        let first = &self.delta[..self.channels];
        self.delta.chunks(self.channels).all(|row| row == first)
    }
}

/// Sequential evaluation of `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C·h_t`.
///
/// `c: channels × n`, `x: steps × channels`, `h0: channels × n` (zero if absent).
pub fn ssm_recurrence(d: &DiscreteSsm, c: &Tensor, x: &Tensor, h0: Option<&Tensor>) -> Result<Tensor> {
    let (steps, channels) = x.dims2()?;
    if steps != d.steps || channels != d.channels {
        return Err(dim_err("ssm_recurrence", &[d.steps, d.channels], x.shape()));
    }
    if c.shape() != [d.channels, d.n] {
        return Err(dim_err("ssm_recurrence C", &[d.channels, d.n], c.shape()));
    }
    let mut h = match h0 {
        Some(h0) if h0.shape() != [d.channels, d.n] => {
            return Err(dim_err("ssm_recurrence h0", &[d.channels, d.n], h0.shape()))
        }
        Some(h0) => h0.data().to_vec(),
        None => vec![0.0; d.channels * d.n],
    };
    let mut y = Tensor::zeros(&[steps, channels]);
    for t in 0..steps {
        for k in 0..channels {
            let (ab, bb) = (d.a_bar(t, k), d.b_bar(t, k));
            let hk = &mut h[k * d.n..(k + 1) * d.n];
            let xv = x.at(t, k);
            for i in 0..d.n {
                hk[i] = ab[i] * hk[i] + bb[i] * xv;
            }
            y.data_mut()[t * channels + k] = kernels::dot(c.row(k), hk);
        }
    }
    Ok(y)
}

/// Convolution kernel `K̄[j] = C·Ā^j·B̄` per channel, returned as `len × channels`.
pub fn ssm_conv_kernel(d: &DiscreteSsm, c: &Tensor, len: usize) -> Result<Tensor> {
    if !d.is_time_invariant() {
        return Err(Error::Contract(
            "convolution kernel needs time-invariant parameters; selective SSMs must be scanned".into(),
        ));
    }
    if c.shape() != [d.channels, d.n] {
        return Err(dim_err("ssm_conv_kernel C", &[d.channels, d.n], c.shape()));
    }
    let mut out = Tensor::zeros(&[len, d.channels]);
    for k in 0..d.channels {
        let (ab, bb) = (d.a_bar(0, k), d.b_bar(0, k));
        let mut pow = bb.to_vec();
        for j in 0..len {
            out.data_mut()[j * d.channels + k] = kernels::dot(c.row(k), &pow);
            for i in 0..d.n {
                pow[i] *= ab[i];
            }
        }
    }
    Ok(out)
}

/// Per-channel causal convolution `y[t] = Σ_{j≤t} K[j]·x[t-j]`.
pub fn causal_convolve(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (steps, channels) = x.dims2()?;
    let (klen, kch) = kernel.dims2()?;
    if kch != channels || klen < steps {
        return Err(dim_err("causal_convolve", x.shape(), kernel.shape()));
    }
    let mut y = Tensor::zeros(&[steps, channels]);
    for t in 0..steps {
        for k in 0..channels {
            y.data_mut()[t * channels + k] = (0..=t).map(|j| kernel.at(j, k) * x.at(t - j, k)).sum();
        }
    }
    Ok(y)
}

/// Input-dependent projections for `B_t`, `C_t` and `Δ_t`.
#[derive(Clone, Debug)]
pub struct SelectionParams {
    /// `n × channels`
    pub w_b: Tensor,
    /// `n × channels`
    pub w_c: Tensor,
    /// `1 × channels`: the rank-one projection broadcast across channels.
    pub w_delta: Tensor,
    /// Per-channel offset inside the softplus.
    pub delta_bias: Tensor,
}

impl SelectionParams {
    /// Random projections; `softplus(delta_bias)` is log-uniform in `[0.001, 0.1]`.
    pub fn init<R: Rng + ?Sized>(channels: usize, n: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let bias = (0..channels)
            .map(|_| {
                let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
                kernels::softplus_inv(dt)
            })
            .collect();
        Self {
            w_b: Tensor::uniform(&[n, channels], bound, rng).with_grad(),
            w_c: Tensor::uniform(&[n, channels], bound, rng).with_grad(),
            w_delta: Tensor::uniform(&[1, channels], bound, rng).with_grad(),
            delta_bias: Tensor::new(&[channels], bias).expect("shape").with_grad(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_b.shape()[1]
    }

    pub fn n_state(&self) -> usize {
        self.w_b.shape()[0]
    }

    /// Records `(B, C, Δ)` for the sequence `x` on a tape.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        let channels = self.channels();
        let w_b = tape.param(&self.w_b);
        let w_c = tape.param(&self.w_c);
        let w_d = tape.param(&self.w_delta);
        let bias = tape.param(&self.delta_bias);
        let b = tape.linear(x, w_b, None)?;
        let c = tape.linear(x, w_c, None)?;
        let d1 = tape.linear(x, w_d, None)?;
        let d = tape.broadcast_cols(d1, channels)?;
        let d = tape.add_row(d, bias)?;
        let delta = tape.softplus(d);
        Ok((b, c, delta))
    }
}

impl Module for SelectionParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        leaf_params!(ref self: w_b, w_c, w_delta, delta_bias)
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        leaf_params!(mut self: w_b, w_c, w_delta, delta_bias)
    }
}

/// Records the selective SSM `x ↦ y` on a tape; `a: channels × n` must be negative.
pub fn record_selective_ssm(tape: &mut Tape, x: Var, a: Var, s: &SelectionParams) -> Result<Var> {
    let (b, c, delta) = s.record(tape, x)?;
    tape.selective_scan(x, delta, a, b, c)
}

/// Per-step selection outputs.
#[derive(Clone, Debug)]
pub struct Selection {
    /// `steps × n`
    pub b: Tensor,
    /// `steps × n`
    pub c: Tensor,
    /// `steps × channels`, strictly positive.
    pub delta: Tensor,
}

pub fn select_params(x: &Tensor, s: &SelectionParams) -> Result<Selection> {
    let (steps, channels) = x.dims2()?;
    if channels != s.channels() {
        return Err(dim_err("select_params", x.shape(), s.w_b.shape()));
    }
    let b = numerics::linear(x, &s.w_b, None)?;
    let c = numerics::linear(x, &s.w_c, None)?;
    let proj = numerics::linear(x, &s.w_delta, None)?;
    let mut delta = Tensor::zeros(&[steps, channels]);
    for t in 0..steps {
        for k in 0..channels {
            delta.data_mut()[t * channels + k] = kernels::softplus(s.delta_bias.data()[k] + proj.data()[t]);
        }
    }
    Ok(Selection { b, c, delta })
}

fn check_scan_inputs(x: &Tensor, a: &Tensor, s: &SelectionParams) -> Result<(usize, usize, usize)> {
    let (steps, channels) = x.dims2()?;
    let n = s.n_state();
    if a.shape() != [channels, n] {
        return Err(dim_err("selective scan A", &[channels, n], a.shape()));
    }
    Ok((steps, channels, n))
}

/// Selective scan evaluated left to right, one discretization per step.
///
/// `x: steps × channels`, `a: channels × n` (negative).
pub fn selective_scan_sequential(x: &Tensor, a: &Tensor, s: &SelectionParams) -> Result<Tensor> {
    let (steps, channels, n) = check_scan_inputs(x, a, s)?;
    let sel = select_params(x, s)?;
    let mut h = vec![0.0; channels * n];
    let mut y = Tensor::zeros(&[steps, channels]);
    for t in 0..steps {
        for k in 0..channels {
            let (ab, bb) = discretize_zoh(a.row(k), sel.b.row(t), sel.delta.at(t, k))?;
            let hk = &mut h[k * n..(k + 1) * n];
            let xv = x.at(t, k);
            for i in 0..n {
                hk[i] = ab[i] * hk[i] + bb[i] * xv;
            }
            y.data_mut()[t * channels + k] = kernels::dot(sel.c.row(t), hk);
        }
    }
    Ok(y)
}

/// Multiply/add/transcendental count of [`selective_scan_sequential`].
///
/// Per step: the two `n`-wide projections (`2·channels` ops per output),
/// the rank-one `Δ` projection (`2·channels`), bias add and softplus
/// (`2` per channel); per step, channel and state: discretization (6),
/// state update (3) and the output contraction (2).
pub fn scan_flop_count(steps: usize, channels: usize, n: usize) -> u64 {
    let (m, d, n) = (steps as u64, channels as u64, n as u64);
    let selection = 2 * n * 2 * d + 2 * d + 2 * d;
    let per_state = 6 + 3 + 2;
    m * (selection + per_state * n * d)
}
