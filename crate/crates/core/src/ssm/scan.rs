//! Work-efficient parallel prefix scan over affine maps `h ↦ a·h + b`.

use rayon::prelude::*;

use super::{check_scan_inputs, discretize_zoh, select_params, SelectionParams};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

/// Elementwise affine map `h ↦ a ⊙ h + b` over an `n`-dimensional state.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ScanElement {
    pub fn identity(n: usize) -> Self {
        Self { a: vec![1.0; n], b: vec![0.0; n] }
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.a.iter().zip(&self.b).zip(h).map(|((a, b), h)| a * h + b).collect()
    }
}

/// `first` applied before `second`: `(a₂a₁, a₂b₁ + b₂)`.
pub fn combine(first: &ScanElement, second: &ScanElement) -> ScanElement {
    let n = first.a.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        a.push(second.a[i] * first.a[i]);
        b.push(second.a[i] * first.b[i] + second.b[i]);
    }
    ScanElement { a, b }
}

/// How the prefix scan is evaluated. The combination tree depends only on
/// the sequence length, so results do not depend on `workers`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanStrategy {
    pub workers: usize,
}

impl Default for ScanStrategy {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

fn for_each_chunk(
    arr: &mut [ScanElement],
    stride: usize,
    parallel: bool,
    f: impl Fn(&mut [ScanElement]) + Sync + Send,
) {
    if parallel {
        arr.par_chunks_mut(stride).for_each(f);
    } else {
        arr.chunks_mut(stride).for_each(f);
    }
}

fn blelloch(elems: &[ScanElement], parallel: bool) -> Vec<ScanElement> {
    let m = elems.len();
    let n = elems[0].a.len();
    let size = m.next_power_of_two();
    let mut arr = elems.to_vec();
    arr.resize(size, ScanElement::identity(n));

    let mut stride = 2;
    while stride <= size {
        for_each_chunk(&mut arr, stride, parallel, |chunk| {
            let half = chunk.len() / 2;
            chunk[chunk.len() - 1] = combine(&chunk[half - 1], &chunk[chunk.len() - 1]);
        });
        stride *= 2;
    }
    arr[size - 1] = ScanElement::identity(n);
    let mut stride = size;
    while stride >= 2 {
        for_each_chunk(&mut arr, stride, parallel, |chunk| {
            let (half, last) = (chunk.len() / 2, chunk.len() - 1);
            let prefix = chunk[last].clone();
            let left = std::mem::replace(&mut chunk[half - 1], prefix);
            chunk[last] = combine(&chunk[last], &left);
        });
        stride /= 2;
    }
    // arr now holds exclusive prefixes
    arr.truncate(m);
    for (prefix, e) in arr.iter_mut().zip(elems) {
        *prefix = combine(prefix, e);
    }
    arr
}

/// Inclusive prefix composition: entry `t` maps the zero-time state to `h_t`.
pub fn inclusive_scan(elems: &[ScanElement], strategy: ScanStrategy) -> Result<Vec<ScanElement>> {
    if strategy.workers == 0 {
        return Err(Error::Validation("scan needs at least one worker".into()));
    }
    if elems.is_empty() {
        return Ok(Vec::new());
    }
    if strategy.workers == 1 {
        return Ok(blelloch(elems, false));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(strategy.workers)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(|| blelloch(elems, true)))
}

/// Selective scan through the parallel prefix over per-step affine maps.
pub fn selective_scan_parallel(x: &Tensor, a: &Tensor, s: &SelectionParams, strategy: ScanStrategy) -> Result<Tensor> {
    let (steps, channels, _) = check_scan_inputs(x, a, s)?;
    let sel = select_params(x, s)?;
    let mut y = Tensor::zeros(&[steps, channels]);
    if steps == 0 {
        return Ok(y);
    }
    for k in 0..channels {
        let mut elems = Vec::with_capacity(steps);
        for t in 0..steps {
            let (a_bar, mut b_bar) = discretize_zoh(a.row(k), sel.b.row(t), sel.delta.at(t, k))?;
            let xv = x.at(t, k);
            b_bar.iter_mut().for_each(|v| *v *= xv);
            elems.push(ScanElement { a: a_bar, b: b_bar });
        }
        // from h₀ = 0 the state is the accumulated offset
        let prefix = inclusive_scan(&elems, strategy)?;
        for (t, p) in prefix.iter().enumerate() {
            y.data_mut()[t * channels + k] = kernels::dot(sel.c.row(t), &p.b);
        }
    }
    Ok(y)
}
