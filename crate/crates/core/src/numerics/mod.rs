//! Dense `f64` tensors, eager reference ops, a reverse-mode tape and a
//! central-difference gradient oracle.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Target, Var};
pub use tensor::Tensor;

use crate::error::{dim_err, Error, Result};

/// Default step for [`finite_diff_grad`].
pub const FD_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err("matmul", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

/// `x·wᵀ + b` with `w` stored `out×in` and `b` broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, inp) = x.dims2()?;
    let (out, inp2) = w.dims2()?;
    if inp != inp2 {
        return Err(dim_err("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.numel() != out {
            return Err(dim_err("linear bias", w.shape(), b.shape()));
        }
    }
    let y = kernels::linear(x.data(), w.data(), b.map(Tensor::data), rows, inp, out);
    Tensor::new(&[rows, out], y)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut data = x.data().to_vec();
    for i in 0..rows {
        kernels::softmax_in_place(&mut data[i * cols..(i + 1) * cols]);
    }
    Tensor::new(x.shape(), data)
}

pub fn silu(x: &Tensor) -> Tensor {
    map(x, kernels::silu)
}

pub fn softplus(x: &Tensor) -> Tensor {
    map(x, kernels::softplus)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

/// `-Σ target·log softmax(logits)` for a single logit vector.
pub fn cross_entropy(logits: &Tensor, target: Target<'_>) -> Result<f64> {
    let ls = kernels::log_softmax(logits.data());
    match target {
        Target::Class(k) => ls
            .get(k)
            .map(|v| -v)
            .ok_or_else(|| Error::Validation(format!("class {k} out of range for {} logits", ls.len()))),
        Target::Soft(t) => {
            if t.len() != ls.len() {
                return Err(dim_err("cross_entropy", logits.shape(), &[t.len()]));
            }
            tape::validate_distribution(t)?;
            Ok(-kernels::dot(t, &ls))
        }
    }
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// `|a-b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest [`rel_err`] over paired elements.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(1);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let got = matmul(&a, &b).unwrap();
        assert!(max_rel_err(got.data(), &naive_matmul(&a, &b)) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[&[0.7, 0.7, 0.7]]).unwrap()).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&Tensor::from_rows(&[&[0.0, 2f64.ln()]]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let shifted = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1000.0 + 2f64.ln()]]).unwrap()).unwrap();
        // 1000 + ln 2 is only representable to ~1e-13
        assert!(shifted.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn silu_and_softplus_values() {
        let x = Tensor::new(&[4], vec![0.0, 50.0, 1.0, -1.0]).unwrap();
        let s = silu(&x);
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 50.0).abs() < 1e-12);
        assert!((s.data()[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((s.data()[2] - 0.731059).abs() < 1e-6);

        let p = softplus(&Tensor::new(&[3], vec![0.0, 100.0, -100.0]).unwrap());
        assert!((p.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((p.data()[1] - 100.0).abs() < 1e-12);
        assert!(p.data()[2] > 0.0 && (p.data()[2] - (-100f64).exp()).abs() < 1e-50);
        assert!(p.check_finite("softplus").is_ok());
    }

    #[test]
    fn cross_entropy_examples() {
        let sure = Tensor::new(&[3], vec![60.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&sure, Target::Class(0)).unwrap() < 1e-20);
        let flat = Tensor::zeros(&[4]);
        assert!((cross_entropy(&flat, Target::Class(2)).unwrap() - 4f64.ln()).abs() < 1e-15);

        let logits = Tensor::new(&[3], vec![0.3, -1.2, 0.8]).unwrap();
        let p = softmax_rows(&logits.reshape(&[1, 3]).unwrap()).unwrap();
        let entropy: f64 = -p.data().iter().map(|q| q * q.ln()).sum::<f64>();
        let ce = cross_entropy(&logits, Target::Soft(p.data())).unwrap();
        assert!((ce - entropy).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_rejects_unnormalized_soft_target() {
        let logits = Tensor::zeros(&[2]);
        let err = cross_entropy(&logits, Target::Soft(&[0.5, 0.6])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(cross_entropy(&logits, Target::Soft(&[0.5, 0.5 + 5e-7])).is_ok());
    }

    #[test]
    fn backward_sum_and_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let y = tape.leaf(Tensor::new(&[3], vec![4.0, 3.0, -1.0]).unwrap().with_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let p = tape.mul(x, y).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(y).data());
        assert_eq!(g.get(y).unwrap(), tape.value(x).data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        let y = tape.silu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_reachable_node_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![0.3, 0.1]).unwrap().with_grad());
        let a = tape.silu(x);
        let b = tape.exp(x);
        let c = tape.add(a, b).unwrap();
        let d = tape.mul(c, a).unwrap();
        let l = tape.sum(d);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.nodes_visited(), tape.len());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2], 1.0));
        let w = tape.leaf(Tensor::full(&[2], 2.0).with_grad());
        let p = tape.mul(x, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn param_registration_dedups_and_accumulates() {
        let mut w = Tensor::full(&[2], 3.0).with_grad();
        let g = {
            let mut tape = Tape::new();
            let a = tape.param(&w);
            let b = tape.param(&w);
            assert_eq!(a, b);
            let p = tape.mul(a, b).unwrap();
            let l = tape.sum(p);
            tape.backward(l).unwrap()
        };
        g.accumulate_into(&mut w);
        g.accumulate_into(&mut w);
        assert_eq!(w.grad.as_deref().unwrap(), &[12.0, 12.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, FD_EPS);
        assert!(max_rel_err(g.data(), x.data()) < 1e-9);
        let z = Tensor::zeros(&[4]);
        let g = finite_diff_grad(|t| silu(t).data().iter().sum(), &z, FD_EPS);
        assert!(g.data().iter().all(|v| (v - 0.5).abs() < 1e-10));
    }
}
