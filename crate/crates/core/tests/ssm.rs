mod common;

use common::{grad_check, rng};
use demansia::numerics::kernels::softplus;
use demansia::numerics::{max_rel_err, Tape, Tensor};
use demansia::ssm::{
    causal_convolve, combine, discretize_zoh, inclusive_scan, record_selective_ssm, s4d_real_a, scan_flop_count,
    select_params, selective_scan_parallel, selective_scan_sequential, ssm_conv_kernel, ssm_recurrence, ContinuousSsm,
    DiscreteSsm, ScanElement, ScanStrategy, SelectionParams,
};
use proptest::prelude::*;
use rand::Rng;

fn random_a(ch: usize, n: usize, r: &mut impl Rng) -> Tensor {
    Tensor::new(&[ch, n], (0..ch * n).map(|_| -r.random_range(0.05..3.0)).collect()).unwrap()
}

/// Per-step explicit matrices: diag(Ā_t), B̄_t as full vectors, h as a column.
fn naive_selective(x: &Tensor, a: &Tensor, s: &SelectionParams) -> Vec<f64> {
    let (m, d) = x.dims2().unwrap();
    let n = s.n_state();
    let mut y = vec![0.0; m * d];
    let mut h = vec![vec![0.0; n]; d];
    for t in 0..m {
        let b: Vec<f64> = (0..n).map(|i| (0..d).map(|k| s.w_b.at(i, k) * x.at(t, k)).sum()).collect();
        let c: Vec<f64> = (0..n).map(|i| (0..d).map(|k| s.w_c.at(i, k) * x.at(t, k)).sum()).collect();
        let proj: f64 = (0..d).map(|k| s.w_delta.at(0, k) * x.at(t, k)).sum();
        for k in 0..d {
            let dt = (1.0 + (s.delta_bias.data()[k] + proj).exp()).ln();
            for i in 0..n {
                let z = dt * a.at(k, i);
                let a_bar = z.exp();
                let b_bar = (z.exp() - 1.0) / z * dt * b[i];
                h[k][i] = a_bar * h[k][i] + b_bar * x.at(t, k);
            }
            y[t * d + k] = (0..n).map(|i| c[i] * h[k][i]).sum();
        }
    }
    y
}

#[test]
fn sequential_matches_naive_oracle() {
    let mut r = rng(21);
    let (m, d, n) = (16, 2, 4);
    let s = SelectionParams::init(d, n, &mut r);
    let a = random_a(d, n, &mut r);
    let x = Tensor::uniform(&[m, d], 1.0, &mut r);
    let y = selective_scan_sequential(&x, &a, &s).unwrap();
    assert!(max_rel_err(y.data(), &naive_selective(&x, &a, &s)) < 1e-12);
}

#[test]
fn selection_collapses_to_time_invariant() {
    let mut r = rng(22);
    let (m, d, n) = (10, 3, 4);
    let mut s = SelectionParams::init(d, n, &mut r);
    s.w_delta = Tensor::zeros(&[1, d]);
    let a = random_a(d, n, &mut r);
    let x = Tensor::full(&[m, d], 0.7);
    let y = selective_scan_sequential(&x, &a, &s).unwrap();

    let sel = select_params(&x, &s).unwrap();
    // constant input gives identical per-step B, C: broadcast them to every channel
    let b = Tensor::new(&[d, n], (0..d).flat_map(|_| sel.b.row(0).to_vec()).collect()).unwrap();
    let c = Tensor::new(&[d, n], (0..d).flat_map(|_| sel.c.row(0).to_vec()).collect()).unwrap();
    let ssm = ContinuousSsm::new(a, b, c).unwrap();
    let deltas: Vec<f64> = (0..d).map(|k| softplus(s.delta_bias.data()[k])).collect();
    let disc = DiscreteSsm::time_invariant(&ssm, &deltas, m).unwrap();
    let rec = ssm_recurrence(&disc, &ssm.c, &x, None).unwrap();
    assert!(max_rel_err(y.data(), rec.data()) < 1e-13);

    let zero = selective_scan_sequential(&Tensor::zeros(&[m, d]), &ssm.a, &s).unwrap();
    assert!(zero.data().iter().all(|v| *v == 0.0));
}

#[test]
fn parallel_matches_sequential_all_lengths() {
    for m in 1..=65 {
        let mut r = rng(100 + m as u64);
        let d = 1 + m % 4;
        let n = 1 + m % 8;
        let s = SelectionParams::init(d, n, &mut r);
        let a = random_a(d, n, &mut r);
        let x = Tensor::uniform(&[m, d], 1.0, &mut r);
        let seq = selective_scan_sequential(&x, &a, &s).unwrap();
        for workers in [1, 3] {
            let par = selective_scan_parallel(&x, &a, &s, ScanStrategy { workers }).unwrap();
            let err = max_rel_err(seq.data(), par.data());
            assert!(err <= 1e-10, "M={m} workers={workers} err={err}");
        }
    }
}

#[test]
fn parallel_is_bit_reproducible() {
    let mut r = rng(31);
    let s = SelectionParams::init(3, 5, &mut r);
    let a = random_a(3, 5, &mut r);
    let x = Tensor::uniform(&[33, 3], 1.0, &mut r);
    let first = selective_scan_parallel(&x, &a, &s, ScanStrategy { workers: 2 }).unwrap();
    for workers in [1, 2, 4] {
        assert_eq!(selective_scan_parallel(&x, &a, &s, ScanStrategy { workers }).unwrap(), first);
    }
}

#[test]
fn single_step_parallel_is_one_recurrence_step() {
    let mut r = rng(32);
    let s = SelectionParams::init(2, 3, &mut r);
    let a = random_a(2, 3, &mut r);
    let x = Tensor::uniform(&[1, 2], 1.0, &mut r);
    let sel = select_params(&x, &s).unwrap();
    let par = selective_scan_parallel(&x, &a, &s, ScanStrategy::default()).unwrap();
    for k in 0..2 {
        let (_, b_bar) = discretize_zoh(a.row(k), sel.b.row(0), sel.delta.at(0, k)).unwrap();
        let y: f64 = (0..3).map(|i| sel.c.at(0, i) * b_bar[i] * x.at(0, k)).sum();
        assert!((par.at(0, k) - y).abs() < 1e-15);
    }
}

#[test]
fn left_fold_reaches_recurrence_state() {
    let mut r = rng(33);
    let elems: Vec<ScanElement> = (0..20)
        .map(|_| ScanElement {
            a: (0..3).map(|_| r.random_range(0.0..1.0)).collect(),
            b: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let folded = elems.iter().fold(ScanElement::identity(3), |acc, e| combine(&acc, e));
    let mut h = vec![0.0; 3];
    for e in &elems {
        h = e.apply(&h);
    }
    assert!(max_rel_err(&folded.b, &h) < 1e-14);
    let scanned = inclusive_scan(&elems, ScanStrategy::default()).unwrap();
    assert!(max_rel_err(&scanned.last().unwrap().b, &h) < 1e-12);
}

#[test]
fn duality_for_all_lengths() {
    for m in 1..=64 {
        let mut r = rng(200 + m as u64);
        let (ch, n) = (2, 1 + m % 8);
        let ssm = ContinuousSsm::new(
            random_a(ch, n, &mut r),
            Tensor::uniform(&[ch, n], 1.0, &mut r),
            Tensor::uniform(&[ch, n], 1.0, &mut r),
        )
        .unwrap();
        let deltas: Vec<f64> = (0..ch).map(|_| r.random_range(0.01..0.5)).collect();
        let d = DiscreteSsm::time_invariant(&ssm, &deltas, m).unwrap();
        let x = Tensor::uniform(&[m, ch], 1.0, &mut r);
        let rec = ssm_recurrence(&d, &ssm.c, &x, None).unwrap();
        let conv = causal_convolve(&x, &ssm_conv_kernel(&d, &ssm.c, m).unwrap()).unwrap();
        let err = max_rel_err(rec.data(), conv.data());
        assert!(err <= 1e-10, "M={m} err={err}");
    }
}

#[test]
fn discrete_gains_in_unit_interval() {
    let mut r = rng(34);
    let ssm = ContinuousSsm::new(s4d_real_a(3, 16), Tensor::full(&[3, 16], 1.0), Tensor::full(&[3, 16], 1.0)).unwrap();
    let delta = Tensor::new(&[5, 3], (0..15).map(|_| r.random_range(0.001..0.1)).collect()).unwrap();
    let d = DiscreteSsm::from_continuous(&ssm, &delta).unwrap();
    for t in 0..5 {
        for k in 0..3 {
            assert!(d.a_bar(t, k).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
    assert!(!d.is_time_invariant());
}

#[test]
fn state_stays_bounded_over_long_runs() {
    let mut r = rng(35);
    let (m, ch, n) = (10_000, 2, 8);
    let ssm =
        ContinuousSsm::new(s4d_real_a(ch, n), Tensor::uniform(&[ch, n], 1.0, &mut r), Tensor::full(&[ch, n], 1.0))
            .unwrap();
    let delta = Tensor::new(&[m, ch], (0..m * ch).map(|_| r.random_range(0.001..0.1)).collect()).unwrap();
    let d = DiscreteSsm::from_continuous(&ssm, &delta).unwrap();
    let x = Tensor::uniform(&[m, ch], 1.0, &mut r);
    // C = 1, so |y| ≤ Σᵢ |hᵢ| ≤ Σᵢ sup|B̄ᵢ| / (1 − sup Āᵢ)
    let y = ssm_recurrence(&d, &ssm.c, &x, None).unwrap();
    for k in 0..ch {
        let bound: f64 = (0..n)
            .map(|i| {
                let b_sup = (0..m).map(|t| d.b_bar(t, k)[i].abs()).fold(0.0, f64::max);
                let a_sup = (0..m).map(|t| d.a_bar(t, k)[i]).fold(0.0, f64::max);
                b_sup / (1.0 - a_sup)
            })
            .sum();
        assert!((0..m).all(|t| y.at(t, k).abs() <= bound && y.at(t, k).is_finite()));
    }
}

/// Naive scan that tallies every multiply, add, divide and transcendental.
fn counted_scan(x: &Tensor, a: &Tensor, s: &SelectionParams) -> (Vec<f64>, u64) {
    let (m, d) = x.dims2().unwrap();
    let n = s.n_state();
    let mut ops = 0u64;
    let proj = |w: &Tensor, row: usize, t: usize, ops: &mut u64| {
        let mut acc = 0.0;
        for k in 0..d {
            acc += w.at(row, k) * x.at(t, k);
            *ops += 2;
        }
        acc
    };
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; m * d];
    for t in 0..m {
        let b: Vec<f64> = (0..n).map(|i| proj(&s.w_b, i, t, &mut ops)).collect();
        let c: Vec<f64> = (0..n).map(|i| proj(&s.w_c, i, t, &mut ops)).collect();
        let p = proj(&s.w_delta, 0, t, &mut ops);
        for k in 0..d {
            let dt = softplus(s.delta_bias.data()[k] + p);
            ops += 2;
            let mut acc = 0.0;
            for i in 0..n {
                let z = dt * a.at(k, i);
                let e = z.exp();
                let b_bar = (e - 1.0) / z * dt * b[i];
                ops += 6;
                let hv = &mut h[k * n + i];
                *hv = e * *hv + b_bar * x.at(t, k);
                ops += 3;
                acc += c[i] * *hv;
                ops += 2;
            }
            y[t * d + k] = acc;
        }
    }
    (y, ops)
}

#[test]
fn scan_flop_count_matches_instrumented_run() {
    let mut r = rng(36);
    let (m, d, n) = (8, 3, 4);
    let s = SelectionParams::init(d, n, &mut r);
    let a = random_a(d, n, &mut r);
    let x = Tensor::uniform(&[m, d], 1.0, &mut r);
    let (y, ops) = counted_scan(&x, &a, &s);
    assert_eq!(ops, scan_flop_count(m, d, n));
    let seq = selective_scan_sequential(&x, &a, &s).unwrap();
    assert!(max_rel_err(&y, seq.data()) < 1e-12);
    assert_eq!(scan_flop_count(2 * m, d, n), 2 * scan_flop_count(m, d, n));
}

#[test]
fn tape_scan_matches_sequential_and_gradients_check() {
    for m in [1, 3, 8] {
        let mut r = rng(40 + m as u64);
        let (d, n) = (3, 4);
        let s = SelectionParams::init(d, n, &mut r);
        let a = random_a(d, n, &mut r).with_grad();
        let x = Tensor::uniform(&[m, d], 1.0, &mut r).with_grad();
        let w = Tensor::uniform(&[m, d], 1.0, &mut r);

        let mut tape = Tape::new();
        let (xv, av) = (tape.param(&x), tape.param(&a));
        let y = record_selective_ssm(&mut tape, xv, av, &s).unwrap();
        let seq = selective_scan_sequential(&x, &a, &s).unwrap();
        assert!(max_rel_err(tape.value(y).data(), seq.data()) < 1e-13);

        let mut state = (s, a, x);
        let err = grad_check(
            &mut state,
            |(s, a, x)| vec![&mut s.w_b, &mut s.w_c, &mut s.w_delta, &mut s.delta_bias, a, x],
            |(s, a, x), tape| {
                let (xv, av) = (tape.param(x), tape.param(a));
                let y = record_selective_ssm(tape, xv, av, s)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                Ok(tape.sum(p))
            },
            usize::MAX,
        );
        assert!(err <= 1e-4, "M={m} err={err}");
    }
}

fn element(n: usize) -> impl Strategy<Value = ScanElement> {
    (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))
        .prop_map(|(a, b)| ScanElement { a, b })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn combine_is_associative((p, q, s) in (1usize..9).prop_flat_map(|n| (element(n), element(n), element(n)))) {
        let left = combine(&combine(&p, &q), &s);
        let right = combine(&p, &combine(&q, &s));
        prop_assert!(max_rel_err(&left.a, &right.a) <= 1e-12);
        prop_assert!(max_rel_err(&left.b, &right.b) <= 1e-12);
        let id = ScanElement::identity(p.a.len());
        prop_assert_eq!(&combine(&id, &p), &p);
        prop_assert_eq!(&combine(&p, &id), &p);
    }

    #[test]
    fn delta_is_positive(seed in any::<u64>(), m in 1usize..12, scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let s = SelectionParams::init(3, 2, &mut r);
        let x = Tensor::uniform(&[m, 3], scale, &mut r);
        let sel = select_params(&x, &s).unwrap();
        prop_assert!(sel.delta.data().iter().all(|v| *v > 0.0));
    }
}
