#![allow(dead_code)]

use demansia::numerics::{rel_err, Tape, Tensor, Var, FD_EPS};
use demansia::Result;

/// Worst relative error between tape gradients and central differences.
///
/// `view` lists the tensors to probe; `loss` records the scalar loss on a
/// fresh tape. At most `per_tensor` evenly spaced coordinates are probed in
/// each tensor.
pub fn grad_check<P>(
    p: &mut P,
    view: impl Fn(&mut P) -> Vec<&mut Tensor>,
    loss: impl Fn(&P, &mut Tape) -> Result<Var>,
    per_tensor: usize,
) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let l = loss(p, &mut tape).unwrap();
        let g = tape.backward(l).unwrap();
        view(p).into_iter().map(|t| g.wrt(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])).collect()
    };
    let value = |p: &P| {
        let mut tape = Tape::new();
        let l = loss(p, &mut tape).unwrap();
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let numel = grad.len();
        let count = numel.min(per_tensor);
        for s in 0..count {
            let j = s * numel / count;
            let orig = view(p)[i].data()[j];
            view(p)[i].data_mut()[j] = orig + FD_EPS;
            let up = value(p);
            view(p)[i].data_mut()[j] = orig - FD_EPS;
            let down = value(p);
            view(p)[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(grad[j], fd));
        }
    }
    worst
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
