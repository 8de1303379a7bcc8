//! Multi-head scaled dot-product attention and its analytic operation count.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{self, kernels, Tape, Tensor, Var};

/// Denominator used to temper the scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreScale {
    /// `√d_model`.
    #[default]
    Model,
    /// `√d_K`.
    Key,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `d_K × d_model`
    pub w_q: Tensor,
    pub b_q: Tensor,
    /// `d_K × d_model`
    pub w_k: Tensor,
    pub b_k: Tensor,
    /// `d_V × d_model`
    pub w_v: Tensor,
    pub b_v: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: Vec<HeadParams>,
    /// `h·d_V × d_model`
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub scale: ScoreScale,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_k: usize, d_v: usize, h: usize, rng: &mut R) -> Result<Self> {
        if h == 0 {
            return Err(Error::Validation("attention needs at least one head".into()));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let heads = (0..h)
            .map(|_| HeadParams {
                w_q: Tensor::uniform(&[d_k, d_model], bound, rng).with_grad(),
                b_q: Tensor::uniform(&[d_k], bound, rng).with_grad(),
                w_k: Tensor::uniform(&[d_k, d_model], bound, rng).with_grad(),
                b_k: Tensor::uniform(&[d_k], bound, rng).with_grad(),
                w_v: Tensor::uniform(&[d_v, d_model], bound, rng).with_grad(),
                b_v: Tensor::uniform(&[d_v], bound, rng).with_grad(),
            })
            .collect();
        let bound_o = 1.0 / ((h * d_v) as f64).sqrt();
        Ok(Self {
            d_model,
            d_k,
            d_v,
            heads,
            w_o: Tensor::uniform(&[h * d_v, d_model], bound_o, rng).with_grad(),
            b_o: Tensor::uniform(&[d_model], bound_o, rng).with_grad(),
            scale: ScoreScale::Model,
        })
    }

    pub fn h(&self) -> usize {
        self.heads.len()
    }

    fn denominator(&self) -> f64 {
        match self.scale {
            ScoreScale::Model => (self.d_model as f64).sqrt(),
            ScoreScale::Key => (self.d_k as f64).sqrt(),
        }
    }
}

/// `(Q, K, V)` for one head, biases broadcast over positions.
pub fn project_qkv(x: &Tensor, p: &AttentionParams, head: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, width) = x.dims2()?;
    if width != p.d_model {
        return Err(dim_err("project_qkv", x.shape(), &[p.d_model]));
    }
    let hp =
        p.heads.get(head).ok_or_else(|| Error::Validation(format!("head {head} out of range for {} heads", p.h())))?;
    Ok((
        numerics::linear(x, &hp.w_q, Some(&hp.b_q))?,
        numerics::linear(x, &hp.w_k, Some(&hp.b_k))?,
        numerics::linear(x, &hp.w_v, Some(&hp.b_v))?,
    ))
}

/// `softmax(QKᵀ / denom)·V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, denom: f64) -> Result<Tensor> {
    let (_, dk) = q.dims2()?;
    let (nk, dk2) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if dk != dk2 {
        return Err(dim_err("scaled_dot_attention Q/K", q.shape(), k.shape()));
    }
    if nk != nv {
        return Err(dim_err("scaled_dot_attention K/V", k.shape(), v.shape()));
    }
    let kt = transpose(k);
    let mut scores = numerics::matmul(q, &kt)?;
    scores.data_mut().iter_mut().for_each(|s| *s /= denom);
    let probs = numerics::softmax_rows(&scores)?;
    numerics::matmul(&probs, v)
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("rank 2");
    let data = (0..r * c).map(|i| t.at(i % r, i / r)).collect();
    Tensor::new(&[c, r], data).expect("shape")
}

pub fn multi_head_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let hd = p.h() * p.d_v;
    let mut concat = Tensor::zeros(&[n, hd]);
    for head in 0..p.h() {
        let (q, k, v) = project_qkv(x, p, head)?;
        let y = scaled_dot_attention(&q, &k, &v, p.denominator())?;
        for i in 0..n {
            concat.data_mut()[i * hd + head * p.d_v..i * hd + (head + 1) * p.d_v].copy_from_slice(y.row(i));
        }
    }
    let mut out = numerics::matmul(&concat, &p.w_o)?;
    for i in 0..n {
        for (o, b) in out.data_mut()[i * p.d_model..(i + 1) * p.d_model].iter_mut().zip(p.b_o.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Records multi-head attention on a tape, registering every weight as a parameter.
pub fn record_multi_head_attention(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<Var> {
    let (_, width) = tape.value(x).dims2()?;
    if width != p.d_model {
        return Err(dim_err("multi_head_attention", tape.value(x).shape(), &[p.d_model]));
    }
    let mut outs = Vec::with_capacity(p.h());
    for hp in &p.heads {
        let (wq, bq) = (tape.param(&hp.w_q), tape.param(&hp.b_q));
        let (wk, bk) = (tape.param(&hp.w_k), tape.param(&hp.b_k));
        let (wv, bv) = (tape.param(&hp.w_v), tape.param(&hp.b_v));
        let q = tape.linear(x, wq, Some(bq))?;
        let k = tape.linear(x, wk, Some(bk))?;
        let v = tape.linear(x, wv, Some(bv))?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / p.denominator());
        let a = tape.softmax_rows(s)?;
        outs.push(tape.matmul(a, v)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let wo = tape.param(&p.w_o);
    let bo = tape.param(&p.b_o);
    let y = tape.matmul(cat, wo)?;
    tape.add_row(y, bo)
}

/// Operation count of [`multi_head_attention`] for a length-`n` input.
///
/// Multiplications and additions count separately; a biased output of width
/// `w` costs `2w` (the bias seeds the accumulator). Scores cost `2d_K` each,
/// scaling one division per score, softmax one exponential per score, and
/// the weighted sum `2n` per output entry.
pub fn attention_flop_count(n: usize, p: &AttentionParams) -> u64 {
    flop_count(n, p.d_model, p.d_k, p.d_v, p.h())
}

pub fn flop_count(n: usize, d_model: usize, d_k: usize, d_v: usize, h: usize) -> u64 {
    let (n, dm, dk, dv, h) = (n as u64, d_model as u64, d_k as u64, d_v as u64, h as u64);
    let projections = 2 * n * dm * (2 * dk + dv);
    let scores = 2 * n * n * dk;
    let scaling = n * n;
    let softmax = n * n;
    let weighted = 2 * n * n * dv;
    let output = 2 * n * dm * h * dv;
    h * (projections + scores + scaling + softmax + weighted) + output
}

/// Attention probability matrix of one head.
pub fn attention_probabilities(x: &Tensor, p: &AttentionParams, head: usize) -> Result<Tensor> {
    let (q, k, _) = project_qkv(x, p, head)?;
    let mut s = numerics::matmul(&q, &transpose(&k))?;
    let (n, m) = s.dims2()?;
    let denom = p.denominator();
    for i in 0..n {
        let row = &mut s.data_mut()[i * m..(i + 1) * m];
        row.iter_mut().for_each(|v| *v /= denom);
        kernels::softmax_in_place(row);
    }
    Ok(s)
}
