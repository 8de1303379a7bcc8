//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value. Because nodes
//! are only ever appended, tape order is a topological order and backward
//! is a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{self, Conv2dGeom};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::ssm::kernel::{self as scan, ScanCache, ScanGrads, ScanShape};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    BroadcastCols { x: Var, cols: usize },
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<f64>, cols: usize },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ReverseRows(Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom, cols: Vec<f64> },
    CausalConv1d { x: Var, w: Var, b: Var, k: usize },
    RmsNorm { x: Var, scale: Var, eps: f64 },
    SelectiveScan { u: Var, delta: Var, a: Var, b: Var, c: Var, cache: ScanCache },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Scale(..) => "scale",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::CrossEntropyRows { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ReverseRows(_) => "reverse_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::CausalConv1d { .. } => "causal_conv1d",
            Op::RmsNorm { .. } => "rms_norm",
            Op::SelectiveScan { .. } => "selective_scan",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and their outputs for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Soft or hard supervision for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target<'a> {
    Class(usize),
    Soft(&'a [f64]),
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: {
                let shape = t.shape().to_vec();
                Tensor::new(&shape, t.into_data()).expect("consistent tensor")
            },
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Registers a trainable tensor owned by the caller.
    ///
    /// Registering the same tensor twice returns the same node, so gradients
    /// can be looked up later with [`Gradients::wrt`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Tensor::new(t.shape(), t.data().to_vec()).expect("consistent tensor"),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x·wᵀ + b` with `w` stored `out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp) = self.dims2(x)?;
        let (out, inp2) = self.dims2(w)?;
        if inp != inp2 {
            return Err(dim_err("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.numel() != out {
                return Err(dim_err("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let y = kernels::linear(self.data(x), self.data(w), b.map(|b| self.data(b)), rows, inp, out);
        let t = Tensor::new(&[rows, out], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, rows, inp, out }, &inputs))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.nodes[row.0].value.numel() != cols {
            return Err(dim_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let mut data = self.data(x).to_vec();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += r[j];
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::AddRow { x, row }, &[x, row]))
    }

    /// Repeats a `rows×1` column across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let (rows, one) = self.dims2(x)?;
        if one != 1 {
            return Err(dim_err("broadcast_cols", self.shape(x), &[rows, 1]));
        }
        let src = self.data(x);
        let data = (0..rows * cols).map(|i| src[i / cols]).collect();
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::BroadcastCols { x, cols }, &[x]))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Op::Silu(x), kernels::silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), kernels::softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let mut data = self.data(x).to_vec();
        for i in 0..rows {
            kernels::softmax_in_place(&mut data[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Per-row soft-target cross entropy `-Σ t·log softmax(x)`; returns a length-`rows` vector.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (rows, cols) = self.dims2(logits)?;
        if targets.numel() != rows * cols {
            return Err(dim_err("cross_entropy_rows", self.shape(logits), targets.shape()));
        }
        for i in 0..rows {
            let row = &targets.data()[i * cols..(i + 1) * cols];
            validate_distribution(row)?;
        }
        let x = self.data(logits);
        let losses = (0..rows)
            .map(|i| {
                let ls = kernels::log_softmax(&x[i * cols..(i + 1) * cols]);
                -kernels::dot(&targets.data()[i * cols..(i + 1) * cols], &ls)
            })
            .collect();
        let t = Tensor::new(&[rows], losses)?;
        let op = Op::CrossEntropyRows { logits, targets: targets.data().to_vec(), cols };
        Ok(self.push(t, op, &[logits]))
    }

    /// Scalar cross entropy of a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<'_>) -> Result<Var> {
        let n = self.nodes[logits.0].value.numel();
        let dist = match target {
            Target::Class(k) => {
                if k >= n {
                    return Err(Error::Validation(format!("class {k} out of range for {n} logits")));
                }
                let mut d = vec![0.0; n];
                d[k] = 1.0;
                d
            }
            Target::Soft(t) => t.to_vec(),
        };
        let targets = Tensor::new(&[1, n], dist)?;
        let row = self.reshape(logits, &[1, n])?;
        let losses = self.cross_entropy_rows(row, &targets)?;
        Ok(self.sum(losses))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > cols {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let t = Tensor::new(&[rows, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0])?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims2(p)?.1;
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > rows {
            return Err(dim_err("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(&[len, cols], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * cols);
        for i in (0..rows).rev() {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::ReverseRows(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let src = self.data(x);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let t = Tensor::new(&[cols, rows], data)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// 2-D convolution of an `H×W×C_in` image with `w: C_out×(k·k·C_in)`.
    ///
    /// The result is `(H'·W')×C_out`: one row per output pixel in row-major order.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        let expect_x = geom.height * geom.width * geom.in_ch;
        if self.nodes[x.0].value.numel() != expect_x {
            return Err(dim_err("conv2d input", self.shape(x), &[geom.height, geom.width, geom.in_ch]));
        }
        if self.shape(w) != [geom.out_ch, geom.patch_len()] {
            return Err(dim_err("conv2d weight", self.shape(w), &[geom.out_ch, geom.patch_len()]));
        }
        let cols = geom.im2col(self.data(x));
        let rows = geom.out_height() * geom.out_width();
        let y = kernels::linear(&cols, self.data(w), Some(self.data(b)), rows, geom.patch_len(), geom.out_ch);
        let t = Tensor::new(&[rows, geom.out_ch], y)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Depthwise causal convolution of a `len×ch` sequence with `w: ch×k`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (len, ch) = self.dims2(x)?;
        let (wc, k) = self.dims2(w)?;
        if wc != ch || self.nodes[b.0].value.numel() != ch {
            return Err(dim_err("causal_conv1d", self.shape(x), self.shape(w)));
        }
        let y = kernels::causal_conv1d(self.data(x), self.data(w), self.data(b), len, ch, k);
        let t = Tensor::new(&[len, ch], y)?;
        Ok(self.push(t, Op::CausalConv1d { x, w, b, k }, &[x, w, b]))
    }

    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.nodes[scale.0].value.numel() != cols {
            return Err(dim_err("rms_norm", self.shape(x), self.shape(scale)));
        }
        let y = kernels::rms_norm(self.data(x), self.data(scale), rows, cols, eps);
        let t = Tensor::new(&[rows, cols], y)?;
        Ok(self.push(t, Op::RmsNorm { x, scale, eps }, &[x, scale]))
    }

    /// Selective scan `h_t = Ā_t h_{t-1} + B̄_t u_t`, `y_t = C_t·h_t` per channel.
    ///
    /// `u, delta: len×ch`, `a: ch×n` (negative), `b, c: len×n`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (len, ch) = self.dims2(u)?;
        let (ach, n) = self.dims2(a)?;
        if self.shape(delta) != self.shape(u) {
            return Err(dim_err("selective_scan delta", self.shape(u), self.shape(delta)));
        }
        if ach != ch {
            return Err(dim_err("selective_scan A", self.shape(u), self.shape(a)));
        }
        for v in [b, c] {
            if self.shape(v) != [len, n] {
                return Err(dim_err("selective_scan B/C", &[len, n], self.shape(v)));
            }
        }
        let shape = ScanShape { len, ch, n };
        let (y, cache) =
            scan::scan_forward(&shape, self.data(u), self.data(delta), self.data(a), self.data(b), self.data(c));
        let t = Tensor::new(&[len, ch], y)?;
        let op = Op::SelectiveScan { u, delta, a, b, c, cache };
        Ok(self.push(t, op, &[u, delta, a, b, c]))
    }

    /// Locates the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            node.value.check_finite(&format!("node {i} ({})", node.op.name())).err().map(|e| e.to_string())
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone(), visited })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } if a == b => {
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                let d = self.data(*a);
                kernels::matmul_backward(g, d, d, *m, *k, *n, Some(&mut ga), Some(&mut gb));
                self.accumulate(grads, *a, |gx| {
                    add_to(gx, &ga);
                    add_to(gx, &gb);
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (ga, gb) = self.two_slots(grads, *a, *b);
                kernels::matmul_backward(g, self.data(*a), self.data(*b), *m, *k, *n, ga, gb);
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (gx, gw) = self.two_slots(grads, *x, *w);
                kernels::linear_backward(g, self.data(*x), self.data(*w), *rows, *inp, *out, gx, gw, None);
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        kernels::linear_backward(g, &[], &[], *rows, *inp, *out, None, None, Some(gb));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_to(ga, g));
                self.accumulate(grads, *b, |gb| add_to(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_to(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).zip(db).for_each(|((d, s), o)| *d += s * o));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).zip(da).for_each(|((d, s), o)| *d += s * o));
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, |gx| add_to(gx, g));
                let cols = self.nodes[row.0].value.numel();
                self.accumulate(grads, *row, |gr| {
                    for (j, v) in g.iter().enumerate() {
                        gr[j % cols] += v;
                    }
                });
            }
            Op::BroadcastCols { x, cols } => {
                self.accumulate(grads, *x, |gx| {
                    for (j, v) in g.iter().enumerate() {
                        gx[j / cols] += v;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s));
            }
            Op::Silu(x) => {
                let xs = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * kernels::silu_grad(xs[j]);
                    }
                });
            }
            Op::Softplus(x) => {
                let xs = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * kernels::sigmoid(xs[j]);
                    }
                });
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * y[j];
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, *x, |gx| {
                    for (r, (gr, yr)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                        let inner = kernels::dot(gr, yr);
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets, cols } => {
                let x = self.data(*logits);
                self.accumulate(grads, *logits, |gx| {
                    for (r, gr) in g.iter().enumerate() {
                        let mut p = x[r * cols..(r + 1) * cols].to_vec();
                        kernels::softmax_in_place(&mut p);
                        for j in 0..*cols {
                            gx[r * cols + j] += gr * (p[j] - targets[r * cols + j]);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = self.data(*x).len() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SliceCols { x, start } => {
                let cols = self.dims2(*x).expect("matrix").1;
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_to(&mut gx[r * cols + start..r * cols + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims2(p).expect("matrix").1;
                    self.accumulate(grads, p, |gp| {
                        for (r, gr) in gp.chunks_mut(c).enumerate() {
                            add_to(gr, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.dims2(*x).expect("matrix").1;
                self.accumulate(grads, *x, |gx| add_to(&mut gx[start * cols..start * cols + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, |gp| add_to(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ReverseRows(x) => {
                let (rows, cols) = node.value.dims2().expect("matrix");
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let src = &g[(rows - 1 - r) * cols..(rows - r) * cols];
                        add_to(&mut gx[r * cols..(r + 1) * cols], src);
                    }
                });
            }
            Op::Transpose(x) => {
                let (rows, cols) = self.dims2(*x).expect("matrix");
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_to(gx, g)),
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.out_height() * geom.out_width();
                let pl = geom.patch_len();
                let need_x = self.nodes[x.0].requires_grad;
                let mut gcols = need_x.then(|| vec![0.0; rows * pl]);
                let gw = self.slot(grads, *w);
                kernels::linear_backward(g, cols, self.data(*w), rows, pl, geom.out_ch, gcols.as_deref_mut(), gw, None);
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::linear_backward(g, &[], &[], rows, pl, geom.out_ch, None, None, Some(gb));
                }
                if let Some(gcols) = gcols {
                    self.accumulate(grads, *x, |gx| geom.col2im(&gcols, gx));
                }
            }
            Op::CausalConv1d { x, w, b, k } => {
                let (len, ch) = node.value.dims2().expect("matrix");
                let (gx, gw, gb) = self.three_slots(grads, *x, *w, *b);
                kernels::causal_conv1d_backward(g, self.data(*x), self.data(*w), len, ch, *k, gx, gw, gb);
            }
            Op::RmsNorm { x, scale, eps } => {
                let (rows, cols) = node.value.dims2().expect("matrix");
                let (gx, gs) = self.two_slots(grads, *x, *scale);
                kernels::rms_norm_backward(g, self.data(*x), self.data(*scale), rows, cols, *eps, gx, gs);
            }
            Op::SelectiveScan { u, delta, a, b, c, cache } => {
                let (len, ch) = node.value.dims2().expect("matrix");
                let n = self.dims2(*a).expect("matrix").1;
                let shape = ScanShape { len, ch, n };
                let mut bufs: Vec<Option<Vec<f64>>> = [*u, *delta, *a, *b, *c]
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad.then(|| vec![0.0; self.nodes[v.0].value.numel()]))
                    .collect();
                {
                    let mut it = bufs.iter_mut();
                    let mut next = || it.next().and_then(|o| o.as_deref_mut());
                    let sg = ScanGrads { u: next(), delta: next(), a: next(), b: next(), c: next() };
                    scan::scan_backward(
                        &shape,
                        g,
                        self.data(*u),
                        self.data(*delta),
                        self.data(*a),
                        self.data(*b),
                        self.data(*c),
                        cache,
                        sg,
                    );
                }
                for (v, buf) in [*u, *delta, *a, *b, *c].into_iter().zip(bufs) {
                    if let Some(buf) = buf {
                        self.accumulate(grads, v, |gv| add_to(gv, &buf));
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(slot) = self.slot(grads, v) {
            f(slot);
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn two_slots<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
    ) -> (Option<&'g mut [f64]>, Option<&'g mut [f64]>) {
        for v in [a, b] {
            self.slot(grads, v);
        }
        debug_assert_ne!(a, b, "two_slots needs distinct nodes");
        let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
        let (left, right) = grads.split_at_mut(hi);
        let lo_slot = left[lo].as_deref_mut();
        let hi_slot = right[0].as_deref_mut();
        let (sa, sb) = if swap { (hi_slot, lo_slot) } else { (lo_slot, hi_slot) };
        (sa.filter(|_| self.nodes[a.0].requires_grad), sb.filter(|_| self.nodes[b.0].requires_grad))
    }

    #[allow(clippy::type_complexity)]
    fn three_slots<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        c: Var,
    ) -> (Option<&'g mut [f64]>, Option<&'g mut [f64]>, Option<&'g mut [f64]>) {
        for v in [a, b, c] {
            self.slot(grads, v);
        }
        let mut out: [Option<&'g mut [f64]>; 3] = [None, None, None];
        let wanted = [a.0, b.0, c.0];
        for (idx, g) in grads.iter_mut().enumerate() {
            if let Some(pos) = wanted.iter().position(|&w| w == idx) {
                if self.nodes[idx].requires_grad {
                    out[pos] = g.as_deref_mut();
                }
            }
        }
        let [x, y, z] = out;
        (x, y, z)
    }
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn validate_distribution(row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
        return Err(Error::Validation(format!("soft target must be a distribution (sum = {sum})")));
    }
    Ok(())
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor registered with [`Tape::param`].
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let v = self.params.get(&(t as *const Tensor as usize))?;
        self.get(*v)
    }

    /// Adds this pass's gradient into `t.grad` (no-op if `t` was not registered).
    pub fn accumulate_into(&self, t: &mut Tensor) {
        let Some(g) = self.wrt(t).map(<[f64]>::to_vec) else { return };
        match &mut t.grad {
            Some(acc) => add_to(acc, &g),
            None => t.grad = Some(g),
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}
