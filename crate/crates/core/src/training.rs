//! Desk-scale training: batched gradients, AdamW/RAdam, warm-restart cosine
//! schedule, epoch-end EMA, evaluation and the metrics log.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::model::{predict, DeMansia, DeMansiaConfig};
use crate::module::Module;
use crate::numerics::{self, Tape, Target, Tensor};
use crate::token_labeling::{make_patch_targets, record_total_loss, synth_range, PatchTargets};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    /// Adam with variance rectification and the same decoupled decay.
    RAdam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(Self::AdamW),
            "radam" => Ok(Self::RAdam),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (expected adamw or radam)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AdamW => "adamw",
            Self::RAdam => "radam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    /// First restart period, in epochs.
    pub t0: f64,
    pub t_mult: f64,
    /// Applied once per epoch.
    pub ema_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the token-labeling term.
    pub beta: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Batches whose gradients are averaged before each update.
    pub grad_accum: usize,
    /// Stop after this many updates; 0 means no limit.
    pub max_steps: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            weight_decay: 0.05,
            t0: 10.0,
            t_mult: 2.0,
            ema_decay: 0.999,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            beta: 0.5,
            train_samples: 2000,
            test_samples: 500,
            grad_accum: 1,
            max_steps: 0,
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.t0 >= 1.0) || !(self.t_mult >= 1.0) {
            return bad(format!("t0 and t_mult must be at least 1, got {} and {}", self.t0, self.t_mult));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(self.lr_max >= 0.0) || !(self.weight_decay >= 0.0) || !(self.beta >= 0.0) {
            return bad("lr_max, weight_decay and beta must be non-negative".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.train_samples == 0 {
            return bad("batch_size, grad_accum and train_samples must be positive".into());
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts; `progress` is measured in epochs.
pub fn sgdr_lr(progress: f64, cfg: &TrainConfig) -> f64 {
    let (mut t, mut period) = (progress.max(0.0), cfg.t0);
    if cfg.t_mult == 1.0 {
        t %= period;
    } else {
        while t >= period {
            t -= period;
            period *= cfg.t_mult;
        }
    }
    cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t / period).cos())
}

/// Shadow copy of every learnable tensor.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub shadow: Vec<(String, Tensor)>,
}

impl EmaState {
    pub fn from_model(model: &impl Module) -> Self {
        let shadow = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")))
            .collect();
        Self { shadow }
    }

    /// Writes the shadow values into `model`.
    pub fn copy_into(&self, model: &mut impl Module) -> Result<()> {
        let mut live = model.named_params_mut();
        check_mirror(&self.shadow, live.iter().map(|(n, t)| (n, t.shape())))?;
        for ((_, s), (_, t)) in self.shadow.iter().zip(live.iter_mut()) {
            t.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }
}

fn check_mirror<'a>(
    shadow: &[(String, Tensor)],
    live: impl ExactSizeIterator<Item = (&'a String, &'a [usize])>,
) -> Result<()> {
    if shadow.len() != live.len() {
        return Err(Error::Contract(format!("EMA holds {} tensors, model has {}", shadow.len(), live.len())));
    }
    for ((sn, st), (ln, ls)) in shadow.iter().zip(live) {
        if sn != ln || st.shape() != ls {
            return Err(Error::Contract(format!("EMA tensor {sn} {:?} does not mirror {ln} {ls:?}", st.shape())));
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·live` for every tensor.
pub fn ema_update(ema: &mut EmaState, model: &impl Module, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    let live = model.named_params();
    check_mirror(&ema.shadow, live.iter().map(|(n, t)| (n, t.shape())))?;
    for ((_, s), (_, t)) in ema.shadow.iter_mut().zip(&live) {
        for (a, b) in s.data_mut().iter_mut().zip(t.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Whether decoupled weight decay applies to a parameter.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() >= 2 && !name.ends_with("a_log") && name != "pos_embed"
}

/// Adaptive moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    decay_mask: Vec<bool>,
}

impl Optimizer {
    pub fn new(model: &impl Module, kind: OptimizerKind, weight_decay: f64) -> Self {
        let params = model.named_params();
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            decay_mask: params.iter().map(|(n, t)| decays(n, t)).collect(),
        }
    }

    /// Step-size multiplier for the current step: bias correction of the first
    /// moment, and for RAdam the variance rectification (`None` while the
    /// second moment is untrustworthy, in which case plain momentum is used).
    fn rectification(&self) -> Option<f64> {
        let t = self.step as f64;
        match self.kind {
            OptimizerKind::AdamW => Some(1.0),
            OptimizerKind::RAdam => {
                let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
                let b2t = self.beta2.powf(t);
                let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
                (rho > 5.0)
                    .then(|| ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt())
            }
        }
    }

    /// One update from the flat gradient `grads` (parameters in `named_params` order).
    pub fn apply(&mut self, model: &mut impl Module, grads: &[f64], lr: f64) -> Result<()> {
        let mut params = model.named_params_mut();
        if params.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let rect = self.rectification();
        let mut offset = 0;
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let n = p.numel();
            let g = &grads[offset..offset + n];
            offset += n;
            let decay = if self.decay_mask[i] { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let update = match rect {
                    Some(r) => r * m_hat / ((v[k] / c2).sqrt() + self.eps),
                    None => m_hat,
                };
                *w -= decay * *w + lr * update;
            }
        }
        Ok(())
    }

    pub fn records(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * names.len() + 1);
        for (n, m) in names.iter().zip(&self.m) {
            out.push((format!("opt.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.v) {
            out.push((format!("opt.v.{n}"), v.clone()));
        }
        out.push(("opt.step".into(), Tensor::scalar(self.step as f64)));
        out
    }
}

/// A training or evaluation example with its patch targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
    pub targets: PatchTargets,
}

/// Synthetic examples `start..start + count` of the stream `seed`.
pub fn synth_examples(seed: u64, start: usize, count: usize, config: &DeMansiaConfig) -> Result<Vec<Example>> {
    synth_range(seed, start, count, config.image_size, config.n_classes)?
        .into_iter()
        .map(|s| {
            Ok(Example { targets: make_patch_targets(&s.map, config.patch_size)?, image: s.image, label: s.label })
        })
        .collect()
}

/// Index of `label` when `scores` are sorted descending, ties broken by class index.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores.iter().enumerate().filter(|(j, v)| **v > s || (**v == s && *j < label)).count()
}

/// Losses and accuracy of one step, averaged over its samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub cls_loss: f64,
    pub tl_loss: f64,
    pub top1: f64,
    pub top5: f64,
}

struct SampleResult {
    grads: Vec<f64>,
    loss: f64,
    cls: f64,
    tl: f64,
    rank: usize,
}

fn sample_gradient(model: &DeMansia, ex: &Example, beta: f64, n_params: usize) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let logits = model.record(&mut tape, &ex.image)?;
    let terms = record_total_loss(&mut tape, logits.class, ex.label, logits.patch, &ex.targets, beta)?;
    let loss = tape.value(terms.total).item();
    if !loss.is_finite() {
        let at = tape.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite(at));
    }
    let g = tape.backward(terms.total)?;
    let mut grads = Vec::with_capacity(n_params);
    for (name, t) in model.named_params() {
        match g.wrt(t) {
            Some(d) => {
                if let Some(k) = d.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}[{k}]")));
                }
                grads.extend_from_slice(d);
            }
            None => grads.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    Ok(SampleResult {
        grads,
        loss,
        cls: tape.value(terms.cls).item(),
        tl: tape.value(terms.tl).item(),
        rank: rank_of(tape.value(logits.class).data(), ex.label),
    })
}

/// Mean gradient over `batch`; per-sample passes run in parallel and are
/// reduced in sample order, so results do not depend on the thread count.
pub fn batch_gradient(model: &DeMansia, batch: &[&Example], beta: f64) -> Result<(Vec<f64>, StepStats)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n_params = model.parameter_count();
    let results: Vec<SampleResult> =
        batch.par_iter().map(|ex| sample_gradient(model, ex, beta, n_params)).collect::<Result<_>>()?;
    let mut grads = vec![0.0; n_params];
    let mut stats = StepStats::default();
    for r in &results {
        for (a, b) in grads.iter_mut().zip(&r.grads) {
            *a += b;
        }
        stats.loss += r.loss;
        stats.cls_loss += r.cls;
        stats.tl_loss += r.tl;
        stats.top1 += (r.rank < 1) as u8 as f64;
        stats.top5 += (r.rank < 5) as u8 as f64;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    stats.loss *= inv;
    stats.cls_loss *= inv;
    stats.tl_loss *= inv;
    stats.top1 *= inv;
    stats.top5 *= inv;
    Ok((grads, stats))
}

/// Forward, objective, backward and one optimizer update.
pub fn train_step(
    model: &mut DeMansia,
    opt: &mut Optimizer,
    batch: &[&Example],
    beta: f64,
    lr: f64,
) -> Result<StepStats> {
    let (grads, stats) = batch_gradient(model, batch, beta)?;
    opt.apply(model, &grads, lr)?;
    Ok(stats)
}

/// Top-k accuracies (as fractions) and mean cross entropy of the ranked scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

/// Ranks fused predictions when `fusion` is set, class logits otherwise.
pub fn evaluate(model: &DeMansia, examples: &[Example], fusion: bool) -> Result<Metrics> {
    let (plain, fused) = evaluate_both(model, examples)?;
    Ok(if fusion { fused } else { plain })
}

/// Class-logit and fused metrics from one forward pass per example.
pub fn evaluate_both(model: &DeMansia, examples: &[Example]) -> Result<(Metrics, Metrics)> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let score = |scores: &Tensor, label: usize| -> Result<(usize, f64)> {
        let loss = numerics::cross_entropy(scores, Target::Class(label))?;
        Ok((rank_of(scores.data(), label), loss))
    };
    let per: Vec<[(usize, f64); 2]> = examples
        .par_iter()
        .map(|ex| {
            let (class, patch) = model.forward(&ex.image)?;
            let fused = predict(&class, &patch)?;
            Ok([score(&class, ex.label)?, score(&fused, ex.label)?])
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let summarize = |j: usize| Metrics {
        top1: per.iter().filter(|p| p[j].0 < 1).count() as f64 / n,
        top5: per.iter().filter(|p| p[j].0 < 5).count() as f64 / n,
        loss: per.iter().map(|p| p[j].1).sum::<f64>() / n,
    };
    Ok((summarize(0), summarize(1)))
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub stats: StepStats,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,train_loss,cls_loss,tl_loss,top1,top5";
pub const EVAL_HEADER: &str = "epoch,step,split,fusion,top1,top5,loss";

impl StepRecord {
    pub fn csv(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            g6(self.lr),
            g6(s.loss),
            g6(s.cls_loss),
            g6(s.tl_loss),
            g6(s.top1),
            g6(s.top5)
        )
    }
}

/// Held-out results at the end of an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    pub test: Metrics,
    pub test_fused: Metrics,
}

/// Owns the model, EMA shadow, optimizer and data for one run.
pub struct Trainer {
    pub model_config: DeMansiaConfig,
    pub cfg: TrainConfig,
    pub model: DeMansia,
    pub ema: EmaState,
    pub opt: Optimizer,
    pub step: usize,
    pub epoch: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    order_rng: ChaCha8Rng,
}

impl Trainer {
    /// Builds the model from `cfg.seed`; training data are stream indices
    /// `0..train_samples`, held-out data the indices right after them.
    pub fn new(model_config: DeMansiaConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DeMansia::new(model_config.clone(), cfg.seed)?;
        let train = synth_examples(cfg.seed, 0, cfg.train_samples, &model_config)?;
        let test = synth_examples(cfg.seed, cfg.train_samples, cfg.test_samples, &model_config)?;
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(1);
        Ok(Self {
            ema: EmaState::from_model(&model),
            opt: Optimizer::new(&model, cfg.optimizer, cfg.weight_decay),
            model_config,
            model,
            cfg,
            step: 0,
            epoch: 0,
            train,
            test,
            order_rng,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size * self.cfg.grad_accum)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || (self.cfg.max_steps > 0 && self.step >= self.cfg.max_steps)
    }

    /// Trains one epoch (or until `max_steps`), then updates the EMA and
    /// evaluates the live parameters on the held-out set.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<EpochSummary> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.order_rng);
        let per_update = self.cfg.batch_size * self.cfg.grad_accum;
        let steps = self.steps_per_epoch();
        for (i, chunk) in order.chunks(per_update).enumerate() {
            if self.cfg.max_steps > 0 && self.step >= self.cfg.max_steps {
                break;
            }
            let lr = sgdr_lr(self.epoch as f64 + i as f64 / steps as f64, &self.cfg);
            let mut grads = vec![0.0; self.model.parameter_count()];
            let mut stats = StepStats::default();
            let micro: Vec<&[usize]> = chunk.chunks(self.cfg.batch_size).collect();
            for idx in &micro {
                let batch: Vec<&Example> = idx.iter().map(|&k| &self.train[k]).collect();
                let (g, s) = batch_gradient(&self.model, &batch, self.cfg.beta)?;
                let w = idx.len() as f64 / chunk.len() as f64;
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += w * b;
                }
                stats.loss += w * s.loss;
                stats.cls_loss += w * s.cls_loss;
                stats.tl_loss += w * s.tl_loss;
                stats.top1 += w * s.top1;
                stats.top5 += w * s.top5;
            }
            self.opt.apply(&mut self.model, &grads, lr)?;
            on_step(&StepRecord { step: self.step, epoch: self.epoch, lr, stats });
            self.step += 1;
        }
        ema_update(&mut self.ema, &self.model, self.cfg.ema_decay)?;
        let (test, test_fused) = if self.test.is_empty() {
            let none = Metrics { top1: f64::NAN, top5: f64::NAN, loss: f64::NAN };
            (none, none)
        } else {
            evaluate_both(&self.model, &self.test)?
        };
        let summary = EpochSummary { epoch: self.epoch, step: self.step, test, test_fused };
        self.epoch += 1;
        Ok(summary)
    }

    /// Model, EMA shadow, optimizer state and configuration as named tensors.
    pub fn checkpoint_records(&self) -> Vec<(String, Tensor)> {
        let params = self.model.named_params();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let mut out: Vec<(String, Tensor)> = params
            .into_iter()
            .map(|(n, t)| (format!("model.{n}"), Tensor::new(t.shape(), t.data().to_vec()).expect("shape")))
            .collect();
        out.extend(self.ema.shadow.iter().map(|(n, t)| (format!("ema.{n}"), t.clone())));
        out.extend(self.opt.records(&names));
        out.extend(config_records(&self.model_config));
        out.push(("train.epoch".into(), Tensor::scalar(self.epoch as f64)));
        out.push(("train.step".into(), Tensor::scalar(self.step as f64)));
        out
    }
}

/// Model configuration as rank-0 tensors plus a `4 × 3` stem table.
pub fn config_records(c: &DeMansiaConfig) -> Vec<(String, Tensor)> {
    let scalars = [
        ("d_model", c.d_model),
        ("n_layers", c.n_layers),
        ("image_size", c.image_size),
        ("patch_size", c.patch_size),
        ("n_classes", c.n_classes),
        ("n_state", c.n_state),
        ("in_channels", c.in_channels),
    ];
    let mut out: Vec<(String, Tensor)> =
        scalars.iter().map(|(n, v)| (format!("config.{n}"), Tensor::scalar(*v as f64))).collect();
    let stem = c.conv_stem.iter().flat_map(|s| [s.channels as f64, s.kernel as f64, s.stride as f64]).collect();
    out.push(("config.conv_stem".into(), Tensor::new(&[4, 3], stem).expect("4x3")));
    out
}

/// Rebuilds the model configuration from checkpoint records.
pub fn config_from_records(records: &[(String, Tensor)]) -> Result<DeMansiaConfig> {
    let get = |name: &str| -> Result<&Tensor> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Corrupt(format!("missing record {name}")))
    };
    let int = |name: &str| -> Result<usize> {
        let t = get(&format!("config.{name}"))?;
        let v = t.data().first().copied().unwrap_or(f64::NAN);
        if t.numel() != 1 || !(v >= 0.0) || v.fract() != 0.0 {
            return Err(Error::Corrupt(format!("config.{name} is not a count")));
        }
        Ok(v as usize)
    };
    let stem = get("config.conv_stem")?;
    if stem.shape() != [4, 3] || stem.data().iter().any(|v| !(*v >= 0.0) || v.fract() != 0.0) {
        return Err(Error::Corrupt("config.conv_stem is not a 4x3 table of counts".into()));
    }
    let s = stem.data();
    let config = DeMansiaConfig {
        d_model: int("d_model")?,
        n_layers: int("n_layers")?,
        image_size: int("image_size")?,
        patch_size: int("patch_size")?,
        n_classes: int("n_classes")?,
        n_state: int("n_state")?,
        in_channels: int("in_channels")?,
        conv_stem: std::array::from_fn(|i| {
            crate::model::StemStage::new(s[3 * i] as usize, s[3 * i + 1] as usize, s[3 * i + 2] as usize)
        }),
    };
    config.validate().map_err(|e| Error::Corrupt(format!("stored config is invalid: {e}")))?;
    Ok(config)
}

/// Loads `prefix.*` records (`model` or `ema`) into a fresh model.
pub fn model_from_records(records: &[(String, Tensor)], prefix: &str) -> Result<DeMansia> {
    let config = config_from_records(records)?;
    let mut model = DeMansia::new(config, 0)?;
    for (name, t) in model.named_params_mut() {
        let key = format!("{prefix}.{name}");
        let (_, src) =
            records.iter().find(|(n, _)| *n == key).ok_or_else(|| Error::Corrupt(format!("missing record {key}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Corrupt(format!("{key} has shape {:?}, expected {:?}", src.shape(), t.shape())));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(model)
}

/// Output files of a run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub eval: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self { metrics: dir.join("metrics.csv"), eval: dir.join("eval.csv"), checkpoint: dir.join("checkpoint.dmns") }
    }
}

fn eval_rows(s: &EpochSummary) -> String {
    let row = |fusion: &str, m: &Metrics| {
        format!("{},{},test,{fusion},{},{},{}\n", s.epoch, s.step, g6(m.top1), g6(m.top5), g6(m.loss))
    };
    row("off", &s.test) + &row("on", &s.test_fused)
}

/// Runs every epoch, appending to the metrics and evaluation logs and
/// rewriting the checkpoint after each epoch. Returns the trained state.
pub fn run(
    model_config: DeMansiaConfig,
    cfg: TrainConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<Trainer> {
    fs::create_dir_all(out_dir)?;
    let files = RunArtifacts::in_dir(out_dir);
    let mut metrics = BufWriter::new(fs::File::create(&files.metrics)?);
    let mut eval = BufWriter::new(fs::File::create(&files.eval)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    writeln!(eval, "{EVAL_HEADER}")?;
    let mut trainer = Trainer::new(model_config, cfg)?;
    while !trainer.finished() {
        let mut io_err = None;
        let summary = trainer.run_epoch(|r| {
            if let Err(e) = writeln!(metrics, "{}", r.csv()) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        metrics.flush()?;
        eval.write_all(eval_rows(&summary).as_bytes())?;
        eval.flush()?;
        checkpoint::save(&files.checkpoint, &trainer.checkpoint_records())?;
        on_epoch(&summary);
    }
    Ok(trainer)
}
