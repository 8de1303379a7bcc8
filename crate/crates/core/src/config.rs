//! Flat `key = value` run configuration: model fields plus training fields.
//!
//! `preset` is applied first wherever it appears; the other keys are applied
//! in order, later values winning. When `d_model` or `patch_size` changes and
//! `conv_stem` is not given, the stem is rebuilt with [`default_stem`].

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::model::{default_stem, DeMansiaConfig, StemStage};
use crate::training::{OptimizerKind, TrainConfig};

pub const MODEL_KEYS: [&str; 9] =
    ["preset", "d_model", "n_layers", "image_size", "patch_size", "n_classes", "n_state", "in_channels", "conv_stem"];

pub const TRAIN_KEYS: [&str; 14] = [
    "lr_max",
    "weight_decay",
    "t0",
    "t_mult",
    "ema_decay",
    "batch_size",
    "epochs",
    "seed",
    "beta",
    "train_samples",
    "test_samples",
    "grad_accum",
    "max_steps",
    "optimizer",
];

pub fn is_key(key: &str) -> bool {
    MODEL_KEYS.contains(&key) || TRAIN_KEYS.contains(&key)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DeMansiaConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: DeMansiaConfig::micro(), train: TrainConfig::default() }
    }
}

/// Splits config text into `(key, value)` pairs, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !is_key(k) {
            return Err(Error::UnknownKey(k.to_string()));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

/// Parses `c,k,s c,k,s c,k,s c,k,s` (stages separated by spaces or `;`).
pub fn parse_stem(v: &str) -> Result<[StemStage; 4]> {
    let stages: Vec<&str> = v.split([' ', ';']).filter(|s| !s.is_empty()).collect();
    if stages.len() != 4 {
        return Err(Error::Config(format!("conv_stem: expected 4 stages, got {}", stages.len())));
    }
    let mut out = [StemStage::new(0, 0, 0); 4];
    for (slot, st) in out.iter_mut().zip(stages) {
        let f: Vec<usize> = st.split(',').map(|x| num("conv_stem", x.trim())).collect::<Result<_>>()?;
        if f.len() != 3 {
            return Err(Error::Config(format!("conv_stem: stage `{st}` is not channels,kernel,stride")));
        }
        *slot = StemStage::new(f[0], f[1], f[2]);
    }
    Ok(out)
}

pub fn format_stem(stem: &[StemStage; 4]) -> String {
    stem.iter().map(|s| format!("{},{},{}", s.channels, s.kernel, s.stride)).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some((_, name)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.model = DeMansiaConfig::preset(name)?;
        }
        let base = (cfg.model.d_model, cfg.model.patch_size);
        let mut explicit_stem = false;
        for (k, v) in pairs {
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match k.as_str() {
                "preset" => {}
                "d_model" => m.d_model = num(k, v)?,
                "n_layers" => m.n_layers = num(k, v)?,
                "image_size" => m.image_size = num(k, v)?,
                "patch_size" => m.patch_size = num(k, v)?,
                "n_classes" => m.n_classes = num(k, v)?,
                "n_state" => m.n_state = num(k, v)?,
                "in_channels" => m.in_channels = num(k, v)?,
                "conv_stem" => {
                    m.conv_stem = parse_stem(v)?;
                    explicit_stem = true;
                }
                "lr_max" => t.lr_max = num(k, v)?,
                "weight_decay" => t.weight_decay = num(k, v)?,
                "t0" => t.t0 = num(k, v)?,
                "t_mult" => t.t_mult = num(k, v)?,
                "ema_decay" => t.ema_decay = num(k, v)?,
                "batch_size" => t.batch_size = num(k, v)?,
                "epochs" => t.epochs = num(k, v)?,
                "seed" => t.seed = num(k, v)?,
                "beta" => t.beta = num(k, v)?,
                "train_samples" => t.train_samples = num(k, v)?,
                "test_samples" => t.test_samples = num(k, v)?,
                "grad_accum" => t.grad_accum = num(k, v)?,
                "max_steps" => t.max_steps = num(k, v)?,
                "optimizer" => t.optimizer = OptimizerKind::parse(v)?,
                other => return Err(Error::UnknownKey(other.to_string())),
            }
        }
        if !explicit_stem && (cfg.model.d_model, cfg.model.patch_size) != base {
            cfg.model.conv_stem = default_stem(cfg.model.d_model, cfg.model.patch_size)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Every key with its resolved value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("d_model", m.d_model.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("n_classes", m.n_classes.to_string());
        kv("n_state", m.n_state.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("conv_stem", format_stem(&m.conv_stem));
        kv("lr_max", g6(t.lr_max));
        kv("weight_decay", g6(t.weight_decay));
        kv("t0", g6(t.t0));
        kv("t_mult", g6(t.t_mult));
        kv("ema_decay", g6(t.ema_decay));
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("beta", g6(t.beta));
        kv("train_samples", t.train_samples.to_string());
        kv("test_samples", t.test_samples.to_string());
        kv("grad_accum", t.grad_accum.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("optimizer", t.optimizer.name().to_string());
        s
    }
}
