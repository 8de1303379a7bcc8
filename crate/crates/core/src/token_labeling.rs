//! Dense per-pixel class maps, patch-level soft targets, the token-labeling
//! objective and a procedural shapes dataset with exact dense labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{self, kernels, Tape, Target, Tensor, Var};

/// Per-pixel class distributions, `height × width × n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLabelMap {
    scores: Tensor,
}

impl DenseLabelMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.rank() != 3 {
            return Err(Error::Validation(format!("label map must be H×W×C, got {:?}", scores.shape())));
        }
        let c = scores.shape()[2];
        for (p, px) in scores.data().chunks(c).enumerate() {
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || px.iter().any(|v| *v < 0.0) {
                return Err(Error::Validation(format!("pixel {p} is not a distribution (sum {sum})")));
            }
        }
        Ok(Self { scores })
    }

    /// Map assigning each pixel all of its mass to `labels[pixel]`.
    pub fn one_hot(height: usize, width: usize, n_classes: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(dim_err("one_hot labels", &[height, width], &[labels.len()]));
        }
        let mut scores = Tensor::zeros(&[height, width, n_classes]);
        for (p, &k) in labels.iter().enumerate() {
            if k >= n_classes {
                return Err(Error::Validation(format!("label {k} out of range for {n_classes} classes")));
            }
            scores.data_mut()[p * n_classes + k] = 1.0;
        }
        Ok(Self { scores })
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let c = self.n_classes();
        let o = (y * self.width() + x) * c;
        &self.scores.data()[o..o + c]
    }
}

/// One soft target per patch token, `J × n_classes`, patches in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets {
    pub targets: Tensor,
}

impl PatchTargets {
    pub fn len(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Averages the pixel distributions inside each `patch × patch` cell.
pub fn make_patch_targets(map: &DenseLabelMap, patch: usize) -> Result<PatchTargets> {
    let (h, w, c) = (map.height(), map.width(), map.n_classes());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("label map {h}x{w} is not divisible into {patch}-pixel patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Tensor::zeros(&[gh * gw, c]);
    let inv = 1.0 / (patch * patch) as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out.data_mut()[(gy * gw + gx) * c..(gy * gw + gx + 1) * c];
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    for (r, v) in row.iter_mut().zip(map.pixel(y, x)) {
                        *r += v;
                    }
                }
            }
            row.iter_mut().for_each(|v| *v *= inv);
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(PatchTargets { targets: out })
}

/// Mean soft-target cross entropy over the patch tokens.
pub fn token_label_loss(patch_logits: &Tensor, targets: &PatchTargets) -> Result<f64> {
    let (j, c) = patch_logits.dims2()?;
    if targets.targets.shape() != [j, c] {
        return Err(dim_err("token_label_loss", patch_logits.shape(), targets.targets.shape()));
    }
    let mut sum = 0.0;
    for r in 0..j {
        let logits = Tensor::new(&[c], patch_logits.row(r).to_vec())?;
        sum += numerics::cross_entropy(&logits, Target::Soft(targets.targets.row(r)))?;
    }
    Ok(sum / j as f64)
}

/// `H(class) + β·token_label_loss`; with `β = 0` the class term is returned unchanged.
pub fn total_loss(
    class_logits: &Tensor,
    class: usize,
    patch_logits: &Tensor,
    targets: &PatchTargets,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let ce = numerics::cross_entropy(class_logits, Target::Class(class))?;
    if beta == 0.0 {
        return Ok(ce);
    }
    Ok(ce + beta * token_label_loss(patch_logits, targets)?)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("token-labeling weight must be non-negative, got {beta}")));
    }
    Ok(())
}

/// Loss nodes recorded for one sample.
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub tl: Var,
}

/// Records the objective; `total` is `cls` itself when `β = 0`.
pub fn record_total_loss(
    tape: &mut Tape,
    class_logits: Var,
    class: usize,
    patch_logits: Var,
    targets: &PatchTargets,
    beta: f64,
) -> Result<LossTerms> {
    check_beta(beta)?;
    let cls = tape.cross_entropy(class_logits, Target::Class(class))?;
    let rows = tape.cross_entropy_rows(patch_logits, &targets.targets)?;
    let tl = tape.mean(rows);
    let total = if beta == 0.0 {
        cls
    } else {
        let scaled = tape.scale(tl, beta);
        tape.add(cls, scaled)?
    };
    Ok(LossTerms { total, cls, tl })
}

/// Shape kinds drawn for classes `1..`; class 0 is a plain textured background.
pub const SHAPES: [&str; 10] =
    ["background", "disk", "square", "triangle", "ring", "plus", "cross", "hbar", "vbar", "diamond"];

/// One generated example: `H×W×3` image in `[0, 1]`, its class and dense map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub map: DenseLabelMap,
}

/// Whether normalized offset `(dx, dy)` from the shape center lies inside `kind`.
fn inside(kind: usize, dx: f64, dy: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match kind {
        1 => dx * dx + dy * dy <= 1.0,
        2 => ax.max(ay) <= 0.8,
        3 => (-0.85..=0.85).contains(&dy) && ax <= 0.95 * (dy + 0.85) / 1.7,
        4 => (0.3..=1.0).contains(&(dx * dx + dy * dy)),
        5 => (ax <= 0.28 && ay <= 1.0) || (ay <= 0.28 && ax <= 1.0),
        6 => (ax - ay).abs() <= 0.3 && ax.max(ay) <= 0.9,
        7 => ay <= 0.3 && ax <= 1.0,
        8 => ax <= 0.3 && ay <= 1.0,
        9 => ax + ay <= 1.0,
        _ => false,
    }
}

/// Deterministic sample `index` of the stream identified by `seed`.
pub fn synth_sample(seed: u64, index: u64, image_size: usize, n_classes: usize) -> Result<Sample> {
    if !(2..=SHAPES.len()).contains(&n_classes) {
        return Err(Error::Config(format!("synthetic shapes support 2..={} classes, got {n_classes}", SHAPES.len())));
    }
    if image_size < 8 {
        return Err(Error::Config(format!("synthetic images need at least 8 pixels, got {image_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let label = (index % n_classes as u64) as usize;
    let s = image_size as f64;

    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.35));
    let freq = rng.random_range(0.2..0.9);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (freq * angle.cos(), freq * angle.sin());

    let radius = rng.random_range(0.24..0.36) * s;
    let margin = radius + 1.0;
    let cx = rng.random_range(margin..=(s - margin).max(margin));
    let cy = rng.random_range(margin..=(s - margin).max(margin));
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));

    let mut image = Tensor::zeros(&[image_size, image_size, 3]);
    let mut labels = vec![0usize; image_size * image_size];
    for y in 0..image_size {
        for x in 0..image_size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = 0.5 + 0.5 * (fx * px + fy * py + phase).sin();
            let p = y * image_size + x;
            let shape = label > 0 && inside(label, (px - cx) / radius, (py - cy) / radius);
            for ch in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                let v = if shape { color[ch] + noise } else { tint[ch] * (0.6 + 0.4 * stripe) + noise };
                image.data_mut()[p * 3 + ch] = v.clamp(0.0, 1.0);
            }
            if shape {
                labels[p] = label;
            }
        }
    }
    let map = DenseLabelMap::one_hot(image_size, image_size, n_classes, &labels)?;
    Ok(Sample { image, label, map })
}

/// Samples `0..n_samples` of the stream; class of sample `i` is `i mod n_classes`.
pub fn synth_dense_dataset(seed: u64, n_samples: usize, image_size: usize, n_classes: usize) -> Result<Vec<Sample>> {
    synth_range(seed, 0, n_samples, image_size, n_classes)
}

/// Samples `start..start + count` of the stream, generated in parallel.
pub fn synth_range(seed: u64, start: usize, count: usize, image_size: usize, n_classes: usize) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    (start..start + count).into_par_iter().map(|i| synth_sample(seed, i as u64, image_size, n_classes)).collect()
}

/// Entropy of each target row, the lower bound of [`token_label_loss`].
pub fn target_entropy(targets: &PatchTargets) -> f64 {
    let (j, _) = targets.targets.dims2().expect("rank 2");
    let total: f64 =
        (0..j).map(|r| -targets.targets.row(r).iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()).sum();
    total / j as f64
}

/// Probability rows of patch logits, for diagnostics.
pub fn patch_probabilities(patch_logits: &Tensor) -> Result<Tensor> {
    let (j, c) = patch_logits.dims2()?;
    let mut out = patch_logits.clone();
    for r in 0..j {
        kernels::softmax_in_place(&mut out.data_mut()[r * c..(r + 1) * c]);
    }
    Ok(out)
}
