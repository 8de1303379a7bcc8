//! DeMansia: convolutional stem, centered class token, a stack of
//! bidirectional blocks and two classification heads.

mod config;

pub use config::{default_stem, stride_schedule, DeMansiaConfig, StemStage, PRESETS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{VimBlockParams, NORM_EPS};
use crate::error::{dim_err, Result};
use crate::module::{nest, Module};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct StemConv {
    /// `out × (k·k·in)`, patch entries ordered `(ky, kx, c)`.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct DeMansia {
    pub config: DeMansiaConfig,
    pub stem: Vec<StemConv>,
    pub t_cls: Tensor,
    /// `(J+1) × d_model`
    pub pos_embed: Tensor,
    pub blocks: Vec<VimBlockParams>,
    pub norm: Tensor,
    /// `n_classes × d_model`, applied to the class token only.
    pub class_w: Tensor,
    pub class_b: Tensor,
    /// `n_classes × d_model`, shared by every patch token.
    pub aux_w: Tensor,
    pub aux_b: Tensor,
}

/// Logit variables of one recorded forward pass.
pub struct Logits {
    /// `1 × n_classes`
    pub class: Var,
    /// `J × n_classes`
    pub patch: Var,
}

impl DeMansia {
    pub fn new(config: DeMansiaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geoms = config.stem_geometry()?;
        let stem = geoms
            .iter()
            .map(|g| {
                let bound = 1.0 / (g.patch_len() as f64).sqrt();
                StemConv {
                    w: Tensor::uniform(&[g.out_ch, g.patch_len()], bound, &mut rng).with_grad(),
                    b: Tensor::uniform(&[g.out_ch], bound, &mut rng).with_grad(),
                }
            })
            .collect();
        let (d, c, j) = (config.d_model, config.n_classes, config.n_patches());
        let t_cls = Tensor::normal(&[d], 0.02, &mut rng).with_grad();
        let pos_embed = Tensor::normal(&[j + 1, d], 0.02, &mut rng).with_grad();
        let blocks = (0..config.n_layers).map(|_| VimBlockParams::init(d, config.n_state, &mut rng)).collect();
        let class_w = Tensor::normal(&[c, d], 0.02, &mut rng).with_grad();
        let aux_w = Tensor::normal(&[c, d], 0.02, &mut rng).with_grad();
        Ok(Self {
            config,
            stem,
            t_cls,
            pos_embed,
            blocks,
            norm: Tensor::full(&[d], 1.0).with_grad(),
            class_w,
            class_b: Tensor::zeros(&[c]).with_grad(),
            aux_w,
            aux_b: Tensor::zeros(&[c]).with_grad(),
        })
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let expect = [c.image_size, c.image_size, c.in_channels];
        if image.shape() != expect {
            return Err(dim_err("image", image.shape(), &expect));
        }
        Ok(())
    }

    /// Stem on an `H×W×C` image: `J × d_model` patch embeddings.
    pub fn record_stem(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let geoms = self.config.stem_geometry()?;
        let mut x = tape.constant(image.clone());
        for (i, (g, conv)) in geoms.iter().zip(&self.stem).enumerate() {
            let w = tape.param(&conv.w);
            let b = tape.param(&conv.b);
            x = tape.conv2d(x, w, b, *g)?;
            if i + 1 < geoms.len() {
                x = tape.silu(x);
            }
        }
        Ok(x)
    }

    /// Inserts the class token at the center and adds positional embeddings.
    pub fn record_assemble(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let j = self.config.n_patches();
        let idx = self.config.cls_index();
        let cls = tape.param(&self.t_cls);
        let cls = tape.reshape(cls, &[1, self.config.d_model])?;
        let mut parts = Vec::with_capacity(3);
        if idx > 0 {
            parts.push(tape.slice_rows(patches, 0, idx)?);
        }
        parts.push(cls);
        if j > idx {
            parts.push(tape.slice_rows(patches, idx, j - idx)?);
        }
        let seq = tape.concat_rows(&parts)?;
        let pos = tape.param(&self.pos_embed);
        tape.add(seq, pos)
    }

    pub fn record(&self, tape: &mut Tape, image: &Tensor) -> Result<Logits> {
        let patches = self.record_stem(tape, image)?;
        let mut x = self.record_assemble(tape, patches)?;
        for block in &self.blocks {
            x = block.record(tape, x)?;
        }
        let scale = tape.param(&self.norm);
        let x = tape.rms_norm(x, scale, NORM_EPS)?;

        let (j, idx) = (self.config.n_patches(), self.config.cls_index());
        let cls_row = tape.slice_rows(x, idx, 1)?;
        let mut rows = Vec::with_capacity(2);
        if idx > 0 {
            rows.push(tape.slice_rows(x, 0, idx)?);
        }
        if j > idx {
            rows.push(tape.slice_rows(x, idx + 1, j - idx)?);
        }
        let patch_rows = tape.concat_rows(&rows)?;

        let (cw, cb) = (tape.param(&self.class_w), tape.param(&self.class_b));
        let class = tape.linear(cls_row, cw, Some(cb))?;
        let (aw, ab) = (tape.param(&self.aux_w), tape.param(&self.aux_b));
        let patch = tape.linear(patch_rows, aw, Some(ab))?;
        Ok(Logits { class, patch })
    }

    /// `(class logits [n_classes], patch logits [J × n_classes])`.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let l = self.record(&mut tape, image)?;
        let class = tape.value(l.class).reshape(&[self.config.n_classes])?;
        Ok((class, tape.value(l.patch).clone()))
    }

    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.record_stem(&mut tape, image)?;
        Ok(tape.value(v).clone())
    }

    /// Fused prediction for an image.
    pub fn predict_image(&self, image: &Tensor) -> Result<Tensor> {
        let (c, p) = self.forward(image)?;
        predict(&c, &p)
    }
}

impl Module for DeMansia {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, s) in self.stem.iter().enumerate() {
            v.push((format!("stem.{i}.w"), &s.w));
            v.push((format!("stem.{i}.b"), &s.b));
        }
        v.push(("t_cls".into(), &self.t_cls));
        v.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(nest(&format!("blocks.{i}"), b.named_params()));
        }
        v.push(("norm".into(), &self.norm));
        v.push(("class_head.w".into(), &self.class_w));
        v.push(("class_head.b".into(), &self.class_b));
        v.push(("aux_head.w".into(), &self.aux_w));
        v.push(("aux_head.b".into(), &self.aux_b));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, s) in self.stem.iter_mut().enumerate() {
            v.push((format!("stem.{i}.w"), &mut s.w));
            v.push((format!("stem.{i}.b"), &mut s.b));
        }
        v.push(("t_cls".into(), &mut self.t_cls));
        v.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(nest(&format!("blocks.{i}"), b.named_params_mut()));
        }
        v.push(("norm".into(), &mut self.norm));
        v.push(("class_head.w".into(), &mut self.class_w));
        v.push(("class_head.b".into(), &mut self.class_b));
        v.push(("aux_head.w".into(), &mut self.aux_w));
        v.push(("aux_head.b".into(), &mut self.aux_b));
        v
    }
}

/// Inserts `t_cls` at row `J/2` of the patch sequence and adds `pos_embed`.
pub fn assemble_sequence(patches: &Tensor, t_cls: &Tensor, pos_embed: &Tensor) -> Result<Tensor> {
    let (j, d) = patches.dims2()?;
    if t_cls.numel() != d || pos_embed.shape() != [j + 1, d] {
        return Err(dim_err("assemble_sequence", patches.shape(), pos_embed.shape()));
    }
    let idx = j / 2;
    let mut data = Vec::with_capacity((j + 1) * d);
    for i in 0..=j {
        let row = match i.cmp(&idx) {
            std::cmp::Ordering::Less => patches.row(i),
            std::cmp::Ordering::Equal => t_cls.data(),
            std::cmp::Ordering::Greater => patches.row(i - 1),
        };
        data.extend(row.iter().zip(pos_embed.row(i)).map(|(a, b)| a + b));
    }
    Tensor::new(&[j + 1, d], data)
}

/// `class + 0.5 · max_j patch[j]`, the maximum taken per class.
pub fn predict(class_logits: &Tensor, patch_logits: &Tensor) -> Result<Tensor> {
    let (j, c) = patch_logits.dims2()?;
    if class_logits.numel() != c {
        return Err(dim_err("predict", class_logits.shape(), patch_logits.shape()));
    }
    let data = (0..c)
        .map(|k| {
            let m = (0..j).map(|r| patch_logits.at(r, k)).fold(f64::NEG_INFINITY, f64::max);
            if j == 0 {
                class_logits.data()[k]
            } else {
                class_logits.data()[k] + 0.5 * m
            }
        })
        .collect();
    Tensor::new(&[c], data)
}
