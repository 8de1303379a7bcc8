mod common;

use common::{grad_check, rng};
use demansia::model::{assemble_sequence, default_stem, predict, DeMansia, DeMansiaConfig, StemStage, PRESETS};
use demansia::numerics::{Tape, Target, Tensor};
use demansia::Module;
use proptest::prelude::*;

fn image(cfg: &DeMansiaConfig, seed: u64) -> Tensor {
    Tensor::uniform(&[cfg.image_size, cfg.image_size, cfg.in_channels], 1.0, &mut rng(seed))
}

fn small_config() -> DeMansiaConfig {
    DeMansiaConfig {
        d_model: 8,
        n_layers: 1,
        image_size: 8,
        patch_size: 2,
        n_classes: 3,
        n_state: 2,
        in_channels: 3,
        conv_stem: default_stem(8, 2).unwrap(),
    }
}

#[test]
fn micro_shapes() {
    let cfg = DeMansiaConfig::micro();
    assert_eq!(cfg.n_patches(), 64);
    let m = DeMansia::new(cfg.clone(), 1).unwrap();
    let (c, p) = m.forward(&image(&cfg, 2)).unwrap();
    assert_eq!(c.shape(), &[10]);
    assert_eq!(p.shape(), &[64, 10]);
    assert!(m.forward(&Tensor::zeros(&[32, 32, 1])).is_err());
}

#[test]
fn zero_heads_give_zero_logits() {
    let cfg = DeMansiaConfig::micro();
    let mut m = DeMansia::new(cfg.clone(), 3).unwrap();
    for t in [&mut m.class_w, &mut m.class_b, &mut m.aux_w, &mut m.aux_b] {
        t.data_mut().fill(0.0);
    }
    let (c, p) = m.forward(&image(&cfg, 4)).unwrap();
    assert!(c.data().iter().chain(p.data()).all(|v| *v == 0.0));
}

#[test]
fn different_images_give_different_logits() {
    let cfg = DeMansiaConfig::micro();
    let m = DeMansia::new(cfg.clone(), 5).unwrap();
    let (a, _) = m.forward(&image(&cfg, 6)).unwrap();
    let (b, _) = m.forward(&image(&cfg, 7)).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn zero_image_zero_bias_embeds_to_zero() {
    let cfg = DeMansiaConfig::micro();
    let mut m = DeMansia::new(cfg.clone(), 8).unwrap();
    m.stem.iter_mut().for_each(|s| s.b.data_mut().fill(0.0));
    let e = m.patch_embed(&Tensor::zeros(&[32, 32, 3])).unwrap();
    assert_eq!(e.shape(), &[64, 32]);
    assert!(e.data().iter().all(|v| *v == 0.0));
}

#[test]
fn stride_two_stem_at_224_gives_196_tokens() {
    let cfg = DeMansiaConfig {
        d_model: 8,
        n_layers: 0,
        image_size: 224,
        patch_size: 16,
        n_classes: 10,
        n_state: 2,
        in_channels: 3,
        conv_stem: default_stem(8, 16).unwrap(),
    };
    assert!(cfg.conv_stem.iter().all(|s| s.stride == 2));
    let m = DeMansia::new(cfg.clone(), 9).unwrap();
    assert_eq!(m.patch_embed(&image(&cfg, 10)).unwrap().shape(), &[196, 8]);
}

/// Clamped input interval of each final grid cell, traced back through every stage.
fn receptive_field(cfg: &DeMansiaConfig, cell: usize) -> (usize, usize) {
    let mut sizes = vec![cfg.image_size];
    for st in &cfg.conv_stem {
        let s = *sizes.last().unwrap();
        sizes.push((s + 2 * st.pad() - st.kernel) / st.stride + 1);
    }
    let (mut lo, mut hi) = (cell as isize, cell as isize);
    for (i, st) in cfg.conv_stem.iter().enumerate().rev() {
        let n = sizes[i] as isize;
        lo = (lo * st.stride as isize - st.pad() as isize).max(0);
        hi = (hi * st.stride as isize - st.pad() as isize + st.kernel as isize - 1).min(n - 1);
    }
    (lo as usize, hi as usize)
}

#[test]
fn single_pixel_reaches_only_its_receptive_field() {
    let cfg = DeMansiaConfig::micro();
    let mut m = DeMansia::new(cfg.clone(), 11).unwrap();
    m.stem.iter_mut().for_each(|s| s.b.data_mut().fill(0.0));
    for (py, px) in [(0, 0), (13, 21), (31, 16)] {
        let mut img = Tensor::zeros(&[32, 32, 3]);
        img.data_mut()[(py * 32 + px) * 3..(py * 32 + px) * 3 + 3].fill(1.0);
        let e = m.patch_embed(&img).unwrap();
        for gy in 0..8 {
            for gx in 0..8 {
                let (ylo, yhi) = receptive_field(&cfg, gy);
                let (xlo, xhi) = receptive_field(&cfg, gx);
                let covered = (ylo..=yhi).contains(&py) && (xlo..=xhi).contains(&px);
                let nonzero = e.row(gy * 8 + gx).iter().any(|v| *v != 0.0);
                assert_eq!(covered, nonzero, "pixel ({py},{px}) cell ({gy},{gx})");
            }
        }
    }
}

#[test]
fn assemble_examples() {
    let mut r = rng(12);
    let patches = Tensor::uniform(&[4, 3], 1.0, &mut r);
    let seq = assemble_sequence(&patches, &Tensor::zeros(&[3]), &Tensor::zeros(&[5, 3])).unwrap();
    assert_eq!(seq.row(0), patches.row(0));
    assert_eq!(seq.row(1), patches.row(1));
    assert_eq!(seq.row(2), &[0.0; 3]);
    assert_eq!(seq.row(3), patches.row(2));
    assert_eq!(seq.row(4), patches.row(3));

    let pos = Tensor::new(&[5, 3], (0..15).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
    let cls = Tensor::uniform(&[3], 1.0, &mut r);
    let seq = assemble_sequence(&patches, &cls, &pos).unwrap();
    let plain = assemble_sequence(&patches, &cls, &Tensor::zeros(&[5, 3])).unwrap();
    for (i, (a, b)) in seq.data().iter().zip(plain.data()).enumerate() {
        assert_eq!(a - b, pos.data()[i]);
    }
}

#[test]
fn tape_assembly_matches_eager() {
    let cfg = small_config();
    let m = DeMansia::new(cfg.clone(), 13).unwrap();
    let img = image(&cfg, 14);
    let patches = m.patch_embed(&img).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(patches.clone());
    let seq = m.record_assemble(&mut tape, p).unwrap();
    let eager = assemble_sequence(&patches, &m.t_cls, &m.pos_embed).unwrap();
    assert_eq!(tape.value(seq), &eager);
    assert_eq!(cfg.cls_index(), 8);
}

#[test]
fn predict_examples() {
    let c = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
    assert_eq!(predict(&c, &Tensor::zeros(&[5, 3])).unwrap(), c);

    let mut p = Tensor::full(&[4, 3], -0.5);
    p.data_mut()[2 * 3 + 1] = 2.0;
    let fused = predict(&Tensor::zeros(&[3]), &p).unwrap();
    assert_eq!(fused.data()[1], 1.0);

    let mut r = rng(15);
    let c = Tensor::uniform(&[6], 2.0, &mut r);
    let p = Tensor::uniform(&[9, 6], 2.0, &mut r);
    let fused = predict(&c, &p).unwrap();
    for k in 0..6 {
        let mut best = p.at(0, k);
        for j in 1..9 {
            if p.at(j, k) > best {
                best = p.at(j, k);
            }
        }
        assert_eq!(fused.data()[k], c.data()[k] + 0.5 * best);
    }
}

#[test]
fn micro_parameter_tally() {
    let cfg = DeMansiaConfig::micro();
    let m = DeMansia::new(cfg.clone(), 16).unwrap();
    let (d, di, n, c, j) = (32, 64, 16, 10, 64);
    let mut in_ch = 3;
    let mut stem = 0;
    for st in &cfg.conv_stem {
        stem += st.channels * st.kernel * st.kernel * in_ch + st.channels;
        in_ch = st.channels;
    }
    let branch = di * 4 + di + di * n + 2 * n * di + di + di;
    let block = d + 2 * di * d + d * di + 2 * branch;
    let heads = 2 * (c * d + c);
    let expect = stem + d + (j + 1) * d + 4 * block + d + heads;
    assert_eq!(m.parameter_count(), expect);
    assert_eq!(expect, 61_884);

    let mut zero = cfg.clone();
    zero.n_layers = 0;
    let z = DeMansia::new(zero, 16).unwrap();
    assert_eq!(z.parameter_count(), stem + d + (j + 1) * d + d + heads);
}

#[test]
fn tiny_parameter_count_near_table_value() {
    let m = DeMansia::new(DeMansiaConfig::preset("tiny").unwrap(), 0).unwrap();
    let count = m.parameter_count() as f64;
    let rel = (count - 8.06e6).abs() / 8.06e6;
    assert!(rel <= 0.10, "{count} params, {:.1}% off", rel * 100.0);
}

#[test]
fn every_preset_instantiates_with_consistent_shapes() {
    for name in PRESETS {
        let cfg = DeMansiaConfig::preset(name).unwrap();
        let geoms = cfg.stem_geometry().unwrap();
        assert_eq!(geoms.last().unwrap().out_height(), cfg.grid(), "{name}");
        assert_eq!(geoms.last().unwrap().out_ch, cfg.d_model, "{name}");
    }
    assert_eq!(DeMansiaConfig::preset("tiny").unwrap().conv_stem[0], StemStage::new(64, 7, 2));
}

#[test]
fn full_model_gradient_check_small() {
    let cfg = small_config();
    let m = DeMansia::new(cfg.clone(), 17).unwrap();
    let img = image(&cfg, 18);
    let w = Tensor::uniform(&[16, 3], 1.0, &mut rng(19));
    let mut state = m;
    let err = grad_check(
        &mut state,
        |m| m.named_params_mut().into_iter().map(|(_, t)| t).collect(),
        |m, tape| {
            let l = m.record(tape, &img)?;
            let ce = tape.cross_entropy(l.class, Target::Class(1))?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(l.patch, wv)?;
            let s = tape.sum(p);
            Ok(tape.add(ce, s)?)
        },
        6,
    );
    assert!(err <= 1e-4, "rel err {err}");
}

fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, v) in t.data().iter().enumerate() {
        if *v > t.data()[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn predict_is_monotone(seed in any::<u64>(), row in 0usize..5, col in 0usize..4, bump in 0.0f64..5.0) {
        let mut r = rng(seed);
        let c = Tensor::uniform(&[4], 2.0, &mut r);
        let p = Tensor::uniform(&[5, 4], 2.0, &mut r);
        let mut q = p.clone();
        q.data_mut()[row * 4 + col] += bump;
        let before = predict(&c, &p).unwrap();
        let after = predict(&c, &q).unwrap();
        for k in 0..4 {
            prop_assert!(after.data()[k] >= before.data()[k]);
        }
    }

    #[test]
    fn argmax_invariant_to_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let c = Tensor::uniform(&[6], 3.0, &mut r);
        let p = Tensor::uniform(&[7, 6], 3.0, &mut r);
        let cs = Tensor::new(&[6], c.data().iter().map(|v| v + shift).collect()).unwrap();
        let ps = Tensor::new(&[7, 6], p.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = predict(&c, &p).unwrap();
        let b = predict(&cs, &ps).unwrap();
        // guard against near-ties that rounding could flip
        let mut sorted = a.data().to_vec();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&a), argmax(&b));
    }
}
