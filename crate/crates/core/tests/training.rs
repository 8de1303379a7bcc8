mod common;

use demansia::checkpoint;
use demansia::model::{DeMansia, DeMansiaConfig};
use demansia::token_labeling::target_entropy;
use demansia::training::{
    batch_gradient, ema_update, evaluate, evaluate_both, model_from_records, run, sgdr_lr, synth_examples, train_step,
    EmaState, Example, Optimizer, OptimizerKind, TrainConfig, Trainer, METRICS_HEADER,
};
use demansia::{Error, Module};
use proptest::prelude::*;

/// Micro layout shrunk to keep the test suite fast.
fn small_config() -> DeMansiaConfig {
    let mut c = DeMansiaConfig::micro();
    c.d_model = 16;
    c.n_layers = 2;
    c.image_size = 16;
    c.n_state = 4;
    c.conv_stem = demansia::model::default_stem(16, 4).unwrap();
    c
}

fn snapshot(m: &impl Module) -> Vec<f64> {
    m.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig { batch_size: 4, epochs: 1, train_samples: 12, test_samples: 6, seed: 3, ..TrainConfig::default() }
}

#[test]
fn sgdr_restarts_and_midpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(sgdr_lr(0.0, &cfg), 1e-3);
    for boundary in [10.0, 30.0, 70.0, 150.0] {
        assert_eq!(sgdr_lr(boundary, &cfg), 1e-3, "restart at {boundary}");
        assert!(sgdr_lr(boundary - 1e-6, &cfg) < 1e-10);
    }
    assert!((sgdr_lr(5.0, &cfg) - 5e-4).abs() < 1e-15);
    assert!((sgdr_lr(20.0, &cfg) - 5e-4).abs() < 1e-15);
    assert!((sgdr_lr(50.0, &cfg) - 5e-4).abs() < 1e-15);
    let flat = TrainConfig { t_mult: 1.0, ..cfg };
    assert_eq!(sgdr_lr(40.0, &flat), 1e-3);
    assert!((sgdr_lr(45.0, &flat) - 5e-4).abs() < 1e-15);
}

proptest! {
    #[test]
    fn sgdr_is_continuous_inside_cycles(t in 0.0f64..150.0) {
        let cfg = TrainConfig::default();
        let near_restart = [10.0, 30.0, 70.0, 150.0].iter().any(|b| (t - b).abs() < 1e-3);
        prop_assume!(!near_restart);
        let h = 1e-7;
        // slope of the cosine is at most lr_max·π/(2·T0)
        prop_assert!((sgdr_lr(t + h, &cfg) - sgdr_lr(t, &cfg)).abs() <= 1e-3 * std::f64::consts::PI / 20.0 * h * 1.01);
        prop_assert!(sgdr_lr(t, &cfg) >= 0.0 && sgdr_lr(t, &cfg) <= 1e-3);
    }
}

#[test]
fn ema_examples() {
    let live = DeMansia::new(small_config(), 1).unwrap();
    let start = DeMansia::new(small_config(), 2).unwrap();
    let (l, s0) = (snapshot(&live), snapshot(&start));

    let mut ema = EmaState::from_model(&start);
    ema_update(&mut ema, &live, 1.0).unwrap();
    assert_eq!(snapshot_ema(&ema), s0);
    ema_update(&mut ema, &live, 0.0).unwrap();
    assert_eq!(snapshot_ema(&ema), l);

    let mut ema = EmaState::from_model(&start);
    ema_update(&mut ema, &live, 0.5).unwrap();
    ema_update(&mut ema, &live, 0.5).unwrap();
    for ((e, a), b) in snapshot_ema(&ema).iter().zip(&s0).zip(&l) {
        assert!((e - (0.25 * a + 0.75 * b)).abs() < 1e-15);
    }
}

fn snapshot_ema(e: &EmaState) -> Vec<f64> {
    e.shadow.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn ema_converges_geometrically() {
    let live = DeMansia::new(small_config(), 4).unwrap();
    let mut ema = EmaState::from_model(&DeMansia::new(small_config(), 5).unwrap());
    let gap =
        |e: &EmaState| snapshot_ema(e).iter().zip(snapshot(&live)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let g0 = gap(&ema);
    let decay: f64 = 0.9;
    for k in 1..=30 {
        ema_update(&mut ema, &live, decay).unwrap();
        let g = gap(&ema);
        assert!((g - g0 * decay.powi(k)).abs() <= 1e-12 + 1e-9 * g, "step {k}: {g}");
    }
}

#[test]
fn ema_shape_mismatch_is_contract_error() {
    let mut ema = EmaState::from_model(&DeMansia::new(small_config(), 0).unwrap());
    let other = DeMansia::new(DeMansiaConfig::micro(), 0).unwrap();
    assert!(matches!(ema_update(&mut ema, &other, 0.5), Err(Error::Contract(_))));
}

fn examples(n: usize, seed: u64) -> Vec<Example> {
    synth_examples(seed, 0, n, &small_config()).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut model = DeMansia::new(small_config(), 6).unwrap();
    let before = snapshot(&model);
    let ex = examples(3, 6);
    let batch: Vec<&Example> = ex.iter().collect();
    let mut opt = Optimizer::new(&model, OptimizerKind::AdamW, 0.05);
    let stats = train_step(&mut model, &mut opt, &batch, 0.5, 0.0).unwrap();
    assert!(stats.loss > 0.0 && stats.loss.is_finite());
    assert_eq!(snapshot(&model), before);
}

#[test]
fn first_step_drift_is_linear_in_lr() {
    let ex = examples(2, 7);
    let batch: Vec<&Example> = ex.iter().collect();
    let drift = |lr: f64| {
        let mut model = DeMansia::new(small_config(), 7).unwrap();
        let before = snapshot(&model);
        let mut opt = Optimizer::new(&model, OptimizerKind::AdamW, 0.0);
        train_step(&mut model, &mut opt, &batch, 0.5, lr).unwrap();
        snapshot(&model).iter().zip(&before).map(|(a, b)| (a - b).abs()).sum::<f64>()
    };
    let (d1, d2) = (drift(1e-6), drift(1e-7));
    assert!(d1 > 0.0);
    assert!((d1 / d2 - 10.0).abs() < 1e-3, "{d1} {d2}");
}

fn overfit(ex: &Example, seed: u64) -> (DeMansia, f64) {
    let mut model = DeMansia::new(DeMansiaConfig::micro(), seed).unwrap();
    let mut opt = Optimizer::new(&model, OptimizerKind::AdamW, 0.0);
    for _ in 0..200 {
        train_step(&mut model, &mut opt, &[ex], 0.5, 3e-3).unwrap();
    }
    let (_, stats) = batch_gradient(&model, &[ex], 0.5).unwrap();
    (model, stats.loss)
}

#[test]
fn single_sample_overfits() {
    let ex = synth_examples(8, 0, 4, &DeMansiaConfig::micro()).unwrap();
    // sample 0 is background only, so every patch target is one-hot and the loss can reach 0
    let (model, loss) = overfit(&ex[0], 8);
    assert!(loss < 0.01, "final loss {loss}");
    let m = evaluate(&model, &ex[0..1], false).unwrap();
    assert_eq!((m.top1, m.top5), (1.0, 1.0));

    // shape edges give mixed patch targets; the loss then approaches 0.5·H(targets)
    let floor = 0.5 * target_entropy(&ex[3].targets);
    assert!(floor > 0.01);
    let (model, loss) = overfit(&ex[3], 8);
    assert!(loss - floor < 0.01, "loss {loss}, floor {floor}");
    assert_eq!(evaluate(&model, &ex[3..4], true).unwrap().top1, 1.0);
}

#[test]
fn smoothed_loss_decreases_early() {
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 1,
        train_samples: 200,
        test_samples: 0,
        lr_max: 3e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(small_config(), cfg).unwrap();
    let mut losses = Vec::new();
    trainer.run_epoch(|r| losses.push(r.stats.loss)).unwrap();
    let smooth: Vec<f64> = losses[..50].windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(smooth.last().unwrap() < smooth.first().unwrap(), "{smooth:?}");
}

#[test]
fn runs_are_reproducible() {
    let trajectory = || {
        let mut t = Trainer::new(small_config(), quick_cfg()).unwrap();
        let mut rows = Vec::new();
        t.run_epoch(|r| rows.push(r.csv())).unwrap();
        t.run_epoch(|r| rows.push(r.csv())).unwrap();
        let mut bytes = Vec::new();
        checkpoint::write_records(&mut bytes, &t.checkpoint_records()).unwrap();
        (rows, bytes)
    };
    let (a, b) = (trajectory(), trajectory());
    assert_eq!(a.0.len(), 6);
    assert_eq!(a, b);
}

#[test]
fn chance_level_for_constant_logits() {
    let mut model = DeMansia::new(small_config(), 10).unwrap();
    model.class_w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    model.aux_w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let ex = synth_examples(10, 0, 200, &small_config()).unwrap();
    let (plain, fused) = evaluate_both(&model, &ex).unwrap();
    for m in [plain, fused] {
        assert!((m.top1 - 0.1).abs() < 1e-12);
        assert!((m.top5 - 0.5).abs() < 1e-12);
        assert!((m.loss - 10f64.ln()).abs() < 1e-12);
    }
    let random = DeMansia::new(small_config(), 11).unwrap();
    let (p, f) = evaluate_both(&random, &ex).unwrap();
    assert!(p.top5 >= p.top1 && f.top5 >= f.top1);
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let mut model = DeMansia::new(small_config(), 12).unwrap();
    model.blocks[0].out_proj.data_mut()[0] = f64::NAN;
    let ex = examples(2, 12);
    let batch: Vec<&Example> = ex.iter().collect();
    let mut opt = Optimizer::new(&model, OptimizerKind::AdamW, 0.0);
    match train_step(&mut model, &mut opt, &batch, 0.5, 1e-3) {
        Err(Error::NonFinite(at)) => assert!(at.contains("node"), "{at}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn checkpoint_restores_model() {
    let mut t = Trainer::new(small_config(), quick_cfg()).unwrap();
    t.run_epoch(|_| {}).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write_records(&mut bytes, &t.checkpoint_records()).unwrap();
    let records = checkpoint::read_records(bytes.as_slice()).unwrap();
    let restored = model_from_records(&records, "model").unwrap();
    assert_eq!(restored.config, t.model.config);
    assert_eq!(snapshot(&restored), snapshot(&t.model));
    let shadow = model_from_records(&records, "ema").unwrap();
    assert_eq!(snapshot(&shadow), snapshot_ema(&t.ema));
    assert!(records.iter().any(|(n, _)| n == "opt.step"));
    assert!(records.iter().any(|(n, _)| n.starts_with("opt.v.blocks.0")));
}

#[test]
fn run_writes_logs_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, ..quick_cfg() };
    let mut epochs = 0;
    let t = run(small_config(), cfg, dir.path(), |_| epochs += 1).unwrap();
    assert_eq!((epochs, t.step), (2, 6));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,0,0.001,"));
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 5);
    assert!(dir.path().join("checkpoint.dmns").exists());
}

#[test]
fn max_steps_caps_training() {
    let cfg = TrainConfig { epochs: 5, max_steps: 4, ..quick_cfg() };
    let mut t = Trainer::new(small_config(), cfg).unwrap();
    while !t.finished() {
        t.run_epoch(|_| {}).unwrap();
    }
    assert_eq!((t.step, t.epoch), (4, 2));
}
