mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use simreal::networks::{fresh_discriminator, DiscriminatorConfig, GeneratorCheckpoint, GeneratorConfig};
use simreal::training::losses::{l1, lsgan_discriminator, lsgan_generator};
use simreal::training::trainer::{read_log, FINAL_CHECKPOINT, LOG_FILE};
use simreal::training::*;
use simreal::Error;

use common::{randn, to_vec};

/// A discriminator whose realism map is `value` everywhere.
fn constant_discriminator(value: f32) -> simreal::networks::Discriminator {
    let (vars, d) = fresh_discriminator(&DiscriminatorConfig::default(), 0).unwrap();
    for (name, var) in vars.data().lock().unwrap().iter() {
        let fill = if name == "head.conv.bias" { value } else { 0.0 };
        var.set(&Tensor::full(fill, var.as_tensor().dims(), &Device::Cpu).unwrap()).unwrap();
    }
    d
}

fn batch(generated: Tensor, real: Tensor, image: Tensor) -> HybridBatch {
    HybridBatch {
        mode: TrainingMode::EnhancedOnly,
        target_patches: real.clone(),
        generated,
        real,
        generated_image: image,
        matches: vec![],
    }
}

fn mean_sq(v: &[f32], target: f64) -> f64 {
    v.iter().map(|x| (*x as f64 - target).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn discriminator_loss_matches_scalar_recomputation() {
    for seed in 0..20 {
        let real = randn(seed, &[8, 1, 5, 5], 1.0);
        let fake = randn(seed + 100, &[8, 1, 5, 5], 1.0);
        let got = lsgan_discriminator(&real, &fake).unwrap().to_scalar::<f32>().unwrap() as f64;
        let want = mean_sq(&to_vec(&real), 1.0) + mean_sq(&to_vec(&fake), 0.0);
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn generator_loss_matches_scalar_recomputation() {
    for seed in 0..20 {
        let scores = randn(seed, &[8, 1, 5, 5], 1.0);
        let x_hat = randn(seed + 1, &[1, 3, 16, 16], 0.5);
        let target = randn(seed + 2, &[1, 3, 16, 16], 0.5);
        let adv = lsgan_generator(&scores).unwrap().to_scalar::<f32>().unwrap() as f64;
        let l = l1(&x_hat, &target).unwrap().to_scalar::<f32>().unwrap() as f64;
        let (a, b) = (to_vec(&x_hat), to_vec(&target));
        let want_l1 = a.iter().zip(&b).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / a.len() as f64;
        let want_adv = mean_sq(&to_vec(&scores), 1.0);
        assert!((adv - want_adv).abs() <= 1e-6 * want_adv.max(1.0));
        assert!((l - want_l1).abs() <= 1e-6 * want_l1.max(1.0));
    }
}

#[test]
fn discriminator_constant_maps() {
    let p = Tensor::zeros((4, 3, 20, 20), DType::F32, &Device::Cpu).unwrap();
    let half = constant_discriminator(0.5);
    let b = batch(p.clone(), p.clone(), p.clone());
    assert_eq!(loss_discriminator(&half, &b).unwrap().to_scalar::<f32>().unwrap(), 0.5);
}

#[test]
fn generator_loss_trivial_cases() {
    let d = constant_discriminator(1.0);
    let p = Tensor::zeros((4, 3, 20, 20), DType::F32, &Device::Cpu).unwrap();
    let target = randn(1, &[1, 3, 40, 40], 0.3);
    let b = batch(p.clone(), p.clone(), target.clone());
    let exact = loss_generator(&d, &b, &target, &target, 10.0).unwrap();
    assert_eq!(exact.total.to_scalar::<f32>().unwrap(), 0.0);
    assert_eq!(exact.l1.to_scalar::<f32>().unwrap(), 0.0);

    // Values on a 1/8 grid keep the shifted difference exact in f32.
    let grid = ((&target * 8.0).unwrap().round().unwrap() / 8.0).unwrap();
    let shifted = (&grid + 0.125).unwrap();
    let g = loss_generator(&d, &b, &shifted, &grid, 10.0).unwrap();
    assert_eq!(g.total.to_scalar::<f32>().unwrap(), 1.25);

    let wrong = Tensor::zeros((1, 3, 40, 41), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(loss_generator(&d, &b, &wrong, &target, 10.0), Err(Error::Shape(_))));
}

#[test]
fn adversarial_term_alone_when_output_equals_target() {
    let d = constant_discriminator(0.25);
    let p = randn(3, &[4, 3, 20, 20], 0.5);
    let target = randn(4, &[1, 3, 40, 40], 0.5);
    let b = batch(p.clone(), p, target.clone());
    let g = loss_generator(&d, &b, &target, &target, 10.0).unwrap();
    assert_eq!(g.l1.to_scalar::<f32>().unwrap(), 0.0);
    assert_eq!(g.total.to_scalar::<f32>().unwrap(), g.adversarial.to_scalar::<f32>().unwrap());
    assert!((g.adversarial.to_scalar::<f32>().unwrap() - 0.5625).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000, scale in 0.01f32..20.0) {
        let real = (randn(seed, &[2, 1, 3, 3], 1.0) * scale as f64).unwrap();
        let fake = (randn(seed + 1, &[2, 1, 3, 3], 1.0) * scale as f64).unwrap();
        prop_assert!(lsgan_discriminator(&real, &fake).unwrap().to_scalar::<f32>().unwrap() >= 0.0);
        prop_assert!(l1(&real, &fake).unwrap().to_scalar::<f32>().unwrap() >= 0.0);
    }
}

#[test]
fn hybrid_batch_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 2, 4, 64, 1);
    let m = common::matcher(&fx);
    let cfg = TrainingConfig {
        height: 64,
        width: 64,
        ..Default::default()
    };
    let trainer = Trainer::new(cfg, Some(m)).unwrap();
    let (x, t) = fx.split.pairs[0].load(fx.geometry.image).unwrap();
    let (x, t) = (x.batched().unwrap(), t.batched().unwrap());
    let before = trainer.matcher().unwrap().index().query_count();
    let b = trainer.form_batch(&x, &t).unwrap();
    assert_eq!(trainer.matcher().unwrap().index().query_count() - before, 4);
    assert_eq!((b.generated_len(), b.real_len()), (8, 8));
    let p = fx.geometry.patch;
    assert_eq!(b.real.dims(), &[8, 3, p, p]);
    let halves = |t: &Tensor, i: usize| t.narrow(0, 4 * i, 4).unwrap();
    assert_eq!(to_vec(&halves(&b.generated, 0)), to_vec(&halves(&b.generated, 1)));
    assert_eq!(to_vec(&halves(&b.real, 0)), to_vec(&b.target_patches));
    assert_eq!(b.matches.len(), 4);
    assert!(b.matches.iter().any(|r| r.differs_from_target));
    let store = simreal::patch_index::RealPatchStore::new(fx.geometry, 4);
    for (i, r) in b.matches.iter().enumerate() {
        let pixels = store.crop(&r.provenance).unwrap();
        assert_eq!(to_vec(&b.real.get(4 + i).unwrap()), to_vec(&pixels));
    }
}

#[test]
fn enhanced_only_never_touches_the_index() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 2, 2, 64, 2);
    let m = common::matcher(&fx);
    let index = m.index().clone();
    let cfg = TrainingConfig {
        mode: TrainingMode::EnhancedOnly,
        height: 64,
        width: 64,
        max_steps: Some(2),
        checkpoint_interval: 0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, Some(m)).unwrap();
    let (x, t) = fx.split.pairs[0].load(fx.geometry.image).unwrap();
    let b = trainer.form_batch(&x.batched().unwrap(), &t.batched().unwrap()).unwrap();
    assert_eq!((b.generated_len(), b.real_len()), (4, 4));
    trainer.train(&fx.split, &tmp.path().join("run")).unwrap();
    assert_eq!(index.query_count(), 0);
}

#[test]
fn hybrid_without_index_is_a_configuration_error() {
    let cfg = TrainingConfig {
        height: 64,
        width: 64,
        ..Default::default()
    };
    assert!(matches!(Trainer::new(cfg, None), Err(Error::Config(_))));
}

#[test]
fn discriminator_loss_sends_no_gradient_to_generator() {
    let cfg = TrainingConfig {
        mode: TrainingMode::EnhancedOnly,
        height: 64,
        width: 64,
        ..Default::default()
    };
    let trainer = Trainer::new(cfg, None).unwrap();
    let x = randn(1, &[1, 3, 64, 64], 0.5);
    let b = trainer.form_batch(&x, &x).unwrap();
    let grads = loss_discriminator(trainer.discriminator(), &b).unwrap().backward().unwrap();
    for var in trainer.generator_vars().all_vars() {
        assert!(grads.get(var.as_tensor()).is_none());
    }
    assert!(trainer
        .discriminator_vars()
        .all_vars()
        .iter()
        .all(|v| grads.get(v.as_tensor()).is_some()));
}

#[test]
fn run_directory_layout_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 3, 3, 64, 3);
    let cfg = TrainingConfig {
        height: 64,
        width: 64,
        max_steps: Some(4),
        checkpoint_interval: 2,
        verify_isolation: true,
        ..Default::default()
    };
    let run = tmp.path().join("run");
    let mut trainer = Trainer::new(cfg, Some(common::matcher(&fx))).unwrap();
    let summary = trainer.train(&fx.split, &run).unwrap();
    assert_eq!(summary.records.len(), 4);
    assert!(summary.records.iter().all(|r| r.isolation_checked && r.match_distances.len() == 4));
    assert!(summary.records.iter().all(|r| r.loss_d >= 0.0 && r.loss_g_l1 >= 0.0));
    assert_eq!(read_log(&run.join(LOG_FILE)).unwrap(), summary.records);
    assert!(summary.manifest.finished);
    assert_eq!(summary.manifest.completed_steps, 4);
    let ckpts = run.join("checkpoints");
    assert!(ckpts.join("step_00000002").join("generator.safetensors").is_file());
    assert!(ckpts.join("step_00000002").join("discriminator.safetensors").is_file());
    let restored = GeneratorCheckpoint::load(&ckpts.join(FINAL_CHECKPOINT), &GeneratorConfig::default()).unwrap();
    assert_eq!(restored.manifest.step, 4);
    assert_eq!(restored.manifest.mode.as_deref(), Some("hybrid"));
}

#[test]
fn same_seed_same_log() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 3, 3, 64, 4);
    let run = |name: &str| {
        let cfg = TrainingConfig {
            height: 64,
            width: 64,
            max_steps: Some(3),
            checkpoint_interval: 0,
            seed: 11,
            ..Default::default()
        };
        let mut trainer = Trainer::new(cfg, Some(common::matcher(&fx))).unwrap();
        trainer.train(&fx.split, &tmp.path().join(name)).unwrap().records
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainingConfig {
        mode: TrainingMode::EnhancedOnly,
        height: 64,
        width: 64,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg, None).unwrap();
    trainer.set_dump_dir(tmp.path());
    let x = Tensor::full(f32::NAN, (1, 3, 64, 64), &Device::Cpu).unwrap();
    let err = trainer.step(&x, &x, 0, vec!["bad".into()]).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
    let dump = std::fs::read_to_string(tmp.path().join("nonfinite_step1.json")).unwrap();
    assert!(dump.contains("\"bad\""));
    assert_eq!(trainer.steps_completed(), 0);
}
