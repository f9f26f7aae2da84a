use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;

use super::*;

fn randn(seed: u64, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let v = util::normal_vec(&mut util::rng(seed, 9), n, 0.0, std);
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_abs(t: &Tensor) -> f32 {
    t.abs().unwrap().max_all().unwrap().to_scalar().unwrap()
}

/// Conv output side for kernel k, stride s, padding p.
fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

#[test]
fn parameter_counts_are_pinned() {
    // enc1 3·64·16+64, enc2 64·128·16+2·128, enc3 128·256·16+2·256,
    // 4 blocks × 2 × (256·256·9 + 2·256), dec3 256·128·16+2·128,
    // dec2 256·64·16+2·64, head 128·3·16+3.
    assert_eq!(GeneratorConfig::default().parameter_count(), 6_174_915);
    // h1 3·64·16+64, h2 64·128·16+2·128, h3 128·256·16+2·256, head 256·16+1.
    assert_eq!(DiscriminatorConfig::default().parameter_count(), 663_361);

    let (gv, _) = fresh_generator(&GeneratorConfig::default(), 0).unwrap();
    assert_eq!(parameter_count(&gv), 6_174_915);
    let (dv, _) = fresh_discriminator(&DiscriminatorConfig::default(), 0).unwrap();
    assert_eq!(parameter_count(&dv), 663_361);
}

#[test]
fn generator_intermediate_shapes() {
    let (_, g) = fresh_generator(&GeneratorConfig::default(), 1).unwrap();
    let x = randn(2, &[1, 3, 64, 48], 0.5);
    let t = g.forward_traced(&x).unwrap();
    assert_eq!(t.e1.dims(), &[1, 64, 32, 24]);
    assert_eq!(t.e2.dims(), &[1, 128, 16, 12]);
    assert_eq!(t.e3.dims(), &[1, 256, 8, 6]);
    assert_eq!(t.m.dims(), &[1, 256, 8, 6]);
    assert_eq!(t.d3.dims(), &[1, 128, 16, 12]);
    assert_eq!(t.d2.dims(), &[1, 64, 32, 24]);
    assert_eq!(t.output.dims(), &[1, 3, 64, 48]);
}

#[test]
fn generator_rejects_indivisible_input() {
    let (_, g) = fresh_generator(&GeneratorConfig::default(), 1).unwrap();
    for (h, w) in [(60, 64), (64, 36), (0, 8)] {
        let x = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&x), Err(crate::Error::Shape(_))), "{h}x{w}");
    }
    let x = Tensor::zeros((1, 4, 64, 64), DType::F32, &Device::Cpu).unwrap();
    assert!(g.forward(&x).is_err());
}

#[test]
fn generator_output_is_tanh_bounded() {
    let (_, g) = fresh_generator(&GeneratorConfig::default(), 3).unwrap();
    for batch in 0..10 {
        let x = randn(100 + batch, &[100, 3, 16, 16], 3.0);
        let y = g.forward(&x).unwrap();
        assert!(max_abs(&y) <= 1.0);
    }
}

#[test]
fn discriminator_map_sizes_follow_conv_arithmetic() {
    for n in [16, 49, 196, 256, 300] {
        let mut side = n;
        for _ in 0..3 {
            side = conv_out(side, 4, 2, 1);
        }
        side = conv_out(side, 4, 1, 1);
        assert_eq!(DiscriminatorConfig::output_side(n), side);
    }
    assert_eq!(DiscriminatorConfig::output_side(196), 23);
    assert_eq!(DiscriminatorConfig::output_side(256), 31);

    let (_, d) = fresh_discriminator(&DiscriminatorConfig::default(), 4).unwrap();
    let y = d.forward(&randn(5, &[2, 3, 196, 196], 0.5)).unwrap();
    assert_eq!(y.dims(), &[2, 1, 23, 23]);
    assert!(d.forward(&randn(5, &[1, 3, 15, 32], 0.5)).is_err());
    assert_eq!(d.forward(&randn(5, &[1, 3, 16, 16], 0.5)).unwrap().dims(), &[1, 1, 1, 1]);
}

#[test]
fn first_layers_are_unnormalised() {
    let (dv, d) = fresh_discriminator(&DiscriminatorConfig::default(), 0).unwrap();
    let layers = d.layers();
    assert!(!layers[0].normalized);
    assert!(layers[1..3].iter().all(|l| l.normalized));
    let names: Vec<String> = dv.data().lock().unwrap().keys().cloned().collect();
    assert!(names.iter().all(|n| !n.starts_with("h1.norm")));
    assert!(names.iter().any(|n| n.starts_with("h2.norm")));

    let (gv, g) = fresh_generator(&GeneratorConfig::default(), 0).unwrap();
    assert!(!g.layers()[0].normalized);
    let names: Vec<String> = gv.data().lock().unwrap().keys().cloned().collect();
    assert!(names.iter().all(|n| !n.starts_with("enc1.norm")));
    assert!(names.iter().any(|n| n.starts_with("enc2.norm")));
}

#[test]
fn init_is_seeded() {
    let cfg = DiscriminatorConfig::default();
    let (a, _) = fresh_discriminator(&cfg, 11).unwrap();
    let (b, _) = fresh_discriminator(&cfg, 11).unwrap();
    let (c, _) = fresh_discriminator(&cfg, 12).unwrap();
    assert_eq!(parameter_fingerprint(&a).unwrap(), parameter_fingerprint(&b).unwrap());
    assert_ne!(parameter_fingerprint(&a).unwrap(), parameter_fingerprint(&c).unwrap());
}

#[test]
fn conv_kernels_follow_gaussian_init() {
    let (gv, _) = fresh_generator(&GeneratorConfig::default(), 21).unwrap();
    let mut values = Vec::new();
    for var in gv.all_vars() {
        let t = var.as_tensor();
        if t.rank() == 4 {
            values.extend(t.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }
    assert!(values.len() >= 100_000);
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Standard error of the mean is 0.02 / sqrt(n); allow five of them.
    assert!(mean.abs() < 5.0 * 0.02 / n.sqrt(), "mean {mean}");
    assert!((std - 0.02).abs() < 0.02 * 0.01, "std {std}");

    for var in gv.all_vars() {
        let t = var.as_tensor();
        if t.rank() == 1 {
            let v = t.to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|&x| x == 0.0) || v.iter().all(|&x| x == 1.0));
        }
    }
}

#[test]
fn zeroed_residual_blocks_are_identity() {
    let (gv, g) = fresh_generator(&GeneratorConfig::default(), 5).unwrap();
    for (name, var) in gv.data().lock().unwrap().iter() {
        if name.starts_with("res") && name.contains(".conv") {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
    let z = randn(6, &[1, 256, 4, 4], 1.0);
    let m = g.bottleneck(&z).unwrap();
    assert_eq!(max_abs(&(&m - &z).unwrap()), 0.0);
}

#[test]
fn l1_gradient_reaches_every_parameter() {
    let (gv, g) = fresh_generator(&GeneratorConfig::default(), 7).unwrap();
    let x = randn(8, &[1, 3, 32, 32], 0.6);
    let target = randn(9, &[1, 3, 32, 32], 0.5).tanh().unwrap();
    let loss = (g.forward(&x).unwrap() - &target).unwrap().abs().unwrap().mean_all().unwrap();
    let grads = loss.backward().unwrap();
    for (name, var) in gv.data().lock().unwrap().iter() {
        let grad = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(max_abs(grad) > 0.0, "zero gradient for {name}");
    }
}

#[test]
fn first_skip_connection_is_live() {
    let (_, g) = fresh_generator(&GeneratorConfig::default(), 13).unwrap();
    let x = randn(14, &[1, 3, 32, 32], 0.8);
    let (e1, e2, e3) = g.encode(&x).unwrap();
    let m = g.bottleneck(&e3).unwrap();
    let full = g.decode(&m, &e2, &e1).unwrap().2;
    let ablated = g.decode(&m, &e2, &e1.zeros_like().unwrap()).unwrap().2;
    assert!(max_abs(&(&full - &ablated).unwrap()) > 1e-6);
}

#[test]
fn realism_map_shifts_with_cumulative_stride() {
    // The three stride-2 stages give a cumulative stride of 8: translating a
    // periodic input by 8 pixels moves the map by one cell away from borders.
    let (_, d) = fresh_discriminator(&DiscriminatorConfig::default(), 17).unwrap();
    let n = 128;
    let mut v = vec![0f32; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f32 / n as f32, x as f32 / n as f32);
                let tau = std::f32::consts::TAU;
                v[(c * n + y) * n + x] = 0.5 * (tau * (3.0 * fx + c as f32 * fy)).sin()
                    + 0.3 * (tau * (5.0 * fy + 2.0 * fx)).cos();
            }
        }
    }
    let img = Tensor::from_vec(v, (1, 3, n, n), &Device::Cpu).unwrap();
    let rolled = Tensor::cat(&[img.narrow(3, n - 8, 8).unwrap(), img.narrow(3, 0, n - 8).unwrap()], 3).unwrap();
    let a = d.forward(&img).unwrap();
    let b = d.forward(&rolled).unwrap();
    let side = a.dims()[3];
    let interior_a = a.narrow(3, 2, side - 5).unwrap();
    let interior_b = b.narrow(3, 3, side - 5).unwrap();
    let diff = max_abs(&(&interior_a - &interior_b).unwrap());
    let scale = max_abs(&a);
    assert!(diff < 0.05 * scale, "diff {diff} scale {scale}");
    // Shifting by a non-multiple of the stride does not align the maps as well.
    let misaligned = max_abs(&(&interior_a - &b.narrow(3, 2, side - 5).unwrap()).unwrap());
    assert!(misaligned > diff);
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    checkpoint::write_initial_generator(dir.path(), &cfg, 3).unwrap();
    let ckpt = GeneratorCheckpoint::load(dir.path(), &cfg).unwrap();
    assert_eq!(ckpt.manifest.generator_parameter_count, 6_174_915);
    assert!(ckpt.manifest.norm_affine);

    let (vars, _) = fresh_generator(&cfg, 3).unwrap();
    let x = randn(1, &[1, 3, 16, 16], 0.5);
    let a = frozen_generator(&cfg, &vars).unwrap().forward(&x).unwrap();
    let b = ckpt.generator.forward(&x).unwrap();
    assert_eq!(max_abs(&(&a - &b).unwrap()), 0.0);

    let mut manifest = ckpt.manifest.clone();
    manifest.generator_config_hash = "0".repeat(64);
    util::write_json(&dir.path().join(checkpoint::MANIFEST_FILE), &manifest).unwrap();
    assert!(matches!(GeneratorCheckpoint::load(dir.path(), &cfg), Err(crate::Error::Checkpoint(_))));

    let other = GeneratorConfig {
        bottleneck_blocks: 2,
        ..cfg.clone()
    };
    let dir2 = tempfile::tempdir().unwrap();
    checkpoint::write_initial_generator(dir2.path(), &cfg, 3).unwrap();
    assert!(GeneratorCheckpoint::load(dir2.path(), &other).is_err());
}

#[test]
fn varmap_backed_builders_share_storage() {
    // Optimiser updates go through Var::set; the network must observe them.
    let vm = candle_nn::VarMap::new();
    let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
    let d = Discriminator::load(&DiscriminatorConfig::default(), vb).unwrap();
    init_weights(&vm, 0).unwrap();
    let x = randn(3, &[1, 3, 32, 32], 0.5);
    let before = d.forward(&x).unwrap();
    for var in vm.all_vars() {
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    }
    let after = d.forward(&x).unwrap();
    assert!(max_abs(&before) > 0.0);
    assert_eq!(max_abs(&after), 0.0);
}
