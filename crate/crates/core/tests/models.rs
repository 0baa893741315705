use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcscore::models::*;
use tcscore::tensor::{power_iteration_sigma, AdamConfig, Tape, Tensor};

fn arch(base: usize) -> ArchConfig {
    ArchConfig {
        base_channels: base,
        ..ArchConfig::default()
    }
}

fn random_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn([n, 3, size, size], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn class_label_indices_and_serde() {
    for (i, c) in ClassLabel::ALL.iter().enumerate() {
        assert_eq!(c.index(), i);
        assert_eq!(ClassLabel::from_index(i), Some(*c));
        assert_eq!(serde_json::to_string(c).unwrap(), i.to_string());
    }
    assert_eq!(ClassLabel::from_index(8), None);
    assert!(serde_json::from_str::<ClassLabel>("8").is_err());
}

#[test]
fn arch_validation() {
    assert!(ArchConfig::default().validate().is_ok());
    for p in [16, 48, 256] {
        let a = ArchConfig { patch_size: p, ..ArchConfig::default() };
        assert!(a.validate().is_err());
    }
    assert!(ArchConfig { base_channels: 0, ..ArchConfig::default() }.validate().is_err());
}

#[test]
fn generator_range_shape_and_determinism() {
    let a = arch(8);
    let g = Generator::new(a).unwrap();
    let store = g.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let input = GeneratorInput {
        z: vec![0.0; a.noise_dim],
        class: ClassLabel::TcPos,
    };
    let img = g.generate(&store, &[input.clone()]).unwrap();
    assert_eq!(img.shape(), &[1, 3, 32, 32]);
    assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let again = g.generate(&store, &[input]).unwrap();
    assert!(img.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn generator_conditioning_changes_output_after_a_step() {
    let a = arch(8);
    let g = Generator::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = g.init_params(&mut rng).unwrap();
    let z = noise_batch(&mut rng, 8, a.noise_dim);
    let classes: Vec<usize> = (0..8).collect();
    let mut tape = Tape::new();
    let out = g.forward_on_tape(&mut tape, &store, &z, &classes, true, true).unwrap();
    let target = Tensor::zeros(tape.value(out).shape().to_vec());
    let loss = tape.mse(out, &target).unwrap();
    tape.backward(loss).unwrap().accumulate_into(&tape, &mut store).unwrap();
    tape.flush_buffers_into(&mut store).unwrap();
    store.adam_step(&AdamConfig::default()).unwrap();

    let z0: Vec<f32> = z.data()[..a.noise_dim].to_vec();
    let imgs = g
        .generate(
            &store,
            &[
                GeneratorInput { z: z0.clone(), class: ClassLabel::TcPos },
                GeneratorInput { z: z0, class: ClassLabel::Stroma },
            ],
        )
        .unwrap();
    assert!(imgs.index_axis0(0).max_abs_diff(&imgs.index_axis0(1)) > 0.0);
}

#[test]
fn generator_rejects_bad_noise_length() {
    let g = Generator::new(arch(8)).unwrap();
    let store = g.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let bad = GeneratorInput { z: vec![0.0; 3], class: ClassLabel::TcPos };
    assert!(g.generate(&store, &[bad]).is_err());
}

#[test]
fn discriminator_contracts() {
    let a = arch(8);
    let d = Discriminator::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = d.init_params(&mut rng).unwrap();
    let images = random_images(6, 32, &mut rng);
    let out = d.evaluate(&store, &images).unwrap();
    assert_eq!(out.source_prob.len(), 6);
    assert_eq!(out.class_probs.shape(), &[6, 8]);
    for row in out.class_probs.data().chunks(8) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    for i in 0..6 {
        let single = d.evaluate(&store, &images.index_axis0(i)).unwrap();
        assert!((single.source_prob[0] - out.source_prob[i]).abs() < 1e-6);
        assert!(single.class_probs.max_abs_diff(&out.class_probs.index_axis0(i).reshape([1, 8]).unwrap()) < 1e-6);
    }
    assert!(d.evaluate(&store, &random_images(1, 16, &mut rng)).is_err());
}

#[test]
fn untrained_discriminator_source_prob_in_band() {
    let d = Discriminator::new(arch(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = d.init_params(&mut rng).unwrap();
    let mut total = 0.0f64;
    for _ in 0..10 {
        let out = d.evaluate(&store, &random_images(100, 32, &mut rng)).unwrap();
        total += out.source_prob.iter().map(|&p| p as f64).sum::<f64>();
    }
    let mean = total / 1000.0;
    assert!(mean > 0.2 && mean < 0.8, "mean source prob {mean}");
}

fn exact_sigma(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    DMatrix::from_row_iterator(rows, cols, w.data().iter().map(|&v| v as f64))
        .singular_values()
        .max()
}

#[test]
fn discriminator_trunk_is_spectrally_normalized_after_updates() {
    let d = Discriminator::new(arch(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = d.init_params(&mut rng).unwrap();
    let images = random_images(2, 32, &mut rng);
    for _ in 0..60 {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        d.forward_on_tape(&mut tape, &store, x, true, false).unwrap();
        tape.flush_buffers_into(&mut store).unwrap();
    }
    for name in ["d.conv1", "d.conv2", "d.conv3"] {
        let w = store.get(&format!("{name}.weight")).unwrap();
        let mut u = store.get(&format!("{name}.u")).unwrap().data().to_vec();
        let rows = w.shape()[0];
        let (sigma, _) = power_iteration_sigma(w.data(), rows, w.numel() / rows, &mut u, 0);
        let normalized = Tensor::from_fn(w.shape().to_vec(), |i| w.data()[i] / sigma);
        let s = exact_sigma(&normalized);
        assert!((0.99..=1.01).contains(&s), "{name}: σ = {s}");
        let norm: f32 = u.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}

#[test]
fn classifier_grid_shapes() {
    let a = arch(8);
    let f = FsVgg::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = f.init_params(&mut rng).unwrap();
    let p = f.class_probs_grid(&store, &random_images(2, 32, &mut rng)).unwrap();
    assert_eq!(p.shape(), &[2, 8, 1, 1]);
    let big = f.class_probs_grid(&store, &random_images(1, 64, &mut rng)).unwrap();
    assert_eq!(big.shape(), &[1, 8, 5, 5]);
    for cell in 0..25 {
        let total: f32 = (0..8).map(|k| big.data()[k * 25 + cell]).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn classifier_is_translation_equivariant_in_the_interior() {
    let a = arch(4);
    let f = FsVgg::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = f.init_params(&mut rng).unwrap();
    // Non-trivial running statistics so inference-mode BN is not the identity.
    for name in ["enc.b1.l1.bn", "enc.b2.l2.bn"] {
        let c = store.get(&format!("{name}.running_mean")).unwrap().numel();
        store.set(&format!("{name}.running_mean"), Tensor::full([c], 0.1)).unwrap();
        store.set(&format!("{name}.running_var"), Tensor::full([c], 0.5)).unwrap();
    }
    let side = 136;
    let big = random_images(1, side + 8, &mut rng);
    let crop = |dx: usize| {
        Tensor::from_fn([1, 3, side, side], |i| {
            let (c, y, x) = (i / (side * side), (i / side) % side, i % side);
            big.data()[(c * (side + 8) + y) * (side + 8) + x + dx]
        })
    };
    let base = f.class_probs_grid(&store, &crop(0)).unwrap();
    let shifted = f.class_probs_grid(&store, &crop(8)).unwrap();
    let g = base.shape()[3];
    assert_eq!(base.shape(), shifted.shape());
    // Cells whose receptive field stays clear of the zero padding.
    let margin = 4;
    let mut compared = 0;
    for y in margin..g - margin {
        for x in margin..g - margin - 1 {
            for k in 0..8 {
                let a = base.data()[(k * g + y) * g + x + 1];
                let b = shifted.data()[(k * g + y) * g + x];
                assert!((a - b).abs() < 1e-5, "cell ({y},{x}) class {k}: {a} vs {b}");
            }
            compared += 1;
        }
    }
    assert!(compared > 0);
}

#[test]
fn autoencoder_shapes_and_degenerate_input() {
    let a = arch(8);
    let ae = Autoencoder::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ae.init_params(&mut rng).unwrap();
    let (recon, probs) = ae.evaluate(&store, &random_images(1, 32, &mut rng)).unwrap();
    assert_eq!(recon.shape(), &[1, 3, 32, 32]);
    assert_eq!(probs.shape(), &[1, 8]);

    let zeros = Tensor::zeros([2, 3, 32, 32]);
    let mut tape = Tape::new();
    let x = tape.constant(zeros.clone());
    let (r, logits) = ae.forward_on_tape(&mut tape, &store, x, true, true).unwrap();
    let logits = tape.reshape(logits, [2, 8]).unwrap();
    let ce = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
    let mse = tape.mse(r, &zeros).unwrap();
    let loss = tape.add(ce, mse).unwrap();
    assert!(tape.value(loss).data()[0].is_finite());
    let grads = tape.backward(loss).unwrap();
    grads.accumulate_into(&tape, &mut store).unwrap();
    for (name, p) in store.iter() {
        if let Some(g) = &p.grad {
            assert!(g.is_finite(), "{name}");
        }
    }
}

#[test]
fn autoencoder_overfits_one_patch() {
    let a = arch(8);
    let ae = Autoencoder::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ae.init_params(&mut rng).unwrap();
    let patch = Tensor::from_fn([1, 3, 32, 32], |i| {
        let (c, y, x) = (i / 1024, (i / 32) % 32, i % 32);
        (0.4 * ((x as f32 * 0.3 + c as f32).sin() + (y as f32 * 0.2).cos())).clamp(-1.0, 1.0)
    });
    let batch = Tensor::concat0(&[&patch, &patch]).unwrap();
    let adam = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let r = ae.reconstruct_on_tape(&mut tape, &store, x, true, true).unwrap();
        let loss = tape.mse(r, &batch).unwrap();
        losses.push(tape.value(loss).data()[0]);
        tape.backward(loss).unwrap().accumulate_into(&tape, &mut store).unwrap();
        tape.flush_buffers_into(&mut store).unwrap();
        // Classifier head is untouched by the reconstruction loss.
        for (name, p) in store.clone().iter() {
            if p.trainable && p.grad.is_none() {
                store.accumulate_grad(name, &Tensor::zeros(p.value.shape().to_vec())).unwrap();
            }
        }
        store.adam_step(&adam).unwrap();
    }
    assert!(losses[49] < losses[0] / 2.0, "{} → {}", losses[0], losses[49]);
}

#[test]
fn parameter_count_is_a_function_of_arch() {
    for base in [4, 8] {
        let a = arch(base);
        for kind in [
            ModelKind::FsVgg,
            ModelKind::AeSsl,
            ModelKind::AcganDiscriminator,
            ModelKind::AcganGenerator,
        ] {
            let s1 = kind.init_params(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let s2 = kind.init_params(&a, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            assert_eq!(s1.trainable_count(), s2.trainable_count());
            assert_eq!(s1.len(), s2.len());
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_outputs_bitwise() {
    let a = arch(8);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let images = random_images(3, 32, &mut rng);
    for kind in [ModelKind::FsVgg, ModelKind::AeSsl, ModelKind::AcganDiscriminator] {
        let mut params = kind.init_params(&a, &mut rng).unwrap();
        // Perturb buffers so the round trip is not trivially default.
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| n.ends_with("running_var")) {
            let c = params.get(n).unwrap().numel();
            params.set(n, Tensor::full([c], 0.7)).unwrap();
        }
        let ckpt = Checkpoint {
            meta: CheckpointMeta { kind, arch: a, iteration: 42, accuracy: Some(0.5) },
            params,
        };
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert!(back.params.same_values(&ckpt.params));
        let before = Detector::from_checkpoint(ckpt).unwrap().class_probs(&images).unwrap();
        let after = Detector::from_checkpoint(back).unwrap().class_probs(&images).unwrap();
        assert!(before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoint_rejects_mismatched_layout() {
    let a = arch(8);
    let params = ModelKind::FsVgg.init_params(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let ckpt = Checkpoint {
        meta: CheckpointMeta { kind: ModelKind::AcganDiscriminator, arch: a, iteration: 0, accuracy: None },
        params,
    };
    let mut buf = Vec::new();
    ckpt.write(&mut buf).unwrap();
    assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
}

#[test]
fn generator_checkpoint_is_not_a_detector() {
    let a = arch(8);
    let params = ModelKind::AcganGenerator.init_params(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let ckpt = Checkpoint {
        meta: CheckpointMeta { kind: ModelKind::AcganGenerator, arch: a, iteration: 0, accuracy: None },
        params,
    };
    assert!(Detector::from_checkpoint(ckpt).is_err());
}
