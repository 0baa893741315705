use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcscore::datapipe::{rot90, Patch, PatchKind, PatchSet};
use tcscore::models::{ArchConfig, Checkpoint, ClassLabel, Detector, Discriminator, Generator, GeneratorInput};
use tcscore::training::*;

const P: usize = 32;

fn arch(base: usize) -> ArchConfig {
    ArchConfig {
        base_channels: base,
        noise_dim: 16,
        ..ArchConfig::default()
    }
}

/// Class k: a tint plus stripes with a class-specific period and direction.
fn patch(rng: &mut ChaCha8Rng, label: Option<ClassLabel>, id: usize) -> Patch {
    let k = label.map_or(rng.gen_range(0..8), |l| l.index());
    let tint = [(k * 29 % 200 + 30) as f32, (k * 71 % 200 + 30) as f32, (k * 113 % 200 + 30) as f32];
    let period = 2.0 + k as f32;
    let mut pixels = Vec::with_capacity(P * P * 3);
    for y in 0..P {
        for x in 0..P {
            let t = if k % 2 == 0 { x } else { y } as f32;
            let wave = 40.0 * (t * std::f32::consts::TAU / period).sin();
            for c in 0..3 {
                let v = tint[c] + wave + rng.gen_range(-10.0..10.0);
                pixels.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    Patch {
        slide_id: format!("s{}", id % 3),
        x: id,
        y: 0,
        width: P,
        height: P,
        label,
        pixels,
    }
}

fn labeled(n: usize, seed: u64) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchSet {
        kind: PatchKind::Labeled,
        patches: (0..n).map(|i| patch(&mut rng, Some(ClassLabel::ALL[i % 8]), i)).collect(),
    }
}

fn unlabeled(n: usize, seed: u64) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchSet {
        kind: PatchKind::Unlabeled,
        patches: (0..n).map(|i| patch(&mut rng, None, i)).collect(),
    }
}

fn accuracy_on(ckpt: &Checkpoint, set: &PatchSet) -> f64 {
    let det = Detector::from_checkpoint(ckpt.clone()).unwrap();
    let bank = PatchBank::from_set(set).unwrap();
    let probs = det.class_probs(&bank.range(0, bank.len())).unwrap();
    let hits = probs
        .data()
        .chunks_exact(8)
        .zip(&set.patches)
        .filter(|(row, p)| {
            let arg = (0..8).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            Some(arg) == p.label.map(|l| l.index())
        })
        .count();
    hits as f64 / set.len() as f64
}

fn ckpt_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut v = Vec::new();
    c.write(&mut v).unwrap();
    v
}

#[test]
fn fully_supervised_overfits_ten_patches() {
    let data = labeled(10, 1);
    let cfg = TrainConfig {
        labeled_batch: 10,
        iterations: 200,
        eval_every: 50,
        augment: false,
        ..TrainConfig::fully_supervised()
    };
    let report = train_fs(&arch(8), &data, &data, &cfg).unwrap();
    assert_eq!(report.best.meta.accuracy, Some(1.0), "evaluations {:?}", report.evaluations());
    assert_eq!(accuracy_on(&report.best, &data), 1.0);
}

#[test]
fn fixed_seed_is_bitwise_reproducible() {
    let (lab, unl, test) = (labeled(40, 2), unlabeled(40, 3), labeled(16, 4));
    let cfg = TrainConfig {
        labeled_batch: 8,
        unlabeled_batch: 8,
        iterations: 12,
        eval_every: 4,
        samples_per_class: 1,
        ..TrainConfig::acgan()
    };
    let a = train_acgan(&arch(4), &lab, &unl, &test, &cfg).unwrap();
    let b = train_acgan(&arch(4), &lab, &unl, &test, &cfg).unwrap();
    assert_eq!(a.report.trace, b.report.trace);
    assert_eq!(ckpt_bytes(&a.report.best), ckpt_bytes(&b.report.best));
    assert_eq!(ckpt_bytes(&a.generator), ckpt_bytes(&b.generator));
    assert_eq!(a.samples.len(), b.samples.len());
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.image, y.image);
    }

    let fs_cfg = TrainConfig {
        labeled_batch: 8,
        iterations: 10,
        eval_every: 5,
        ..TrainConfig::fully_supervised()
    };
    let x = train_fs(&arch(4), &lab, &test, &fs_cfg).unwrap();
    let y = train_fs(&arch(4), &lab, &test, &fs_cfg).unwrap();
    assert_eq!(x.trace, y.trace);
    assert_eq!(ckpt_bytes(&x.best), ckpt_bytes(&y.best));

    let other = train_fs(&arch(4), &lab, &test, &TrainConfig { seed: 9, ..fs_cfg }).unwrap();
    assert_ne!(other.trace, x.trace);
}

#[test]
fn selection_returns_the_first_maximum_of_the_trace() {
    let (lab, test) = (labeled(48, 5), labeled(24, 6));
    let cfg = TrainConfig {
        labeled_batch: 16,
        iterations: 60,
        eval_every: 10,
        ..TrainConfig::fully_supervised()
    };
    let report = train_fs(&arch(4), &lab, &test, &cfg).unwrap();
    let evals = report.evaluations();
    assert_eq!(evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40, 50, 60]);
    let max = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let first = evals.iter().find(|e| e.1 == max).unwrap();
    assert_eq!(report.best.meta.accuracy, Some(max));
    assert_eq!(report.best.meta.iteration, first.0);
    assert!(max >= evals[0].1);
    // The stored snapshot reproduces its recorded accuracy.
    assert_eq!(accuracy_on(&report.best, &test), max);
}

#[test]
fn zero_reconstruction_weight_reduces_to_fully_supervised() {
    let (lab, unl, test) = (labeled(40, 7), unlabeled(30, 8), labeled(16, 9));
    let base = TrainConfig {
        labeled_batch: 8,
        iterations: 25,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let fs = train_fs(&arch(4), &lab, &test, &TrainConfig { unlabeled_batch: 0, ..base.clone() }).unwrap();
    let ae = train_ae_ssl(
        &arch(4),
        &lab,
        &unl,
        &test,
        &TrainConfig {
            unlabeled_batch: 8,
            recon_weight: 0.0,
            ..base
        },
    )
    .unwrap();
    assert_eq!(fs.trace.len(), ae.trace.len());
    for (f, a) in fs.trace.iter().zip(&ae.trace) {
        match (f.l_c, a.l_c) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-6, "iteration {}: {x} vs {y}", f.iteration),
            (x, y) => assert_eq!(x, y),
        }
        assert_eq!(f.test_accuracy, a.test_accuracy);
        assert!(f.recon.is_none());
        assert_eq!(a.recon.is_some(), a.iteration > 0);
    }
    // Classifier parameters agree; the autoencoder adds an untouched decoder.
    for (name, p) in fs.best.params.iter() {
        let q = ae.best.params.get(name).unwrap();
        assert!(p.value.max_abs_diff(q) <= 1e-6, "{name}");
    }
}

#[test]
fn unlabeled_patches_do_not_enter_the_class_loss() {
    let (lab, test) = (labeled(24, 10), labeled(8, 11));
    let cfg = TrainConfig {
        labeled_batch: 8,
        unlabeled_batch: 8,
        iterations: 3,
        eval_every: 3,
        recon_weight: 0.0,
        ..TrainConfig::autoencoder()
    };
    let a = train_ae_ssl(&arch(4), &lab, &unlabeled(16, 12), &test, &cfg).unwrap();
    let b = train_ae_ssl(&arch(4), &lab, &unlabeled(16, 13), &test, &cfg).unwrap();
    let lc = |r: &TrainReport| r.trace.iter().map(|t| t.l_c).collect::<Vec<_>>();
    assert_eq!(lc(&a), lc(&b));
    assert_ne!(a.trace[1].recon, b.trace[1].recon);
}

#[test]
fn autoencoder_reconstruction_improves() {
    let (lab, unl, test) = (labeled(48, 14), unlabeled(96, 15), labeled(16, 16));
    let held_out = PatchBank::from_set(&unlabeled(32, 17)).unwrap();
    let arch = arch(4);
    let model = tcscore::models::Autoencoder::new(arch).unwrap();
    // Batch statistics in both cases: an untrained network's running
    // statistics are placeholders.
    let mse = |params: &tcscore::tensor::ParamStore| {
        let x = held_out.range(0, held_out.len());
        let mut tape = tcscore::tensor::Tape::new();
        let xv = tape.constant(x.clone());
        let recon = model.reconstruct_on_tape(&mut tape, params, xv, true, false).unwrap();
        let loss = tape.mse(recon, &x).unwrap();
        tape.value(loss).data()[0]
    };
    let cfg = TrainConfig {
        labeled_batch: 16,
        unlabeled_batch: 16,
        iterations: 150,
        eval_every: 150,
        lr: 1e-3,
        ..TrainConfig::autoencoder()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let init = model.init_params(&mut rng).unwrap();
    let report = train_ae_ssl(&arch, &lab, &unl, &test, &cfg).unwrap();
    let (before, after) = (mse(&init), mse(&report.last.params));
    assert!(after < 0.8 * before, "held-out reconstruction {before} → {after}");
    let first = report.trace[1].recon.unwrap();
    let last = report.trace.last().unwrap().recon.unwrap();
    assert!(last < first, "training reconstruction {first} → {last}");
}

#[test]
fn acgan_stays_finite_for_a_thousand_iterations() {
    let (lab, unl, test) = (labeled(64, 18), unlabeled(64, 19), labeled(16, 20));
    let cfg = TrainConfig {
        labeled_batch: 8,
        unlabeled_batch: 8,
        iterations: 1000,
        eval_every: 250,
        samples_per_class: 0,
        ..TrainConfig::acgan()
    };
    let out = train_acgan(&arch(4), &lab, &unl, &test, &cfg).unwrap();
    assert_eq!(out.report.trace.len(), 1001);
    for row in &out.report.trace[1..] {
        assert!(row.is_finite(), "{row:?}");
        let (ls, lc, d) = (row.l_s.unwrap(), row.l_c.unwrap(), row.d_objective.unwrap());
        assert!((ls + lc - d).abs() < 1e-4);
        assert!(row.g_objective.is_some());
    }
}

#[test]
fn discriminator_beats_a_frozen_generator() {
    let (lab, unl, test) = (labeled(64, 21), unlabeled(64, 22), labeled(16, 23));
    let a = arch(8);
    let cfg = TrainConfig {
        iterations: 500,
        eval_every: 500,
        freeze_generator: true,
        samples_per_class: 0,
        ..TrainConfig::acgan()
    };
    let out = train_acgan(&a, &lab, &unl, &test, &cfg).unwrap();
    assert!(out.report.trace[1..].iter().all(|r| r.g_objective.is_none()));
    // Generator init follows the discriminator's on the init stream.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rng.set_stream(0);
    Discriminator::new(a).unwrap().init_params(&mut rng).unwrap();
    let g_init = Generator::new(a).unwrap().init_params(&mut rng).unwrap();
    assert!(out.generator.params.same_values(&g_init));

    let real = PatchBank::from_set(&unlabeled(64, 24)).unwrap();
    let acc = discriminator_source_accuracy(
        &a,
        &out.report.last.params,
        &out.generator.params,
        &real.range(0, 64),
        &mut ChaCha8Rng::seed_from_u64(25),
    )
    .unwrap();
    assert!(acc > 0.9, "source accuracy {acc}");
}

#[test]
fn generator_samples_carry_their_class() {
    let (lab, unl, test) = (labeled(128, 26), unlabeled(64, 27), labeled(32, 28));
    let a = arch(8);
    let cfg = TrainConfig {
        iterations: 400,
        eval_every: 400,
        lr: 4e-4,
        samples_per_class: 0,
        ..TrainConfig::acgan()
    };
    let out = train_acgan(&a, &lab, &unl, &test, &cfg).unwrap();
    let g = Generator::new(a).unwrap();
    let d = Discriminator::new(a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let inputs: Vec<GeneratorInput> = (0..160)
        .map(|i| GeneratorInput::sample(&mut rng, a.noise_dim, ClassLabel::ALL[i % 8]))
        .collect();
    let images = g.generate(&out.generator.params, &inputs).unwrap();
    let probs = d.evaluate(&out.report.best.params, &images).unwrap().class_probs;
    let hits = probs
        .data()
        .chunks_exact(8)
        .zip(&inputs)
        .filter(|(row, inp)| (0..8).fold(0, |b, k| if row[k] > row[b] { k } else { b }) == inp.class.index())
        .count();
    assert!(hits as f64 / 160.0 >= 0.6, "conditioning hits {hits}/160");
}

#[test]
fn batch_manifests_honor_the_configured_composition() {
    let (lab, unl, test) = (labeled(40, 30), unlabeled(40, 31), labeled(8, 32));
    let dir = tempfile::tempdir().unwrap();
    let ssl = TrainConfig {
        iterations: 3,
        eval_every: 3,
        record_batches: true,
        samples_per_class: 0,
        ..TrainConfig::acgan()
    };
    let out = train_acgan(&arch(4), &lab, &unl, &test, &ssl).unwrap();
    assert_eq!(out.report.batches.len(), 3);
    for b in &out.report.batches {
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (32, 32));
    }
    let ae = train_ae_ssl(&arch(4), &lab, &unl, &test, &TrainConfig { iterations: 2, ..ssl.clone() }).unwrap();
    assert!(ae.batches.iter().all(|b| (b.labeled.len(), b.unlabeled.len()) == (32, 32)));
    let fs = train_fs(
        &arch(4),
        &lab,
        &test,
        &TrainConfig {
            record_batches: true,
            iterations: 2,
            ..TrainConfig::fully_supervised()
        },
    )
    .unwrap();
    assert!(fs.batches.iter().all(|b| (b.labeled.len(), b.unlabeled.len()) == (64, 0)));

    let path = dir.path().join("batches.csv");
    write_batch_manifest(&path, &out.report.batches, &lab, Some(&unl)).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * 64);
    let unl_rows = rows.iter().filter(|r| &r[1] == "unlabeled").count();
    assert_eq!(unl_rows, 3 * 32);
    assert!(rows.iter().filter(|r| &r[1] == "unlabeled").all(|r| &r[6] == "-1"));
}

#[test]
fn sampler_visits_every_patch_once_per_epoch() {
    let mut s = Sampler::new(10, true, ChaCha8Rng::seed_from_u64(0));
    for _ in 0..3 {
        let mut seen: Vec<usize> = s.next_batch(10).iter().map(|p| p.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
    let rots: Vec<u8> = s.next_batch(10).iter().map(|p| p.rotation).collect();
    assert!(rots.iter().all(|&r| r < 4));
    let mut plain = Sampler::new(10, false, ChaCha8Rng::seed_from_u64(0));
    assert!(plain.next_batch(25).iter().all(|p| p.rotation == 0));
}

#[test]
fn bank_rotation_matches_patch_rotation() {
    let set = labeled(3, 33);
    let bank = PatchBank::from_set(&set).unwrap();
    for (i, p) in set.patches.iter().enumerate() {
        let mut rotated = p.clone();
        for k in 0..4u8 {
            let want = PatchBank::from_set(&PatchSet {
                kind: PatchKind::Labeled,
                patches: vec![rotated.clone()],
            })
            .unwrap()
            .range(0, 1);
            let got = bank.batch(&[Pick { index: i, rotation: k }]);
            assert_eq!(got, want, "patch {i} rotation {k}");
            rotated = rot90(&rotated).unwrap();
        }
    }
}

#[test]
fn trace_csv_round_trips() {
    let (lab, unl, test) = (labeled(16, 34), unlabeled(16, 35), labeled(8, 36));
    let cfg = TrainConfig {
        labeled_batch: 4,
        unlabeled_batch: 4,
        iterations: 6,
        eval_every: 3,
        ..TrainConfig::autoencoder()
    };
    let report = train_ae_ssl(&arch(4), &lab, &unl, &test, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace(&path, &report.trace).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("iteration,L_S,L_C,recon,d_objective,g_objective,test_accuracy\n"));
    assert_eq!(read_trace(&path).unwrap(), report.trace);
}

#[test]
fn invalid_inputs_are_rejected() {
    let (lab, unl, test) = (labeled(8, 37), unlabeled(8, 38), labeled(8, 39));
    let empty = PatchSet::new(PatchKind::Labeled);
    let fs = TrainConfig {
        iterations: 1,
        ..TrainConfig::fully_supervised()
    };
    assert!(matches!(train_fs(&arch(4), &empty, &test, &fs), Err(TrainError::Empty("labeled"))));
    assert!(matches!(
        train_fs(&arch(4), &lab, &test, &TrainConfig { unlabeled_batch: 4, ..fs.clone() }),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train_ae_ssl(&arch(4), &lab, &PatchSet::new(PatchKind::Unlabeled), &test, &TrainConfig::autoencoder()),
        Err(TrainError::Empty("unlabeled"))
    ));
    assert!(matches!(
        train_acgan(&arch(4), &lab, &unl, &test, &TrainConfig { labeled_batch: 0, ..TrainConfig::acgan() }),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train_fs(&arch(4), &unl_as_labeled(&unl), &test, &fs),
        Err(TrainError::Config(_))
    ));
}

fn unl_as_labeled(unl: &PatchSet) -> PatchSet {
    PatchSet {
        kind: PatchKind::Labeled,
        patches: unl.patches.clone(),
    }
}

#[test]
fn divergence_aborts_with_the_iteration() {
    let (lab, unl, test) = (labeled(16, 40), unlabeled(16, 41), labeled(8, 42));
    let cfg = TrainConfig {
        labeled_batch: 8,
        unlabeled_batch: 8,
        iterations: 200,
        eval_every: 100,
        lr: 1e30,
        samples_per_class: 0,
        ..TrainConfig::acgan()
    };
    match train_acgan(&arch(4), &lab, &unl, &test, &cfg) {
        Err(TrainError::Diverged { iteration, .. }) => assert!((1..=200).contains(&iteration)),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.trace.len())),
    }
}
