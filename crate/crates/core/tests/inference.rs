use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcscore::datapipe::{patches_to_tensor, Patch, Slide, TissueMask};
use tcscore::inference::*;
use tcscore::models::{ArchConfig, ClassLabel, Detector, ModelKind, CLASS_COUNT};
use tcscore::tensor::Tensor;

fn detector(patch: usize, seed: u64) -> Detector {
    let arch = ArchConfig {
        patch_size: patch,
        base_channels: 2,
        ..ArchConfig::default()
    };
    let params = ModelKind::FsVgg.init_params(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Detector { kind: ModelKind::FsVgg, arch, params }
}

/// A classifier whose logits ignore the input and favour one class.
fn constant_detector(patch: usize, class: ClassLabel) -> Detector {
    let mut d = detector(patch, 0);
    let w = d.params.get("head.cls.weight").unwrap().shape().to_vec();
    d.params.set("head.cls.weight", Tensor::zeros(w)).unwrap();
    let mut b = vec![0.0; CLASS_COUNT];
    b[class.index()] = 12.0;
    d.params.set("head.cls.bias", Tensor::new([CLASS_COUNT], b).unwrap()).unwrap();
    d
}

fn noisy_slide(w: usize, h: usize, seed: u64) -> Slide {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Slide::new("s", w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn window_grid_and_coverage() {
    let slide = noisy_slide(256, 256, 1);
    let mask = TissueMask::filled(256, 256, true);
    let d = constant_detector(128, ClassLabel::TcPos);
    let opts = PredictOptions::for_window(128);
    assert_eq!(opts.stride, 32);
    let map = predict_slide(&slide, &mask, &d, opts).unwrap();
    assert_eq!(map.windows, 25);
    assert_eq!(map.counts[128 * 256 + 128], 16);
    assert_eq!(*map.counts.iter().max().unwrap(), 16);
    // Corners are covered by exactly one window.
    assert_eq!(map.counts[0], 1);
    let cm = class_map(&map);
    assert!(cm.labels.iter().all(|&l| l == ClassLabel::TcPos));
}

#[test]
fn constant_model_and_non_tissue() {
    let slide = noisy_slide(96, 80, 2);
    let mask = TissueMask::new(96, 80, (0..96 * 80).map(|i| (i % 96) < 60).collect()).unwrap();
    let d = constant_detector(32, ClassLabel::TcPos);
    let map = predict_slide(&slide, &mask, &d, PredictOptions::for_window(32)).unwrap();
    let cm = class_map(&map);
    for y in 0..80 {
        for x in 0..96 {
            let want = if x < 60 { ClassLabel::TcPos } else { ClassLabel::NonTissue };
            assert_eq!(cm.get(x, y), want, "({x}, {y})");
        }
    }
}

#[test]
fn normalized_tissue_pixels_sum_to_one_and_margins_are_filled() {
    let slide = noisy_slide(75, 70, 3);
    // An irregular tissue region reaching the right and bottom margins,
    // where no full window fits.
    let mask = TissueMask::new(75, 70, (0..75 * 70).map(|i| (i % 75) + (i / 75) > 40).collect()).unwrap();
    let d = detector(32, 5);
    let map = predict_slide(&slide, &mask, &d, PredictOptions::for_window(32)).unwrap();
    assert!(!map.no_tissue);
    for y in 0..70 {
        for x in 0..75 {
            let p = map.probs(x, y);
            let s: f32 = p.iter().sum();
            assert!((s - 1.0).abs() <= 1e-4, "({x}, {y}) sums to {s}");
            if mask.get(x, y) {
                assert!(map.counts[y * 75 + x] > 0);
            } else {
                assert_eq!(p[ClassLabel::NonTissue.index()], 1.0);
            }
        }
    }
}

#[test]
fn no_overlap_equals_per_window_classification() {
    let slide = noisy_slide(96, 64, 4);
    let mask = TissueMask::filled(96, 64, true);
    let d = detector(32, 6);
    let opts = PredictOptions { stride: 32, min_tissue: 0.5, batch: 64 };
    let map = predict_slide(&slide, &mask, &d, opts).unwrap();
    assert_eq!(map.windows, 6);
    for wy in 0..2 {
        for wx in 0..3 {
            let p = Patch::crop(&slide, wx * 32, wy * 32, 32, None);
            let probs = d.class_probs(&patches_to_tensor(&[&p]).unwrap()).unwrap();
            for y in wy * 32..wy * 32 + 32 {
                for x in wx * 32..wx * 32 + 32 {
                    let i = y * 96 + x;
                    assert_eq!(map.counts[i], 1);
                    assert_eq!(&map.sums[i * CLASS_COUNT..(i + 1) * CLASS_COUNT], probs.data());
                }
            }
        }
    }
}

#[test]
fn empty_tissue_is_flagged() {
    let slide = noisy_slide(64, 64, 5);
    let map = predict_slide(&slide, &TissueMask::filled(64, 64, false), &detector(32, 0), PredictOptions::for_window(32)).unwrap();
    assert!(map.no_tissue);
    assert_eq!(map.windows, 0);
    assert!(class_map(&map).labels.iter().all(|&l| l == ClassLabel::NonTissue));
}

#[test]
fn window_size_must_match_checkpoint() {
    let slide = noisy_slide(64, 64, 5);
    let mask = TissueMask::filled(32, 32, true);
    assert!(predict_slide(&slide, &mask, &detector(32, 0), PredictOptions::for_window(32)).is_err());
}

fn single_pixel_map(p: [f32; CLASS_COUNT]) -> ProbabilityMap {
    ProbabilityMap {
        width: 1,
        height: 1,
        sums: p.to_vec(),
        counts: vec![1],
        tissue: vec![true],
        windows: 1,
        no_tissue: false,
    }
}

#[test]
fn argmax_examples() {
    assert_eq!(class_map(&single_pixel_map([0.125; 8])).labels[0], ClassLabel::TcPos);
    let mut p = [0.1 / 7.0; 8];
    p[5] = 0.9;
    assert_eq!(class_map(&single_pixel_map(p)).labels[0], ClassLabel::Necrosis);
}

#[test]
fn class_map_matches_brute_force_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(1..20), rng.gen_range(1..20));
        // Quantized values make ties common.
        let sums: Vec<f32> = (0..w * h * CLASS_COUNT).map(|_| rng.gen_range(0..4) as f32).collect();
        let counts: Vec<u32> = (0..w * h).map(|_| rng.gen_range(1..5)).collect();
        let tissue: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
        let map = ProbabilityMap { width: w, height: h, sums: sums.clone(), counts: counts.clone(), tissue: tissue.clone(), windows: 1, no_tissue: false };
        let cm = class_map(&map);
        for i in 0..w * h {
            let want = if !tissue[i] {
                7
            } else {
                let mut best = 0;
                for c in 1..CLASS_COUNT {
                    if sums[i * CLASS_COUNT + c] / counts[i] as f32 > sums[i * CLASS_COUNT + best] / counts[i] as f32 {
                        best = c;
                    }
                }
                best
            };
            assert_eq!(cm.labels[i].index(), want);
        }
    }
}

fn map_of(counts: &[(ClassLabel, usize)]) -> ClassMap {
    let labels: Vec<ClassLabel> = counts.iter().flat_map(|&(l, n)| std::iter::repeat(l).take(n)).collect();
    let n = labels.len();
    ClassMap::new(n, 1, labels).unwrap()
}

#[test]
fn tc_score_examples() {
    let s = tc_score(&map_of(&[(ClassLabel::TcPos, 30), (ClassLabel::TcNeg, 70), (ClassLabel::Stroma, 900)])).unwrap();
    assert_eq!(s.value, 30.0);
    assert_eq!((s.tc_pos_pixels, s.tc_neg_pixels), (30, 70));
    assert_eq!(tc_score(&map_of(&[(ClassLabel::TcNeg, 5), (ClassLabel::Necrosis, 9)])).unwrap().value, 0.0);
    assert!(matches!(tc_score(&map_of(&[(ClassLabel::Stroma, 10)])), Err(InferenceError::NoTumorDetected)));
}

fn random_class_map(rng: &mut ChaCha8Rng) -> ClassMap {
    let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
    ClassMap::new(w, h, (0..w * h).map(|_| ClassLabel::ALL[rng.gen_range(0..8)]).collect()).unwrap()
}

#[test]
fn tc_score_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let m = random_class_map(&mut rng);
        let mut pos = 0;
        let mut neg = 0;
        for y in 0..m.height {
            for x in 0..m.width {
                match m.get(x, y).index() {
                    0 => pos += 1,
                    1 => neg += 1,
                    _ => (),
                }
            }
        }
        match tc_score(&m) {
            Ok(s) => assert_eq!(s.value, pos as f64 * 100.0 / (pos + neg) as f64),
            Err(InferenceError::NoTumorDetected) => assert_eq!(pos + neg, 0),
            Err(e) => panic!("{e}"),
        }
    }
}

proptest! {
    #[test]
    fn permuting_non_tumor_classes_keeps_the_score(seed in any::<u64>(), perm in Just((2usize..8).collect::<Vec<_>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_class_map(&mut rng);
        let relabeled = ClassMap::new(m.width, m.height, m.labels.iter().map(|&l| if l.index() < 2 { l } else { ClassLabel::ALL[perm[l.index() - 2]] }).collect()).unwrap();
        prop_assert_eq!(tc_score(&m).ok(), tc_score(&relabeled).ok());
    }

    #[test]
    fn relabeling_negatives_raises_the_score(seed in any::<u64>(), k in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = random_class_map(&mut rng);
        let negs: Vec<usize> = (0..m.labels.len()).filter(|&i| m.labels[i] == ClassLabel::TcNeg).collect();
        prop_assume!(!negs.is_empty());
        let before = tc_score(&m).unwrap().value;
        for &i in negs.iter().take(k) {
            m.labels[i] = ClassLabel::TcPos;
        }
        prop_assert!(tc_score(&m).unwrap().value > before);
    }
}

#[test]
fn scores_csv_and_class_map_png_round_trip() {
    let rows = vec![
        ("a".to_string(), TcScore { value: 30.0, tc_pos_pixels: 3, tc_neg_pixels: 7 }),
        ("b".to_string(), TcScore { value: 100.0 / 3.0, tc_pos_pixels: 1, tc_neg_pixels: 2 }),
    ];
    let mut buf = Vec::new();
    write_scores(&mut buf, &rows).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("slide_id,score,pos_px,neg_px\n"));
    assert_eq!(read_scores(&buf[..]).unwrap(), rows);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = random_class_map(&mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    m.save_png(&path).unwrap();
    assert_eq!(ClassMap::load_png(&path).unwrap(), m);

    let slide = noisy_slide(64, 64, 5);
    let map = predict_slide(&slide, &TissueMask::filled(64, 64, true), &detector(32, 0), PredictOptions::for_window(32)).unwrap();
    let over = dir.path().join("o.png");
    map.save_overlay(&over).unwrap();
    let img = image::open(&over).unwrap().into_rgb8();
    assert_eq!(img.dimensions(), (64, 64));
}
