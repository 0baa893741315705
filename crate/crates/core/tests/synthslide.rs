use tcscore::datapipe::{consolidate_annotations, tissue_mask, ConsolidateOptions};
use tcscore::inference::{tc_score, ClassMap};
use tcscore::models::ClassLabel;
use tcscore::stats::{rater_variability, DeltaScale};
use tcscore::synthslide::*;

fn tumor_heavy(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        target_tc: 30.0,
        class_mix: [0.3, 0.3, 0.05, 0.05, 0.05, 0.05, 0.2, 0.0],
        ..SynthConfig::default()
    }
}

#[test]
fn true_tc_tracks_the_target() {
    for seed in 0..8 {
        let s = generate_slide(&tumor_heavy(seed)).unwrap();
        assert!((s.truth.true_tc - 30.0).abs() <= 5.0, "seed {seed}: {}", s.truth.true_tc);
    }
    for target in [0.0, 12.5, 77.0, 100.0] {
        let s = generate_slide(&SynthConfig { target_tc: target, ..SynthConfig::default() }).unwrap();
        assert!((s.truth.true_tc - target).abs() <= 5.0, "target {target}: {}", s.truth.true_tc);
    }
}

#[test]
fn same_seed_same_slide() {
    let cfg = SynthConfig { seed: 42, ..SynthConfig::default() };
    assert_eq!(generate_slide(&cfg).unwrap(), generate_slide(&cfg).unwrap());
    let other = generate_slide(&SynthConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(other.slide.pixels, generate_slide(&SynthConfig { seed: 42, ..SynthConfig::default() }).unwrap().slide.pixels);
}

#[test]
fn noiseless_raters_agree_with_truth() {
    let s = generate_slide(&SynthConfig { rater_noise_sd: 0.0, ..SynthConfig::default() }).unwrap();
    assert_eq!(s.truth.rater_scores, [s.truth.true_tc; 3]);
    let cols: Vec<&[f64]> = s.truth.rater_scores.iter().map(std::slice::from_ref).collect();
    assert_eq!(rater_variability(&cols, DeltaScale::default()).unwrap().delta, vec![0.0]);
}

#[test]
fn stored_true_tc_is_the_mask_score() {
    for seed in 0..5 {
        let s = generate_slide(&SynthConfig { seed, target_tc: seed as f64 * 20.0, ..SynthConfig::default() }).unwrap();
        assert_eq!(tc_score(&s.truth.class_mask).unwrap().value, s.truth.true_tc);
    }
}

fn proportions(mask: &ClassMap) -> [f64; 8] {
    let mut c = [0.0; 8];
    for l in &mask.labels {
        c[l.index()] += 1.0;
    }
    let tissue: f64 = c[..7].iter().sum();
    c.map(|v| v / tissue)
}

#[test]
fn class_proportions_follow_the_mix() {
    for seed in 0..10 {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let s = generate_slide(&cfg).unwrap();
        let p = proportions(&s.truth.class_mask);
        let tumor_w = cfg.class_mix[0] + cfg.class_mix[1];
        assert!((p[0] + p[1] - tumor_w).abs() <= 0.05, "seed {seed}: tumor {}", p[0] + p[1]);
        for c in 2..7 {
            if cfg.class_mix[c] >= 0.05 {
                assert!((p[c] - cfg.class_mix[c]).abs() <= 0.05, "seed {seed} class {c}: {} vs {}", p[c], cfg.class_mix[c]);
            }
        }
    }
}

#[test]
fn concordant_annotations_cover_most_tissue() {
    for seed in 0..6 {
        let s = generate_slide(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let (w, h) = (s.slide.width, s.slide.height);
        for a in &s.annotations {
            a.validate().unwrap();
            assert!(a.regions.iter().all(|r| r.label != ClassLabel::NonTissue));
        }
        let c = consolidate_annotations(&s.annotations[0], &s.annotations[1], w, h, ConsolidateOptions::default()).unwrap();
        let mask = &s.truth.class_mask.labels;
        let tissue = mask.iter().filter(|&&l| l != ClassLabel::NonTissue).count();
        let concordant = (0..w * h).filter(|&i| mask[i] != ClassLabel::NonTissue && c.labels[i].is_some()).count();
        let frac = concordant as f64 / tissue as f64;
        assert!(frac >= 0.7, "seed {seed}: {frac}");
        // Concordant labels are the true ones.
        let wrong = (0..w * h).filter(|&i| mask[i] != ClassLabel::NonTissue && c.labels[i].is_some_and(|l| l != mask[i])).count();
        assert!(wrong as f64 / tissue as f64 <= 0.01, "seed {seed}: {wrong} wrong");
    }
}

#[test]
fn tissue_is_detectable() {
    for seed in 0..4 {
        let s = generate_slide(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let m = tissue_mask(&s.slide);
        let truth: Vec<bool> = s.truth.class_mask.labels.iter().map(|&l| l != ClassLabel::NonTissue).collect();
        let inter = m.data.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
        let union = m.data.iter().zip(&truth).filter(|(a, b)| **a || **b).count();
        assert!(inter as f64 / union as f64 >= 0.97);
    }
}

#[test]
fn infeasible_configs_are_rejected() {
    let base = SynthConfig::default();
    let bad = [
        SynthConfig { tissue_fraction: 0.0, ..base.clone() },
        SynthConfig { class_mix: [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1], ..base.clone() },
        SynthConfig { class_mix: [0.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.0], ..base.clone() },
        SynthConfig { class_mix: [0.2; 8], ..base.clone() },
        SynthConfig { width: 100, ..base.clone() },
        SynthConfig { target_tc: 101.0, ..base.clone() },
    ];
    for cfg in bad {
        assert!(matches!(generate_slide(&cfg), Err(SynthError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn cohort_targets_are_stratified() {
    let template = SynthConfig { seed: 5, width: 160, height: 160, ..SynthConfig::default() };
    let c = generate_cohort(10, &template, (0.0, 100.0)).unwrap();
    let t = c.scores.column(TRUTH_COLUMN).unwrap();
    let span = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
    assert!(span >= 80.0, "span {span}");
    assert_eq!(c.scores.names(), vec!["TC_1", "TC_2", "TC_3", "TC_true"]);
    assert_eq!(c.scores.slide_ids[3], "slide_003");
    assert_eq!(c.slides[3].annotations[1].slide_id, "slide_003");
    assert_eq!(generate_cohort(10, &template, (0.0, 100.0)).unwrap().scores, c.scores);

    let one = generate_cohort(1, &template, (20.0, 60.0)).unwrap();
    assert!((one.scores.column(TRUTH_COLUMN).unwrap()[0] - 40.0).abs() <= 5.0);
}

#[test]
fn cohort_files_round_trip() {
    let template = SynthConfig { seed: 1, width: 128, height: 128, ..SynthConfig::default() };
    let c = generate_cohort(2, &template, (10.0, 90.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.write(dir.path()).unwrap();
    let id = &c.slides[0].slide.id;
    let slide = tcscore::datapipe::Slide::load_png(&CohortPaths::slide(dir.path(), id)).unwrap();
    assert_eq!(slide.pixels, c.slides[0].slide.pixels);
    let a = tcscore::datapipe::AnnotationSet::load(&CohortPaths::annotation(dir.path(), id, ANNOTATORS[0])).unwrap();
    assert_eq!(a, c.slides[0].annotations[0]);
    let m = ClassMap::load_png(&CohortPaths::truth_mask(dir.path(), id)).unwrap();
    assert_eq!(m, c.slides[0].truth.class_mask);
    let t = tcscore::stats::ScoreTable::read_csv(std::fs::File::open(CohortPaths::scores(dir.path())).unwrap()).unwrap();
    assert_eq!(t, c.scores);
}
