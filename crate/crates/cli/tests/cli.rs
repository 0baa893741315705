use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcscore::stats::ScoreTable;

const BIN: &str = env!("CARGO_BIN_EXE_tcscore");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("TC_SCORER_LOG", "warn")
        .output()
        .expect("spawn tcscore")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "tcscore {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny cohort and short training runs so the full pipeline fits in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let json = r#"{
        "arch": {"base_channels": 4, "noise_dim": 16},
        "cohort": {"slides": 6, "train_slides": 3, "val_slides": 1, "max_val_patches": 200},
        "fs_vgg": {"iterations": 30, "eval_every": 10, "labeled_batch": 16, "unlabeled_batch": 0},
        "ae_ssl": {"iterations": 30, "eval_every": 10, "labeled_batch": 8, "unlabeled_batch": 8},
        "acgan": {"iterations": 30, "eval_every": 10, "labeled_batch": 8, "unlabeled_batch": 8,
                  "samples_per_class": 2, "record_batches": true},
        "compare": {"label_fraction": 0.5}
    }"#;
    std::fs::write(&path, json).unwrap();
    path
}

fn read_table(path: &Path) -> ScoreTable {
    ScoreTable::read_csv(std::fs::File::open(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn scoring_ground_truth_masks_reproduces_true_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["--config", s(&cfg), "synth", "--out", s(&data)]);

    let mut masks: Vec<String> = std::fs::read_dir(data.join("masks"))
        .unwrap()
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .collect();
    masks.sort();
    let scores = tmp.path().join("truth_scores.csv");
    let mut args = vec!["score", "--out", s(&scores)];
    args.extend(masks.iter().map(String::as_str));
    ok(&args);

    let table = read_table(&data.join("scores.csv"));
    let truth = table.column("TC_true").unwrap();
    let mut r = csv::Reader::from_path(&scores).unwrap();
    let rows: Vec<(String, f64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].parse().unwrap())
        })
        .collect();
    // Slides without tumor in the truth mask are left out of the scores.
    for (id, value) in &rows {
        let i = table.slide_ids.iter().position(|s| s == id).unwrap();
        assert_eq!(*value, truth[i], "{id}");
    }
    assert!(rows.len() >= table.len() - 1);
}

#[test]
fn concordance_of_identical_columns_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("t.csv");
    std::fs::write(&table, "slide_id,A,B\ns1,10,10\ns2,30,30\ns3,55.5,55.5\ns4,80,80\n").unwrap();
    let out = tmp.path().join("conc");
    ok(&["concord", "--scores", s(&table), "--out", s(&out)]);
    let mut r = csv::Reader::from_path(out.join("pairwise.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row[col("lcc")].parse::<f64>().unwrap(), 1.0);
        assert_eq!(row[col("mae")].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[col("opa")].parse::<f64>().unwrap(), 1.0);
    }
    // Two columns: no leave-one-out output.
    assert!(!out.join("leave_one_out.csv").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"acgan": {"iterations": 5, "learning_rate": 0.1}}"#).unwrap();
    let out = run(&["--config", s(&cfg), "synth", "--out", s(&tmp.path().join("d"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn unknown_architecture_is_rejected() {
    let out = run(&["train", "--data", "x", "--arch", "resnet", "--out", "y"]);
    assert!(!out.status.success());
}

#[test]
fn missing_inputs_fail_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["score", "--out", s(&tmp.path().join("o.csv")), s(&tmp.path().join("nope.png"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));
}

#[test]
fn pipeline_smoke_and_rerun_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let c = s(&cfg);
    let data = tmp.path().join("data");
    ok(&["--config", c, "--threads", "1", "synth", "--out", s(&data)]);

    let mut outputs = Vec::new();
    for rep in 0..2 {
        let root = tmp.path().join(format!("run{rep}"));
        let train = root.join("train");
        let summary = ok(&["--config", c, "--threads", "1", "train", "--data", s(&data), "--arch", "acgan", "--out", s(&train)]);
        assert!(summary.contains("\"arch\":\"acgan\""));
        for f in ["model.acgn", "generator.acgn", "trace.csv", "batches.csv", "summary.json", "config.json"] {
            assert!(train.join(f).exists(), "missing {f}");
        }
        assert!(train.join("samples").join("samples_000030.png").exists());

        let pred = root.join("pred");
        let slides: Vec<String> = ["slide_004", "slide_005"]
            .iter()
            .map(|id| data.join("slides").join(format!("{id}.png")).to_string_lossy().into_owned())
            .collect();
        let model = train.join("model.acgn");
        let mut args = vec!["--threads", "1", "predict", "--checkpoint", s(&model), "--out", s(&pred)];
        args.extend(slides.iter().map(String::as_str));
        ok(&args);
        for id in ["slide_004", "slide_005"] {
            for kind in ["tissue", "overlay", "classes"] {
                assert!(pred.join(format!("{id}.{kind}.png")).exists());
            }
        }

        let conc = root.join("conc");
        let scores = data.join("scores.csv");
        ok(&["--threads", "1", "concord", "--scores", s(&scores), "--reference", "TC_true", "--out", s(&conc)]);
        assert!(conc.join("leave_one_out.csv").exists());
        let curves = root.join("curves.csv");
        ok(&["--threads", "1", "curves", "--scores", s(&scores), "--out", s(&curves)]);
        outputs.push(files(&root));
    }
    assert_eq!(outputs[0].keys().collect::<Vec<_>>(), outputs[1].keys().collect::<Vec<_>>());
    for (path, bytes) in &outputs[0] {
        assert!(bytes == &outputs[1][path], "{} differs between reruns", path.display());
    }
}

#[test]
fn compare_emits_all_bar_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let c = s(&cfg);
    let data = tmp.path().join("data");
    ok(&["--config", c, "synth", "--out", s(&data)]);
    let out = tmp.path().join("cmp");
    ok(&["--config", c, "compare", "--data", s(&data), "--out", s(&out)]);
    let mut r = csv::Reader::from_path(out.join("bars.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let models: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(models, ["fs-vgg", "ae-ssl", "acgan"]);
    for row in &rows {
        // Correlations may be empty if a tiny model scores every slide alike.
        for cell in 1..3 {
            assert!(row[cell].is_empty() || row[cell].parse::<f64>().unwrap().is_finite());
        }
        assert!(row[3].parse::<f64>().unwrap().is_finite());
        assert_eq!(row[4].parse::<usize>().unwrap(), 2);
    }
    for arch in ["fs-vgg", "ae-ssl", "acgan"] {
        assert!(out.join(arch).join("model.acgn").exists());
    }
}
