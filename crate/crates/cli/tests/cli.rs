use std::path::Path;
use std::process::{Command, Output};

use mmsr::experiment::{DataSpec, ExperimentManifest};

fn mmsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus: 2 train + 1 test per class, 1 mixed test image, 96 px.
fn tiny_corpus(dir: &Path) {
    let out = mmsr(&[
        "synth", "--out-dir", s(dir), "--seed", "3", "--n-train", "2", "--n-test", "1", "--n-mixed", "1", "--size", "96",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_manifest(dir: &Path) -> std::path::PathBuf {
    let mut m = ExperimentManifest::desk(7);
    m.data = DataSpec::Synthetic {
        size: 96,
        n_train: 2,
        n_test: 2,
        n_mixed_test: 2,
        noise_psnr_db: 40.0,
    };
    m.model.n_features = 4;
    m.model.n_res_blocks = 1;
    m.hr_patch = 32;
    m.batch = 2;
    m.eval_batches = 2;
    m.sr_schedule.total_iters = 4;
    m.fusion.n_features = 4;
    m.fusion.n_res_blocks = 1;
    m.fusion.hr_patch = 32;
    m.fusion.batch = 2;
    m.fusion.schedule.total_iters = 3;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, m.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&mmsr(&["--help"])), 0);
    for sub in ["synth", "degrade", "train-model", "train-fusion", "super-resolve", "evaluate", "experiment"] {
        assert_eq!(code(&mmsr(&[sub, "--help"])), 0, "{sub}");
    }
    let out = mmsr(&["degrade", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(out.stdout.is_empty());
    assert_eq!(code(&mmsr(&["experiment", "table9"])), 1);
    assert_eq!(code(&mmsr(&[])), 1);
}

#[test]
fn degrade_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let hr = dir.path().join("text/train/text-train-000_hr.png");
    let run = |name: &str| {
        let out = mmsr(&[
            "degrade", "--in", s(&hr), "--out", name, "--noise-db", "40", "--seed", "1", "--out-dir", s(dir.path()),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let a = run("lr_a.png");
    let b = run("lr_b.png");
    assert_eq!(a, b);
    let img: mmsr::Tensor<f32> = mmsr::data::load_image(&dir.path().join("lr_a.png")).unwrap();
    assert_eq!(img.shape(), &[3, 24, 24]);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not a png").unwrap();
    let out = mmsr(&["degrade", "--in", s(&junk), "--out", "x.png", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("decode"));
    let out = mmsr(&["degrade", "--in", s(&junk), "--out", "../x.png", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    let out = mmsr(&["synth", "--size", "90", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn generic_fusion_with_one_class_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmsr(&[
        "synth", "--out-dir", s(dir.path()), "--classes", "text", "--n-train", "2", "--n-test", "1", "--n-mixed", "0", "--size", "96",
    ]);
    assert_eq!(code(&out), 0);
    let out = mmsr(&[
        "train-fusion", "--mode", "generic", "--data", s(&dir.path().join("dataset.toml")), "--bank", "missing.mmsr",
        "--out-dir", s(dir.path()),
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least two classes"));
}

#[test]
fn train_fuse_super_resolve_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_corpus(d);
    let manifest = tiny_manifest(d);
    let data = d.join("dataset.toml");
    let models = d.join("models");
    for class in ["text", "texture", "generic"] {
        let out = mmsr(&[
            "train-model", "--data", s(&data), "--class", class, "--manifest", s(&manifest), "--out-dir", s(&models),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let bank = ["text", "texture", "generic"]
        .map(|c| models.join(format!("{c}.mmsr")).to_str().unwrap().to_string())
        .join(",");
    let out = mmsr(&[
        "train-fusion", "--mode", "class-specific", "--class", "text", "--data", s(&data), "--bank", &bank, "--manifest",
        s(&manifest), "--out-dir", s(d),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fusion = d.join("fusion-class-specific.mmsr");
    assert!(fusion.exists());

    let lr = d.join("text/test/text-test-000_lr.png");
    let sr_dir = d.join("sr");
    let out = mmsr(&["super-resolve", "--model", &bank, "--fusion", s(&fusion), s(&lr), "--out-dir", s(&sr_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sr: mmsr::Tensor<f32> = mmsr::data::load_image(&sr_dir.join("text-test-000_lr_sr.png")).unwrap();
    assert_eq!(sr.shape(), &[3, 96, 96]);
    // several models without a fusion net is ambiguous
    assert_eq!(code(&mmsr(&["super-resolve", "--model", &bank, s(&lr), "--out-dir", s(&sr_dir)])), 1);

    let out = mmsr(&["evaluate", "--data", s(&data), "--class", "text", "--bicubic", "--out-dir", s(d)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("eval-bicubic-text-test.csv")).unwrap();
    assert!(csv.contains("metric protocol"));
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    let out = mmsr(&[
        "evaluate", "--data", s(&data), "--class", "mixed", "--model", &bank, "--fusion", s(&fusion), "--out-dir", s(d),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("eval-mmsr-mixed-test.json").exists());
}

#[test]
fn experiment_writes_reports_under_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_manifest(dir.path());
    let out_dir = dir.path().join("out");
    let out = mmsr(&["experiment", "table3", "--manifest", s(&manifest), "--seed", "7", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let table = std::fs::read_to_string(runs[0].join("reports/table3.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("model"));
    for model in ["text", "texture", "generic", "mmsr"] {
        assert!(rows.iter().any(|r| r.starts_with(model)), "{model} row missing");
    }
    assert!(table.starts_with("# manifest sha256: "));
}
