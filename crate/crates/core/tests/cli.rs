mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capsule_classify::data_io::{read_metrics_json, read_predictions_csv, save_checkpoint, Checkpoint};
use capsule_classify::image::InputSpec;
use capsule_classify::nn::init_params;
use capsule_classify::ClassCatalog;
use common::*;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsule-classify"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    train: PathBuf,
    val: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let train = write_blob_split(dir.path(), "train", &[30, 20, 10], 10, 1);
    let val = write_blob_split(dir.path(), "val", &[8, 8, 8], 10, 2);
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        r#"classes = ["red", "green", "blue"]
[train]
max_epochs = 3
[optim]
lr = 1e-3
[augment]
target_size = [8, 8]
"#,
    )
    .unwrap();
    Fixture {
        dir,
        train,
        val,
        config,
    }
}

fn run_train(f: &Fixture, out: &Path, seed: &str) -> Output {
    bin(&[
        "train",
        "--config",
        s(&f.config),
        "--train-manifest",
        s(&f.train),
        "--val-manifest",
        s(&f.val),
        "--arch",
        "linear:12x3",
        "--out-dir",
        s(out),
        "--seed",
        seed,
    ])
}

#[test]
fn train_predict_eval_round_trip() {
    let f = fixture();
    let out = f.dir.path().join("run1");
    let r = run_train(&f, &out, "7");
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["best.ckpt", "history.jsonl", "metrics.json", "val_predictions.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("# resolved config"));
    assert!(stderr.contains("seed = 7"));

    let again = f.dir.path().join("run2");
    assert!(run_train(&f, &again, "7").status.success());
    for name in ["history.jsonl", "best.ckpt", "metrics.json"] {
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }

    let preds = f.dir.path().join("preds.csv");
    let r = bin(&[
        "predict",
        "--ckpt",
        s(&out.join("best.ckpt")),
        "--manifest",
        s(&f.val),
        "--out",
        s(&preds),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        fs::read(&preds).unwrap(),
        fs::read(out.join("val_predictions.csv")).unwrap()
    );
    let p = read_predictions_csv(&preds).unwrap();
    assert_eq!(p.image_ids.len(), 24);
    assert_eq!(p.image_ids[0], "img_0000.png");
    for i in 0..p.probs.rows() {
        assert!((p.probs.row(i).iter().sum::<f64>() - 1.0).abs() <= 5e-6);
    }

    let metrics = f.dir.path().join("eval.json");
    let r = bin(&["eval", "--preds", s(&preds), "--truth", s(&f.val), "--out", s(&metrics)]);
    assert!(r.status.success());
    assert_eq!(
        read_metrics_json(&metrics).unwrap(),
        read_metrics_json(&out.join("metrics.json")).unwrap()
    );
    assert_eq!(fs::read(&metrics).unwrap(), fs::read(out.join("metrics.json")).unwrap());
    let printed: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(printed["aggregate"]["combined_score"].is_number());
}

#[test]
fn different_seed_changes_history() {
    let f = fixture();
    let a = f.dir.path().join("a");
    let b = f.dir.path().join("b");
    assert!(run_train(&f, &a, "1").status.success());
    assert!(run_train(&f, &b, "2").status.success());
    assert_ne!(
        fs::read(a.join("history.jsonl")).unwrap(),
        fs::read(b.join("history.jsonl")).unwrap()
    );
}

#[test]
fn missing_manifest_names_path() {
    let f = fixture();
    let r = bin(&[
        "train",
        "--config",
        s(&f.config),
        "--train-manifest",
        "/nonexistent/train.csv",
        "--val-manifest",
        s(&f.val),
        "--arch",
        "linear:12x3",
        "--out-dir",
        s(&f.dir.path().join("x")),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/train.csv"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["predict", "--ckpt", "x"]).status.code(), Some(2));
    assert_eq!(bin(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 3\n").unwrap();
    let r = bin(&["sample-check", "--config", s(&cfg), "--manifest", "m.csv"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epochs"));
}

#[test]
fn predict_rejects_catalog_mismatch() {
    let f = fixture();
    let arch = "linear:12x10".parse().unwrap();
    let input = InputSpec {
        width: 8,
        height: 8,
        normalization: Default::default(),
    };
    let ckpt = Checkpoint::new(&init_params(&arch, 1), 1, 0.5, 1, ClassCatalog::default(), input).unwrap();
    let path = f.dir.path().join("k10.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let r = bin(&[
        "predict",
        "--ckpt",
        s(&path),
        "--manifest",
        s(&f.val),
        "--out",
        s(&f.dir.path().join("p.csv")),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("unknown class '"), "{err}");
}

#[test]
fn predict_three_images() {
    let f = fixture();
    let out = f.dir.path().join("run");
    assert!(run_train(&f, &out, "3").status.success());
    let small = write_blob_split(f.dir.path(), "three", &[1, 1, 1], 12, 9);
    let preds = f.dir.path().join("three.csv");
    let r = bin(&[
        "predict",
        "--ckpt",
        s(&out.join("best.ckpt")),
        "--manifest",
        s(&small),
        "--out",
        s(&preds),
    ]);
    assert!(r.status.success());
    let text = fs::read_to_string(&preds).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image_path,red,green,blue");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1].split(',').next(), Some("img_0000.png"));
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn ensemble_and_eval_on_handmade_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = d.join("a.csv");
    let b = d.join("b.csv");
    write(
        &a,
        "image_path,red,green,blue\nx.png,0.700000,0.200000,0.100000\ny.png,0.100000,0.100000,0.800000\n",
    );
    write(
        &b,
        "image_path,red,green,blue\ny.png,0.300000,0.300000,0.400000\nx.png,0.500000,0.400000,0.100000\n",
    );

    let one = d.join("one.csv");
    assert!(bin(&["ensemble", "--preds", s(&a), "--out", s(&one)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&one).unwrap());

    let ab = d.join("ab.csv");
    let ba = d.join("ba.csv");
    assert!(bin(&["ensemble", "--preds", s(&a), s(&b), "--out", s(&ab)])
        .status
        .success());
    assert!(bin(&["ensemble", "--preds", s(&b), s(&a), "--out", s(&ba)])
        .status
        .success());
    assert_eq!(fs::read(&ab).unwrap(), fs::read(&ba).unwrap());
    assert_eq!(
        fs::read_to_string(&ab).unwrap(),
        "image_path,red,green,blue\nx.png,0.600000,0.300000,0.100000\ny.png,0.200000,0.200000,0.600000\n"
    );

    let truth = d.join("truth.csv");
    write(&truth, "image_path,label\ndir/x.png,red\ndir/y.png,blue\n");
    let onehot = d.join("onehot.csv");
    write(
        &onehot,
        "image_path,red,green,blue\nx.png,1.000000,0.000000,0.000000\ny.png,0.000000,0.000000,1.000000\n",
    );
    let r = bin(&["eval", "--preds", s(&onehot), "--truth", s(&truth)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    for key in ["balanced_accuracy", "mean_auc", "combined_score"] {
        assert_eq!(v["aggregate"][key], 1.0, "{key}");
    }

    let c = d.join("c.csv");
    write(&c, "image_path,red,blue\nx.png,0.5,0.5\ny.png,0.5,0.5\n");
    assert_eq!(
        bin(&["ensemble", "--preds", s(&a), s(&c), "--out", s(&d.join("bad.csv"))])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn sample_check_balances_classes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    let mut text = String::from("image_path,label\n");
    for i in 0..1000 {
        text.push_str(&format!("{i}.png,{}\n", if i < 900 { "Normal" } else { "Polyp" }));
    }
    write(&manifest, &text);
    let r = bin(&[
        "sample-check",
        "--manifest",
        s(&manifest),
        "--draws",
        "50000",
        "--seed",
        "4",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    for class in v["classes"].as_array().unwrap() {
        assert!((class["frequency"].as_f64().unwrap() - 0.5).abs() <= 0.01);
    }
    assert!(v["chi_square"]["p_value"].as_f64().unwrap() > 0.001);
    let again = bin(&[
        "sample-check",
        "--manifest",
        s(&manifest),
        "--draws",
        "50000",
        "--seed",
        "4",
    ]);
    assert_eq!(r.stdout, again.stdout);
}

#[test]
fn augment_preview_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let src = write_blob_split(d, "src", &[1, 0, 0], 12, 1);
    let img = src.parent().unwrap().join("src/img_0000.png");
    let cfg = d.join("aug.toml");
    write(&cfg, "[augment]\ntarget_size = [10, 10]\n");
    let run = |name: &str, index: &str| {
        let out = d.join(name);
        let r = bin(&[
            "augment-preview",
            "--config",
            s(&cfg),
            "--in",
            s(&img),
            "--seed",
            "5",
            "--index",
            index,
            "--out",
            s(&out),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        (
            fs::read(&out).unwrap(),
            fs::read_to_string(out.with_extension("json")).unwrap(),
        )
    };
    let (a_img, a_json) = run("a.png", "3");
    let (b_img, b_json) = run("b.png", "3");
    let (_, c_json) = run("c.png", "4");
    assert_eq!(a_img, b_img);
    assert_eq!(a_json, b_json);
    assert_ne!(a_json, c_json);
    let v: serde_json::Value = serde_json::from_str(&a_json).unwrap();
    assert_eq!(v["seed"], 5);
    assert!(v["params"]["jitter"]["brightness"].is_number());
}

#[test]
fn config_file_supplies_flags() {
    let f = fixture();
    let out = f.dir.path().join("from_config");
    let cfg = f.dir.path().join("full.toml");
    let base = fs::read_to_string(&f.config).unwrap();
    let text = base.replace(
        "[train]\n",
        &format!(
            "[train]\ntrain_manifest = {:?}\nval_manifest = {:?}\narch = \"linear:12x3\"\nout_dir = {:?}\n",
            s(&f.train),
            s(&f.val),
            s(&out)
        ),
    );
    write(&cfg, &format!("seed = 7\nthreads = 2\n{text}"));
    let r = bin(&["train", "--config", s(&cfg)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let flags = f.dir.path().join("from_flags");
    assert!(run_train(&f, &flags, "7").status.success());
    assert_eq!(
        fs::read(out.join("history.jsonl")).unwrap(),
        fs::read(flags.join("history.jsonl")).unwrap()
    );
}
