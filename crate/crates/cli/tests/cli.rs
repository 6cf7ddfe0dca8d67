use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xai-kit"));
    c.env("XAI_KIT_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn xai-kit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Dark noisy image, with a bright 5x5 square when `square` is set.
fn sample_image(size: u32, square: bool, salt: u32) -> RgbImage {
    let ox = 2 + salt % (size - 8);
    let oy = 2 + (salt / 3) % (size - 8);
    RgbImage::from_fn(size, size, |x, y| {
        let noise = ((x * 31 + y * 17 + salt * 13) % 23) as u8;
        let inside = square && (ox..ox + 5).contains(&x) && (oy..oy + 5).contains(&y);
        let v = if inside { 230 - noise } else { 20 + noise };
        Rgb([v, v, v])
    })
}

fn make_dataset(root: &Path, no: usize, yes: usize, size: u32) {
    for (dir, n, square) in [("no", no, false), ("yes", yes, true)] {
        let d = root.join(dir);
        fs::create_dir_all(&d).unwrap();
        for i in 0..n {
            sample_image(size, square, i as u32)
                .save(d.join(format!("img{i:03}.png")))
                .unwrap();
        }
    }
}

const SMALL_MODEL: [&str; 8] = [
    "--image-size",
    "16",
    "--filters",
    "3,4",
    "--dense-units",
    "8",
    "--dropout",
    "0.0",
];

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--data-dir", data, "--out", out, "--epochs", "2", "--batch-size", "8", "--lr", "0.01"];
    v.extend_from_slice(&SMALL_MODEL);
    v.extend_from_slice(extra);
    v
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn balanced_data_trains_with_the_standard_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 10, 10, 16);
    let out = tmp.path().join("m.cxk");
    let o = run(&train_args(&s(&data), &s(&out), &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("(balanced)"), "{text}");
    assert!(text.contains("branch: standard"), "{text}");
    for name in ["m.cxk", "m.report.csv", "m.split.json", "m.manifest.json"] {
        assert!(tmp.path().join(name).exists(), "{name} missing");
    }
    let report = fs::read_to_string(tmp.path().join("m.report.csv")).unwrap();
    assert!(report.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
    assert_eq!(report.lines().count(), 3);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("m.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["artifacts"].as_array().unwrap().len() >= 3);
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
    // The dataset directory is left as it was.
    assert_eq!(fs::read_dir(data.join("no")).unwrap().count(), 10);
}

#[test]
fn imbalanced_counts_select_cost_sensitive_and_split_regenerates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 98, 155, 12);
    let out = tmp.path().join("m.cxk");
    let mut args = vec!["train", "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs", "0"];
    args.extend_from_slice(&["--image-size", "12", "--filters", "2,2", "--dense-units", "4"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("no=98 yes=155 (imbalanced)"), "{text}");
    assert!(text.contains("branch: cost-sensitive"), "{text}");
    assert!(text.contains("split: train=202 val=25 test=26"), "{text}");

    let metrics = tmp.path().join("test.json");
    let o = run(&[
        "evaluate",
        "--model",
        out.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("samples:     26"));

    let forced = run(&{
        let mut a = args.clone();
        a.push("--standard");
        a
    });
    assert!(stdout(&forced).contains("branch: standard"));
}

#[test]
fn unit_weights_reproduce_the_standard_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 8, 12, 16);
    let a = tmp.path().join("a.cxk");
    let b = tmp.path().join("b.cxk");
    let o = run(&train_args(&s(&data), &s(&a), &["--standard"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&train_args(&s(&data), &s(&b), &["--cost-sensitive", "--weights", "1,1"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

fn trained_model(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    make_dataset(&data, 12, 12, 16);
    let out = tmp.join("m.cxk");
    let mut args = train_args(data.to_str().unwrap(), out.to_str().unwrap(), &["--seed", "3"]);
    args[6] = "40";
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    (data, out)
}

#[test]
fn evaluate_writes_the_metrics_schema_and_roc() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = trained_model(tmp.path());
    let metrics = tmp.path().join("train.json");
    let o = run(&[
        "evaluate",
        "--model",
        &s(&model),
        "--data-dir",
        &s(&data),
        "--split",
        "train",
        "--seed",
        "3",
        "--out",
        &s(&metrics),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy:    1.0000"), "{}", stdout(&o));

    let doc: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let mut keys: Vec<&str> = doc.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["accuracy", "auc", "confusion", "f1", "precision", "recall", "specificity", "threshold"]
    );
    let mut ckeys: Vec<&str> = doc["confusion"].as_object().unwrap().keys().map(String::as_str).collect();
    ckeys.sort_unstable();
    assert_eq!(ckeys, ["fn", "fp", "tn", "tp"]);
    let roc = fs::read_to_string(tmp.path().join("train.roc.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr,threshold\n0,0,inf\n"));
    assert!(roc.contains("\n1,1,"));

    let replay = tmp.path().join("replay.json");
    let o = run(&[
        "evaluate",
        "--model",
        &s(&model),
        "--data-dir",
        &s(&data),
        "--split",
        "train",
        "--split-manifest",
        &s(&tmp.path().join("m.split.json")),
        "--out",
        &s(&replay),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&metrics).unwrap(), fs::read(&replay).unwrap());
}

#[test]
fn explain_methods_sidecars_and_panel() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, model) = trained_model(tmp.path());
    let img = tmp.path().join("probe.png");
    sample_image(16, true, 4).save(&img).unwrap();
    let common = |method: &str, out: &Path, extra: &[&str]| {
        let mut a = vec![
            "explain".to_string(),
            "--model".into(),
            s(&model),
            "--image".into(),
            s(&img),
            "--method".into(),
            method.into(),
            "--out".into(),
            s(out),
            "--lime-samples".into(),
            "60".into(),
            "--regions".into(),
            "9".into(),
            "--steps".into(),
            "5".into(),
            "--samples".into(),
            "4".into(),
        ];
        a.extend(extra.iter().map(|x| x.to_string()));
        bin().args(&a).output().unwrap()
    };

    let sal = tmp.path().join("sal.png");
    let o = common("saliency", &sal, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sg = tmp.path().join("sg.png");
    let o = common("smoothgrad", &sg, &["--sigma-fraction", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&sal).unwrap(), fs::read(&sg).unwrap());

    let side: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("sal.json")).unwrap()).unwrap();
    let probs: Vec<f64> = side["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let argmax = if probs[1] > probs[0] { 1 } else { 0 };
    assert_eq!(side["target_class"], argmax);
    assert_eq!(side["method"], "saliency");
    for key in ["min", "max", "layer", "config"] {
        assert!(side.get(key).is_some(), "sidecar lacks {key}");
    }

    let gc = tmp.path().join("gc.png");
    let o = common("grad-cam", &gc, &["--class", "0", "--layer", "conv1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let side: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("gc.json")).unwrap()).unwrap();
    assert_eq!(side["target_class"], 0);
    assert_eq!(side["layer"], "conv1");

    let all = tmp.path().join("all").join("x.png");
    let o = common("all", &all, &["--panel"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("all");
    for tag in [
        "saliency",
        "smoothgrad",
        "grad-cam",
        "grad-campp",
        "score-cam",
        "faster-score-cam",
        "lime",
        "class-model",
    ] {
        assert!(dir.join(format!("x.{tag}.png")).exists(), "{tag} png");
        assert!(dir.join(format!("x.{tag}.json")).exists(), "{tag} json");
    }
    let panel = image::open(dir.join("x.panel.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (16 * 9, 16));
    let lime: Value = serde_json::from_str(&fs::read_to_string(dir.join("x.lime.json")).unwrap()).unwrap();
    assert!(lime["regions"].as_array().unwrap()[0].get("weight").is_some());
    assert!(lime.get("r2").is_some() && lime.get("intercept").is_some());

    let o = common("cam", &gc, &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = common("grad-cam", &gc, &["--class", "5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = common("grad-cam", &gc, &["--layer", "conv7"]);
    assert_eq!(o.status.code(), Some(1));
}

fn metrics_json(tp: usize, fn_: usize, fp: usize, tn: usize) -> String {
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    serde_json::json!({
        "accuracy": (tp + tn) as f64 / (tp + fn_ + fp + tn) as f64,
        "precision": p,
        "recall": r,
        "f1": 2.0 * p * r / (p + r),
        "specificity": tn as f64 / (tn + fp) as f64,
        "auc": 0.5,
        "confusion": {"tp": tp, "fn": fn_, "fp": fp, "tn": tn},
        "threshold": 0.5,
    })
    .to_string()
}

#[test]
fn report_rows_follow_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("inception.json");
    let b = tmp.path().join("cs.json");
    fs::write(&a, metrics_json(148, 2, 0, 150)).unwrap();
    fs::write(&b, metrics_json(16, 0, 2, 8)).unwrap();
    let out = tmp.path().join("summary.csv");
    let o = run(&["report", "--inputs", &format!("cs-cnn={}", s(&b)), &s(&a), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "model,accuracy,precision,recall,f1,specificity,auc");
    assert_eq!(lines[1], "cs-cnn,0.9231,0.8889,1.0000,0.9412,0.8000,0.5000");
    assert_eq!(lines[2], "inception,0.9933,1.0000,0.9867,0.9933,1.0000,0.5000");

    let bad = tmp.path().join("broken.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = run(&["report", "--inputs", &s(&bad), "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("broken.json"));
}

#[test]
fn usage_and_runtime_exit_codes() {
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--data-dir", "x", "--out", "y", "--weights", "1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["train", "--data-dir", "x", "--out", "y", "--standard", "--cost-sensitive"]).status.code(),
        Some(2)
    );
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data-dir", &s(&tmp.path().join("missing")), "--out", &s(&tmp.path().join("m.cxk"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["evaluate", "--model", &s(&tmp.path().join("nope.cxk")), "--data-dir", "x", "--out", "y.json"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bin()
        .env("XAI_KIT_THREADS", "zero")
        .args(["report", "--inputs", "a.json", "--out", "b.csv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
