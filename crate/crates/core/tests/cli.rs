use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use unitquant::cli::draw_calibration;
use unitquant::data::{Dataset, Split, IMAGE_MAGIC, LABEL_MAGIC};

const SIDE: usize = 8;

fn write_idx(dir: &Path, prefix: &str, n: usize, seed: usize, floor: u8) {
    let mut img = Vec::new();
    img.extend(IMAGE_MAGIC.to_be_bytes());
    for d in [n, SIDE, SIDE] {
        img.extend((d as u32).to_be_bytes());
    }
    let mut lab = Vec::new();
    lab.extend(LABEL_MAGIC.to_be_bytes());
    lab.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let class = (i + seed) % 10;
        lab.push(class as u8);
        for p in 0..SIDE * SIDE {
            let (r, c) = (p / SIDE, p % SIDE);
            let on = r == class % SIDE || (class >= SIDE && c == class - SIDE);
            let noise = ((i * 31 + p * 17 + seed) % 23) as u8;
            img.push(if on { 200 + noise } else { floor + noise });
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

fn synthetic_dataset(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    std::fs::create_dir_all(&root).unwrap();
    write_idx(&root, "train", 240, 0, 0);
    write_idx(&root, "test", 60, 3, 30);
    root
}

fn run(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitquant"))
        .arg("--data")
        .arg(data)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn train(dir: &Path, data: &Path) -> PathBuf {
    let model = dir.join("float.json");
    ok(run(data, &["train", "--output", model.to_str().unwrap(), "--epochs", "3"]));
    model
}

fn quantize(dir: &Path, data: &Path, model: &Path, tag: &str, extra: &[&str]) -> Value {
    let out = dir.join(format!("{tag}.json"));
    let report = dir.join(format!("{tag}.report.json"));
    let mut args = vec![
        "quantize",
        "--model",
        model.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--calib-size",
        "64",
    ];
    args.extend(extra);
    ok(run(data, &args));
    serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap()
}

#[test]
fn report_schema_and_serialization_faithfulness() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(tmp.path());
    let model = train(tmp.path(), &data);
    let r = quantize(tmp.path(), &data, &model, "uw", &["--mode", "unitwise", "--steps", "30", "--bits-w", "4"]);

    for key in ["config", "fp_accuracy", "rtn_accuracy", "calibrated_accuracy", "per_unit", "mode_flags", "total_seconds"] {
        assert!(r.get(key).is_some(), "report lacks {key}");
    }
    for acc in ["fp_accuracy", "rtn_accuracy", "calibrated_accuracy"] {
        for k in ["top1", "top5"] {
            let v = r[acc][k].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let flags = &r["mode_flags"];
    assert_eq!(flags["method"], "unitwise");
    assert_eq!(flags["calib_split"], "train");
    assert_eq!(flags["eval_split"], "test");
    assert_eq!(flags["fisher_source"], "labels");
    assert_eq!(flags["input_mode"], "quantized");
    let units = r["per_unit"].as_array().unwrap();
    assert_eq!(units.len(), 4);
    for u in units {
        assert!(u["obj_after"].as_f64().unwrap() <= u["obj_before"].as_f64().unwrap());
        assert_eq!(u["steps"], 30);
        for k in ["seconds", "final_temperature", "layers", "changed_weights", "reverted"] {
            assert!(u.get(k).is_some(), "unit lacks {k}");
        }
    }
    assert_eq!(r["config"]["calib"]["steps"], 30);
    assert_eq!(r["config"]["calib_size"], 64);

    let eval: Value = serde_json::from_str(&ok(run(&data, &["eval", "--model", tmp.path().join("uw.json").to_str().unwrap()]))).unwrap();
    assert_eq!(eval["top1"], r["calibrated_accuracy"]["top1"]);
    assert_eq!(eval["topk"], r["calibrated_accuracy"]["top5"]);
}

#[test]
fn rtn_mode_is_a_passthrough_and_embedded_config_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(tmp.path());
    let model = train(tmp.path(), &data);
    let rtn = quantize(tmp.path(), &data, &model, "rtn", &["--mode", "rtn", "--bits-w", "3"]);
    assert_eq!(rtn["calibrated_accuracy"], rtn["rtn_accuracy"]);
    assert!(rtn["per_unit"].as_array().unwrap().is_empty());

    let first = quantize(tmp.path(), &data, &model, "a", &["--mode", "layerwise", "--steps", "20", "--seed", "5"]);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, first["config"].to_string()).unwrap();
    let second = quantize(tmp.path(), &data, &model, "b", &["--config", cfg.to_str().unwrap()]);
    assert_eq!(second["config"]["calib"], first["config"]["calib"]);
    assert_eq!(second["calibrated_accuracy"], first["calibrated_accuracy"]);
    let blob = |tag: &str| std::fs::read(tmp.path().join(format!("{tag}.bin"))).unwrap();
    assert_eq!(blob("a"), blob("b"));
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = run(&missing, &["train", "--output", tmp.path().join("m.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));

    let data = synthetic_dataset(tmp.path());
    let out = run(&data, &["quantize", "--model", "m.json", "--bits-w", "5"]);
    assert!(!out.status.success());
    let out = run(&data, &["quantize", "--model", tmp.path().join("absent.json").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn probe_hessian_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(tmp.path());
    let json = tmp.path().join("probe.json");
    let stdout = ok(run(&data, &["probe-hessian", "--output", json.to_str().unwrap(), "--csv", "--samples", "32"]));
    assert!(stdout.contains("|i-j|"));
    let p: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(p["params_per_layer"], serde_json::json!([512, 64, 80]));
    assert_eq!(p["mass"].as_array().unwrap().len(), 3);
    let mass = std::fs::read_to_string(tmp.path().join("probe.mass.csv")).unwrap();
    assert!(mass.starts_with("distance,blocks,mean_frobenius"));
    assert_eq!(mass.lines().count(), 4);
    let taylor = std::fs::read_to_string(tmp.path().join("probe.taylor.csv")).unwrap();
    assert_eq!(taylor.lines().count(), 6);
}

#[test]
fn calibration_draws_only_training_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = Dataset::new(synthetic_dataset(tmp.path()));
    let train = ds.load(Split::Train).unwrap();
    let test = ds.load(Split::Test).unwrap();
    let calib = draw_calibration(&train, 50, 7).unwrap();
    let row = |b: &unitquant::Batch, i: usize| b.inputs.rows(i, 1).into_data();
    for i in 0..calib.len() {
        let r = row(&calib, i);
        assert!((0..train.len()).any(|j| row(&train, j) == r));
        assert!(!(0..test.len()).any(|j| row(&test, j) == r));
    }
    assert_eq!(draw_calibration(&train, 50, 7).unwrap().labels, calib.labels);
    assert!(draw_calibration(&train, 0, 7).is_err());
    assert!(draw_calibration(&train, train.len() + 1, 7).is_err());
}
