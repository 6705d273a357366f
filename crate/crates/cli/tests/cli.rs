use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use etf_debias::data::read_dataset;
use etf_debias::etf::EtfFrame;
use etf_debias::metrics::FeatureDump;
use etf_debias::model::{Architecture, Checkpoint, CheckpointMeta, Mode, Model};
use etf_debias::numerics::{Matrix, Rng};
use etf_debias::train::read_log_csv;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_etfdebias"));
    c.env_remove("ETFDEBIAS_SEED");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn etfdebias")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    run(args, dir).status.code().expect("exit code")
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

/// Small train/test pair with K=4.
fn small_data(dir: &Path) {
    ok(&["gen", "--kind", "two-signal", "--k", "4", "--n", "100", "--ratio", "0.05", "--seed", "3", "--out", "tr.etfd"], dir);
    ok(&["gen", "--kind", "two-signal", "--k", "4", "--n", "20", "--split", "test", "--seed", "3", "--out", "te.etfd"], dir);
}

fn small_train(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train", "--train", "tr.etfd", "--test", "te.etfd", "--epochs", "4", "--batch", "64",
        "--hidden", "16", "--feature-dim", "8", "--out-dir", "run",
    ];
    args.extend_from_slice(extra);
    ok(&args, dir)
}

#[test]
fn gen_conflicting_counts_and_determinism() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let args = ["gen", "--kind", "two-signal", "--k", "10", "--ratio", "0.01", "--n", "5000", "--seed", "1"];
    ok(&[&args[..], &["--out", "a.etfd"]].concat(), p);
    ok(&[&args[..], &["--out", "b.etfd"]].concat(), p);
    let ds = read_dataset(p.join("a.etfd")).unwrap();
    assert_eq!(ds.len(), 50_000);
    for (aligned, conflicting) in ds.counts_per_class() {
        assert_eq!((aligned, conflicting), (4950, 50));
    }
    assert_eq!(fs::read(p.join("a.etfd")).unwrap(), fs::read(p.join("b.etfd")).unwrap());
    let side = json(&fs::read_to_string(p.join("a.etfd.json")).unwrap());
    assert_eq!(side["conflicting"], 500);
    assert_eq!(side["records"], 50_000);
}

#[test]
fn colored_mnist_without_idx_paths_is_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["gen", "--kind", "colored-mnist", "--ratio", "0.05", "--out", "x.etfd"], dir.path()), 2);
}

#[test]
fn train_then_eval_reproduces_final_accuracy() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    small_data(p);
    let stdout = small_train(p, &[]);
    assert_eq!(stdout.lines().count(), 4);
    assert!(stdout.lines().all(|l| l.starts_with("epoch ") && l.contains("acc_unbiased")));

    let logs = read_log_csv(fs::File::open(p.join("run/log.csv")).unwrap()).unwrap();
    let last = logs.last().unwrap();
    let report = json(&ok(&["eval", "--checkpoint", "run/checkpoint.etfc", "--data", "te.etfd"], p));
    assert_eq!(report["overall"].as_f64(), last.acc_test_unbiased);
    assert_eq!(report["conflicting"].as_f64(), last.acc_test_conflicting);

    let manifest = json(&fs::read_to_string(p.join("run/manifest.json")).unwrap());
    let side = json(&fs::read_to_string(p.join("tr.etfd.json")).unwrap());
    assert_eq!(manifest["train"]["crc32"], side["crc32"]);
    assert_ne!(manifest["train"]["crc32"], manifest["test"]["crc32"]);
    assert_eq!(manifest["config"]["epochs"], 4);
    assert_eq!(manifest["final_log"]["epoch"], 4);

    let oracle = json(&ok(
        &["eval", "--checkpoint", "run/checkpoint.etfc", "--data", "te.etfd", "--prime-policy", "oracle-bias"],
        p,
    ));
    assert!(oracle["overall"].is_number());
}

#[test]
fn training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    small_data(p);
    small_train(p, &[]);
    let first = fs::read(p.join("run/checkpoint.etfc")).unwrap();
    small_train(p, &["--threads", "3"]);
    assert_eq!(first, fs::read(p.join("run/checkpoint.etfc")).unwrap());
}

#[test]
fn config_precedence() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    small_data(p);
    fs::write(p.join("cfg.json"), r#"{"epochs": 2, "lr": 0.01, "mode": "vanilla"}"#).unwrap();
    let out = bin()
        .args(["train", "--train", "tr.etfd", "--config", "cfg.json", "--epochs", "1", "--hidden", "8", "--feature-dim", "4", "--out-dir", "run"])
        .env("ETFDEBIAS_SEED", "42")
        .current_dir(p)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&fs::read_to_string(p.join("run/manifest.json")).unwrap());
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["lr"], 0.01);
    assert_eq!(m["config"]["mode"], "vanilla");
    assert_eq!(m["config"]["seed"], 42);
    assert!(m["frame_fingerprint"].is_null());

    fs::write(p.join("cfg2.json"), r#"{"seed": 5, "epochs": 1, "hidden": 8, "feature_dim": 4}"#).unwrap();
    let out = bin()
        .args(["train", "--train", "tr.etfd", "--config", "cfg2.json", "--out-dir", "run2"])
        .env("ETFDEBIAS_SEED", "42")
        .current_dir(p)
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = json(&fs::read_to_string(p.join("run2/manifest.json")).unwrap());
    assert_eq!(m["config"]["seed"], 5);

    fs::write(p.join("bad.json"), r#"{"epochz": 1}"#).unwrap();
    assert_eq!(code(&["train", "--train", "tr.etfd", "--config", "bad.json", "--out-dir", "r3"], p), 2);
}

#[test]
fn error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    small_data(p);
    assert_eq!(code(&["train", "--no-such-flag"], p), 2);
    assert_eq!(code(&["train", "--train", "tr.etfd", "--mode", "nope", "--out-dir", "r"], p), 2);
    assert_eq!(code(&["train", "--train", "tr.etfd", "--epochs", "0", "--out-dir", "r"], p), 2);
    assert_eq!(code(&["train", "--train", "missing.etfd", "--out-dir", "r"], p), 3);
    // A test split is not a valid training set.
    assert_eq!(code(&["train", "--train", "te.etfd", "--epochs", "1", "--out-dir", "r"], p), 2);
    // Diverging run.
    assert_eq!(
        code(&["train", "--train", "tr.etfd", "--epochs", "3", "--lr", "1e200", "--hidden", "8", "--feature-dim", "4", "--out-dir", "r"], p),
        4
    );

    small_train(p, &[]);
    let mut bytes = fs::read(p.join("run/checkpoint.etfc")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(p.join("bad.etfc"), bytes).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "bad.etfc", "--data", "te.etfd"], p), 3);
    assert_eq!(code(&["eval", "--checkpoint", "run/checkpoint.etfc", "--data", "te.etfd", "--prime-policy", "x"], p), 2);

    ok(&["gen", "--kind", "two-signal", "--k", "5", "--n", "20", "--split", "test", "--out", "k5.etfd"], p);
    assert_eq!(code(&["eval", "--checkpoint", "run/checkpoint.etfc", "--data", "k5.etfd"], p), 2);
}

/// Checkpoint whose learnable-feature block is the simplex frame itself.
fn etf_checkpoint(frame: &EtfFrame, input_dim: usize) -> Checkpoint {
    let (d, k) = frame.primes().shape();
    let arch = Architecture::mlp3(input_dim, 6, d, k, false);
    let mut model = Model::init(&arch, &mut Rng::new(0, 3)).unwrap();
    model.classifier.weight = frame.primes().clone();
    model.classifier.bias = vec![0.0; k];
    Checkpoint {
        meta: CheckpointMeta {
            architecture: arch,
            mode: Mode::Vanilla,
            num_classes: k,
            num_biases: k,
            feature_dim: d,
            alpha: 0.0,
            seed: 0,
            frame: None,
        },
        model,
        frame: None,
    }
}

#[test]
fn metrics_on_exact_etf_features() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let (d, k, per) = (8, 4, 6);
    let frame = EtfFrame::build(d, k, &mut Rng::new(11, 5)).unwrap();
    let m = frame.primes();
    let n = k * per;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let aligned: Vec<bool> = (0..n).map(|i| (i / k) % 2 == 0).collect();
    let dump = FeatureDump {
        features: Matrix::from_fn(n, d, |i, j| f64::from(m[(j, labels[i])] as f32)),
        biases: labels.iter().enumerate().map(|(i, &l)| if aligned[i] { l } else { (l + 1) % k }).collect(),
        labels,
        aligned,
        num_classes: k,
        flags: 0,
    };
    dump.save(p.join("f.etff")).unwrap();
    etf_checkpoint(&frame, 3).save(p.join("w.etfc")).unwrap();

    let text = ok(&["metrics", "--features", "f.etff", "--weights", "w.etfc"], p);
    assert_eq!(text, ok(&["metrics", "--features", "f.etff", "--weights", "w.etfc"], p));
    let v = json(&text);
    for subset in ["all", "aligned", "conflicting"] {
        let r = &v[subset];
        for key in ["nc1", "nc2", "nc3"] {
            let x = r[key].as_f64().unwrap_or_else(|| panic!("{subset}.{key}: {r}"));
            assert!(x.abs() <= 1e-6, "{subset}.{key} = {x}");
        }
        assert_eq!(r["nc4_agreement"], 1.0);
    }

    let v = json(&ok(&["metrics", "--features", "f.etff", "--subset", "all"], p));
    assert!(v["nc1"].as_f64().unwrap().abs() <= 1e-6);
    assert!(v["nc2"].is_null() && v["nc3"].is_null() && v["nc4_agreement"].is_null());
}

#[test]
fn metrics_flag_missing_subset_class() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let dump = FeatureDump {
        features: Rng::new(1, 6).normal_matrix(6, 3).map(|x| f64::from(x as f32)),
        labels: vec![0, 1, 2, 0, 1, 2],
        biases: vec![0, 1, 2, 1, 1, 2],
        aligned: vec![true, true, true, false, true, true],
        num_classes: 3,
        flags: 0,
    };
    dump.save(p.join("f.etff")).unwrap();
    let v = json(&ok(&["metrics", "--features", "f.etff", "--subset", "conflicting"], p));
    assert!(v["nc1"].is_null());
    assert!(v["flags"][0].as_str().unwrap().starts_with("absent"));
}

#[test]
fn features_dump_matches_dataset() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    small_data(p);
    small_train(p, &[]);
    ok(&["features", "--checkpoint", "run/checkpoint.etfc", "--data", "te.etfd", "--out", "te.etff"], p);
    let dump = FeatureDump::load(p.join("te.etff")).unwrap();
    let ds = read_dataset(p.join("te.etfd")).unwrap();
    assert_eq!(dump.len(), ds.len());
    assert_eq!(dump.features.cols(), 8);
    assert_eq!(dump.flags, etf_debias::metrics::FLAG_TEST_SPLIT);
    let v = json(&ok(&["metrics", "--features", "te.etff", "--weights", "run/checkpoint.etfc"], p));
    assert!(v["all"]["nc2"].is_number());
}

#[test]
fn verify_etf_and_grad() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let v = json(&ok(&["verify", "--what", "etf", "--k", "10", "--d", "64", "--seed", "0"], p));
    assert_eq!(v["pass"], true);
    assert!(v["max_gram_error"].as_f64().unwrap() <= 1e-9);
    assert_eq!(code(&["verify", "--what", "etf", "--k", "10", "--d", "5"], p), 2);

    small_data(p);
    small_train(p, &[]);
    let v = json(&ok(&["verify", "--what", "etf", "--checkpoint", "run/checkpoint.etfc"], p));
    assert_eq!(v["pass"], true);

    let v = json(&ok(&["verify", "--what", "grad", "--checkpoint", "run/checkpoint.etfc", "--data", "tr.etfd"], p));
    assert_eq!(v["pass"], true);
    assert!(v["max_residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(v["decomposition"]["samples"], 64);
    assert_eq!(v["ordering"]["holds"], true);
    assert_eq!(v["a_alignment"].as_array().unwrap().len(), 4);
    let g = json(&ok(&["gradcheck", "--checkpoint", "run/checkpoint.etfc", "--data", "tr.etfd"], p));
    assert_eq!(g, v);

    let mut ckpt = Checkpoint::load(p.join("run/checkpoint.etfc")).unwrap();
    ckpt.frame.as_mut().unwrap().primes_mut()[(0, 0)] += 0.01;
    ckpt.save(p.join("bent.etfc")).unwrap();
    let out = run(&["verify", "--what", "etf", "--checkpoint", "bent.etfc"], p);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(json(&String::from_utf8(out.stdout).unwrap())["pass"], false);
}
