use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"{
  "data": {"train_n": 40, "test_n": 30},
  "model": {"embed_dim": 8, "num_heads": 2, "num_blocks": 2},
  "train": {"epochs": 1, "batch_size": 20},
  "synthesis": {"batch_size": 3, "iterations": 2},
  "ptq": {"iterations": 2}
}"#;

fn dfqlab(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dfqlab"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn dfqlab");
    assert!(out.status.success(), "dfqlab {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn accuracy(path: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    v["accuracy"].as_f64().unwrap()
}

#[test]
fn stage_by_stage_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();

    dfqlab(d, &["--seed", "3", "gen-data", "--out", "data", "--train-n", "40", "--test-n", "30"]);
    assert!(d.join("data/train.bin").is_file() && d.join("data/test.bin").is_file());

    dfqlab(d, &["--seed", "3", "train", "--config", "tiny.json", "--data", "data", "--out", "fp.ckpt"]);
    assert!(fs::read(d.join("fp.ckpt")).unwrap().starts_with(b"DFQCKPT1"));
    assert!(d.join("fp.train.json").is_file());

    dfqlab(d, &["--seed", "3", "synthesize", "--ckpt", "fp.ckpt", "--config", "tiny.json", "--method", "sardfq", "--out", "calib"]);
    assert!(fs::read(d.join("calib/images.f64")).unwrap().starts_with(b"DFQF64A1"));
    assert_eq!(fs::read_to_string(d.join("calib/labels.txt")).unwrap().lines().count(), 3);
    assert!(fs::read(d.join("calib/ppm/img000.ppm")).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let q_args = ["--seed", "3", "quantize", "--ckpt", "fp.ckpt", "--images", "calib/images.f64", "--wbits", "4", "--abits", "4"];
    let mut a = q_args.to_vec();
    a.extend(["--config", "tiny.json", "--out", "q.ckpt"]);
    dfqlab(d, &a);
    assert!(d.join("q.ptq.json").is_file());

    let stdout = dfqlab(d, &["eval", "--ckpt", "q.ckpt", "--data", "data", "--report", "q_eval.json"]);
    assert!(stdout.starts_with("accuracy "));
    let acc = accuracy(&d.join("q_eval.json"));
    assert!((0.0..=1.0).contains(&acc));

    // same seed, same quantized checkpoint
    a.pop();
    a.push("q2.ckpt");
    dfqlab(d, &a);
    assert_eq!(fs::read(d.join("q.ckpt")).unwrap(), fs::read(d.join("q2.ckpt")).unwrap());
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"bits": [[12, 4]]}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dfqlab"))
        .current_dir(tmp.path())
        .args(["run", "--config", "bad.json", "--out-dir", "r"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("W12A4"));
}
