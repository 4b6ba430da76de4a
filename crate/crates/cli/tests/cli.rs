use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: &str = "layers = [784, 12, 10]\nepochs = 2\nbatch_size = 16\nactive_connections_cap = 20\n";

fn pbsnet(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pbsnet")).args(args).output().expect("binary runs")
}

fn write_idx(dir: &Path, prefix: &str, n: usize, rng: &mut ChaCha8Rng) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend(d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for _ in 0..n {
        let label = rng.random_range(0..10u8);
        labels.push(label);
        // A bright band whose position encodes the label.
        images.extend((0..784).map(|p| if p / 28 / 3 == label as usize { 255 } else { rng.random_range(0..40) }));
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn fake_mnist(dir: &Path, train: usize, test: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    write_idx(dir, "train", train, &mut rng);
    write_idx(dir, "t10k", test, &mut rng);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_idx_file_is_a_user_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 16, 8);
    std::fs::remove_file(dir.path().join("t10k-labels-idx1-ubyte")).unwrap();
    let out = pbsnet(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t10k-labels-idx1-ubyte"));
}

#[test]
fn bad_config_key_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 16, 8);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    let out = pbsnet(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 0, 0);
    let out = pbsnet(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_is_deterministic_and_the_pipeline_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fake_mnist(d, 256, 64);
    let cfg = d.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let models: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let m = d.join(name);
            let out = pbsnet(&["train", "--config", s(&cfg), "--data", s(d), "--out", s(&m), "--seed", "7"]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            std::fs::read(m).unwrap()
        })
        .collect();
    assert_eq!(models[0], models[1]);

    let (m, c) = (d.join("a"), d.join("a.circ"));
    let out = pbsnet(&["compile", "--model", s(&m), "--data", s(d), "--out", s(&c)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = pbsnet(&["eval", "--circuit", s(&c), "--data", s(d), "--reference", s(&m), "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], 64);
    assert_eq!(v["reference_mismatches"], 0);

    let out = pbsnet(&["analyze", "--circuit", s(&c), "--format", "json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["circuit_bit_width"].as_u64().unwrap() >= 2);
}

#[test]
fn sweep_json_is_monotone() {
    let out = pbsnet(&["sweep", "--max", "64", "--format", "json"]);
    assert!(out.status.success());
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.len(), 64);
    let narrow: Vec<u64> = rows.iter().map(|r| r["narrow_bits"].as_u64().unwrap()).collect();
    assert!(narrow.windows(2).all(|w| w[0] <= w[1]));
}
