use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mognet::{build_model, export_checkpoint, ModelConfig};

fn mognet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mognet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
n = 8
g = 2
k = 2
stages = 2
classes = 2
input_size = 8
epochs_stage1 = 2
epochs_stage2 = 2
batch_size = 20
augment_flip = false
";

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_writes_artifacts_and_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run1 = dir.path().join("run1");
    let o = mognet(&["train", "--config", &cfg, "--data", "synth", "--synth-count", "60", "--out", run1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "metrics.log", "manifest"] {
        assert!(run1.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run1.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.starts_with("stage=")));

    let run2 = dir.path().join("run2");
    let manifest = run1.join("manifest");
    let o = mognet(&["train", "--manifest", manifest.to_str().unwrap(), "--out", run2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(run1.join("model.ckpt")).unwrap(), fs::read(run2.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(run2.join("manifest")).unwrap());
}

#[test]
fn invalid_k_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "k = 0\n");
    let o = mognet(&["train", "--config", &cfg, "--data", "synth", "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`k`"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_fails() {
    let o = mognet(&["train", "--config", "/nonexistent/x.cfg", "--data", "synth", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = mognet(&["train", "--config", &cfg, "--data", "/nonexistent/cifar", "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

fn untrained_checkpoint(dir: &Path, classes: usize) -> String {
    let cfg = ModelConfig {
        n: 8,
        g: 2,
        k: 2,
        stages: 2,
        class_count: classes,
        input_size: 8,
        master_seed: 5,
        ..ModelConfig::default()
    };
    let p = dir.join("model.ckpt");
    export_checkpoint(&build_model(&cfg).unwrap().to_quant(), &p).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn eval_engines_agree_and_untrained_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 10);
    let o = mognet(&["eval", "--checkpoint", &ckpt, "--data", "synth", "--synth-count", "1000", "--engine", "both"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("disagreements=0"), "{out}");
    let acc: f64 = out
        .lines()
        .find(|l| l.starts_with("engine=integer"))
        .and_then(|l| l.split("accuracy=").nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((acc - 0.10).abs() <= 0.03, "accuracy {acc}");
}

#[test]
fn eval_rejects_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 2);
    let o = mognet(&["eval", "--checkpoint", &ckpt, "--data", "synth", "--limit", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    fs::write(&p, b"MOGNETCK\x01").unwrap();
    let o = mognet(&["eval", "--checkpoint", p.to_str().unwrap(), "--data", "synth"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("byte 8"), "{}", stderr(&o));
}

fn size_kv(dir: &Path, n: usize, g: usize) -> String {
    let cfg = write_config(dir, &format!("n = {n}\ng = {g}\n"));
    let o = mognet(&["size", "--config", &cfg, "--kv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
}

fn total_bits(kv: &str) -> u64 {
    kv.lines()
        .last()
        .and_then(|l| l.split_whitespace().next())
        .and_then(|f| f.strip_prefix("total_bits="))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn size_reports_compression_rates() {
    let dir = tempfile::tempdir().unwrap();
    let g4 = size_kv(dir.path(), 128, 4);
    let reduce: Vec<&str> = g4.lines().filter(|l| l.contains(".reduce")).collect();
    assert_eq!(reduce.len(), 6);
    assert!(reduce.iter().all(|l| l.ends_with("cr=17/144")), "{g4}");
    let g8 = size_kv(dir.path(), 128, 8);
    assert!(g8.lines().filter(|l| l.contains(".reduce")).all(|l| l.ends_with("cr=25/288")));

    let totals: Vec<u64> = [16, 32, 64, 128, 256].iter().map(|&n| total_bits(&size_kv(dir.path(), n, 4))).collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");

    let cfg = write_config(dir.path(), "n = 128\ng = 4\n");
    let text = stdout(&mognet(&["size", "--config", &cfg]));
    assert!(text.contains("1.72 Mb"), "{text}");
}

#[test]
fn size_of_checkpoint_matches_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 2);
    let from_ckpt = stdout(&mognet(&["size", "--checkpoint", &ckpt, "--kv"]));
    let cfg = write_config(dir.path(), "n = 8\ng = 2\nk = 2\nstages = 2\nclasses = 2\ninput_size = 8\nmaster_seed = 5\n");
    assert_eq!(from_ckpt, stdout(&mognet(&["size", "--config", &cfg, "--kv"])));
}

#[test]
fn gen_ca_prints_cell_histories() {
    let o = mognet(&["gen-ca", "--width", "5", "--steps", "2", "--seed-row", "00100"]);
    assert!(o.status.success());
    // columns are the successive rows 01110 and 11001
    assert_eq!(stdout(&o), "01\n11\n10\n10\n01\n");

    let explicit = mognet(&["gen-ca", "--rule", "30", "--width", "12", "--steps", "6", "--seed", "9"]);
    let default = mognet(&["gen-ca", "--width", "12", "--steps", "6", "--seed", "9"]);
    assert_eq!(stdout(&explicit), stdout(&default));
    assert_eq!(stdout(&default).lines().count(), 12);

    let o = mognet(&["gen-ca", "--width", "2", "--steps", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infer_prints_scores_and_label() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(dir.path(), 3);
    let img = dir.path().join("img.bin");
    fs::write(&img, (0..192).map(|i| (i * 7 % 256) as u8).collect::<Vec<u8>>()).unwrap();
    let o = mognet(&["infer", "--checkpoint", &ckpt, "--image", img.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let scores: Vec<f64> = out
        .lines()
        .find_map(|l| l.strip_prefix("scores="))
        .unwrap()
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 3);
    let label: usize = out.lines().find_map(|l| l.strip_prefix("label=")).unwrap().parse().unwrap();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(scores[label], best);

    fs::write(&img, [0u8; 10]).unwrap();
    let o = mognet(&["infer", "--checkpoint", &ckpt, "--image", img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
