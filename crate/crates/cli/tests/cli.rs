use std::path::Path;
use std::process::{Command, Output};

use vqa_core::harness::parse_table;

fn vqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqa")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn gen(dir: &Path, seed: &str) {
    let o = vqa(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--train",
        "24",
        "--val",
        "8",
        "--test",
        "8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: [&str; 8] = [
    "--epochs",
    "1",
    "--set",
    "d_model=16",
    "--set",
    "n_queries=4",
    "--set",
    "image_layers=1",
];

#[test]
fn train_requires_a_seed() {
    let o = vqa(&["train", "--data", "/nonexistent"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&vqa(&["flops", "--frobnicate"])), 2);
    assert_eq!(code(&vqa(&["no-such-command"])), 2);
    assert_eq!(code(&vqa(&["--help"])), 0);
}

#[test]
fn bad_config_value_is_a_contract_error() {
    assert_eq!(code(&vqa(&["flops", "--set", "d_model=abc"])), 1);
    assert_eq!(code(&vqa(&["flops", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&vqa(&["flops", "--preset", "huge"])), 1);
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.txt");
    std::fs::write(&p, "# small model\nd_model=16\nheads=2\n").unwrap();
    let from_file = stdout(&vqa(&["flops", "--config", p.to_str().unwrap()]));
    let default = stdout(&vqa(&["flops"]));
    let flag_wins = stdout(&vqa(&["flops", "--config", p.to_str().unwrap(), "--d-model", "32"]));
    assert_ne!(from_file, default);
    assert_eq!(flag_wins, default);
    assert!(default.lines().any(|l| l.starts_with("params=")));
}

#[test]
fn gradcheck_suite_passes() {
    let o = vqa(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(),
        10,
        "{}",
        stdout(&o)
    );
}

#[test]
fn train_eval_and_saliency_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    gen(&data, "3");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        ckpt.to_str().unwrap(),
    ];
    args.extend(TINY);
    let o = vqa(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l.starts_with("epoch=0 ")));

    let o = vqa(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_table(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, "test");
    let overall = rows[0].3.unwrap();
    assert!((0.0..=100.0).contains(&overall));

    let png = dir.path().join("s.ppm");
    let o = vqa(&[
        "saliency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--sample",
        "2",
        "--out",
        png.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(&png).unwrap().starts_with(b"P6"));
    let o = vqa(&[
        "saliency",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--sample",
        "999",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn checkpoint_for_other_answer_set_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ckpt = dir.path().join("m.ckpt");
    gen(&a, "3");
    let o = vqa(&[
        "gen-data",
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "4",
        "--train",
        "3",
        "--val",
        "2",
        "--test",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    let mut args = vec![
        "train",
        "--data",
        a.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ];
    args.extend(TINY);
    assert_eq!(code(&vqa(&args)), 0);
    let o = vqa(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}
