use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uniinit::data::{encode_idx_images, encode_idx_labels};

const BIN: &str = env!("CARGO_BIN_EXE_uniinit");

/// 4x4 images whose bright pixel depends on the digit, so the toy tasks are learnable.
fn write_split(dir: &Path, prefix: &str, n: usize, salt: usize) {
    let labels: Vec<u8> = (0..n).map(|i| ((i * 7 + salt) % 10) as u8).collect();
    let mut pixels = Vec::with_capacity(n * 16);
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..16 {
            let base = if j == l as usize { 200 } else { 20 };
            pixels.push((base + (i * 31 + j * 17 + salt) % 40) as u8);
        }
    }
    std::fs::write(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        encode_idx_images(n, 4, 4, &pixels),
    )
    .unwrap();
    std::fs::write(
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
        encode_idx_labels(&labels),
    )
    .unwrap();
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train", 300, 0);
    write_split(dir.path(), "t10k", 100, 3);
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("UNIINIT_MNIST_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--threads",
        "1",
        "pretrain",
        "--data-dir",
        data,
        "--out",
        out,
        "--dims",
        "16,8,8,2",
        "--n-perturb",
        "8",
        "--n-uniform",
        "8",
        "--epochs",
        "1",
        "--window",
        "4",
    ]
}

#[test]
fn parse_check_accepts_fixture_and_reports_offsets() {
    let dir = fixture();
    let o = run(&["parse-check", "--data-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("300 images of 4x4"));
    assert!(stdout.contains("100 labels"));

    let bad = dir.path().join("bad");
    let mut bytes = encode_idx_labels(&[1, 2, 3]);
    bytes[9] = 12;
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&["parse-check", s(&bad)]);
    assert_eq!(code(&o), 3);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("offset 9"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let o = run(&["parse-check", "--data-dir", s(&dir.path().join("missing"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn print_config_echoes_recipe_constants() {
    let o = run(&["pretrain", "--print-config"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pretrain"]["lr"], 2e-4);
    assert_eq!(v["pretrain"]["lambda"], 0.4);
    assert_eq!(v["pretrain"]["n_perturb"], 256);
    assert_eq!(v["finetune"]["batch"], 50);
    assert_eq!(v["arch"]["dims"], serde_json::json!([784, 392, 392, 392, 2]));

    let o = run(&["pretrain", "--print-config", "--lambda", "0", "--xi", "0"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        (v["pretrain"]["lambda"].as_f64(), v["pretrain"]["xi"].as_f64()),
        (Some(0.0), Some(0.0))
    );
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"pretrain": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", s(&cfg)])), 2);
    assert_eq!(code(&run(&["pretrain", "--dims", "784,1"])), 2);
    assert_eq!(code(&run(&["benchmark", "--N", "7", "--print-config"])), 2);
    assert_eq!(code(&run(&["--threads", "0", "make-tasks", "--k", "2"])), 2);
    assert_eq!(code(&run(&["make-tasks", "--k", "0"])), 2);

    let tasks = dir.path().join("tasks.txt");
    std::fs::write(&tasks, "5\n1023\n").unwrap();
    let data = fixture();
    let o = run(&[
        "benchmark",
        "--data-dir",
        s(data.path()),
        "--dims",
        "16,4,2",
        "--tasks",
        s(&tasks),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "benchmark",
        "--data-dir",
        s(data.path()),
        "--dims",
        "16,4,2",
        "--tasks",
        "no/such/file",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn make_tasks_is_seeded() {
    let a = run(&["make-tasks", "--k", "5", "--seed", "11"]);
    let b = run(&["make-tasks", "--k", "5", "--seed", "11"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let masks: Vec<u16> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(masks.len(), 5);
    assert!(masks.iter().all(|&m| (1..1023).contains(&m)));
}

#[test]
fn divergence_exits_4() {
    let data = fixture();
    let out = tempfile::tempdir().unwrap();
    let mut args = pretrain_args(s(data.path()), s(out.path()));
    args.extend(["--lr", "1e38"]);
    let o = run(&args);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let data = fixture();
    let d = s(data.path());
    let outs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for out in &outs {
        let o = s(out.path());
        let r = run(&pretrain_args(d, o));
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        let ckpt = out.path().join("checkpoint.bin");
        let r = run(&[
            "--threads",
            "1",
            "benchmark",
            "--data-dir",
            d,
            "--out",
            o,
            "--pretrained",
            s(&ckpt),
            "--compare-scratch",
            "--tasks",
            "3",
            "--seeds",
            "2",
            "--epochs",
            "2",
        ]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        for probe in ["ds", "dead", "density", "bounds"] {
            let r = run(&[
                "--threads",
                "1",
                "diagnose",
                s(&ckpt),
                "--probe",
                probe,
                "--data-dir",
                d,
                "--out",
                o,
                "--batches",
                "3",
                "--n-perturb",
                "16",
                "--draws",
                "500",
            ]);
            assert_eq!(code(&r), 0, "{probe}: {}", String::from_utf8_lossy(&r.stderr));
        }
    }
    let files = [
        "checkpoint.bin",
        "loss_log.csv",
        "config.json",
        "benchmark.csv",
        "summary.csv",
        "ds.csv",
        "dead.csv",
        "density.csv",
        "bounds.csv",
    ];
    for f in files {
        let a = std::fs::read(outs[0].path().join(f)).unwrap();
        let b = std::fs::read(outs[1].path().join(f)).unwrap();
        assert!(!a.is_empty(), "{f} is empty");
        if f == "config.json" {
            continue; // holds the output directory
        }
        assert_eq!(a, b, "{f} differs between runs");
    }

    let log = std::fs::read_to_string(outs[0].path().join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,uni,sd,iod,total"));
    let bench = std::fs::read_to_string(outs[0].path().join("benchmark.csv")).unwrap();
    assert_eq!(bench.lines().count(), 1 + 2 * 2 * 3);
    let summary = std::fs::read_to_string(outs[0].path().join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("xavier,ours,5,2,"));
    assert!(summary.lines().nth(2).unwrap().starts_with("xavier,none,5,2,"));
}

#[test]
fn pretrain_modes_and_checkpoint_dims() {
    let data = fixture();
    let out = tempfile::tempdir().unwrap();
    let mut args = pretrain_args(s(data.path()), s(out.path()));
    args.extend(["--mode", "random-label", "--init", "he"]);
    assert_eq!(code(&run(&args)), 0);
    let log = std::fs::read_to_string(out.path().join("loss_log.csv")).unwrap();
    let first: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&first[1..4], &["", "", ""]);

    let none_out = tempfile::tempdir().unwrap();
    let mut args = pretrain_args(s(data.path()), s(none_out.path()));
    args.extend(["--mode", "none"]);
    assert_eq!(code(&run(&args)), 0);
    assert!(!none_out.path().join("loss_log.csv").exists());
    let ckpt: PathBuf = none_out.path().join("checkpoint.bin");
    let p: uniinit::mlp::ParamSet<f32> = uniinit::mlp::read_checkpoint(&ckpt).unwrap();
    assert_eq!(p.arch().dims(), &[16, 8, 8, 2]);

    std::fs::write(&ckpt, b"UINI\x01garbage").unwrap();
    let o = run(&["diagnose", s(&ckpt), "--probe", "ds", "--data-dir", s(data.path())]);
    assert_eq!(code(&o), 3);
}
