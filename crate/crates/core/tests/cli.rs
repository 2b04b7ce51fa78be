use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
# small enough to train in a second
[data]
side = 16
radius_min = 3
radius_max = 5
halo_width = 1
train_count = 4
test_count = 2
annotation_ratio = 0.05
seed = 11

[net]
unet_depth = 2
base_channels = 4
disc_layers = 2

[train]
epochs = 2
lambda_s = 0.01
";

fn wsseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work { dir: tempfile::tempdir().unwrap() };
        fs::write(w.path("tiny.ini"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        let o = wsseg(&["gen-data", "--config", s(&self.path("tiny.ini")), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    }
}

/// Every file under `dir`, relative path and bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_manifest_and_is_byte_identical() {
    let w = Work::new();
    let a = w.gen("a");
    let b = w.gen("b");
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("id,split,annotation_ratio"));
    assert_eq!(lines.count(), 6);
    assert!(a.join("calibration.txt").exists());
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.len() > 6);
    assert_eq!(sa, sb);
    assert!(sa.iter().all(|(p, _)| !p.to_string_lossy().ends_with(".partial")));
}

#[test]
fn seed_flag_changes_the_data() {
    let w = Work::new();
    let a = w.gen("a");
    let b = w.path("b");
    let o = wsseg(&["gen-data", "--config", s(&w.path("tiny.ini")), "--out", s(&b), "--seed", "12"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(snapshot(&a), snapshot(&b));
}

#[test]
fn config_errors_exit_2_with_location_and_write_nothing() {
    let w = Work::new();
    let bad = w.path("bad.ini");
    fs::write(&bad, "[data]\nside = 16\nwobble = 3\n").unwrap();
    let out = w.path("never");
    let o = wsseg(&["gen-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("bad.ini:3"), "{msg}");
    assert!(msg.contains("wobble"), "{msg}");
    assert!(!out.exists());

    fs::write(&bad, "[net]\nbase_channels = four\n").unwrap();
    let o = wsseg(&["gen-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.ini:2"));
    assert!(!out.exists());
}

#[test]
fn invalid_values_and_flags_exit_2() {
    let w = Work::new();
    let data = w.gen("data");
    let cfg = w.path("tiny.ini");
    let out = w.path("never");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", s(&cfg), "--data", s(&data), "--variant", "magic", "--out", s(&out)],
        vec!["sweep", "--config", s(&cfg), "--data", s(&data), "--variant", "sccl", "--lambda-a", "0.1", "--out", s(&out)],
        vec!["sweep", "--config", s(&cfg), "--data", s(&data), "--variant", "accl_partial", "--lambda-a", "x", "--out", s(&out)],
        vec!["compare", "--data", s(&data), "--variants", "fs_ce", "--seeds", "1,a", "--out", s(&out)],
        vec!["gradcheck", "--instances", "0"],
        vec!["frobnicate"],
        vec!["train", "--data", s(&data)],
    ];
    for args in cases {
        let o = wsseg(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!out.exists(), "{args:?}");
    }
}

#[test]
fn missing_inputs_exit_1() {
    let w = Work::new();
    let out = w.path("out");
    let o = wsseg(&[
        "train", "--config", s(&w.path("tiny.ini")), "--data", s(&w.path("nope")),
        "--variant", "fs_ce", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.exists());
    let o = wsseg(&["gen-data", "--config", s(&w.path("absent.ini")), "--out", s(&out)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn train_then_eval_round_trip() {
    let w = Work::new();
    let data = w.gen("data");
    let cfg = w.path("tiny.ini");
    let run = |name: &str| {
        let out = w.path(name);
        let o = wsseg(&[
            "train", "--config", s(&cfg), "--data", s(&data), "--variant", "accl_unpaired", "--out", s(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(snapshot(&a), snapshot(&b));
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,g_loss,d_loss,dice,soft_size,lr,seconds"));
    assert_eq!(metrics.lines().count(), 3);

    let report = w.path("report.csv");
    let o = wsseg(&["eval", "--model", s(&a.join("model.ckpt")), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let again = w.path("again.csv");
    let o = wsseg(&["eval", "--model", s(&b.join("model.ckpt")), "--data", s(&data), "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text, fs::read_to_string(&again).unwrap());
    assert!(text.lines().count() >= 3, "{text}");
}

#[test]
fn sequential_and_parallel_agree() {
    let w = Work::new();
    let data = w.gen("data");
    let cfg = w.path("tiny.ini");
    let run = |name: &str, extra: &[&str]| {
        let out = w.path(name);
        let mut args = extra.to_vec();
        args.extend(["compare", "--data", s(&data), "--variants", "fs_ce,partial_ce", "--seeds", "1,2"]);
        args.extend(["--config", s(&cfg), "--out", s(&out)]);
        let o = wsseg(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let par = run("par", &[]);
    let seq = run("seq", &["--sequential"]);
    let (a, b) = (snapshot(&par), snapshot(&seq));
    assert_eq!(a, b);
    let csv = fs::read_to_string(par.join("compare.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,mean_dice,std_dice,mean_expansion"));
    assert_eq!(lines.count(), 2);
    assert!(par.join("fs_ce_seed1").join("model.ckpt").exists());
    assert!(par.join("partial_ce_seed2").join("metrics.csv").exists());
}

#[test]
fn sweep_emits_one_row_per_weight() {
    let w = Work::new();
    let data = w.gen("data");
    let out = w.path("sweep");
    let o = wsseg(&[
        "sweep", "--config", s(&w.path("tiny.ini")), "--data", s(&data), "--variant", "accl_partial",
        "--lambda-a", "3.0e-4,6.0e-4,1.0e-3,2.0e-3", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "lambda_a,mean_dice,mean_soft_size");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("0.0003,"), "{}", rows[1]);
}

#[test]
fn gradcheck_exits_0_on_a_correct_build() {
    let o = wsseg(&["gradcheck", "--instances", "2", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for op in ["conv2d", "sccl_objective_composed", "generator_objective_composed"] {
        let line = text.lines().find(|l| l.starts_with(op)).unwrap();
        assert!(line.ends_with("ok"), "{line}");
    }
}

#[test]
fn help_exits_0() {
    assert_eq!(wsseg(&["--help"]).status.code(), Some(0));
    assert_eq!(wsseg(&["gen-data", "--help"]).status.code(), Some(0));
}
