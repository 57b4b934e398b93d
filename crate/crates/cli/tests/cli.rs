//! End-to-end runs of every subcommand on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mimic-lab");

const TINY: &str = "\
policy.n_experts=2
policy.hidden=8
policy.latent=4
policy.conv=3x2x4,2x1x3
student.history=3
student.hidden=8
ppo.n_envs=3
ppo.steps_per_env=8
ppo.minibatch=12
ppo.epochs=1
ppo.iterations=2
ppo.checkpoint_every=1
ppo.sampler_log_every=1
dagger.rounds=2
dagger.n_envs=2
dagger.steps_per_env=6
dagger.minibatch=6
dagger.epochs=1
";

fn mimic(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("MIMIC_LAB_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mimic-lab")
}

fn ok(args: &[&str]) {
    let out = mimic(args);
    assert!(
        out.status.success(),
        "mimic-lab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(tmp: &Path, name: &str, spec: &str, seed: &str) -> PathBuf {
    let spec = write(&tmp.join("spec.txt"), spec);
    let out = tmp.join(name);
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&out), "--seed", seed]);
    out
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "a", "n_clips=3\nstand=0.5\nwalk=0.5\nduration=1,2\n", "4");
    let b = gen(tmp.path(), "b", "n_clips=3\nstand=0.5\nwalk=0.5\nduration=1,2\n", "4");
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.len(), 5);
    assert_eq!(sa, sb);
}

#[test]
fn missing_dataset_flag_prints_usage() {
    let out = mimic(&["eval", "--policy", "playback", "--out", "x"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--dataset") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_and_missing_file_fail() {
    assert!(!mimic(&["gen-data", "--bogus"]).status.success());
    let out = mimic(&["gen-data", "--spec", "/nonexistent/spec", "--out", "/tmp/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/spec"));
}

#[test]
fn playback_eval_tracks_joints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "d", "n_clips=2\nstand=1\nduration=1,2\n", "1");
    let out = tmp.path().join("eval");
    ok(&["eval", "--policy", "playback", "--dataset", s(&data), "--out", s(&out)]);
    let summary = std::fs::read_to_string(out.join("summary.tsv")).unwrap();
    let row: Vec<f64> = summary.lines().nth(1).unwrap().split('\t').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[1], 1.0, "completion");
    assert!(row[3] < 0.02, "mpjpe {}", row[3]);
    for f in ["metrics.tsv", "percentiles.tsv", "manifest.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn curate_writes_report_and_index() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "d", "n_clips=3\nstand=1\nduration=1,2\n", "2");
    let rules = write(&tmp.path().join("rules.txt"), "pitch_max=1.2\nepisodes_per_clip=2\n");
    let out = tmp.path().join("cur");
    ok(&["curate", "--dataset", s(&data), "--rules", s(&rules), "--policy", "playback", "--out", s(&out)]);
    let report = std::fs::read_to_string(out.join("report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    assert!(report.lines().skip(1).all(|l| l.contains("\tkept\t")), "{report}");
    let index = std::fs::read_to_string(out.join("index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 3);
    // the filtered index loads as a dataset
    let e = tmp.path().join("e");
    ok(&["eval", "--policy", "playback", "--dataset", s(&out), "--out", s(&e)]);
}

#[test]
fn training_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = gen(t, "d", "n_clips=2\nstand=0.5\nsway=0.5\nduration=1,2\n", "3");
    let cfg = write(&t.join("tiny.txt"), TINY);
    let mut snaps = Vec::new();
    let run = t.join("run");
    for _ in 0..2 {
        if run.exists() {
            std::fs::remove_dir_all(&run).unwrap();
        }
        let teacher = run.join("teacher");
        ok(&["train-teacher", "--dataset", s(&data), "--config", s(&cfg), "--seed", "5", "--out", s(&teacher)]);
        let ckpt = teacher.join("policy.ckpt");
        ok(&[
            "distill", "--teacher", s(&ckpt), "--dataset", s(&data), "--config", s(&cfg), "--seed", "5", "--out",
            s(&run.join("student")),
        ]);
        ok(&["eval", "--policy", s(&ckpt), "--dataset", s(&data), "--config", s(&cfg), "--out", s(&run.join("eval"))]);
        let clip = data.join("stand_0000.clip");
        ok(&[
            "trace-gating", "--policy", s(&ckpt), "--clip", s(&clip), "--config", s(&cfg), "--out",
            s(&run.join("trace.tsv")),
        ]);
        let runs = format!("teacher={};student={}", s(&ckpt), s(&run.join("student/student.ckpt")));
        ok(&["compare", "--runs", &runs, "--dataset", s(&data), "--config", s(&cfg), "--out", s(&run.join("cmp.tsv"))]);
        snaps.push(snapshot(&run));
    }
    let names: Vec<_> = snaps[0].iter().map(|(p, _)| p.display().to_string()).collect();
    for f in [
        "teacher/train_log.tsv",
        "teacher/sampler_log.tsv",
        "teacher/checkpoints/policy_000001.ckpt",
        "student/distill_log.tsv",
        "eval/percentiles.tsv",
        "trace.tsv.manifest.txt",
    ] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    assert_eq!(snaps[0], snaps[1]);

    let trace = std::fs::read_to_string(run.join("trace.tsv")).unwrap();
    assert!(trace.starts_with("expert0\texpert1\n"));
    for line in trace.lines().skip(1) {
        let sum: f64 = line.split('\t').map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gating_trace_rejects_student_and_compare_names_missing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = gen(t, "d", "n_clips=1\nstand=1\nduration=1,1.5\n", "3");
    let cfg = write(&t.join("tiny.txt"), TINY);
    let teacher = t.join("teacher");
    ok(&["train-teacher", "--dataset", s(&data), "--config", s(&cfg), "--out", s(&teacher), "--set", "ppo.iterations=1"]);
    let student = t.join("student");
    ok(&[
        "distill", "--teacher", s(&teacher.join("policy.ckpt")), "--dataset", s(&data), "--config", s(&cfg), "--out",
        s(&student), "--set", "dagger.rounds=1",
    ]);
    let out = mimic(&[
        "trace-gating", "--policy", s(&student.join("student.ckpt")), "--clip", s(&data.join("stand_0000.clip")),
        "--config", s(&cfg), "--out", s(&t.join("g.tsv")),
    ]);
    assert!(!out.status.success());
    let out = mimic(&["compare", "--runs", "ghost=/nonexistent.ckpt", "--dataset", s(&data), "--out", s(&t.join("c.tsv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}
