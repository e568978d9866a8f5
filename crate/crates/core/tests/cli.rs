use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointpwc::geom::SceneFlow;
use pointpwc::harness::evaluate;
use pointpwc::io::read_rows;

const SMALL: &str = r#"{
  "network": {"levels": 3, "widths": [8, 8], "cost_dims": [8, 8], "k_cost": 4, "k_conv": 4,
              "predictor_convs": [8], "predictor_hidden": 8},
  "loss": {"weights": {"alpha": [0.02, 0.04, 0.08]}},
  "train": {"steps": 8, "checkpoint_every": 4},
  "data": {"n_points": 64},
  "ablation": {"steps": 3, "train_pairs": 1, "eval_pairs": 1, "repeats": 1}
}"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_pointpwc"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(self.path("small.json"))
            .args(args)
            .output()
            .unwrap();
        out
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn synth(&self, dir: &str) {
        self.ok(&["--seed", "2", "--out", &self.arg(dir), "synth"]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_text_and_binary_with_identical_contents() {
    let w = Work::new();
    w.synth("txt");
    w.ok(&["--seed", "2", "--out", &w.arg("bin"), "synth", "--binary"]);
    for name in ["p", "q", "gt"] {
        let a = read_rows(&w.path(&format!("txt/{name}.txt"))).unwrap();
        let b = read_rows(&w.path(&format!("bin/{name}.bin"))).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn self_supervised_training_runs_without_ground_truth() {
    let w = Work::new();
    w.synth("d");
    w.ok(&[
        "--out",
        &w.arg("run"),
        "train",
        "--loss",
        "self-supervised",
        "--p",
        &w.arg("d/p.txt"),
        "--q",
        &w.arg("d/q.txt"),
    ]);
    let log = fs::read_to_string(w.path("run/log.csv")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,epe3d");
    assert_eq!(lines.len(), 9);
    assert!(lines[1..].iter().all(|l| l.ends_with(',')), "{log}");
    assert!(w.path("run/checkpoint.ckpt").is_file());
}

#[test]
fn supervised_training_without_ground_truth_is_a_usage_error() {
    let w = Work::new();
    w.synth("d");
    let out = w.run(&[
        "--out",
        &w.arg("run"),
        "train",
        "--loss",
        "supervised",
        "--p",
        &w.arg("d/p.txt"),
        "--q",
        &w.arg("d/q.txt"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--gt"));
    assert!(!w.path("run").exists());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let w = Work::new();
    w.ok(&["--out", &w.arg("full"), "train", "--loss", "supervised"]);
    w.ok(&[
        "--out",
        &w.arg("split"),
        "train",
        "--loss",
        "supervised",
        "--steps",
        "4",
    ]);
    let resumed = w.ok(&[
        "--out",
        &w.arg("split"),
        "train",
        "--loss",
        "supervised",
        "--resume",
    ]);
    assert!(resumed.contains("resuming from step 4"));
    assert_eq!(
        fs::read(w.path("full/log.csv")).unwrap(),
        fs::read(w.path("split/log.csv")).unwrap()
    );
    assert_eq!(
        fs::read(w.path("full/checkpoint.ckpt")).unwrap(),
        fs::read(w.path("split/checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn untrained_inference_is_zero_and_eval_reports_metrics() {
    let w = Work::new();
    w.synth("d");
    w.ok(&["--out", &w.arg("run"), "train", "--steps", "0"]);
    let args = |out: &str| {
        vec![
            "--out".to_string(),
            w.arg(out),
            "infer".into(),
            "--checkpoint".into(),
            w.arg("run/checkpoint.ckpt"),
            "--p".into(),
            w.arg("d/p.txt"),
            "--q".into(),
            w.arg("d/q.txt"),
        ]
    };
    let a = args("a.txt");
    w.ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let flow = read_rows(&w.path("a.txt")).unwrap();
    assert_eq!(flow.len(), 64);
    assert!(flow.iter().flatten().all(|&v| v == 0.0));

    let text = w.ok(&[
        "eval",
        "--pred",
        &w.arg("a.txt"),
        "--gt",
        &w.arg("d/gt.txt"),
    ]);
    let gt = SceneFlow::new(read_rows(&w.path("d/gt.txt")).unwrap()).unwrap();
    let expected = evaluate(&SceneFlow::new(flow).unwrap(), &gt).unwrap();
    assert!(
        text.contains(&format!("epe3d {}", expected.epe3d)),
        "{text}"
    );
    assert!(text.contains("conventions"));
}

#[test]
fn inference_is_deterministic_after_training() {
    let w = Work::new();
    w.synth("d");
    w.ok(&[
        "--out",
        &w.arg("run"),
        "train",
        "--loss",
        "supervised",
        "--steps",
        "3",
        "--p",
        &w.arg("d/p.txt"),
        "--q",
        &w.arg("d/q.txt"),
        "--gt",
        &w.arg("d/gt.txt"),
    ]);
    for out in ["a.txt", "b.txt"] {
        w.ok(&[
            "--out",
            &w.arg(out),
            "infer",
            "--checkpoint",
            &w.arg("run/checkpoint.ckpt"),
            "--p",
            &w.arg("d/p.txt"),
            "--q",
            &w.arg("d/q.txt"),
        ]);
    }
    let a = fs::read(w.path("a.txt")).unwrap();
    assert_eq!(a, fs::read(w.path("b.txt")).unwrap());
    assert!(read_rows(&w.path("a.txt"))
        .unwrap()
        .iter()
        .flatten()
        .any(|&v| v != 0.0));
}

#[test]
fn inference_with_a_mismatched_checkpoint_fails_at_runtime() {
    let w = Work::new();
    w.synth("d");
    w.ok(&["--out", &w.arg("run"), "train", "--steps", "0"]);
    fs::write(
        w.path("other.json"),
        SMALL.replace(r#""widths": [8, 8]"#, r#""widths": [8, 6]"#),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pointpwc"))
        .args([
            "--config",
            &w.arg("other.json"),
            "infer",
            "--checkpoint",
            &w.arg("run/checkpoint.ckpt"),
        ])
        .args([
            "--p",
            &w.arg("d/p.txt"),
            "--q",
            &w.arg("d/q.txt"),
            "--out",
            &w.arg("f.txt"),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint mismatch"));
}

#[test]
fn gradcheck_passes_and_fault_injection_is_caught() {
    let w = Work::new();
    let text = w.ok(&["gradcheck", "--instances", "2"]);
    assert_eq!(
        text.lines().filter(|l| l.ends_with("pass")).count(),
        9,
        "{text}"
    );
    let out = w.run(&["gradcheck", "--instances", "2", "--inject-fault", "mul"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_eq!(
        code(&w.run(&["gradcheck", "--inject-fault", "no-such-op"])),
        1
    );
}

#[test]
fn ablate_prints_three_rows_and_writes_json() {
    let w = Work::new();
    let text = w.ok(&["--out", &w.arg("ablation.json"), "ablate"]);
    for label in [
        "neither",
        "upsampled feature",
        "upsampled + predictor feature",
    ] {
        assert!(text.lines().any(|l| l.starts_with(label)), "{text}");
    }
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.path("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
}

#[test]
fn bench_lists_every_component() {
    let w = Work::new();
    let text = w.ok(&["bench"]);
    for name in [
        "feature pyramid",
        "cost volume",
        "upsample + warp",
        "scene flow predictor",
        "R^2",
    ] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn invalid_configs_exit_with_usage_error_and_write_nothing() {
    let w = Work::new();
    let bad = [
        r#"{"network": {"levels": 1}}"#,
        r#"{"network": {"depth": 4}}"#,
        r#"{"data": {"seed": 4}}"#,
        r#"{"train": {"lr": -1.0}}"#,
        r#"{"loss": {"weights": {"alpha": [0.1]}}}"#,
        "{",
    ];
    for (i, json) in bad.iter().enumerate() {
        let cfg = w.path(&format!("bad{i}.json"));
        fs::write(&cfg, json).unwrap();
        for cmd in [&["synth"][..], &["train"][..]] {
            let out_dir = w.path(&format!("out{i}"));
            let out = Command::new(env!("CARGO_BIN_EXE_pointpwc"))
                .current_dir(w.dir.path())
                .arg("--config")
                .arg(&cfg)
                .arg("--out")
                .arg(&out_dir)
                .args(cmd)
                .output()
                .unwrap();
            assert_eq!(
                code(&out),
                1,
                "{json} {cmd:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            assert!(!out_dir.exists(), "{json} {cmd:?} wrote output");
        }
    }
    let names: Vec<_> = files_under(w.dir.path())
        .into_iter()
        .filter_map(|p| p.file_name().map(|n| n.to_owned()))
        .collect();
    assert!(
        names.iter().all(|n| n.to_string_lossy().ends_with(".json")),
        "{names:?}"
    );
}

#[test]
fn usage_errors_and_help() {
    let w = Work::new();
    assert_eq!(code(&w.run(&["frobnicate"])), 1);
    assert_eq!(
        code(&w.run(&["eval", "--pred", "missing.txt", "--gt", "missing.txt"])),
        1
    );
    assert_eq!(code(&w.run(&["train", "--loss", "unsupervised"])), 1);
    let help = w.ok(&["--help"]);
    for verb in [
        "synth",
        "train",
        "infer",
        "eval",
        "gradcheck",
        "ablate",
        "bench",
    ] {
        assert!(help.contains(verb), "{help}");
    }
}

#[test]
fn malformed_point_files_are_runtime_errors() {
    let w = Work::new();
    w.synth("d");
    fs::write(w.path("bad.txt"), "1 2\n").unwrap();
    let out = w.run(&[
        "eval",
        "--pred",
        &w.arg("bad.txt"),
        "--gt",
        &w.arg("d/gt.txt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.txt"));
}
