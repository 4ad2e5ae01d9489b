use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.preset = ci
data.sequences = 4
data.holdout = 0.25
eval.samples = 2
train.rays = 16
train.batch = 1
train.steps_1a = 2
train.steps_1b = 2
train.steps_2a = 2
train.steps_2b = 2
train.steps_3 = 2
render.samples = 8
";

fn bevworld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevworld"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self) -> PathBuf {
        let out = self.path("data.dwm");
        let o = bevworld(&["synth", "--config", s(&self.path("run.cfg")), "--seed", "7", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn train(&self, stage: &str, ckpt: Option<&Path>, out: &str) -> Output {
        let data = self.path("data.dwm");
        let cfg = self.path("run.cfg");
        let out = self.path(out);
        let mut args = vec!["train", "--stage", stage, "--data", s(&data), "--out", s(&out)];
        match ckpt {
            Some(c) => args.extend(["--ckpt", s(c)]),
            None => args.extend(["--config", s(&cfg)]),
        }
        bevworld(&args)
    }
}

#[test]
fn synth_is_deterministic() {
    let ws = Workspace::new();
    let a = std::fs::read(ws.synth()).unwrap();
    let b = std::fs::read(ws.synth()).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..4], b"DWM1");
}

#[test]
fn stage_three_without_stage_two_checkpoint_is_a_config_error() {
    let ws = Workspace::new();
    ws.synth();
    assert_eq!(code(&ws.train("3", None, "c3.ckpt")), 2);
    assert_eq!(code(&ws.train("2", None, "c2.ckpt")), 2);
    let o = ws.train("1", None, "c1.ckpt");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // A stage-1 checkpoint cannot feed stage 3 either.
    assert_eq!(code(&ws.train("3", Some(&ws.path("c1.ckpt")), "c3.ckpt")), 2);
}

#[test]
fn unknown_config_key_and_missing_files() {
    let ws = Workspace::new();
    let bad = ws.path("bad.cfg");
    std::fs::write(&bad, "train.nonsense = 1\n").unwrap();
    let o = bevworld(&["synth", "--config", s(&bad), "--out", s(&ws.path("x.dwm"))]);
    assert_eq!(code(&o), 2);
    let o = bevworld(&["synth", "--config", s(&ws.path("absent.cfg")), "--out", s(&ws.path("x.dwm"))]);
    assert_eq!(code(&o), 2);
    let o = bevworld(&[
        "eval",
        "--ckpt",
        s(&ws.path("absent.ckpt")),
        "--data",
        s(&ws.path("absent.dwm")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn full_pipeline_eval_and_export() {
    let ws = Workspace::new();
    let data = ws.synth();
    assert_eq!(code(&ws.train("1", None, "c1.ckpt")), 0);

    let o = bevworld(&["eval", "--ckpt", s(&ws.path("c1.ckpt")), "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("CD @ 0s"));
    assert!(!table.contains("CD @ 1s"), "stage 1 has no future head:\n{table}");

    let o = ws.train("2", Some(&ws.path("c1.ckpt")), "c2.ckpt");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = ws.path("s3.csv");
    let o = bevworld(&[
        "train",
        "--stage",
        "3",
        "--ckpt",
        s(&ws.path("c2.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&ws.path("c3.ckpt")),
        "--log",
        s(&log),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<String> = std::fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 3, "header plus one row per step");

    let csv = ws.path("report.csv");
    let o = bevworld(&[
        "eval",
        "--ckpt",
        s(&ws.path("c3.ckpt")),
        "--data",
        s(&data),
        "--roi",
        "full",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0);
    let report = std::fs::read_to_string(&csv).unwrap();
    for h in 0..4 {
        assert!(report.contains(&format!("chamfer_{h}s,")), "{report}");
    }
    assert!(report.contains("roi,\"full\""));

    let out = ws.path("ply");
    let o = bevworld(&["render-export", "--ckpt", s(&ws.path("c3.ckpt")), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for h in 0..4 {
        let gt = std::fs::read_to_string(out.join(format!("gt_{h}s.ply"))).unwrap();
        assert!(gt.starts_with("ply\nformat ascii 1.0\n"));
        assert!(out.join(format!("pred_{h}s.ply")).exists());
    }
}

#[test]
fn later_stages_reject_architecture_overrides() {
    let ws = Workspace::new();
    let data = ws.synth();
    assert_eq!(code(&ws.train("1", None, "c1.ckpt")), 0);
    let cfg = ws.path("arch.cfg");
    std::fs::write(&cfg, "llm.dim = 64\n").unwrap();
    let o = bevworld(&[
        "train",
        "--stage",
        "2",
        "--ckpt",
        s(&ws.path("c1.ckpt")),
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&ws.path("c2.ckpt")),
    ]);
    assert_eq!(code(&o), 2);
}
