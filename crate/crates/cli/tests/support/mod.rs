//! Helpers for driving the `confdepth` binary from tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub const ECHO: &str = "run_config.json";

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_confdepth"))
}

/// Runs `confdepth` with `args` and extra environment variables.
pub fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.args(args).env_remove("CONFDEPTH_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to start confdepth")
}

pub fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

/// Runs and panics with the captured output unless the exit code is 0.
pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "confdepth {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("non-UTF-8 temp path")
}

pub fn write_config(path: &Path, value: &Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Every file under `dir`, keyed by its path relative to `dir`.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// A small random benchmark plus one explicit scene with a single artifact.
pub fn gen_data_config() -> Value {
    json!({
        "seed": 7,
        "keypoints_per_sample": 5,
        "scenes": [{
            "scene": {
                "width": 40,
                "height": 30,
                "rig": {"focal_px": 60.0, "baseline_mm": 4.0, "cx_px": 19.5, "cy_px": 14.5},
                "primitives": [
                    {"kind": "plane", "point": [0.0, 0.0, 90.0], "normal": [0.1, 0.0, -1.0]},
                    {"kind": "sphere_cap", "center": [0.0, 0.0, 70.0], "radius": 15.0}
                ],
                "texture_seed": 3
            },
            "artifacts": [{"kind": "specular", "center": [20.0, 15.0], "radii": [8.0, 6.0], "strength": 1.0}]
        }],
        "random": {"n_samples": 3, "width": 32, "height": 24, "keypoints_per_sample": 6, "seed": 5}
    })
}

/// One invocation of every command, in dependency order. Each entry is the
/// command name, its output directory name and its arguments besides `--out`.
pub fn pipeline(root: &Path) -> Vec<(&'static str, &'static str, Vec<String>)> {
    let cfg = root.join("gen_data.json");
    write_config(&cfg, &gen_data_config());
    let p = |rel: &str| path_str(&root.join(rel)).to_string();
    let manifest = format!("--dataset={}", p("data/manifest.json"));
    vec![
        ("gen-data", "data", vec![format!("--config={}", p("gen_data.json"))]),
        ("confidence", "conf", vec![manifest.clone()]),
        (
            "train-head",
            "head",
            vec![manifest.clone(), "--head.epochs=40".into(), "--train_samples=2".into()],
        ),
        ("refine", "refine", vec![manifest.clone(), "--refine.iters=25".into()]),
        (
            "refine",
            "refine_ch",
            vec![
                manifest.clone(),
                "--refine.iters=25".into(),
                "--refine.use_ch=true".into(),
                format!("--head={}", p("head/head.bin")),
            ],
        ),
        ("eval", "eval", vec![manifest.clone(), format!("--predictions={}", p("refine"))]),
        ("report", "report", vec![manifest.clone(), format!("--predictions={}", p("refine"))]),
        (
            "ablate",
            "ablate",
            vec![
                manifest,
                "--ablation.head.epochs=20".into(),
                "--ablation.head_train_samples=2".into(),
                "--ablation.grid.0.iters=15".into(),
                "--ablation.grid.1.iters=15".into(),
                "--ablation.grid.2.iters=15".into(),
                "--ablation.grid.3.iters=15".into(),
            ],
        ),
    ]
}

/// Runs the whole pipeline under `root`, returning its steps.
pub fn run_pipeline(root: &Path) -> Vec<(&'static str, &'static str, Vec<String>)> {
    let steps = pipeline(root);
    for (cmd, dir, args) in &steps {
        let out = format!("--out={}", path_str(&root.join(dir)));
        let mut all: Vec<&str> = vec![cmd, &out];
        all.extend(args.iter().map(String::as_str));
        run_ok(&all);
    }
    steps
}

/// Replays `cmd` from the config echo in `root/dir` into `dest` and returns
/// the names of files that differ, are missing or are extra.
pub fn replay_diff(root: &Path, cmd: &str, dir: &str, dest: &Path, env: &[(&str, &str)]) -> Vec<String> {
    let echo = root.join(dir).join(ECHO);
    let out = run_env(
        &[cmd, &format!("--config={}", path_str(&echo)), &format!("--out={}", path_str(dest))],
        env,
    );
    if !out.status.success() {
        return vec![format!("replay exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))];
    }
    let (a, b) = (tree(&root.join(dir)), tree(dest));
    let mut diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    diffs.extend(b.keys().filter(|k| !a.contains_key(*k)).map(|k| format!("extra {}", k.display())));
    diffs
}
