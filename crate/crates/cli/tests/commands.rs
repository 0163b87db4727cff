use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gpsphs::io::MetricsSummary;
use tempfile::TempDir;

/// Two short trajectories and cheap optimizer settings.
const SMALL: &str = r#"
[dataset]
n_traj = 2

[train.surrogate]
restarts = 1
max_iters = 100
grad_tol = 1e-3

[train.hamiltonian]
restarts = 1
max_iters = 50
grad_tol = 1e-3

[train.classifier]
optimize = false

[simulate]
t_span = [0.0, 0.5]
dt = 0.01
n_samples = 3
feature_count = 256

[evaluate]
horizon = 0.5

[evaluate.simulation]
dt = 0.01
n_samples = 2
feature_count = 256
"#;

fn gpsphs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpsphs"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn gpsphs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gpsphs(dir, args);
    assert!(
        out.status.success(),
        "gpsphs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(dir: &Path, args: &[&str]) -> String {
    let out = gpsphs(dir, args);
    assert!(
        !out.status.success(),
        "gpsphs {args:?} unexpectedly succeeded"
    );
    String::from_utf8(out.stderr).unwrap()
}

fn small_workspace() -> (TempDir, String) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    (dir, cfg)
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn generate_default_writes_1000_rows() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(dir.path(), &["generate"]);
    assert!(stdout.contains("wrote 1000 rows"), "{stdout}");
    assert!(stdout.contains("SNR"), "{stdout}");
    assert_eq!(line_count(&dir.path().join("dataset.csv")), 1001);
}

#[test]
fn generate_single_trajectory_has_50_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("one.toml");
    fs::write(&cfg, "[dataset]\nn_traj = 1\n").unwrap();
    ok(dir.path(), &["--config", cfg.to_str().unwrap(), "generate"]);
    assert_eq!(line_count(&dir.path().join("dataset.csv")), 51);
}

#[test]
fn generate_is_a_function_of_the_seed() {
    let (a, cfg) = small_workspace();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    ok(a.path(), &["--config", &cfg, "--seed", "11", "generate"]);
    ok(b.path(), &["--config", &cfg, "--seed", "11", "generate"]);
    ok(c.path(), &["--config", &cfg, "--seed", "12", "generate"]);
    let read = |d: &TempDir| fs::read(d.path().join("dataset.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn truncated_csv_names_the_line() {
    let (dir, cfg) = small_workspace();
    ok(dir.path(), &["--config", &cfg, "generate"]);
    let path = dir.path().join("dataset.csv");
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Cut the fifth data row after its third field.
    let cut: String = lines[5].split(',').take(3).collect::<Vec<_>>().join(",");
    let mut broken = lines[..5].join("\n");
    broken.push('\n');
    broken.push_str(&cut);
    broken.push('\n');
    fs::write(&path, broken).unwrap();
    let err = stderr_of(dir.path(), &["--config", &cfg, "train"]);
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn non_monotone_times_rejected() {
    let (dir, cfg) = small_workspace();
    ok(dir.path(), &["--config", &cfg, "generate"]);
    let path = dir.path().join("dataset.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // File lines 4 and 5 trade places, so line 5 goes back in time.
    lines.swap(3, 4);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = stderr_of(dir.path(), &["--config", &cfg, "train"]);
    assert!(
        err.contains("line 5") && err.contains("does not increase"),
        "{err}"
    );
}

#[test]
fn single_mode_dataset_is_degenerate() {
    let (dir, cfg) = small_workspace();
    ok(dir.path(), &["--config", &cfg, "generate"]);
    let path = dir.path().join("dataset.csv");
    let text = fs::read_to_string(&path).unwrap();
    let relabeled: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                l.to_string()
            } else {
                let (head, _) = l.rsplit_once(',').unwrap();
                format!("{head},1")
            }
        })
        .collect();
    fs::write(&path, relabeled.join("\n") + "\n").unwrap();
    let err = stderr_of(dir.path(), &["--config", &cfg, "train", "--prior-only"]);
    assert!(err.contains("degenerate labels"), "{err}");
}

#[test]
fn unknown_model_definition_field_rejected() {
    let (dir, cfg) = small_workspace();
    ok(dir.path(), &["--config", &cfg, "generate"]);
    let def = dir.path().join("model.toml");
    fs::write(&def, "kind = \"hopper\"\ndamping = 2.0\nspring = 3.0\n").unwrap();
    let err = stderr_of(
        dir.path(),
        &[
            "--config",
            &cfg,
            "train",
            "--model-def",
            def.to_str().unwrap(),
        ],
    );
    assert!(
        err.contains("unknown model-definition field `spring`"),
        "{err}"
    );
}

#[test]
fn unknown_config_key_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[plot]\nwidth = 3\n").unwrap();
    let err = stderr_of(dir.path(), &["--config", cfg.to_str().unwrap(), "config"]);
    assert!(err.contains("plot"), "{err}");
}

#[test]
fn missing_model_archive_is_an_error() {
    let dir = TempDir::new().unwrap();
    let err = stderr_of(dir.path(), &["simulate"]);
    assert!(err.contains("model.json"), "{err}");
}

#[test]
fn prior_only_pipeline() {
    let (dir, cfg) = small_workspace();
    let d = dir.path();
    ok(d, &["--config", &cfg, "generate"]);
    let stdout = ok(d, &["--config", &cfg, "train", "--prior-only"]);
    assert!(stdout.contains("classifier accuracy"), "{stdout}");
    assert!(stdout.contains("training time"), "{stdout}");

    // Simulate: one CSV per sample with span/dt + 1 rows (plus header).
    let stdout = ok(d, &["--config", &cfg, "simulate"]);
    for i in 0..3 {
        assert_eq!(line_count(&d.join(format!("rollout_{i}.csv"))), 52);
        assert!(stdout.contains(&format!("sample {i}:")), "{stdout}");
    }
    assert!(!d.join("rollout_3.csv").exists());

    // The untrained prior cannot meet the trajectory threshold.
    let out = gpsphs(d, &["--config", &cfg, "evaluate", "--strict"]);
    assert_eq!(out.status.code(), Some(1));
    let text = fs::read_to_string(d.join("metrics.json")).unwrap();
    let summary = MetricsSummary::from_json(&text).unwrap();
    assert!(!summary.all_ok);
    assert_eq!(
        MetricsSummary::from_json(&summary.to_json().unwrap()).unwrap(),
        summary
    );
    assert_eq!(
        fs::read_to_string(d.join("metrics.txt")).unwrap(),
        summary.to_text()
    );

    // Without --strict the report is still written and the exit code is 0.
    ok(d, &["--config", &cfg, "evaluate"]);
}

#[test]
fn config_round_trips() {
    let (dir, cfg) = small_workspace();
    let printed = ok(dir.path(), &["--config", &cfg, "--seed", "5", "config"]);
    assert!(printed.contains("n_traj = 2"));
    let again = dir.path().join("again.toml");
    fs::write(&again, &printed).unwrap();
    assert_eq!(
        ok(dir.path(), &["--config", again.to_str().unwrap(), "config"]),
        printed
    );
}

#[test]
fn shipped_config_is_the_default() {
    let dir = TempDir::new().unwrap();
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hopper.toml");
    let with = ok(
        dir.path(),
        &["--config", shipped.to_str().unwrap(), "config"],
    );
    assert_eq!(with, ok(dir.path(), &["config"]));
}
