//! Drives the installed binary stage by stage against a small synthetic
//! corpus, checking artifacts, exit codes, and resumability.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_remi"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("artifacts");
    let text = format!(
        r#"
name = "pipeline-smoke"
output_dir = "{}"
seeds = [5]
ratios = [0.1]
split_seed = 3

[corpus]
kind = "synthetic"
classes = 3
per_class = 120
dim = 8
sigma = 1.0
center_distance = 1.8
seed = 41

[arch]
kind = "mlp"
hidden = [48]

[train]
epochs = 60
batch_size = 16
learning_rate = 0.05
weight_decay = 0.0

[attack]
epochs = 80

[unlearn]
learning_rate = 0.15
max_epochs = 40
batch_size = 16
"#,
        out.display()
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn stages_run_in_order_and_leave_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let art = dir.path().join("artifacts");

    // Evaluating before anything ran still writes a report, with every cell
    // marked incomplete, and signals the gap through the exit code.
    let out = bin().args(["evaluate", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(art.join("report.csv")).unwrap();
    assert!(report.contains("incomplete:train"));

    for (stage, artifact) in [
        ("train", "seed5/target.remi"),
        ("attack-train", "seed5/probes/guide_wb.remi"),
        ("select-forget", "seed5/ratio0.1/forget_set.json"),
        ("unlearn", "seed5/ratio0.1/unlearned_wb.remi"),
        ("retrain", "seed5/ratio0.1/retrained.remi"),
    ] {
        let out = bin().args([stage, "-c"]).arg(&cfg).output().unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "stage {stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(art.join(artifact).exists(), "{stage} left no {artifact}");
    }

    let out = bin().args(["evaluate", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1 of 1 cells complete"), "stdout: {stdout}");
    let report = std::fs::read_to_string(art.join("report.csv")).unwrap();
    assert!(report.contains("complete"));
    assert!(!report.contains("incomplete"));
    assert!(art.join("report.md").exists());
}

#[test]
fn report_subcommand_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bin()
        .args(["report", "-c"])
        .arg(&cfg)
        .args(["--output-dir"])
        .arg(dir.path().join("alt"))
        .args(["--unlearn-max-epochs", "30"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("alt/report.csv").exists());
    // The override redirected everything; the config's directory stays empty.
    assert!(!dir.path().join("artifacts/report.csv").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();

    let missing = bin().args(["train", "-c", "/nonexistent/exp.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let cfg = write_config(dir.path());
    let bad_ratio = bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .args(["--ratios", "1.5"])
        .output()
        .unwrap();
    assert_eq!(bad_ratio.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad_ratio.stderr);
    assert!(msg.contains("ratio"), "stderr: {msg}");

    let bad_workers = bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .env("REMI_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_workers.status.code(), Some(2));
}

#[test]
fn stage_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    // Unlearning with no upstream artifacts is a stage failure, not a crash.
    let out = bin().args(["unlearn", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("unlearn"), "stderr: {msg}");
}
