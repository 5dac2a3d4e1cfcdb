use std::path::Path;
use std::process::Command;

use safecompress::cli::{read_reports, ReportRecord};

const CONFIG: &str = r#"
[dataset]
kind = "blobs"
classes = 3
features = 8
n_train = 300
n_test = 200
seed = 3

[target]
kind = "mlp"
input_shape = [8]
hidden = [16]
num_classes = 3

[run]
omega = 0.2
total_epochs = 4
inner_iterations = 5
seed = 9
deterministic = true

[run.attack]
epochs = 3
finetune_epochs = 1
refresh_epochs = 1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safecompress"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn missing_omega_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("omega = 0.2\n", ""));
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing field: omega"), "{err}");
}

#[test]
fn run_writes_one_line_per_iteration_plus_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out-dir").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let records = read_reports(&out_dir.join("report.jsonl")).unwrap();
    let iterations = records.iter().filter(|r| matches!(r, ReportRecord::Iteration(_))).count();
    let Some(ReportRecord::Summary(s)) = records.last() else {
        panic!("last record is not a summary");
    };
    assert_eq!(s.iterations, iterations);
    assert_eq!(records.len(), iterations + 1);
    assert!(out_dir.join("final.sfcmp").exists());
    assert!(out_dir.join("checkpoints/iter_0000.sfcmp").exists());

    let table = bin().args(["report", "--input"]).arg(out_dir.join("report.jsonl")).output().unwrap();
    assert!(table.status.success());
    assert!(!table.stdout.is_empty());

    // Same config, matching mode: succeeds.
    let ok = bin()
        .args(["attack-eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out_dir.join("final.sfcmp"))
        .args(["--mode", "blackbox"])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("MIA acc"));

    // The config trains a black-box attacker; asking for white-box is refused.
    let bad = bin()
        .args(["attack-eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out_dir.join("final.sfcmp"))
        .args(["--mode", "whitebox"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("Whitebox"), "{err}");
}

#[test]
fn gradcheck_command_passes() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}
