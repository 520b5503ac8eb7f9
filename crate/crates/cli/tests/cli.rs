use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn constellation(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_constellation")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &tempfile::TempDir, text: &str) -> String {
    let path = dir.path().join("experiment.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn example_fuzz_config_converges() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("convergence-fuzz.toml");
    let o = constellation(&["run", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("converged: true"));
    let report = fs::read_to_string(out.path().join("report.json")).unwrap();
    assert!(report.contains("\"experiment\": \"convergence-fuzz\""));
    assert!(out.path().join("verdicts.csv").exists());
}

#[test]
fn verify_convergence_exits_zero() {
    let cfg = configs().join("scale-in.toml");
    let o = constellation(&["verify-convergence", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "converged: true");
}

#[test]
fn seed_and_coalescing_overrides() {
    let cfg = configs().join("coalescing.toml");
    let o = constellation(&["run", "--config", cfg.to_str().unwrap(), "--seed", "42", "--coalescing", "off"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("seed: 42"));
    // With coalescing off both runs send the same bytes.
    assert!(text.contains("ratio 1.00"), "{text}");
}

#[test]
fn reruns_write_identical_reports() {
    let cfg = configs().join("leaked-packets.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = constellation(&["run", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["report.json", "verdicts.csv", "leaked.csv", "pairs.csv"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(&dir, "[experiment]\nkind = \"convergence-fuzz\"\nduration_ms = -5\n[topology]\ninstances = 2\nlatency_ms = 1\n");
    let o = constellation(&["run", "--config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("duration_ms"));
    let o = constellation(&["verify-convergence", "--config", "/nonexistent.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_check_exits_one() {
    // A link that drops everything never lets the replicas converge.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "[experiment]\nkind = \"convergence-fuzz\"\nduration_ms = 50\n[topology]\ninstances = 2\nlatency_ms = 1\nloss = 1.0\n\
         [workload]\nops_per_instance = 50\n",
    );
    let o = constellation(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("converged: false"));
    assert!(stdout(&o).contains("check quiesced: FAIL"));
    let o = constellation(&["verify-convergence", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
}
