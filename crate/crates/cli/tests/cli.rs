use std::process::Command;

fn qfeedback() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qfeedback"))
}

fn error_kind(stderr: &[u8]) -> String {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().last().expect("no stderr");
    let v: serde_json::Value = serde_json::from_str(line).expect("stderr is not a JSON line");
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn missing_config_fails_with_json_error() {
    let out = qfeedback().args(["run", "/nonexistent/run.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(error_kind(&out.stderr), "FileNotFound");
}

#[test]
fn unknown_scenario_fails_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "scenario = \"warp-drive\"\nseed = 1\n[parameters]\n").unwrap();
    let out = qfeedback().arg("run").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(error_kind(&out.stderr), "UnknownScenario");
}

#[test]
fn small_run_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "scenario = \"sme-vs-lindblad\"\nseed = 5\n[parameters]\nomega = 1.0\ngamma = 1.0\nbloch = [1.0, 0.0, 0.0]\ndt = 1e-3\nt_final = 0.5\ntrajectories = 20\nrecord_every = 50\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = qfeedback().arg("run").arg(&cfg).arg("--out").arg(&out_dir).args(["--workers", "2"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["scalars"].is_object());
}
