use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgescale"))
}

fn scenario_file(dir: &Path) -> std::path::PathBuf {
    let registry = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/reference_registry.json");
    let doc = serde_json::json!({
        "name": "smoke",
        "registry": registry,
        "pattern": { "kind": "diurnal", "max_rps": { "qr": 100.0, "cv": 10.0 } },
        "agent": { "kind": "rask", "xi": 3, "eta": 0.1 },
        "duration_s": 120,
        "repetitions": 2,
        "base_seed": 4
    });
    let path = dir.join("smoke.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_file(dir.path());
    let out = dir.path().join("out");
    let st = bin().arg("run").arg(&scenario).arg("--out").arg(&out).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(st.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for f in ["metrics.csv", "decisions.csv", "summary.json"] {
        assert!(out.join("smoke/1").join(f).is_file(), "{f}");
    }
    let st = bin()
        .arg("compare")
        .arg(out.join("smoke/0/summary.json"))
        .arg(out.join("smoke/1/summary.json"))
        .output()
        .unwrap();
    assert!(st.status.success());
    let report: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(report["labels"][0]["repetitions"], 2);
}

#[test]
fn overrides_rename_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_file(dir.path());
    let out = dir.path().join("out");
    let st = bin()
        .args(["run", scenario.to_str().unwrap(), "--reps", "1", "--dims", "1", "--no-cache", "--duration", "60"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(out.join("smoke-dims1-nocache/0/metrics.csv").is_file());
}

#[test]
fn gen_trace_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let st = bin()
        .args(["gen-trace", "--kind", "bursty", "--duration", "600", "--seed", "2", "--out"])
        .arg(&trace)
        .output()
        .unwrap();
    assert!(st.status.success());
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 601);

    let registry = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/reference_registry.json");
    let st = bin().arg("calibrate").arg(&registry).output().unwrap();
    assert!(st.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(doc["services"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_are_machine_readable() {
    let st = bin().args(["run", "/nonexistent/scenario.json"]).output().unwrap();
    assert!(!st.status.success());
    let err: serde_json::Value = serde_json::from_slice(&st.stderr).unwrap();
    assert!(err["error"].is_string());
}
