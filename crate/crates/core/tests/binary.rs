use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_acopf-learn"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["gradcheck", "--instance", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_case_exits_two() {
    let out = bin().args(["solve", "--case", "/no/such/case.m"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/case.m"));
}

#[test]
fn solve_prints_a_report() {
    let out = bin().args(["solve", "--case", "two_bus"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "Optimal");
    assert_eq!(v["violations"]["feasible"], true);
}

#[test]
fn infeasible_solve_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let load = dir.path().join("load.json");
    std::fs::write(&load, "[0.0, 10.0, 0.0, 1.0]").unwrap();
    let out = bin().args(["solve", "--case", "two_bus", "--load-file"]).arg(&load).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_then_pf() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let out = bin()
        .args(["gen-data", "--case", "two_bus", "--n-samples", "3", "--seed", "4", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 4);
    assert!(dir.path().join("d.jsonl.rejected.jsonl").exists());

    let out = bin().args(["pf", "--case", "two_bus", "--relaxed"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["sigma_l1"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn gradcheck_circle_passes() {
    let out = bin().args(["gradcheck", "--instance", "circle"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("PASS circle"), "{text}");
}
