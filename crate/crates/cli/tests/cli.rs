use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsde-bench"))
}

#[test]
fn run_writes_report_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let status = bench()
        .args(["run", "--problem", "example1", "--k", "3", "--nt", "16,20", "--r", "8", "--gh-points", "10", "--format", "json", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
    assert_eq!(report["spec"]["r"], 8);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    std::fs::write(&cfg, r#"{"problem": "example1", "ks": [3], "n_steps": [16, 20], "r": 8, "format": "csv"}"#).unwrap();
    let out = bench().args(["run", "--nt", "16", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("problem,k,n_steps,metric,value,status\n"));
    assert!(text.contains("example1,3,16,Y,"));
    assert!(!text.contains("example1,3,20,"));
}

#[test]
fn partial_failure_exits_with_two() {
    let out = bench().args(["run", "--k", "3,10", "--nt", "16", "--r", "8", "--format", "csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stdout).unwrap().contains("example1,10,16,,,failed"));
}

#[test]
fn bad_input_is_an_error() {
    let out = bench().args(["run", "--problem", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("nope"));
}

#[test]
fn table_subcommands() {
    let out = bench().args(["weights", "--k", "1", "--m", "2"]).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "k=1 m=2: -1/2 1/2");

    let out = bench().args(["stability", "--k", "2", "--m", "2", "--format", "csv"]).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "k,m,max_modulus,stable\n2,2,0.500000,true\n");

    let out = bench().args(["quadrature", "--points", "1"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.0);
    assert!((row[1] - std::f64::consts::PI.sqrt()).abs() < 1e-15);
}
