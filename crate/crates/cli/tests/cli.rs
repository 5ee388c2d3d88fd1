use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbf-compose")).args(args).env("CBF_LOG", "error").output().unwrap()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn reference_prints_a_full_config() {
    let o = bin(&["reference"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for section in ["[environment", "[system]", "[lidar]", "[learning]", "[oracle]", "[exploration]", "[compare]", "[output]"] {
        assert!(text.contains(section), "missing {section}");
    }
}

#[test]
fn bad_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, std::fs::read_to_string(scenario("planar_quick.cfg")).unwrap().replace("u_max = 1.0", "u_max = -1.0")).unwrap();
    let o = bin(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error:") && err.contains("system.u_max"), "{err}");
    assert_eq!(bin(&["plot", s(&tmp.path().join("none"))]).status.code(), Some(2));
    assert_eq!(bin(&["compare", "--config", s(&cfg), "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(bin(&["plot", s(tmp.path()), "--kind", "histogram"]).status.code(), Some(2));
}

#[test]
fn run_plot_verify_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario("planar_quick.cfg");
    let out = tmp.path().join("run");
    let o = bin(&["run", "--config", s(&cfg), "--seed", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["seed"], 1);

    let o = bin(&["plot", s(&out), "--kind", "levelsets", "--theta", "-0.5"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("plots/levelsets.svg").exists());

    let report = tmp.path().join("verify.json");
    let o = bin(&["--sequential", "verify", s(&out.join("composite.json")), "--config", s(&cfg), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);

    let part = out.join("cbfs/cbf_000.json");
    let mut cbf: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&part).unwrap()).unwrap();
    cbf["scan_hash"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&part, cbf.to_string()).unwrap();
    assert_eq!(bin(&["verify", s(&part), "--config", s(&cfg)]).status.code(), Some(1));
}
