use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use basilic_core::harness::suites::base_scenario;
use basilic_core::harness::ProtocolKind;

fn basilic(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basilic"))
        .args(args)
        .env("BASILIC_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let s = base_scenario("honest-n4", ProtocolKind::Binary, 4, 0, 0, 0);
    let path = dir.path().join("s.json");
    fs::write(&path, serde_json::to_string(&s).unwrap()).unwrap();

    let o = basilic(&["run", "--scenario", path.to_str().unwrap(), "--seeds", "1..5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("honest-n4.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus five rows");
    let jsonl = fs::read_to_string(dir.path().join("honest-n4.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["violation"].is_null());
    }
}

#[test]
fn out_flag_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("flagged");
    let s = base_scenario("tiny", ProtocolKind::Binary, 4, 0, 0, 0);
    let path = dir.path().join("s.json");
    fs::write(&path, serde_json::to_string(&s).unwrap()).unwrap();

    let args = ["run", "--scenario", path.to_str().unwrap(), "--seeds", "7", "--out", other.to_str().unwrap()];
    let o = basilic(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(other.join("tiny.csv").exists());
    assert!(!dir.path().join("tiny.csv").exists());
}

#[test]
fn invalid_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = base_scenario("bad", ProtocolKind::Binary, 4, 0, 0, 0);
    s.d = 9;
    let path = dir.path().join("bad.json");
    fs::write(&path, serde_json::to_string(&s).unwrap()).unwrap();

    let o = basilic(&["run", "--scenario", path.to_str().unwrap(), "--seeds", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scenario field"), "{}", stderr(&o));
}

#[test]
fn unparsable_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.json");
    fs::write(&path, r#"{"name": "x", "protocol": "binary"}"#).unwrap();
    let o = basilic(&["run", "--scenario", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing field"), "{}", stderr(&o));
}

#[test]
fn missing_seeds_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let s = base_scenario("noseeds", ProtocolKind::Binary, 4, 0, 0, 0);
    let path = dir.path().join("s.json");
    fs::write(&path, serde_json::to_string(&s).unwrap()).unwrap();
    let o = basilic(&["run", "--scenario", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`seeds`"));
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(basilic(&["run", "--bogus"], dir.path()).status.code(), Some(64));
    assert_eq!(basilic(&["nonsense"], dir.path()).status.code(), Some(64));
    assert_eq!(basilic(&["suite", "nope"], dir.path()).status.code(), Some(64));
    assert_eq!(basilic(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn blockdepth_single_rho() {
    let dir = tempfile::tempdir().unwrap();
    let o = basilic(&["analyze", "blockdepth", "--a", "3", "--b", "0.1", "--rho", "0.9"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "28");
}

#[test]
fn blockdepth_table_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = basilic(&["analyze", "blockdepth", "--a", "3", "--b", "0.1", "--rho", "0.5,0.9"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn frontier_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = basilic(&["analyze", "frontier", "--n", "9", "--h", "6"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 1);
    assert!(out.lines().next().unwrap().contains(','));
}

#[test]
fn suite_list_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = basilic(&["suite", "list"], dir.path());
    assert!(stdout(&o).contains("bounds"));
    let o = basilic(&["suite", "bounds"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("[PASS]")).count(), 3);
}

#[test]
fn shipped_scenarios_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let s = basilic_core::harness::Scenario::from_json(&text);
        assert!(s.is_ok(), "{}: {:?}", path.display(), s.err());
    }
}
