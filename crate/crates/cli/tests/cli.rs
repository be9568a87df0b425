use std::path::PathBuf;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuropubsub")).args(args).output().expect("binary runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "scenarios", &format!("{name}.json")].iter().collect();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn version_flag() {
    let o = bin(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn validate_accepts_bundled_and_rejects_broken() {
    let o = bin(&["validate", "--scenario", &scenario("nwdaf")]);
    assert_eq!(o.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = std::fs::read_to_string(scenario("nwdaf")).unwrap().replace(r#""b": "mec1""#, r#""b": "ghost""#);
    std::fs::write(&bad, text).unwrap();
    let o = bin(&["validate", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("topology"));

    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(bin(&["validate", "--scenario", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn missing_file_is_a_runtime_error() {
    let o = bin(&["run", "--scenario", "/nonexistent/x.json", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("m.json");
    let o = bin(&["run", "--scenario", &scenario("funnel"), "--seed", "4", "--out", json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&json).unwrap();
    let report = neuropubsub::harness::parse_json(&text).unwrap();
    assert_eq!(report.seed, 4);

    let o = bin(&["run", "--scenario", &scenario("funnel"), "--seed", "4", "--format", "csv"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.lines().next().unwrap().starts_with("section"));
    assert!(csv.contains("totals"));

    let o = bin(&["run", "--scenario", &scenario("funnel"), "--seed", "4", "--format", "xml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn place_prints_costs_for_each_algorithm() {
    for alg in ["oracle", "upstream", "baseline"] {
        let o = bin(&["place", "--scenario", &scenario("nlp"), "--algorithm", alg]);
        assert!(o.status.success(), "{alg}: {}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 1);
        assert!(v[0]["cost"]["objective_value"].is_number(), "{alg}");
    }
}

#[test]
fn compare_reports_both_runs() {
    let o = bin(&["compare", "--scenario", &scenario("nlp"), "--seed", "2"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let kb = |k: &str| v[k]["totals"]["link_kb"].as_f64().unwrap();
    assert!(kb("upstream") < kb("baseline"));
    assert_eq!(v["upstream"]["totals"]["delivered"], v["baseline"]["totals"]["delivered"]);
}
