use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_interfacial"))
}

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/demo.json")
}

fn run(args: &[&str], out: &Path) -> Output {
    let o = bin().args(args).arg("--out").arg(out).output().expect("binary runs");
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    o
}

const SMALL_TOPOPT: &str = r#"{
  "mesh": { "kind": "box", "counts": [4, 4, 4], "tagging": { "dirichlet": ["z_min"], "neumann": ["z_max"] } },
  "model": { "r": 4.0, "s": 2.0, "scale": [0.001, 1.0], "c_int": 0.05, "p": 2.0,
             "traction": [0.05, 0.0, -0.2], "eta": 0.5, "stress_free_identity": true },
  "labels": { "kind": "perturbed_slab", "swaps": 4 },
  "solve": { "injectivity_samples": 2000 },
  "topopt": { "max_steps": 10, "steps_per_temperature": 5 },
  "seed": 11,
  "snapshot_interval": 2
}"#;

#[test]
fn validate_demo_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate", "--scenario", demo().to_str().unwrap()], dir.path());
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("validation.json")).unwrap()).unwrap();
    assert_eq!(report["valid"], true);
    assert_eq!(report["mesh"]["tets"], 384);
    assert_eq!(report["phase1_tets"], 192);
}

#[test]
fn invalid_scenario_fails_with_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"mesh": {"kind": "box", "counts": [2, 2, 2]}, "model": {"r": 2.0, "s": 2.0, "scale": [1, 1], "c_int": 1, "p": 2, "eta": 0.5}}"#).unwrap();
    let o = run(&["validate", "--scenario", path.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).expect("stderr is a JSON error report");
    assert!(err["error"].as_str().unwrap().contains("Validate"));
    assert!(!err["causes"].as_array().unwrap().is_empty());
}

#[test]
fn missing_scenario_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["equilibrium"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn curvature_test_sphere_converges() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["curvature-test"], dir.path());
    assert!(o.status.success());
    let mut rdr = csv::Reader::from_path(dir.path().join("curvature_convergence.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let finest = rows.iter().rev().find(|r| &r[col("surface")] == "sphere").unwrap();
    let integral: f64 = finest[col("curvature_integral")].parse().unwrap();
    assert!((integral - 16.0 * PI).abs() < 0.1 * 16.0 * PI, "{integral}");
}

fn small_topopt(dir: &Path, threads: &str) -> PathBuf {
    let scenario = dir.join("small.json");
    fs::write(&scenario, SMALL_TOPOPT).unwrap();
    let out = dir.join(format!("out-{threads}"));
    let o = run(&["topopt", "--scenario", scenario.to_str().unwrap(), "--threads", threads], &out);
    assert!(o.status.success());
    out
}

#[test]
fn short_topopt_writes_trace_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let a = small_topopt(dir.path(), "1");
    assert!(t0.elapsed() < Duration::from_secs(60), "took {:?}", t0.elapsed());
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    // header, the initial row and one row per proposal
    assert_eq!(trace.lines().count(), 1 + 1 + 10);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 10);
    let accepted = summary["accepted"].as_u64().unwrap() as usize;
    let snapshots = fs::read_dir(a.join("snapshots")).map_or(0, |d| d.count());
    assert_eq!(snapshots, 2 * (accepted / 2));

    let b = small_topopt(dir.path(), "4");
    for name in ["trace.csv", "summary.json", "best.vtk", "best_interface.obj"] {
        assert!(fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
}
