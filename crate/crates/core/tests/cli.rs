use std::path::Path;
use std::process::{Command, Output};

use elastic_rdma::harness::read_results;
use elastic_rdma::orchestrator::ScenarioConfig;

/// Runs `bench` with a whitespace-separated argument line.
fn bench(line: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(line.split_whitespace())
        .output()
        .expect("bench runs")
}

fn default_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("config/default.toml")
        .display()
        .to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn shipped_config_is_the_default() {
    assert_eq!(
        ScenarioConfig::load(default_config()).unwrap(),
        ScenarioConfig::default()
    );
}

#[test]
fn control_plane_then_check() {
    let dir = tempfile::tempdir().unwrap();
    let swift = dir.path().join("swift.json");
    let out = bench(&format!(
        "control-plane --start all --scheme swift --repeats 2 --config {} --seed 3 --out {} --format json",
        default_config(),
        swift.display()
    ));
    assert!(out.status.success(), "{}", stderr(&out));
    let results = read_results(&swift).unwrap();
    assert_eq!(results.len(), 3);
    assert!(results.iter().all(|r| r.seed == 3 && r.repeats == 2));

    let out = bench(&format!("check --in {}", swift.display()));
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3);

    let unc = dir.path().join("uncached.csv");
    let out = bench(&format!(
        "control-plane --start all --scheme uncached --repeats 1 --out {}",
        unc.display()
    ));
    assert!(out.status.success(), "{}", stderr(&out));
    let out = bench(&format!("check --in {}", unc.display()));
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("FAIL uncached fork"), "{text}");

    // Several inputs combine.
    let out = bench(&format!(
        "check --in {} --in {}",
        swift.display(),
        unc.display()
    ));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_plane_writes_rows_per_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dp.csv");
    let out = bench(&format!(
        "data-plane --op send-recv --mode async --threads 1,2 --duration 0.001 --scheme kernel --out {}",
        path.display()
    ));
    assert!(out.status.success(), "{}", stderr(&out));
    let results = read_results(&path).unwrap();
    let names: Vec<_> = results.iter().map(|r| r.scenario.as_str()).collect();
    assert_eq!(
        names,
        [
            "data-plane/send-recv/async/t1",
            "data-plane/send-recv/async/t2"
        ]
    );
    assert!(results.iter().all(|r| r.scheme == "kernel"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(
        bench(&format!("check --in {}", missing.display()))
            .status
            .code(),
        Some(2)
    );

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[pool]\nmax_qps = \"many\"\n").unwrap();
    let out = bench(&format!(
        "control-plane --start cold --config {}",
        bad.display()
    ));
    assert_eq!(out.status.code(), Some(2));

    for line in [
        "data-plane --op read --threads 65 --duration 0.001",
        "data-plane --op read --scheme baseline --duration 0.001",
        "data-plane --op read --duration 0",
        "control-plane --start fork --repeats 0",
    ] {
        assert_eq!(bench(line).status.code(), Some(2), "{line}");
    }
    // Unknown values are usage errors from the argument parser.
    assert_ne!(
        bench("control-plane --start lukewarm").status.code(),
        Some(0)
    );
}
