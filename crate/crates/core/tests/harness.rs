use std::time::Duration;

use elastic_rdma::harness::*;
use elastic_rdma::orchestrator::{ScenarioConfig, Scheme, StartKind};

fn cfg() -> ScenarioConfig {
    ScenarioConfig::default()
}

fn params(op: DataOp, mode: Mode, threads: usize) -> DataPlaneParams {
    DataPlaneParams {
        op,
        mode,
        threads,
        duration: Duration::from_micros(500),
        ..DataPlaneParams::default()
    }
}

fn agg(r: &BenchResult) -> &Row {
    r.aggregate().unwrap()
}

#[test]
fn control_plane_rows_and_aggregate() {
    let r = bench_control_plane(&cfg(), StartKind::Warm, Scheme::Swift, 10, 1).unwrap();
    assert_eq!(r.raw().count(), 10);
    assert_eq!(r.rows.len(), 11);
    assert_eq!(r.repeats, 10);
    let a = agg(&r);
    assert_eq!(a.end_to_end_us, Some(89_000.0 + 1_950.0));
    assert_eq!(aggregate(&r.rows).as_ref(), Some(a));
}

#[test]
fn cold_swift_launch_dominates() {
    let r = bench_control_plane(&cfg(), StartKind::Cold, Scheme::Swift, 3, 1).unwrap();
    let a = agg(&r);
    assert!(a.visible_control_plane_us.unwrap() / a.end_to_end_us.unwrap() <= 0.01);
}

#[test]
fn fork_swift_vs_kernel_mediated() {
    let s = bench_control_plane(&cfg(), StartKind::Fork, Scheme::Swift, 2, 1).unwrap();
    let k = bench_control_plane(&cfg(), StartKind::Fork, Scheme::KernelMediated, 2, 1).unwrap();
    let ratio = agg(&s).end_to_end_us.unwrap() / agg(&k).end_to_end_us.unwrap() - 1.0;
    assert!(ratio > 0.0 && ratio < 0.08, "{ratio}");
}

#[test]
fn control_plane_argument_errors() {
    assert!(matches!(
        bench_control_plane(&cfg(), StartKind::Cold, Scheme::Swift, 0, 1),
        Err(HarnessError::ZeroRepeats)
    ));
    let mut c = cfg();
    c.handlers.clear();
    assert!(matches!(
        bench_control_plane(&c, StartKind::Cold, Scheme::Swift, 1, 1),
        Err(HarnessError::Scenario(_))
    ));
}

fn all_control(scheme: Scheme, config: &ScenarioConfig) -> Vec<BenchResult> {
    StartKind::ALL
        .iter()
        .map(|k| bench_control_plane(config, *k, scheme, 2, 4).unwrap())
        .collect()
}

#[test]
fn requirement_check_verdicts() {
    let swift = requirement_check(&all_control(Scheme::Swift, &cfg())).unwrap();
    assert!(swift.passed(), "{swift}");
    let unc = requirement_check(&all_control(Scheme::Uncached, &cfg())).unwrap();
    assert!(!unc.rule("uncached", StartKind::Fork).unwrap().pass);

    // Zero-cost synthetic scheme passes everything.
    let mut zero = cfg();
    zero.costs.subroutines.values_mut().for_each(|v| *v = 0.0);
    zero.costs.kernel.values_mut().for_each(|v| *v = 0.0);
    zero.costs.per_core_check_cost_per_core = 0.0;
    zero.costs.qp_connect_cost = 0.0;
    zero.costs.kernel_connect_cost = 0.0;
    assert!(requirement_check(&all_control(Scheme::Uncached, &zero))
        .unwrap()
        .passed());

    let partial = vec![bench_control_plane(&cfg(), StartKind::Cold, Scheme::Swift, 1, 1).unwrap()];
    assert!(matches!(
        requirement_check(&partial),
        Err(HarnessError::MissingScenario(_))
    ));
    assert!(requirement_check(&[]).is_err());
}

#[test]
fn data_plane_latency_calibration() {
    let run =
        |scheme| run_data_plane(&cfg(), scheme, &params(DataOp::Read, Mode::Sync, 1), 1).unwrap();
    let s = run(Scheme::Swift).threads[0];
    let k = run(Scheme::KernelMediated).threads[0];
    assert_eq!(s.mean_latency_us, 2.0);
    assert!((k.mean_latency_us - 3.33).abs() < 1e-9);
    // Single-thread sync throughput drops by about 40%.
    let drop = 1.0 - k.ops as f64 / s.ops as f64;
    assert!((0.35..0.45).contains(&drop), "{drop}");
}

#[test]
fn send_recv_round_trip_latency() {
    let run = |scheme| {
        run_data_plane(&cfg(), scheme, &params(DataOp::SendRecv, Mode::Sync, 1), 1)
            .unwrap()
            .threads[0]
    };
    let s = run(Scheme::Swift);
    let k = run(Scheme::KernelMediated);
    assert!(s.mean_latency_us < k.mean_latency_us, "{s:?} {k:?}");
    assert!(s.ops > 0);
}

#[test]
fn throughput_conservation_against_fabric_log() {
    for op in DataOp::ALL {
        let p = params(op, Mode::Async, 2);
        let r = run_data_plane(&cfg(), Scheme::Swift, &p, 3).unwrap();
        let ops: u64 = r.threads.iter().map(|t| t.ops).sum();
        // Responder-side records of client-initiated requests.
        let client_gid = r.client_gid;
        let logged = r
            .fabric
            .log_records()
            .iter()
            .filter(|l| l.src.gid == client_gid && l.status == elastic_rdma::verbs::WcStatus::Ok)
            .count() as u64;
        assert_eq!(ops, logged, "{op}");
        let b = bench_data_plane(&cfg(), Scheme::Swift, &p, 1, 3).unwrap();
        let thr = agg(&b).throughput_ops_s.unwrap();
        assert!((thr * p.duration.as_secs_f64() - ops as f64).abs() < 1e-6);
    }
}

#[test]
fn data_plane_errors() {
    let mut p = params(DataOp::Read, Mode::Sync, 65);
    assert!(matches!(
        run_data_plane(&cfg(), Scheme::Swift, &p, 1),
        Err(HarnessError::PoolExhausted { .. })
    ));
    p.threads = 0;
    assert!(run_data_plane(&cfg(), Scheme::Swift, &p, 1).is_err());
    p.threads = 1;
    assert!(run_data_plane(&cfg(), Scheme::Baseline, &p, 1).is_err());
    p.duration = Duration::ZERO;
    assert!(run_data_plane(&cfg(), Scheme::Swift, &p, 1).is_err());
}

#[test]
fn csv_and_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let results = vec![
        bench_control_plane(&cfg(), StartKind::Fork, Scheme::Swift, 3, 9).unwrap(),
        bench_data_plane(
            &cfg(),
            Scheme::Swift,
            &params(DataOp::Write, Mode::Async, 2),
            2,
            9,
        )
        .unwrap(),
    ];
    let csv = dir.path().join("r.csv");
    write_results(&results, Format::Csv, &csv).unwrap();
    let back = read_results(&csv).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in results.iter().zip(&back) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.repeats, b.repeats);
        assert_eq!(aggregate(&b.rows).as_ref(), b.aggregate());
    }
    let json = dir.path().join("r.json");
    write_results(&results, Format::Json, &json).unwrap();
    let back = read_results(&json).unwrap();
    assert_eq!(back, results);
    let text = std::fs::read_to_string(&json).unwrap();
    assert!(
        text.contains("\"scheme\"")
            && text.contains("\"seed\"")
            && text.contains("\"config_hash\"")
    );
    assert_eq!(back[0].config_hash.len(), 64);

    assert!(matches!(
        write_results(&[], Format::Csv, &csv),
        Err(HarnessError::Empty)
    ));
    assert!(write_results(&results, Format::Csv, &dir.path().join("no/such/dir.csv")).is_err());
}

#[test]
fn raw_csv_is_deterministic() {
    let once = || {
        let r = vec![
            bench_control_plane(&cfg(), StartKind::Warm, Scheme::Swift, 2, 5).unwrap(),
            bench_data_plane(
                &cfg(),
                Scheme::KernelMediated,
                &params(DataOp::SendRecv, Mode::Async, 4),
                2,
                5,
            )
            .unwrap(),
        ];
        to_csv(&r).unwrap()
    };
    assert_eq!(once(), once());
}

#[test]
fn async_beats_sync() {
    let run = |mode| {
        run_data_plane(&cfg(), Scheme::Swift, &params(DataOp::Write, mode, 1), 1)
            .unwrap()
            .threads[0]
            .ops
    };
    assert!(run(Mode::Async) > run(Mode::Sync));
}

mod common;

#[test]
fn swift_never_loses_to_kernel_mediated() {
    common::data_plane_ordering(Duration::from_micros(200)).unwrap();
}
