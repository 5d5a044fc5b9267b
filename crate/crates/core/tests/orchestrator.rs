use std::sync::Arc;
use std::time::Duration;

use elastic_rdma::clock::micros;
use elastic_rdma::orchestrator::*;
use elastic_rdma::verbs::QpState;
use proptest::prelude::*;

mod common;

use common::conserved;

fn orch(scheme: Scheme) -> Orchestrator {
    Orchestrator::new(ScenarioConfig::default(), scheme, 7).unwrap()
}

fn normal(user: &str) -> RequestSpec {
    RequestSpec::new(user, "noop", LatencyClass::Normal)
}

fn fast(user: &str) -> RequestSpec {
    RequestSpec::new(user, "noop", LatencyClass::Fast)
}

/// End-to-end time of one start kind after the usual warm-up.
fn e2e(scheme: Scheme, kind: StartKind) -> TimingBreakdown {
    let mut o = orch(scheme);
    if kind != StartKind::Cold {
        o.handle_request(&normal("a")).unwrap();
        o.clock().advance(Duration::from_secs(1));
    }
    let spec = match kind {
        StartKind::Fork => fast("a"),
        _ => normal("a"),
    };
    let out = o.handle_request(&spec).unwrap();
    assert_eq!(out.start, kind);
    assert!(conserved(&out.timing));
    out.timing
}

#[test]
fn start_kind_policy() {
    let mut o = orch(Scheme::Swift);
    let first = o.handle_request(&fast("a")).unwrap();
    assert_eq!(first.start, StartKind::Cold);
    assert!(first.fell_back);
    let warm = o.handle_request(&normal("a")).unwrap();
    assert_eq!(
        (warm.start, warm.container),
        (StartKind::Warm, first.container)
    );
    assert!(!warm.fell_back);
    let fork = o.handle_request(&fast("a")).unwrap();
    assert_eq!(
        (fork.start, fork.container),
        (StartKind::Fork, first.container)
    );
    let other = o.handle_request(&normal("b")).unwrap();
    assert_eq!(other.start, StartKind::Cold);
    assert_ne!(other.container, first.container);
    // A warm start adds a second INIT to the container.
    assert_eq!(o.inits(first.container).len(), 2);
    assert!(o.check_invariants().is_empty());
}

#[test]
fn cold_start_calibration() {
    let t = e2e(Scheme::Swift, StartKind::Cold);
    assert_eq!(t.task_launch, 318_000.0);
    assert_eq!(t.visible_control_plane, 0.0);
    assert!(t.control_plane_share() <= 0.02);
    assert_eq!(t.init_elapsed, t.runtime_init.max(t.rdma_setup));

    let u = e2e(Scheme::Uncached, StartKind::Cold);
    assert_eq!(u.rdma_setup, 37_210.0);
    assert_eq!(u.visible_control_plane, 37_210.0 - 16_000.0);
    assert!(u.control_plane_share() <= 1.0 - 0.935);
}

#[test]
fn warm_start_calibration() {
    let base = e2e(Scheme::Baseline, StartKind::Warm).end_to_end;
    assert_eq!(base, 89_000.0);
    let swift = e2e(Scheme::Swift, StartKind::Warm);
    assert_eq!(swift.rdma_setup, 3_550.0);
    assert_eq!(swift.visible_control_plane, 1_950.0);
    let over = swift.end_to_end / base - 1.0;
    assert!(over <= 0.03, "{over}");
    let unc = e2e(Scheme::Uncached, StartKind::Warm).end_to_end / base - 1.0;
    assert!(unc >= 0.35, "{unc}");
}

#[test]
fn fork_start_calibration() {
    let base = e2e(Scheme::Baseline, StartKind::Fork);
    assert_eq!(base.end_to_end, 1_383.86);
    let swift = e2e(Scheme::Swift, StartKind::Fork);
    // Connected already: nothing of the control plane is visible.
    assert_eq!(swift.visible_control_plane, 0.0);
    assert_eq!(swift.end_to_end, 1_483.86);
    let over = swift.end_to_end / base.end_to_end - 1.0;
    assert!((0.05..=0.08).contains(&over), "{over}");
    let km = e2e(Scheme::KernelMediated, StartKind::Fork);
    assert_eq!(km.visible_control_plane, 18.70);
    assert!(swift.end_to_end > km.end_to_end);
    let unc = e2e(Scheme::Uncached, StartKind::Fork);
    assert_eq!(unc.visible_control_plane, 26_500.0);
}

#[test]
fn fork_to_new_destination_connects_under_100us() {
    let mut o = orch(Scheme::Swift);
    let other = o.add_server().unwrap();
    o.handle_request(&normal("a")).unwrap();
    let out = o.handle_request(&fast("a").to(other)).unwrap();
    let v = out.timing.visible_control_plane;
    assert!(v > 0.0 && v < 100.0, "{v}");
    // The connection is kept: the next fork there pays nothing.
    let again = o.handle_request(&fast("a").to(other)).unwrap();
    assert_eq!(again.timing.visible_control_plane, 0.0);
    assert_eq!(again.qp_ids, out.qp_ids);
}

#[test]
fn init_tables_after_cold_start() {
    let mut o = orch(Scheme::Swift);
    let out = o.handle_request(&normal("a")).unwrap();
    o.drain().unwrap();
    let init = o.init(out.container, out.pid).unwrap();
    let dest = o.default_destination();
    let entries = init.assignments().entries();
    assert_eq!(entries.len(), 8);
    assert!(entries
        .iter()
        .all(|e| e.pid.is_none() && e.destination == Some(dest)));
    assert!(init.qp_table().iter().all(|q| q.state() == QpState::Rts));
    let rec = o.table().get(out.container).unwrap();
    assert_eq!(rec.inits[0].connections.len(), 8);
}

#[test]
fn release_after_exit_keeps_destination() {
    let mut o = orch(Scheme::Swift);
    let cold = o.handle_request(&normal("a")).unwrap();
    let f = o.handle_request(&fast("a")).unwrap();
    let init = o.init(cold.container, cold.pid).unwrap();
    assert_eq!(init.assignments().entries()[f.qp_ids[0]].pid, Some(f.pid));
    o.drain().unwrap();
    let init = o.init(cold.container, cold.pid).unwrap();
    let e = init.assignments().entries()[f.qp_ids[0]];
    assert_eq!(
        (e.pid, e.destination),
        (None, Some(o.default_destination()))
    );
    assert!(!o.processes(cold.container).unwrap().is_alive(f.pid));
    let g = o.handle_request(&fast("a")).unwrap();
    assert_eq!(g.qp_ids, f.qp_ids);
}

#[test]
fn pipelining_is_max_not_sum() {
    let mut rng = common::rng(5);
    for _ in 0..50 {
        common::pipelining_pair(&mut rng).unwrap();
    }
}

#[test]
fn burst_of_fast_requests_never_exhausts() {
    let mut o = orch(Scheme::Swift);
    o.handle_request(&normal("a")).unwrap();
    let at = o.now() + Duration::from_secs(1);
    let mut pids = std::collections::BTreeSet::new();
    for _ in 0..20 {
        let out = o.handle_request_at(&fast("a"), at).unwrap();
        assert_eq!(out.start, StartKind::Fork);
        assert!(pids.insert(out.pid));
        assert!(out.timing.visible_control_plane < 100.0);
    }
    assert_eq!(o.events().count("exhausted"), 0);
    assert!(o.check_invariants().is_empty());
}

#[test]
fn exhaustion_waits_for_release() {
    let cfg = ScenarioConfig {
        pool: PoolConfig {
            initial_qps: 2,
            threshold: 0,
            batch: 1,
            max_qps: 2,
        },
        ..ScenarioConfig::default()
    };
    let mut o = Orchestrator::new(cfg, Scheme::Swift, 1).unwrap();
    o.handle_request(&normal("a")).unwrap();
    let at = o.now() + Duration::from_secs(1);
    let outs: Vec<_> = (0..4)
        .map(|_| o.handle_request_at(&fast("a"), at).unwrap())
        .collect();
    assert!(o.events().count("exhausted") >= 1);
    assert!(outs[2].timing.queue_wait > 0.0);
    assert!(outs.iter().all(|x| conserved(&x.timing)));
    assert!(o.check_invariants().is_empty());
}

#[test]
fn terminate_closes_everything() {
    let mut o = orch(Scheme::Swift);
    let cold = o.handle_request(&normal("a")).unwrap();
    let tag = o.container_tag(cold.container).unwrap().to_owned();
    assert_eq!(o.fabric().qps_tagged(&tag).len(), 8);
    o.handle_request(&fast("a")).unwrap();
    let closed = o.terminate_container(cold.container).unwrap();
    assert!(closed >= 8);
    assert!(o.fabric().qps_tagged(&tag).is_empty());
    assert!(o.table().get(cold.container).is_none());
    assert!(o.terminate_container(cold.container).is_err());
    assert_eq!(o.handle_request(&fast("a")).unwrap().start, StartKind::Cold);
}

#[test]
fn terminate_sweeps_uncached_children() {
    let mut o = orch(Scheme::Uncached);
    let cold = o.handle_request(&normal("a")).unwrap();
    let at = o.now() + Duration::from_secs(1);
    o.handle_request_at(&fast("a"), at).unwrap();
    let tag = o.container_tag(cold.container).unwrap().to_owned();
    assert_eq!(o.fabric().qps_tagged(&tag).len(), 9);
    o.terminate_container(cold.container).unwrap();
    assert!(o.fabric().qps_tagged(&tag).is_empty());
}

#[test]
fn echo_and_kv_read_handlers() {
    let mut o = orch(Scheme::Swift);
    let payload: Vec<u8> = (0..64).collect();
    let spec = RequestSpec::new("a", "echo", LatencyClass::Normal).with_payload(payload.clone());
    let cold = o.handle_request(&spec).unwrap();
    assert_eq!(cold.result.as_deref(), Ok(&payload[..]));
    assert!(cold.timing.data_exchange > 0.0);
    let f = o
        .handle_request(&RequestSpec {
            class: LatencyClass::Fast,
            ..spec.clone()
        })
        .unwrap();
    assert_eq!(f.result.as_deref(), Ok(&payload[..]));

    let kv = RequestSpec::new("a", "kv-read", LatencyClass::Normal).with_payload(vec![0; 16]);
    let out = o.handle_request(&kv).unwrap();
    let got = out.result.unwrap();
    assert_eq!(&got[..8], &0u64.to_le_bytes());
    assert_eq!(&got[8..], &1u64.to_le_bytes());
}

#[test]
fn handler_sees_assigned_qp_and_can_register() {
    let mut o = orch(Scheme::Swift);
    o.register_handler(
        "probe",
        Arc::new(|_, ctx| {
            let pd = ctx.pd.as_ref().ok_or("no pd")?;
            pd.reg_mr(4096, elastic_rdma::verbs::AccessFlags::ALL)
                .map_err(|e| e.to_string())?;
            Ok(ctx.qp_ids.iter().map(|i| *i as u8).collect())
        }),
    );
    let spec = RequestSpec::new("a", "probe", LatencyClass::Normal);
    o.handle_request(&spec).unwrap();
    let out = o
        .handle_request(&RequestSpec {
            class: LatencyClass::Fast,
            ..spec
        })
        .unwrap();
    assert_eq!(
        out.result.unwrap(),
        out.qp_ids.iter().map(|i| *i as u8).collect::<Vec<_>>()
    );
}

#[test]
fn handler_panic_is_captured() {
    let mut o = orch(Scheme::Swift);
    o.register_handler("boom", Arc::new(|_, _| panic!("kaboom")));
    let out = o
        .handle_request(&RequestSpec::new("a", "boom", LatencyClass::Normal))
        .unwrap();
    assert!(out.result.unwrap_err().contains("kaboom"));
    let again = o
        .handle_request(&RequestSpec::new("a", "boom", LatencyClass::Fast))
        .unwrap();
    assert_eq!(again.start, StartKind::Fork);
    assert!(o.check_invariants().is_empty());
}

#[test]
fn unknown_function_is_an_error() {
    let mut o = orch(Scheme::Swift);
    assert!(matches!(
        o.handle_request(&RequestSpec::new("a", "nope", LatencyClass::Normal)),
        Err(OrchestratorError::UnknownFunction(_))
    ));
}

#[test]
fn failed_setup_retries_uncached() {
    let mut o = orch(Scheme::Swift);
    o.worker().env().inject_fault("open_device", 1);
    let out = o.handle_request(&normal("a")).unwrap();
    assert_eq!(out.start, StartKind::Cold);
    assert_eq!(o.events().count("setup_failed"), 1);
    // The retry paid the uncached price.
    assert!(out.timing.rdma_setup > 26_500.0);
    assert!(o.check_invariants().is_empty());

    let mut o = orch(Scheme::Swift);
    o.worker().env().inject_fault("open_device", 2);
    assert!(matches!(
        o.handle_request(&normal("a")),
        Err(OrchestratorError::InitFailed(_))
    ));
    assert!(o.table().is_empty());
    assert!(o.fabric().qps_tagged("container-1").is_empty());
    assert_eq!(
        o.handle_request(&normal("a")).unwrap().start,
        StartKind::Cold
    );
}

#[test]
fn writer_tagging_rejects_foreign_writers() {
    let mut o = orch(Scheme::Swift);
    let a = o.handle_request(&normal("a")).unwrap();
    let b = o.handle_request(&normal("a")).unwrap();
    let ia = o.init(a.container, a.pid).unwrap();
    let ib = o.init(b.container, b.pid).unwrap();
    assert_ne!(ia.writer(), ib.writer());
    let mut t = ia.assignments().clone();
    assert!(matches!(
        t.set(ib.writer(), 0, Assignment::default()),
        Err(TableError::NotOwner { .. })
    ));
    assert!(t.set(ia.writer(), 0, Assignment::default()).is_ok());
}

#[test]
fn event_log_round_trips() {
    let mut o = orch(Scheme::Swift);
    o.handle_request(&normal("a")).unwrap();
    o.handle_request(&fast("a")).unwrap();
    let text = o.events().to_jsonl();
    let back = EventLog::from_jsonl(&text).unwrap();
    assert_eq!(back, o.events().records());
    assert_eq!(o.events().count("fork"), 1);
}

#[test]
fn deterministic_for_a_seed() {
    let run = || {
        let mut cfg = ScenarioConfig::default();
        cfg.costs.launch_jitter = 500.0;
        let mut o = Orchestrator::new(cfg, Scheme::Swift, 3).unwrap();
        (0..5)
            .map(|i| {
                let spec = if i % 2 == 0 { normal("a") } else { fast("a") };
                o.handle_request(&spec).unwrap().timing
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn selector_matches_reference_on_random_tables() {
    let mut rng = common::rng(99);
    for _ in 0..1000 {
        common::selector_trial(&mut rng).unwrap();
    }
}

#[derive(Debug, Clone)]
enum Step {
    Req { user: u8, fast: bool, dest: u8 },
    Advance(u32),
    Terminate(u8),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => (0u8..3, any::<bool>(), 0u8..2).prop_map(|(user, fast, dest)| Step::Req { user, fast, dest }),
        2 => (0u32..5_000).prop_map(Step::Advance),
        1 => (0u8..3).prop_map(Step::Terminate),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_schedules_keep_invariants(steps in prop::collection::vec(step(), 1..30)) {
        let mut o = orch(Scheme::Swift);
        let dests = [o.default_destination(), o.add_server().unwrap()];
        for s in steps {
            match s {
                Step::Req { user, fast, dest } => {
                    let class = if fast { LatencyClass::Fast } else { LatencyClass::Normal };
                    let spec = RequestSpec::new(&format!("u{user}"), "noop", class).to(dests[dest as usize]);
                    let at = o.now();
                    let out = o.handle_request_at(&spec, at).unwrap();
                    prop_assert!(conserved(&out.timing));
                    prop_assert_eq!(o.table().get(out.container).unwrap().user.clone(), spec.user);
                }
                Step::Advance(us) => o.clock().advance(micros(us as f64)),
                Step::Terminate(user) => {
                    if let Some(id) = o.container_of(&format!("u{user}"), "noop") {
                        let tag = o.container_tag(id).unwrap().to_owned();
                        o.terminate_container(id).unwrap();
                        prop_assert!(o.fabric().qps_tagged(&tag).is_empty());
                    }
                }
            }
            let bad = o.check_invariants();
            prop_assert!(bad.is_empty(), "{:?}", bad);
        }
    }
}

#[test]
fn seeded_schedules_for_every_scheme() {
    for scheme in Scheme::ALL {
        for seed in 0..5 {
            common::orchestrator_schedule(seed, scheme, 40).unwrap();
        }
    }
}
