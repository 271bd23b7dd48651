use axum::routing::post;
use axum::{Json, Router};
use coopbench_client::{BridgeConnection, Client, ClientError};
use coopbench_core::agents::{Observation, PlannedTrajectory, PolicyKind};
use coopbench_core::api::*;
use coopbench_core::bench::{BuiltinSuite, SuiteConfig};
use coopbench_core::bridge::{ClientFrame, ServerFrame, SessionVerb, StateFrame};
use coopbench_core::gen::{propose, DifficultyBand, Proposer};
use coopbench_core::maps;
use coopbench_core::real2sim::{serialize_log, synthetic_log, SyntheticSpec};
use coopbench_core::scenario::Category;
use coopbench_server::ServerConfig;
use std::time::Duration;
use tokio::time::timeout;

async fn start(cfg: ServerConfig) -> Client {
    let (addr, _task) = coopbench_server::spawn(([127, 0, 0, 1], 0).into(), cfg).await.unwrap();
    Client::new(format!("http://{addr}"))
}

async fn mock(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

fn straight_session() -> SessionRequest {
    SessionRequest {
        scenario: ScenarioRef::Builtin("straight_route".into()),
        cav: "cav1".into(),
        policy: PolicyKind::Single,
        seed: 3,
        episode: Default::default(),
    }
}

fn control(throttle: f64, brake: f64, takeover: bool, tick_hint: Option<u64>) -> ClientFrame {
    ClientFrame::Control {
        tick_hint,
        throttle,
        brake,
        steer: 0.0,
        takeover,
    }
}

async fn next_state(c: &mut BridgeConnection) -> StateFrame {
    let f = timeout(Duration::from_secs(10), c.wait_for(|f| f.as_state().is_some()))
        .await
        .expect("state frame in time")
        .unwrap()
        .expect("socket open");
    f.as_state().unwrap().clone()
}

async fn event(c: &mut BridgeConnection, kind: &str) -> ServerFrame {
    timeout(
        Duration::from_secs(10),
        c.wait_for(|f| f.as_event().is_some_and(|e| e.kind == kind)),
    )
    .await
    .expect("event in time")
    .unwrap()
    .expect("socket open")
}

async fn session(c: &mut BridgeConnection, verb: SessionVerb) {
    c.send(&ClientFrame::Session { verb }).await.unwrap();
}

#[tokio::test]
async fn full_brake_appears_in_the_next_tick_state_frame() {
    let client = start(ServerConfig::default()).await;
    let info = client.create_session(&straight_session()).await.unwrap();
    let mut c = client.connect(&info).await.unwrap();
    while next_state(&mut c).await.tick < 30 {}
    session(&mut c, SessionVerb::Pause).await;
    let paused = timeout(Duration::from_secs(10), c.wait_for(|f| f.as_state().is_some_and(|s| s.paused)))
        .await
        .unwrap()
        .unwrap()
        .unwrap();
    let t = paused.as_state().unwrap().tick;
    c.send(&control(0.0, 1.0, true, Some(t))).await.unwrap();
    session(&mut c, SessionVerb::Resume).await;
    let s = next_state(&mut c).await;
    assert_eq!(s.tick, t + 1);
    assert_eq!(s.ego.state.brake, 1.0);
    assert_eq!(s.ego.state.throttle, 0.0);
    assert!(s.takeover);
    c.close().await.unwrap();
}

#[tokio::test]
async fn driver_disconnect_triggers_failsafe_within_one_tick() {
    let client = start(ServerConfig::default()).await;
    let info = client.create_session(&straight_session()).await.unwrap();
    let mut observer = client.connect(&info).await.unwrap();
    let mut driver = client.connect(&info).await.unwrap();
    while next_state(&mut driver).await.tick < 20 {}
    driver.send(&control(0.6, 0.0, true, None)).await.unwrap();
    loop {
        let s = next_state(&mut observer).await;
        if s.takeover && s.ego.state.throttle > 0.0 {
            break;
        }
    }
    drop(driver);
    let f = event(&mut observer, "failsafe").await;
    let at = f.as_event().unwrap().tick;
    let s = next_state(&mut observer).await;
    assert!(s.tick <= at + 1, "state {} after failsafe at {at}", s.tick);
    assert_eq!(s.ego.state.brake, 1.0);
    assert_eq!(s.ego.state.throttle, 0.0);
}

#[tokio::test]
async fn recorded_demo_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    let client = start(ServerConfig {
        demo_dir: Some(demos.clone()),
        ..Default::default()
    })
    .await;
    let info = client.create_session(&straight_session()).await.unwrap();
    let mut c = client.connect(&info).await.unwrap();
    next_state(&mut c).await;
    session(&mut c, SessionVerb::RecordStart).await;
    let mut last = 0;
    while last < 60 {
        let s = next_state(&mut c).await;
        last = s.tick;
        match s.tick {
            10..=29 => c.send(&control(0.5, 0.0, true, Some(s.tick))).await.unwrap(),
            30..=35 => c.send(&control(0.0, 0.4, true, Some(s.tick))).await.unwrap(),
            36 => c.send(&control(0.0, 0.0, false, Some(s.tick))).await.unwrap(),
            _ => {}
        }
    }
    session(&mut c, SessionVerb::RecordStop).await;
    event(&mut c, "recorded").await;
    let logs = client.demos(&info.id).await.unwrap();
    assert_eq!(logs.len(), 1);
    assert!(logs[0].ticks.iter().any(|t| t.takeover));
    assert!(logs[0].ticks.iter().any(|t| !t.takeover));
    let path = demos.join(format!("{}_0.json", info.id));
    assert!(path.is_file());
    let r = client
        .replay(&ReplayRequest {
            demo: path,
            scenario: None,
        })
        .await
        .unwrap();
    assert!(r.identical);
    assert_eq!(r.result, logs[0].outcome);
    c.close().await.unwrap();
}

#[tokio::test]
async fn malformed_frames_get_error_events_and_unknown_fields_pass() {
    let client = start(ServerConfig::default()).await;
    let info = client.create_session(&straight_session()).await.unwrap();
    let mut c = client.connect(&info).await.unwrap();
    next_state(&mut c).await;
    c.send_raw("{\"type\":\"control\",\"throttle\":").await.unwrap();
    let e = event(&mut c, "error").await;
    assert!(e.as_event().unwrap().details.contains("malformed"));
    c.send_raw("{\"type\":\"control\",\"brake\":1.0,\"takeover\":true,\"rumble\":0.3}\n")
        .await
        .unwrap();
    loop {
        let s = next_state(&mut c).await;
        if s.takeover {
            assert_eq!(s.ego.state.brake, 1.0);
            break;
        }
    }
    let s = next_state(&mut c).await;
    assert!(s.route.len() >= 2);
    assert_eq!(s.lane_graph_digest.len(), 64);
    assert_eq!(s.ego.id, "cav1");
}

#[tokio::test]
async fn token_is_enforced() {
    let open = start(ServerConfig {
        token: Some("sesame".into()),
        ..Default::default()
    })
    .await;
    match open.health().await {
        Err(ClientError::Api { status, .. }) => assert_eq!(status, 401),
        other => panic!("expected 401, got {other:?}"),
    }
    let authed = Client::new(open.base()).with_token(Some("sesame".into()));
    assert_eq!(authed.health().await.unwrap()["status"], "ok");
    let info = authed.create_session(&straight_session()).await.unwrap();
    let mut c = authed.connect(&info).await.unwrap();
    next_state(&mut c).await;
}

#[tokio::test]
async fn suite_resumes_over_http_and_report_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SuiteConfig::new(vec![PolicyKind::Single, PolicyKind::CoopPerception], vec![0], dir.path().join("r"));
    cfg.builtin = vec![BuiltinSuite::OccludedCrossing];
    cfg.workers = 2;
    let client = start(ServerConfig::default()).await;
    let req = |stop_after| RunRequest {
        config: cfg.clone(),
        stop_after,
        workers: None,
    };
    let a = client.run(&req(Some(10))).await.unwrap();
    assert_eq!((a.total, a.executed, a.complete), (20, 10, false));
    assert!(a.report.is_none());
    let b = client.run(&req(None)).await.unwrap();
    assert_eq!((b.executed, b.skipped, b.complete), (10, 10, true));
    let c = client.run(&req(None)).await.unwrap();
    assert_eq!((c.executed, c.skipped), (0, 20));
    assert_eq!(b.report, c.report);
    let rep = client.report(&ReportRequest { results: cfg.out.clone() }).await.unwrap();
    assert_eq!(rep.text, std::fs::read_to_string(cfg.out.join("summary.txt")).unwrap());
    assert_eq!(Some(rep.report), c.report);
}

#[tokio::test]
async fn sweep_requires_clean_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SuiteConfig::new(vec![PolicyKind::CoopPerception], vec![0], dir.path().join("s"));
    cfg.builtin = vec![BuiltinSuite::StraightRoute];
    let client = start(ServerConfig::default()).await;
    let bad = coopbench_core::bench::SweepGrid {
        latency_ticks: vec![6],
        noise: vec![[0.0, 0.0]],
    };
    let err = client
        .sweep(&SweepRequest {
            config: cfg.clone(),
            grid: Some(bad),
            workers: None,
        })
        .await
        .unwrap_err();
    assert!(matches!(err, ClientError::Api { status: 422, .. }), "{err}");
    let grid = coopbench_core::bench::SweepGrid {
        latency_ticks: vec![0, 6],
        noise: vec![[0.0, 0.0], [0.6, 0.6]],
    };
    let r = client
        .sweep(&SweepRequest {
            config: cfg,
            grid: Some(grid),
            workers: None,
        })
        .await
        .unwrap();
    assert_eq!(r.rows.len(), 4);
    let clean = r.rows.iter().find(|x| x.point.is_clean()).unwrap();
    assert_eq!((clean.d_ds, clean.d_rc, clean.d_is, clean.d_sr), (0.0, 0.0, 0.0, 0.0));
    for row in &r.rows {
        assert!((row.d_ds - (row.ds - clean.ds)).abs() < 1e-12);
    }
}

#[tokio::test]
async fn human_comparison_against_stored_results() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(ServerConfig {
        demo_dir: Some(dir.path().join("demos")),
        ..Default::default()
    })
    .await;
    let info = client.create_session(&straight_session()).await.unwrap();
    let mut c = client.connect(&info).await.unwrap();
    next_state(&mut c).await;
    session(&mut c, SessionVerb::RecordStart).await;
    while next_state(&mut c).await.tick < 20 {}
    session(&mut c, SessionVerb::RecordStop).await;
    event(&mut c, "recorded").await;
    c.close().await.unwrap();

    let mut cfg = SuiteConfig::new(vec![PolicyKind::Single], vec![0], dir.path().join("r"));
    cfg.builtin = vec![BuiltinSuite::StraightRoute];
    client
        .run(&RunRequest {
            config: cfg.clone(),
            stop_after: None,
            workers: None,
        })
        .await
        .unwrap();
    let demo = dir.path().join("demos").join(format!("{}_0.json", info.id));
    let cmp = client
        .compare_human(&CompareHumanRequest {
            demos: vec![demo.clone()],
            results: cfg.out.clone(),
        })
        .await
        .unwrap();
    let agents: Vec<(&str, &str)> = cmp.rows.iter().map(|r| (r.scenario_id.as_str(), r.agent.as_str())).collect();
    assert_eq!(
        agents,
        [("straight_route", "human"), ("straight_route", "single"), ("all", "human"), ("all", "single")]
    );

    let mut other = SuiteConfig::new(vec![PolicyKind::Single], vec![0], dir.path().join("o"));
    other.builtin = vec![BuiltinSuite::JunctionConflict];
    other.select.ids = vec!["*00*".into()];
    client
        .run(&RunRequest {
            config: other.clone(),
            stop_after: None,
            workers: None,
        })
        .await
        .unwrap();
    let err = client
        .compare_human(&CompareHumanRequest {
            demos: vec![demo],
            results: other.out,
        })
        .await
        .unwrap_err();
    assert!(err.to_string().contains("insufficient data"), "{err}");
}

#[tokio::test]
async fn generation_pipeline_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(ServerConfig::default()).await;
    let p = client
        .propose(&ProposeRequest {
            category: Category::UnprotectedLeftTurn,
            count: 6,
            seed: 11,
            endpoint: None,
            examples: vec![],
        })
        .await
        .unwrap();
    assert_eq!(p.schemas.len(), 6);
    let pool = dir.path().join("pool");
    let inst = client
        .instantiate(&InstantiateRequest {
            schemas: p.schemas,
            out: pool.clone(),
        })
        .await
        .unwrap();
    assert!(inst.failed.is_empty(), "{:?}", inst.failed);
    assert_eq!(inst.written.len(), 6);
    let band = DifficultyBand::new(0.5, 4.0).unwrap();
    let sc = client.screen(&ScreenRequest { pool: pool.clone(), band }).await.unwrap();
    assert_eq!(sc.pool_size, 6);
    assert_eq!(sc.entries.len() + sc.duplicates.len(), 6);
    let flip = &sc.entries[0];
    let verdict = if flip.result.accept { "reject" } else { "accept" };
    let review = format!("# reviewer notes\n{} {verdict}\n", flip.id);
    let idx = client
        .export(&ExportRequest {
            pool,
            band,
            review: Some(review),
            out: dir.path().join("batch"),
        })
        .await
        .unwrap();
    let e = idx.entries.iter().find(|e| e.id == flip.id).unwrap();
    assert_eq!(e.accept, !flip.result.accept);
    assert_eq!(e.screen_accept, flip.result.accept);
    for e in &idx.entries {
        assert_eq!(dir.path().join("batch").join(&e.id).join("manifest").is_file(), e.accept);
    }
    assert!(dir.path().join("batch/index.json").is_file());
}

#[tokio::test]
async fn external_proposer_is_called_and_bad_responses_are_reported() {
    let good: Vec<_> = propose(Category::PedestrianCrosswalk, 3, &mut Proposer::Template { seed: 5 }).unwrap();
    let body = serde_json::json!({ "schemas": good });
    let url = mock(
        Router::new()
            .route("/good", post(move || async move { Json(body.clone()) }))
            .route("/bad", post(|| async { "not json at all" })),
    )
    .await;
    let client = start(ServerConfig::default()).await;
    let req = |endpoint: String| ProposeRequest {
        category: Category::PedestrianCrosswalk,
        count: 3,
        seed: 0,
        endpoint: Some(endpoint),
        examples: vec!["example".into()],
    };
    let r = client.propose(&req(format!("{url}/good"))).await.unwrap();
    assert_eq!(r.schemas, good);
    let err = client.propose(&req(format!("{url}/bad"))).await.unwrap_err().to_string();
    assert!(err.contains("not json at all"), "{err}");
    let err = client.propose(&req("http://127.0.0.1:9/none".into())).await.unwrap_err().to_string();
    assert!(err.contains("unreachable"), "{err}");
}

#[tokio::test]
async fn external_policy_binding_runs_through_http() {
    let url = mock(Router::new().route(
        "/plan",
        post(|Json(obs): Json<Observation>| async move { Json(PlannedTrajectory::hold(obs.ego.position(), obs.time_s)) }),
    ))
    .await;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SuiteConfig::new(vec![PolicyKind::External(format!("{url}/plan"))], vec![0], dir.path().join("x"));
    cfg.builtin = vec![BuiltinSuite::StraightRoute];
    cfg.episode.max_duration_s = Some(5.0);
    let client = start(ServerConfig::default()).await;
    let out = client
        .run(&RunRequest {
            config: cfg,
            stop_after: None,
            workers: None,
        })
        .await
        .unwrap();
    assert!(out.complete);
    let r = &out.report.unwrap().overall[&format!("external:{url}/plan")];
    assert_eq!(r.episodes, 1);
    assert!(r.rc < 5.0, "a held vehicle barely moves, rc {}", r.rc);
}

#[tokio::test]
async fn convert_and_stats_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let g = maps::intersection_4way(90.0);
    let mut log = synthetic_log(&g, &SyntheticSpec::default(), 9);
    log.id = "drive9".into();
    let path = dir.path().join("drive9.log");
    std::fs::write(&path, serialize_log(&log)).unwrap();
    let client = start(ServerConfig::default()).await;
    let out = dir.path().join("converted");
    let rep = client
        .convert(&ConvertRequest {
            log: path,
            maps: None,
            reactive: Default::default(),
            out: out.clone(),
        })
        .await
        .unwrap();
    assert_eq!(rep.scenario_id, "v2xpnp_drive9");
    assert!(rep.rms_residual < 0.1);
    let stats = client
        .stats(&StatsRequest {
            roots: vec![out],
            builtin: vec![],
        })
        .await
        .unwrap();
    assert_eq!(stats.scenarios.len(), 1);
    assert_eq!(stats.scenarios[0].stats.cav_count, 2);
    assert!(stats.groups.iter().any(|g| g.group == "bucket:v2xpnp"));
    let missing = client
        .convert(&ConvertRequest {
            log: dir.path().join("absent.log"),
            maps: None,
            reactive: Default::default(),
            out: dir.path().join("none"),
        })
        .await
        .unwrap_err();
    assert!(matches!(missing, ClientError::Api { status: 422, .. }));
}
