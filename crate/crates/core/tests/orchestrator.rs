use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use beamtrack::controller::{CommandAction, InteractionRecord, NodeRole, TelemetryMessage};
use beamtrack::middleware::Latency;
use beamtrack::mobility::Route;
use beamtrack::orchestrator::scenario::{FaultSpec, ScheduledCommand, ScheduledFault};
use beamtrack::orchestrator::world::{ApiCommand, World};
use beamtrack::orchestrator::{fixtures, run_scenario, OrchestratorError, RunStatus, Scenario, Stats};
use serde_json::json;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn campus(seed: u64, duration_s: f64) -> Scenario {
    let mut sc = Scenario::load(&scenarios_dir().join("campus_loop.json")).unwrap();
    sc.seed = seed;
    sc.duration_s = duration_s;
    sc
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn shipped_routes_match_their_generators() {
    let dir = scenarios_dir().join("routes");
    for (file, route) in [("campus_loop.json", fixtures::campus_loop()), ("street.json", fixtures::street_out_and_back())] {
        let shipped = Route::load(dir.join(file)).unwrap();
        assert_eq!(shipped.waypoints(), route.waypoints(), "{file} is stale; regenerate with `beamtrack fixtures`");
    }
}

#[test]
fn shipped_scenarios_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            let sc = Scenario::load(&p).unwrap();
            sc.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut sc = campus(1, 0.0);
    assert!(matches!(sc.validate(), Err(OrchestratorError::Scenario(_))));
    sc.duration_s = 10.0;
    sc.route = PathBuf::from("/nonexistent/route.json");
    assert!(matches!(World::new(&sc, None), Err(OrchestratorError::Scenario(_))));
    let mut sc = campus(1, 10.0);
    sc.recording.gain_db = 40;
    assert!(sc.validate().is_err());
    let mut sc = campus(1, 10.0);
    sc.faults.push(ScheduledFault { at_s: 1.0, fault: FaultSpec::FailBroker { broker: 9 } });
    assert!(sc.validate().is_err());
}

#[test]
fn slow_network_aborts_startup_with_a_diagnostic() {
    let mut sc = campus(1, 5.0);
    sc.middleware.client_hop = Latency::new(150.0, 0.0);
    let mut w = World::new(&sc, None).unwrap();
    match w.run() {
        Err(OrchestratorError::Startup(msg)) => assert!(msg.contains("not registered") || msg.contains("clock"), "{msg}"),
        other => panic!("expected startup failure, got {other:?}"),
    }
}

#[test]
fn controllers_register_within_a_second() {
    let mut w = World::new(&campus(2, 5.0), None).unwrap();
    w.step_until(1_000_000_000).unwrap();
    let ids: Vec<String> = w.live_leases().into_iter().map(|l| l.node_id).collect();
    assert_eq!(ids, ["rx-1", "tx-1"]);
}

#[test]
fn campus_loop_meets_the_calibration_targets() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&campus(1, 60.0), dir.path()).unwrap();
    let s = &out.stats;
    let p = s.pointing.combined.unwrap();
    assert!(p.mean_deg <= 1.1, "{p:?}");
    assert!(s.fixes.combined.unwrap().rms_3d_m <= 0.17);
    for node in ["tx-1", "rx-1"] {
        assert!(s.response.per_node[node] >= 590, "{:?}", s.response.per_node);
    }
    let r = s.response.total.unwrap();
    assert!((24.0..=31.0).contains(&r.mean_ms), "{r:?}");
    assert_eq!(s.middleware.lost_acked, 0);
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sc = campus(9, 20.0);
    run_scenario(&sc, a.path()).unwrap();
    run_scenario(&sc, b.path()).unwrap();
    for f in ["telemetry.ndjson", "stats.json", "interactions.ndjson", "pointing.csv", "events.ndjson"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    run_scenario(&campus(10, 20.0), c.path()).unwrap();
    assert_ne!(read(&a.path().join("telemetry.ndjson")), read(&c.path().join("telemetry.ndjson")));
}

#[test]
fn leader_failure_loses_no_acknowledged_record() {
    let sc = Scenario::load(&scenarios_dir().join("campus_faults.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&sc, dir.path()).unwrap();
    let m = out.stats.middleware;
    assert_eq!(m.lost_acked, 0);
    assert_eq!(m.unverified, 0);
    assert!(m.elections >= 1, "{m:?}");
    assert!(m.acked >= 1190, "{m:?}");
    let events = String::from_utf8(read(&dir.path().join("events.ndjson"))).unwrap();
    assert!(events.contains("fault_fail_leader"));
    // telemetry keeps flowing across the failover
    assert!(out.stats.response.per_node["rx-1"] >= 590);
}

fn stats_of(dir: &Path) -> Stats {
    serde_json::from_slice(&read(&dir.join("stats.json"))).unwrap()
}

#[test]
fn stats_agree_with_the_raw_logs() {
    let dir = tempfile::tempdir().unwrap();
    run_scenario(&campus(4, 30.0), dir.path()).unwrap();
    let stats = stats_of(dir.path());

    let telemetry: Vec<TelemetryMessage> =
        String::from_utf8(read(&dir.path().join("telemetry.ndjson"))).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(telemetry.len() as u64, stats.telemetry_published.values().sum::<u64>());

    let recs: Vec<InteractionRecord> = String::from_utf8(read(&dir.path().join("interactions.ndjson")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let r = stats.response.total.unwrap();
    assert_eq!(recs.len(), r.count);
    let mean = recs.iter().map(|r| r.response_ms).sum::<f64>() / recs.len() as f64;
    assert!((mean - r.mean_ms).abs() < 1e-9);

    let csv = String::from_utf8(read(&dir.path().join("pointing.csv"))).unwrap();
    let errs: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let p = stats.pointing.combined.unwrap();
    assert_eq!(errs.len(), p.samples);
    // the csv rounds to 1e-6
    assert!((errs.iter().sum::<f64>() / errs.len() as f64 - p.mean_deg).abs() < 1e-6);
}

#[test]
fn stats_list_every_artifact() {
    let sc = Scenario::load(&scenarios_dir().join("campus_survey.json")).unwrap();
    let mut sc = sc;
    sc.duration_s = 12.0;
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&sc, dir.path()).unwrap();
    assert_eq!(out.stats.segments.recorded, 3);
    let listed: BTreeSet<String> = out.stats.artifacts.iter().cloned().collect();
    let mut on_disk = BTreeSet::new();
    let mut stack = vec![dir.path().to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                on_disk.insert(p.strip_prefix(dir.path()).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    assert_eq!(listed, on_disk);
    let pp = out.stats.postproc.unwrap();
    assert!(pp.samples > 20, "{pp:?}");
}

#[test]
fn telemetry_period_jitter_is_within_ten_percent() {
    let mut w = World::new(&campus(5, 20.0), None).unwrap();
    w.run().unwrap();
    for node in ["tx-1", "rx-1"] {
        let t: Vec<i64> = w.telemetry_messages().into_iter().filter(|m| m.node_id == node).map(|m| m.t_ns).collect();
        assert!(t.len() >= 199);
        for d in t.windows(2).map(|w| w[1] - w[0]) {
            assert!((d - 100_000_000).abs() <= 10_000_000, "{node}: {d}");
        }
    }
}

#[test]
fn recording_does_not_perturb_tracking() {
    let mut sc = campus(6, 15.0);
    let plain = {
        let mut w = World::new(&sc, None).unwrap();
        w.run().unwrap();
        w.log().pointing.clone()
    };
    sc.recording.enabled = true;
    sc.recording.interval_s = 2.0;
    let dir = tempfile::tempdir().unwrap();
    let mut w = World::new(&sc, Some(dir.path())).unwrap();
    w.run().unwrap();
    assert_eq!(w.log().segments.len(), 8);
    assert_eq!(w.log().pointing, plain);
}

#[test]
fn recording_commands_start_stop_and_set_gain() {
    let mut sc = campus(7, 10.0);
    sc.recording.interval_s = 1.0;
    let cmd = |at_s, action, gain_db| ScheduledCommand { at_s, target: NodeRole::Rx, action, gain_db };
    sc.commands = vec![
        cmd(1.0, CommandAction::StartRecording, None),
        cmd(3.05, CommandAction::SetGain, Some(0)),
        // lands mid-segment: that segment is discarded
        cmd(5.2, CommandAction::StopRecording, None),
        // addressed to the TX, which has no sounder
        ScheduledCommand { at_s: 6.0, target: NodeRole::Tx, action: CommandAction::StartRecording, gain_db: None },
    ];
    let mut w = World::new(&sc, None).unwrap();
    w.run().unwrap();
    let segs = &w.log().segments;
    let gains: Vec<u32> = segs.iter().map(|s| s.gain_db).collect();
    assert_eq!(gains, [76, 76, 76, 0]);
    assert_eq!(w.log().segments_discarded, 1);
    let seqs: Vec<u64> = segs.iter().map(|s| s.seq).collect();
    assert_eq!(seqs, [0, 1, 2, 3]);
}

fn rx_error_window(w: &World, from_ns: i64, to_ns: i64) -> f64 {
    let v: Vec<f64> =
        w.log().pointing.iter().filter(|p| p.node == NodeRole::Rx && p.t_ns >= from_ns && p.t_ns < to_ns).map(|p| p.error_deg).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn recalibration_removes_an_injected_bias_within_two_periods() {
    let mut sc = campus(8, 20.0);
    sc.faults.push(ScheduledFault { at_s: 8.0, fault: FaultSpec::MountBias { node: NodeRole::Rx, deg: 5.0 } });
    sc.commands.push(ScheduledCommand { at_s: 12.0, target: NodeRole::Rx, action: CommandAction::Recalibrate, gain_db: None });
    let mut w = World::new(&sc, None).unwrap();
    w.run().unwrap();
    let t0 = w.start_ns();
    let s = 1_000_000_000;
    let find = |kind: &str| w.log().events.iter().find(|e| e.kind == kind).map(|e| e.t_ns).unwrap();
    let applied = find("command_applied");
    let done = find("recalibrated");
    assert!(done - applied <= 200_000_000, "{} ms", (done - applied) / 1_000_000);
    let before = rx_error_window(&w, t0 + 9 * s, t0 + 12 * s);
    let after = rx_error_window(&w, done + 200_000_000, done + 4 * s);
    assert!(before > 3.5, "{before}");
    assert!(after <= 1.1, "{after}");
}

#[test]
fn operator_submissions_need_a_running_world() {
    let mut w = World::new(&campus(1, 2.0), None).unwrap();
    let cmd = ApiCommand::parse(&json!({"target": "rx", "action": "recalibrate"})).unwrap();
    assert!(matches!(w.submit(cmd.clone()), Err(OrchestratorError::NotRunning)));
    w.step_until(500_000_000).unwrap();
    assert_eq!(w.status(), RunStatus::Running);
    let id = w.submit(cmd).unwrap();
    let fault = ApiCommand::parse(&json!({"action": "fail_broker", "broker": 1})).unwrap();
    assert!(w.submit(fault).is_ok());
    w.run().unwrap();
    assert!(w.log().events.iter().any(|e| e.kind == "command_applied" && e.detail["cmd_id"] == id.as_str()));
    assert_eq!(w.broker_statuses()[1], beamtrack::middleware::BrokerStatus::Failed);
    assert!(ApiCommand::parse(&json!({"action": "set_gain", "target": "rx", "gain_db": 30})).is_err());
    assert!(ApiCommand::parse(&json!({"action": "launch"})).is_err());
}
