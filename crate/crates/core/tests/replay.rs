use std::path::Path;
use std::time::Instant;

use beamtrack::orchestrator::replay::{load_plan, play, ReplayPlan};
use beamtrack::orchestrator::{run_scenario, OrchestratorError, Scenario};

fn recorded_run(dir: &Path, duration_s: f64) {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/campus_loop.json");
    let mut sc = Scenario::load(&p).unwrap();
    sc.duration_s = duration_s;
    run_scenario(&sc, dir).unwrap();
}

/// Plays `plan` and returns (wall offset in ns, event type) per emission.
async fn timed(plan: &ReplayPlan, speed: f64) -> Vec<(i64, String)> {
    let t0 = Instant::now();
    let mut got = Vec::new();
    play(plan, speed, |ev| got.push((t0.elapsed().as_nanos() as i64, ev.kind.clone()))).await.unwrap();
    got
}

fn plan_excerpt(dir: &Path, n: usize) -> ReplayPlan {
    let mut plan = load_plan(dir).unwrap();
    // skip startup so the excerpt is dense
    let skip = plan.items.iter().position(|i| i.1.kind == "interaction").unwrap();
    let base = plan.items[skip].0;
    plan.items = plan.items[skip..skip + n].iter().map(|(t, e)| (t - base, e.clone())).collect();
    plan
}

#[test]
fn plan_merges_telemetry_and_interactions_in_time_order() {
    let dir = tempfile::tempdir().unwrap();
    recorded_run(dir.path(), 5.0);
    let plan = load_plan(dir.path()).unwrap();
    assert_eq!(plan.items[0].0, 0);
    assert!(plan.items.windows(2).all(|w| w[0].0 <= w[1].0));
    let count = |k: &str| plan.items.iter().filter(|i| i.1.kind == k).count();
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(count("telemetry"), lines("telemetry.ndjson"));
    assert_eq!(count("interaction"), lines("interactions.ndjson"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn real_time_replay_preserves_gaps() {
    let dir = tempfile::tempdir().unwrap();
    recorded_run(dir.path(), 4.0);
    let plan = plan_excerpt(dir.path(), 60);
    let got = timed(&plan, 1.0).await;
    assert_eq!(got.len(), plan.items.len() + 1);
    assert_eq!(got.last().unwrap().1, "end");
    for (i, w) in got[..plan.items.len()].windows(2).enumerate() {
        let want = plan.items[i + 1].0 - plan.items[i].0;
        let have = w[1].0 - w[0].0;
        assert!((have - want).abs() <= 10_000_000, "gap {i}: want {want} ns, got {have} ns");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn tenfold_replay_shrinks_gaps_tenfold() {
    let dir = tempfile::tempdir().unwrap();
    recorded_run(dir.path(), 8.0);
    let plan = plan_excerpt(dir.path(), 200);
    let got = timed(&plan, 10.0).await;
    let span = got[plan.items.len() - 1].0 - got[0].0;
    let want = plan.span_ns() / 10;
    assert!((span - want).abs() <= 10_000_000, "span {span} vs {want}");
    for (i, w) in got[..plan.items.len()].windows(2).enumerate() {
        let want = (plan.items[i + 1].0 - plan.items[i].0) / 10;
        assert!((w[1].0 - w[0].0 - want).abs() <= 10_000_000);
    }
}

#[tokio::test]
async fn empty_run_ends_immediately() {
    let t0 = Instant::now();
    let got = timed(&ReplayPlan::default(), 1.0).await;
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].1, "end");
    assert!(t0.elapsed().as_millis() < 50);
}

#[tokio::test]
async fn nonpositive_speed_is_rejected() {
    for s in [0.0, -1.0, f64::NAN] {
        assert!(play(&ReplayPlan::default(), s, |_| {}).await.is_err());
    }
}

#[test]
fn missing_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("telemetry.ndjson"), "").unwrap();
    match load_plan(dir.path()) {
        Err(OrchestratorError::MissingFiles(f)) => assert_eq!(f, ["interactions.ndjson", "stats.json"]),
        other => panic!("{other:?}"),
    }
    let msg = load_plan(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("interactions.ndjson") && msg.contains("stats.json"), "{msg}");
}
