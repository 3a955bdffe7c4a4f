//! Re-drives the operator stream from a recorded run directory.

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use serde_json::Value;

use super::report::{INTERACTIONS_FILE, STATS_FILE, TELEMETRY_FILE};
use super::service::{self, Shared};
use super::world::StreamEvent;
use super::OrchestratorError;
use crate::controller::{InteractionRecord, TelemetryMessage};

/// Stream events of a run with their offsets from the first one.
#[derive(Debug, Clone, Default)]
pub struct ReplayPlan {
    pub items: Vec<(i64, StreamEvent)>,
}

impl ReplayPlan {
    pub fn span_ns(&self) -> i64 {
        self.items.last().map_or(0, |i| i.0)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, OrchestratorError> {
    Ok(std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Loads telemetry and interactions ordered by their synchronized
/// timestamps (publish time and receive time respectively).
pub fn load_plan(dir: &Path) -> Result<ReplayPlan, OrchestratorError> {
    let missing: Vec<String> =
        [TELEMETRY_FILE, INTERACTIONS_FILE, STATS_FILE].into_iter().filter(|f| !dir.join(f).is_file()).map(str::to_string).collect();
    if !missing.is_empty() {
        return Err(OrchestratorError::MissingFiles(missing));
    }
    let mut items: Vec<(i64, StreamEvent)> = Vec::new();
    for line in read_lines(&dir.join(TELEMETRY_FILE))? {
        let msg: TelemetryMessage = serde_json::from_str(&line)?;
        items.push((msg.t_ns, StreamEvent::new("telemetry", serde_json::to_value(&msg)?)));
    }
    for line in read_lines(&dir.join(INTERACTIONS_FILE))? {
        let rec: InteractionRecord = serde_json::from_str(&line)?;
        items.push((rec.recv_t_ns, StreamEvent::new("interaction", serde_json::to_value(&rec)?)));
    }
    // stable: equal stamps keep file order
    items.sort_by_key(|i| i.0);
    let t0 = items.first().map_or(0, |i| i.0);
    for i in &mut items {
        i.0 -= t0;
    }
    Ok(ReplayPlan { items })
}

/// Emits every planned event at `offset / speed` after the call, then an
/// `end` event.
pub async fn play(plan: &ReplayPlan, speed: f64, mut sink: impl FnMut(StreamEvent)) -> Result<(), OrchestratorError> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(OrchestratorError::Service(format!("replay speed must be positive, got {speed}")));
    }
    let start = tokio::time::Instant::now();
    for (offset, ev) in &plan.items {
        let at = start + Duration::from_secs_f64(*offset as f64 / 1e9 / speed);
        tokio::time::sleep_until(at).await;
        sink(ev.clone());
    }
    sink(StreamEvent::new("end", Value::Null));
    Ok(())
}

/// Serves a recorded run: waits for the first stream client, plays the run
/// and keeps serving state for a moment after the end.
pub async fn serve_replay(dir: &Path, speed: f64, addr: SocketAddr) -> Result<(), OrchestratorError> {
    let plan = load_plan(dir)?;
    let shared = Shared::new();
    let stats: Value = serde_json::from_slice(&std::fs::read(dir.join(STATS_FILE))?)?;
    shared.set_snapshot(serde_json::json!({ "status": "idle", "replay": true, "stats": stats }));
    let handle = service::serve_operator(addr, shared.clone()).await?;
    while shared.stream_clients() == 0 {
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    shared.set_snapshot(serde_json::json!({ "status": "running", "replay": true, "stats": stats }));
    let r = play(&plan, speed, |ev| shared.publish(&ev)).await;
    shared.set_snapshot(serde_json::json!({ "status": "finished", "replay": true, "stats": stats }));
    tokio::time::sleep(Duration::from_secs(1)).await;
    handle.shutdown().await;
    r
}
