//! Wall-clock pacing of the same [`World`] used in virtual mode.
//!
//! Simulated time tracks the wall clock since start: every event due by
//! "now" is processed, then the loop sleeps until the next one or until an
//! operator command arrives.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::sync::mpsc;

use super::report::{self, RunOutputs};
use super::service::{self, CommandRequest, Shared};
use super::world::{RunStatus, World};
use super::{OrchestratorError, Scenario};

const MAX_SLEEP: Duration = Duration::from_millis(20);
const SNAPSHOT_EVERY: Duration = Duration::from_millis(50);

/// Runs `sc` on the wall clock, optionally serving the operator API.
pub async fn run_realtime(sc: &Scenario, out: &Path, serve: Option<SocketAddr>) -> Result<RunOutputs, OrchestratorError> {
    let shared = Shared::new();
    let handle = match serve {
        Some(addr) => Some(service::serve_operator(addr, shared.clone()).await?),
        None => None,
    };
    let result = drive(sc, out, &shared).await;
    if let Some(h) = handle {
        h.shutdown().await;
    }
    result
}

fn publish(world: &mut World, shared: &Shared) {
    for ev in world.drain_stream() {
        shared.publish(&ev);
    }
}

/// The runner loop. Commands posted to `shared` are applied between steps.
pub async fn drive(sc: &Scenario, out: &Path, shared: &Arc<Shared>) -> Result<RunOutputs, OrchestratorError> {
    let started = Instant::now();
    let mut world = World::new(sc, Some(out))?;
    world.enable_stream();
    let origin = Instant::now();
    let wall_ns = move || origin.elapsed().as_nanos() as i64;
    world.set_wall_clock(Box::new(wall_ns));
    let (tx, mut rx) = mpsc::channel::<CommandRequest>(64);
    shared.set_command_sink(Some(tx));
    let mut last_snapshot = Instant::now() - SNAPSHOT_EVERY;

    let result = loop {
        if let Err(e) = world.step_until(wall_ns()) {
            break Err(e);
        }
        while let Ok((cmd, reply)) = rx.try_recv() {
            let _ = reply.send(world.submit(cmd).map_err(|e| e.to_string()));
        }
        publish(&mut world, shared);
        if last_snapshot.elapsed() >= SNAPSHOT_EVERY {
            shared.set_snapshot(world.snapshot());
            last_snapshot = Instant::now();
        }
        if world.status() == RunStatus::Finished {
            break Ok(());
        }
        let now = wall_ns();
        let wait = world.next_due().map(|t| Duration::from_nanos((t - now).max(0) as u64)).unwrap_or(MAX_SLEEP).min(MAX_SLEEP);
        if wait.is_zero() {
            tokio::task::yield_now().await;
            continue;
        }
        tokio::select! {
            _ = tokio::time::sleep(wait) => {}
            req = rx.recv() => if let Some((cmd, reply)) = req {
                world.step_until(wall_ns())?;
                let _ = reply.send(world.submit(cmd).map_err(|e| e.to_string()));
            },
        }
    };
    shared.set_command_sink(None);
    publish(&mut world, shared);
    shared.set_snapshot(world.snapshot());
    result?;
    // postproc over a long run blocks this task for a while; the service
    // keeps serving the final snapshot from its own tasks meanwhile
    report::write_outputs(&world, out, started)
}
