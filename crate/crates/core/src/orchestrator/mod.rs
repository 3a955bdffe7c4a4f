//! Campaign runner: scenario files, the simulated world, run reports, the
//! realtime operator service and replay of recorded runs.

pub mod fixtures;
pub mod realtime;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod service;
pub mod world;

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

pub use report::{RunOutputs, Stats};
pub use scenario::{FaultSpec, Mode, Scenario};
pub use world::{ApiCommand, RunStatus, StreamEvent, World};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("simulation: {0}")]
    Sim(String),
    #[error("run is not in progress")]
    NotRunning,
    #[error("incomplete run directory, missing: {0:?}")]
    MissingFiles(Vec<String>),
    #[error("service: {0}")]
    Service(String),
    #[error(transparent)]
    Postproc(#[from] crate::postproc::PostprocError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Runs a scenario in virtual time and writes its outputs to `out`.
pub fn run_scenario(sc: &Scenario, out: &Path) -> Result<RunOutputs, OrchestratorError> {
    let started = Instant::now();
    let mut world = World::new(sc, Some(out))?;
    world.run()?;
    report::write_outputs(&world, out, started)
}
