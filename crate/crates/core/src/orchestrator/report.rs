//! Run statistics and the on-disk layout of a run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::world::{PointingSample, RunLog, World};
use super::OrchestratorError;
use crate::controller::{percentile, summarize, ControllerCounters, InteractionRecord, NodeRole, ResponseStats};
use crate::postproc::{self, Calibration, PostprocSummary};
use crate::sounder;

pub const TELEMETRY_FILE: &str = "telemetry.ndjson";
pub const INTERACTIONS_FILE: &str = "interactions.ndjson";
pub const POINTING_FILE: &str = "pointing.csv";
pub const EVENTS_FILE: &str = "events.ndjson";
pub const STATS_FILE: &str = "stats.json";
pub const PERF_FILE: &str = "perf.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SEGMENTS_DIR: &str = "segments";

/// Reference level for the per-gain calibration written with each run.
pub const CALIBRATION_REFERENCE_DBM: f64 = -60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub samples: usize,
    pub mean_deg: f64,
    pub p95_deg: f64,
    pub max_deg: f64,
}

impl ErrorStats {
    pub fn from_values(values: impl Iterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Self {
            samples: v.len(),
            mean_deg: v.iter().sum::<f64>() / v.len() as f64,
            p95_deg: percentile(&v, 95.0),
            max_deg: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingStats {
    /// Both antennas pooled.
    pub combined: Option<ErrorStats>,
    pub per_node: BTreeMap<String, ErrorStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixRms {
    pub count: usize,
    pub rms_3d_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixStats {
    pub combined: Option<FixRms>,
    pub per_node: BTreeMap<String, FixRms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseReport {
    pub interactions: usize,
    pub per_node: BTreeMap<String, usize>,
    /// Publish to servo settled on the commanded angle.
    pub total: Option<ResponseStats>,
    /// Publish to receipt by the counterpart.
    pub messaging: Option<ResponseStats>,
    /// Total less the configured servo actuation latency.
    pub excluding_actuation: Option<ResponseStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiddlewareStats {
    pub acked: usize,
    pub publish_failed: u64,
    /// Acknowledged records absent from the final leader log.
    pub lost_acked: usize,
    /// Acknowledged records whose topic had no live leader at the end.
    pub unverified: usize,
    pub elections: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub recorded: usize,
    pub discarded: u64,
    pub failed: u64,
}

/// Deterministic summary of a run: a pure function of scenario and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub rtk: bool,
    pub pointing: PointingStats,
    pub fixes: FixStats,
    pub response: ResponseReport,
    pub telemetry_published: BTreeMap<String, u64>,
    pub controllers: BTreeMap<String, ControllerCounters>,
    pub middleware: MiddlewareStats,
    pub segments: SegmentStats,
    pub postproc: Option<PostprocSummary>,
    /// Every file the run wrote, relative to the output directory.
    pub artifacts: Vec<String>,
}

fn role_key(r: NodeRole) -> String {
    r.as_str().to_string()
}

pub fn pointing_stats(samples: &[PointingSample]) -> PointingStats {
    let per_node = [NodeRole::Tx, NodeRole::Rx]
        .into_iter()
        .filter_map(|r| ErrorStats::from_values(samples.iter().filter(|s| s.node == r).map(|s| s.error_deg)).map(|s| (role_key(r), s)))
        .collect();
    PointingStats { combined: ErrorStats::from_values(samples.iter().map(|s| s.error_deg)), per_node }
}

fn rms(errors: impl Iterator<Item = f64>) -> Option<FixRms> {
    let (n, sq) = errors.fold((0usize, 0.0), |(n, s), e| (n + 1, s + e * e));
    (n > 0).then(|| FixRms { count: n, rms_3d_m: (sq / n as f64).sqrt() })
}

pub fn fix_stats(errors: &[(NodeRole, f64)]) -> FixStats {
    let per_node = [NodeRole::Tx, NodeRole::Rx]
        .into_iter()
        .filter_map(|r| rms(errors.iter().filter(|e| e.0 == r).map(|e| e.1)).map(|s| (role_key(r), s)))
        .collect();
    FixStats { combined: rms(errors.iter().map(|e| e.1)), per_node }
}

pub fn response_report(records: &[InteractionRecord], actuation_ms: f64) -> ResponseReport {
    let mut per_node = BTreeMap::new();
    for r in records {
        *per_node.entry(r.node_id.clone()).or_insert(0) += 1;
    }
    ResponseReport {
        interactions: records.len(),
        per_node,
        total: summarize(records.iter().map(|r| r.response_ms)),
        messaging: summarize(records.iter().map(|r| r.messaging_ms)),
        excluding_actuation: summarize(records.iter().map(|r| r.response_ms - actuation_ms)),
    }
}

/// Statistics that depend only on the simulation (no postproc, no files).
pub fn compute_stats(world: &World) -> Stats {
    let sc = world.scenario();
    let log: &RunLog = world.log();
    let (lost, unverified) = world.verify_acked();
    let mut telemetry_published = BTreeMap::new();
    let mut controllers = BTreeMap::new();
    for r in [NodeRole::Tx, NodeRole::Rx] {
        let c = world.controller(r);
        telemetry_published.insert(c.node_id.clone(), c.counters.published);
        controllers.insert(c.node_id.clone(), c.counters.clone());
    }
    Stats {
        scenario: sc.name.clone(),
        seed: sc.seed,
        duration_s: sc.duration_s,
        rtk: sc.rtk,
        pointing: pointing_stats(&log.pointing),
        fixes: fix_stats(&log.fix_errors),
        response: response_report(&log.interactions, sc.servo.actuation_latency_ms),
        telemetry_published,
        controllers,
        middleware: MiddlewareStats {
            acked: log.acked.len(),
            publish_failed: log.publish_failed,
            lost_acked: lost,
            unverified,
            elections: world.elections(),
        },
        segments: SegmentStats { recorded: log.segments.len(), discarded: log.segments_discarded, failed: log.segments_failed },
        postproc: None,
        artifacts: Vec::new(),
    }
}

/// Wall-clock figures, kept apart from the deterministic stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perf {
    pub wall_s: f64,
    pub events: u64,
    pub simulated_s: f64,
    /// Realtime only: wall delay added to the simulated messaging path.
    pub overhead: Option<ResponseStats>,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub stats: Stats,
    pub perf: Perf,
}

fn ndjson<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), OrchestratorError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, &it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Writes logs, runs postproc over any recorded segments and writes the
/// stats report listing every artifact.
pub fn write_outputs(world: &World, dir: &Path, started: Instant) -> Result<RunOutputs, OrchestratorError> {
    fs::create_dir_all(dir)?;
    let log = world.log();
    let sc = world.scenario();
    let mut artifacts: Vec<String> = Vec::new();

    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(TELEMETRY_FILE))?);
    for p in &log.telemetry {
        f.write_all(p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    artifacts.push(TELEMETRY_FILE.into());

    ndjson(&dir.join(INTERACTIONS_FILE), log.interactions.iter())?;
    artifacts.push(INTERACTIONS_FILE.into());

    let mut csv = String::from("t_ns,node,yaw_error_deg,pitch_error_deg,error_deg\n");
    for p in &log.pointing {
        csv.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", p.t_ns, p.node.as_str(), p.yaw_error_deg, p.pitch_error_deg, p.error_deg));
    }
    fs::write(dir.join(POINTING_FILE), csv)?;
    artifacts.push(POINTING_FILE.into());

    ndjson(&dir.join(EVENTS_FILE), log.events.iter())?;
    artifacts.push(EVENTS_FILE.into());

    fs::write(dir.join(SCENARIO_FILE), serde_json::to_vec_pretty(sc)?)?;
    artifacts.push(SCENARIO_FILE.into());

    let mut stats = compute_stats(world);
    for s in &log.segments {
        if s.path.is_some() {
            let (iq, meta) = sounder::segment_paths(Path::new(SEGMENTS_DIR), &s.node_id, s.seq);
            artifacts.push(iq.to_string_lossy().replace('\\', "/"));
            artifacts.push(meta.to_string_lossy().replace('\\', "/"));
        }
    }
    if !log.segments.is_empty() {
        let cal = postproc::calibrate(&sc.sounder, &sc.postproc, CALIBRATION_REFERENCE_DBM)?;
        fs::write(dir.join(CALIBRATION_FILE), serde_json::to_vec_pretty(&cal)?)?;
        artifacts.push(CALIBRATION_FILE.into());
        let summary = run_postproc_on(dir, &cal, sc)?;
        stats.postproc = Some(summary);
        for f in ["results.geojson", "power.csv", "diagnostics.ndjson"] {
            artifacts.push(f.into());
        }
    }
    artifacts.push(PERF_FILE.into());
    artifacts.push(STATS_FILE.into());
    stats.artifacts = artifacts;
    fs::write(dir.join(STATS_FILE), serde_json::to_vec_pretty(&stats)?)?;

    let perf = Perf {
        wall_s: started.elapsed().as_secs_f64(),
        events: log.events_processed,
        simulated_s: (world.now_ns() as f64) / 1e9,
        overhead: summarize(log.overhead_ms.iter().copied()),
    };
    fs::write(dir.join(PERF_FILE), serde_json::to_vec_pretty(&perf)?)?;
    Ok(RunOutputs { dir: dir.to_path_buf(), stats, perf })
}

fn run_postproc_on(dir: &Path, cal: &Calibration, sc: &super::Scenario) -> Result<PostprocSummary, OrchestratorError> {
    Ok(postproc::run_postproc(&dir.join(SEGMENTS_DIR), &dir.join(TELEMETRY_FILE), cal, &sc.sounder.pn, &sc.postproc, dir)?)
}
