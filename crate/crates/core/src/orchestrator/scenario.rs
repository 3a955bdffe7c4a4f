use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::controller::{CommandAction, NodeRole};
use crate::geodesy::GeoFix;
use crate::middleware::{BrokerId, ClientConfig, ClusterConfig};
use crate::mobility::{Route, SensorConfig};
use crate::pointing::ServoConfig;
use crate::postproc::PostprocConfig;
use crate::sounder::SounderConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Virtual,
    Realtime,
}

/// Surveyed rooftop position and boresight zero of the fixed transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxSite {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
    #[serde(default)]
    pub heading_deg: f64,
}

impl TxSite {
    pub fn fix(&self) -> GeoFix {
        GeoFix::new(self.lat_deg, self.lon_deg, self.alt_m)
    }
}

/// Per-controller knobs shared by both nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSettings {
    pub telemetry_rate_hz: f64,
    pub stale_discard: bool,
    pub processing_ms: f64,
    pub recal_samples: usize,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        let c = crate::controller::ControllerConfig::default();
        Self {
            telemetry_rate_hz: c.telemetry_rate_hz,
            stale_discard: c.stale_discard,
            processing_ms: c.processing_ms,
            recal_samples: c.recal_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordingConfig {
    /// Record from the start of the run.
    pub enabled: bool,
    /// Segment start-to-start spacing.
    pub interval_s: f64,
    pub gain_db: u32,
}

impl Default for RecordingConfig {
    fn default() -> Self {
        Self { enabled: false, interval_s: 10.0, gain_db: 76 }
    }
}

/// Fault-harness actions, scheduled in the scenario or sent by an operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultSpec {
    /// Crash-stops whichever broker currently leads `topic`.
    FailLeader {
        topic: String,
    },
    FailBroker {
        broker: BrokerId,
    },
    RestoreBroker {
        broker: BrokerId,
    },
    /// Rotates a node's mount away from where its controller believes it is.
    MountBias {
        node: NodeRole,
        deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub at_s: f64,
    #[serde(flatten)]
    pub fault: FaultSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledCommand {
    pub at_s: f64,
    pub target: NodeRole,
    pub action: CommandAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_db: Option<u32>,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_true() -> bool {
    true
}

fn default_warmup() -> f64 {
    1.0
}

/// Controllers long-poll with a longer park than the library default; the
/// telemetry topics carry a record every 100 ms anyway.
fn default_controller_client() -> ClientConfig {
    ClientConfig { fetch_wait_ms: 500.0, ..ClientConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    /// RX route file, relative to the scenario file.
    pub route: PathBuf,
    pub tx: TxSite,
    pub duration_s: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub rtk: bool,
    /// Pointing samples before this are not scored (servo still converging
    /// from its rest position).
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub servo: ServoConfig,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    pub sounder: SounderConfig,
    #[serde(default)]
    pub postproc: PostprocConfig,
    #[serde(default)]
    pub middleware: ClusterConfig,
    #[serde(default = "default_controller_client")]
    pub client: ClientConfig,
    #[serde(default)]
    pub recording: RecordingConfig,
    #[serde(default)]
    pub faults: Vec<ScheduledFault>,
    #[serde(default)]
    pub commands: Vec<ScheduledCommand>,
}

impl Scenario {
    /// Defaults everywhere except the required fields.
    pub fn new(route: impl Into<PathBuf>, tx: TxSite, duration_s: f64) -> Self {
        Self {
            name: default_name(),
            route: route.into(),
            tx,
            duration_s,
            mode: Mode::Virtual,
            seed: 0,
            rtk: true,
            warmup_s: default_warmup(),
            sensors: SensorConfig::default(),
            servo: ServoConfig::default(),
            controller: ControllerSettings::default(),
            sounder: SounderConfig::default(),
            postproc: PostprocConfig::default(),
            middleware: ClusterConfig::default(),
            client: default_controller_client(),
            recording: RecordingConfig::default(),
            faults: Vec::new(),
            commands: Vec::new(),
        }
    }

    /// Parses a scenario file and resolves its route path against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::Scenario(format!("{}: {e}", path.display())))?;
        let mut sc: Scenario = serde_json::from_str(&text).map_err(|e| OrchestratorError::Scenario(format!("{}: {e}", path.display())))?;
        if sc.route.is_relative() {
            sc.route = path.parent().unwrap_or(Path::new(".")).join(&sc.route);
        }
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Scenario(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !self.route.is_file() {
            return bad(format!("route file {} does not exist", self.route.display()));
        }
        if !(self.warmup_s >= 0.0) {
            return bad("warmup_s must be non-negative".into());
        }
        if let Err(e) = self.tx.fix().validate() {
            return bad(format!("tx: {e}"));
        }
        self.sensors.validate().or_else(|e| bad(format!("sensors: {e}")))?;
        self.servo.validate().or_else(|e| bad(format!("servo: {e}")))?;
        self.controller_config(NodeRole::Rx).validate().or_else(|e| bad(format!("controller: {e}")))?;
        self.sounder.validate().map_err(|e| OrchestratorError::Scenario(format!("sounder: {e}")))?;
        if self.middleware.brokers == 0 || self.middleware.replication_factor == 0 {
            return bad("middleware needs at least one broker and rf >= 1".into());
        }
        if self.middleware.replication_factor > self.middleware.brokers as usize {
            return bad("replication_factor exceeds broker count".into());
        }
        // a segment lasts 0.5 s; starts closer than that would overlap
        if !(self.recording.interval_s >= 0.5) {
            return bad("recording.interval_s must be at least 0.5".into());
        }
        if !crate::controller::GAINS_DB.contains(&self.recording.gain_db) {
            return bad(format!("recording.gain_db must be 0 or 76, got {}", self.recording.gain_db));
        }
        for f in &self.faults {
            if !(f.at_s >= 0.0) {
                return bad("fault times must be non-negative".into());
            }
            if let FaultSpec::FailBroker { broker } | FaultSpec::RestoreBroker { broker } = f.fault {
                if broker >= self.middleware.brokers {
                    return bad(format!("fault names unknown broker {broker}"));
                }
            }
        }
        if self.commands.iter().any(|c| !(c.at_s >= 0.0)) {
            return bad("command times must be non-negative".into());
        }
        Ok(())
    }

    pub fn load_route(&self) -> Result<Route, OrchestratorError> {
        Route::load(&self.route).map_err(|e| OrchestratorError::Scenario(format!("{}: {e}", self.route.display())))
    }

    pub fn controller_config(&self, role: NodeRole) -> crate::controller::ControllerConfig {
        use crate::controller::{ControllerConfig, MountFrame};
        ControllerConfig {
            role,
            telemetry_rate_hz: self.controller.telemetry_rate_hz,
            stale_discard: self.controller.stale_discard,
            servo: self.servo,
            mount_frame: match role {
                NodeRole::Tx => MountFrame::WorldFixed { heading_deg: self.tx.heading_deg },
                NodeRole::Rx => MountFrame::VehicleRelative,
            },
            processing_ms: self.controller.processing_ms,
            recal_samples: self.controller.recal_samples,
        }
    }
}
