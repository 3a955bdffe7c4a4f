//! Beam-steering controller shared by the TX and RX nodes.
//!
//! The controller is a plain state machine: the host feeds it fixes, IMU
//! readings, counterpart telemetry and operator commands, and publishes what
//! it returns. TX and RX differ only in configuration.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{bearing_elevation, normalize_deg, GeoError, GeoFix, LosAngles};
use crate::middleware::{TOPIC_TELEMETRY_RX, TOPIC_TELEMETRY_TX};
use crate::mobility::AttitudeReading;
use crate::pointing::{attitude_at, command_servo, PointingState, ServoCommand, ServoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Tx,
    Rx,
}

impl NodeRole {
    pub fn peer(self) -> NodeRole {
        match self {
            NodeRole::Tx => NodeRole::Rx,
            NodeRole::Rx => NodeRole::Tx,
        }
    }

    pub fn telemetry_topic(self) -> &'static str {
        match self {
            NodeRole::Tx => TOPIC_TELEMETRY_TX,
            NodeRole::Rx => TOPIC_TELEMETRY_RX,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Tx => "tx",
            NodeRole::Rx => "rx",
        }
    }
}

/// How the mount's yaw zero relates to the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MountFrame {
    /// Bolted to a vehicle; the vehicle IMU heading is subtracted.
    VehicleRelative,
    /// Surveyed installation with a known, fixed heading.
    WorldFixed { heading_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub role: NodeRole,
    pub telemetry_rate_hz: f64,
    pub stale_discard: bool,
    pub servo: ServoConfig,
    pub mount_frame: MountFrame,
    /// Time from receiving telemetry to issuing the servo command.
    pub processing_ms: f64,
    /// Head-IMU readings averaged by a recalibration.
    pub recal_samples: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            role: NodeRole::Rx,
            telemetry_rate_hz: 10.0,
            stale_discard: true,
            servo: ServoConfig::default(),
            mount_frame: MountFrame::VehicleRelative,
            processing_ms: 1.0,
            recal_samples: 5,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.telemetry_rate_hz > 0.0) {
            return Err("telemetry_rate_hz must be positive".into());
        }
        if !(self.processing_ms >= 0.0) {
            return Err("processing_ms must be non-negative".into());
        }
        if self.recal_samples == 0 {
            return Err("recal_samples must be at least 1".into());
        }
        self.servo.validate()
    }

    pub fn telemetry_period_ns(&self) -> i64 {
        (1e9 / self.telemetry_rate_hz).round() as i64
    }

    pub fn processing_ns(&self) -> i64 {
        (self.processing_ms * 1e6).round() as i64
    }
}

/// Telemetry payload as published on `telemetry.{tx,rx}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub node_id: String,
    pub seq: u64,
    /// Publish time on the synchronized clock.
    pub t_ns: i64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
    pub sigma_enu_m: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub rtk: bool,
    pub recalibrated: bool,
}

impl TelemetryMessage {
    pub fn fix(&self) -> GeoFix {
        GeoFix {
            lat_deg: self.lat_deg,
            lon_deg: self.lon_deg,
            alt_m: self.alt_m,
            t_ns: self.t_ns,
            sigma_enu_m: self.sigma_enu_m,
            rtk_applied: self.rtk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub node_id: String,
    pub peer_seq: u64,
    pub publish_t_ns: i64,
    pub recv_t_ns: i64,
    /// When the servo acts on the command (processing plus actuation latency
    /// after receipt).
    pub command_t_ns: i64,
    pub response_ms: f64,
    /// Publish to receipt: the middleware share of the response.
    pub messaging_ms: f64,
    pub target_yaw_deg: f64,
    pub target_pitch_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandAction {
    Recalibrate,
    StartRecording,
    StopRecording,
    SetGain,
}

/// Operator command payload on the `commands` topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorCommand {
    pub target: NodeRole,
    pub action: CommandAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_db: Option<u32>,
    pub cmd_id: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("no own fix yet")]
    NoFix,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("gain must be 0 or 76 dB, got {0}")]
    BadGain(u32),
}

pub const GAINS_DB: [u32; 2] = [0, 76];

/// Mount-relative target: world line of sight minus the vehicle heading on
/// the yaw axis. Pitch is passed through (level mount).
pub fn compute_target(self_fix: &GeoFix, self_vehicle_yaw_deg: f64, peer_fix: &GeoFix) -> Result<LosAngles, GeoError> {
    let los = bearing_elevation(self_fix, peer_fix)?;
    Ok(LosAngles::new(los.yaw_deg - self_vehicle_yaw_deg, los.pitch_deg))
}

/// Side effects the host must carry out for a command.
#[derive(Debug, Clone, PartialEq)]
pub enum CommandEffect {
    /// Recalibration started; feed head-IMU readings.
    Recalibrating,
    Recording(bool),
    Gain(u32),
    /// Duplicate or addressed to the other node.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryOutcome {
    pub command: ServoCommand,
    pub record: InteractionRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerCounters {
    pub published: u64,
    pub received: u64,
    pub stale: u64,
    pub malformed: u64,
    pub commands: u64,
    pub commands_ignored: u64,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub node_id: String,
    cfg: ControllerConfig,
    seq: u64,
    last_peer_seq: Option<u64>,
    fix: Option<GeoFix>,
    peer_fix: Option<GeoFix>,
    vehicle_attitude: Option<AttitudeReading>,
    pointing: PointingState,
    /// Estimated mount yaw offset from its nominal zero.
    mount_bias_deg: f64,
    recal: Option<Vec<f64>>,
    recalibrated_pending: bool,
    seen_commands: BTreeSet<String>,
    pub counters: ControllerCounters,
}

impl Controller {
    pub fn new(node_id: &str, cfg: ControllerConfig) -> Self {
        Self {
            node_id: node_id.to_string(),
            cfg,
            seq: 0,
            last_peer_seq: None,
            fix: None,
            peer_fix: None,
            vehicle_attitude: None,
            pointing: PointingState::default(),
            mount_bias_deg: 0.0,
            recal: None,
            recalibrated_pending: false,
            seen_commands: BTreeSet::new(),
            counters: ControllerCounters::default(),
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn role(&self) -> NodeRole {
        self.cfg.role
    }

    pub fn pointing(&self) -> &PointingState {
        &self.pointing
    }

    pub fn mount_bias_estimate_deg(&self) -> f64 {
        self.mount_bias_deg
    }

    pub fn last_fix(&self) -> Option<&GeoFix> {
        self.fix.as_ref()
    }

    pub fn is_recalibrating(&self) -> bool {
        self.recal.is_some()
    }

    /// Mount angles at `t_ns`.
    pub fn mount_attitude(&self, t_ns: i64) -> (f64, f64) {
        attitude_at(&self.pointing, t_ns)
    }

    pub fn on_fix(&mut self, fix: GeoFix) {
        self.fix = Some(fix);
    }

    pub fn on_attitude(&mut self, reading: AttitudeReading) {
        self.vehicle_attitude = Some(reading);
    }

    fn vehicle_yaw(&self) -> f64 {
        match self.cfg.mount_frame {
            MountFrame::WorldFixed { heading_deg } => heading_deg,
            MountFrame::VehicleRelative => self.vehicle_attitude.map_or(0.0, |a| a.yaw_deg),
        }
    }

    /// Builds the next telemetry message. `None` until a fix is available.
    pub fn telemetry(&mut self, synced_now_ns: i64) -> Option<TelemetryMessage> {
        let fix = self.fix?;
        self.seq += 1;
        self.counters.published += 1;
        let (yaw, pitch) = match (self.cfg.mount_frame, self.vehicle_attitude) {
            (MountFrame::WorldFixed { heading_deg }, _) => (heading_deg, 0.0),
            (_, Some(a)) => (a.yaw_deg, a.pitch_deg),
            (_, None) => (0.0, 0.0),
        };
        let recalibrated = std::mem::take(&mut self.recalibrated_pending);
        Some(TelemetryMessage {
            node_id: self.node_id.clone(),
            seq: self.seq,
            t_ns: synced_now_ns,
            lat_deg: fix.lat_deg,
            lon_deg: fix.lon_deg,
            alt_m: fix.alt_m,
            sigma_enu_m: fix.sigma_enu_m,
            yaw_deg: normalize_deg(yaw),
            pitch_deg: pitch,
            rtk: fix.rtk_applied,
            recalibrated,
        })
    }

    /// Decodes and handles a counterpart payload.
    pub fn on_telemetry_payload(&mut self, payload: &[u8], recv_t_ns: i64) -> Result<Option<TelemetryOutcome>, ControllerError> {
        match serde_json::from_slice::<TelemetryMessage>(payload) {
            Ok(msg) => self.on_telemetry(&msg, recv_t_ns),
            Err(e) => {
                self.counters.malformed += 1;
                Err(ControllerError::Malformed(e.to_string()))
            }
        }
    }

    /// One servo command per fresh counterpart message; stale or duplicate
    /// sequence numbers are dropped. `recv_t_ns` is on the synchronized
    /// clock, as is the message's publish time.
    pub fn on_telemetry(&mut self, msg: &TelemetryMessage, recv_t_ns: i64) -> Result<Option<TelemetryOutcome>, ControllerError> {
        self.counters.received += 1;
        if self.cfg.stale_discard && self.last_peer_seq.is_some_and(|s| msg.seq <= s) {
            self.counters.stale += 1;
            return Ok(None);
        }
        let peer = msg.fix();
        if peer.validate().is_err() {
            self.counters.malformed += 1;
            return Err(ControllerError::Malformed("peer fix out of range".into()));
        }
        let own = self.fix.ok_or(ControllerError::NoFix)?;
        self.last_peer_seq = Some(msg.seq);
        self.peer_fix = Some(peer);
        let target = compute_target(&own, self.vehicle_yaw() + self.mount_bias_deg, &peer)?;
        let issue_t = recv_t_ns + self.cfg.processing_ns();
        let command = command_servo(&self.pointing, &target, &self.cfg.servo, issue_t);
        self.pointing = command.state;
        let command_t_ns = issue_t + self.cfg.servo.latency_ns();
        let record = InteractionRecord {
            node_id: self.node_id.clone(),
            peer_seq: msg.seq,
            publish_t_ns: msg.t_ns,
            recv_t_ns,
            command_t_ns,
            response_ms: (command_t_ns - msg.t_ns) as f64 / 1e6,
            messaging_ms: (recv_t_ns - msg.t_ns) as f64 / 1e6,
            target_yaw_deg: command.state.target_yaw_deg,
            target_pitch_deg: command.state.target_pitch_deg,
        };
        Ok(Some(TelemetryOutcome { command, record }))
    }

    pub fn on_command_payload(&mut self, payload: &[u8]) -> Result<CommandEffect, ControllerError> {
        match serde_json::from_slice::<OperatorCommand>(payload) {
            Ok(c) => self.on_command(&c),
            Err(e) => {
                self.counters.malformed += 1;
                Err(ControllerError::Malformed(e.to_string()))
            }
        }
    }

    /// Applies an operator command once per `cmd_id`.
    pub fn on_command(&mut self, cmd: &OperatorCommand) -> Result<CommandEffect, ControllerError> {
        if cmd.target != self.cfg.role || !self.seen_commands.insert(cmd.cmd_id.clone()) {
            self.counters.commands_ignored += 1;
            return Ok(CommandEffect::Ignored);
        }
        self.counters.commands += 1;
        Ok(match cmd.action {
            CommandAction::Recalibrate => {
                self.recal = Some(Vec::with_capacity(self.cfg.recal_samples));
                CommandEffect::Recalibrating
            }
            CommandAction::StartRecording => CommandEffect::Recording(true),
            CommandAction::StopRecording => CommandEffect::Recording(false),
            CommandAction::SetGain => {
                let g = cmd.gain_db.unwrap_or(0);
                if !GAINS_DB.contains(&g) {
                    return Err(ControllerError::BadGain(g));
                }
                CommandEffect::Gain(g)
            }
        })
    }

    /// Re-commands the servo toward the last counterpart fix, e.g. after a
    /// recalibration changed the mount zero.
    pub fn reaim(&mut self, now_ns: i64) -> Result<Option<ServoCommand>, ControllerError> {
        let (Some(own), Some(peer)) = (self.fix, self.peer_fix) else { return Ok(None) };
        let target = compute_target(&own, self.vehicle_yaw() + self.mount_bias_deg, &peer)?;
        let command = command_servo(&self.pointing, &target, &self.cfg.servo, now_ns);
        self.pointing = command.state;
        Ok(Some(command))
    }

    /// Feeds a head-IMU reading (world yaw of the boresight) during a
    /// recalibration. The mean offset between it and the boresight implied by
    /// the vehicle heading and mount angle becomes the bias estimate. Returns
    /// true when done.
    pub fn on_head_imu(&mut self, head: &AttitudeReading) -> bool {
        let expected = self.vehicle_yaw() + self.mount_attitude(head.t_ns).0;
        let n = self.cfg.recal_samples;
        let Some(samples) = self.recal.as_mut() else { return false };
        let d = head.yaw_deg - expected;
        samples.push(normalize_deg(d + 180.0) - 180.0);
        if samples.len() < n {
            return false;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        self.mount_bias_deg = mean;
        self.recal = None;
        self.recalibrated_pending = true;
        true
    }
}

/// Mean, median and 95th percentile of response times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub count: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn response_time_stats(records: &[InteractionRecord]) -> Option<ResponseStats> {
    summarize(records.iter().map(|r| r.response_ms))
}

pub fn summarize(values: impl Iterator<Item = f64>) -> Option<ResponseStats> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(ResponseStats {
        mean_ms: v.iter().sum::<f64>() / v.len() as f64,
        p50_ms: percentile(&v, 50.0),
        p95_ms: percentile(&v, 95.0),
        count: v.len(),
    })
}
