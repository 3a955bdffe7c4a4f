//! The campaign as one discrete-event simulation: two controllers with their
//! sensors and middleware clients, an operator client, the broker cluster,
//! the fault harness and the RX sounder, all on a single event queue.
//!
//! Virtual mode pops events as fast as it can. Realtime mode calls
//! [`World::step_until`] with the wall clock, so both share this code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::scenario::{FaultSpec, Scenario};
use super::OrchestratorError;
use crate::controller::{
    CommandAction, CommandEffect, Controller, ControllerError, InteractionRecord, NodeRole, OperatorCommand, TelemetryMessage,
};
use crate::geodesy::{bearing_elevation, GeoFix, LosAngles};
use crate::middleware::{
    best_of, Addr, BrokerStatus, ClientConfig, ClientEvent, ClientId, Cluster, Lease, MwClient, MwError, NetEvent, Outgoing, ProduceToken,
    Role, Scheduled, SyncSample, TOPIC_COMMANDS, TOPIC_EVENTS, TOPIC_TELEMETRY_RX, TOPIC_TELEMETRY_TX,
};
use crate::mobility::{fix_error_m, GnssSensor, ImuSensor, Route, TruePose};
use crate::pointing::{pointing_error_deg, shortest_rotation};
use crate::rng::{self, SimRng};
use crate::sim::Scheduler;
use crate::sounder::{self, ChannelTap, SegmentMeta, Terminal};

const MS: i64 = 1_000_000;
const S: i64 = 1_000_000_000;

const TAG_WORLD: u64 = 0x40;
const TAG_GNSS: u64 = 0x50;
const TAG_IMU: u64 = 0x60;
const TAG_HEAD_IMU: u64 = 0x70;

/// Registration, clock sync and subscriptions must finish by then.
const STARTUP_NS: i64 = 200 * MS;
const SYNC_EXCHANGES: usize = 8;
const MAX_CLOCK_OFFSET_NS: i64 = 50 * MS;
const TELEMETRY_AFTER_FIX_NS: i64 = MS;
const POINTING_PERIOD_NS: i64 = 20 * MS;
const SEGMENT_NS: i64 = 500 * MS;
const OPERATOR: ClientId = 3;

pub const ALL_TOPICS: [&str; 4] = [TOPIC_TELEMETRY_TX, TOPIC_TELEMETRY_RX, TOPIC_COMMANDS, TOPIC_EVENTS];

#[derive(Debug, Clone)]
enum Ev {
    Net(NetEvent),
    StartCheck,
    Gnss(usize),
    Imu(usize),
    Telemetry(usize),
    PointingSample,
    Renew(usize),
    Fault(usize),
    Command(usize),
    SegmentStart(u64),
    SegmentMid(u64),
    SegmentEnd(u64),
    BrokerHealth,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Running,
    Finished,
}

/// Scored pointing sample: error of the physical boresight against the true
/// line of sight to the counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointingSample {
    pub t_ns: i64,
    pub node: NodeRole,
    pub yaw_error_deg: f64,
    pub pitch_error_deg: f64,
    pub error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_ns: i64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub node_id: String,
    pub seq: u64,
    pub t_start_ns: i64,
    pub gain_db: u32,
    pub los_gain_dbm: Option<f64>,
    pub path: Option<PathBuf>,
}

/// One line of the operator stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    #[serde(rename = "type")]
    pub kind: String,
    pub data: Value,
}

impl StreamEvent {
    pub fn new(kind: &str, data: Value) -> Self {
        Self { kind: kind.to_string(), data }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("stream events serialize")
    }
}

#[derive(Debug, Clone)]
pub struct AckedRecord {
    pub topic: String,
    pub offset: u64,
    pub payload: Vec<u8>,
}

/// Everything a run produces before it is written out.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    /// Published telemetry payloads, in publish order.
    pub telemetry: Vec<Vec<u8>>,
    pub interactions: Vec<InteractionRecord>,
    pub pointing: Vec<PointingSample>,
    /// (node, 3D fix error in metres).
    pub fix_errors: Vec<(NodeRole, f64)>,
    pub events: Vec<EventRecord>,
    pub acked: Vec<AckedRecord>,
    pub publish_failed: u64,
    pub segments: Vec<SegmentRecord>,
    pub segments_discarded: u64,
    pub segments_failed: u64,
    /// Realtime only: wall-clock delay added on top of the simulated
    /// publish-to-receive path, per interaction.
    pub overhead_ms: Vec<f64>,
    pub events_processed: u64,
}

/// A command accepted over the operator API.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiCommand {
    Controller(OperatorCommand),
    Fault(FaultSpec),
}

impl ApiCommand {
    /// Controller actions go to the `commands` topic; the rest are fault
    /// harness actions.
    pub fn parse(v: &Value) -> Result<Self, String> {
        let action = v.get("action").and_then(Value::as_str).ok_or("missing string field `action`")?;
        let is_controller = serde_json::from_value::<CommandAction>(Value::String(action.to_string())).is_ok();
        if is_controller {
            let mut v = v.clone();
            if let Some(o) = v.as_object_mut() {
                o.entry("cmd_id").or_insert(Value::String(String::new()));
            }
            let cmd: OperatorCommand = serde_json::from_value(v).map_err(|e| e.to_string())?;
            if cmd.action == CommandAction::SetGain && !cmd.gain_db.is_some_and(|g| crate::controller::GAINS_DB.contains(&g)) {
                return Err("set_gain needs gain_db of 0 or 76".into());
            }
            Ok(ApiCommand::Controller(cmd))
        } else {
            serde_json::from_value::<FaultSpec>(v.clone()).map(ApiCommand::Fault).map_err(|e| e.to_string())
        }
    }
}

struct Node {
    role: NodeRole,
    id: String,
    ctrl: Controller,
    client: MwClient,
    gnss: GnssSensor,
    imu: ImuSensor,
    head_imu: ImuSensor,
    sync: Vec<SyncSample>,
    sync_offset_ns: Option<i64>,
    lease: Option<Lease>,
    /// Mount rotation the controller does not know about.
    true_bias_deg: f64,
    phase_ns: i64,
    pending: BTreeMap<ProduceToken, (String, Vec<u8>)>,
    last_pointing: Option<PointingSample>,
    /// Realtime only: wall lateness at publish, by telemetry seq.
    publish_lateness: BTreeMap<u64, i64>,
}

impl Node {
    /// Local clock corrected by the sync estimate.
    fn synced(&self, now: i64) -> i64 {
        now + self.client.clock_offset_ns + self.sync_offset_ns.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default)]
struct Recording {
    enabled: bool,
    gain_db: u32,
    generation: u64,
    next_seq: u64,
    active: Option<ActiveSegment>,
}

#[derive(Debug, Clone)]
struct ActiveSegment {
    seq: u64,
    t_start_ns: i64,
    gain_db: u32,
    taps: Option<Vec<ChannelTap>>,
}

pub type WallClock = Box<dyn Fn() -> i64 + Send>;

pub struct World {
    sc: Scenario,
    route: Route,
    tx_site: GeoFix,
    out: Option<PathBuf>,
    queue: Scheduler<Ev>,
    cluster: Cluster,
    nodes: Vec<Node>,
    operator: MwClient,
    operator_pending: BTreeMap<ProduceToken, (String, Vec<u8>)>,
    t_start_ns: i64,
    t_end_ns: i64,
    sounder_rng: SimRng,
    rec: Recording,
    status: RunStatus,
    log: RunLog,
    outbox: Vec<StreamEvent>,
    streaming: bool,
    wall: Option<WallClock>,
    cmd_counter: u64,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World").field("scenario", &self.sc.name).field("now_ns", &self.queue.now_ns()).finish()
    }
}

fn node_id(role: NodeRole) -> String {
    format!("{}-1", role.as_str())
}

fn role_index(role: NodeRole) -> usize {
    match role {
        NodeRole::Tx => 0,
        NodeRole::Rx => 1,
    }
}

impl World {
    /// Builds the world for a validated scenario. Segments are written under
    /// `out/segments` when `out` is given; without it recording is a no-op.
    pub fn new(sc: &Scenario, out: Option<&Path>) -> Result<Self, OrchestratorError> {
        sc.validate()?;
        let route = sc.load_route()?;
        let mut wrng = rng::stream(sc.seed, TAG_WORLD);
        let mut sensors = sc.sensors;
        sensors.seed = sc.seed;
        let nodes = [NodeRole::Tx, NodeRole::Rx]
            .into_iter()
            .enumerate()
            .map(|(i, role)| {
                let k = i as u64;
                let mut client = MwClient::new(k as ClientId + 1, sc.client);
                client.clock_offset_ns = wrng.gen_range(-MAX_CLOCK_OFFSET_NS..=MAX_CLOCK_OFFSET_NS);
                Node {
                    role,
                    id: node_id(role),
                    ctrl: Controller::new(&node_id(role), sc.controller_config(role)),
                    client,
                    gnss: GnssSensor::new(sensors, TAG_GNSS + k),
                    imu: ImuSensor::new(&sensors, TAG_IMU + k),
                    head_imu: ImuSensor::new(&sensors, TAG_HEAD_IMU + k),
                    sync: Vec::new(),
                    sync_offset_ns: None,
                    lease: None,
                    true_bias_deg: 0.0,
                    phase_ns: wrng.gen_range(0..(S as f64 / sensors.gnss_rate_hz) as i64),
                    pending: BTreeMap::new(),
                    last_pointing: None,
                    publish_lateness: BTreeMap::new(),
                }
            })
            .collect();
        let t_end_ns = STARTUP_NS + (sc.duration_s * S as f64).round() as i64;
        Ok(Self {
            route,
            tx_site: sc.tx.fix(),
            out: out.map(Path::to_path_buf),
            queue: Scheduler::new(),
            cluster: Cluster::new(sc.middleware, sc.seed),
            nodes,
            operator: MwClient::new(OPERATOR, ClientConfig::default()),
            operator_pending: BTreeMap::new(),
            t_start_ns: STARTUP_NS,
            t_end_ns,
            sounder_rng: rng::stream(sc.seed, rng::TAG_SOUNDER),
            rec: Recording { gain_db: sc.recording.gain_db, ..Recording::default() },
            status: RunStatus::Idle,
            log: RunLog::default(),
            outbox: Vec::new(),
            streaming: false,
            wall: None,
            cmd_counter: 0,
            sc: sc.clone(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn now_ns(&self) -> i64 {
        self.queue.now_ns()
    }

    pub fn end_ns(&self) -> i64 {
        self.t_end_ns
    }

    /// Start of scored operation (after startup).
    pub fn start_ns(&self) -> i64 {
        self.t_start_ns
    }

    pub fn next_due(&self) -> Option<i64> {
        self.queue.peek_time()
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn controller(&self, role: NodeRole) -> &Controller {
        &self.nodes[role_index(role)].ctrl
    }

    /// Collect operator-stream events for [`World::drain_stream`].
    pub fn enable_stream(&mut self) {
        self.streaming = true;
    }

    pub fn drain_stream(&mut self) -> Vec<StreamEvent> {
        std::mem::take(&mut self.outbox)
    }

    /// Realtime pacing: wall nanoseconds on the simulation's time base.
    pub fn set_wall_clock(&mut self, wall: WallClock) {
        self.wall = Some(wall);
    }

    fn emit(&mut self, kind: &str, data: impl FnOnce() -> Value) {
        if self.streaming {
            self.outbox.push(StreamEvent::new(kind, data()));
        }
    }

    fn schedule_net(&mut self, sched: Vec<Scheduled>) {
        for s in sched {
            self.queue.schedule(s.at_ns, Ev::Net(s.event));
        }
    }

    fn send(&mut self, from: Addr, out: Vec<Outgoing>) {
        let now = self.queue.now_ns();
        let sched = self.cluster.route(now, from, out);
        self.schedule_net(sched);
    }

    fn node_send(&mut self, i: usize, out: Vec<Outgoing>) {
        let addr = self.nodes[i].client.addr();
        self.send(addr, out);
    }

    fn record_event(&mut self, kind: &str, node: Option<usize>, detail: Value) {
        let t_ns = self.queue.now_ns();
        let rec = EventRecord { t_ns, kind: kind.to_string(), node: node.map(|i| self.nodes[i].id.clone()), detail };
        self.emit("event", || serde_json::to_value(&rec).unwrap_or(Value::Null));
        self.log.events.push(rec);
    }

    /// Records an event and publishes it on the `events` topic.
    fn publish_event(&mut self, kind: &str, node: Option<usize>, detail: Value) {
        self.record_event(kind, node, detail);
        let payload = serde_json::to_vec(self.log.events.last().expect("just pushed")).expect("serializable");
        let now = self.queue.now_ns();
        let (token, out) = self.operator.produce(now, TOPIC_EVENTS, kind.as_bytes().to_vec(), payload.clone());
        self.operator_pending.insert(token, (TOPIC_EVENTS.to_string(), payload));
        self.send(self.operator.addr(), out);
    }

    /// Seeds the queue: cluster start, topics, registration, clock sync,
    /// subscriptions and every periodic and scheduled activity.
    fn begin(&mut self) -> Result<(), OrchestratorError> {
        self.status = RunStatus::Running;
        let sched = self.cluster.start(0);
        self.schedule_net(sched);
        let rf = self.sc.middleware.replication_factor;
        for t in ALL_TOPICS {
            let sched = self.cluster.create_topic(0, t, rf).map_err(|e| OrchestratorError::Startup(format!("topic {t}: {e}")))?;
            self.schedule_net(sched);
        }
        self.queue.advance_to(5 * MS);
        for i in 0..self.nodes.len() {
            let role = match self.nodes[i].role {
                NodeRole::Tx => Role::Tx,
                NodeRole::Rx => Role::Rx,
            };
            let id = self.nodes[i].id.clone();
            let now = self.queue.now_ns();
            let (_, out) = self.nodes[i].client.register(&id, role, &format!("sim://{id}"));
            self.node_send(i, out);
            let (_, out) = self.nodes[i].client.time_request(now);
            self.node_send(i, out);
            let peer_topic = self.nodes[i].role.peer().telemetry_topic();
            let out = self.nodes[i].client.subscribe(now, peer_topic, 0);
            self.node_send(i, out);
            let out = self.nodes[i].client.subscribe(now, TOPIC_COMMANDS, 0);
            self.node_send(i, out);
        }

        let t0 = self.t_start_ns;
        self.queue.schedule(t0, Ev::StartCheck);
        let imu_ns = (S as f64 / self.sc.sensors.imu_rate_hz).round() as i64;
        for i in 0..self.nodes.len() {
            let ph = self.nodes[i].phase_ns;
            self.queue.schedule(t0 + ph, Ev::Gnss(i));
            self.queue.schedule(t0 + ph + TELEMETRY_AFTER_FIX_NS, Ev::Telemetry(i));
            self.queue.schedule(t0 + ph % imu_ns, Ev::Imu(i));
            self.queue.schedule(t0 + self.lease_ttl_ns() / 2, Ev::Renew(i));
        }
        self.queue.schedule(t0 + (self.sc.warmup_s * S as f64).round() as i64 + 10 * MS, Ev::PointingSample);
        for k in 0..self.sc.faults.len() {
            self.queue.schedule(t0 + (self.sc.faults[k].at_s * S as f64).round() as i64, Ev::Fault(k));
        }
        for k in 0..self.sc.commands.len() {
            self.queue.schedule(t0 + (self.sc.commands[k].at_s * S as f64).round() as i64, Ev::Command(k));
        }
        if self.sc.recording.enabled {
            self.rec.enabled = true;
            self.rec.generation += 1;
            self.queue.schedule(t0, Ev::SegmentStart(self.rec.generation));
        }
        if self.streaming {
            self.queue.schedule(t0, Ev::BrokerHealth);
        }
        self.queue.schedule(self.t_end_ns, Ev::End);
        Ok(())
    }

    fn lease_ttl_ns(&self) -> i64 {
        (self.sc.middleware.lease_ttl_ms * MS as f64).round() as i64
    }

    /// Runs a virtual-time campaign to completion.
    pub fn run(&mut self) -> Result<(), OrchestratorError> {
        self.step_until(i64::MAX)
    }

    /// Processes every event due at or before `limit_ns`.
    pub fn step_until(&mut self, limit_ns: i64) -> Result<(), OrchestratorError> {
        if self.status == RunStatus::Idle {
            self.begin()?;
        }
        while self.status == RunStatus::Running {
            let Some((now, ev)) = self.queue.pop_until(limit_ns) else { break };
            self.log.events_processed += 1;
            self.dispatch(now, ev)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, now: i64, ev: Ev) -> Result<(), OrchestratorError> {
        match ev {
            Ev::Net(ne) => self.on_net(now, ne),
            Ev::StartCheck => self.start_check()?,
            Ev::Gnss(i) => self.on_gnss(now, i)?,
            Ev::Imu(i) => self.on_imu(now, i),
            Ev::Telemetry(i) => self.on_telemetry_tick(now, i),
            Ev::PointingSample => self.on_pointing_sample(now)?,
            Ev::Renew(i) => self.on_renew(i),
            Ev::Fault(k) => {
                let f = self.sc.faults[k].fault.clone();
                self.apply_fault(&f);
            }
            Ev::Command(k) => {
                let c = &self.sc.commands[k];
                let cmd = OperatorCommand { target: c.target, action: c.action, gain_db: c.gain_db, cmd_id: String::new() };
                self.publish_command(cmd);
            }
            Ev::SegmentStart(g) => self.on_segment_start(now, g),
            Ev::SegmentMid(g) => self.on_segment_mid(g),
            Ev::SegmentEnd(g) => self.on_segment_end(g),
            Ev::BrokerHealth => {
                self.emit_broker_health();
                self.queue.schedule(now + S, Ev::BrokerHealth);
            }
            Ev::End => self.on_end(),
        }
        Ok(())
    }

    fn start_check(&mut self) -> Result<(), OrchestratorError> {
        let mut missing = Vec::new();
        for n in &self.nodes {
            if n.lease.is_none() {
                missing.push(format!("{} not registered", n.id));
            }
            if n.sync_offset_ns.is_none() {
                missing.push(format!("{} clock not synchronized", n.id));
            }
        }
        for t in ALL_TOPICS {
            if self.cluster.leader_of(t).is_none() {
                missing.push(format!("topic {t} has no leader"));
            }
        }
        if !missing.is_empty() {
            self.status = RunStatus::Finished;
            return Err(OrchestratorError::Startup(missing.join("; ")));
        }
        let detail = json!({
            "clock_offsets_ns": self.nodes.iter().map(|n| n.client.clock_offset_ns).collect::<Vec<_>>(),
            "sync_estimates_ns": self.nodes.iter().map(|n| n.sync_offset_ns).collect::<Vec<_>>(),
        });
        self.record_event("started", None, detail);
        Ok(())
    }

    // ---- truth -----------------------------------------------------------

    fn truth(&self, i: usize, now: i64) -> TruePose {
        match self.nodes[i].role {
            NodeRole::Tx => TruePose::stationary(self.tx_site.at(now), self.sc.tx.heading_deg),
            NodeRole::Rx => {
                let t = self.route.start_s() + (now - self.t_start_ns).max(0) as f64 / S as f64;
                let t = t.min(self.route.end_s());
                let mut p = self.route.sample(t).expect("clamped into the route span");
                p.position.t_ns = now;
                p
            }
        }
    }

    /// World-frame boresight of node `i`'s antenna.
    fn boresight(&self, i: usize, pose: &TruePose, now: i64) -> (f64, f64) {
        let n = &self.nodes[i];
        let (my, mp) = n.ctrl.mount_attitude(now);
        (pose.heading_deg + my + n.true_bias_deg, mp + pose.pitch_deg)
    }

    fn true_los(&self, i: usize, now: i64) -> Result<(TruePose, LosAngles), OrchestratorError> {
        let own = self.truth(i, now);
        let peer = self.truth(1 - i, now);
        let los = bearing_elevation(&own.position, &peer.position).map_err(|e| OrchestratorError::Sim(e.to_string()))?;
        Ok((own, los))
    }

    // ---- sensors and controllers -----------------------------------------

    fn on_gnss(&mut self, now: i64, i: usize) -> Result<(), OrchestratorError> {
        let pose = self.truth(i, now);
        let rtk = self.sc.rtk;
        let sample = self.nodes[i].gnss.sample(&pose, rtk).map_err(|e| OrchestratorError::Sim(e.to_string()))?;
        let mut fix = sample.fix;
        fix.t_ns = now;
        if let Ok(err) = fix_error_m(&fix, &pose.position) {
            self.log.fix_errors.push((self.nodes[i].role, err));
        }
        self.nodes[i].ctrl.on_fix(fix);
        let period = (S as f64 / self.sc.sensors.gnss_rate_hz).round() as i64;
        self.queue.schedule(now + period, Ev::Gnss(i));
        Ok(())
    }

    fn on_imu(&mut self, now: i64, i: usize) {
        let pose = self.truth(i, now);
        if self.nodes[i].role == NodeRole::Rx {
            let mut r = self.nodes[i].imu.sample(&pose);
            r.t_ns = now;
            self.nodes[i].ctrl.on_attitude(r);
        }
        if self.nodes[i].ctrl.is_recalibrating() {
            let (yaw, pitch) = self.boresight(i, &pose, now);
            let head = self.nodes[i].head_imu.read(yaw, pitch, now);
            if self.nodes[i].ctrl.on_head_imu(&head) {
                let _ = self.nodes[i].ctrl.reaim(now);
                let est = self.nodes[i].ctrl.mount_bias_estimate_deg();
                self.publish_event("recalibrated", Some(i), json!({ "bias_estimate_deg": est }));
            }
        }
        let period = (S as f64 / self.sc.sensors.imu_rate_hz).round() as i64;
        self.queue.schedule(now + period, Ev::Imu(i));
    }

    fn on_telemetry_tick(&mut self, now: i64, i: usize) {
        let period = self.nodes[i].ctrl.config().telemetry_period_ns();
        self.queue.schedule(now + period, Ev::Telemetry(i));
        let synced = self.nodes[i].synced(now);
        let Some(msg) = self.nodes[i].ctrl.telemetry(synced) else { return };
        let payload = serde_json::to_vec(&msg).expect("telemetry serializes");
        if let Some(w) = &self.wall {
            let late = w() - now;
            let n = &mut self.nodes[i];
            n.publish_lateness.insert(msg.seq, late);
            while n.publish_lateness.len() > 64 {
                n.publish_lateness.pop_first();
            }
        }
        self.log.telemetry.push(payload.clone());
        let topic = self.nodes[i].role.telemetry_topic();
        let key = self.nodes[i].id.as_bytes().to_vec();
        let (token, out) = self.nodes[i].client.produce(now, topic, key, payload.clone());
        self.nodes[i].pending.insert(token, (topic.to_string(), payload));
        self.node_send(i, out);
        self.emit("telemetry", || serde_json::to_value(&msg).unwrap_or(Value::Null));
    }

    fn on_pointing_sample(&mut self, now: i64) -> Result<(), OrchestratorError> {
        for i in 0..self.nodes.len() {
            let (own, los) = self.true_los(i, now)?;
            let b = self.boresight(i, &own, now);
            let s = PointingSample {
                t_ns: now,
                node: self.nodes[i].role,
                yaw_error_deg: shortest_rotation(los.yaw_deg, b.0),
                pitch_error_deg: b.1 - los.pitch_deg,
                error_deg: pointing_error_deg(b, &los),
            };
            self.nodes[i].last_pointing = Some(s);
            self.log.pointing.push(s);
        }
        self.queue.schedule(now + POINTING_PERIOD_NS, Ev::PointingSample);
        Ok(())
    }

    fn on_renew(&mut self, i: usize) {
        let id = self.nodes[i].id.clone();
        let out = match &self.nodes[i].lease {
            Some(l) => {
                let lease_id = l.lease_id;
                self.nodes[i].client.renew(&id, lease_id).1
            }
            None => self.register(i),
        };
        self.node_send(i, out);
        let next = self.queue.now_ns() + self.lease_ttl_ns() / 2;
        self.queue.schedule(next, Ev::Renew(i));
    }

    fn register(&mut self, i: usize) -> Vec<Outgoing> {
        let id = self.nodes[i].id.clone();
        let role = match self.nodes[i].role {
            NodeRole::Tx => Role::Tx,
            NodeRole::Rx => Role::Rx,
        };
        self.nodes[i].client.register(&id, role, &format!("sim://{id}")).1
    }

    // ---- middleware ------------------------------------------------------

    fn on_net(&mut self, now: i64, ev: NetEvent) {
        let target = match &ev {
            NetEvent::Deliver(env) => env.to,
            NetEvent::Timer { owner, .. } => *owner,
        };
        let Addr::Client(c) = target else {
            let sched = self.cluster.handle(now, ev);
            self.schedule_net(sched);
            return;
        };
        if c == OPERATOR {
            let (events, out) = match ev {
                NetEvent::Deliver(env) => self.operator.handle(now, env),
                NetEvent::Timer { kind, .. } => self.operator.on_timer(now, &kind),
            };
            self.send(self.operator.addr(), out);
            for e in events {
                match e {
                    ClientEvent::Acked { token, offset, .. } => {
                        if let Some((topic, payload)) = self.operator_pending.remove(&token) {
                            self.log.acked.push(AckedRecord { topic, offset, payload });
                        }
                    }
                    ClientEvent::Failed { token, topic, error } => {
                        self.operator_pending.remove(&token);
                        self.log.publish_failed += 1;
                        self.record_event("publish_failed", None, json!({ "topic": topic, "error": error.to_string() }));
                    }
                    _ => {}
                }
            }
            return;
        }
        let i = (c - 1) as usize;
        if i >= self.nodes.len() {
            return;
        }
        let (events, out) = match ev {
            NetEvent::Deliver(env) => self.nodes[i].client.handle(now, env),
            NetEvent::Timer { kind, .. } => self.nodes[i].client.on_timer(now, &kind),
        };
        self.node_send(i, out);
        for e in events {
            self.on_client_event(now, i, e);
        }
    }

    fn on_client_event(&mut self, now: i64, i: usize, e: ClientEvent) {
        match e {
            ClientEvent::Acked { token, offset, .. } => {
                if let Some((topic, payload)) = self.nodes[i].pending.remove(&token) {
                    self.log.acked.push(AckedRecord { topic, offset, payload });
                }
            }
            ClientEvent::Failed { token, topic, error } => {
                self.nodes[i].pending.remove(&token);
                self.log.publish_failed += 1;
                self.record_event("publish_failed", Some(i), json!({ "topic": topic, "error": error.to_string() }));
            }
            ClientEvent::Records { topic, records } => {
                for r in records {
                    if topic == TOPIC_COMMANDS {
                        self.on_command_record(now, i, &r.payload);
                    } else if topic == self.nodes[i].role.peer().telemetry_topic() {
                        self.on_peer_telemetry(now, i, &r.payload);
                    }
                }
            }
            ClientEvent::Lease { result, .. } => match result {
                Ok(l) => self.nodes[i].lease = Some(l),
                Err(MwError::LeaseExpired(_)) => {
                    self.nodes[i].lease = None;
                    self.record_event("lease_expired", Some(i), Value::Null);
                    let out = self.register(i);
                    self.node_send(i, out);
                }
                Err(e) => self.record_event("lease_error", Some(i), json!(e.to_string())),
            },
            ClientEvent::Time { sample, .. } => {
                let n = &mut self.nodes[i];
                n.sync.push(sample);
                if n.sync.len() < SYNC_EXCHANGES {
                    let (_, out) = n.client.time_request(now);
                    self.node_send(i, out);
                } else {
                    n.sync_offset_ns = best_of(&n.sync).map(|(o, _)| o);
                }
            }
            ClientEvent::Lookup { .. } => {}
        }
    }

    fn on_peer_telemetry(&mut self, now: i64, i: usize, payload: &[u8]) {
        let recv = self.nodes[i].synced(now);
        match self.nodes[i].ctrl.on_telemetry_payload(payload, recv) {
            Ok(Some(o)) => {
                if let Some(w) = &self.wall {
                    let late = w() - now;
                    let peer = 1 - i;
                    if let Some(p) = self.nodes[peer].publish_lateness.get(&o.record.peer_seq) {
                        self.log.overhead_ms.push((late - p) as f64 / MS as f64);
                    }
                }
                let err = self.nodes[i].last_pointing;
                self.emit("interaction", || {
                    let mut v = serde_json::to_value(&o.record).unwrap_or(Value::Null);
                    if let (Some(obj), Some(p)) = (v.as_object_mut(), err) {
                        obj.insert(
                            "pointing_error_deg".into(),
                            json!({"yaw": p.yaw_error_deg, "pitch": p.pitch_error_deg, "total": p.error_deg}),
                        );
                    }
                    v
                });
                self.log.interactions.push(o.record);
            }
            Ok(None) => {}
            Err(ControllerError::NoFix) => self.record_event("no_fix", Some(i), Value::Null),
            Err(e) => self.record_event("bad_telemetry", Some(i), json!(e.to_string())),
        }
    }

    fn on_command_record(&mut self, now: i64, i: usize, payload: &[u8]) {
        let cmd_id = serde_json::from_slice::<OperatorCommand>(payload).map(|c| c.cmd_id).unwrap_or_default();
        match self.nodes[i].ctrl.on_command_payload(payload) {
            Ok(CommandEffect::Ignored) => {}
            Ok(effect) => {
                let detail = json!({ "cmd_id": cmd_id, "effect": format!("{effect:?}") });
                self.publish_event("command_applied", Some(i), detail);
                if self.nodes[i].role != NodeRole::Rx {
                    return;
                }
                match effect {
                    CommandEffect::Recording(true) => self.start_recording(now),
                    CommandEffect::Recording(false) => self.stop_recording(),
                    CommandEffect::Gain(g) => self.rec.gain_db = g,
                    _ => {}
                }
            }
            Err(e) => self.record_event("bad_command", Some(i), json!({ "cmd_id": cmd_id, "error": e.to_string() })),
        }
    }

    fn next_cmd_id(&mut self) -> String {
        self.cmd_counter += 1;
        format!("op-{}", self.cmd_counter)
    }

    /// Relays an operator command onto the `commands` topic.
    fn publish_command(&mut self, mut cmd: OperatorCommand) -> String {
        if cmd.cmd_id.is_empty() {
            cmd.cmd_id = self.next_cmd_id();
        }
        let payload = serde_json::to_vec(&cmd).expect("command serializes");
        let now = self.queue.now_ns();
        let (token, out) = self.operator.produce(now, TOPIC_COMMANDS, cmd.cmd_id.as_bytes().to_vec(), payload.clone());
        self.operator_pending.insert(token, (TOPIC_COMMANDS.to_string(), payload));
        self.send(self.operator.addr(), out);
        self.record_event("command_sent", None, serde_json::to_value(&cmd).unwrap_or(Value::Null));
        cmd.cmd_id
    }

    /// Operator API entry point. Returns the command id.
    pub fn submit(&mut self, cmd: ApiCommand) -> Result<String, OrchestratorError> {
        if self.status != RunStatus::Running {
            return Err(OrchestratorError::NotRunning);
        }
        Ok(match cmd {
            ApiCommand::Controller(c) => self.publish_command(c),
            ApiCommand::Fault(f) => {
                self.apply_fault(&f);
                self.next_cmd_id()
            }
        })
    }

    fn apply_fault(&mut self, f: &FaultSpec) {
        let now = self.queue.now_ns();
        let result = match f {
            FaultSpec::FailLeader { topic } => match self.cluster.leader_of(topic) {
                Some(b) => self.cluster.fail(b).map(|_| json!({ "topic": topic, "broker": b })),
                None => Err(MwError::Unavailable(topic.clone())),
            },
            FaultSpec::FailBroker { broker } => self.cluster.fail(*broker).map(|_| json!({ "broker": broker })),
            FaultSpec::RestoreBroker { broker } => self.cluster.restore(now, *broker).map(|sched| {
                self.schedule_net(sched);
                json!({ "broker": broker })
            }),
            FaultSpec::MountBias { node, deg } => {
                self.nodes[role_index(*node)].true_bias_deg += deg;
                Ok(json!({ "node": node, "deg": deg }))
            }
        };
        let kind = serde_json::to_value(f).ok().and_then(|v| v["action"].as_str().map(str::to_string)).unwrap_or_default();
        match result {
            Ok(detail) => self.record_event(&format!("fault_{kind}"), None, detail),
            Err(e) => self.record_event("fault_rejected", None, json!({ "action": kind, "error": e.to_string() })),
        }
        self.emit_broker_health();
    }

    pub fn broker_health(&self) -> Value {
        let brokers: Vec<Value> = self
            .cluster
            .brokers()
            .iter()
            .enumerate()
            .map(|(id, b)| {
                let leads: Vec<&str> = ALL_TOPICS.iter().copied().filter(|t| self.cluster.leader_of(t) == Some(id as u32)).collect();
                json!({ "id": id, "status": b.status(), "leader_of": leads })
            })
            .collect();
        json!({ "t_ns": self.queue.now_ns(), "brokers": brokers })
    }

    fn emit_broker_health(&mut self) {
        if self.streaming {
            let v = self.broker_health();
            self.outbox.push(StreamEvent::new("broker_health", v));
        }
    }

    // ---- recording -------------------------------------------------------

    fn start_recording(&mut self, now: i64) {
        if self.rec.enabled {
            return;
        }
        self.rec.enabled = true;
        self.rec.generation += 1;
        self.queue.schedule(now, Ev::SegmentStart(self.rec.generation));
    }

    fn stop_recording(&mut self) {
        if !self.rec.enabled {
            return;
        }
        self.rec.enabled = false;
        self.rec.generation += 1;
        if let Some(a) = self.rec.active.take() {
            self.log.segments_discarded += 1;
            self.record_event("segment_discarded", Some(1), json!({ "seq": a.seq }));
        }
    }

    fn on_segment_start(&mut self, now: i64, g: u64) {
        if g != self.rec.generation || !self.rec.enabled {
            return;
        }
        let rx = &self.nodes[role_index(NodeRole::Rx)];
        let seq = self.rec.next_seq;
        self.rec.next_seq += 1;
        self.rec.active = Some(ActiveSegment { seq, t_start_ns: rx.synced(now), gain_db: self.rec.gain_db, taps: None });
        self.queue.schedule(now + SEGMENT_NS / 2, Ev::SegmentMid(g));
        self.queue.schedule(now + SEGMENT_NS, Ev::SegmentEnd(g));
        let every = (self.sc.recording.interval_s * S as f64).round() as i64;
        self.queue.schedule(now + every, Ev::SegmentStart(g));
    }

    /// The channel is frozen at mid-segment.
    fn on_segment_mid(&mut self, g: u64) {
        if g != self.rec.generation || self.rec.active.is_none() {
            return;
        }
        let now = self.queue.now_ns();
        let (ti, ri) = (role_index(NodeRole::Tx), role_index(NodeRole::Rx));
        let terminal = |w: &World, i: usize| {
            let pose = w.truth(i, now);
            Terminal { fix: pose.position, boresight: w.boresight(i, &pose, now), pattern: w.sc.sounder.pattern }
        };
        let (tx, rx) = (terminal(self, ti), terminal(self, ri));
        match sounder::channel_taps(&tx, &rx, &self.sc.sounder.scene, self.sc.sounder.carrier_hz) {
            Ok(taps) => self.rec.active.as_mut().expect("checked").taps = Some(taps),
            Err(e) => self.record_event("segment_channel_error", Some(ri), json!(e.to_string())),
        }
    }

    fn on_segment_end(&mut self, g: u64) {
        if g != self.rec.generation {
            return;
        }
        let Some(a) = self.rec.active.take() else { return };
        let ri = role_index(NodeRole::Rx);
        let Some(taps) = a.taps else {
            self.log.segments_failed += 1;
            return;
        };
        let rx_id = self.nodes[ri].id.clone();
        let meta = SegmentMeta::new(&rx_id, a.seq, a.t_start_ns, a.gain_db);
        let los = taps.first().map(|t| t.gain_db);
        let path = match &self.out {
            Some(dir) => {
                let seg = sounder::synthesize_segment(&self.sc.sounder, &taps, meta, &mut self.sounder_rng)
                    .and_then(|seg| sounder::record_segment(&dir.join("segments"), &seg));
                match seg {
                    Ok(p) => Some(p),
                    Err(e) => {
                        self.log.segments_failed += 1;
                        self.publish_event("segment_failed", Some(ri), json!({ "seq": a.seq, "error": e.to_string() }));
                        return;
                    }
                }
            }
            None => None,
        };
        let rec = SegmentRecord { node_id: rx_id, seq: a.seq, t_start_ns: a.t_start_ns, gain_db: a.gain_db, los_gain_dbm: los, path };
        let v = serde_json::to_value(&rec).unwrap_or(Value::Null);
        self.emit("segment_recorded", || v.clone());
        self.publish_event("segment_recorded", Some(ri), v);
        self.log.segments.push(rec);
    }

    fn on_end(&mut self) {
        if let Some(a) = self.rec.active.take() {
            self.log.segments_discarded += 1;
            self.record_event("segment_discarded", Some(1), json!({ "seq": a.seq, "reason": "run ended" }));
        }
        self.status = RunStatus::Finished;
        self.emit("end", || Value::Null);
    }

    // ---- inspection ------------------------------------------------------

    /// Acknowledged records missing from, or different in, the final log of
    /// their topic's leader. Returns (lost, unverifiable).
    pub fn verify_acked(&self) -> (usize, usize) {
        let mut lost = 0;
        let mut unverified = 0;
        for a in &self.log.acked {
            let Some(b) = self.cluster.leader_of(&a.topic).and_then(|l| self.cluster.broker(l)) else {
                unverified += 1;
                continue;
            };
            let hw = b.high_watermark(&a.topic).unwrap_or(0);
            let ok = a.offset < hw && b.log(&a.topic).and_then(|l| l.get(a.offset as usize)).is_some_and(|r| r.payload == a.payload);
            if !ok {
                lost += 1;
            }
        }
        (lost, unverified)
    }

    pub fn elections(&self) -> usize {
        self.cluster.coordinator().outcomes.len()
    }

    pub fn live_leases(&self) -> Vec<Lease> {
        self.cluster.coordinator().registry().live(self.queue.now_ns())
    }

    /// JSON snapshot for `GET /api/state`.
    pub fn snapshot(&self) -> Value {
        let nodes: BTreeMap<&str, Value> = self
            .nodes
            .iter()
            .map(|n| {
                let p = n.last_pointing;
                (
                    n.role.as_str(),
                    json!({
                        "node_id": n.id,
                        "fix": n.ctrl.last_fix(),
                        "pointing_error_deg": p.map(|p| json!({"yaw": p.yaw_error_deg, "pitch": p.pitch_error_deg, "total": p.error_deg})),
                        "mount_bias_estimate_deg": n.ctrl.mount_bias_estimate_deg(),
                        "recalibrating": n.ctrl.is_recalibrating(),
                    }),
                )
            })
            .collect();
        json!({
            "status": self.status,
            "scenario": self.sc.name,
            "t_ns": self.queue.now_ns(),
            "leases": self.live_leases(),
            "nodes": nodes,
            "brokers": self.broker_health()["brokers"],
            "recording": {
                "enabled": self.rec.enabled,
                "gain_db": self.rec.gain_db,
                "segments": self.log.segments.len(),
            },
            "rtk": self.sc.rtk,
        })
    }

    /// Broker health values without the JSON wrapper.
    pub fn broker_statuses(&self) -> Vec<BrokerStatus> {
        self.cluster.broker_status()
    }

    /// Decoded telemetry in publish order.
    pub fn telemetry_messages(&self) -> Vec<TelemetryMessage> {
        self.log.telemetry.iter().filter_map(|p| serde_json::from_slice(p).ok()).collect()
    }
}
