//! Replicated publish-subscribe broker cluster, coordinator, lease registry
//! and four-timestamp clock synchronization.
//!
//! Every component is a message-driven actor. Handlers never block: they take
//! the current time and an inbound [`Envelope`] and return [`Outgoing`]
//! messages and timers. [`Cluster`] timestamps those through the latency
//! [`Fabric`]; the hosting scheduler (deterministic virtual time, or a
//! wall-clock paced loop) delivers them.
//!
//! Replication is leader-based with quorum acknowledgement. Each topic lives on
//! `replication_factor` brokers; the leader appends, pushes to followers and
//! acknowledges a publish once `ceil((rf + 1) / 2)` replicas hold the record.
//! The coordinator watches broker heartbeats and, when a leader's session
//! expires, fences the surviving replicas, collects their log positions and
//! designates the most up-to-date one.

mod broker;
mod client;
mod cluster;
mod coordinator;
mod fabric;
pub mod faults;
pub mod gateway;
mod registry;
mod timesync;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use broker::{Broker, BrokerStatus};
pub use client::{ClientConfig, ClientEvent, MwClient, ProduceToken};
pub use cluster::{Cluster, NetEvent, Scheduled, SimCluster};
pub use coordinator::{choose_leader, Coordinator, ElectionCandidate, ElectionOutcome, TopicMeta};
pub use fabric::{Fabric, Latency};
pub use registry::{Lease, Registry, Role};
pub use timesync::{best_of, sync_offset, SyncSample};

pub type BrokerId = u32;
pub type ClientId = u32;

pub const TOPIC_TELEMETRY_TX: &str = "telemetry.tx";
pub const TOPIC_TELEMETRY_RX: &str = "telemetry.rx";
pub const TOPIC_COMMANDS: &str = "commands";
pub const TOPIC_EVENTS: &str = "events";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Addr {
    Coordinator,
    Broker(BrokerId),
    Client(ClientId),
}

/// An entry of a topic log. Offsets are contiguous from zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub topic: String,
    pub offset: u64,
    /// Leader epoch in which the record was appended.
    pub epoch: u64,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
    pub append_t_ns: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MwError {
    #[error("topic `{0}` already exists")]
    AlreadyExists(String),
    #[error("replication factor {rf} exceeds {live} live brokers")]
    Capacity { rf: usize, live: usize },
    #[error("topic `{0}` not found")]
    NotFound(String),
    #[error("no leader for `{0}` (election in progress or quorum lost)")]
    Unavailable(String),
    #[error("broker {0} is not the leader")]
    NotLeader(BrokerId),
    #[error("request timed out")]
    Timeout,
    #[error("unknown broker {0}")]
    UnknownBroker(BrokerId),
    #[error("lease for `{0}` expired; re-register")]
    LeaseExpired(String),
    #[error("sample rejected: negative path delay")]
    NegativeDelay,
    #[error("{0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub brokers: u32,
    pub replication_factor: usize,
    pub heartbeat_ms: f64,
    pub session_timeout_ms: f64,
    /// Upper bound on leader failover, fault to first acknowledged publish.
    pub election_timeout_ms: f64,
    pub replica_tick_ms: f64,
    pub lease_ttl_ms: f64,
    /// Client to broker / coordinator hop.
    pub client_hop: Latency,
    /// Broker to broker / coordinator hop inside the cluster.
    pub cluster_hop: Latency,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            brokers: 4,
            replication_factor: 3,
            heartbeat_ms: 100.0,
            session_timeout_ms: 300.0,
            election_timeout_ms: 500.0,
            replica_tick_ms: 50.0,
            lease_ttl_ms: 5_000.0,
            client_hop: Latency::new(2.0, 0.5),
            cluster_hop: Latency::new(0.5, 0.1),
        }
    }
}

pub fn quorum(rf: usize) -> usize {
    rf / 2 + 1
}

pub(crate) fn ms(v: f64) -> i64 {
    (v * 1e6).round() as i64
}

/// Everything that travels between actors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    // client -> leader
    Produce { req_id: u64, topic: String, key: Vec<u8>, payload: Vec<u8> },
    ProduceAck { req_id: u64, topic: String, offset: u64 },
    Fetch { req_id: u64, topic: String, from: u64, max: usize, wait_ms: f64 },
    FetchResponse { req_id: u64, topic: String, records: Vec<LogRecord>, high_watermark: u64 },
    RequestError { req_id: u64, topic: String, error: MwError },

    // leader <-> follower
    Replicate { topic: String, epoch: u64, prev_len: u64, prev_epoch: u64, records: Vec<LogRecord>, leader_hw: u64 },
    ReplicateAck { topic: String, epoch: u64, matched_len: u64, ok: bool },

    // broker <-> coordinator
    Heartbeat { broker: BrokerId, incarnation: u64 },
    ElectionProbe { topic: String, epoch: u64 },
    ProbeReply { topic: String, epoch: u64, last_epoch: u64, log_len: u64 },
    LeaderAndIsr { topic: String, epoch: u64, leader: BrokerId, replicas: Vec<BrokerId> },

    // client <-> coordinator
    Metadata { req_id: u64, topic: String },
    MetadataResponse { req_id: u64, topic: String, leader: Option<BrokerId>, epoch: u64 },
    Register { req_id: u64, node_id: String, role: Role, endpoint: String },
    Renew { req_id: u64, node_id: String, lease_id: u64 },
    LeaseResponse { req_id: u64, result: Result<Lease, MwError> },
    Lookup { req_id: u64, role: Role },
    LookupResponse { req_id: u64, endpoints: Vec<String> },
    TimeRequest { req_id: u64, t1: i64 },
    TimeResponse { req_id: u64, t1: i64, t2: i64, t3: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: Addr,
    pub to: Addr,
    pub msg: Message,
}

/// Actor-local timers. `incarnation` lets a restored broker ignore timers
/// armed before it failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimerKind {
    Heartbeat { incarnation: u64 },
    ReplicaTick { incarnation: u64 },
    FetchExpiry { incarnation: u64, req_id: u64 },
    SessionCheck,
    ElectionDeadline { topic: String, epoch: u64 },
    ClientTimeout { req_id: u64 },
    ClientRetry { topic: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outgoing {
    Send { to: Addr, msg: Message },
    Timer { after_ns: i64, kind: TimerKind },
}

impl Outgoing {
    pub fn send(to: Addr, msg: Message) -> Self {
        Outgoing::Send { to, msg }
    }

    pub fn timer(after_ns: i64, kind: TimerKind) -> Self {
        Outgoing::Timer { after_ns, kind }
    }
}
