use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::registry::Registry;
use super::{ms, quorum, Addr, BrokerId, ClusterConfig, Envelope, Message, MwError, Outgoing, TimerKind};

/// Coordinator's view of a topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMeta {
    pub name: String,
    pub replicas: Vec<BrokerId>,
    pub leader: Option<BrokerId>,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionCandidate {
    pub broker: BrokerId,
    /// Epoch of the candidate's last log record.
    pub last_epoch: u64,
    pub log_len: u64,
}

/// Most up-to-date log wins: newest last-record epoch, then longest log, then
/// lowest broker id.
///
/// Comparing the last epoch first matters only when two survivors hold
/// different uncommitted suffixes written under different leaders; length
/// alone could then pick the stale suffix over one holding acknowledged
/// records.
pub fn choose_leader(candidates: &[ElectionCandidate]) -> Option<BrokerId> {
    candidates
        .iter()
        .max_by(|a, b| (a.last_epoch, a.log_len).cmp(&(b.last_epoch, b.log_len)).then(b.broker.cmp(&a.broker)))
        .map(|c| c.broker)
}

/// A completed election, kept for inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionOutcome {
    pub topic: String,
    pub epoch: u64,
    pub t_ns: i64,
    pub candidates: Vec<ElectionCandidate>,
    pub leader: BrokerId,
}

const SESSION_CHECK_MS: f64 = 50.0;
const PROBE_DEADLINE_MS: f64 = 60.0;

#[derive(Debug, Clone)]
struct Election {
    epoch: u64,
    waiting: BTreeSet<BrokerId>,
    replies: Vec<ElectionCandidate>,
}

/// Cluster coordinator: broker sessions, topic metadata, leader elections,
/// the controller registry and the reference clock. Not itself subject to
/// faults.
#[derive(Debug, Clone)]
pub struct Coordinator {
    cfg: ClusterConfig,
    last_heartbeat: BTreeMap<BrokerId, i64>,
    incarnations: BTreeMap<BrokerId, u64>,
    live: BTreeSet<BrokerId>,
    topics: BTreeMap<String, TopicMeta>,
    elections: BTreeMap<String, Election>,
    registry: Registry,
    /// Reference clock minus simulation time.
    pub clock_offset_ns: i64,
    pub log: Vec<String>,
    pub outcomes: Vec<ElectionOutcome>,
}

impl Coordinator {
    pub fn new(cfg: ClusterConfig) -> Self {
        Self {
            cfg,
            last_heartbeat: BTreeMap::new(),
            incarnations: BTreeMap::new(),
            live: (0..cfg.brokers).collect(),
            topics: BTreeMap::new(),
            elections: BTreeMap::new(),
            registry: Registry::new(ms(cfg.lease_ttl_ms)),
            clock_offset_ns: 0,
            log: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    pub fn start(&mut self, now: i64) -> Vec<Outgoing> {
        for b in 0..self.cfg.brokers {
            self.last_heartbeat.insert(b, now);
        }
        vec![Outgoing::timer(ms(SESSION_CHECK_MS), TimerKind::SessionCheck)]
    }

    pub fn topic(&self, name: &str) -> Option<&TopicMeta> {
        self.topics.get(name)
    }

    pub fn topics(&self) -> impl Iterator<Item = &TopicMeta> {
        self.topics.values()
    }

    pub fn live_brokers(&self) -> Vec<BrokerId> {
        self.live.iter().copied().collect()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Places a new topic on `rf` live brokers, rotating the first replica
    /// (the initial leader) across topics.
    pub fn create_topic(&mut self, name: &str, rf: usize) -> Result<Vec<Outgoing>, MwError> {
        if self.topics.contains_key(name) {
            return Err(MwError::AlreadyExists(name.to_string()));
        }
        let live: Vec<BrokerId> = self.live.iter().copied().collect();
        if rf == 0 || rf > live.len() {
            return Err(MwError::Capacity { rf, live: live.len() });
        }
        let start = self.topics.len() % live.len();
        let replicas: Vec<BrokerId> = (0..rf).map(|i| live[(start + i) % live.len()]).collect();
        let meta = TopicMeta { name: name.to_string(), replicas: replicas.clone(), leader: Some(replicas[0]), epoch: 1 };
        let out = self.announce(&meta);
        self.topics.insert(name.to_string(), meta);
        Ok(out)
    }

    fn announce(&self, meta: &TopicMeta) -> Vec<Outgoing> {
        let Some(leader) = meta.leader else { return vec![] };
        meta.replicas
            .iter()
            .map(|&b| {
                Outgoing::send(
                    Addr::Broker(b),
                    Message::LeaderAndIsr { topic: meta.name.clone(), epoch: meta.epoch, leader, replicas: meta.replicas.clone() },
                )
            })
            .collect()
    }

    pub fn on_timer(&mut self, now: i64, kind: &TimerKind) -> Vec<Outgoing> {
        let mut out = Vec::new();
        match kind {
            TimerKind::SessionCheck => {
                let timeout = ms(self.cfg.session_timeout_ms);
                let expired: Vec<BrokerId> =
                    self.live.iter().copied().filter(|b| now - self.last_heartbeat.get(b).copied().unwrap_or(now) > timeout).collect();
                for b in expired {
                    self.live.remove(&b);
                    self.log.push(format!("{now}: broker {b} session expired"));
                }
                let names: Vec<String> = self.topics.keys().cloned().collect();
                for t in names {
                    let meta = &self.topics[&t];
                    let leader_down = meta.leader.is_some_and(|l| !self.live.contains(&l));
                    if (leader_down || meta.leader.is_none()) && !self.elections.contains_key(&t) {
                        self.start_election(now, &t, &mut out);
                    }
                }
                out.push(Outgoing::timer(ms(SESSION_CHECK_MS), TimerKind::SessionCheck));
            }
            TimerKind::ElectionDeadline { topic, epoch } if self.elections.get(topic).is_some_and(|e| e.epoch == *epoch) => {
                self.finish_election(now, topic, &mut out);
            }
            _ => {}
        }
        out
    }

    fn start_election(&mut self, now: i64, topic: &str, out: &mut Vec<Outgoing>) {
        let meta = self.topics.get_mut(topic).expect("known topic");
        let live: BTreeSet<BrokerId> = meta.replicas.iter().copied().filter(|b| self.live.contains(b)).collect();
        if live.len() < quorum(meta.replicas.len()) {
            if meta.leader.take().is_some() {
                meta.epoch += 1;
                self.log.push(format!("{now}: {topic} has no quorum; leaderless at epoch {}", meta.epoch));
            }
            return;
        }
        meta.epoch += 1;
        meta.leader = None;
        let epoch = meta.epoch;
        for &b in &live {
            out.push(Outgoing::send(Addr::Broker(b), Message::ElectionProbe { topic: topic.to_string(), epoch }));
        }
        out.push(Outgoing::timer(ms(PROBE_DEADLINE_MS), TimerKind::ElectionDeadline { topic: topic.to_string(), epoch }));
        self.log.push(format!("{now}: election for {topic} epoch {epoch} among {live:?}"));
        self.elections.insert(topic.to_string(), Election { epoch, waiting: live, replies: Vec::new() });
    }

    fn finish_election(&mut self, now: i64, topic: &str, out: &mut Vec<Outgoing>) {
        let Some(e) = self.elections.remove(topic) else { return };
        let meta = self.topics.get_mut(topic).expect("known topic");
        if e.replies.len() < quorum(meta.replicas.len()) {
            // retried from the next session check
            self.log.push(format!("{now}: election for {topic} epoch {} got {} replies", e.epoch, e.replies.len()));
            return;
        }
        let leader = choose_leader(&e.replies).expect("non-empty");
        meta.leader = Some(leader);
        self.log.push(format!("{now}: broker {leader} leads {topic} at epoch {}", meta.epoch));
        let meta = meta.clone();
        self.outcomes.push(ElectionOutcome { topic: topic.to_string(), epoch: meta.epoch, t_ns: now, candidates: e.replies, leader });
        out.extend(self.announce(&meta));
    }

    pub fn handle(&mut self, now: i64, env: Envelope) -> Vec<Outgoing> {
        let mut out = Vec::new();
        let from = env.from;
        let reply = |msg| Outgoing::send(from, msg);
        match env.msg {
            Message::Heartbeat { broker, incarnation } => {
                self.last_heartbeat.insert(broker, now);
                let restarted = self.incarnations.insert(broker, incarnation).is_some_and(|i| i != incarnation);
                // a restart shorter than the session timeout still lost its leadership
                if self.live.insert(broker) || restarted {
                    self.log.push(format!("{now}: broker {broker} rejoined"));
                    self.on_rejoin(now, broker, &mut out);
                }
            }
            Message::ProbeReply { topic, epoch, last_epoch, log_len } => {
                let Addr::Broker(b) = from else { return out };
                let done = match self.elections.get_mut(&topic) {
                    Some(e) if e.epoch == epoch && e.waiting.contains(&b) => {
                        e.waiting.remove(&b);
                        e.replies.push(ElectionCandidate { broker: b, last_epoch, log_len });
                        e.waiting.is_empty()
                    }
                    _ => false,
                };
                if done {
                    self.finish_election(now, &topic, &mut out);
                }
            }
            Message::Metadata { req_id, topic } => {
                let (leader, epoch) = self.topics.get(&topic).map_or((None, 0), |m| (m.leader, m.epoch));
                if self.topics.contains_key(&topic) {
                    out.push(reply(Message::MetadataResponse { req_id, topic, leader, epoch }));
                } else {
                    out.push(reply(Message::RequestError { req_id, topic: topic.clone(), error: MwError::NotFound(topic) }));
                }
            }
            Message::Register { req_id, node_id, role, endpoint } => {
                let lease = self.registry.register(&node_id, role, &endpoint, now);
                out.push(reply(Message::LeaseResponse { req_id, result: Ok(lease) }));
            }
            Message::Renew { req_id, node_id, lease_id } => {
                let result = self.registry.renew(&node_id, lease_id, now);
                out.push(reply(Message::LeaseResponse { req_id, result }));
            }
            Message::Lookup { req_id, role } => {
                let endpoints = self.registry.lookup(role, now);
                out.push(reply(Message::LookupResponse { req_id, endpoints }));
            }
            Message::TimeRequest { req_id, t1 } => {
                let t = now + self.clock_offset_ns;
                out.push(reply(Message::TimeResponse { req_id, t1, t2: t, t3: t }));
            }
            _ => {}
        }
        out
    }

    fn on_rejoin(&mut self, now: i64, broker: BrokerId, out: &mut Vec<Outgoing>) {
        let names: Vec<String> = self.topics.values().filter(|m| m.replicas.contains(&broker)).map(|m| m.name.clone()).collect();
        for t in names {
            let meta = self.topics[&t].clone();
            match meta.leader {
                Some(l) if l == broker => {
                    if !self.elections.contains_key(&t) {
                        self.start_election(now, &t, out);
                    }
                }
                Some(_) => out.extend(
                    self.announce(&meta).into_iter().filter(|o| matches!(o, Outgoing::Send { to: Addr::Broker(b), .. } if *b == broker)),
                ),
                None if !self.elections.contains_key(&t) => self.start_election(now, &t, out),
                None => {}
            }
        }
    }
}
