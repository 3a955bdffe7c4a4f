use std::collections::BTreeMap;

use super::client::{ClientConfig, ClientEvent, MwClient};
use super::registry::{Lease, Role};
use super::timesync::{best_of, SyncSample};
use super::{
    ms, Addr, Broker, BrokerId, BrokerStatus, ClusterConfig, Coordinator, Envelope, Fabric, LogRecord, MwError, Outgoing, TimerKind,
    TopicMeta,
};
use crate::rng;
use crate::sim::Scheduler;

#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Deliver(Envelope),
    Timer { owner: Addr, kind: TimerKind },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scheduled {
    pub at_ns: i64,
    pub event: NetEvent,
}

/// Coordinator and brokers behind the latency fabric. The host owns the
/// clients and the event queue: it feeds every [`NetEvent`] not addressed to a
/// client back into [`Cluster::handle`].
#[derive(Debug, Clone)]
pub struct Cluster {
    cfg: ClusterConfig,
    coordinator: Coordinator,
    brokers: Vec<Broker>,
    fabric: Fabric,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig, seed: u64) -> Self {
        Self {
            cfg,
            coordinator: Coordinator::new(cfg),
            brokers: (0..cfg.brokers).map(|i| Broker::new(i, cfg)).collect(),
            fabric: Fabric::new(cfg.client_hop, cfg.cluster_hop, rng::stream(seed, rng::TAG_FABRIC)),
        }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn start(&mut self, now: i64) -> Vec<Scheduled> {
        let mut sched = Vec::new();
        let out = self.coordinator.start(now);
        sched.extend(self.route(now, Addr::Coordinator, out));
        for i in 0..self.brokers.len() {
            let out = self.brokers[i].start();
            sched.extend(self.route(now, Addr::Broker(i as BrokerId), out));
        }
        sched
    }

    /// Timestamps outgoing messages through the fabric and timers locally.
    pub fn route(&mut self, now: i64, from: Addr, out: Vec<Outgoing>) -> Vec<Scheduled> {
        out.into_iter()
            .map(|o| match o {
                Outgoing::Send { to, msg } => {
                    Scheduled { at_ns: now + self.fabric.delay_ns(from, to), event: NetEvent::Deliver(Envelope { from, to, msg }) }
                }
                Outgoing::Timer { after_ns, kind } => Scheduled { at_ns: now + after_ns, event: NetEvent::Timer { owner: from, kind } },
            })
            .collect()
    }

    pub fn handle(&mut self, now: i64, ev: NetEvent) -> Vec<Scheduled> {
        let (owner, out) = match ev {
            NetEvent::Deliver(env) => match env.to {
                Addr::Coordinator => (Addr::Coordinator, self.coordinator.handle(now, env)),
                Addr::Broker(b) => match self.brokers.get_mut(b as usize) {
                    Some(br) => (env.to, br.handle(now, env)),
                    None => return vec![],
                },
                Addr::Client(_) => return vec![],
            },
            NetEvent::Timer { owner, kind } => match owner {
                Addr::Coordinator => (owner, self.coordinator.on_timer(now, &kind)),
                Addr::Broker(b) => match self.brokers.get_mut(b as usize) {
                    Some(br) => (owner, br.on_timer(now, &kind)),
                    None => return vec![],
                },
                Addr::Client(_) => return vec![],
            },
        };
        self.route(now, owner, out)
    }

    pub fn create_topic(&mut self, now: i64, name: &str, rf: usize) -> Result<Vec<Scheduled>, MwError> {
        let out = self.coordinator.create_topic(name, rf)?;
        Ok(self.route(now, Addr::Coordinator, out))
    }

    /// Crash-stops a broker. Its log survives for a later restore.
    pub fn fail(&mut self, id: BrokerId) -> Result<(), MwError> {
        self.brokers.get_mut(id as usize).ok_or(MwError::UnknownBroker(id))?.fail();
        Ok(())
    }

    pub fn restore(&mut self, now: i64, id: BrokerId) -> Result<Vec<Scheduled>, MwError> {
        let b = self.brokers.get_mut(id as usize).ok_or(MwError::UnknownBroker(id))?;
        if b.is_live() {
            return Ok(vec![]);
        }
        let out = b.restore();
        Ok(self.route(now, Addr::Broker(id), out))
    }

    pub fn broker(&self, id: BrokerId) -> Option<&Broker> {
        self.brokers.get(id as usize)
    }

    pub fn brokers(&self) -> &[Broker] {
        &self.brokers
    }

    pub fn broker_status(&self) -> Vec<BrokerStatus> {
        self.brokers.iter().map(|b| b.status()).collect()
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn coordinator_mut(&mut self) -> &mut Coordinator {
        &mut self.coordinator
    }

    pub fn topic(&self, name: &str) -> Option<&TopicMeta> {
        self.coordinator.topic(name)
    }

    /// Leader as published by the coordinator, if that broker is live.
    pub fn leader_of(&self, topic: &str) -> Option<BrokerId> {
        self.topic(topic)?.leader.filter(|&l| self.brokers[l as usize].is_live())
    }
}

/// Synchronous facade over a [`Cluster`] in virtual time with one built-in
/// client. Each call runs the simulation until the operation completes.
#[derive(Debug, Clone)]
pub struct SimCluster {
    cluster: Cluster,
    queue: Scheduler<NetEvent>,
    client: MwClient,
    received: BTreeMap<String, BTreeMap<u64, LogRecord>>,
    events: Vec<ClientEvent>,
}

const SETTLE_MS: f64 = 5.0;

impl SimCluster {
    pub fn new(cfg: ClusterConfig, seed: u64) -> Self {
        Self::with_client(cfg, ClientConfig::default(), seed)
    }

    pub fn with_client(cfg: ClusterConfig, client_cfg: ClientConfig, seed: u64) -> Self {
        let mut cluster = Cluster::new(cfg, seed);
        let mut queue = Scheduler::new();
        for s in cluster.start(0) {
            queue.schedule(s.at_ns, s.event);
        }
        Self { cluster, queue, client: MwClient::new(0, client_cfg), received: BTreeMap::new(), events: Vec::new() }
    }

    pub fn now_ns(&self) -> i64 {
        self.queue.now_ns()
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn client_mut(&mut self) -> &mut MwClient {
        &mut self.client
    }

    pub fn coordinator_mut(&mut self) -> &mut Coordinator {
        self.cluster.coordinator_mut()
    }

    fn push(&mut self, sched: Vec<Scheduled>) {
        for s in sched {
            self.queue.schedule(s.at_ns, s.event);
        }
    }

    fn send(&mut self, out: Vec<Outgoing>) {
        let now = self.now_ns();
        let sched = self.cluster.route(now, self.client.addr(), out);
        self.push(sched);
    }

    fn step(&mut self) -> bool {
        let Some((now, ev)) = self.queue.pop() else { return false };
        let is_client = match &ev {
            NetEvent::Deliver(env) => env.to == self.client.addr(),
            NetEvent::Timer { owner, .. } => *owner == self.client.addr(),
        };
        if is_client {
            let (events, out) = match ev {
                NetEvent::Deliver(env) => self.client.handle(now, env),
                NetEvent::Timer { kind, .. } => self.client.on_timer(now, &kind),
            };
            for e in &events {
                if let ClientEvent::Records { topic, records } = e {
                    let buf = self.received.entry(topic.clone()).or_default();
                    for r in records {
                        buf.entry(r.offset).or_insert_with(|| r.clone());
                    }
                }
            }
            self.events.extend(events);
            self.send(out);
        } else {
            let sched = self.cluster.handle(now, ev);
            self.push(sched);
        }
        true
    }

    /// Runs until `done` matches a client event or `limit_ns` of virtual time
    /// has passed.
    fn run_until<T>(&mut self, limit_ns: i64, mut done: impl FnMut(&ClientEvent) -> Option<T>) -> Option<T> {
        let end = self.now_ns() + limit_ns;
        loop {
            if let Some(i) = self.events.iter().position(|e| done(e).is_some()) {
                let e = self.events.remove(i);
                return done(&e);
            }
            match self.queue.peek_time() {
                Some(t) if t <= end => {
                    self.step();
                }
                _ => {
                    self.queue.advance_to(end);
                    return None;
                }
            }
        }
    }

    pub fn advance(&mut self, duration_ns: i64) {
        let end = self.now_ns() + duration_ns;
        while self.queue.peek_time().is_some_and(|t| t <= end) {
            self.step();
        }
        self.queue.advance_to(end);
    }

    pub fn create_topic(&mut self, name: &str, rf: usize) -> Result<(), MwError> {
        let now = self.now_ns();
        let sched = self.cluster.create_topic(now, name, rf)?;
        self.push(sched);
        self.advance(ms(SETTLE_MS));
        Ok(())
    }

    /// Publishes and waits for the quorum acknowledgement; returns the offset.
    pub fn publish(&mut self, topic: &str, key: &[u8], payload: &[u8]) -> Result<u64, MwError> {
        let now = self.now_ns();
        let (token, out) = self.client.produce(now, topic, key.to_vec(), payload.to_vec());
        self.send(out);
        let limit = ms(self.client.config().produce_deadline_ms + self.client.config().request_timeout_ms * 2.0);
        self.run_until(limit, |e| match e {
            ClientEvent::Acked { token: t, offset, .. } if *t == token => Some(Ok(*offset)),
            ClientEvent::Failed { token: t, error, .. } if *t == token => Some(Err(error.clone())),
            _ => None,
        })
        .unwrap_or(Err(MwError::Timeout))
    }

    /// Committed records from `from` seen by the built-in subscriber. Runs the
    /// simulation for up to `wait_ns` if nothing new is available.
    pub fn poll(&mut self, topic: &str, from: u64, max: usize, wait_ns: i64) -> Result<Vec<LogRecord>, MwError> {
        if self.cluster.topic(topic).is_none() {
            return Err(MwError::NotFound(topic.to_string()));
        }
        if !self.received.contains_key(topic) {
            self.received.insert(topic.to_string(), BTreeMap::new());
            let now = self.now_ns();
            let out = self.client.subscribe(now, topic, 0);
            self.send(out);
        }
        let want = from.saturating_add(max as u64);
        let committed = self.cluster.leader_of(topic).and_then(|l| self.cluster.broker(l)?.high_watermark(topic)).unwrap_or(0).min(want);
        let caught_up = |s: &Self| (from..committed).all(|o| s.received[topic].contains_key(&o));
        let has_new = |s: &Self| s.received[topic].range(from..want).next().is_some();
        let end = self.now_ns() + wait_ns.max(0);
        let horizon = end + ms(1_000.0);
        // deliver everything committed at call time, then long-poll for more
        self.advance(ms(SETTLE_MS));
        while !caught_up(self) && self.now_ns() < horizon {
            self.advance(ms(SETTLE_MS));
        }
        while !has_new(self) && self.now_ns() < end {
            let step = (end - self.now_ns()).min(ms(SETTLE_MS));
            self.advance(step);
        }
        let mut next = from;
        Ok(self.received[topic]
            .range(from..want)
            .take_while(|(&o, _)| {
                let ok = o == next;
                next += 1;
                ok
            })
            .map(|(_, r)| r.clone())
            .collect())
    }

    pub fn fail(&mut self, id: BrokerId) -> Result<(), MwError> {
        self.cluster.fail(id)
    }

    pub fn restore(&mut self, id: BrokerId) -> Result<(), MwError> {
        let now = self.now_ns();
        let sched = self.cluster.restore(now, id)?;
        self.push(sched);
        Ok(())
    }

    pub fn leader_of(&self, topic: &str) -> Option<BrokerId> {
        self.cluster.leader_of(topic)
    }

    fn coordinator_call<T>(&mut self, out: (u64, Vec<Outgoing>), pick: impl Fn(u64, &ClientEvent) -> Option<T>) -> Result<T, MwError> {
        let (req, out) = out;
        self.send(out);
        let limit = ms(self.client.config().request_timeout_ms);
        self.run_until(limit, |e| pick(req, e)).ok_or(MwError::Timeout)
    }

    pub fn register(&mut self, node_id: &str, role: Role, endpoint: &str) -> Result<Lease, MwError> {
        let out = self.client.register(node_id, role, endpoint);
        self.coordinator_call(out, |req, e| match e {
            ClientEvent::Lease { req_id, result } if *req_id == req => Some(result.clone()),
            _ => None,
        })?
    }

    pub fn renew(&mut self, node_id: &str, lease_id: u64) -> Result<Lease, MwError> {
        let out = self.client.renew(node_id, lease_id);
        self.coordinator_call(out, |req, e| match e {
            ClientEvent::Lease { req_id, result } if *req_id == req => Some(result.clone()),
            _ => None,
        })?
    }

    pub fn lookup(&mut self, role: Role) -> Result<Vec<String>, MwError> {
        let out = self.client.lookup(role);
        self.coordinator_call(out, |req, e| match e {
            ClientEvent::Lookup { req_id, endpoints } if *req_id == req => Some(endpoints.clone()),
            _ => None,
        })
    }

    /// Runs `window` exchanges against the coordinator clock and returns the
    /// minimum-delay `(offset_ns, delay_ns)` estimate plus the raw samples.
    pub fn sync_clock(&mut self, window: usize) -> Result<((i64, i64), Vec<SyncSample>), MwError> {
        let mut samples = Vec::with_capacity(window);
        for _ in 0..window {
            let now = self.now_ns();
            let out = self.client.time_request(now);
            let s = self.coordinator_call(out, |req, e| match e {
                ClientEvent::Time { req_id, sample } if *req_id == req => Some(*sample),
                _ => None,
            })?;
            samples.push(s);
        }
        let best = best_of(&samples).ok_or(MwError::NegativeDelay)?;
        Ok((best, samples))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middleware::TOPIC_TELEMETRY_RX;

    #[test]
    fn publish_poll_roundtrip() {
        let mut c = SimCluster::new(ClusterConfig::default(), 7);
        c.create_topic(TOPIC_TELEMETRY_RX, 3).unwrap();
        for i in 0..5u8 {
            assert_eq!(c.publish(TOPIC_TELEMETRY_RX, b"", &[i]).unwrap(), i as u64);
        }
        let recs = c.poll(TOPIC_TELEMETRY_RX, 0, 10, ms(50.0)).unwrap();
        assert_eq!(recs.iter().map(|r| r.payload[0]).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(c.poll(TOPIC_TELEMETRY_RX, 3, 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn leader_failover_within_budget() {
        let cfg = ClusterConfig::default();
        let mut c = SimCluster::new(cfg, 3);
        c.create_topic("t", 3).unwrap();
        c.publish("t", b"", b"a").unwrap();
        let old = c.leader_of("t").unwrap();
        c.fail(old).unwrap();
        let t0 = c.now_ns();
        assert_eq!(c.publish("t", b"", b"b").unwrap(), 1);
        assert!(c.now_ns() - t0 <= ms(cfg.election_timeout_ms));
        assert_ne!(c.leader_of("t"), Some(old));
    }

    #[test]
    fn quorum_loss_is_unavailable_then_recovers() {
        let mut c = SimCluster::new(ClusterConfig::default(), 11);
        c.create_topic("t", 3).unwrap();
        c.publish("t", b"", b"a").unwrap();
        let replicas = c.cluster().topic("t").unwrap().replicas.clone();
        c.fail(replicas[1]).unwrap();
        c.fail(replicas[2]).unwrap();
        assert!(c.publish("t", b"", b"b").is_err());
        c.restore(replicas[2]).unwrap();
        c.advance(ms(400.0));
        let off = c.publish("t", b"", b"c").unwrap();
        let recs = c.poll("t", 0, 100, ms(200.0)).unwrap();
        assert_eq!(recs.last().unwrap().offset, off);
        assert_eq!(recs[0].payload, b"a");
    }

    #[test]
    fn restored_broker_catches_up() {
        let mut c = SimCluster::new(ClusterConfig::default(), 5);
        c.create_topic("t", 3).unwrap();
        let replicas = c.cluster().topic("t").unwrap().replicas.clone();
        c.fail(replicas[2]).unwrap();
        for i in 0..20u8 {
            c.publish("t", b"", &[i]).unwrap();
        }
        c.restore(replicas[2]).unwrap();
        c.advance(ms(500.0));
        let b = c.cluster().broker(replicas[2]).unwrap();
        assert_eq!(b.log("t").unwrap().len(), 20);
        assert_eq!(b.high_watermark("t"), Some(20));
    }

    #[test]
    fn registry_and_time() {
        let mut c = SimCluster::new(ClusterConfig::default(), 1);
        let lease = c.register("rx-1", Role::Rx, "sim://rx-1").unwrap();
        assert_eq!(c.lookup(Role::Rx).unwrap(), vec!["sim://rx-1".to_string()]);
        c.renew("rx-1", lease.lease_id).unwrap();
        c.advance(ms(6_000.0));
        assert!(matches!(c.renew("rx-1", lease.lease_id), Err(MwError::LeaseExpired(_))));

        c.coordinator_mut().clock_offset_ns = 123_456_789;
        c.client_mut().clock_offset_ns = -1_000_000;
        let ((off, delay), samples) = c.sync_clock(8).unwrap();
        assert_eq!(samples.len(), 8);
        // client hop jitter is +-0.5 ms each way: error bounded by half of it
        assert!((off - 124_456_789).abs() <= 500_000, "{off}");
        assert!(delay > 0);
    }
}
