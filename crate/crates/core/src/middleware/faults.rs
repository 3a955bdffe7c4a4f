//! Randomized single-broker fault schedules against a live producer and
//! consumer, with the safety and availability checks the cluster must pass.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::client::{ClientConfig, ClientEvent, MwClient};
use super::cluster::{Cluster, NetEvent};
use super::{ms, Addr, BrokerId, ClusterConfig};
use crate::rng;
use crate::sim::Scheduler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    Fail,
    Restore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at_ns: i64,
    pub broker: BrokerId,
    pub action: FaultAction,
    /// Whether the broker led the topic when it failed.
    pub was_leader: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultReport {
    pub seed: u64,
    pub faults: Vec<FaultEvent>,
    pub published: usize,
    pub acked: usize,
    /// Acknowledged records missing from (or different in) the final log.
    pub lost: usize,
    /// Consumer saw a gap, reordering, or a record disagreeing with the log.
    pub prefix_violations: usize,
    /// Live replicas disagreeing below their high-watermark.
    pub replica_divergence: usize,
    /// Longest wait from a broker failure to the next acknowledgement.
    pub max_unavailable_ns: i64,
}

impl FaultReport {
    pub fn safe(&self) -> bool {
        self.lost == 0 && self.prefix_violations == 0 && self.replica_divergence == 0
    }
}

const TOPIC: &str = "faults";
const PUBLISH_EVERY_MS: f64 = 10.0;
const RUN_MS: f64 = 4_000.0;
const SETTLE_MS: f64 = 1_500.0;

enum Ev {
    Net(NetEvent),
    Publish,
    Fault(BrokerId, FaultAction),
}

/// Runs one seeded schedule: one to three non-overlapping outages of a single
/// broker (half of them aimed at the current leader) while a producer
/// publishes every 10 ms and a consumer tails the topic.
pub fn run_fault_schedule(cfg: ClusterConfig, seed: u64) -> FaultReport {
    let mut frng = rng::stream(seed, rng::TAG_FAULTS);
    let mut cluster = Cluster::new(cfg, seed);
    let mut q: Scheduler<Ev> = Scheduler::new();
    for s in cluster.start(0) {
        q.schedule(s.at_ns, Ev::Net(s.event));
    }
    for s in cluster.create_topic(0, TOPIC, cfg.replication_factor).expect("fresh cluster") {
        q.schedule(s.at_ns, Ev::Net(s.event));
    }
    let client_cfg = ClientConfig::default();
    let mut producer = MwClient::new(1, client_cfg);
    let mut consumer = MwClient::new(2, client_cfg);
    for s in cluster.route(0, consumer.addr(), consumer.subscribe(0, TOPIC, 0)) {
        q.schedule(s.at_ns, Ev::Net(s.event));
    }
    q.schedule(ms(20.0), Ev::Publish);

    // outage windows; the failed broker is chosen when the window opens
    let n = frng.gen_range(1..=3);
    let mut t = ms(200.0);
    let mut windows = Vec::new();
    for _ in 0..n {
        let start = t + ms(frng.gen_range(0.0..600.0));
        if start > ms(RUN_MS - 700.0) {
            // leave room to observe recovery while still publishing
            break;
        }
        let len = ms(frng.gen_range(100.0..1_200.0));
        windows.push((start, start + len, frng.gen_bool(0.5), frng.gen_range(0..cfg.brokers)));
        t = start + len + ms(frng.gen_range(50.0..400.0));
    }
    let mut pending_windows = windows.into_iter();
    let mut next_window = pending_windows.next();
    if let Some((s, ..)) = next_window {
        q.schedule(s, Ev::Fault(0, FaultAction::Fail));
    }

    let mut faults = Vec::new();
    let mut payloads: BTreeMap<u64, Vec<u8>> = BTreeMap::new(); // token -> payload
    let mut acked: Vec<(u64, Vec<u8>, i64)> = Vec::new(); // offset, payload, ack time
    let mut consumed = Vec::new();
    let mut published = 0usize;
    let end = ms(RUN_MS + SETTLE_MS);

    while let Some((now, ev)) = q.pop_until(end) {
        match ev {
            Ev::Publish => {
                if now < ms(RUN_MS) {
                    let payload = published.to_le_bytes().to_vec();
                    published += 1;
                    let (tok, out) = producer.produce(now, TOPIC, Vec::new(), payload.clone());
                    payloads.insert(tok.0, payload);
                    for s in cluster.route(now, producer.addr(), out) {
                        q.schedule(s.at_ns, Ev::Net(s.event));
                    }
                    q.schedule(now + ms(PUBLISH_EVERY_MS), Ev::Publish);
                }
            }
            Ev::Fault(_, FaultAction::Fail) => {
                let (_, stop, target_leader, pick) = next_window.expect("scheduled window");
                let leader = cluster.leader_of(TOPIC);
                let b = match (target_leader, leader) {
                    (true, Some(l)) => l,
                    _ => pick,
                };
                cluster.fail(b).expect("known broker");
                faults.push(FaultEvent { at_ns: now, broker: b, action: FaultAction::Fail, was_leader: leader == Some(b) });
                q.schedule(stop, Ev::Fault(b, FaultAction::Restore));
            }
            Ev::Fault(b, FaultAction::Restore) => {
                for s in cluster.restore(now, b).expect("known broker") {
                    q.schedule(s.at_ns, Ev::Net(s.event));
                }
                faults.push(FaultEvent { at_ns: now, broker: b, action: FaultAction::Restore, was_leader: false });
                next_window = pending_windows.next();
                if let Some((s, ..)) = next_window {
                    q.schedule(s, Ev::Fault(0, FaultAction::Fail));
                }
            }
            Ev::Net(ne) => {
                let target = match &ne {
                    NetEvent::Deliver(env) => env.to,
                    NetEvent::Timer { owner, .. } => *owner,
                };
                let client = match target {
                    Addr::Client(1) => Some(&mut producer),
                    Addr::Client(2) => Some(&mut consumer),
                    _ => None,
                };
                let Some(c) = client else {
                    for s in cluster.handle(now, ne) {
                        q.schedule(s.at_ns, Ev::Net(s.event));
                    }
                    continue;
                };
                let addr = c.addr();
                let (events, out) = match ne {
                    NetEvent::Deliver(env) => c.handle(now, env),
                    NetEvent::Timer { kind, .. } => c.on_timer(now, &kind),
                };
                for s in cluster.route(now, addr, out) {
                    q.schedule(s.at_ns, Ev::Net(s.event));
                }
                for e in events {
                    match e {
                        ClientEvent::Acked { token, offset, ack_t_ns, .. } => {
                            acked.push((offset, payloads[&token.0].clone(), ack_t_ns));
                        }
                        ClientEvent::Records { records, .. } => consumed.extend(records),
                        _ => {}
                    }
                }
            }
        }
    }

    // safety: the final leader's committed log holds every acked record
    let leader = cluster.leader_of(TOPIC);
    let final_log: Vec<_> = leader.and_then(|l| cluster.broker(l)?.log(TOPIC).map(|l| l.to_vec())).unwrap_or_default();
    let final_hw = leader.and_then(|l| cluster.broker(l)?.high_watermark(TOPIC)).unwrap_or(0);
    let lost = acked
        .iter()
        .filter(|(off, payload, _)| *off >= final_hw || final_log.get(*off as usize).is_none_or(|r| &r.payload != payload))
        .count();

    let mut prefix_violations = 0;
    for (i, r) in consumed.iter().enumerate() {
        let in_order = r.offset == i as u64;
        let matches = final_log.get(r.offset as usize).is_some_and(|f| f.payload == r.payload && f.epoch == r.epoch);
        if !in_order || !matches {
            prefix_violations += 1;
        }
    }

    let mut replica_divergence = 0;
    for b in cluster.brokers().iter().filter(|b| b.is_live()) {
        if let (Some(log), Some(hw)) = (b.log(TOPIC), b.high_watermark(TOPIC)) {
            let upto = hw.min(final_hw) as usize;
            if log.len() < upto || log[..upto] != final_log[..upto] {
                replica_divergence += 1;
            }
        }
    }

    let max_unavailable_ns = faults
        .iter()
        .filter(|f| f.action == FaultAction::Fail)
        .map(|f| acked.iter().map(|&(_, _, t)| t).find(|&t| t > f.at_ns).map_or(end - f.at_ns, |t| t - f.at_ns))
        .max()
        .unwrap_or(0);

    FaultReport { seed, faults, published, acked: acked.len(), lost, prefix_violations, replica_divergence, max_unavailable_ns }
}
