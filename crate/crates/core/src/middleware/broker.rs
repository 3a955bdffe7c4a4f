use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ms, quorum, Addr, BrokerId, ClusterConfig, Envelope, LogRecord, Message, MwError, Outgoing, TimerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokerStatus {
    Live,
    Failed,
}

const MAX_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
enum ReplicaRole {
    /// No leader known for the current epoch (fenced during an election, or
    /// freshly restored).
    Fenced,
    Follower(BrokerId),
    Leader {
        /// Per follower: confirmed matching log length.
        matched: BTreeMap<BrokerId, u64>,
        /// Per follower: next length to send from.
        next: BTreeMap<BrokerId, u64>,
    },
}

#[derive(Debug, Clone)]
struct Replica {
    log: Vec<LogRecord>,
    high_watermark: u64,
    epoch: u64,
    replicas: Vec<BrokerId>,
    role: ReplicaRole,
    /// offset -> (client, req_id) awaiting commit
    pending_acks: BTreeMap<u64, (Addr, u64)>,
}

impl Replica {
    fn new() -> Self {
        Self {
            log: Vec::new(),
            high_watermark: 0,
            epoch: 0,
            replicas: Vec::new(),
            role: ReplicaRole::Fenced,
            pending_acks: BTreeMap::new(),
        }
    }

    fn len(&self) -> u64 {
        self.log.len() as u64
    }

    fn last_epoch(&self) -> u64 {
        self.log.last().map_or(0, |r| r.epoch)
    }

    fn epoch_at_len(&self, len: u64) -> u64 {
        if len == 0 {
            0
        } else {
            self.log[len as usize - 1].epoch
        }
    }
}

#[derive(Debug, Clone)]
struct ParkedFetch {
    client: Addr,
    req_id: u64,
    topic: String,
    from: u64,
    max: usize,
}

/// A broker hosting topic replicas. Logs and high-watermarks survive a
/// failure; leadership, parked fetches and pending acknowledgements do not.
#[derive(Debug, Clone)]
pub struct Broker {
    pub id: BrokerId,
    status: BrokerStatus,
    incarnation: u64,
    topics: BTreeMap<String, Replica>,
    parked: BTreeMap<u64, ParkedFetch>,
    next_park: u64,
    cfg: ClusterConfig,
}

impl Broker {
    pub fn new(id: BrokerId, cfg: ClusterConfig) -> Self {
        Self { id, status: BrokerStatus::Live, incarnation: 0, topics: BTreeMap::new(), parked: BTreeMap::new(), next_park: 0, cfg }
    }

    pub fn status(&self) -> BrokerStatus {
        self.status
    }

    pub fn is_live(&self) -> bool {
        self.status == BrokerStatus::Live
    }

    /// Timers that drive a live broker.
    pub fn start(&mut self) -> Vec<Outgoing> {
        vec![
            Outgoing::send(Addr::Coordinator, Message::Heartbeat { broker: self.id, incarnation: self.incarnation }),
            Outgoing::timer(ms(self.cfg.heartbeat_ms), TimerKind::Heartbeat { incarnation: self.incarnation }),
            Outgoing::timer(ms(self.cfg.replica_tick_ms), TimerKind::ReplicaTick { incarnation: self.incarnation }),
        ]
    }

    pub fn fail(&mut self) {
        self.status = BrokerStatus::Failed;
        self.incarnation += 1;
        self.parked.clear();
        for r in self.topics.values_mut() {
            r.role = ReplicaRole::Fenced;
            r.pending_acks.clear();
        }
    }

    pub fn restore(&mut self) -> Vec<Outgoing> {
        self.status = BrokerStatus::Live;
        self.incarnation += 1;
        self.start()
    }

    pub fn log(&self, topic: &str) -> Option<&[LogRecord]> {
        self.topics.get(topic).map(|r| r.log.as_slice())
    }

    pub fn high_watermark(&self, topic: &str) -> Option<u64> {
        self.topics.get(topic).map(|r| r.high_watermark)
    }

    pub fn is_leader(&self, topic: &str) -> bool {
        self.is_live() && matches!(self.topics.get(topic).map(|r| &r.role), Some(ReplicaRole::Leader { .. }))
    }

    pub fn epoch(&self, topic: &str) -> Option<u64> {
        self.topics.get(topic).map(|r| r.epoch)
    }

    pub fn topics(&self) -> impl Iterator<Item = &str> {
        self.topics.keys().map(|s| s.as_str())
    }

    pub fn on_timer(&mut self, now: i64, kind: &TimerKind) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if !self.is_live() {
            return out;
        }
        match *kind {
            TimerKind::Heartbeat { incarnation } if incarnation == self.incarnation => {
                out.push(Outgoing::send(Addr::Coordinator, Message::Heartbeat { broker: self.id, incarnation: self.incarnation }));
                out.push(Outgoing::timer(ms(self.cfg.heartbeat_ms), TimerKind::Heartbeat { incarnation }));
            }
            TimerKind::ReplicaTick { incarnation } if incarnation == self.incarnation => {
                let names: Vec<String> = self.topics.keys().cloned().collect();
                for t in names {
                    self.replicate_all(&t, true, &mut out);
                }
                out.push(Outgoing::timer(ms(self.cfg.replica_tick_ms), TimerKind::ReplicaTick { incarnation }));
            }
            TimerKind::FetchExpiry { incarnation, req_id } if incarnation == self.incarnation => {
                if let Some(p) = self.parked.remove(&req_id) {
                    let hw = self.topics.get(&p.topic).map_or(0, |r| r.high_watermark);
                    out.push(Outgoing::send(
                        p.client,
                        Message::FetchResponse { req_id: p.req_id, topic: p.topic, records: vec![], high_watermark: hw },
                    ));
                }
            }
            _ => {}
        }
        let _ = now;
        out
    }

    pub fn handle(&mut self, now: i64, env: Envelope) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if !self.is_live() {
            return out;
        }
        let from = env.from;
        match env.msg {
            Message::Produce { req_id, topic, key, payload } => self.on_produce(now, from, req_id, topic, key, payload, &mut out),
            Message::Fetch { req_id, topic, from: offset, max, wait_ms } => {
                self.on_fetch(from, req_id, topic, offset, max, wait_ms, &mut out)
            }
            Message::Replicate { topic, epoch, prev_len, prev_epoch, records, leader_hw } => {
                self.on_replicate(from, topic, epoch, prev_len, prev_epoch, records, leader_hw, &mut out)
            }
            Message::ReplicateAck { topic, epoch, matched_len, ok } => {
                if let Addr::Broker(f) = from {
                    self.on_replicate_ack(f, &topic, epoch, matched_len, ok, &mut out);
                }
            }
            Message::ElectionProbe { topic, epoch } => {
                let r = self.topics.entry(topic.clone()).or_insert_with(Replica::new);
                if epoch >= r.epoch {
                    r.epoch = epoch;
                    r.role = ReplicaRole::Fenced;
                    r.pending_acks.clear();
                }
                out.push(Outgoing::send(
                    Addr::Coordinator,
                    Message::ProbeReply { topic, epoch, last_epoch: r.last_epoch(), log_len: r.len() },
                ));
            }
            Message::LeaderAndIsr { topic, epoch, leader, replicas } => self.on_leader_and_isr(topic, epoch, leader, replicas, &mut out),
            _ => {}
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn on_produce(&mut self, now: i64, client: Addr, req_id: u64, topic: String, key: Vec<u8>, payload: Vec<u8>, out: &mut Vec<Outgoing>) {
        let id = self.id;
        let Some(r) = self.topics.get_mut(&topic) else {
            out.push(Outgoing::send(client, Message::RequestError { req_id, topic: topic.clone(), error: MwError::NotFound(topic) }));
            return;
        };
        if !matches!(r.role, ReplicaRole::Leader { .. }) {
            out.push(Outgoing::send(client, Message::RequestError { req_id, topic, error: MwError::NotLeader(id) }));
            return;
        }
        let offset = r.len();
        r.log.push(LogRecord { topic: topic.clone(), offset, epoch: r.epoch, key, payload, append_t_ns: now });
        r.pending_acks.insert(offset, (client, req_id));
        self.replicate_all(&topic, false, out);
        // a single-replica topic commits on append
        self.advance_hw(&topic, out);
    }

    /// Pushes unsent records to every follower; with `resend`, restarts each
    /// follower from its confirmed position (also carries the high-watermark).
    fn replicate_all(&mut self, topic: &str, resend: bool, out: &mut Vec<Outgoing>) {
        let Some(r) = self.topics.get_mut(topic) else { return };
        let epoch = r.epoch;
        let hw = r.high_watermark;
        let len = r.len();
        let ReplicaRole::Leader { matched, next } = &mut r.role else { return };
        let mut sends = Vec::new();
        for (&f, nx) in next.iter_mut() {
            if resend {
                *nx = matched[&f];
            } else if *nx >= len {
                continue;
            }
            let start = *nx;
            let end = (start + MAX_BATCH as u64).min(len);
            sends.push((f, start, end));
            *nx = end;
        }
        for (f, start, end) in sends {
            out.push(Outgoing::send(
                Addr::Broker(f),
                Message::Replicate {
                    topic: topic.to_string(),
                    epoch,
                    prev_len: start,
                    prev_epoch: r.epoch_at_len(start),
                    records: r.log[start as usize..end as usize].to_vec(),
                    leader_hw: hw,
                },
            ));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_replicate(
        &mut self,
        from: Addr,
        topic: String,
        epoch: u64,
        prev_len: u64,
        prev_epoch: u64,
        records: Vec<LogRecord>,
        leader_hw: u64,
        out: &mut Vec<Outgoing>,
    ) {
        let Addr::Broker(leader) = from else { return };
        let r = self.topics.entry(topic.clone()).or_insert_with(Replica::new);
        if epoch < r.epoch {
            return;
        }
        if epoch > r.epoch || matches!(r.role, ReplicaRole::Fenced) {
            // the leader of a newer epoch reached us before the coordinator did
            r.epoch = epoch;
            r.role = ReplicaRole::Follower(leader);
            r.pending_acks.clear();
        }
        if !matches!(r.role, ReplicaRole::Follower(l) if l == leader) {
            return;
        }
        let nack = |len: u64| Outgoing::send(from, Message::ReplicateAck { topic: topic.clone(), epoch, matched_len: len, ok: false });
        if prev_len > r.len() {
            out.push(nack(r.len()));
            return;
        }
        if r.epoch_at_len(prev_len) != prev_epoch {
            // conflicting suffix from an older epoch; it can never be committed
            let keep = (prev_len - 1).max(r.high_watermark);
            r.log.truncate(keep as usize);
            out.push(nack(keep));
            return;
        }
        let mut pos = prev_len;
        for rec in records {
            let i = pos as usize;
            if i < r.log.len() {
                if r.log[i].epoch != rec.epoch {
                    r.log.truncate(i);
                    r.log.push(rec);
                }
            } else {
                r.log.push(rec);
            }
            pos += 1;
        }
        r.high_watermark = r.high_watermark.max(leader_hw.min(pos));
        out.push(Outgoing::send(from, Message::ReplicateAck { topic, epoch, matched_len: pos, ok: true }));
    }

    fn on_replicate_ack(&mut self, follower: BrokerId, topic: &str, epoch: u64, matched_len: u64, ok: bool, out: &mut Vec<Outgoing>) {
        let Some(r) = self.topics.get_mut(topic) else { return };
        if epoch != r.epoch {
            return;
        }
        let len = r.len();
        let ReplicaRole::Leader { matched, next } = &mut r.role else { return };
        let Some(m) = matched.get_mut(&follower) else { return };
        if ok {
            *m = (*m).max(matched_len.min(len));
            let n = next.get_mut(&follower).expect("next tracked with matched");
            *n = (*n).max(*m);
            self.advance_hw(topic, out);
            // keep a lagging follower moving without waiting for the tick
            self.replicate_all(topic, false, out);
        } else {
            *m = (*m).min(matched_len);
            next.insert(follower, matched_len.min(len));
            self.replicate_all(topic, false, out);
        }
    }

    fn advance_hw(&mut self, topic: &str, out: &mut Vec<Outgoing>) {
        let Some(r) = self.topics.get_mut(topic) else { return };
        let ReplicaRole::Leader { matched, .. } = &r.role else { return };
        let mut lens: Vec<u64> = matched.values().copied().collect();
        lens.push(r.len());
        lens.sort_unstable_by(|a, b| b.cmp(a));
        let q = quorum(r.replicas.len().max(1));
        let candidate = lens[q - 1];
        // only records of the current epoch commit by counting replicas
        if candidate > r.high_watermark && r.epoch_at_len(candidate) == r.epoch {
            r.high_watermark = candidate;
        }
        let hw = r.high_watermark;
        let done: Vec<u64> = r.pending_acks.range(..hw).map(|(o, _)| *o).collect();
        for offset in done {
            let (client, req_id) = r.pending_acks.remove(&offset).expect("present");
            out.push(Outgoing::send(client, Message::ProduceAck { req_id, topic: topic.to_string(), offset }));
        }
        self.serve_parked(topic, out);
    }

    fn serve_parked(&mut self, topic: &str, out: &mut Vec<Outgoing>) {
        let Some(r) = self.topics.get(topic) else { return };
        let hw = r.high_watermark;
        let ready: Vec<u64> = self.parked.iter().filter(|(_, p)| p.topic == topic && p.from < hw).map(|(k, _)| *k).collect();
        for k in ready {
            let p = self.parked.remove(&k).expect("present");
            let end = hw.min(p.from + p.max as u64);
            out.push(Outgoing::send(
                p.client,
                Message::FetchResponse {
                    req_id: p.req_id,
                    topic: p.topic,
                    records: r.log[p.from as usize..end as usize].to_vec(),
                    high_watermark: hw,
                },
            ));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_fetch(&mut self, client: Addr, req_id: u64, topic: String, from: u64, max: usize, wait_ms: f64, out: &mut Vec<Outgoing>) {
        let id = self.id;
        let Some(r) = self.topics.get(&topic) else {
            out.push(Outgoing::send(client, Message::RequestError { req_id, topic: topic.clone(), error: MwError::NotFound(topic) }));
            return;
        };
        if !matches!(r.role, ReplicaRole::Leader { .. }) {
            out.push(Outgoing::send(client, Message::RequestError { req_id, topic, error: MwError::NotLeader(id) }));
            return;
        }
        let hw = r.high_watermark;
        if from < hw || wait_ms <= 0.0 || max == 0 {
            let end = hw.min(from.saturating_add(max as u64));
            let records = if from < end { r.log[from as usize..end as usize].to_vec() } else { vec![] };
            out.push(Outgoing::send(client, Message::FetchResponse { req_id, topic, records, high_watermark: hw }));
            return;
        }
        let key = self.next_park;
        self.next_park += 1;
        self.parked.insert(key, ParkedFetch { client, req_id, topic, from, max });
        out.push(Outgoing::timer(ms(wait_ms), TimerKind::FetchExpiry { incarnation: self.incarnation, req_id: key }));
    }

    fn on_leader_and_isr(&mut self, topic: String, epoch: u64, leader: BrokerId, replicas: Vec<BrokerId>, out: &mut Vec<Outgoing>) {
        let id = self.id;
        let r = self.topics.entry(topic.clone()).or_insert_with(Replica::new);
        if epoch < r.epoch {
            return;
        }
        let already = r.epoch == epoch
            && match &r.role {
                ReplicaRole::Leader { .. } => leader == id,
                ReplicaRole::Follower(l) => *l == leader,
                ReplicaRole::Fenced => false,
            };
        r.replicas = replicas.clone();
        if already {
            return;
        }
        r.epoch = epoch;
        r.pending_acks.clear();
        if leader == id {
            let followers: Vec<BrokerId> = replicas.iter().copied().filter(|&b| b != id).collect();
            r.role = ReplicaRole::Leader {
                matched: followers.iter().map(|&f| (f, 0)).collect(),
                next: followers.iter().map(|&f| (f, r.log.len() as u64)).collect(),
            };
            // probe followers right away so they learn the new epoch
            self.replicate_all(&topic, false, out);
            let r = self.topics.get(&topic).expect("present");
            let len = r.len();
            for &f in &followers {
                out.push(Outgoing::send(
                    Addr::Broker(f),
                    Message::Replicate {
                        topic: topic.clone(),
                        epoch,
                        prev_len: len,
                        prev_epoch: r.epoch_at_len(len),
                        records: vec![],
                        leader_hw: r.high_watermark,
                    },
                ));
            }
        } else {
            r.role = ReplicaRole::Follower(leader);
            // a demoted leader's parked consumers must go to the new leader
            let stale: Vec<u64> = self.parked.iter().filter(|(_, p)| p.topic == topic).map(|(k, _)| *k).collect();
            for k in stale {
                let p = self.parked.remove(&k).expect("present");
                out.push(Outgoing::send(
                    p.client,
                    Message::RequestError { req_id: p.req_id, topic: p.topic, error: MwError::NotLeader(id) },
                ));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(from: Addr, to: BrokerId, msg: Message) -> Envelope {
        Envelope { from, to: Addr::Broker(to), msg }
    }

    fn sends(out: &[Outgoing]) -> Vec<(Addr, &Message)> {
        out.iter()
            .filter_map(|o| match o {
                Outgoing::Send { to, msg } => Some((*to, msg)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn follower_truncates_conflicting_suffix() {
        let cfg = ClusterConfig::default();
        let mut b = Broker::new(1, cfg);
        let rec = |o, e| LogRecord { topic: "t".into(), offset: o, epoch: e, key: vec![], payload: vec![o as u8], append_t_ns: 0 };
        let lai = |e| Message::LeaderAndIsr { topic: "t".into(), epoch: e, leader: 0, replicas: vec![0, 1, 2] };
        b.handle(0, env(Addr::Coordinator, 1, lai(1)));
        let rep = Message::Replicate {
            topic: "t".into(),
            epoch: 1,
            prev_len: 0,
            prev_epoch: 0,
            records: vec![rec(0, 1), rec(1, 1), rec(2, 1)],
            leader_hw: 1,
        };
        b.handle(0, env(Addr::Broker(0), 1, rep));
        assert_eq!(b.log("t").unwrap().len(), 3);
        assert_eq!(b.high_watermark("t"), Some(1));

        // new leader (broker 2, epoch 2) wrote a different record at offset 2
        let rep2 = Message::Replicate { topic: "t".into(), epoch: 2, prev_len: 3, prev_epoch: 2, records: vec![], leader_hw: 2 };
        let out = b.handle(0, env(Addr::Broker(2), 1, rep2));
        assert_eq!(b.log("t").unwrap().len(), 2);
        match sends(&out)[0].1 {
            Message::ReplicateAck { ok: false, matched_len: 2, .. } => {}
            m => panic!("unexpected {m:?}"),
        }
    }

    #[test]
    fn failed_broker_ignores_traffic() {
        let mut b = Broker::new(0, ClusterConfig::default());
        b.fail();
        let out = b.handle(0, env(Addr::Client(1), 0, Message::Produce { req_id: 1, topic: "t".into(), key: vec![], payload: vec![] }));
        assert!(out.is_empty());
        assert!(b.on_timer(0, &TimerKind::Heartbeat { incarnation: 1 }).is_empty());
    }
}
