use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::registry::{Lease, Role};
use super::timesync::SyncSample;
use super::{ms, Addr, BrokerId, ClientId, Envelope, LogRecord, Message, MwError, Outgoing, TimerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub request_timeout_ms: f64,
    pub retry_backoff_ms: f64,
    /// Long-poll hold for subscription fetches.
    pub fetch_wait_ms: f64,
    pub fetch_max: usize,
    /// A publish not acknowledged within this window is reported failed.
    pub produce_deadline_ms: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { request_timeout_ms: 150.0, retry_backoff_ms: 50.0, fetch_wait_ms: 100.0, fetch_max: 256, produce_deadline_ms: 2_000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProduceToken(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    Acked { token: ProduceToken, topic: String, offset: u64, sent_t_ns: i64, ack_t_ns: i64 },
    Failed { token: ProduceToken, topic: String, error: MwError },
    Records { topic: String, records: Vec<LogRecord> },
    Lease { req_id: u64, result: Result<Lease, MwError> },
    Lookup { req_id: u64, endpoints: Vec<String> },
    Time { req_id: u64, sample: SyncSample },
}

#[derive(Debug, Clone)]
struct QueuedProduce {
    token: ProduceToken,
    key: Vec<u8>,
    payload: Vec<u8>,
    enqueued_t_ns: i64,
}

#[derive(Debug, Clone, PartialEq)]
enum Request {
    Produce(String),
    Fetch(String),
    Metadata(String),
    Coordinator,
}

#[derive(Debug, Clone, Default)]
struct TopicState {
    leader: Option<BrokerId>,
    epoch: u64,
    queue: VecDeque<QueuedProduce>,
    produce_in_flight: Option<u64>,
    /// Next offset to fetch when subscribed.
    subscribed: Option<u64>,
    fetch_in_flight: Option<u64>,
    metadata_in_flight: bool,
    retry_armed: bool,
}

/// Producer/consumer endpoint. Publishes to a topic are sent one at a time
/// (stop-and-wait), so a topic's records are appended in publish order; a
/// publish retried after a lost acknowledgement may appear twice.
#[derive(Debug, Clone)]
pub struct MwClient {
    pub id: ClientId,
    cfg: ClientConfig,
    next_req: u64,
    next_token: u64,
    topics: BTreeMap<String, TopicState>,
    requests: BTreeMap<u64, Request>,
    /// Local clock minus simulation time.
    pub clock_offset_ns: i64,
}

impl MwClient {
    pub fn new(id: ClientId, cfg: ClientConfig) -> Self {
        Self { id, cfg, next_req: 1, next_token: 1, topics: BTreeMap::new(), requests: BTreeMap::new(), clock_offset_ns: 0 }
    }

    pub fn addr(&self) -> Addr {
        Addr::Client(self.id)
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn req(&mut self, r: Request) -> u64 {
        let id = self.next_req;
        self.next_req += 1;
        self.requests.insert(id, r);
        id
    }

    pub fn queued(&self, topic: &str) -> usize {
        self.topics.get(topic).map_or(0, |t| t.queue.len())
    }

    pub fn produce(&mut self, now: i64, topic: &str, key: Vec<u8>, payload: Vec<u8>) -> (ProduceToken, Vec<Outgoing>) {
        let token = ProduceToken(self.next_token);
        self.next_token += 1;
        let st = self.topics.entry(topic.to_string()).or_default();
        st.queue.push_back(QueuedProduce { token, key, payload, enqueued_t_ns: now });
        let mut out = Vec::new();
        self.pump(now, topic, &mut Vec::new(), &mut out);
        (token, out)
    }

    pub fn subscribe(&mut self, now: i64, topic: &str, from: u64) -> Vec<Outgoing> {
        let st = self.topics.entry(topic.to_string()).or_default();
        st.subscribed = Some(from);
        let mut out = Vec::new();
        self.pump(now, topic, &mut Vec::new(), &mut out);
        out
    }

    fn coordinator_request(&mut self, msg: impl FnOnce(u64) -> Message) -> (u64, Vec<Outgoing>) {
        let id = self.req(Request::Coordinator);
        (id, vec![Outgoing::send(Addr::Coordinator, msg(id))])
    }

    pub fn register(&mut self, node_id: &str, role: Role, endpoint: &str) -> (u64, Vec<Outgoing>) {
        self.coordinator_request(|req_id| Message::Register { req_id, node_id: node_id.to_string(), role, endpoint: endpoint.to_string() })
    }

    pub fn renew(&mut self, node_id: &str, lease_id: u64) -> (u64, Vec<Outgoing>) {
        self.coordinator_request(|req_id| Message::Renew { req_id, node_id: node_id.to_string(), lease_id })
    }

    pub fn lookup(&mut self, role: Role) -> (u64, Vec<Outgoing>) {
        self.coordinator_request(|req_id| Message::Lookup { req_id, role })
    }

    pub fn time_request(&mut self, now: i64) -> (u64, Vec<Outgoing>) {
        let t1 = now + self.clock_offset_ns;
        self.coordinator_request(|req_id| Message::TimeRequest { req_id, t1 })
    }

    /// Sends whatever the topic is ready for: metadata if the leader is
    /// unknown, otherwise the head publish and the subscription fetch.
    fn pump(&mut self, now: i64, topic: &str, events: &mut Vec<ClientEvent>, out: &mut Vec<Outgoing>) {
        self.expire(now, topic, events);
        let cfg = self.cfg;
        let st = self.topics.get(topic).expect("topic state");
        let wants = !st.queue.is_empty() || st.subscribed.is_some();
        if !wants {
            return;
        }
        let Some(leader) = st.leader else {
            if !st.metadata_in_flight && !st.retry_armed {
                let id = self.req(Request::Metadata(topic.to_string()));
                self.topics.get_mut(topic).unwrap().metadata_in_flight = true;
                out.push(Outgoing::send(Addr::Coordinator, Message::Metadata { req_id: id, topic: topic.to_string() }));
                out.push(Outgoing::timer(ms(cfg.request_timeout_ms), TimerKind::ClientTimeout { req_id: id }));
            }
            return;
        };
        if st.produce_in_flight.is_none() && !st.queue.is_empty() {
            let head = st.queue.front().unwrap().clone();
            let id = self.req(Request::Produce(topic.to_string()));
            self.topics.get_mut(topic).unwrap().produce_in_flight = Some(id);
            out.push(Outgoing::send(
                Addr::Broker(leader),
                Message::Produce { req_id: id, topic: topic.to_string(), key: head.key, payload: head.payload },
            ));
            out.push(Outgoing::timer(ms(cfg.request_timeout_ms), TimerKind::ClientTimeout { req_id: id }));
        }
        let st = &self.topics[topic];
        if let (Some(from), None) = (st.subscribed, st.fetch_in_flight) {
            let id = self.req(Request::Fetch(topic.to_string()));
            self.topics.get_mut(topic).unwrap().fetch_in_flight = Some(id);
            out.push(Outgoing::send(
                Addr::Broker(leader),
                Message::Fetch { req_id: id, topic: topic.to_string(), from, max: cfg.fetch_max, wait_ms: cfg.fetch_wait_ms },
            ));
            out.push(Outgoing::timer(ms(cfg.request_timeout_ms + cfg.fetch_wait_ms), TimerKind::ClientTimeout { req_id: id }));
        }
    }

    /// Drops queued publishes past their deadline (never the one in flight).
    fn expire(&mut self, now: i64, topic: &str, events: &mut Vec<ClientEvent>) {
        let deadline = ms(self.cfg.produce_deadline_ms);
        let st = self.topics.get_mut(topic).expect("topic state");
        let skip = usize::from(st.produce_in_flight.is_some());
        let mut i = skip;
        while i < st.queue.len() {
            if now - st.queue[i].enqueued_t_ns > deadline {
                let q = st.queue.remove(i).unwrap();
                events.push(ClientEvent::Failed {
                    token: q.token,
                    topic: topic.to_string(),
                    error: if st.leader.is_none() { MwError::Unavailable(topic.to_string()) } else { MwError::Timeout },
                });
            } else {
                i += 1;
            }
        }
    }

    /// Forget the leader and try again after the backoff.
    fn backoff(&mut self, topic: &str, out: &mut Vec<Outgoing>) {
        let st = self.topics.entry(topic.to_string()).or_default();
        st.leader = None;
        if !st.retry_armed {
            st.retry_armed = true;
            out.push(Outgoing::timer(ms(self.cfg.retry_backoff_ms), TimerKind::ClientRetry { topic: topic.to_string() }));
        }
    }

    fn fail_request(&mut self, req_id: u64, out: &mut Vec<Outgoing>) {
        let Some(r) = self.requests.remove(&req_id) else { return };
        match r {
            Request::Produce(t) => {
                self.topics.get_mut(&t).unwrap().produce_in_flight = None;
                self.backoff(&t, out);
            }
            Request::Fetch(t) => {
                self.topics.get_mut(&t).unwrap().fetch_in_flight = None;
                self.backoff(&t, out);
            }
            Request::Metadata(t) => {
                self.topics.get_mut(&t).unwrap().metadata_in_flight = false;
                self.backoff(&t, out);
            }
            Request::Coordinator => {}
        }
    }

    pub fn on_timer(&mut self, now: i64, kind: &TimerKind) -> (Vec<ClientEvent>, Vec<Outgoing>) {
        let mut events = Vec::new();
        let mut out = Vec::new();
        match kind {
            TimerKind::ClientTimeout { req_id } => {
                if self.requests.contains_key(req_id) {
                    let topic = match &self.requests[req_id] {
                        Request::Produce(t) | Request::Fetch(t) | Request::Metadata(t) => Some(t.clone()),
                        Request::Coordinator => None,
                    };
                    self.fail_request(*req_id, &mut out);
                    if let Some(t) = topic {
                        self.expire(now, &t, &mut events);
                    }
                }
            }
            TimerKind::ClientRetry { topic } => {
                if let Some(st) = self.topics.get_mut(topic) {
                    st.retry_armed = false;
                    self.pump(now, topic, &mut events, &mut out);
                }
            }
            _ => {}
        }
        (events, out)
    }

    pub fn handle(&mut self, now: i64, env: Envelope) -> (Vec<ClientEvent>, Vec<Outgoing>) {
        let mut events = Vec::new();
        let mut out = Vec::new();
        match env.msg {
            Message::ProduceAck { req_id, topic, offset } => {
                if self.requests.remove(&req_id).is_some() {
                    let st = self.topics.get_mut(&topic).unwrap();
                    st.produce_in_flight = None;
                    let q = st.queue.pop_front().expect("in-flight publish is queued");
                    events.push(ClientEvent::Acked {
                        token: q.token,
                        topic: topic.clone(),
                        offset,
                        sent_t_ns: q.enqueued_t_ns,
                        ack_t_ns: now,
                    });
                    self.pump(now, &topic, &mut events, &mut out);
                }
            }
            Message::FetchResponse { req_id, topic, records, .. } => {
                if self.requests.remove(&req_id).is_some() {
                    let st = self.topics.get_mut(&topic).unwrap();
                    st.fetch_in_flight = None;
                    if let (Some(from), Some(last)) = (st.subscribed, records.last()) {
                        st.subscribed = Some(from.max(last.offset + 1));
                        let fresh: Vec<LogRecord> = records.into_iter().filter(|r| r.offset >= from).collect();
                        events.push(ClientEvent::Records { topic: topic.clone(), records: fresh });
                    }
                    self.pump(now, &topic, &mut events, &mut out);
                }
            }
            Message::RequestError { req_id, .. } => self.fail_request(req_id, &mut out),
            Message::MetadataResponse { req_id, topic, leader, epoch } => {
                if self.requests.remove(&req_id).is_some() {
                    let st = self.topics.get_mut(&topic).unwrap();
                    st.metadata_in_flight = false;
                    if epoch >= st.epoch {
                        st.epoch = epoch;
                        st.leader = leader;
                    }
                    if st.leader.is_some() {
                        self.pump(now, &topic, &mut events, &mut out);
                    } else {
                        self.backoff(&topic, &mut out);
                    }
                }
            }
            Message::LeaseResponse { req_id, result } => {
                if self.requests.remove(&req_id).is_some() {
                    events.push(ClientEvent::Lease { req_id, result });
                }
            }
            Message::LookupResponse { req_id, endpoints } => {
                if self.requests.remove(&req_id).is_some() {
                    events.push(ClientEvent::Lookup { req_id, endpoints });
                }
            }
            Message::TimeResponse { req_id, t1, t2, t3 } if self.requests.remove(&req_id).is_some() => {
                let t4 = now + self.clock_offset_ns;
                events.push(ClientEvent::Time { req_id, sample: SyncSample { t1, t2, t3, t4 } });
            }
            _ => {}
        }
        (events, out)
    }
}
