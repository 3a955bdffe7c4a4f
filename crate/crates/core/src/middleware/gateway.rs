//! Live-mode host: runs a [`Cluster`] paced by the wall clock and exposes the
//! client side of the protocol over TCP using [`wire`](super::wire) frames.
//! Each connection is one client address; brokers and the coordinator stay
//! in-process.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use log::{debug, info, warn};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

use super::cluster::{Cluster, NetEvent};
use super::wire::{read_frame_async, write_frame_async};
use super::{Addr, BrokerId, BrokerStatus, ClientId, ClusterConfig, Envelope, Latency, MwError};
use crate::sim::Scheduler;

enum HostMsg {
    Connect(ClientId, mpsc::UnboundedSender<Envelope>),
    Frame(ClientId, Envelope),
    Disconnect(ClientId),
    Fail(BrokerId, oneshot::Sender<Result<(), MwError>>),
    Restore(BrokerId, oneshot::Sender<Result<(), MwError>>),
    Status(oneshot::Sender<Vec<BrokerStatus>>),
    Leader(String, oneshot::Sender<Option<BrokerId>>),
    Shutdown,
}

/// Control handle for a running gateway.
#[derive(Debug, Clone)]
pub struct GatewayHandle {
    pub local_addr: SocketAddr,
    tx: mpsc::UnboundedSender<HostMsg>,
}

impl GatewayHandle {
    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> HostMsg) -> Option<T> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(make(tx)).ok()?;
        rx.await.ok()
    }

    pub async fn fail(&self, b: BrokerId) -> Result<(), MwError> {
        self.ask(|tx| HostMsg::Fail(b, tx)).await.unwrap_or(Err(MwError::Unavailable("gateway".into())))
    }

    pub async fn restore(&self, b: BrokerId) -> Result<(), MwError> {
        self.ask(|tx| HostMsg::Restore(b, tx)).await.unwrap_or(Err(MwError::Unavailable("gateway".into())))
    }

    pub async fn broker_status(&self) -> Vec<BrokerStatus> {
        self.ask(HostMsg::Status).await.unwrap_or_default()
    }

    pub async fn leader_of(&self, topic: &str) -> Option<BrokerId> {
        self.ask(|tx| HostMsg::Leader(topic.to_string(), tx)).await.flatten()
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(HostMsg::Shutdown);
    }
}

/// Binds `listen`, creates `topics`, and serves until shut down. The real
/// socket replaces the simulated client hop.
pub async fn serve(listen: &str, mut cfg: ClusterConfig, seed: u64, topics: &[&str]) -> anyhow::Result<GatewayHandle> {
    let listener = TcpListener::bind(listen).await?;
    let local_addr = listener.local_addr()?;
    cfg.client_hop = Latency::new(0.0, 0.0);
    let mut cluster = Cluster::new(cfg, seed);
    let mut queue = Scheduler::new();
    for s in cluster.start(0) {
        queue.schedule(s.at_ns, s.event);
    }
    for t in topics {
        for s in cluster.create_topic(0, t, cfg.replication_factor)? {
            queue.schedule(s.at_ns, s.event);
        }
    }
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(accept_loop(listener, tx.clone()));
    tokio::spawn(host_loop(cluster, queue, rx));
    info!("gateway listening on {local_addr}");
    Ok(GatewayHandle { local_addr, tx })
}

async fn accept_loop(listener: TcpListener, host: mpsc::UnboundedSender<HostMsg>) {
    let mut next_id: ClientId = 1;
    loop {
        let Ok((stream, peer)) = listener.accept().await else { continue };
        if host.is_closed() {
            return;
        }
        let id = next_id;
        next_id += 1;
        debug!("client {id} connected from {peer}");
        tokio::spawn(connection(id, stream, host.clone()));
    }
}

async fn connection(id: ClientId, stream: TcpStream, host: mpsc::UnboundedSender<HostMsg>) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Envelope>();
    if host.send(HostMsg::Connect(id, out_tx)).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(env) = out_rx.recv().await {
            if write_frame_async(&mut wr, &env).await.is_err() {
                break;
            }
        }
    });
    loop {
        match read_frame_async(&mut rd).await {
            Ok(Some(env)) => {
                if host.send(HostMsg::Frame(id, env)).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                warn!("client {id}: {e}");
                break;
            }
        }
    }
    let _ = host.send(HostMsg::Disconnect(id));
    writer.abort();
}

async fn host_loop(mut cluster: Cluster, mut queue: Scheduler<NetEvent>, mut rx: mpsc::UnboundedReceiver<HostMsg>) {
    let start = Instant::now();
    let wall_ns = || start.elapsed().as_nanos() as i64;
    let mut clients: BTreeMap<ClientId, mpsc::UnboundedSender<Envelope>> = BTreeMap::new();
    loop {
        // fire everything due
        let now = wall_ns();
        while let Some((t, ev)) = queue.pop_until(now) {
            match ev {
                NetEvent::Deliver(env) if matches!(env.to, Addr::Client(_)) => {
                    let Addr::Client(c) = env.to else { unreachable!() };
                    if let Some(tx) = clients.get(&c) {
                        let _ = tx.send(env);
                    }
                }
                NetEvent::Timer { owner: Addr::Client(_), .. } => {}
                ev => {
                    for s in cluster.handle(t, ev) {
                        queue.schedule(s.at_ns, s.event);
                    }
                }
            }
        }
        queue.advance_to(now);
        let wake = queue.peek_time().map_or(Duration::from_millis(50), |t| Duration::from_nanos((t - now).max(0) as u64));
        let msg = tokio::select! {
            m = rx.recv() => m,
            _ = tokio::time::sleep(wake) => continue,
        };
        let Some(msg) = msg else { return };
        let now = wall_ns();
        queue.advance_to(now);
        match msg {
            HostMsg::Connect(id, tx) => {
                clients.insert(id, tx);
            }
            HostMsg::Disconnect(id) => {
                clients.remove(&id);
            }
            HostMsg::Frame(id, mut env) => {
                env.from = Addr::Client(id);
                if matches!(env.to, Addr::Client(_)) {
                    continue;
                }
                queue.schedule(now, NetEvent::Deliver(env));
            }
            HostMsg::Fail(b, reply) => {
                let _ = reply.send(cluster.fail(b));
            }
            HostMsg::Restore(b, reply) => {
                let r = cluster.restore(now, b).map(|sched| {
                    for s in sched {
                        queue.schedule(s.at_ns, s.event);
                    }
                });
                let _ = reply.send(r);
            }
            HostMsg::Status(reply) => {
                let _ = reply.send(cluster.broker_status());
            }
            HostMsg::Leader(t, reply) => {
                let _ = reply.send(cluster.leader_of(&t));
            }
            HostMsg::Shutdown => return,
        }
    }
}
