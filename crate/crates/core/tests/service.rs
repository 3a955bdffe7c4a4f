use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use beamtrack::orchestrator::realtime;
use beamtrack::orchestrator::service::{serve_operator, ServiceHandle, Shared};
use beamtrack::orchestrator::{Mode, Scenario};
use futures::StreamExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn campus(duration_s: f64) -> Scenario {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/campus_loop.json");
    let mut sc = Scenario::load(&p).unwrap();
    sc.duration_s = duration_s;
    sc.mode = Mode::Realtime;
    sc
}

async fn serve() -> (Arc<Shared>, ServiceHandle) {
    let shared = Shared::new();
    let h = serve_operator("127.0.0.1:0".parse::<SocketAddr>().unwrap(), shared.clone()).await.unwrap();
    (shared, h)
}

async fn state(addr: SocketAddr) -> Value {
    reqwest::get(format!("http://{addr}/api/state")).await.unwrap().json().await.unwrap()
}

async fn command(addr: SocketAddr, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new().post(format!("http://{addr}/api/command")).json(&body).send().await.unwrap();
    let code = r.status().as_u16();
    (code, r.json().await.unwrap_or(Value::Null))
}

async fn connect(addr: SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/api/stream")).await.unwrap().0
}

/// Reads stream events until `end` (or the socket closes).
async fn collect(mut ws: Ws) -> Vec<Value> {
    let mut out = Vec::new();
    while let Some(Ok(msg)) = ws.next().await {
        if let Message::Text(t) = msg {
            for line in t.lines() {
                let v: Value = serde_json::from_str(line).unwrap();
                let end = v["type"] == "end";
                out.push(v);
                if end {
                    return out;
                }
            }
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn idle_service_reports_state_and_refuses_commands() {
    let (_shared, h) = serve().await;
    assert_eq!(state(h.addr).await["status"], "idle");
    let (code, body) = command(h.addr, json!({"target": "rx", "action": "recalibrate"})).await;
    assert_eq!(code, 409);
    assert_eq!(body["accepted"], false);
    let (code, _) = command(h.addr, json!({"target": "rx", "action": "dance"})).await;
    assert_eq!(code, 400);
    let raw = reqwest::Client::new()
        .post(format!("http://{}/api/command", h.addr))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(raw.status().as_u16(), 400);
    h.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_run_relays_commands_and_fans_out_the_stream() {
    let (shared, h) = serve().await;
    let addr = h.addr;
    let a = tokio::spawn(collect(connect(addr).await));
    let b = tokio::spawn(collect(connect(addr).await));
    while shared.stream_clients() < 2 {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_path_buf();
    let runner = {
        let shared = shared.clone();
        tokio::spawn(async move { realtime::drive(&campus(3.0), &out, &shared).await })
    };

    tokio::time::sleep(Duration::from_millis(1500)).await;
    let st = state(addr).await;
    assert_eq!(st["status"], "running", "{st}");
    assert_eq!(st["leases"].as_array().map(Vec::len), Some(2), "{st}");
    assert!(st["nodes"]["rx"]["pointing_error_deg"]["total"].is_number(), "{st}");

    let (code, body) = command(addr, json!({"target": "rx", "action": "recalibrate"})).await;
    assert_eq!(code, 200, "{body}");
    let cmd_id = body["cmd_id"].as_str().unwrap().to_string();
    assert!(!cmd_id.is_empty());
    let (code, body) = command(addr, json!({"action": "fail_broker", "broker": 3})).await;
    assert_eq!(code, 200, "{body}");
    let (code, _) = command(addr, json!({"target": "rx", "action": "set_gain", "gain_db": 31})).await;
    assert_eq!(code, 400);

    let outputs = runner.await.unwrap().unwrap();
    let (a, b) = (a.await.unwrap(), b.await.unwrap());
    assert_eq!(a.last().unwrap()["type"], "end");

    let telemetry = |v: &[Value]| v.iter().filter(|e| e["type"] == "telemetry").cloned().collect::<Vec<_>>();
    let ta = telemetry(&a);
    assert!(ta.len() >= 30, "{}", ta.len());
    assert_eq!(ta, telemetry(&b));

    let has_event = |kind: &str| {
        a.iter().any(|e| e["type"] == "event" && e["data"]["kind"] == kind && e["data"]["detail"]["cmd_id"] == cmd_id.as_str())
    };
    assert!(has_event("command_sent"));
    assert!(has_event("command_applied"));

    let failed = a.iter().filter(|e| e["type"] == "broker_health").any(|e| e["data"]["brokers"][3]["status"] == "failed");
    assert!(failed);
    assert!(a.iter().any(|e| e["type"] == "interaction" && e["data"]["pointing_error_deg"]["total"].is_number()));

    assert_eq!(state(addr).await["status"], "finished");
    assert_eq!(command(addr, json!({"target": "rx", "action": "recalibrate"})).await.0, 409);
    assert!(outputs.stats.response.total.unwrap().count > 0);
    h.shutdown().await;
}
