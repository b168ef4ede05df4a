#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

use macf::server::{serve, AppState};
use macf_core::catalog::Catalog;
use macf_core::config::AppConfig;
use macf_core::engine::{build_policy, build_provider, Engine};
use macf_core::transport::Transport;
use serde_json::Value;
use tokio::sync::oneshot;

/// Scripted engine whose provider and policy were built against `transport`,
/// so any outbound request would show up there.
pub fn engine(config: AppConfig, catalog: Catalog, transport: &Arc<dyn Transport>) -> Engine {
    let provider = build_provider(&config, transport);
    let (policy, judge) = build_policy(&config, transport);
    Engine::from_catalog(config, catalog, provider, None, policy, judge).expect("engine builds")
}

pub struct TestServer {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(state: AppState) -> Self {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, Arc::new(state), async move {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().expect("server binds");
        Self { addr, stop: Some(stop), thread: Some(thread) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub session_id: Option<String>,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("not json ({e}): {}", self.body))
    }

    pub fn lines(&self) -> Vec<Value> {
        self.body.lines().map(|l| serde_json::from_str(l).expect("ndjson line")).collect()
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn reply(mut resp: ureq::http::Response<ureq::Body>) -> Reply {
    let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let content_type = header("content-type").unwrap_or_default();
    let session_id = header("x-session-id");
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().expect("body reads");
    Reply { status, content_type, session_id, body }
}

pub fn get(url: &str) -> Reply {
    reply(agent().get(url).call().expect("request sent"))
}

pub fn post(url: &str, body: &Value) -> Reply {
    reply(agent().post(url).send_json(body).expect("request sent"))
}

pub fn post_raw(url: &str, body: &str) -> Reply {
    reply(agent().post(url).header("content-type", "application/json").send(body).expect("request sent"))
}

/// Checks one streamed session: gapless seq from 0, one session id, exactly
/// one terminal event at the end, and the transcript file holding the same
/// lines. Returns the terminal event type.
pub fn check_stream(reply: &Reply, transcript_dir: &Path) -> Result<String, String> {
    if reply.status != 200 {
        return Err(format!("status {}: {}", reply.status, reply.body));
    }
    if !reply.content_type.starts_with("application/x-ndjson") {
        return Err(format!("content type {}", reply.content_type));
    }
    let id = reply.session_id.clone().ok_or("missing x-session-id")?;
    let events = reply.lines();
    if events.is_empty() {
        return Err("empty stream".into());
    }
    for (i, e) in events.iter().enumerate() {
        if e["seq"].as_u64() != Some(i as u64) {
            return Err(format!("seq gap at line {i}: {}", e["seq"]));
        }
        if e["session_id"].as_str() != Some(id.as_str()) {
            return Err(format!("line {i} carries session id {}", e["session_id"]));
        }
        let terminal = matches!(e["type"].as_str(), Some("final_list" | "session_failed"));
        if terminal != (i + 1 == events.len()) {
            return Err(format!("terminal event misplaced at line {i}"));
        }
    }
    let file = std::fs::read_to_string(transcript_dir.join(format!("{id}.jsonl"))).map_err(|e| e.to_string())?;
    if file != reply.body {
        return Err("stream and transcript differ".into());
    }
    Ok(events.last().unwrap()["type"].as_str().unwrap_or_default().to_string())
}
