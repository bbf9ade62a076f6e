//! Loopback service for the companion UI: one JSON object per line in each
//! direction, every message carrying `schema_version`.
//!
//! Requests (`type` field): `catalog`, `invoke {recipe, inputs}`,
//! `packages {dir}`, `workdir_summary {dir}`, `subscribe {after}`,
//! `session`, `start_framework`, `input {line}`, `stop_framework`.
//! A request may carry an `id`, echoed in its response. Failures come back
//! as `{"type": "error", "code": ..., "message": ...}`. After `subscribe`
//! the connection only carries `event` messages.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::RecvTimeoutError;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::events::EventBus;
use crate::interact::{Bridge, InteractError};
use crate::kit::{Kit, KitConfig, KitError};
use crate::recipes::RecipeError;
use crate::scaffold;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {reason}")]
    BindFailed { addr: SocketAddr, reason: String },
    #[error("{0} is not a directory")]
    BadDir(PathBuf),
    #[error(transparent)]
    Kit(#[from] KitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub kit: KitConfig,
    /// 0 picks a free port.
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Catalog,
    Invoke {
        recipe: String,
        #[serde(default)]
        inputs: BTreeMap<String, String>,
    },
    Packages {
        dir: PathBuf,
    },
    WorkdirSummary {
        dir: PathBuf,
    },
    Subscribe {
        #[serde(default)]
        after: u64,
    },
    Session,
    StartFramework,
    Input {
        line: String,
    },
    StopFramework,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkdirSummary {
    pub package_count: usize,
    pub packages: Vec<String>,
    /// `create` for a work area without packages, `work` otherwise.
    pub suggested_screen: String,
}

pub fn workdir_summary(dir: &Path) -> Result<WorkdirSummary, ServiceError> {
    if !dir.is_dir() {
        return Err(ServiceError::BadDir(dir.to_path_buf()));
    }
    let packages = scaffold::list_packages(dir)?;
    Ok(WorkdirSummary {
        package_count: packages.len(),
        suggested_screen: if packages.is_empty() { "create" } else { "work" }.into(),
        packages,
    })
}

struct Shared {
    kit: Mutex<Kit>,
    events: EventBus,
    bridge: Mutex<Option<Bridge>>,
    stop: AtomicBool,
}

pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn events(&self) -> &EventBus {
        &self.shared.events
    }

    /// Block until the service stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        if let Some(mut b) = self.shared.bridge.lock().unwrap().take() {
            b.stop();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.shutdown();
        }
    }
}

/// Open a kit and serve it on 127.0.0.1.
pub fn serve(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, config.port));
    let listener = TcpListener::bind(addr).map_err(|e| ServiceError::BindFailed { addr, reason: e.to_string() })?;
    let addr = listener.local_addr()?;
    let kit = Kit::open(config.kit)?;
    let shared = Arc::new(Shared { events: kit.events().clone(), kit: Mutex::new(kit), bridge: Mutex::new(None), stop: AtomicBool::new(false) });
    let accept_shared = shared.clone();
    let thread = thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let shared = accept_shared.clone();
            thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &shared) {
                    log::debug!("connection closed: {e}");
                }
            });
        }
    });
    log::info!("service listening on {addr}");
    Ok(ServiceHandle { addr, shared, thread: Some(thread) })
}

fn send(stream: &mut TcpStream, mut msg: Value) -> std::io::Result<()> {
    msg["schema_version"] = json!(SCHEMA_VERSION);
    writeln!(stream, "{msg}")?;
    stream.flush()
}

fn error(code: &str, message: impl std::fmt::Display) -> Value {
    json!({"type": "error", "ok": false, "code": code, "message": message.to_string()})
}

fn kit_error(e: &KitError) -> Value {
    let code = match e {
        KitError::Recipe(RecipeError::UnknownRecipe(_)) => "not_found",
        KitError::Interact(InteractError::NotAtPrompt) => "not_at_prompt",
        KitError::Interact(InteractError::BridgeClosed(_)) => "closed",
        _ if e.exit_code() == 1 => "user_error",
        _ => "system_error",
    };
    let mut v = error(code, e);
    v["class"] = json!(e.class());
    if let KitError::Recipe(r) = e {
        if let Some(f) = r.failure() {
            v["failure"] = serde_json::to_value(f).expect("failure serializes");
        }
    }
    v
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                send(&mut out, error("bad_request", e))?;
                continue;
            }
        };
        let id = raw.get("id").cloned();
        let reply = |mut v: Value| {
            if let Some(id) = &id {
                v["id"] = id.clone();
            }
            v
        };
        match raw.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            other => {
                send(&mut out, reply(error("unsupported_schema", format!("schema_version {other:?}, expected {SCHEMA_VERSION}"))))?;
                continue;
            }
        }
        let mut body = raw.clone();
        if let Some(obj) = body.as_object_mut() {
            obj.remove("schema_version");
            obj.remove("id");
        }
        let request: Request = match serde_json::from_value(body) {
            Ok(r) => r,
            Err(e) => {
                send(&mut out, reply(error("bad_request", e)))?;
                continue;
            }
        };
        if let Request::Subscribe { after } = request {
            send(&mut out, reply(json!({"type": "subscribed", "ok": true, "after": after})))?;
            return stream_events(&mut out, shared, after);
        }
        let response = respond(shared, request);
        send(&mut out, reply(response))?;
    }
    Ok(())
}

fn stream_events(out: &mut TcpStream, shared: &Shared, after: u64) -> std::io::Result<()> {
    let rx = shared.events.subscribe(after);
    loop {
        match rx.recv_timeout(Duration::from_millis(200)) {
            Ok(event) => send(out, json!({"type": "event", "event": event}))?,
            Err(RecvTimeoutError::Timeout) => {
                if shared.stop.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(RecvTimeoutError::Disconnected) => return Ok(()),
        }
    }
}

fn respond(shared: &Shared, request: Request) -> Value {
    match request {
        Request::Catalog => {
            let kit = shared.kit.lock().unwrap();
            json!({"type": "catalog", "ok": true, "recipes": kit.catalog()})
        }
        Request::Invoke { recipe, inputs } => {
            // one recipe at a time; later requests wait here
            let mut kit = shared.kit.lock().unwrap();
            let first_seq = kit.events().last_seq() + 1;
            let result = kit.invoke(&recipe, &inputs);
            let trace = kit.last_trace().map(Path::to_path_buf);
            let last_seq = kit.events().last_seq();
            match result {
                Ok(r) => json!({
                    "type": "invoke_result", "ok": true, "recipe": recipe,
                    "executed_steps": r.executed_steps(), "artifacts": r.artifacts,
                    "warnings": r.warnings(), "trace_file": trace,
                    "first_seq": first_seq, "last_seq": last_seq,
                }),
                Err(e) => {
                    let mut v = kit_error(&e);
                    v["recipe"] = json!(recipe);
                    v["trace_file"] = json!(trace);
                    v
                }
            }
        }
        Request::Packages { dir } => match workdir_summary(&dir) {
            Ok(s) => json!({"type": "packages", "ok": true, "packages": s.packages}),
            Err(e) => error("bad_dir", e),
        },
        Request::WorkdirSummary { dir } => match workdir_summary(&dir) {
            Ok(s) => {
                let mut v = serde_json::to_value(s).expect("summary serializes");
                v["type"] = json!("workdir_summary");
                v["ok"] = json!(true);
                v
            }
            Err(e) => error("bad_dir", e),
        },
        Request::Session => {
            let kit = shared.kit.lock().unwrap();
            json!({
                "type": "session", "ok": true,
                "base_dir": kit.base_dir(), "release": kit.release(), "mode": kit.config().mode,
                "event_log": shared.events.sink_path(), "last_seq": shared.events.last_seq(),
            })
        }
        Request::StartFramework => {
            let mut slot = shared.bridge.lock().unwrap();
            if slot.as_ref().is_some_and(|b| !matches!(b.state(), crate::interact::BridgeState::Closed(_))) {
                return error("user_error", "the framework is already running");
            }
            match shared.kit.lock().unwrap().start_framework() {
                Ok(b) => {
                    let banner = b.banner();
                    *slot = Some(b);
                    json!({"type": "framework", "ok": true, "state": "at_prompt", "output": banner})
                }
                Err(e) => kit_error(&e),
            }
        }
        Request::Input { line } => {
            let mut slot = shared.bridge.lock().unwrap();
            let Some(bridge) = slot.as_mut() else { return error("not_at_prompt", "the framework is not running") };
            match bridge.send_line(&line) {
                Ok(output) => json!({"type": "input_result", "ok": true, "output": output, "state": bridge.state()}),
                Err(e) => kit_error(&KitError::from(e)),
            }
        }
        Request::Subscribe { .. } => error("bad_request", "subscribe is answered by the connection itself"),
        Request::StopFramework => match shared.bridge.lock().unwrap().take() {
            Some(mut b) => json!({"type": "framework", "ok": true, "exit_code": b.stop()}),
            None => error("not_at_prompt", "the framework is not running"),
        },
    }
}

/// Minimal blocking client, used by the CLI and tests.
pub struct Client {
    stream: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Client { stream, reader })
    }

    /// Send a message, adding `schema_version` unless present.
    pub fn send(&mut self, mut msg: Value) -> std::io::Result<()> {
        if msg.get("schema_version").is_none() {
            msg["schema_version"] = json!(SCHEMA_VERSION);
        }
        writeln!(self.stream, "{msg}")?;
        self.stream.flush()
    }

    pub fn receive(&mut self) -> std::io::Result<Value> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "service closed the connection"));
        }
        serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn request(&mut self, msg: Value) -> std::io::Result<Value> {
        self.send(msg)?;
        self.receive()
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> std::io::Result<()> {
        self.stream.set_read_timeout(t)
    }
}
