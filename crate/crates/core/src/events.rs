//! Append-only session event stream shared by the shell controller, the
//! interactive bridge, the recipe runner, the CLI and the local service.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Command,
    Output,
    Prompt,
    Log,
    Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub origin: String,
    pub payload: String,
}

#[derive(Default)]
struct Inner {
    history: Vec<SessionEvent>,
    subscribers: Vec<Sender<SessionEvent>>,
    sink: Option<(PathBuf, File)>,
}

/// Fan-out event bus. Sequence numbers start at 1 and strictly increase.
///
/// The full history is retained so a subscriber can resume from the last
/// sequence number it saw.
#[derive(Clone, Default)]
pub struct EventBus {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for EventBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().unwrap();
        f.debug_struct("EventBus")
            .field("events", &inner.history.len())
            .field("subscribers", &inner.subscribers.len())
            .finish()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Persist every subsequent event as one JSON line in `path`.
    pub fn persist_to(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.inner.lock().unwrap().sink = Some((path.to_path_buf(), file));
        Ok(())
    }

    pub fn sink_path(&self) -> Option<PathBuf> {
        self.inner.lock().unwrap().sink.as_ref().map(|(p, _)| p.clone())
    }

    pub fn publish(&self, kind: EventKind, origin: &str, payload: impl Into<String>) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.history.last().map_or(1, |e| e.seq + 1);
        let event = SessionEvent {
            seq,
            kind,
            origin: origin.to_string(),
            payload: payload.into(),
        };
        if let Some((path, file)) = inner.sink.as_mut() {
            let line = serde_json::to_string(&event).expect("event serializes");
            if let Err(err) = writeln!(file, "{line}") {
                log::warn!("cannot append event to {}: {err}", path.display());
            }
        }
        inner.subscribers.retain(|tx| tx.send(event.clone()).is_ok());
        inner.history.push(event);
        seq
    }

    /// Subscribe to every event with `seq > after`, replaying history first.
    pub fn subscribe(&self, after: u64) -> Receiver<SessionEvent> {
        let (tx, rx) = mpsc::channel();
        let mut inner = self.inner.lock().unwrap();
        for event in inner.history.iter().filter(|e| e.seq > after) {
            let _ = tx.send(event.clone());
        }
        inner.subscribers.push(tx);
        rx
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().unwrap().history.last().map_or(0, |e| e.seq)
    }

    pub fn snapshot(&self) -> Vec<SessionEvent> {
        self.inner.lock().unwrap().history.clone()
    }

    /// Read back a persisted event log.
    pub fn load(path: &Path) -> std::io::Result<Vec<SessionEvent>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            })
            .collect()
    }
}
