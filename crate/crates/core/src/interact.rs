//! Bridge to an interactive child program: detect its prompt, feed it one
//! line at a time, keep a transcript.

use std::io::{Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::cleanroom::{CleanroomError, ShellSession};
use crate::events::{EventBus, EventKind};

pub const DEFAULT_QUIESCENCE: Duration = Duration::from_millis(50);
pub const DEFAULT_PROMPT_TIMEOUT: Duration = Duration::from_secs(10);
const QUIT_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum InteractError {
    #[error("invalid prompt spec: {0}")]
    BadPrompt(String),
    #[error("cannot launch {program}: {reason}")]
    LaunchFailed { program: String, reason: String },
    #[error("no prompt within {0:?}")]
    PromptTimeout(Duration),
    #[error("the program is not waiting at its prompt")]
    NotAtPrompt,
    #[error("the program has exited with status {0}")]
    BridgeClosed(i32),
    #[error("input must be a single line")]
    MultiLineInput,
    #[error(transparent)]
    Session(#[from] CleanroomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    source: String,
    line: Regex,
    pub quiescence: Duration,
}

impl PromptSpec {
    /// `pattern` must start with `^`; it has to match the whole unfinished
    /// last line of output.
    pub fn new(pattern: &str, quiescence: Duration) -> Result<Self, InteractError> {
        let Some(body) = pattern.strip_prefix('^') else {
            return Err(InteractError::BadPrompt(format!("{pattern:?} is not anchored at line start")));
        };
        if quiescence.is_zero() {
            return Err(InteractError::BadPrompt("quiescence window must be positive".into()));
        }
        let line = Regex::new(&format!("^(?:{body})$")).map_err(|e| InteractError::BadPrompt(e.to_string()))?;
        Ok(PromptSpec { source: pattern.into(), line, quiescence })
    }

    pub fn pattern(&self) -> &str {
        &self.source
    }
}

/// Decides when output has come to rest at a prompt. Pure apart from the
/// timestamps it is given.
#[derive(Debug, Clone)]
pub struct PromptDetector {
    spec: PromptSpec,
    /// Output since the last newline.
    partial: Vec<u8>,
    last_data: Option<Instant>,
    armed: bool,
}

impl PromptDetector {
    pub fn new(spec: PromptSpec) -> Self {
        PromptDetector { spec, partial: Vec::new(), last_data: None, armed: false }
    }

    pub fn feed(&mut self, chunk: &[u8], now: Instant) {
        if chunk.is_empty() {
            return;
        }
        match chunk.iter().rposition(|&b| b == b'\n') {
            Some(i) => self.partial = chunk[i + 1..].to_vec(),
            None => self.partial.extend_from_slice(chunk),
        }
        self.last_data = Some(now);
        self.armed = true;
    }

    /// True once per prompt: the unfinished line matches and nothing has
    /// arrived for the quiescence window.
    pub fn poll(&mut self, now: Instant) -> bool {
        let Some(last) = self.last_data else { return false };
        if !self.armed || now.saturating_duration_since(last) < self.spec.quiescence {
            return false;
        }
        if self.spec.line.is_match(&String::from_utf8_lossy(&self.partial)) {
            self.armed = false;
            return true;
        }
        false
    }

    /// Text of the prompt line currently pending.
    pub fn pending_line(&self) -> String {
        String::from_utf8_lossy(&self.partial).into_owned()
    }

    /// When `poll` could next return true.
    pub fn deadline(&self) -> Option<Instant> {
        self.last_data.filter(|_| self.armed).map(|t| t + self.spec.quiescence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeState {
    Starting,
    AtPrompt,
    Busy,
    Closed(i32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEntry {
    /// `stdout`, `stderr` or `input`.
    pub origin: &'static str,
    pub text: String,
}

enum Chunk {
    Data(&'static str, Vec<u8>),
    Eof,
}

pub struct Bridge {
    program: String,
    child: Child,
    stdin: Option<ChildStdin>,
    rx: Receiver<Chunk>,
    open_streams: usize,
    detector: PromptDetector,
    state: BridgeState,
    transcript: Vec<TranscriptEntry>,
    delta: String,
    events: Option<EventBus>,
    pub prompt_timeout: Duration,
}

impl std::fmt::Debug for Bridge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bridge").field("program", &self.program).field("state", &self.state).finish()
    }
}

fn reader<R: Read + Send + 'static>(mut pipe: R, origin: &'static str, tx: mpsc::Sender<Chunk>) {
    thread::spawn(move || {
        let mut buf = [0u8; 4096];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => {
                    let _ = tx.send(Chunk::Eof);
                    return;
                }
                Ok(n) => {
                    if tx.send(Chunk::Data(origin, buf[..n].to_vec())).is_err() {
                        return;
                    }
                }
            }
        }
    });
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Launch `program` (a shell-style command line) with the session's current
/// environment and directory, and wait for its first prompt.
pub fn start_interactive(session: &mut ShellSession, program: &str, prompt: PromptSpec) -> Result<Bridge, InteractError> {
    let launch = |reason: String| InteractError::LaunchFailed { program: program.into(), reason };
    let argv = shell_words::split(program).map_err(|e| launch(e.to_string()))?;
    let Some((exe, args)) = argv.split_first() else { return Err(launch("empty command".into())) };
    let env = session.environment()?;
    let cwd = session.current_dir()?;
    let mut child = Command::new(exe)
        .args(args)
        .env_clear()
        .envs(&env)
        .current_dir(&cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| launch(e.to_string()))?;
    let (tx, rx) = mpsc::channel();
    reader(child.stdout.take().expect("piped"), "stdout", tx.clone());
    reader(child.stderr.take().expect("piped"), "stderr", tx);
    let stdin = child.stdin.take();
    let mut bridge = Bridge {
        program: program.into(),
        child,
        stdin,
        rx,
        open_streams: 2,
        detector: PromptDetector::new(prompt),
        state: BridgeState::Starting,
        transcript: Vec::new(),
        delta: String::new(),
        events: session.event_bus().cloned(),
        prompt_timeout: DEFAULT_PROMPT_TIMEOUT,
    };
    bridge.await_prompt()?;
    Ok(bridge)
}

impl Bridge {
    pub fn state(&self) -> BridgeState {
        self.state
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn transcript_text(&self) -> String {
        self.transcript.iter().filter(|e| e.origin != "input").map(|e| e.text.as_str()).collect()
    }

    fn publish(&self, kind: EventKind, origin: &str, payload: &str) {
        if let Some(bus) = &self.events {
            bus.publish(kind, origin, payload);
        }
    }

    fn close(&mut self) -> i32 {
        if let BridgeState::Closed(code) = self.state {
            return code;
        }
        self.stdin = None;
        let code = self.child.wait().map(exit_code).unwrap_or(-1);
        self.state = BridgeState::Closed(code);
        self.publish(EventKind::Status, "bridge", &format!("{} exited with status {code}", self.program));
        code
    }

    /// Drain output until the prompt shows, the program exits, or the
    /// timeout passes.
    fn await_prompt(&mut self) -> Result<(), InteractError> {
        let give_up = Instant::now() + self.prompt_timeout;
        loop {
            let now = Instant::now();
            if self.detector.poll(now) {
                self.state = BridgeState::AtPrompt;
                let prompt = self.detector.pending_line();
                self.publish(EventKind::Prompt, "bridge", &prompt);
                if self.delta.ends_with(&prompt) {
                    self.delta.truncate(self.delta.len() - prompt.len());
                }
                return Ok(());
            }
            if self.open_streams == 0 {
                self.close();
                return Ok(());
            }
            if now >= give_up {
                return Err(InteractError::PromptTimeout(self.prompt_timeout));
            }
            let wake = self.detector.deadline().filter(|d| *d > now).unwrap_or(now + self.detector.spec.quiescence);
            match self.rx.recv_timeout(wake.min(give_up).saturating_duration_since(now)) {
                Ok(Chunk::Data(origin, bytes)) => {
                    let text = String::from_utf8_lossy(&bytes).into_owned();
                    if origin == "stdout" {
                        self.detector.feed(&bytes, Instant::now());
                    }
                    self.publish(EventKind::Output, origin, &text);
                    self.delta.push_str(&text);
                    self.transcript.push(TranscriptEntry { origin, text });
                }
                Ok(Chunk::Eof) => self.open_streams -= 1,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => self.open_streams = 0,
            }
        }
    }

    /// Output printed before the first prompt.
    pub fn banner(&self) -> String {
        self.transcript_text()
    }

    /// Deliver one line and return everything printed up to the next prompt.
    pub fn send_line(&mut self, input: &str) -> Result<String, InteractError> {
        match self.state {
            BridgeState::AtPrompt => {}
            BridgeState::Closed(code) => return Err(InteractError::BridgeClosed(code)),
            _ => return Err(InteractError::NotAtPrompt),
        }
        if input.contains('\n') {
            return Err(InteractError::MultiLineInput);
        }
        let stdin = self.stdin.as_mut().expect("open while at prompt");
        if writeln!(stdin, "{input}").and_then(|_| stdin.flush()).is_err() {
            return Err(InteractError::BridgeClosed(self.close()));
        }
        self.publish(EventKind::Command, "bridge", input);
        self.transcript.push(TranscriptEntry { origin: "input", text: format!("{input}\n") });
        self.state = BridgeState::Busy;
        self.delta.clear();
        self.await_prompt()?;
        let mut delta = std::mem::take(&mut self.delta);
        if delta.ends_with('\n') {
            delta.pop();
        }
        Ok(delta)
    }

    /// Quit politely when at the prompt, otherwise (or if that does not
    /// work) kill the program. Returns its exit status.
    pub fn stop(&mut self) -> i32 {
        if let BridgeState::Closed(code) = self.state {
            return code;
        }
        if self.state == BridgeState::AtPrompt {
            if let Some(stdin) = self.stdin.as_mut() {
                let _ = writeln!(stdin, "quit").and_then(|_| stdin.flush());
            }
            let deadline = Instant::now() + QUIT_GRACE;
            while Instant::now() < deadline {
                if let Ok(Some(_)) = self.child.try_wait() {
                    return self.close();
                }
                thread::sleep(Duration::from_millis(10));
            }
        }
        let _ = self.child.kill();
        self.close()
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        if !matches!(self.state, BridgeState::Closed(_)) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
