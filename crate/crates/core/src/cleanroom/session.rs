use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{EnvMap, EnvironmentProfile};
use super::{CleanroomError, ExpertMode};
use crate::events::{EventBus, EventKind};

pub const DEFAULT_SHELL: &str = "/bin/sh";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// Variables the shell itself introduces; they are not part of the
/// environment the session was started with.
const SHELL_OWNED_VARS: &[&str] = &["PWD", "OLDPWD", "SHLVL", "_"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_code: u8,
    #[serde(with = "duration_millis")]
    pub duration: Duration,
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl CommandResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }

    pub fn stdout_text(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }

    /// First line of stdout, without its terminator.
    pub fn first_stdout_line(&self) -> String {
        self.stdout_text().lines().next().unwrap_or("").to_string()
    }

    /// First non-blank diagnostic line: stderr if it has one, else stdout.
    pub fn first_error_line(&self) -> String {
        let pick = |text: String| text.lines().find(|l| !l.trim().is_empty()).map(str::to_string);
        pick(self.stderr_text())
            .or_else(|| pick(self.stdout_text()))
            .unwrap_or_default()
    }

    pub fn synthetic(exit_code: u8, stderr: impl Into<Vec<u8>>) -> Self {
        CommandResult {
            stdout: Vec::new(),
            stderr: stderr.into(),
            exit_code,
            duration: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub shell: PathBuf,
    pub timeout: Duration,
    pub host_env: Option<EnvMap>,
    pub events: Option<EventBus>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            shell: PathBuf::from(DEFAULT_SHELL),
            timeout: DEFAULT_TIMEOUT,
            host_env: None,
            events: None,
        }
    }
}

pub fn host_environment() -> EnvMap {
    std::env::vars().collect()
}

/// Quote `text` as a single POSIX shell word.
pub fn shell_quote(text: &str) -> String {
    if !text.is_empty()
        && text
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-_./:=@%+,".contains(&b))
    {
        return text.to_string();
    }
    format!("'{}'", text.replace('\'', r"'\''"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Stdout,
    Stderr,
}

impl Origin {
    fn tag(self) -> &'static str {
        match self {
            Origin::Stdout => "stdout",
            Origin::Stderr => "stderr",
        }
    }
}

enum Chunk {
    Data(Origin, Vec<u8>),
    Eof(Origin),
}

struct Live {
    child: Child,
    stdin: ChildStdin,
    rx: Receiver<Chunk>,
    nonce: String,
}

impl Drop for Live {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A controlled background shell. Commands are serialized by `&mut self`.
pub struct ShellSession {
    profile: EnvironmentProfile,
    mode: ExpertMode,
    base_dir: PathBuf,
    options: SessionOptions,
    env_snapshot: EnvMap,
    sentinel_counter: u64,
    generation: u64,
    live: Option<Live>,
    history: Vec<String>,
    satisfied: BTreeSet<String>,
}

impl std::fmt::Debug for ShellSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShellSession")
            .field("base_dir", &self.base_dir)
            .field("mode", &self.mode)
            .field("sentinel_counter", &self.sentinel_counter)
            .field("generation", &self.generation)
            .finish()
    }
}

fn spawn_reader<R: Read + Send + 'static>(mut pipe: R, origin: Origin, tx: mpsc::Sender<Chunk>) {
    thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => {
                    let _ = tx.send(Chunk::Eof(origin));
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

fn new_nonce() -> String {
    let bytes: [u8; 6] = rand::thread_rng().gen();
    hex::encode(bytes)
}

fn find(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| &haystack[i..i + needle.len()] == needle)
}

/// Locate the stdout sentinel `\n<marker>:<status>\n`; returns (start, status).
fn find_stdout_sentinel(buf: &[u8], marker: &[u8], from: usize) -> Option<(usize, u8)> {
    let mut needle = Vec::with_capacity(marker.len() + 2);
    needle.push(b'\n');
    needle.extend_from_slice(marker);
    needle.push(b':');
    let mut at = from;
    while let Some(pos) = find(buf, &needle, at) {
        let rest = &buf[pos + needle.len()..];
        let digits = rest.iter().take_while(|b| b.is_ascii_digit()).count();
        if digits > 0 && rest.get(digits) == Some(&b'\n') {
            let status: u16 = std::str::from_utf8(&rest[..digits]).ok()?.parse().ok()?;
            return Some((pos, status.min(255) as u8));
        }
        if digits == rest.len() {
            // status not fully received yet
            return None;
        }
        at = pos + 1;
    }
    None
}

impl ShellSession {
    /// Start a session from the current process environment.
    pub fn spawn(profile: EnvironmentProfile, mode: ExpertMode, base_dir: &Path) -> Result<Self, CleanroomError> {
        Self::spawn_with(profile, mode, base_dir, SessionOptions::default())
    }

    pub fn spawn_with(
        profile: EnvironmentProfile,
        mode: ExpertMode,
        base_dir: &Path,
        options: SessionOptions,
    ) -> Result<Self, CleanroomError> {
        profile.validate_for(mode)?;
        if !base_dir.is_dir() {
            return Err(CleanroomError::BadBaseDir(base_dir.to_path_buf()));
        }
        let base_dir = base_dir
            .canonicalize()
            .map_err(|_| CleanroomError::BadBaseDir(base_dir.to_path_buf()))?;
        let host = options.host_env.clone().unwrap_or_else(host_environment);
        let env_snapshot = profile.session_environment(&host, mode);
        let mut session = ShellSession {
            profile,
            mode,
            base_dir,
            options,
            env_snapshot,
            sentinel_counter: 0,
            generation: 0,
            live: None,
            history: Vec::new(),
            satisfied: BTreeSet::new(),
        };
        session.start()?;
        Ok(session)
    }

    fn start(&mut self) -> Result<(), CleanroomError> {
        let mut child = Command::new(&self.options.shell)
            .env_clear()
            .envs(&self.env_snapshot)
            .current_dir(&self.base_dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| CleanroomError::SpawnFailed {
                shell: self.options.shell.clone(),
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let (tx, rx) = mpsc::channel();
        spawn_reader(child.stdout.take().expect("piped stdout"), Origin::Stdout, tx.clone());
        spawn_reader(child.stderr.take().expect("piped stderr"), Origin::Stderr, tx);
        self.live = Some(Live {
            child,
            stdin,
            rx,
            nonce: new_nonce(),
        });
        self.generation += 1;
        self.satisfied.clear();
        log::debug!("shell session started in {} ({})", self.base_dir.display(), self.mode);
        Ok(())
    }

    /// Replace the shell process with a fresh one built from the same profile.
    pub fn respawn(&mut self) -> Result<(), CleanroomError> {
        self.live = None;
        self.start()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn mode(&self) -> ExpertMode {
        self.mode
    }

    pub fn profile(&self) -> &EnvironmentProfile {
        &self.profile
    }

    pub fn env_snapshot(&self) -> &EnvMap {
        &self.env_snapshot
    }

    pub fn shell(&self) -> &Path {
        &self.options.shell
    }

    pub fn sentinel_counter(&self) -> u64 {
        self.sentinel_counter
    }

    /// Incremented every time a shell process is (re)started.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Every user-visible command executed, in order (sentinels excluded).
    pub fn history(&self) -> &[String] {
        &self.history
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.options.timeout = timeout;
    }

    pub fn set_event_bus(&mut self, bus: EventBus) {
        self.options.events = Some(bus);
    }

    pub fn event_bus(&self) -> Option<&EventBus> {
        self.options.events.as_ref()
    }

    /// Steps already satisfied in this shell process. Cleared on respawn.
    pub fn satisfied_steps(&self) -> &BTreeSet<String> {
        &self.satisfied
    }

    pub fn mark_satisfied(&mut self, step: &str) {
        self.satisfied.insert(step.to_string());
    }

    pub fn is_alive(&mut self) -> bool {
        match self.live.as_mut() {
            Some(live) => matches!(live.child.try_wait(), Ok(None)),
            None => false,
        }
    }

    pub fn close(mut self) {
        self.live = None;
    }

    fn publish(&self, kind: EventKind, origin: &str, payload: impl Into<String>) {
        if let Some(bus) = &self.options.events {
            bus.publish(kind, origin, payload);
        }
    }

    pub fn execute(&mut self, command: &str) -> Result<CommandResult, CleanroomError> {
        let timeout = self.options.timeout;
        self.execute_with_timeout(command, timeout)
    }

    pub fn execute_with_timeout(&mut self, command: &str, timeout: Duration) -> Result<CommandResult, CleanroomError> {
        if self.live.is_none() {
            self.start()?;
        }
        self.sentinel_counter += 1;
        let counter = self.sentinel_counter;
        self.history.push(command.to_string());
        self.publish(EventKind::Command, "shell", command);

        let live = self.live.as_mut().expect("live session");
        // drop anything left over from background jobs of earlier commands
        while let Ok(chunk) = live.rx.try_recv() {
            if let Chunk::Data(origin, data) = chunk {
                log::debug!("discarding {} stray bytes on {}", data.len(), origin.tag());
            }
        }
        let marker = format!("__STARTKIT_{}_{}__", live.nonce, counter);
        let script = format!(
            "eval {} </dev/null\n__sk_rc=$?\nprintf '\\n%s:%d\\n' '{marker}' \"$__sk_rc\"\nprintf '\\n%s\\n' '{marker}' >&2\n",
            shell_quote(command)
        );
        log::debug!("sentinel {marker}");

        let started = Instant::now();
        if live.stdin.write_all(script.as_bytes()).and_then(|_| live.stdin.flush()).is_err() {
            return Err(self.lost(command, Vec::new(), Vec::new()));
        }

        let stderr_needle = format!("\n{marker}\n").into_bytes();
        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let mut arrivals: Vec<(Origin, usize)> = Vec::new();
        let mut out_done: Option<(usize, u8)> = None;
        let mut err_done: Option<usize> = None;
        let deadline = started + timeout;

        while out_done.is_none() || err_done.is_none() {
            let now = Instant::now();
            let wait = deadline.saturating_duration_since(now);
            let live = self.live.as_mut().expect("live session");
            match live.rx.recv_timeout(wait) {
                Ok(Chunk::Data(origin, data)) => {
                    arrivals.push((origin, data.len()));
                    match origin {
                        Origin::Stdout => {
                            let from = stdout.len().saturating_sub(marker.len() + 8);
                            stdout.extend_from_slice(&data);
                            if out_done.is_none() {
                                out_done = find_stdout_sentinel(&stdout, marker.as_bytes(), from);
                            }
                        }
                        Origin::Stderr => {
                            let from = stderr.len().saturating_sub(stderr_needle.len());
                            stderr.extend_from_slice(&data);
                            if err_done.is_none() {
                                err_done = find(&stderr, &stderr_needle, from);
                            }
                        }
                    }
                }
                Ok(Chunk::Eof(origin)) => {
                    log::debug!("shell closed {}", origin.tag());
                    return Err(self.lost(command, stdout, stderr));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(self.lost(command, stdout, stderr));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.live = None;
                    self.start()?;
                    self.publish(EventKind::Status, "shell", format!("timeout after {timeout:?}; session respawned"));
                    return Err(CleanroomError::Timeout {
                        command: command.to_string(),
                        after: timeout,
                    });
                }
            }
        }

        let (out_len, exit_code) = out_done.expect("stdout sentinel");
        let err_len = err_done.expect("stderr sentinel");
        stdout.truncate(out_len);
        stderr.truncate(err_len);
        self.publish_output(&arrivals, &stdout, &stderr);
        Ok(CommandResult {
            stdout,
            stderr,
            exit_code,
            duration: started.elapsed(),
        })
    }

    /// Emit output events in arrival order, cut at the sentinel boundaries.
    fn publish_output(&self, arrivals: &[(Origin, usize)], stdout: &[u8], stderr: &[u8]) {
        if self.options.events.is_none() {
            return;
        }
        let (mut out_at, mut err_at) = (0usize, 0usize);
        for &(origin, len) in arrivals {
            let (buf, at) = match origin {
                Origin::Stdout => (stdout, &mut out_at),
                Origin::Stderr => (stderr, &mut err_at),
            };
            let end = (*at + len).min(buf.len());
            if end > *at {
                self.publish(EventKind::Output, origin.tag(), String::from_utf8_lossy(&buf[*at..end]));
            }
            *at = end;
        }
    }

    fn lost(&mut self, command: &str, stdout: Vec<u8>, stderr: Vec<u8>) -> CleanroomError {
        let status = self.live.as_mut().and_then(|live| live.child.wait().ok()).and_then(|s| s.code());
        self.live = None;
        let respawned = self.start();
        self.publish(
            EventKind::Status,
            "shell",
            format!("session lost (shell status {status:?}); respawned: {}", respawned.is_ok()),
        );
        if let Err(err) = respawned {
            return err;
        }
        CleanroomError::SessionLost {
            command: command.to_string(),
            status,
            stdout,
            stderr,
        }
    }

    /// Return to the base directory and drop shell-local state that affects
    /// directory resolution.
    pub fn reset_to_known_state(&mut self) -> Result<PathBuf, CleanroomError> {
        let cmd = format!(
            "unalias -a 2>/dev/null; unset CDPATH; cd -P -- {} && pwd -P",
            shell_quote(&self.base_dir.to_string_lossy())
        );
        let result = self.execute(&cmd)?;
        let cwd = PathBuf::from(result.first_stdout_line());
        if !result.success() || cwd != self.base_dir {
            return Err(CleanroomError::BadBaseDir(self.base_dir.clone()));
        }
        Ok(cwd)
    }

    pub fn current_dir(&mut self) -> Result<PathBuf, CleanroomError> {
        Ok(PathBuf::from(self.execute("pwd -P")?.first_stdout_line()))
    }

    /// The live exported environment of the shell, minus shell-owned variables.
    pub fn environment(&mut self) -> Result<EnvMap, CleanroomError> {
        let result = self.execute("command env -0 2>/dev/null || /usr/bin/env -0")?;
        let mut env = EnvMap::new();
        for record in result.stdout.split(|&b| b == 0) {
            let record = String::from_utf8_lossy(record);
            if let Some((name, value)) = record.split_once('=') {
                if !SHELL_OWNED_VARS.contains(&name) {
                    env.insert(name.to_string(), value.to_string());
                }
            }
        }
        Ok(env)
    }
}

/// Run `command` once in a fresh `sh -c`, outside any session.
pub fn one_shot(shell: &Path, command: &str, env: &EnvMap, cwd: &Path) -> std::io::Result<CommandResult> {
    let started = Instant::now();
    let out = Command::new(shell)
        .arg("-c")
        .arg(command)
        .env_clear()
        .envs(env)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .output()?;
    Ok(CommandResult {
        stdout: out.stdout,
        stderr: out.stderr,
        exit_code: out.status.code().unwrap_or(255).clamp(0, 255) as u8,
        duration: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting_round_trips_through_the_shell() {
        let nasty = "it's a \"test\" $HOME `x` \\ \n end";
        let env: EnvMap = [("PATH".to_string(), "/usr/bin:/bin".to_string())].into_iter().collect();
        let out = one_shot(Path::new("/bin/sh"), &format!("printf %s {}", shell_quote(nasty)), &env, Path::new("/")).unwrap();
        assert_eq!(out.stdout_text(), nasty);
        assert_eq!(shell_quote("plain"), "plain");
        assert_eq!(shell_quote(""), "''");
    }

    #[test]
    fn sentinel_needs_complete_status_line() {
        let marker = b"__STARTKIT_ab_3__";
        assert_eq!(find_stdout_sentinel(b"x\n__STARTKIT_ab_3__:1", marker, 0), None);
        assert_eq!(find_stdout_sentinel(b"x\n__STARTKIT_ab_3__:12\n", marker, 0), Some((1, 12)));
        assert_eq!(find_stdout_sentinel(b"\n__STARTKIT_ab_3__:x\n\n__STARTKIT_ab_3__:0\n", marker, 0), Some((21, 0)));
    }

    #[test]
    fn decoy_with_other_counter_is_ignored() {
        let marker = b"__STARTKIT_ab_3__";
        assert_eq!(find_stdout_sentinel(b"\n__STARTKIT_ab_4__:0\n", marker, 0), None);
        assert_eq!(find_stdout_sentinel(b"\n__STARTKIT_ab_33__:0\n", marker, 0), None);
    }
}
