//! The clean room: a background POSIX shell driven over pipes, started from a
//! sanitized environment, with every command framed by a sentinel line.

mod env;
mod session;
mod validate;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use env::{
    merge_missing, scrub_environment, split_path_list, EnvMap, EnvironmentProfile, GlobList,
    ProfileConfig, ScrubReport,
};
pub use session::{
    host_environment, one_shot, shell_quote, CommandResult, SessionOptions, ShellSession,
    DEFAULT_SHELL, DEFAULT_TIMEOUT,
};
pub use validate::{validate_result, CheckOutcome, ValidationVerdict, Validator};

/// Whether user settings are accepted as-is (gaps filled) or managed settings
/// are scrubbed first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertMode {
    Expert,
    #[default]
    NonExpert,
}

impl std::fmt::Display for ExpertMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExpertMode::Expert => "expert",
            ExpertMode::NonExpert => "non-expert",
        })
    }
}

#[derive(Debug, Error)]
pub enum CleanroomError {
    #[error("invalid environment profile: {0}")]
    BadProfile(String),
    #[error("cannot spawn shell {shell}: {reason}")]
    SpawnFailed { shell: PathBuf, reason: String },
    #[error("base directory {0} is missing or not a directory")]
    BadBaseDir(PathBuf),
    #[error("shell session lost while running {command:?} (shell status {status:?}); a fresh session was started")]
    SessionLost {
        command: String,
        status: Option<i32>,
        stdout: Vec<u8>,
        stderr: Vec<u8>,
    },
    #[error("command {command:?} did not finish within {after:?}; the session was respawned")]
    Timeout { command: String, after: Duration },
    #[error("invalid validator {0:?}")]
    BadValidator(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CleanroomError {
    pub fn is_session_lost(&self) -> bool {
        matches!(self, CleanroomError::SessionLost { .. } | CleanroomError::Timeout { .. })
    }
}
