//! Failure classification and the recovery ladder for broken-system
//! failures: solution cache, workarounds, fallback chains, gated repair.

mod cache;
mod classify;
mod fallback;
mod registry;
mod repair;
mod resolve;
mod signature;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanroom::{CleanroomError, CommandResult};

pub use cache::{SolutionCache, SolutionRecord};
pub use classify::{classify, ClassifyRules};
pub use fallback::{Alternative, FallbackChain, FallbackPolicy};
pub use registry::{ConfigKeyPattern, EventMatcher, FaultRegistry, LayoutKind, LayoutRule, Mutation, RepairCase, Workaround};
pub use repair::{diagnose, read_journal, repair_workspace, AppliedMutation, JournalEntry, RepairDiagnosis, RepairOptions, RepairReport};
pub use resolve::{Attempt, FaultEngine, Outcome, OutcomeKind, Resolution, Stage};
pub use signature::{canonicalize_error_line, ProblemSignature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// Temporarily missing resource; come back later.
    Transient,
    /// The user's own input failed.
    UserAction,
    /// The distribution is misconfigured; try to work around it.
    SystemBroken,
}

impl std::fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorClass::Transient => "transient",
            ErrorClass::UserAction => "user-action",
            ErrorClass::SystemBroken => "system-broken",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigKey {
    pub release: String,
    pub configuration: String,
    pub platform: String,
}

impl ConfigKey {
    pub fn new(release: &str, configuration: &str, platform: &str) -> Result<Self, FaultError> {
        if release.is_empty() || configuration.is_empty() || platform.is_empty() {
            return Err(FaultError::BadConfigKey(format!("{release}/{configuration}/{platform}")));
        }
        Ok(ConfigKey {
            release: release.into(),
            configuration: configuration.into(),
            platform: platform.into(),
        })
    }

    pub fn host_platform() -> String {
        format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS)
    }
}

impl std::fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.release, self.configuration, self.platform)
    }
}

/// Who owns a resource, which decides how its absence is classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceOwner {
    Distribution,
    User,
    Transient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceProblem {
    Missing,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRef {
    pub key: String,
    /// Absolute location the resource is expected at.
    pub path: PathBuf,
    /// Location relative to its root (site, work area), used to find copies
    /// of it elsewhere.
    pub relative: PathBuf,
    pub owner: ResourceOwner,
    /// sha256 the content must have, when the release manifest declares it.
    pub expected_sha256: Option<String>,
    pub problem: ResourceProblem,
}

impl ResourceRef {
    /// Whether the file at `path` is present and matches its expected hash.
    pub fn is_satisfied(&self) -> bool {
        match std::fs::read(&self.path) {
            Ok(bytes) => match &self.expected_sha256 {
                Some(expected) => &crate::sha256_hex(&bytes) == expected,
                None => true,
            },
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub step: String,
    pub tool: Option<String>,
    /// The command that failed, if the failure came from one.
    pub command: Option<String>,
    pub result: CommandResult,
    pub resource: Option<ResourceRef>,
    pub config_key: ConfigKey,
    /// The failing command consumed user-authored input.
    pub user_input: bool,
}

impl FailureEvent {
    pub fn from_command(step: &str, tool: Option<&str>, command: &str, result: CommandResult, key: ConfigKey) -> Self {
        FailureEvent {
            step: step.into(),
            tool: tool.map(str::to_string),
            command: Some(command.into()),
            result,
            resource: None,
            config_key: key,
            user_input: false,
        }
    }

    pub fn from_resource(step: &str, resource: ResourceRef, key: ConfigKey) -> Self {
        let what = match &resource.problem {
            ResourceProblem::Missing => "missing".to_string(),
            ResourceProblem::Invalid(why) => format!("invalid ({why})"),
        };
        let message = format!("resource {} is {what}: {}\n", resource.key, resource.relative.display());
        FailureEvent {
            step: step.into(),
            tool: None,
            command: None,
            result: CommandResult::synthetic(1, message),
            resource: Some(resource),
            config_key: key,
            user_input: false,
        }
    }

    pub fn signature(&self) -> ProblemSignature {
        ProblemSignature::of(self)
    }

    /// The tool's own diagnostic, verbatim.
    pub fn diagnostic(&self) -> &[u8] {
        if self.result.stderr.is_empty() {
            &self.result.stdout
        } else {
            &self.result.stderr
        }
    }
}

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("config key components must be non-empty: {0}")]
    BadConfigKey(String),
    #[error("fault registry {path} is unreadable: {reason}")]
    RegistryUnreadable { path: PathBuf, reason: String },
    #[error("invalid fallback chain: {0}")]
    BadChain(String),
    #[error("no registered repair case matches exactly; refusing to touch the workspace ({0})")]
    CaseNotClear(String),
    #[error("cannot write repair journal {path}: {reason}")]
    JournalWriteFailed { path: PathBuf, reason: String },
    #[error("repair interrupted after journal entry {0}")]
    Interrupted(usize),
    #[error("solution cache {path} is not writable: {reason}")]
    CacheUnwritable { path: PathBuf, reason: String },
    #[error(transparent)]
    Session(#[from] CleanroomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
