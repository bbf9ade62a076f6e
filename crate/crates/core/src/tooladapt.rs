//! Declarative adapters around external tools: locate, probe, set up and
//! repair a tool before anything is allowed to use it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanroom::{shell_quote, CleanroomError, CommandResult, ShellSession};
use crate::template::{render_command, vars, UnknownPlaceholder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    /// File name searched for; defaults to `name`.
    #[serde(default)]
    pub executable: Option<String>,
    /// Command template; `{path}` is the located executable, `{dir}` its directory.
    pub probe_command: String,
    /// Regex the first line of probe stdout must match.
    pub expected_probe_pattern: String,
    pub search_locations: Vec<PathBuf>,
    #[serde(default)]
    pub setup_steps: Vec<String>,
    #[serde(default)]
    pub repair_steps: Vec<String>,
}

impl ToolSpec {
    pub fn executable(&self) -> &str {
        self.executable.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("tool {0} is already registered")]
    DuplicateTool(String),
    #[error("tool {0} is not registered")]
    UnknownTool(String),
    #[error("tool {name}: {reason}")]
    BadSpec { name: String, reason: String },
    #[error(transparent)]
    Template(#[from] UnknownPlaceholder),
    #[error(transparent)]
    Session(#[from] CleanroomError),
}

#[derive(Debug)]
struct Registered {
    spec: ToolSpec,
    probe_pattern: Regex,
}

#[derive(Debug, Clone)]
pub struct ToolHandle(Arc<Registered>);

impl ToolHandle {
    pub fn spec(&self) -> &ToolSpec {
        &self.0.spec
    }

    pub fn name(&self) -> &str {
        &self.0.spec.name
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: IndexMap<String, ToolHandle>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ToolSpec) -> Result<ToolHandle, ToolError> {
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        let bad = |reason: String| ToolError::BadSpec { name: spec.name.clone(), reason };
        if spec.search_locations.is_empty() {
            return Err(bad("no search locations".into()));
        }
        let probe_pattern = Regex::new(&spec.expected_probe_pattern).map_err(|e| bad(e.to_string()))?;
        let handle = ToolHandle(Arc::new(Registered { spec, probe_pattern }));
        self.tools.insert(handle.name().to_string(), handle.clone());
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&ToolHandle> {
        self.tools.get(name)
    }

    pub fn lookup(&self, name: &str) -> Result<&ToolHandle, ToolError> {
        self.get(name).ok_or_else(|| ToolError::UnknownTool(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FoundVia {
    SearchLocation(usize),
    SessionPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Location {
    pub path: PathBuf,
    pub via: FoundVia,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LocationReport {
    pub tool: String,
    pub found: Option<Location>,
    /// Search locations tried, in order.
    pub searched: Vec<PathBuf>,
}

pub fn locate(session: &mut ShellSession, tool: &ToolHandle) -> Result<LocationReport, ToolError> {
    let spec = tool.spec();
    let exe = spec.executable();
    let mut searched = Vec::new();
    for (idx, dir) in spec.search_locations.iter().enumerate() {
        searched.push(dir.clone());
        let candidate = dir.join(exe);
        let probe = session.execute(&format!("test -f {0} && test -x {0}", shell_quote(&candidate.to_string_lossy())))?;
        if probe.success() {
            return Ok(LocationReport {
                tool: spec.name.clone(),
                found: Some(Location { path: candidate, via: FoundVia::SearchLocation(idx) }),
                searched,
            });
        }
    }
    let on_path = session.execute(&format!("command -v {}", shell_quote(exe)))?;
    let hit = on_path.first_stdout_line();
    let found = (on_path.success() && hit.starts_with('/')).then(|| Location {
        path: PathBuf::from(hit),
        via: FoundVia::SessionPath,
    });
    Ok(LocationReport { tool: spec.name.clone(), found, searched })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolAction {
    Locate,
    Probe,
    Setup,
    Reprobe,
    Repair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolEvidence {
    pub action: ToolAction,
    pub command: String,
    pub exit_code: u8,
    pub first_line: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolState {
    Ready,
    RepairedThenReady,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolStatus {
    pub tool: String,
    pub state: ToolState,
    pub location: Option<PathBuf>,
    pub searched: Vec<PathBuf>,
    pub evidence: Vec<ToolEvidence>,
}

impl ToolStatus {
    pub fn is_usable(&self) -> bool {
        self.state != ToolState::Unavailable
    }

    pub fn count(&self, action: ToolAction) -> usize {
        self.evidence.iter().filter(|e| e.action == action).count()
    }
}

fn evidence(action: ToolAction, command: String, result: &CommandResult, passed: bool) -> ToolEvidence {
    ToolEvidence {
        action,
        command,
        exit_code: result.exit_code,
        first_line: result.first_error_line(),
        passed,
    }
}

/// Locate, probe, and if needed run one setup pass and one repair pass,
/// re-probing after each.
pub fn ensure(session: &mut ShellSession, tool: &ToolHandle) -> Result<ToolStatus, ToolError> {
    let report = locate(session, tool)?;
    let spec = tool.spec();
    let mut status = ToolStatus {
        tool: spec.name.clone(),
        state: ToolState::Unavailable,
        location: None,
        searched: report.searched.clone(),
        evidence: Vec::new(),
    };
    let Some(location) = report.found else {
        status.evidence.push(ToolEvidence {
            action: ToolAction::Locate,
            command: format!("locate {}", spec.executable()),
            exit_code: 1,
            first_line: format!(
                "not found in {}",
                report.searched.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
            ),
            passed: false,
        });
        return Ok(status);
    };
    status.location = Some(location.path.clone());
    let dir = location.path.parent().unwrap_or(Path::new("/")).to_string_lossy().into_owned();
    let v = vars([("path", location.path.to_string_lossy().into_owned()), ("dir", dir)]);
    let probe_cmd = render_command(&spec.probe_command, &v)?;

    let probe = |session: &mut ShellSession, action: ToolAction, status: &mut ToolStatus| -> Result<bool, ToolError> {
        let result = session.execute(&probe_cmd)?;
        let passed = tool.0.probe_pattern.is_match(&result.first_stdout_line());
        status.evidence.push(evidence(action, probe_cmd.clone(), &result, passed));
        Ok(passed)
    };

    if probe(session, ToolAction::Probe, &mut status)? {
        status.state = ToolState::Ready;
        return Ok(status);
    }
    for (steps, action) in [(&spec.setup_steps, ToolAction::Setup), (&spec.repair_steps, ToolAction::Repair)] {
        if steps.is_empty() {
            continue;
        }
        for step in steps {
            let cmd = render_command(step, &v)?;
            let result = session.execute(&cmd)?;
            let ok = result.success();
            status.evidence.push(evidence(action, cmd, &result, ok));
        }
        if probe(session, ToolAction::Reprobe, &mut status)? {
            status.state = ToolState::RepairedThenReady;
            return Ok(status);
        }
    }
    Ok(status)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str) -> ToolSpec {
        ToolSpec {
            name: name.into(),
            executable: None,
            probe_command: "{path} --version".into(),
            expected_probe_pattern: "^ok".into(),
            search_locations: vec![PathBuf::from("/nonexistent")],
            setup_steps: vec![],
            repair_steps: vec![],
        }
    }

    #[test]
    fn register_and_lookup() {
        let mut reg = ToolRegistry::new();
        reg.register(spec("mockbuild")).unwrap();
        assert_eq!(reg.lookup("mockbuild").unwrap().name(), "mockbuild");
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut reg = ToolRegistry::new();
        reg.register(spec("mockbuild")).unwrap();
        assert!(matches!(reg.register(spec("mockbuild")), Err(ToolError::DuplicateTool(_))));
    }

    #[test]
    fn distinct_tools_both_resolvable() {
        let mut reg = ToolRegistry::new();
        reg.register(spec("a")).unwrap();
        reg.register(spec("b")).unwrap();
        assert!(reg.get("a").is_some() && reg.get("b").is_some());
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn spec_without_locations_rejected() {
        let mut s = spec("x");
        s.search_locations.clear();
        assert!(matches!(ToolRegistry::new().register(s), Err(ToolError::BadSpec { .. })));
    }
}
