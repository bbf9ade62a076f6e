use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::classify::ClassifyRules;
use super::registry::{FaultRegistry, Workaround};
use super::repair::{diagnose, repair_workspace, RepairOptions};
use super::{Alternative, ConfigKey, ErrorClass, FailureEvent, ProblemSignature, ResourceProblem, SolutionCache};
use crate::cleanroom::{shell_quote, CleanroomError, CommandResult, ShellSession};
use crate::template::{render_command, Vars};

/// Rungs of the recovery ladder, in the order they are tried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Cache,
    Workaround,
    Fallback,
    Repair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Resolution {
    Workaround { description: String, actions: Vec<String> },
    Alternative { alternative: Alternative },
    Repair { case: String },
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resolution::Workaround { description, .. } => write!(f, "workaround: {description}"),
            Resolution::Alternative { alternative } => write!(f, "{alternative}"),
            Resolution::Repair { case } => write!(f, "workspace repair {case}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attempt {
    pub stage: Stage,
    pub description: String,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum OutcomeKind {
    Resolved { how: Resolution, stage: Stage },
    ResolvedWithDefault { value: String },
    Unresolved { root_cause: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub class: ErrorClass,
    pub kind: OutcomeKind,
    pub attempts: Vec<Attempt>,
    pub signature: ProblemSignature,
    /// Where a substituted resource came from.
    pub provenance: Option<PathBuf>,
    /// Successful re-run of the failed command, when verification re-ran it.
    pub retry: Option<CommandResult>,
    pub warnings: Vec<String>,
    pub hint: Option<String>,
}

impl Outcome {
    pub fn is_resolved(&self) -> bool {
        !matches!(self.kind, OutcomeKind::Unresolved { .. })
    }

    pub fn root_cause(&self) -> Option<&str> {
        match &self.kind {
            OutcomeKind::Unresolved { root_cause } => Some(root_cause),
            _ => None,
        }
    }

    /// Ladder stages never go backwards and nothing is tried after a success.
    pub fn ladder_is_ordered(&self) -> bool {
        let stages_sorted = self.attempts.windows(2).all(|w| w[0].stage <= w[1].stage);
        let success_last = self
            .attempts
            .iter()
            .position(|a| a.succeeded)
            .is_none_or(|i| i + 1 == self.attempts.len());
        stages_sorted && success_last
    }
}

pub struct FaultEngine {
    pub registry: FaultRegistry,
    pub cache: SolutionCache,
    pub rules: ClassifyRules,
    /// Workspace repair is attempted only when this is set.
    pub repair: Option<RepairOptions>,
    /// Context for action templates (`{site}`, `{release}`, ...).
    pub vars: Vars,
    pub base_dir: PathBuf,
}

impl std::fmt::Debug for FaultEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FaultEngine")
            .field("workarounds", &self.registry.workarounds().len())
            .field("cached", &self.cache.len())
            .field("repair_gated_in", &self.repair.is_some())
            .finish()
    }
}

enum Applied {
    Ok { provenance: Option<PathBuf>, retry: Option<CommandResult> },
    Default(String),
    Failed,
}

/// Describe what went wrong in terms of the underlying cause.
pub(crate) fn root_cause(event: &FailureEvent) -> String {
    match &event.resource {
        Some(r) => match &r.problem {
            ResourceProblem::Missing => format!("{} is unavailable ({})", r.key, r.relative.display()),
            ResourceProblem::Invalid(why) => format!("{} is invalid: {why} ({})", r.key, r.relative.display()),
        },
        None => {
            let line = event.result.first_error_line();
            if line.is_empty() {
                format!("step {} failed with exit code {}", event.step, event.result.exit_code)
            } else {
                line
            }
        }
    }
}

impl FaultEngine {
    pub fn new(registry: FaultRegistry, cache: SolutionCache, base_dir: &Path) -> Self {
        FaultEngine {
            registry,
            cache,
            rules: ClassifyRules::default(),
            repair: None,
            vars: Vars::new(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    pub fn classify(&self, event: &FailureEvent) -> ErrorClass {
        self.rules.classify(event)
    }

    pub fn preventive(&self, key: &ConfigKey) -> Vec<Workaround> {
        self.registry.preventive_workarounds(key).into_iter().cloned().collect()
    }

    pub fn action_vars(&self, event: &FailureEvent) -> Vars {
        let mut v = self.vars.clone();
        v.insert("step".into(), event.step.clone());
        v.insert("release".into(), event.config_key.release.clone());
        v.insert("configuration".into(), event.config_key.configuration.clone());
        v.insert("platform".into(), event.config_key.platform.clone());
        if let Some(r) = &event.resource {
            v.insert("key".into(), r.key.clone());
            v.insert("path".into(), r.path.to_string_lossy().into_owned());
            v.insert("relative".into(), r.relative.to_string_lossy().into_owned());
        }
        v
    }

    /// An outcome for a failure the ladder does not handle.
    pub fn surface(&self, event: &FailureEvent, class: ErrorClass) -> Outcome {
        let cause = root_cause(event);
        let hint = (class == ErrorClass::Transient)
            .then(|| format!("{cause}; this usually comes and goes: restore it and try again later"));
        Outcome {
            class,
            kind: OutcomeKind::Unresolved { root_cause: cause },
            attempts: Vec::new(),
            signature: event.signature(),
            provenance: None,
            retry: None,
            warnings: Vec::new(),
            hint,
        }
    }

    fn verify(&self, session: &mut ShellSession, event: &FailureEvent) -> Result<Option<Option<CommandResult>>, CleanroomError> {
        if let Some(resource) = &event.resource {
            return Ok(resource.is_satisfied().then_some(None));
        }
        if let Some(cmd) = &event.command {
            let result = session.execute(cmd)?;
            return Ok(result.success().then_some(Some(result)));
        }
        Ok(None)
    }

    fn run_actions(&self, session: &mut ShellSession, actions: &[String], vars: &Vars) -> Result<bool, CleanroomError> {
        for action in actions {
            let cmd = match render_command(action, vars) {
                Ok(cmd) => cmd,
                Err(e) => {
                    log::warn!("skipping action {action:?}: {e}");
                    return Ok(false);
                }
            };
            if !session.execute(&cmd)?.success() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn apply_alternative(
        &self,
        session: &mut ShellSession,
        alternative: &Alternative,
        event: &FailureEvent,
        vars: &Vars,
    ) -> Result<Applied, CleanroomError> {
        match alternative {
            Alternative::AlternativeResource { location } => {
                let Some(resource) = &event.resource else { return Ok(Applied::Failed) };
                let candidate = location.join(&resource.relative);
                let target = resource.path.to_string_lossy().into_owned();
                let dir = resource.path.parent().unwrap_or(Path::new("/")).to_string_lossy().into_owned();
                let cmd = format!(
                    "test -f {c} && mkdir -p {d} && cp -p {c} {t}",
                    c = shell_quote(&candidate.to_string_lossy()),
                    d = shell_quote(&dir),
                    t = shell_quote(&target)
                );
                if !session.execute(&cmd)?.success() {
                    return Ok(Applied::Failed);
                }
                Ok(match self.verify(session, event)? {
                    Some(retry) => Applied::Ok { provenance: Some(candidate), retry },
                    None => Applied::Failed,
                })
            }
            Alternative::AlternativeSource { query } => {
                if !self.run_actions(session, std::slice::from_ref(query), vars)? {
                    return Ok(Applied::Failed);
                }
                Ok(match self.verify(session, event)? {
                    Some(retry) => Applied::Ok { provenance: None, retry },
                    None => Applied::Failed,
                })
            }
            Alternative::AcceptDefault { value } => {
                if let Some(resource) = &event.resource {
                    let dir = resource.path.parent().unwrap_or(Path::new("/")).to_string_lossy().into_owned();
                    let cmd = format!(
                        "mkdir -p {} && printf '%s' {} > {}",
                        shell_quote(&dir),
                        shell_quote(value),
                        shell_quote(&resource.path.to_string_lossy())
                    );
                    if !session.execute(&cmd)?.success() {
                        return Ok(Applied::Failed);
                    }
                }
                Ok(Applied::Default(value.clone()))
            }
        }
    }

    fn apply_resolution(
        &self,
        session: &mut ShellSession,
        resolution: &Resolution,
        event: &FailureEvent,
        vars: &Vars,
    ) -> Result<Applied, CleanroomError> {
        match resolution {
            Resolution::Workaround { actions, .. } => {
                if !self.run_actions(session, actions, vars)? {
                    return Ok(Applied::Failed);
                }
                Ok(match self.verify(session, event)? {
                    Some(retry) => Applied::Ok { provenance: None, retry },
                    None => Applied::Failed,
                })
            }
            Resolution::Alternative { alternative } => self.apply_alternative(session, alternative, event, vars),
            Resolution::Repair { case } => {
                let Some(options) = &self.repair else { return Ok(Applied::Failed) };
                let cases: Vec<_> = self.registry.repair_cases.iter().filter(|c| &c.name == case).cloned().collect();
                match repair_workspace(&diagnose(event, &self.base_dir), &cases, options) {
                    Ok(report) => {
                        log::info!("repaired workspace {} ({})", report.workspace.display(), report.case);
                        Ok(match self.verify(session, event)? {
                            Some(retry) => Applied::Ok { provenance: None, retry },
                            None => Applied::Failed,
                        })
                    }
                    Err(err) => {
                        log::info!("repair not applied: {err}");
                        Ok(Applied::Failed)
                    }
                }
            }
        }
    }

    /// Run the recovery ladder for a broken-system failure: cached solution,
    /// matching workarounds, fallback alternatives, then workspace repair when
    /// gated in. Stops at the first success.
    pub fn resolve(&mut self, session: &mut ShellSession, event: &FailureEvent) -> Result<Outcome, CleanroomError> {
        let class = self.classify(event);
        if class != ErrorClass::SystemBroken {
            return Ok(self.surface(event, class));
        }
        let signature = event.signature();
        let vars = self.action_vars(event);
        let mut outcome = self.surface(event, class);

        let mut candidates: Vec<(Stage, Resolution)> = Vec::new();
        if let Some(record) = self.cache.lookup_solution(&signature) {
            candidates.push((Stage::Cache, record.resolution.clone()));
        }
        for w in self.registry.lookup_workarounds(&event.config_key, event) {
            candidates.push((
                Stage::Workaround,
                Resolution::Workaround { description: w.description.clone(), actions: w.actions.clone() },
            ));
        }
        let chain = self.registry.fallbacks.chain_for(event.resource.as_ref().map(|r| r.key.as_str()));
        for alternative in chain.map(|c| c.alternatives().to_vec()).unwrap_or_default() {
            let applicable = event.resource.is_some() || !matches!(alternative, Alternative::AlternativeResource { .. });
            if applicable {
                candidates.push((Stage::Fallback, Resolution::Alternative { alternative }));
            }
        }
        if self.repair.is_some() {
            let diagnosis = diagnose(event, &self.base_dir);
            for case in &self.registry.repair_cases {
                if case.symptom.is_match(&diagnosis.symptom) {
                    candidates.push((Stage::Repair, Resolution::Repair { case: case.name.clone() }));
                }
            }
        }

        for (stage, resolution) in candidates {
            let applied = self.apply_resolution(session, &resolution, event, &vars)?;
            let succeeded = !matches!(applied, Applied::Failed);
            outcome.attempts.push(Attempt { stage, description: resolution.to_string(), succeeded });
            match applied {
                Applied::Failed => continue,
                Applied::Default(value) => {
                    let warning = format!("{}: accepted default {value:?} and hoping for the best", root_cause(event));
                    log::warn!("{warning}");
                    outcome.warnings.push(warning);
                    outcome.kind = OutcomeKind::ResolvedWithDefault { value };
                }
                Applied::Ok { provenance, retry } => {
                    outcome.provenance = provenance;
                    outcome.retry = retry;
                    if let Err(err) = self.cache.record_solution(signature.clone(), resolution.clone()) {
                        log::warn!("{err}; solution not cached");
                        outcome.warnings.push(err.to_string());
                    }
                    outcome.kind = OutcomeKind::Resolved { how: resolution, stage };
                }
            }
            outcome.hint = None;
            return Ok(outcome);
        }
        Ok(outcome)
    }
}
