use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::plan::{plan, ExecutionPlan};
use super::{Phase, Recipe, RecipeError, RecipeRegistry, Step};
use crate::cleanroom::{CommandResult, ShellSession};
use crate::events::EventKind;
use crate::faults::{
    Attempt, ConfigKey, ErrorClass, FailureEvent, FaultEngine, Outcome, OutcomeKind, ResourceOwner, ResourceProblem,
    ResourceRef,
};
use crate::template::{render_command, render_text, Vars};
use crate::tooladapt::{ensure, ToolAction, ToolRegistry, ToolState, ToolStatus};

/// Everything a recipe needs to run. `vars` holds the context roots
/// (`site`, `release`, `mode`, `platform`, ...); `base_dir` is added from
/// the session.
pub struct RunContext<'a> {
    pub session: &'a mut ShellSession,
    pub registry: &'a RecipeRegistry,
    pub tools: &'a ToolRegistry,
    pub faults: &'a mut FaultEngine,
    pub config_key: ConfigKey,
    pub vars: Vars,
    /// Expected sha256 by absolute path, from the release manifest.
    pub manifest_hashes: BTreeMap<PathBuf, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEntry {
    Reset { cwd: PathBuf },
    Preventive { description: String, applied: bool },
    Skipped { step: String, reason: String },
    Tool { step: String, tool: String, state: ToolState, location: Option<PathBuf>, actions: Vec<ToolAction> },
    Step { step: String, phase: Phase, command: String, exit_code: u8, duration_ms: u64 },
    Failure { step: String, class: ErrorClass, signature: String, message: String },
    Recovery { step: String, resolved: bool, attempts: Vec<Attempt>, provenance: Option<PathBuf>, warnings: Vec<String> },
    Artifact { path: String, sha256: String },
}

impl TraceEntry {
    pub fn label(&self) -> &'static str {
        match self {
            TraceEntry::Reset { .. } => "reset",
            TraceEntry::Preventive { .. } => "preventive",
            TraceEntry::Skipped { .. } => "skipped",
            TraceEntry::Tool { .. } => "tool",
            TraceEntry::Step { .. } => "step",
            TraceEntry::Failure { .. } => "failure",
            TraceEntry::Recovery { .. } => "recovery",
            TraceEntry::Artifact { .. } => "artifact",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecipeResult {
    pub recipe: String,
    pub plan: ExecutionPlan,
    pub trace: Vec<TraceEntry>,
    /// Produced files relative to the base directory, with their sha256.
    pub artifacts: BTreeMap<String, String>,
    pub outcomes: Vec<Outcome>,
}

impl RecipeResult {
    /// Step ids whose action ran, in order.
    pub fn executed_steps(&self) -> Vec<&str> {
        steps_run(&self.trace)
    }

    pub fn warnings(&self) -> Vec<&str> {
        self.outcomes.iter().flat_map(|o| o.warnings.iter().map(String::as_str)).collect()
    }
}

fn steps_run(trace: &[TraceEntry]) -> Vec<&str> {
    trace
        .iter()
        .filter_map(|t| match t {
            TraceEntry::Step { step, .. } => Some(step.as_str()),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RecipeFailure {
    pub recipe: String,
    pub step: String,
    pub class: ErrorClass,
    pub root_cause: String,
    /// The failing tool's own diagnostic, byte for byte.
    #[serde(serialize_with = "lossy")]
    pub diagnostic: Vec<u8>,
    pub hint: Option<String>,
    pub outcome: Option<Outcome>,
    pub trace: Vec<TraceEntry>,
}

fn lossy<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&String::from_utf8_lossy(bytes))
}

impl std::fmt::Display for RecipeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: step {} failed ({}): {}", self.recipe, self.step, self.class, self.root_cause)
    }
}

impl RecipeFailure {
    pub fn executed_steps(&self) -> Vec<&str> {
        steps_run(&self.trace)
    }
}

struct StepFailure {
    class: ErrorClass,
    root_cause: String,
    diagnostic: Vec<u8>,
    hint: Option<String>,
    outcome: Option<Outcome>,
}

impl StepFailure {
    fn from_outcome(event: &FailureEvent, outcome: Outcome) -> Self {
        StepFailure {
            class: outcome.class,
            root_cause: outcome.root_cause().unwrap_or_default().to_string(),
            diagnostic: event.diagnostic().to_vec(),
            hint: outcome.hint.clone(),
            outcome: Some(outcome),
        }
    }
}

struct Runner<'c, 'a> {
    ctx: &'c mut RunContext<'a>,
    vars: Vars,
    trace: Vec<TraceEntry>,
    outcomes: Vec<Outcome>,
}

pub fn run_recipe(ctx: &mut RunContext, recipe: &Recipe, inputs: &BTreeMap<String, String>) -> Result<RecipeResult, RecipeError> {
    let inputs = recipe.resolve_inputs(inputs)?;
    let satisfied = ctx.session.satisfied_steps().clone();
    let plan = plan(ctx.registry, recipe, &satisfied)?;
    run_plan(ctx, &recipe.name, plan, &inputs)
}

/// Execute a prepared plan: reset the shell, apply preventive workarounds,
/// then run each step. After a failure only always-run finalize steps run.
pub fn run_plan(
    ctx: &mut RunContext,
    name: &str,
    plan: ExecutionPlan,
    inputs: &BTreeMap<String, String>,
) -> Result<RecipeResult, RecipeError> {
    let mut vars = ctx.vars.clone();
    vars.insert("base_dir".into(), ctx.session.base_dir().to_string_lossy().into_owned());
    vars.extend(inputs.clone());
    let mut runner = Runner { ctx, vars, trace: Vec::new(), outcomes: Vec::new() };
    runner.log(format!("recipe {name}: {} step(s) planned", plan.entries.len()));

    let cwd = runner.ctx.session.reset_to_known_state()?;
    runner.trace.push(TraceEntry::Reset { cwd });
    runner.preventive()?;

    let mut failed: Option<(String, StepFailure)> = None;
    for entry in &plan.entries {
        if let Some(reason) = &entry.skip {
            runner.trace.push(TraceEntry::Skipped { step: entry.step.clone(), reason: reason.clone() });
            continue;
        }
        let step = runner.ctx.registry.step(&entry.step).expect("planned steps are defined").clone();
        if failed.is_some() && !(entry.phase == Phase::Finalize && step.always_run) {
            runner.trace.push(TraceEntry::Skipped { step: step.id.clone(), reason: "an earlier step failed".into() });
            continue;
        }
        match runner.step(&step, entry.phase)? {
            Ok(()) => {
                if step.shared && entry.phase == Phase::Init {
                    runner.ctx.session.mark_satisfied(&step.id);
                }
            }
            Err(failure) => {
                runner.log(format!("step {} failed ({}): {}", step.id, failure.class, failure.root_cause));
                if failed.is_none() {
                    failed = Some((step.id.clone(), failure));
                }
            }
        }
    }

    let artifacts = runner.artifacts(&plan)?;
    let Runner { ctx, trace, outcomes, .. } = runner;
    if let Some((step, f)) = failed {
        if let Some(bus) = ctx.session.event_bus() {
            bus.publish(EventKind::Status, "recipe", format!("{name} failed at {step}"));
        }
        return Err(RecipeError::RecipeFailed(Box::new(RecipeFailure {
            recipe: name.into(),
            step,
            class: f.class,
            root_cause: f.root_cause,
            diagnostic: f.diagnostic,
            hint: f.hint,
            outcome: f.outcome,
            trace,
        })));
    }
    if let Some(bus) = ctx.session.event_bus() {
        bus.publish(EventKind::Status, "recipe", format!("{name} succeeded"));
    }
    Ok(RecipeResult { recipe: name.into(), plan, trace, artifacts, outcomes })
}

type StepResult = Result<Result<(), StepFailure>, RecipeError>;

impl Runner<'_, '_> {
    fn log(&self, message: String) {
        log::info!("{message}");
        if let Some(bus) = self.ctx.session.event_bus() {
            bus.publish(EventKind::Log, "recipe", message);
        }
    }

    fn preventive(&mut self) -> Result<(), RecipeError> {
        for w in self.ctx.faults.preventive(&self.ctx.config_key) {
            let mut applied = true;
            let mut vars = self.ctx.faults.vars.clone();
            vars.extend(self.vars.clone());
            for action in &w.actions {
                let cmd = render_command(action, &vars)?;
                if !self.ctx.session.execute(&cmd)?.success() {
                    applied = false;
                    break;
                }
            }
            self.trace.push(TraceEntry::Preventive { description: w.description.clone(), applied });
        }
        Ok(())
    }

    fn resolve(&mut self, event: &FailureEvent) -> Result<Outcome, RecipeError> {
        let outcome = self.ctx.faults.resolve(self.ctx.session, event)?;
        self.trace.push(TraceEntry::Failure {
            step: event.step.clone(),
            class: outcome.class,
            signature: outcome.signature.0.clone(),
            message: event.result.first_error_line(),
        });
        if outcome.class == ErrorClass::SystemBroken {
            self.trace.push(TraceEntry::Recovery {
                step: event.step.clone(),
                resolved: outcome.is_resolved(),
                attempts: outcome.attempts.clone(),
                provenance: outcome.provenance.clone(),
                warnings: outcome.warnings.clone(),
            });
        }
        self.log(match &outcome.kind {
            OutcomeKind::Resolved { how, .. } => format!("recovered {}: {how}", event.step),
            OutcomeKind::ResolvedWithDefault { value } => format!("recovered {} with default {value:?}", event.step),
            OutcomeKind::Unresolved { root_cause } => format!("{} ({}): {root_cause}", event.step, outcome.class),
        });
        self.outcomes.push(outcome.clone());
        Ok(outcome)
    }

    fn step(&mut self, step: &Step, phase: Phase) -> StepResult {
        for tool in &step.requires_tools {
            if let Err(f) = self.tool(step, tool)? {
                return Ok(Err(f));
            }
        }
        for key in &step.requires_resources {
            if let Err(f) = self.resource(step, key)? {
                return Ok(Err(f));
            }
        }
        let command = render_command(&step.action, &self.vars)?;
        self.log(format!("step {}", step.id));
        let result = self.ctx.session.execute(&command)?;
        self.record(step, phase, &command, &result);
        if !result.success() {
            let exit_code = result.exit_code;
            let mut event = FailureEvent::from_command(
                &step.id,
                step.requires_tools.first().map(String::as_str),
                &command,
                result,
                self.ctx.config_key.clone(),
            );
            event.user_input = step.blames_user(exit_code);
            // a masked cause: the command failed because a transient
            // resource it depends on is gone
            event.resource = self.missing_transient(step)?;
            let outcome = self.resolve(&event)?;
            if !outcome.is_resolved() {
                return Ok(Err(StepFailure::from_outcome(&event, outcome)));
            }
            let rerun = match &outcome.retry {
                Some(r) => r.clone(),
                None => self.ctx.session.execute(&command)?,
            };
            self.record(step, phase, &command, &rerun);
            if !rerun.success() {
                let ev = FailureEvent::from_command(&step.id, None, &command, rerun, self.ctx.config_key.clone());
                let mut outcome = outcome;
                outcome.kind = OutcomeKind::Unresolved { root_cause: ev.result.first_error_line() };
                return Ok(Err(StepFailure::from_outcome(&ev, outcome)));
            }
        }
        for artifact in &step.produces {
            let rel = render_text(artifact, &self.vars)?;
            if !self.ctx.session.base_dir().join(&rel).is_file() {
                let message = format!("step {} did not produce {rel}", step.id);
                return Ok(Err(StepFailure {
                    class: ErrorClass::SystemBroken,
                    root_cause: message.clone(),
                    diagnostic: message.into_bytes(),
                    hint: None,
                    outcome: None,
                }));
            }
        }
        Ok(Ok(()))
    }

    fn record(&mut self, step: &Step, phase: Phase, command: &str, result: &CommandResult) {
        self.trace.push(TraceEntry::Step {
            step: step.id.clone(),
            phase,
            command: command.into(),
            exit_code: result.exit_code,
            duration_ms: result.duration.as_millis() as u64,
        });
    }

    fn push_tool(&mut self, step: &Step, status: &ToolStatus) {
        self.trace.push(TraceEntry::Tool {
            step: step.id.clone(),
            tool: status.tool.clone(),
            state: status.state,
            location: status.location.clone(),
            actions: status.evidence.iter().map(|e| e.action).collect(),
        });
    }

    fn tool(&mut self, step: &Step, name: &str) -> StepResult {
        let handle = self.ctx.tools.lookup(name)?.clone();
        let status = ensure(self.ctx.session, &handle)?;
        self.push_tool(step, &status);
        if status.is_usable() {
            return Ok(Ok(()));
        }
        let spec = handle.spec();
        let event = match &status.location {
            None => {
                let path = spec.search_locations[0].join(spec.executable());
                let resource = ResourceRef {
                    key: format!("tool:{name}"),
                    relative: self.relative_to_site(&path),
                    expected_sha256: self.ctx.manifest_hashes.get(&path).cloned(),
                    path,
                    owner: ResourceOwner::Distribution,
                    problem: ResourceProblem::Missing,
                };
                FailureEvent::from_resource(&step.id, resource, self.ctx.config_key.clone())
            }
            Some(_) => {
                let last = status.evidence.last().expect("a located tool was probed");
                let result = CommandResult::synthetic(last.exit_code.max(1), format!("{}\n", last.first_line));
                FailureEvent::from_command(&step.id, Some(name), &last.command, result, self.ctx.config_key.clone())
            }
        };
        let outcome = self.resolve(&event)?;
        if !outcome.is_resolved() {
            return Ok(Err(StepFailure::from_outcome(&event, outcome)));
        }
        let status = ensure(self.ctx.session, &handle)?;
        self.push_tool(step, &status);
        if status.is_usable() {
            return Ok(Ok(()));
        }
        let mut outcome = outcome;
        outcome.kind = OutcomeKind::Unresolved { root_cause: format!("tool {name} is still unavailable after recovery") };
        Ok(Err(StepFailure::from_outcome(&event, outcome)))
    }

    fn relative_to_site(&self, path: &Path) -> PathBuf {
        self.vars
            .get("site")
            .and_then(|site| path.strip_prefix(site).ok())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(path.file_name().unwrap_or_default()))
    }

    fn resource_ref(&self, key: &str) -> Result<Option<ResourceRef>, RecipeError> {
        let def = self.ctx.registry.resource(key).ok_or_else(|| RecipeError::UnknownResource(key.into()))?;
        if let Some(unless) = &def.unless {
            if self.ctx.session.base_dir().join(render_text(unless, &self.vars)?).exists() {
                return Ok(None);
            }
        }
        let root = self
            .vars
            .get(&def.root)
            .ok_or_else(|| RecipeError::InputInvalid(format!("resource {key} needs context root {:?}", def.root)))?;
        let relative = PathBuf::from(render_text(&def.path, &self.vars)?);
        let path = Path::new(root).join(&relative);
        let expected_sha256 = self.ctx.manifest_hashes.get(&path).cloned();
        let problem = match std::fs::read(&path) {
            Err(_) => ResourceProblem::Missing,
            Ok(bytes) => match &expected_sha256 {
                Some(h) if &crate::sha256_hex(&bytes) != h => ResourceProblem::Invalid("content does not match the release manifest".into()),
                _ => return Ok(None),
            },
        };
        Ok(Some(ResourceRef { key: key.into(), path, relative, owner: def.owner, expected_sha256, problem }))
    }

    fn missing_transient(&self, step: &Step) -> Result<Option<ResourceRef>, RecipeError> {
        for key in &step.requires_resources {
            let transient = self.ctx.registry.resource(key).is_some_and(|d| d.owner == ResourceOwner::Transient);
            if transient {
                if let Some(r) = self.resource_ref(key)? {
                    return Ok(Some(r));
                }
            }
        }
        Ok(None)
    }

    fn resource(&mut self, step: &Step, key: &str) -> StepResult {
        // transient resources are only examined once something fails
        if self.ctx.registry.resource(key).is_some_and(|d| d.owner == ResourceOwner::Transient) {
            return Ok(Ok(()));
        }
        let Some(resource) = self.resource_ref(key)? else { return Ok(Ok(())) };
        let event = FailureEvent::from_resource(&step.id, resource, self.ctx.config_key.clone());
        let outcome = self.resolve(&event)?;
        if outcome.is_resolved() {
            Ok(Ok(()))
        } else {
            Ok(Err(StepFailure::from_outcome(&event, outcome)))
        }
    }

    fn artifacts(&mut self, plan: &ExecutionPlan) -> Result<BTreeMap<String, String>, RecipeError> {
        let mut out = BTreeMap::new();
        for entry in &plan.entries {
            let step = self.ctx.registry.step(&entry.step).expect("planned steps are defined");
            for artifact in &step.produces {
                let rel = render_text(artifact, &self.vars)?;
                if let Ok(bytes) = std::fs::read(self.ctx.session.base_dir().join(&rel)) {
                    out.insert(rel, crate::sha256_hex(&bytes));
                }
            }
        }
        for (path, sha256) in &out {
            self.trace.push(TraceEntry::Artifact { path: path.clone(), sha256: sha256.clone() });
        }
        Ok(out)
    }
}
