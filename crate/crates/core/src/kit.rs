//! The kit: one clean-room session wired to the recipe catalog, the tool
//! adapters, the fault engine and the event stream.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanroom::{
    host_environment, CleanroomError, CommandResult, EnvMap, EnvironmentProfile, ExpertMode, ProfileConfig, SessionOptions,
    ShellSession, DEFAULT_SHELL, DEFAULT_TIMEOUT,
};
use crate::events::{EventBus, EventKind};
use crate::faults::{
    Alternative, ConfigKey, ErrorClass, FallbackChain, FaultEngine, FaultError, FaultRegistry, RepairOptions, SolutionCache,
};
use crate::interact::{start_interactive, Bridge, InteractError, PromptSpec, DEFAULT_QUIESCENCE};
use crate::manifest::{latest_release, ManifestError, ReleaseManifest};
use crate::recipes::{list_recipes, run_recipe, RecipeError, RecipeInfo, RecipeRegistry, RecipeResult, RunContext};
use crate::scaffold::{self, ChangeSet, PackageSpec, ScaffoldError, SkeletonManifest};
use crate::template::{render_text, Vars};
use crate::tooladapt::{ToolError, ToolRegistry, ToolSpec};

const PROFILE: &str = include_str!("../data/profile.toml");
const TOOLS: &str = include_str!("../data/tools.toml");
const FAULTS: &str = include_str!("../data/faults.jsonl");

pub const FRAMEWORK_PROGRAM: &str = "sbxrun";
pub const FRAMEWORK_PROMPT: &str = "^ask> ";

#[derive(Debug, Error)]
pub enum KitError {
    #[error("options file {file} not found in the work area or the release")]
    OptionsNotFound { file: String, searched: Vec<PathBuf> },
    #[error("no software site configured")]
    NoSite,
    #[error("cannot tell which release to use under {0}")]
    NoRelease(PathBuf),
    #[error("invalid kit configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Session(#[from] CleanroomError),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Interact(#[from] InteractError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KitError {
    pub fn class(&self) -> ErrorClass {
        match self {
            KitError::OptionsNotFound { .. } => ErrorClass::UserAction,
            KitError::Recipe(e) => e.class().unwrap_or(ErrorClass::SystemBroken),
            KitError::Scaffold(
                ScaffoldError::BadName(_)
                | ScaffoldError::AlreadyExists(_)
                | ScaffoldError::NotAPackage(_)
                | ScaffoldError::UnknownOverrideKey(_)
                | ScaffoldError::UnknownRelease { .. },
            ) => ErrorClass::UserAction,
            KitError::Interact(
                InteractError::BadPrompt(_) | InteractError::NotAtPrompt | InteractError::MultiLineInput | InteractError::BridgeClosed(_),
            ) => ErrorClass::UserAction,
            _ => ErrorClass::SystemBroken,
        }
    }

    /// 1 for mistakes the user can fix, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::UserAction => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KitConfig {
    pub base_dir: PathBuf,
    pub mode: ExpertMode,
    pub site: Option<PathBuf>,
    /// Defaults to the release the site marks as latest.
    pub release: Option<String>,
    pub configuration: String,
    /// Roots searched, in order, for copies of missing site files.
    pub fallback_sites: Vec<PathBuf>,
    pub profile: Option<ProfileConfig>,
    /// Environment the session starts from; the real one when absent.
    pub host_env: Option<EnvMap>,
    pub timeout: Duration,
    pub state_dir: Option<PathBuf>,
    pub cache_path: Option<PathBuf>,
    pub repair: bool,
    pub persist_events: bool,
}

impl KitConfig {
    pub fn new(base_dir: &Path) -> Self {
        KitConfig {
            base_dir: base_dir.to_path_buf(),
            mode: ExpertMode::NonExpert,
            site: None,
            release: None,
            configuration: "debug".into(),
            fallback_sites: Vec::new(),
            profile: None,
            host_env: None,
            timeout: DEFAULT_TIMEOUT,
            state_dir: None,
            cache_path: None,
            repair: true,
            persist_events: true,
        }
    }

    pub fn state_dir(&self) -> PathBuf {
        self.state_dir.clone().unwrap_or_else(|| self.base_dir.join(".startkit"))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_path.clone().unwrap_or_else(|| self.state_dir().join("solutions.jsonl"))
    }
}

pub fn default_profile() -> ProfileConfig {
    toml::from_str(PROFILE).expect("built-in profile parses")
}

#[derive(Deserialize)]
struct ToolsFile {
    tool: Vec<ToolSpec>,
}

fn builtin_tools(context: &Vars) -> Result<ToolRegistry, KitError> {
    let file: ToolsFile = toml::from_str(TOOLS).map_err(|e| KitError::Config(format!("tools: {e}")))?;
    let mut tools = ToolRegistry::new();
    for mut spec in file.tool {
        spec.search_locations = spec
            .search_locations
            .iter()
            .map(|l| render_text(&l.to_string_lossy(), context).map(PathBuf::from))
            .collect::<Result<_, _>>()
            .map_err(ToolError::from)?;
        tools.register(spec)?;
    }
    Ok(tools)
}

/// What `invoke` leaves behind besides its return value.
#[derive(Debug, Serialize)]
struct TraceFile<'a> {
    recipe: &'a str,
    inputs: &'a BTreeMap<String, String>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<&'a RecipeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a crate::recipes::RecipeFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub struct Kit {
    config: KitConfig,
    release: Option<String>,
    session: ShellSession,
    events: EventBus,
    recipes: RecipeRegistry,
    tools: ToolRegistry,
    faults: FaultEngine,
    manifest: Option<ReleaseManifest>,
    config_key: ConfigKey,
    vars: Vars,
    last_trace: Option<PathBuf>,
}

impl std::fmt::Debug for Kit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kit")
            .field("base_dir", &self.config.base_dir)
            .field("site", &self.config.site)
            .field("release", &self.release)
            .finish()
    }
}

impl Kit {
    pub fn open(config: KitConfig) -> Result<Self, KitError> {
        let profile: EnvironmentProfile = config.profile.clone().unwrap_or_else(default_profile).try_into()?;
        let state_dir = config.state_dir();
        std::fs::create_dir_all(&state_dir)?;
        let events = EventBus::new();
        if config.persist_events {
            let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default().as_millis();
            events.persist_to(&state_dir.join("logs").join(format!("events-{stamp}-{}.jsonl", std::process::id())))?;
        }
        let session = ShellSession::spawn_with(
            profile,
            config.mode,
            &config.base_dir,
            SessionOptions {
                shell: PathBuf::from(DEFAULT_SHELL),
                timeout: config.timeout,
                host_env: Some(config.host_env.clone().unwrap_or_else(host_environment)),
                events: Some(events.clone()),
            },
        )?;

        let release = match (&config.release, &config.site) {
            (Some(r), _) => Some(r.clone()),
            (None, Some(site)) => Some(latest_release(site).ok_or_else(|| KitError::NoRelease(site.clone()))?),
            (None, None) => None,
        };
        let manifest = match (&config.site, &release) {
            (Some(site), Some(r)) => Some(ReleaseManifest::load(site, r)?),
            _ => None,
        };
        let platform = ConfigKey::host_platform();
        let config_key = ConfigKey::new(release.as_deref().unwrap_or("none"), &config.configuration, &platform)?;

        let mut vars = Vars::new();
        vars.insert("release".into(), release.clone().unwrap_or_default());
        vars.insert("mode".into(), config.configuration.clone());
        vars.insert("platform".into(), platform);
        let tools = match &config.site {
            Some(site) => {
                vars.insert("site".into(), site.to_string_lossy().into_owned());
                builtin_tools(&vars)?
            }
            None => ToolRegistry::new(),
        };

        let mut registry = FaultRegistry::parse(FAULTS, Path::new("faults.jsonl"))?;
        if !config.fallback_sites.is_empty() {
            let chain = FallbackChain::new(
                config.fallback_sites.iter().map(|s| Alternative::AlternativeResource { location: s.clone() }).collect(),
            )?;
            registry.fallbacks.add("release:*", chain.clone());
            registry.fallbacks.add("tool:*", chain);
        }
        let mut faults = FaultEngine::new(registry, SolutionCache::open(&config.cache_path()), &config.base_dir);
        faults.vars = vars.clone();
        if config.repair {
            faults.repair = Some(RepairOptions::new(state_dir.join("repair-journal.jsonl")));
        }

        events.publish(
            EventKind::Status,
            "kit",
            format!("kit ready in {} ({} mode, release {})", config.base_dir.display(), config.mode, release.as_deref().unwrap_or("none")),
        );
        Ok(Kit {
            config,
            release,
            session,
            events,
            recipes: RecipeRegistry::builtin(),
            tools,
            faults,
            manifest,
            config_key,
            vars,
            last_trace: None,
        })
    }

    pub fn config(&self) -> &KitConfig {
        &self.config
    }

    pub fn base_dir(&self) -> &Path {
        &self.config.base_dir
    }

    pub fn release(&self) -> Option<&str> {
        self.release.as_deref()
    }

    pub fn manifest(&self) -> Option<&ReleaseManifest> {
        self.manifest.as_ref()
    }

    pub fn events(&self) -> &EventBus {
        &self.events
    }

    pub fn session(&mut self) -> &mut ShellSession {
        &mut self.session
    }

    pub fn recipes(&self) -> &RecipeRegistry {
        &self.recipes
    }

    pub fn faults(&self) -> &FaultEngine {
        &self.faults
    }

    pub fn last_trace(&self) -> Option<&Path> {
        self.last_trace.as_deref()
    }

    pub fn catalog(&self) -> Vec<RecipeInfo> {
        list_recipes(&self.recipes)
    }

    /// Run a command in the session as typed.
    pub fn shell(&mut self, command: &str) -> Result<CommandResult, KitError> {
        Ok(self.session.execute(command)?)
    }

    fn require_options(&self, file: &str) -> Result<(), KitError> {
        let local = self.config.base_dir.join(file);
        if local.is_file() || self.manifest.as_ref().is_some_and(|m| m.declares_options(file)) {
            return Ok(());
        }
        Err(KitError::OptionsNotFound { file: file.into(), searched: vec![local] })
    }

    fn persist_trace(&mut self, name: &str, inputs: &BTreeMap<String, String>, outcome: &Result<RecipeResult, KitError>) {
        let dir = self.config.state_dir().join("traces");
        let write = || -> std::io::Result<PathBuf> {
            std::fs::create_dir_all(&dir)?;
            let n = std::fs::read_dir(&dir)?.count() + 1;
            let path = dir.join(format!("{n:04}-{name}.json"));
            let file = match outcome {
                Ok(r) => TraceFile { recipe: name, inputs, status: "ok", result: Some(r), failure: None, error: None },
                Err(KitError::Recipe(e)) if e.failure().is_some() => {
                    TraceFile { recipe: name, inputs, status: "failed", result: None, failure: e.failure(), error: None }
                }
                Err(e) => TraceFile { recipe: name, inputs, status: "failed", result: None, failure: None, error: Some(e.to_string()) },
            };
            std::fs::write(&path, serde_json::to_string_pretty(&file).expect("trace serializes"))?;
            Ok(path)
        };
        match write() {
            Ok(path) => self.last_trace = Some(path),
            Err(e) => log::warn!("cannot write trace for {name}: {e}"),
        }
    }

    /// Run a recipe by name. Every invocation leaves a trace file.
    pub fn invoke(&mut self, name: &str, inputs: &BTreeMap<String, String>) -> Result<RecipeResult, KitError> {
        let outcome = self.invoke_inner(name, inputs);
        self.persist_trace(name, inputs, &outcome);
        if let Err(e) = &outcome {
            self.events.publish(EventKind::Status, "kit", format!("{name} failed: {e}"));
        }
        outcome
    }

    fn invoke_inner(&mut self, name: &str, inputs: &BTreeMap<String, String>) -> Result<RecipeResult, KitError> {
        let recipe = self.recipes.recipe(name)?.clone();
        let resolved = recipe.resolve_inputs(inputs)?;
        if let Some(options) = resolved.get("options") {
            self.require_options(options)?;
        }
        if self.config.site.is_none() && !recipe.phased_steps().is_empty() {
            return Err(KitError::NoSite);
        }
        let mut ctx = RunContext {
            session: &mut self.session,
            registry: &self.recipes,
            tools: &self.tools,
            faults: &mut self.faults,
            config_key: self.config_key.clone(),
            vars: self.vars.clone(),
            manifest_hashes: match (&self.manifest, &self.config.site) {
                (Some(m), Some(site)) => m.hashes_under(site),
                _ => BTreeMap::new(),
            },
        };
        Ok(run_recipe(&mut ctx, &recipe, &resolved)?)
    }

    /// Locate an options file: the work area first, then the release.
    fn options_text(&self, file: &str) -> Result<String, KitError> {
        let mut searched = vec![self.config.base_dir.join(file)];
        if let (Some(site), Some(release)) = (&self.config.site, &self.release) {
            searched.push(site.join("releases").join(release).join("options").join(file));
        }
        searched
            .iter()
            .find_map(|p| std::fs::read_to_string(p).ok())
            .ok_or(KitError::OptionsNotFound { file: file.into(), searched })
    }

    /// Run the framework on an options file, taking the output name from it.
    pub fn run_options(&mut self, file: &str) -> Result<RecipeResult, KitError> {
        let text = self.options_text(file)?;
        let mut inputs = BTreeMap::from([("options".to_string(), file.to_string())]);
        if let Some(output) = text.lines().find_map(|l| {
            let (key, value) = l.split_once('=')?;
            (key.trim() == "output").then(|| value.trim().to_string())
        }) {
            inputs.insert("output".into(), output);
        }
        self.invoke("run", &inputs)
    }

    /// A standalone script equivalent to `invoke(name, inputs)` from a cold start.
    pub fn script(&mut self, name: &str, inputs: &BTreeMap<String, String>) -> Result<String, KitError> {
        let recipe = self.recipes.recipe(name)?.clone();
        let resolved = recipe.resolve_inputs(inputs)?;
        let env = self.session.environment()?;
        let profile = self.session.profile().clone();
        Ok(scaffold::generate_run_script(&self.recipes, &recipe, &resolved, &self.vars, &env, &profile, self.config.mode)?)
    }

    pub fn new_package(&mut self, name: &str) -> Result<SkeletonManifest, KitError> {
        let manifest = self.manifest.as_ref().ok_or(KitError::NoSite)?;
        let mut spec = PackageSpec::new(name, &manifest.release);
        spec.compile_mode = self.config.configuration.clone();
        let skeleton = scaffold::generate_package(&spec, &self.config.base_dir, manifest)?;
        self.events.publish(EventKind::Log, "kit", format!("created package {name}"));
        Ok(skeleton)
    }

    /// Move a package to another release and/or compile mode.
    pub fn update_package(&mut self, name: &str, release: Option<&str>, mode: Option<&str>) -> Result<ChangeSet, KitError> {
        let site = self.config.site.clone().ok_or(KitError::NoSite)?;
        let release = release.or(self.release.as_deref()).ok_or_else(|| KitError::NoRelease(site.clone()))?;
        let manifest = ReleaseManifest::load(&site, release)?;
        let mode = mode.unwrap_or(&self.config.configuration);
        Ok(scaffold::update_package(&self.config.base_dir.join(name), release, mode, &manifest)?)
    }

    pub fn packages(&self) -> Result<Vec<String>, KitError> {
        Ok(scaffold::list_packages(&self.config.base_dir)?)
    }

    /// Start the framework interactively in the session's environment,
    /// setting the runtime up first when this session has not done so.
    pub fn start_framework(&mut self) -> Result<Bridge, KitError> {
        if !self.session.satisfied_steps().contains("setup-runtime") {
            self.invoke("setup", &BTreeMap::new())?;
        }
        let spec = PromptSpec::new(FRAMEWORK_PROMPT, DEFAULT_QUIESCENCE)?;
        Ok(start_interactive(&mut self.session, FRAMEWORK_PROGRAM, spec)?)
    }

    pub fn close(self) {
        self.session.close();
    }
}
