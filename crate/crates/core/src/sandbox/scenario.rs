use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{inject, revert, standard_manifest, validate_site, Injection, SandboxError, SandboxRoot, LATEST};
use crate::cleanroom::{EnvMap, ExpertMode};
use crate::faults::{ErrorClass, Outcome, OutcomeKind, Stage};
use crate::recipes::TraceEntry;
use crate::kit::{Kit, KitConfig};
use crate::scaffold::{generate_package, PackageSpec};

const CORPUS: &str = include_str!("../../data/scenarios.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScenario {
    pub name: String,
    pub description: String,
    #[serde(default, rename = "injection")]
    pub injections: Vec<Injection>,
    pub recipe: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Packages generated into the work area before injecting.
    #[serde(default)]
    pub packages: Vec<String>,
    #[serde(default)]
    pub mode: ExpertMode,
    pub expected_class: ErrorClass,
    pub recoverable: bool,
    /// `cache`, `workaround`, `fallback`, `repair` or `default`.
    #[serde(default)]
    pub expected_stage: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    format_version: u32,
    #[serde(rename = "scenario")]
    scenarios: Vec<FaultScenario>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<FaultScenario>, SandboxError> {
    let file: CorpusFile = toml::from_str(text).map_err(|e| SandboxError::BadCorpus(e.to_string()))?;
    if file.format_version != 1 {
        return Err(SandboxError::BadCorpus(format!("unsupported format_version {}", file.format_version)));
    }
    let registry = crate::recipes::RecipeRegistry::builtin();
    let mut seen = BTreeSet::new();
    for s in &file.scenarios {
        if !seen.insert(&s.name) {
            return Err(SandboxError::BadCorpus(format!("duplicate scenario {}", s.name)));
        }
        if registry.recipe(&s.recipe).is_err() {
            return Err(SandboxError::BadCorpus(format!("{}: unknown recipe {}", s.name, s.recipe)));
        }
    }
    Ok(file.scenarios)
}

/// The built-in scenario corpus.
pub fn load_corpus() -> Result<Vec<FaultScenario>, SandboxError> {
    parse_corpus(CORPUS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub expected_class: ErrorClass,
    /// None when nothing failed at all.
    pub observed_class: Option<ErrorClass>,
    pub expected_recoverable: bool,
    pub recovered: bool,
    pub expected_stage: Option<String>,
    pub stage: Option<String>,
    pub attempts: usize,
    pub provenance: Option<PathBuf>,
    pub root_cause: Option<String>,
    /// The failing tool's diagnostic as the user saw it.
    pub diagnostic: Vec<u8>,
    pub executed_steps: Vec<String>,
    /// Stages of every recovery attempt, in the order they were tried.
    pub ladder: Vec<Stage>,
    pub trace: Vec<TraceEntry>,
    /// Site and reference validate again after reverting the injection.
    pub reverted_clean: bool,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.observed_class == Some(self.expected_class)
            && self.recovered == self.expected_recoverable
            && (self.expected_stage.is_none() || self.expected_stage == self.stage)
            && self.reverted_clean
    }

    pub fn summary(&self) -> String {
        let class = self.observed_class.map_or("none".to_string(), |c| c.to_string());
        let stage = self.stage.as_deref().unwrap_or("-");
        format!(
            "{}: class {class} (want {}), recovered {} (want {}), stage {stage}",
            self.name, self.expected_class, self.recovered, self.expected_recoverable
        )
    }
}

pub fn stage_label(outcome: &Outcome) -> Option<String> {
    match &outcome.kind {
        OutcomeKind::Resolved { stage, .. } => Some(serde_json::to_value(stage).ok()?.as_str()?.to_string()),
        OutcomeKind::ResolvedWithDefault { .. } => Some("default".into()),
        OutcomeKind::Unresolved { .. } => None,
    }
}

/// Host environment scenarios start from, so results do not depend on the
/// machine running them.
pub fn scenario_host_env(root: &SandboxRoot, extra: &EnvMap) -> EnvMap {
    let mut env = EnvMap::new();
    env.insert("PATH".into(), "/usr/local/bin:/usr/bin:/bin".into());
    env.insert("HOME".into(), root.work.to_string_lossy().into_owned());
    for (k, v) in extra {
        env.insert(k.clone(), v.clone());
    }
    env
}

/// Build a sandbox under `dir`, inject the scenario, run its recipe and
/// revert. `cache_path` lets several runs share one solution cache.
pub fn run_scenario(scenario: &FaultScenario, dir: &Path, cache_path: Option<&Path>) -> Result<ScenarioReport, SandboxError> {
    let root = SandboxRoot::make(dir)?;
    let manifest = standard_manifest(LATEST)?;
    for package in &scenario.packages {
        if !root.work.join(package).exists() {
            generate_package(&PackageSpec::new(package, LATEST), &root.work, &manifest)?;
        }
    }
    let receipt = inject(&scenario.name, &scenario.injections, &root)?;
    let mut config = KitConfig::new(&root.work);
    config.mode = scenario.mode;
    config.site = Some(root.site.clone());
    config.fallback_sites = root.fallback_sites();
    config.host_env = Some(scenario_host_env(&root, &receipt.env));
    config.cache_path = cache_path.map(Path::to_path_buf);
    let run = Kit::open(config).map(|mut kit| {
        let r = kit.invoke(&scenario.recipe, &scenario.inputs);
        kit.close();
        r
    });
    revert(&receipt)?;
    let reverted_clean = validate_site(&root.site, LATEST)?.is_empty() && validate_site(&root.reference, LATEST)?.is_empty();

    let mut report = ScenarioReport {
        name: scenario.name.clone(),
        expected_class: scenario.expected_class,
        observed_class: None,
        expected_recoverable: scenario.recoverable,
        recovered: false,
        expected_stage: scenario.expected_stage.clone(),
        stage: None,
        attempts: 0,
        provenance: None,
        root_cause: None,
        diagnostic: Vec::new(),
        executed_steps: Vec::new(),
        ladder: Vec::new(),
        trace: Vec::new(),
        reverted_clean,
    };
    let fill = |report: &mut ScenarioReport, o: &Outcome| {
        report.stage = stage_label(o);
        report.attempts = o.attempts.len();
        report.provenance = o.provenance.clone();
    };
    match run? {
        Ok(result) => {
            report.recovered = true;
            report.executed_steps = result.executed_steps().iter().map(|s| s.to_string()).collect();
            report.trace = result.trace.clone();
            if let Some(o) = result.outcomes.first() {
                report.observed_class = Some(o.class);
                fill(&mut report, o);
            }
        }
        Err(e) => {
            report.observed_class = Some(e.class());
            report.root_cause = Some(e.to_string());
            if let crate::kit::KitError::Recipe(re) = &e {
                if let Some(f) = re.failure() {
                    report.root_cause = Some(f.root_cause.clone());
                    report.diagnostic = f.diagnostic.clone();
                    report.executed_steps = f.executed_steps().iter().map(|s| s.to_string()).collect();
                    report.trace = f.trace.clone();
                }
                if let Some(o) = re.outcome() {
                    fill(&mut report, o);
                }
            }
        }
    }
    report.ladder = report
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEntry::Recovery { attempts, .. } => Some(attempts.iter().map(|a| a.stage)),
            _ => None,
        })
        .flatten()
        .collect();
    Ok(report)
}

impl ScenarioReport {
    /// Attempt stages never step back down the ladder within one recovery.
    pub fn ladder_ordered(&self) -> bool {
        self.trace.iter().all(|e| match e {
            TraceEntry::Recovery { attempts, .. } => attempts.windows(2).all(|w| w[0].stage <= w[1].stage),
            _ => true,
        })
    }
}
