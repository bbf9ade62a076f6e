use std::collections::BTreeSet;

use glob::Pattern;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{CleanroomError, ExpertMode};

/// Environment as an insertion-ordered name → value map.
pub type EnvMap = IndexMap<String, String>;

/// Split a colon-separated path list. The empty string has no entries.
pub fn split_path_list(value: &str) -> Vec<&str> {
    if value.is_empty() {
        Vec::new()
    } else {
        value.split(':').collect()
    }
}

#[derive(Debug, Clone)]
pub struct GlobList {
    sources: Vec<String>,
    compiled: Vec<Pattern>,
}

impl GlobList {
    pub fn new<I, S>(patterns: I) -> Result<Self, CleanroomError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sources: Vec<String> = patterns.into_iter().map(Into::into).collect();
        let compiled = sources
            .iter()
            .map(|p| {
                Pattern::new(p).map_err(|e| CleanroomError::BadProfile(format!("pattern {p:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { sources, compiled })
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn matches(&self, text: &str) -> bool {
        self.compiled.iter().any(|p| p.matches(text))
    }

    pub fn patterns(&self) -> &[String] {
        &self.sources
    }
}

impl PartialEq for GlobList {
    fn eq(&self, other: &Self) -> bool {
        self.sources == other.sources
    }
}

/// What the clean room considers "managed" configuration and what it
/// provides when something is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentProfile {
    pub managed_vars: GlobList,
    pub managed_paths: GlobList,
    pub defaults: EnvMap,
    pub path_vars: BTreeSet<String>,
}

/// Serialized form used by configuration files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default)]
    pub managed_vars: Vec<String>,
    #[serde(default)]
    pub managed_paths: Vec<String>,
    #[serde(default)]
    pub defaults: EnvMap,
    #[serde(default = "default_path_vars")]
    pub path_vars: Vec<String>,
}

fn default_path_vars() -> Vec<String> {
    vec!["PATH".into()]
}

impl TryFrom<ProfileConfig> for EnvironmentProfile {
    type Error = CleanroomError;

    fn try_from(cfg: ProfileConfig) -> Result<Self, Self::Error> {
        let profile = EnvironmentProfile {
            managed_vars: GlobList::new(cfg.managed_vars)?,
            managed_paths: GlobList::new(cfg.managed_paths)?,
            defaults: cfg.defaults,
            path_vars: cfg.path_vars.into_iter().collect(),
        };
        profile.check_defaults()?;
        Ok(profile)
    }
}

impl From<&EnvironmentProfile> for ProfileConfig {
    fn from(p: &EnvironmentProfile) -> Self {
        ProfileConfig {
            managed_vars: p.managed_vars.patterns().to_vec(),
            managed_paths: p.managed_paths.patterns().to_vec(),
            defaults: p.defaults.clone(),
            path_vars: p.path_vars.iter().cloned().collect(),
        }
    }
}

impl EnvironmentProfile {
    pub fn new<V, P>(managed_vars: V, managed_paths: P, defaults: EnvMap) -> Result<Self, CleanroomError>
    where
        V: IntoIterator,
        V::Item: Into<String>,
        P: IntoIterator,
        P::Item: Into<String>,
    {
        let profile = EnvironmentProfile {
            managed_vars: GlobList::new(managed_vars)?,
            managed_paths: GlobList::new(managed_paths)?,
            defaults,
            path_vars: default_path_vars().into_iter().collect(),
        };
        profile.check_defaults()?;
        Ok(profile)
    }

    pub fn with_path_vars<I, S>(mut self, vars: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.path_vars = vars.into_iter().map(Into::into).collect();
        self
    }

    fn check_defaults(&self) -> Result<(), CleanroomError> {
        for (name, value) in &self.defaults {
            if value.is_empty() && self.managed_vars.matches(name) {
                return Err(CleanroomError::BadProfile(format!(
                    "default for managed variable {name} has no value"
                )));
            }
        }
        Ok(())
    }

    /// Check the invariants that depend on the mode the profile is used in.
    pub fn validate_for(&self, mode: ExpertMode) -> Result<(), CleanroomError> {
        self.check_defaults()?;
        if mode == ExpertMode::NonExpert && (self.managed_vars.is_empty() || self.managed_paths.is_empty()) {
            return Err(CleanroomError::BadProfile(
                "non-expert mode needs managed variable and path patterns".into(),
            ));
        }
        Ok(())
    }

    /// The environment a session starts with, given the host environment.
    pub fn session_environment(&self, host: &EnvMap, mode: ExpertMode) -> EnvMap {
        match mode {
            ExpertMode::Expert => merge_missing(host, &self.defaults, &self.path_vars),
            ExpertMode::NonExpert => {
                let (clean, _) = scrub_environment(host, self);
                merge_missing(&clean, &self.defaults, &self.path_vars)
            }
        }
    }
}

/// Evidence of what a scrub removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub removed_vars: Vec<String>,
    pub pruned_path_entries: IndexMap<String, Vec<String>>,
}

impl ScrubReport {
    pub fn is_empty(&self) -> bool {
        self.removed_vars.is_empty() && self.pruned_path_entries.is_empty()
    }
}

/// Remove managed variables and managed path-list entries. Values of
/// unmanaged variables are never rewritten except for pruned path entries.
pub fn scrub_environment(env: &EnvMap, profile: &EnvironmentProfile) -> (EnvMap, ScrubReport) {
    let mut out = EnvMap::with_capacity(env.len());
    let mut report = ScrubReport::default();
    for (name, value) in env {
        if profile.managed_vars.matches(name) {
            report.removed_vars.push(name.clone());
            continue;
        }
        if profile.path_vars.contains(name) {
            let (kept, pruned): (Vec<&str>, Vec<&str>) = split_path_list(value)
                .into_iter()
                .partition(|entry| !profile.managed_paths.matches(entry));
            if !pruned.is_empty() {
                report
                    .pruned_path_entries
                    .insert(name.clone(), pruned.iter().map(|s| s.to_string()).collect());
                out.insert(name.clone(), kept.join(":"));
                continue;
            }
        }
        out.insert(name.clone(), value.clone());
    }
    (out, report)
}

/// Fill in whatever the user environment lacks. User values always win;
/// path lists get the default entries they are missing appended.
pub fn merge_missing(user_env: &EnvMap, defaults: &EnvMap, path_vars: &BTreeSet<String>) -> EnvMap {
    let mut out = user_env.clone();
    for (name, default) in defaults {
        match out.get_mut(name) {
            None => {
                out.insert(name.clone(), default.clone());
            }
            Some(current) if path_vars.contains(name) => {
                let mut entries: Vec<String> =
                    split_path_list(current).into_iter().map(str::to_string).collect();
                for entry in split_path_list(default) {
                    if !entries.iter().any(|e| e == entry) {
                        entries.push(entry.to_string());
                    }
                }
                *current = entries.join(":");
            }
            Some(_) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> EnvMap {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn atlas_profile() -> EnvironmentProfile {
        EnvironmentProfile::new(["ATLAS_*"], ["*/atlas/*"], EnvMap::new()).unwrap()
    }

    #[test]
    fn empty_environment_is_fixed_point() {
        let (out, report) = scrub_environment(&EnvMap::new(), &atlas_profile());
        assert!(out.is_empty());
        assert!(report.is_empty());
    }

    #[test]
    fn unmanaged_environment_unchanged() {
        let e = env(&[("PATH", "/usr/bin"), ("HOME", "/h")]);
        let (out, report) = scrub_environment(&e, &atlas_profile());
        assert_eq!(out, e);
        assert!(report.is_empty());
    }

    #[test]
    fn managed_variable_and_path_entry_removed() {
        let e = env(&[("PATH", "/usr/bin:/opt/atlas/bin"), ("ATLAS_ROOT", "/opt/atlas")]);
        let (out, report) = scrub_environment(&e, &atlas_profile());
        assert_eq!(out, env(&[("PATH", "/usr/bin")]));
        assert_eq!(report.removed_vars, vec!["ATLAS_ROOT".to_string()]);
        assert_eq!(report.pruned_path_entries["PATH"], vec!["/opt/atlas/bin".to_string()]);
    }

    #[test]
    fn merge_keeps_user_values() {
        let pv = BTreeSet::from(["PATH".to_string()]);
        let out = merge_missing(&env(&[("A", "1")]), &env(&[("A", "2"), ("B", "3")]), &pv);
        assert_eq!(out, env(&[("A", "1"), ("B", "3")]));
        let d = env(&[("X", "y")]);
        assert_eq!(merge_missing(&EnvMap::new(), &d, &pv), d);
    }

    #[test]
    fn merge_appends_missing_path_entries() {
        let pv = BTreeSet::from(["PATH".to_string()]);
        let out = merge_missing(&env(&[("PATH", "/u")]), &env(&[("PATH", "/u:/d")]), &pv);
        assert_eq!(out["PATH"], "/u:/d");
    }

    #[test]
    fn profile_rejects_empty_managed_default() {
        let err = EnvironmentProfile::new(["ATLAS_*"], ["*/atlas/*"], env(&[("ATLAS_ROOT", "")]));
        assert!(matches!(err, Err(CleanroomError::BadProfile(_))));
    }

    #[test]
    fn non_expert_requires_patterns() {
        let p = EnvironmentProfile::new(Vec::<String>::new(), ["x"], EnvMap::new()).unwrap();
        assert!(p.validate_for(ExpertMode::NonExpert).is_err());
        assert!(p.validate_for(ExpertMode::Expert).is_ok());
    }
}
