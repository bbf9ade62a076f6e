//! The workaround registry file: a schema header line followed by one JSON
//! record per line (workarounds, repair cases, fallback chains).

use std::path::{Path, PathBuf};

use glob::Pattern;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::fallback::{FallbackChain, FallbackPolicy};
use super::{ConfigKey, FailureEvent, FaultError};

pub const REGISTRY_SCHEMA: &str = "startkit.fault-registry";
pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigKeyPattern {
    #[serde(default = "any")]
    pub release: String,
    #[serde(default = "any")]
    pub configuration: String,
    #[serde(default = "any")]
    pub platform: String,
}

fn any() -> String {
    "*".into()
}

impl Default for ConfigKeyPattern {
    fn default() -> Self {
        ConfigKeyPattern { release: any(), configuration: any(), platform: any() }
    }
}

fn glob_matches(pattern: &str, text: &str) -> bool {
    Pattern::new(pattern).map(|p| p.matches(text)).unwrap_or(false)
}

fn is_wildcard(pattern: &str) -> bool {
    pattern.contains(['*', '?', '['])
}

impl ConfigKeyPattern {
    pub fn exact(key: &ConfigKey) -> Self {
        ConfigKeyPattern {
            release: key.release.clone(),
            configuration: key.configuration.clone(),
            platform: key.platform.clone(),
        }
    }

    pub fn matches(&self, key: &ConfigKey) -> bool {
        glob_matches(&self.release, &key.release)
            && glob_matches(&self.configuration, &key.configuration)
            && glob_matches(&self.platform, &key.platform)
    }

    /// Number of wildcard components; lower is more specific.
    pub fn wildcards(&self) -> usize {
        [&self.release, &self.configuration, &self.platform]
            .into_iter()
            .filter(|p| is_wildcard(p))
            .count()
    }
}

/// Predicate over a failure event. All present fields must match; a matcher
/// with no fields matches everything and marks a preventive workaround.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventMatcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_regex")]
    pub stderr: Option<Regex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
}

impl PartialEq for EventMatcher {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.tool == other.tool
            && self.exit_code == other.exit_code
            && self.stderr.as_ref().map(Regex::as_str) == other.stderr.as_ref().map(Regex::as_str)
            && self.resource == other.resource
    }
}

mod opt_regex {
    use regex::Regex;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(re: &Option<Regex>, s: S) -> Result<S::Ok, S::Error> {
        match re {
            Some(re) => s.serialize_str(re.as_str()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Regex>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|r| Regex::new(&r).map_err(serde::de::Error::custom)).transpose()
    }
}

impl EventMatcher {
    pub fn is_match_all(&self) -> bool {
        self.step.is_none()
            && self.tool.is_none()
            && self.exit_code.is_none()
            && self.stderr.is_none()
            && self.resource.is_none()
    }

    pub fn matches(&self, event: &FailureEvent) -> bool {
        if let Some(step) = &self.step {
            if !glob_matches(step, &event.step) {
                return false;
            }
        }
        if let Some(tool) = &self.tool {
            if event.tool.as_deref() != Some(tool.as_str()) {
                return false;
            }
        }
        if let Some(code) = self.exit_code {
            if event.result.exit_code != code {
                return false;
            }
        }
        if let Some(re) = &self.stderr {
            if !re.is_match(&String::from_utf8_lossy(event.diagnostic())) {
                return false;
            }
        }
        if let Some(resource) = &self.resource {
            match &event.resource {
                Some(r) if glob_matches(resource, &r.key) => {}
                _ => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workaround {
    #[serde(default)]
    pub key: ConfigKeyPattern,
    #[serde(default, rename = "match")]
    pub matcher: EventMatcher,
    /// Shell command templates, run in order.
    pub actions: Vec<String>,
    pub description: String,
}

impl Workaround {
    pub fn is_preventive(&self) -> bool {
        self.matcher.is_match_all()
    }

    fn validate(&self) -> Result<(), String> {
        if self.actions.is_empty() {
            return Err(format!("workaround {:?} has no actions", self.description));
        }
        if self.description.trim().is_empty() {
            return Err("workaround without description".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    File,
    Dir,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRule {
    pub path: PathBuf,
    pub kind: LayoutKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    /// Move aside into the repair backup area.
    Remove { path: PathBuf },
    Move { from: PathBuf, to: PathBuf },
    Replace { path: PathBuf, content: String },
}

/// A precisely described broken workspace and the mutations that fix it.
///
/// `symptom` must match the failure's first diagnostic line and capture the
/// workspace (relative to the base directory) as `workspace`; every layout
/// rule must then hold under that workspace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairCase {
    pub name: String,
    #[serde(with = "regex_str")]
    pub symptom: Regex,
    pub layout: Vec<LayoutRule>,
    pub mutations: Vec<Mutation>,
}

impl PartialEq for RepairCase {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.symptom.as_str() == other.symptom.as_str()
            && self.layout == other.layout
            && self.mutations == other.mutations
    }
}

mod regex_str {
    use regex::Regex;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(re: &Regex, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(re.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Regex, D::Error> {
        Regex::new(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Workaround(Workaround),
    RepairCase(RepairCase),
    Fallback { resource: String, chain: FallbackChain },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultRegistry {
    workarounds: Vec<Workaround>,
    pub repair_cases: Vec<RepairCase>,
    pub fallbacks: FallbackPolicy,
}

impl FaultRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert keeping exact config keys ahead of wildcard ones, file order
    /// otherwise.
    pub fn add_workaround(&mut self, workaround: Workaround) -> Result<(), FaultError> {
        workaround
            .validate()
            .map_err(|reason| FaultError::RegistryUnreadable { path: PathBuf::new(), reason })?;
        let rank = workaround.key.wildcards();
        let at = self
            .workarounds
            .iter()
            .position(|w| w.key.wildcards() > rank)
            .unwrap_or(self.workarounds.len());
        self.workarounds.insert(at, workaround);
        Ok(())
    }

    pub fn workarounds(&self) -> &[Workaround] {
        &self.workarounds
    }

    /// Reactive workarounds applicable to a failure, in registry order.
    pub fn lookup_workarounds(&self, key: &ConfigKey, event: &FailureEvent) -> Vec<&Workaround> {
        self.workarounds
            .iter()
            .filter(|w| !w.is_preventive() && w.key.matches(key) && w.matcher.matches(event))
            .collect()
    }

    /// Workarounds applied before a task so the problem never shows up.
    pub fn preventive_workarounds(&self, key: &ConfigKey) -> Vec<&Workaround> {
        self.workarounds
            .iter()
            .filter(|w| w.is_preventive() && w.key.matches(key))
            .collect()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, FaultError> {
        let unreadable = |reason: String| FaultError::RegistryUnreadable { path: origin.to_path_buf(), reason };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| unreadable("empty file".into()))?;
        let header: Header = serde_json::from_str(header).map_err(|e| unreadable(format!("header: {e}")))?;
        if header.schema != REGISTRY_SCHEMA || header.version != REGISTRY_VERSION {
            return Err(unreadable(format!("unsupported schema {} v{}", header.schema, header.version)));
        }
        let mut registry = FaultRegistry::new();
        for (n, line) in lines {
            let record: Record = serde_json::from_str(line).map_err(|e| unreadable(format!("line {}: {e}", n + 1)))?;
            match record {
                Record::Workaround(w) => registry
                    .add_workaround(w)
                    .map_err(|e| unreadable(format!("line {}: {e}", n + 1)))?,
                Record::RepairCase(c) => registry.repair_cases.push(c),
                Record::Fallback { resource, chain } => {
                    chain.validate().map_err(|e| unreadable(format!("line {}: {e}", n + 1)))?;
                    registry.fallbacks.add(&resource, chain);
                }
            }
        }
        Ok(registry)
    }

    pub fn load(path: &Path) -> Result<Self, FaultError> {
        let text = std::fs::read_to_string(path).map_err(|e| FaultError::RegistryUnreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&Header { schema: REGISTRY_SCHEMA.into(), version: REGISTRY_VERSION }).unwrap();
        out.push('\n');
        let mut push = |record: Record| {
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        };
        for w in &self.workarounds {
            push(Record::Workaround(w.clone()));
        }
        for c in &self.repair_cases {
            push(Record::RepairCase(c.clone()));
        }
        for (resource, chain) in self.fallbacks.entries() {
            push(Record::Fallback { resource: resource.to_string(), chain: chain.clone() });
        }
        out
    }
}
