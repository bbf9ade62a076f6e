use std::path::PathBuf;

use glob::Pattern;
use serde::{Deserialize, Serialize};

use super::FaultError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Alternative {
    /// Another root that may hold the same resource at the same relative path.
    AlternativeResource { location: PathBuf },
    /// A command template that produces the resource at `{path}`.
    AlternativeSource { query: String },
    /// Write this value in place of the resource and hope for the best.
    AcceptDefault { value: String },
}

impl std::fmt::Display for Alternative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Alternative::AlternativeResource { location } => write!(f, "alternative resource at {}", location.display()),
            Alternative::AlternativeSource { query } => write!(f, "alternative source `{query}`"),
            Alternative::AcceptDefault { value } => write!(f, "default value {value:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FallbackChain {
    alternatives: Vec<Alternative>,
}

impl FallbackChain {
    pub fn new(alternatives: Vec<Alternative>) -> Result<Self, FaultError> {
        let chain = FallbackChain { alternatives };
        chain.validate()?;
        Ok(chain)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// At most one default, and only in last position.
    pub fn validate(&self) -> Result<(), FaultError> {
        let defaults: Vec<usize> = self
            .alternatives
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a, Alternative::AcceptDefault { .. }))
            .map(|(i, _)| i)
            .collect();
        match defaults.as_slice() {
            [] => Ok(()),
            [i] if *i + 1 == self.alternatives.len() => Ok(()),
            _ => Err(FaultError::BadChain("AcceptDefault must appear at most once, as the last alternative".into())),
        }
    }

    pub fn alternatives(&self) -> &[Alternative] {
        &self.alternatives
    }

    pub fn is_empty(&self) -> bool {
        self.alternatives.is_empty()
    }
}

/// Fallback chains selected by resource key glob; first match wins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FallbackPolicy {
    by_resource: Vec<(String, FallbackChain)>,
}

impl FallbackPolicy {
    pub fn add(&mut self, resource_glob: &str, chain: FallbackChain) {
        self.by_resource.push((resource_glob.to_string(), chain));
    }

    pub fn chain_for(&self, resource_key: Option<&str>) -> Option<&FallbackChain> {
        let key = resource_key?;
        self.by_resource
            .iter()
            .find(|(glob, _)| Pattern::new(glob).map(|p| p.matches(key)).unwrap_or(false))
            .map(|(_, chain)| chain)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &FallbackChain)> {
        self.by_resource.iter().map(|(g, c)| (g.as_str(), c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default(v: &str) -> Alternative {
        Alternative::AcceptDefault { value: v.into() }
    }

    fn resource(p: &str) -> Alternative {
        Alternative::AlternativeResource { location: p.into() }
    }

    #[test]
    fn default_must_be_last_and_unique() {
        assert!(FallbackChain::new(vec![resource("/a"), default("x")]).is_ok());
        assert!(FallbackChain::new(vec![default("x"), resource("/a")]).is_err());
        assert!(FallbackChain::new(vec![default("x"), default("y")]).is_err());
        assert!(FallbackChain::new(vec![]).is_ok());
    }

    #[test]
    fn policy_picks_first_matching_glob() {
        let mut policy = FallbackPolicy::default();
        policy.add("release:geometry", FallbackChain::new(vec![default("g")]).unwrap());
        policy.add("release:*", FallbackChain::new(vec![resource("/ref")]).unwrap());
        assert_eq!(policy.chain_for(Some("release:geometry")).unwrap().alternatives(), &[default("g")]);
        assert_eq!(policy.chain_for(Some("release:settings")).unwrap().alternatives(), &[resource("/ref")]);
        assert!(policy.chain_for(Some("user:options")).is_none());
        assert!(policy.chain_for(None).is_none());
    }
}
