//! Release manifests: the authoritative description of a release tree.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "release.manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileRole {
    Settings,
    Geometry,
    Options,
    Tool,
    Config,
    Package,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the site root.
    pub path: String,
    pub sha256: String,
    pub role: FileRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEntry {
    pub name: String,
    /// First line the tool prints when asked for its version.
    pub banner: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dependency {
    pub package: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseManifest {
    pub format_version: u32,
    pub release: String,
    #[serde(default, rename = "file")]
    pub files: Vec<FileEntry>,
    #[serde(default, rename = "tool")]
    pub tools: Vec<ToolEntry>,
    /// Default dependencies by package kind.
    #[serde(default)]
    pub dependencies: BTreeMap<String, Vec<Dependency>>,
    /// Options files the release ships, by file name.
    #[serde(default)]
    pub options_files: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {path} is invalid: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum Mismatch {
    Missing { path: String },
    Modified { path: String, expected: String, actual: String },
}

impl Mismatch {
    pub fn path(&self) -> &str {
        match self {
            Mismatch::Missing { path } | Mismatch::Modified { path, .. } => path,
        }
    }
}

impl ReleaseManifest {
    pub fn new(release: &str) -> Self {
        ReleaseManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            release: release.into(),
            files: Vec::new(),
            tools: Vec::new(),
            dependencies: BTreeMap::new(),
            options_files: Vec::new(),
        }
    }

    /// Where the manifest of `release` lives under a site.
    pub fn location(site: &Path, release: &str) -> PathBuf {
        site.join("releases").join(release).join(MANIFEST_FILE)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, ManifestError> {
        let invalid = |reason: String| ManifestError::Invalid { path: origin.to_path_buf(), reason };
        let manifest: ReleaseManifest = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(invalid(format!("unsupported format_version {}", manifest.format_version)));
        }
        if let Some(bad) = manifest.files.iter().find(|f| Path::new(&f.path).is_absolute() || f.path.split('/').any(|c| c == "..")) {
            return Err(invalid(format!("file path {} leaves the site", bad.path)));
        }
        Ok(manifest)
    }

    pub fn load(site: &Path, release: &str) -> Result<Self, ManifestError> {
        let path = Self::location(site, release);
        Self::parse(&std::fs::read_to_string(&path)?, &path)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn dependency_defaults(&self, kind: &str) -> &[Dependency] {
        self.dependencies.get(kind).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Expected hashes keyed by absolute path under `site`.
    pub fn hashes_under(&self, site: &Path) -> BTreeMap<PathBuf, String> {
        self.files.iter().map(|f| (site.join(&f.path), f.sha256.clone())).collect()
    }

    pub fn declares_options(&self, name: &str) -> bool {
        self.options_files.iter().any(|o| o == name)
    }

    /// Compare the tree under `site` with the manifest.
    pub fn validate(&self, site: &Path) -> Vec<Mismatch> {
        self.files
            .iter()
            .filter_map(|f| match std::fs::read(site.join(&f.path)) {
                Err(_) => Some(Mismatch::Missing { path: f.path.clone() }),
                Ok(bytes) => {
                    let actual = crate::sha256_hex(&bytes);
                    (actual != f.sha256).then(|| Mismatch::Modified { path: f.path.clone(), expected: f.sha256.clone(), actual })
                }
            })
            .collect()
    }
}

/// The release a site marks as latest.
pub fn latest_release(site: &Path) -> Option<String> {
    let text = std::fs::read_to_string(site.join("LATEST")).ok()?;
    let release = text.trim();
    (!release.is_empty()).then(|| release.to_string())
}
