//! A mock software ecosystem at desk scale: release trees, fake tools and
//! framework, fault injection with exact reversal.

mod scenario;

use std::collections::BTreeMap;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanroom::EnvMap;
use crate::faults::{Alternative, FallbackChain};
use crate::manifest::{Dependency, FileEntry, FileRole, ManifestError, Mismatch, ReleaseManifest, ToolEntry, MANIFEST_FILE};
use crate::scaffold::{self, PackageSpec, ScaffoldError};

pub use scenario::{load_corpus, parse_corpus, run_scenario, scenario_host_env, stage_label, FaultScenario, ScenarioReport};

pub const RELEASES: &[&str] = &["sbx-1", "sbx-2"];
pub const LATEST: &str = "sbx-2";
pub const DEFAULT_OPTIONS: &str = "SandboxOptions.txt";
pub const REPOSITORY_PACKAGE: &str = "HelloAlg";

const TOOLS: &[(&str, &str, &str)] = &[
    ("sbxrun", "sbxrun 2.0", include_str!("../../data/sandbox/bin/sbxrun")),
    ("sbx-build", "sbx-build 1.4", include_str!("../../data/sandbox/bin/sbx-build")),
    ("sbx-co", "sbx-co 0.9", include_str!("../../data/sandbox/bin/sbx-co")),
    ("sbx-query", "sbx-query 1.0", include_str!("../../data/sandbox/bin/sbx-query")),
];

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("cannot write site {path}: {reason}")]
    SiteUnwritable { path: PathBuf, reason: String },
    #[error("no sandbox content for release {0}")]
    UnknownRelease(String),
    #[error("manifest entry {0} does not match the generated content")]
    ManifestMismatch(String),
    #[error("scenario {scenario} does not apply: {reason}")]
    ScenarioInapplicable { scenario: String, reason: String },
    #[error("reference site {site} is incomplete: {}", .missing.join(", "))]
    ReferenceIncomplete { site: PathBuf, missing: Vec<String> },
    #[error("scenario corpus is invalid: {0}")]
    BadCorpus(String),
    #[error(transparent)]
    Kit(#[from] crate::kit::KitError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn dependencies(release: &str) -> Option<Vec<Dependency>> {
    let (kernel, event) = match release {
        "sbx-1" => ("1.0", "2.1"),
        "sbx-2" => ("1.1", "2.3"),
        _ => return None,
    };
    let dep = |p: &str, v: &str| Dependency { package: p.into(), version: v.into() };
    Some(vec![dep("SbxKernel", kernel), dep("SbxEvent", event)])
}

struct Content {
    bytes: Vec<u8>,
    role: FileRole,
    executable: bool,
}

/// Everything a release installs, by path relative to the site.
fn release_contents(release: &str) -> Option<BTreeMap<String, Content>> {
    let deps = dependencies(release)?;
    let seed = if release == "sbx-1" { 1111 } else { 4242 };
    let r = format!("releases/{release}");
    let text = |s: String, role| Content { bytes: s.into_bytes(), role, executable: false };
    let mut files = BTreeMap::new();
    files.insert(format!("{r}/settings.txt"), text(format!("release = {release}\nseed = {seed}\nevents = 100\n"), FileRole::Settings));
    files.insert(format!("{r}/geometry.txt"), text(format!("geometry = sbx-standard-{release}\nlayers = 4\n"), FileRole::Geometry));
    files.insert(
        format!("{r}/options/{DEFAULT_OPTIONS}"),
        text(
            format!("# options shipped with release {release}\nevents = 25\nseed = 7\noutput = sbx_output.txt\nalgorithm SbxDefaultAlg\n"),
            FileRole::Options,
        ),
    );
    for dep in &deps {
        files.insert(format!("{r}/packages/{}/VERSION", dep.package), text(format!("{}\n", dep.version), FileRole::Package));
    }
    for (name, _, script) in TOOLS {
        files.insert(format!("bin/{name}"), Content { bytes: script.as_bytes().to_vec(), role: FileRole::Tool, executable: true });
    }
    files.insert("tools/sbx-build.conf".into(), text("toolchain=ok\n".into(), FileRole::Config));
    files.insert("tools/sbx-build.conf.dist".into(), text("toolchain=ok\n".into(), FileRole::Config));
    Some(files)
}

/// The manifest describing what `make_release` installs for `release`.
pub fn standard_manifest(release: &str) -> Result<ReleaseManifest, SandboxError> {
    let contents = release_contents(release).ok_or_else(|| SandboxError::UnknownRelease(release.into()))?;
    let mut m = ReleaseManifest::new(release);
    m.files = contents
        .iter()
        .map(|(path, c)| FileEntry { path: path.clone(), sha256: crate::sha256_hex(&c.bytes), role: c.role })
        .collect();
    m.tools = TOOLS.iter().map(|(name, banner, _)| ToolEntry { name: name.to_string(), banner: banner.to_string() }).collect();
    m.dependencies.insert(scaffold::DEFAULT_KIND.into(), dependencies(release).expect("known release"));
    m.options_files = vec![DEFAULT_OPTIONS.into()];
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InstallReport {
    pub written: Vec<String>,
    pub unchanged: usize,
}

fn write_if_changed(path: &Path, bytes: &[u8], executable: bool) -> std::io::Result<bool> {
    let mode = if executable { 0o755 } else { 0o644 };
    let same = std::fs::read(path).is_ok_and(|old| old == bytes)
        && std::fs::metadata(path).is_ok_and(|m| m.permissions().mode() & 0o777 == mode);
    if same {
        return Ok(false);
    }
    std::fs::create_dir_all(path.parent().expect("file has a parent"))?;
    std::fs::write(path, bytes)?;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(mode))?;
    Ok(true)
}

/// Install the tree `manifest` describes under `site`. Re-installing over an
/// intact tree writes nothing.
pub fn make_release(manifest: &ReleaseManifest, site: &Path) -> Result<InstallReport, SandboxError> {
    let contents = release_contents(&manifest.release).ok_or_else(|| SandboxError::UnknownRelease(manifest.release.clone()))?;
    let unwritable = |e: std::io::Error| SandboxError::SiteUnwritable { path: site.to_path_buf(), reason: e.to_string() };
    let mut report = InstallReport::default();
    for entry in &manifest.files {
        let c = contents.get(&entry.path).ok_or_else(|| SandboxError::ManifestMismatch(entry.path.clone()))?;
        if crate::sha256_hex(&c.bytes) != entry.sha256 {
            return Err(SandboxError::ManifestMismatch(entry.path.clone()));
        }
        if write_if_changed(&site.join(&entry.path), &c.bytes, c.executable).map_err(unwritable)? {
            report.written.push(entry.path.clone());
        } else {
            report.unchanged += 1;
        }
    }
    let manifest_path = site.join("releases").join(&manifest.release).join(MANIFEST_FILE);
    if write_if_changed(&manifest_path, manifest.to_text().as_bytes(), false).map_err(unwritable)? {
        report.written.push(format!("releases/{}/{MANIFEST_FILE}", manifest.release));
    }
    Ok(report)
}

/// A full site: every release, the latest marker, a credential, the
/// conditions database (offline) and a package repository.
pub fn make_site(site: &Path) -> Result<InstallReport, SandboxError> {
    let mut report = InstallReport::default();
    for release in RELEASES {
        let r = make_release(&standard_manifest(release)?, site)?;
        report.written.extend(r.written);
        report.unchanged += r.unchanged;
    }
    let unwritable = |e: std::io::Error| SandboxError::SiteUnwritable { path: site.to_path_buf(), reason: e.to_string() };
    for (rel, content) in [
        ("LATEST", format!("{LATEST}\n")),
        ("auth/token", "sandbox-token\n".to_string()),
        ("condb/README", "create a file named online here to bring the conditions database up\n".to_string()),
    ] {
        if write_if_changed(&site.join(rel), content.as_bytes(), false).map_err(unwritable)? {
            report.written.push(rel.into());
        }
    }
    for release in RELEASES {
        let rel = format!("condb/geometry-{release}.txt");
        if write_if_changed(&site.join(&rel), format!("geometry = sbx-standard-{release}\nlayers = 4\n").as_bytes(), false).map_err(unwritable)? {
            report.written.push(rel);
        }
    }
    let repo = site.join("repository");
    if !repo.join(REPOSITORY_PACKAGE).exists() {
        std::fs::create_dir_all(&repo).map_err(unwritable)?;
        scaffold::generate_package(&PackageSpec::new(REPOSITORY_PACKAGE, LATEST), &repo, &standard_manifest(LATEST)?)?;
        report.written.push(format!("repository/{REPOSITORY_PACKAGE}"));
    }
    Ok(report)
}

pub fn validate_site(site: &Path, release: &str) -> Result<Vec<Mismatch>, SandboxError> {
    Ok(ReleaseManifest::load(site, release)?.validate(site))
}

/// Directory layout shared by the scenario runner and the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SandboxRoot {
    pub root: PathBuf,
    pub site: PathBuf,
    /// Complete copy of the site standing in for a remote reference site.
    pub reference: PathBuf,
    /// Empty mirror tried before the reference.
    pub mirror: PathBuf,
    pub work: PathBuf,
}

impl SandboxRoot {
    pub fn at(root: &Path) -> Self {
        SandboxRoot {
            root: root.to_path_buf(),
            site: root.join("site"),
            reference: root.join("reference"),
            mirror: root.join("mirror"),
            work: root.join("work"),
        }
    }

    pub fn make(root: &Path) -> Result<Self, SandboxError> {
        let s = Self::at(root);
        make_site(&s.site)?;
        make_site(&s.reference)?;
        std::fs::create_dir_all(&s.mirror)?;
        std::fs::create_dir_all(&s.work)?;
        Ok(s)
    }

    pub fn fallback_sites(&self) -> Vec<PathBuf> {
        vec![self.mirror.clone(), self.reference.clone()]
    }
}

/// A chain that looks for missing release files at `reference_site`, after
/// checking the reference is a complete install of `release`.
pub fn remote_fallback_fixture(local_site: &Path, reference_site: &Path, release: &str) -> Result<FallbackChain, SandboxError> {
    let incomplete = |missing: Vec<String>| SandboxError::ReferenceIncomplete { site: reference_site.to_path_buf(), missing };
    let manifest = ReleaseManifest::load(reference_site, release).map_err(|e| incomplete(vec![e.to_string()]))?;
    let mismatches = manifest.validate(reference_site);
    if !mismatches.is_empty() {
        return Err(incomplete(mismatches.iter().map(|m| m.path().to_string()).collect()));
    }
    log::info!("{} falls back on {}", local_site.display(), reference_site.display());
    Ok(FallbackChain::new(vec![Alternative::AlternativeResource { location: reference_site.to_path_buf() }]).expect("no default"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Injection {
    /// Paths are relative to the sandbox root.
    DeleteFile { path: String },
    CorruptFile { path: String },
    StaleEnv { var: String, value: String },
    MissingTool { name: String },
    MissingResource { key: String },
    PlantFile { path: String, content: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileBackup {
    pub path: PathBuf,
    /// Base64 of the previous content; absent when the file did not exist.
    pub previous: Option<String>,
    pub mode: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionReceipt {
    pub scenario: String,
    pub files: Vec<FileBackup>,
    /// Variables to put into the host environment the session starts from.
    pub env: EnvMap,
}

impl InjectionReceipt {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("receipt serializes"))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn backup(path: &Path) -> std::io::Result<FileBackup> {
    let b64 = base64::engine::general_purpose::STANDARD;
    Ok(match std::fs::read(path) {
        Ok(bytes) => FileBackup {
            path: path.to_path_buf(),
            previous: Some(b64.encode(bytes)),
            mode: Some(std::fs::metadata(path)?.permissions().mode() & 0o7777),
        },
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => FileBackup { path: path.to_path_buf(), previous: None, mode: None },
        Err(e) => return Err(e),
    })
}

/// Absolute path a resource key refers to in the sandbox site.
fn resource_path(root: &SandboxRoot, key: &str) -> Option<PathBuf> {
    let registry = crate::recipes::RecipeRegistry::builtin();
    let def = registry.resource(key)?;
    let vars = crate::template::vars([("release", LATEST), ("options", DEFAULT_OPTIONS)]);
    let rel = crate::template::render_text(&def.path, &vars).ok()?;
    match def.root.as_str() {
        "site" => Some(root.site.join(rel)),
        "base_dir" => Some(root.work.join(rel)),
        _ => None,
    }
}

pub fn inject(name: &str, injections: &[Injection], root: &SandboxRoot) -> Result<InjectionReceipt, SandboxError> {
    let inapplicable = |reason: String| SandboxError::ScenarioInapplicable { scenario: name.into(), reason };
    let mut receipt = InjectionReceipt { scenario: name.into(), ..Default::default() };
    // check everything first so a bad scenario changes nothing
    let mut plan: Vec<(PathBuf, Option<Vec<u8>>)> = Vec::new();
    for injection in injections {
        let existing = |p: PathBuf| if p.is_file() { Ok(p) } else { Err(inapplicable(format!("{} does not exist", p.display()))) };
        match injection {
            Injection::DeleteFile { path } => plan.push((existing(root.root.join(path))?, None)),
            Injection::CorruptFile { path } => {
                let p = existing(root.root.join(path))?;
                let mut bytes = std::fs::read(&p)?;
                bytes.extend_from_slice(b"\0corrupted by fault injection\n");
                plan.push((p, Some(bytes)));
            }
            Injection::MissingTool { name } => plan.push((existing(root.site.join("bin").join(name))?, None)),
            Injection::MissingResource { key } => {
                let p = resource_path(root, key).ok_or_else(|| inapplicable(format!("unknown resource {key}")))?;
                plan.push((existing(p)?, None));
            }
            Injection::PlantFile { path, content } => {
                if Path::new(path).is_absolute() || path.split('/').any(|c| c == "..") {
                    return Err(inapplicable(format!("{path} leaves the sandbox")));
                }
                plan.push((root.root.join(path), Some(content.clone().into_bytes())));
            }
            Injection::StaleEnv { var, value } => {
                receipt.env.insert(var.clone(), value.clone());
            }
        }
    }
    for (path, content) in plan {
        receipt.files.push(backup(&path)?);
        match content {
            None => std::fs::remove_file(&path)?,
            Some(bytes) => {
                std::fs::create_dir_all(path.parent().expect("file has a parent"))?;
                std::fs::write(&path, bytes)?;
            }
        }
    }
    Ok(receipt)
}

/// Undo an injection, newest change first.
pub fn revert(receipt: &InjectionReceipt) -> Result<(), SandboxError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    for file in receipt.files.iter().rev() {
        match &file.previous {
            None => {
                if file.path.exists() {
                    std::fs::remove_file(&file.path)?;
                }
            }
            Some(data) => {
                let bytes = b64.decode(data).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                std::fs::create_dir_all(file.path.parent().expect("file has a parent"))?;
                std::fs::write(&file.path, bytes)?;
                if let Some(mode) = file.mode {
                    std::fs::set_permissions(&file.path, std::fs::Permissions::from_mode(mode))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_site_validates_and_reinstall_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        make_site(dir.path()).unwrap();
        for r in RELEASES {
            assert!(validate_site(dir.path(), r).unwrap().is_empty());
        }
        let again = make_site(dir.path()).unwrap();
        assert!(again.written.is_empty(), "{:?}", again.written);
    }

    #[test]
    fn inject_and_revert_restore_the_tree() {
        let dir = tempfile::tempdir().unwrap();
        let root = SandboxRoot::make(dir.path()).unwrap();
        let injections = vec![
            Injection::DeleteFile { path: "site/releases/sbx-2/settings.txt".into() },
            Injection::CorruptFile { path: "site/releases/sbx-2/geometry.txt".into() },
            Injection::MissingTool { name: "sbxrun".into() },
            Injection::PlantFile { path: "work/x.txt".into(), content: "x".into() },
        ];
        let receipt = inject("t", &injections, &root).unwrap();
        assert_eq!(validate_site(&root.site, LATEST).unwrap().len(), 3);
        revert(&receipt).unwrap();
        assert!(validate_site(&root.site, LATEST).unwrap().is_empty());
        assert!(!root.work.join("x.txt").exists());
        let mode = std::fs::metadata(root.site.join("bin/sbxrun")).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o755);
    }

    #[test]
    fn inapplicable_scenario_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let root = SandboxRoot::make(dir.path()).unwrap();
        let injections = vec![
            Injection::DeleteFile { path: "site/releases/sbx-2/settings.txt".into() },
            Injection::DeleteFile { path: "site/nope".into() },
        ];
        assert!(matches!(inject("t", &injections, &root), Err(SandboxError::ScenarioInapplicable { .. })));
        assert!(validate_site(&root.site, LATEST).unwrap().is_empty());
    }

    #[test]
    fn fallback_fixture_requires_complete_reference() {
        let dir = tempfile::tempdir().unwrap();
        let root = SandboxRoot::make(dir.path()).unwrap();
        assert!(remote_fallback_fixture(&root.site, &root.reference, LATEST).is_ok());
        std::fs::remove_file(root.reference.join("releases/sbx-2/settings.txt")).unwrap();
        assert!(matches!(
            remote_fallback_fixture(&root.site, &root.reference, LATEST),
            Err(SandboxError::ReferenceIncomplete { .. })
        ));
    }
}
