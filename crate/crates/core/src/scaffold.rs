//! Skeleton packages, dependency updates, options files and standalone run
//! scripts. Generation is a pure function of spec, manifest and generator
//! version.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleanroom::{shell_quote, EnvMap, EnvironmentProfile, ExpertMode};
use crate::manifest::ReleaseManifest;
use crate::recipes::{plan, Phase, Recipe, RecipeError, RecipeRegistry};
use crate::template::{render_command, render_text, Vars};

pub const GENERATOR_VERSION: &str = "1";
pub const BUILD_CONFIG: &str = "build.cfg";
pub const DEFAULT_KIND: &str = "analysis";

const HEADER_PREFIX: &str = "# generated by startkit-scaffold ";
const BEGIN_MARKER: &str = "# >>> startkit generated: dependencies >>>";
const END_MARKER: &str = "# <<< startkit generated: dependencies <<<";

const BUILD_CFG_TMPL: &str = include_str!("../data/scaffold/build.cfg.tmpl");
const ALGORITHM_TMPL: &str = include_str!("../data/scaffold/algorithm.alg.tmpl");
const OPTIONS_TMPL: &str = include_str!("../data/scaffold/options.txt.tmpl");
const README_TMPL: &str = include_str!("../data/scaffold/README.tmpl");

/// Keys an options file sets, with their defaults.
pub const OPTION_DEFAULTS: &[(&str, &str)] = &[("events", "10"), ("seed", "1"), ("output", "sbx_output.txt")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageSpec {
    pub name: String,
    pub release: String,
    pub compile_mode: String,
    pub author: String,
    pub algorithm_names: Vec<String>,
}

impl PackageSpec {
    pub fn new(name: &str, release: &str) -> Self {
        let alg = if name.ends_with("Alg") { name.to_string() } else { format!("{name}Alg") };
        PackageSpec {
            name: name.into(),
            release: release.into(),
            compile_mode: "debug".into(),
            author: "unknown".into(),
            algorithm_names: vec![alg],
        }
    }

    pub fn validate(&self) -> Result<(), ScaffoldError> {
        for name in std::iter::once(&self.name).chain(&self.algorithm_names) {
            if !is_identifier(name) {
                return Err(ScaffoldError::BadName(name.clone()));
            }
        }
        if self.algorithm_names.is_empty() {
            return Err(ScaffoldError::BadName(format!("{}: no algorithms", self.name)));
        }
        if !is_identifier(&self.compile_mode) || self.release.is_empty() || self.release.contains(char::is_whitespace) {
            return Err(ScaffoldError::BadName(format!("{}/{}", self.release, self.compile_mode)));
        }
        Ok(())
    }

    /// Short hash of the spec, embedded in generated headers.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        crate::sha256_hex(&json)[..12].to_string()
    }

    pub fn options_file(&self) -> String {
        format!("{}Options.txt", self.name)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic()) && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileRole {
    Source,
    Header,
    BuildConfig,
    Options,
    Doc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonFile {
    /// Relative to the package root.
    pub path: String,
    pub sha256: String,
    pub role: FileRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonManifest {
    pub generator_version: String,
    pub spec: PackageSpec,
    pub root: PathBuf,
    pub files: Vec<SkeletonFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChangeReason {
    DependencyUpdate,
    ModeUpdate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub path: String,
    pub old_sha256: String,
    pub new_sha256: String,
    pub reason: ChangeReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub changes: Vec<Change>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("invalid name {0:?}: names start with a letter and contain only letters, digits and '_'")]
    BadName(String),
    #[error("{0} already exists")]
    AlreadyExists(PathBuf),
    #[error("release {wanted} is unknown (manifest describes {available})")]
    UnknownRelease { wanted: String, available: String },
    #[error("{0} is not a package this kit recognizes")]
    NotAPackage(PathBuf),
    #[error("options have no key {0:?}")]
    UnknownOverrideKey(String),
    #[error("recipe cannot be planned: {0}")]
    UnplannableRecipe(String),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn base_vars(spec: &PackageSpec) -> Vars {
    let mut v = Vars::new();
    v.insert("generator_version".into(), GENERATOR_VERSION.into());
    v.insert("spec_hash".into(), spec.hash());
    v.insert("name".into(), spec.name.clone());
    v.insert("author".into(), spec.author.clone());
    v.insert("release".into(), spec.release.clone());
    v.insert("compile_mode".into(), spec.compile_mode.clone());
    v
}

fn render(template: &str, vars: &Vars) -> String {
    render_text(template, vars).expect("shipped templates use known placeholders")
}

fn generated_block(release: &str, mode: &str, manifest: &ReleaseManifest) -> String {
    let mut block = format!("release {release}\nmode {mode}\n");
    for dep in manifest.dependency_defaults(DEFAULT_KIND) {
        block.push_str(&format!("use {} {}\n", dep.package, dep.version));
    }
    block
}

fn check_release(release: &str, manifest: &ReleaseManifest) -> Result<(), ScaffoldError> {
    if manifest.release != release {
        return Err(ScaffoldError::UnknownRelease { wanted: release.into(), available: manifest.release.clone() });
    }
    Ok(())
}

/// File contents of a skeleton, by relative path.
pub fn skeleton_files(spec: &PackageSpec, manifest: &ReleaseManifest) -> Result<Vec<(String, String, FileRole)>, ScaffoldError> {
    spec.validate()?;
    check_release(&spec.release, manifest)?;
    let mut v = base_vars(spec);
    v.insert("generated".into(), generated_block(&spec.release, &spec.compile_mode, manifest));
    let mut files = vec![(BUILD_CONFIG.to_string(), render(BUILD_CFG_TMPL, &v), FileRole::BuildConfig)];
    for alg in &spec.algorithm_names {
        let mut av = v.clone();
        av.insert("algorithm".into(), alg.clone());
        files.push((format!("src/{alg}.alg"), render(ALGORITHM_TMPL, &av), FileRole::Source));
    }
    files.push((format!("options/{}", spec.options_file()), generate_options(spec, &BTreeMap::new())?, FileRole::Options));
    v.insert("underline".into(), "=".repeat(spec.name.len()));
    v.insert("options_file".into(), spec.options_file());
    files.push(("README".into(), render(README_TMPL, &v), FileRole::Doc));
    Ok(files)
}

pub fn generate_package(spec: &PackageSpec, target_dir: &Path, manifest: &ReleaseManifest) -> Result<SkeletonManifest, ScaffoldError> {
    let files = skeleton_files(spec, manifest)?;
    let root = target_dir.join(&spec.name);
    if root.exists() {
        return Err(ScaffoldError::AlreadyExists(root));
    }
    let mut entries = Vec::new();
    for (rel, content, role) in files {
        let path = root.join(&rel);
        std::fs::create_dir_all(path.parent().expect("file inside package"))?;
        std::fs::write(&path, &content)?;
        entries.push(SkeletonFile { path: rel, sha256: crate::sha256_hex(content.as_bytes()), role });
    }
    Ok(SkeletonManifest { generator_version: GENERATOR_VERSION.into(), spec: spec.clone(), root, files: entries })
}

/// Options text for `spec`, with `overrides` replacing defaults.
pub fn generate_options(spec: &PackageSpec, overrides: &BTreeMap<String, String>) -> Result<String, ScaffoldError> {
    let mut v = base_vars(spec);
    for (k, default) in OPTION_DEFAULTS {
        v.insert(k.to_string(), default.to_string());
    }
    for (k, value) in overrides {
        if !OPTION_DEFAULTS.iter().any(|(d, _)| d == k) {
            return Err(ScaffoldError::UnknownOverrideKey(k.clone()));
        }
        if value.contains('\n') {
            return Err(ScaffoldError::BadName(value.clone()));
        }
        v.insert(k.clone(), value.clone());
    }
    let algorithms: Vec<String> = spec.algorithm_names.iter().map(|a| format!("algorithm {a}")).collect();
    v.insert("algorithms".into(), algorithms.join("\n"));
    Ok(render(OPTIONS_TMPL, &v))
}

struct BuildConfig {
    before: String,
    block: String,
    after: String,
}

fn split_build_config(text: &str, dir: &Path) -> Result<BuildConfig, ScaffoldError> {
    let not_pkg = || ScaffoldError::NotAPackage(dir.to_path_buf());
    if !text.starts_with(HEADER_PREFIX) {
        return Err(not_pkg());
    }
    let begin = text.find(BEGIN_MARKER).ok_or_else(not_pkg)? + BEGIN_MARKER.len() + 1;
    let end = begin + text[begin..].find(END_MARKER).ok_or_else(not_pkg)?;
    Ok(BuildConfig { before: text[..begin].into(), block: text[begin..end].into(), after: text[end..].into() })
}

fn block_value<'a>(block: &'a str, key: &str) -> Option<&'a str> {
    block.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).map(str::trim))
}

/// Rewrite the generated dependency block for another release or mode.
/// Everything outside the block is left byte-identical.
pub fn update_package(package_dir: &Path, new_release: &str, new_mode: &str, manifest: &ReleaseManifest) -> Result<ChangeSet, ScaffoldError> {
    let path = package_dir.join(BUILD_CONFIG);
    let old = std::fs::read_to_string(&path).map_err(|_| ScaffoldError::NotAPackage(package_dir.to_path_buf()))?;
    let cfg = split_build_config(&old, package_dir)?;
    check_release(new_release, manifest)?;
    if !is_identifier(new_mode) {
        return Err(ScaffoldError::BadName(new_mode.into()));
    }
    let block = generated_block(new_release, new_mode, manifest);
    if block == cfg.block {
        return Ok(ChangeSet::default());
    }
    let reason = if block_value(&cfg.block, "release") == Some(new_release)
        && block.lines().filter(|l| l.starts_with("use ")).eq(cfg.block.lines().filter(|l| l.starts_with("use ")))
    {
        ChangeReason::ModeUpdate
    } else {
        ChangeReason::DependencyUpdate
    };
    let new = format!("{}{}{}", cfg.before, block, cfg.after);
    let tmp = package_dir.join(format!(".{BUILD_CONFIG}.tmp"));
    std::fs::write(&tmp, &new)?;
    std::fs::rename(&tmp, &path)?;
    Ok(ChangeSet {
        changes: vec![Change {
            path: BUILD_CONFIG.into(),
            old_sha256: crate::sha256_hex(old.as_bytes()),
            new_sha256: crate::sha256_hex(new.as_bytes()),
            reason,
        }],
    })
}

/// Whether `dir` holds a package this module generated or recognizes.
pub fn is_package(dir: &Path) -> bool {
    std::fs::read_to_string(dir.join(BUILD_CONFIG)).is_ok_and(|t| split_build_config(&t, dir).is_ok())
}

/// Packages directly below `dir`, sorted by name.
pub fn list_packages(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() && is_package(&entry.path()) {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn is_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A shell script that repeats a recipe without the kit: it installs the
/// session's environment, then runs every step of a cold-start plan.
/// `vars` are the context variables the kit renders steps with.
pub fn generate_run_script(
    registry: &RecipeRegistry,
    recipe: &Recipe,
    inputs: &BTreeMap<String, String>,
    vars: &Vars,
    session_env: &EnvMap,
    profile: &EnvironmentProfile,
    mode: ExpertMode,
) -> Result<String, ScaffoldError> {
    let plan = plan(registry, recipe, &BTreeSet::new()).map_err(|e| match e {
        RecipeError::CyclicConstraints(_) | RecipeError::UnknownStep { .. } | RecipeError::DuplicateStep { .. } | RecipeError::OverlappingPhases(_) => {
            ScaffoldError::UnplannableRecipe(e.to_string())
        }
        other => ScaffoldError::Recipe(other),
    })?;
    let mut vars = vars.clone();
    vars.extend(recipe.resolve_inputs(inputs)?);

    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    s.push_str(&format!("# standalone script for recipe {:?}, generated by startkit {}\n", recipe.name, env!("CARGO_PKG_VERSION")));
    s.push_str("# usage: sh SCRIPT [WORK_DIR]\n");
    s.push_str("cd \"${1:-.}\" || exit 1\n\n");
    s.push_str(&format!("# environment ({mode})\n"));
    if mode == ExpertMode::NonExpert && !profile.managed_vars.is_empty() {
        s.push_str("for __sk_var in $(env | sed -n 's/^\\([A-Za-z_][A-Za-z0-9_]*\\)=.*/\\1/p'); do\n");
        s.push_str(&format!("  case $__sk_var in\n    {}) unset \"$__sk_var\" ;;\n  esac\ndone\n", profile.managed_vars.patterns().join("|")));
    }
    for (k, v) in session_env {
        if is_env_name(k) {
            s.push_str(&format!("{k}={}; export {k}\n", shell_quote(v)));
        }
    }
    s.push_str("\n__sk_rc=0\n");
    for entry in &plan.entries {
        let step = registry.step(&entry.step).expect("planned steps are defined");
        let command = render_command(&step.action, &vars).map_err(RecipeError::from)?;
        s.push_str(&format!("\n# step {} ({:?})\n", step.id, entry.phase));
        if !step.requires_tools.is_empty() {
            s.push_str(&format!("# needs {}\n", step.requires_tools.join(", ")));
        }
        let always = entry.phase == Phase::Finalize && step.always_run;
        if always {
            s.push_str(&format!("{{ {command}\n}}\n__sk_step=$?\n[ $__sk_rc -ne 0 ] || __sk_rc=$__sk_step\n"));
        } else {
            s.push_str(&format!("if [ $__sk_rc -eq 0 ]; then\n{{ {command}\n}}\n__sk_rc=$?\nfi\n"));
        }
        for artifact in &step.produces {
            let rel = render_text(artifact, &vars).map_err(RecipeError::from)?;
            if !always {
                s.push_str(&format!("[ $__sk_rc -ne 0 ] || test -f {} || __sk_rc=1\n", shell_quote(&rel)));
            }
        }
    }
    s.push_str("exit $__sk_rc\n");
    Ok(s)
}
