//! Gated, journaled workspace repair. A repair runs only when exactly one
//! registered case matches the diagnosis; each mutation is journaled (and
//! synced) before it happens, and removed or replaced files are moved into a
//! backup area so the journal is enough to undo by hand.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::{LayoutKind, Mutation, RepairCase};
use super::{FailureEvent, FaultError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairDiagnosis {
    /// First diagnostic line of the failure.
    pub symptom: String,
    /// Directory workspace paths in the symptom are relative to.
    pub base_dir: PathBuf,
}

pub fn diagnose(event: &FailureEvent, base_dir: &Path) -> RepairDiagnosis {
    RepairDiagnosis {
        symptom: event.result.first_error_line(),
        base_dir: base_dir.to_path_buf(),
    }
}

#[derive(Debug, Clone)]
pub struct RepairOptions {
    pub journal: PathBuf,
    /// Test hook: stop right after journal entry N has been written, before
    /// its mutation, as if the process had been killed.
    pub halt_after_journal_entry: Option<usize>,
}

impl RepairOptions {
    pub fn new(journal: impl Into<PathBuf>) -> Self {
        RepairOptions { journal: journal.into(), halt_after_journal_entry: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: usize,
    pub case: String,
    pub op: String,
    pub path: PathBuf,
    /// Backup location (remove/replace) or destination (move).
    pub other: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AppliedMutation {
    pub op: String,
    pub path: PathBuf,
    pub other: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepairReport {
    pub case: String,
    pub workspace: PathBuf,
    pub mutations: Vec<AppliedMutation>,
    pub journal: PathBuf,
}

fn is_contained(rel: &Path) -> bool {
    rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn layout_holds(root: &Path, case: &RepairCase) -> Result<(), String> {
    for rule in &case.layout {
        let p = root.join(&rule.path);
        let ok = match rule.kind {
            LayoutKind::File => p.is_file(),
            LayoutKind::Dir => p.is_dir(),
            LayoutKind::Absent => !p.exists(),
        };
        if !ok {
            return Err(format!("{} is not {:?}", rule.path.display(), rule.kind));
        }
    }
    Ok(())
}

/// Find the single case that matches both symptom and on-disk layout.
fn select_case<'a>(diagnosis: &RepairDiagnosis, cases: &'a [RepairCase]) -> Result<(&'a RepairCase, PathBuf), FaultError> {
    let mut hits = Vec::new();
    let mut misses = Vec::new();
    for case in cases {
        let Some(caps) = case.symptom.captures(&diagnosis.symptom) else { continue };
        let rel = caps.name("workspace").map(|m| PathBuf::from(m.as_str())).unwrap_or_default();
        if !is_contained(&rel) {
            misses.push(format!("{}: workspace {} escapes base dir", case.name, rel.display()));
            continue;
        }
        let root = diagnosis.base_dir.join(&rel);
        match layout_holds(&root, case) {
            Ok(()) => hits.push((case, root)),
            Err(why) => misses.push(format!("{}: {why}", case.name)),
        }
    }
    match hits.len() {
        1 => Ok(hits.pop().unwrap()),
        0 if misses.is_empty() => Err(FaultError::CaseNotClear(format!("no case for symptom {:?}", diagnosis.symptom))),
        0 => Err(FaultError::CaseNotClear(misses.join("; "))),
        n => Err(FaultError::CaseNotClear(format!("{n} cases match; ambiguous"))),
    }
}

fn backup_root(journal: &Path, case: &str) -> PathBuf {
    let base = journal.parent().unwrap_or(Path::new(".")).join("repair-backup");
    (0..)
        .map(|n| base.join(format!("{case}-{n}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

fn move_path(from: &Path, to: &Path) -> std::io::Result<()> {
    if let Some(parent) = to.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::rename(from, to)
}

pub fn repair_workspace(
    diagnosis: &RepairDiagnosis,
    cases: &[RepairCase],
    options: &RepairOptions,
) -> Result<RepairReport, FaultError> {
    let (case, root) = select_case(diagnosis, cases)?;
    for m in &case.mutations {
        let paths: Vec<&Path> = match m {
            Mutation::Remove { path } | Mutation::Replace { path, .. } => vec![path],
            Mutation::Move { from, to } => vec![from, to],
        };
        if let Some(bad) = paths.into_iter().find(|p| !is_contained(p)) {
            return Err(FaultError::CaseNotClear(format!("case {} mutates {} outside the workspace", case.name, bad.display())));
        }
    }

    let journal_failed = |e: std::io::Error| FaultError::JournalWriteFailed { path: options.journal.clone(), reason: e.to_string() };
    if let Some(parent) = options.journal.parent() {
        std::fs::create_dir_all(parent).map_err(journal_failed)?;
    }
    let mut journal = OpenOptions::new().create(true).append(true).open(&options.journal).map_err(journal_failed)?;
    let backups = backup_root(&options.journal, &case.name);

    let mut applied = Vec::new();
    for (seq, mutation) in case.mutations.iter().enumerate() {
        let (op, path, other) = match mutation {
            Mutation::Remove { path } => ("remove", root.join(path), Some(backups.join(path))),
            Mutation::Replace { path, .. } => ("replace", root.join(path), Some(backups.join(path))),
            Mutation::Move { from, to } => ("move", root.join(from), Some(root.join(to))),
        };
        let entry = JournalEntry { seq, case: case.name.clone(), op: op.into(), path: path.clone(), other: other.clone() };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        writeln!(journal, "{line}").and_then(|_| journal.sync_data()).map_err(journal_failed)?;
        if options.halt_after_journal_entry == Some(seq) {
            return Err(FaultError::Interrupted(seq));
        }
        match mutation {
            Mutation::Remove { .. } => move_path(&path, other.as_ref().unwrap())?,
            Mutation::Move { .. } => move_path(&path, other.as_ref().unwrap())?,
            Mutation::Replace { content, .. } => {
                if path.exists() {
                    move_path(&path, other.as_ref().unwrap())?;
                }
                std::fs::write(&path, content)?;
            }
        }
        log::info!("repair {}: {op} {}", case.name, path.display());
        applied.push(AppliedMutation { op: op.into(), path, other });
    }
    Ok(RepairReport { case: case.name.clone(), workspace: root, mutations: applied, journal: options.journal.clone() })
}

pub fn read_journal(path: &Path) -> std::io::Result<Vec<JournalEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use regex::Regex;

    use super::*;
    use crate::faults::registry::LayoutRule;

    fn lock_case() -> RepairCase {
        RepairCase {
            name: "stale-build-lock".into(),
            symptom: Regex::new(r"workspace (?P<workspace>\S+) locked by stale lock build/\.lock").unwrap(),
            layout: vec![
                LayoutRule { path: "build.cfg".into(), kind: LayoutKind::File },
                LayoutRule { path: "build/.lock".into(), kind: LayoutKind::File },
            ],
            mutations: vec![Mutation::Remove { path: "build/.lock".into() }],
        }
    }

    fn workspace() -> (tempfile::TempDir, RepairDiagnosis) {
        let dir = tempfile::tempdir().unwrap();
        let pkg = dir.path().join("Pkg");
        std::fs::create_dir_all(pkg.join("build")).unwrap();
        std::fs::write(pkg.join("build.cfg"), "package Pkg\n").unwrap();
        std::fs::write(pkg.join("build/.lock"), "pid=1\n").unwrap();
        let diag = RepairDiagnosis {
            symptom: "sbx-build: error: workspace Pkg locked by stale lock build/.lock".into(),
            base_dir: dir.path().to_path_buf(),
        };
        (dir, diag)
    }

    #[test]
    fn clear_case_removes_lock_and_journals() {
        let (dir, diag) = workspace();
        let journal = dir.path().join(".startkit/repair-journal.jsonl");
        let report = repair_workspace(&diag, &[lock_case()], &RepairOptions::new(&journal)).unwrap();
        assert!(!dir.path().join("Pkg/build/.lock").exists());
        assert_eq!(report.mutations.len(), 1);
        let entries = read_journal(&journal).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].op, "remove");
        // backup allows manual undo
        assert_eq!(std::fs::read_to_string(entries[0].other.as_ref().unwrap()).unwrap(), "pid=1\n");
    }

    #[test]
    fn near_miss_layout_is_refused() {
        let (dir, diag) = workspace();
        std::fs::remove_file(dir.path().join("Pkg/build.cfg")).unwrap();
        let journal = dir.path().join("j.jsonl");
        let err = repair_workspace(&diag, &[lock_case()], &RepairOptions::new(&journal)).unwrap_err();
        assert!(matches!(err, FaultError::CaseNotClear(_)));
        assert!(dir.path().join("Pkg/build/.lock").exists());
        assert!(!journal.exists());
    }

    #[test]
    fn unwritable_journal_refuses_to_mutate() {
        let (dir, diag) = workspace();
        let blocker = dir.path().join("blocker");
        std::fs::write(&blocker, "").unwrap();
        let err = repair_workspace(&diag, &[lock_case()], &RepairOptions::new(blocker.join("j.jsonl"))).unwrap_err();
        assert!(matches!(err, FaultError::JournalWriteFailed { .. }));
        assert!(dir.path().join("Pkg/build/.lock").exists());
    }

    #[test]
    fn interrupted_repair_has_journal_ahead_of_mutation() {
        let (dir, diag) = workspace();
        let mut case = lock_case();
        case.mutations.push(Mutation::Replace { path: "build.cfg".into(), content: "package Pkg\n# repaired\n".into() });
        let journal = dir.path().join("j.jsonl");
        let opts = RepairOptions { journal: journal.clone(), halt_after_journal_entry: Some(1) };
        assert!(matches!(repair_workspace(&diag, &[case], &opts), Err(FaultError::Interrupted(1))));
        let entries = read_journal(&journal).unwrap();
        assert_eq!(entries.len(), 2);
        // first mutation applied, second journaled but not applied
        assert!(!dir.path().join("Pkg/build/.lock").exists());
        assert_eq!(std::fs::read_to_string(dir.path().join("Pkg/build.cfg")).unwrap(), "package Pkg\n");
    }

    #[test]
    fn escaping_workspace_refused() {
        let (dir, mut diag) = workspace();
        diag.symptom = "sbx-build: error: workspace ../x locked by stale lock build/.lock".into();
        let err = repair_workspace(&diag, &[lock_case()], &RepairOptions::new(dir.path().join("j"))).unwrap_err();
        assert!(matches!(err, FaultError::CaseNotClear(_)));
    }
}
