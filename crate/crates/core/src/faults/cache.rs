//! Persisted map from problem signature to the resolution that worked.
//!
//! File layout: a schema header line, then one JSON record per line. The file
//! is replaced atomically on every write; an unreadable file is renamed aside
//! and the cache starts cold.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::resolve::Resolution;
use super::{FaultError, ProblemSignature};

pub const CACHE_SCHEMA: &str = "startkit.solution-cache";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub signature: ProblemSignature,
    pub resolution: Resolution,
    pub hit_count: u64,
    /// Seconds since the Unix epoch.
    pub last_used: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SolutionCache {
    path: Option<PathBuf>,
    records: IndexMap<ProblemSignature, SolutionRecord>,
    quarantined: Option<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn parse(text: &str) -> Result<IndexMap<ProblemSignature, SolutionRecord>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Header = match lines.next() {
        Some(h) => serde_json::from_str(h).map_err(|e| format!("header: {e}"))?,
        None => return Ok(IndexMap::new()),
    };
    if header.schema != CACHE_SCHEMA || header.version != CACHE_VERSION {
        return Err(format!("unsupported schema {} v{}", header.schema, header.version));
    }
    let mut records = IndexMap::new();
    for line in lines {
        let record: SolutionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if record.hit_count == 0 {
            return Err("record with zero hit count".into());
        }
        records.insert(record.signature.clone(), record);
    }
    Ok(records)
}

impl SolutionCache {
    /// In-memory cache that never touches disk.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open the cache file at `path`; a missing file is an empty cache.
    pub fn open(path: &Path) -> Self {
        let mut cache = SolutionCache { path: Some(path.to_path_buf()), ..Default::default() };
        match std::fs::read_to_string(path) {
            Ok(text) => match parse(&text) {
                Ok(records) => cache.records = records,
                Err(reason) => {
                    let aside = quarantine_path(path);
                    log::warn!("solution cache {} is corrupt ({reason}); moved to {}", path.display(), aside.display());
                    if std::fs::rename(path, &aside).is_ok() {
                        cache.quarantined = Some(aside);
                    }
                }
            },
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {}
            Err(err) => log::warn!("cannot read solution cache {}: {err}", path.display()),
        }
        cache
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Where a corrupt cache file was moved, if that happened on open.
    pub fn quarantined(&self) -> Option<&Path> {
        self.quarantined.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup_solution(&self, signature: &ProblemSignature) -> Option<&SolutionRecord> {
        self.records.get(signature)
    }

    /// Store the resolution for `signature`. Re-recording the same resolution
    /// counts as a reuse.
    pub fn record_solution(&mut self, signature: ProblemSignature, resolution: Resolution) -> Result<(), FaultError> {
        let stamp = now();
        match self.records.get_mut(&signature) {
            Some(rec) if rec.resolution == resolution => {
                rec.hit_count += 1;
                rec.last_used = stamp;
            }
            _ => {
                self.records.insert(
                    signature.clone(),
                    SolutionRecord { signature, resolution, hit_count: 1, last_used: stamp },
                );
            }
        }
        self.persist()
    }

    /// Drop in-memory records and reload from disk (cold start).
    pub fn reload(&mut self) {
        if let Some(path) = self.path.clone() {
            *self = SolutionCache::open(&path);
        } else {
            self.records.clear();
        }
    }

    fn persist(&self) -> Result<(), FaultError> {
        let Some(path) = &self.path else { return Ok(()) };
        let unwritable = |e: std::io::Error| FaultError::CacheUnwritable { path: path.clone(), reason: e.to_string() };
        let mut text = serde_json::to_string(&Header { schema: CACHE_SCHEMA.into(), version: CACHE_VERSION }).unwrap();
        text.push('\n');
        for rec in self.records.values() {
            text.push_str(&serde_json::to_string(rec).expect("record serializes"));
            text.push('\n');
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(unwritable)?;
        let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("cache")));
        let mut file = std::fs::File::create(&tmp).map_err(unwritable)?;
        file.write_all(text.as_bytes()).and_then(|_| file.sync_all()).map_err(unwritable)?;
        std::fs::rename(&tmp, path).map_err(unwritable)
    }
}

fn quarantine_path(path: &Path) -> PathBuf {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("cache");
    (0..)
        .map(|n| path.with_file_name(format!("{name}.corrupt-{n}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}
