use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FailureEvent;

/// Stable identity of a problem, used to find a solution that worked before.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProblemSignature(pub String);

impl std::fmt::Display for ProblemSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

struct Canon {
    timestamp: Regex,
    date: Regex,
    clock: Regex,
    pid_word: Regex,
    pid_bracket: Regex,
    abs_path: Regex,
}

fn canon() -> &'static Canon {
    static CANON: OnceLock<Canon> = OnceLock::new();
    CANON.get_or_init(|| Canon {
        timestamp: Regex::new(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:?\d{2})?").unwrap(),
        date: Regex::new(r"\b\d{4}-\d{2}-\d{2}\b").unwrap(),
        clock: Regex::new(r"\b\d{1,2}:\d{2}:\d{2}(\.\d+)?\b").unwrap(),
        pid_word: Regex::new(r"(?i)\b(pid|process)([ =:#]+)\d+").unwrap(),
        pid_bracket: Regex::new(r"\[\d+\]").unwrap(),
        abs_path: Regex::new(r#"(?:^|[\s'"=(])(/[^\s'"():]+)"#).unwrap(),
    })
}

/// Strip timestamps, process ids and absolute path prefixes from a line.
pub fn canonicalize_error_line(line: &str) -> String {
    let c = canon();
    let s = c.timestamp.replace_all(line.trim(), "<time>");
    let s = c.date.replace_all(&s, "<date>");
    let s = c.clock.replace_all(&s, "<time>");
    let s = c.pid_word.replace_all(&s, "$1$2<pid>");
    let s = c.pid_bracket.replace_all(&s, "[<pid>]");
    c.abs_path
        .replace_all(&s, |caps: &regex::Captures| {
            let whole = &caps[0];
            let path = &caps[1];
            let lead = &whole[..whole.len() - path.len()];
            let trimmed = path.trim_end_matches('/');
            let base = trimmed.rsplit('/').next().unwrap_or("");
            format!("{lead}{base}")
        })
        .into_owned()
}

impl ProblemSignature {
    pub fn of(event: &FailureEvent) -> Self {
        let mut hasher = Sha256::new();
        let first_line = canonicalize_error_line(&event.result.first_error_line());
        for part in [
            event.tool.as_deref().unwrap_or(""),
            &event.result.exit_code.to_string(),
            &first_line,
            event.resource.as_ref().map_or("", |r| r.key.as_str()),
        ] {
            hasher.update(part.as_bytes());
            hasher.update([0u8]);
        }
        ProblemSignature(hex::encode(hasher.finalize()))
    }
}
