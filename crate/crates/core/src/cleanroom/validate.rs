use std::str::FromStr;

use regex::Regex;
use serde::Serialize;

use super::{CleanroomError, CommandResult};

/// A predicate over a command result, written as e.g. `exit_code == 0` or
/// `no line matches 'error:'`.
#[derive(Debug, Clone)]
pub enum Validator {
    ExitCodeEq(u8),
    ExitCodeNe(u8),
    NoLineMatches(Regex),
    SomeLineMatches(Regex),
    StderrEmpty,
}

impl std::fmt::Display for Validator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Validator::ExitCodeEq(c) => write!(f, "exit_code == {c}"),
            Validator::ExitCodeNe(c) => write!(f, "exit_code != {c}"),
            Validator::NoLineMatches(r) => write!(f, "no line matches '{}'", r.as_str()),
            Validator::SomeLineMatches(r) => write!(f, "some line matches '{}'", r.as_str()),
            Validator::StderrEmpty => f.write_str("stderr empty"),
        }
    }
}

fn quoted_regex(rest: &str, spec: &str) -> Result<Regex, CleanroomError> {
    let rest = rest.trim();
    let inner = rest
        .strip_prefix('\'')
        .and_then(|r| r.strip_suffix('\''))
        .ok_or_else(|| CleanroomError::BadValidator(spec.to_string()))?;
    Regex::new(inner).map_err(|_| CleanroomError::BadValidator(spec.to_string()))
}

impl FromStr for Validator {
    type Err = CleanroomError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let s = spec.trim();
        let bad = || CleanroomError::BadValidator(spec.to_string());
        if let Some(rest) = s.strip_prefix("exit_code") {
            let rest = rest.trim_start();
            let (eq, num) = if let Some(n) = rest.strip_prefix("==") {
                (true, n)
            } else if let Some(n) = rest.strip_prefix("!=") {
                (false, n)
            } else {
                return Err(bad());
            };
            let code: u8 = num.trim().parse().map_err(|_| bad())?;
            return Ok(if eq { Validator::ExitCodeEq(code) } else { Validator::ExitCodeNe(code) });
        }
        if let Some(rest) = s.strip_prefix("no line matches") {
            return Ok(Validator::NoLineMatches(quoted_regex(rest, spec)?));
        }
        if let Some(rest) = s.strip_prefix("some line matches").or_else(|| s.strip_prefix("line matches")) {
            return Ok(Validator::SomeLineMatches(quoted_regex(rest, spec)?));
        }
        if s == "stderr empty" {
            return Ok(Validator::StderrEmpty);
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckOutcome {
    pub validator: String,
    pub passed: bool,
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationVerdict {
    pub checks: Vec<CheckOutcome>,
}

impl ValidationVerdict {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn output_lines(result: &CommandResult) -> Vec<String> {
    let mut lines: Vec<String> = result.stdout_text().lines().map(str::to_string).collect();
    lines.extend(result.stderr_text().lines().map(str::to_string));
    lines
}

pub fn validate_result(result: &CommandResult, validators: &[Validator]) -> ValidationVerdict {
    let checks = validators
        .iter()
        .map(|v| {
            let (passed, evidence) = match v {
                Validator::ExitCodeEq(c) => (result.exit_code == *c, Some(format!("exit code {}", result.exit_code))),
                Validator::ExitCodeNe(c) => (result.exit_code != *c, Some(format!("exit code {}", result.exit_code))),
                Validator::NoLineMatches(re) => match output_lines(result).into_iter().find(|l| re.is_match(l)) {
                    Some(line) => (false, Some(line)),
                    None => (true, None),
                },
                Validator::SomeLineMatches(re) => match output_lines(result).into_iter().find(|l| re.is_match(l)) {
                    Some(line) => (true, Some(line)),
                    None => (false, None),
                },
                Validator::StderrEmpty => {
                    let first = result.stderr_text().lines().next().map(str::to_string);
                    (result.stderr.is_empty(), first)
                }
            };
            CheckOutcome {
                validator: v.to_string(),
                passed,
                evidence,
            }
        })
        .collect();
    ValidationVerdict { checks }
}
