use regex::Regex;

use super::{ErrorClass, FailureEvent, ResourceOwner};

/// Diagnostics that point at a resource which comes and goes.
#[derive(Debug, Clone)]
pub struct ClassifyRules {
    pub transient_patterns: Vec<Regex>,
}

impl Default for ClassifyRules {
    fn default() -> Self {
        let patterns = [
            r"(?i)no valid (credential|token|ticket)",
            r"(?i)cannot authenticate",
            r"(?i)(credential|token|ticket) (has )?expired",
            r"(?i)connection (refused|timed out|reset)",
            r"(?i)temporarily unavailable",
            r"(?i)\bunreachable\b",
            r"(?i)no space left on device",
            r"(?i)disk quota exceeded",
        ];
        ClassifyRules {
            transient_patterns: patterns.iter().map(|p| Regex::new(p).expect("valid pattern")).collect(),
        }
    }
}

impl ClassifyRules {
    pub fn is_transient_text(&self, text: &str) -> bool {
        text.lines()
            .any(|line| self.transient_patterns.iter().any(|re| re.is_match(line)))
    }

    pub fn classify(&self, event: &FailureEvent) -> ErrorClass {
        if let Some(resource) = &event.resource {
            match resource.owner {
                ResourceOwner::Transient => return ErrorClass::Transient,
                ResourceOwner::User => return ErrorClass::UserAction,
                ResourceOwner::Distribution => {}
            }
        }
        let diagnostic = String::from_utf8_lossy(event.diagnostic());
        if self.is_transient_text(&diagnostic) {
            return ErrorClass::Transient;
        }
        if event.user_input && !diagnostic.trim().is_empty() {
            return ErrorClass::UserAction;
        }
        // includes manifest mismatches and anything unrecognized
        ErrorClass::SystemBroken
    }
}

pub fn classify(event: &FailureEvent) -> ErrorClass {
    ClassifyRules::default().classify(event)
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;
    use crate::cleanroom::CommandResult;
    use crate::faults::{ConfigKey, ResourceProblem, ResourceRef};

    fn key() -> ConfigKey {
        ConfigKey::new("sbx-2", "optimized", "x86_64-linux").unwrap()
    }

    fn resource(owner: ResourceOwner, problem: ResourceProblem) -> ResourceRef {
        ResourceRef {
            key: "k".into(),
            path: PathBuf::from("/site/x"),
            relative: PathBuf::from("x"),
            owner,
            expected_sha256: None,
            problem,
        }
    }

    #[test]
    fn compile_failure_on_user_source_is_user_action() {
        let mut ev = FailureEvent::from_command(
            "build-package",
            Some("sbx-build"),
            "sbx-build MyAnalysis",
            CommandResult::synthetic(1, "src/A.alg:3: error: unexpected 'bogus'\n"),
            key(),
        );
        ev.user_input = true;
        assert_eq!(classify(&ev), ErrorClass::UserAction);
    }

    #[test]
    fn missing_credential_is_transient() {
        let ev = FailureEvent::from_resource(
            "checkout",
            resource(ResourceOwner::Transient, ResourceProblem::Missing),
            key(),
        );
        assert_eq!(classify(&ev), ErrorClass::Transient);
        let ev = FailureEvent::from_command(
            "checkout",
            Some("sbx-co"),
            "sbx-co checkout X",
            CommandResult::synthetic(3, "sbx-co: cannot authenticate: no valid credential token\n"),
            key(),
        );
        assert_eq!(classify(&ev), ErrorClass::Transient);
    }

    #[test]
    fn checksum_mismatch_is_system_broken() {
        let ev = FailureEvent::from_resource(
            "setup-runtime",
            resource(ResourceOwner::Distribution, ResourceProblem::Invalid("checksum mismatch".into())),
            key(),
        );
        assert_eq!(classify(&ev), ErrorClass::SystemBroken);
    }

    #[test]
    fn unclassifiable_defaults_to_system_broken() {
        let ev = FailureEvent::from_command("s", None, "weird", CommandResult::synthetic(9, ""), key());
        assert_eq!(classify(&ev), ErrorClass::SystemBroken);
    }

    #[test]
    fn missing_user_file_is_user_action() {
        let ev = FailureEvent::from_resource("fetch-options", resource(ResourceOwner::User, ResourceProblem::Missing), key());
        assert_eq!(classify(&ev), ErrorClass::UserAction);
    }
}
