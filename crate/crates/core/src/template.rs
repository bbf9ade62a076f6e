//! `{name}` placeholder substitution used by step actions, tool setup
//! commands, workaround actions and scaffold templates.
//!
//! A placeholder is `{` + a lowercase identifier + `}`. Anything else,
//! including shell parameter expansions such as `${HOME}`, is literal text.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cleanroom::shell_quote;

pub type Vars = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("template refers to unknown placeholder {{{name}}}")]
pub struct UnknownPlaceholder {
    pub name: String,
}

fn placeholder_at(text: &str) -> Option<&str> {
    let body = text.strip_prefix('{')?;
    let end = body.find('}')?;
    let name = &body[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    let ok = first.is_ascii_lowercase()
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    ok.then_some(name)
}

fn substitute(template: &str, vars: &Vars, quote: bool) -> Result<String, UnknownPlaceholder> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        match placeholder_at(rest) {
            Some(name) => {
                let value = vars.get(name).ok_or_else(|| UnknownPlaceholder { name: name.to_string() })?;
                if quote {
                    out.push_str(&shell_quote(value));
                } else {
                    out.push_str(value);
                }
                rest = &rest[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Substitute placeholders with shell-quoted values.
pub fn render_command(template: &str, vars: &Vars) -> Result<String, UnknownPlaceholder> {
    substitute(template, vars, true)
}

/// Substitute placeholders verbatim.
pub fn render_text(template: &str, vars: &Vars) -> Result<String, UnknownPlaceholder> {
    substitute(template, vars, false)
}

/// Names of all placeholders in `template`, in order of appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        rest = &rest[pos..];
        match placeholder_at(rest) {
            Some(name) => {
                names.push(name.to_string());
                rest = &rest[name.len() + 2..];
            }
            None => rest = &rest[1..],
        }
    }
    names
}

pub fn vars<I, K, V>(pairs: I) -> Vars
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotes_values_and_keeps_shell_expansions() {
        let v = vars([("release", "sbx 2")]);
        let out = render_command(": \"${SBX_RELEASE:={release}}\"; echo ${HOME}", &v).unwrap();
        assert_eq!(out, ": \"${SBX_RELEASE:='sbx 2'}\"; echo ${HOME}");
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let err = render_text("cp {src} {dst}", &vars([("src", "a")])).unwrap_err();
        assert_eq!(err.name, "dst");
    }

    #[test]
    fn lists_placeholders() {
        assert_eq!(placeholders("{a} {B} {c_1}{"), vec!["a", "c_1"]);
    }
}
