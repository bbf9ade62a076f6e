//! Independent oracles and generators shared by the property tests and the
//! acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use startkit::cleanroom::EnvMap;
use startkit::interact::{PromptDetector, PromptSpec};
use startkit::recipes::{make_template, Recipe, RecipeRegistry, Step};

pub const MANAGED_VARS: &[&str] = &["ATLAS_*", "CMT*", "SBX_*"];
pub const MANAGED_PATHS: &[&str] = &["*/atlas/*", "*/releases/*", "*/sbx-site/*"];
pub const PATH_VARS: &[&str] = &["PATH", "LD_LIBRARY_PATH"];

/// `*` matches any run of characters (including `/`), `?` one character.
pub fn wildcard(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let mut memo = vec![vec![None; t.len() + 1]; p.len() + 1];
    fn go(p: &[char], t: &[char], i: usize, j: usize, memo: &mut Vec<Vec<Option<bool>>>) -> bool {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = match p.get(i) {
            None => j == t.len(),
            Some('*') => go(p, t, i + 1, j, memo) || (j < t.len() && go(p, t, i, j + 1, memo)),
            Some('?') => j < t.len() && go(p, t, i + 1, j + 1, memo),
            Some(c) => t.get(j) == Some(c) && go(p, t, i + 1, j + 1, memo),
        };
        memo[i][j] = Some(v);
        v
    }
    go(&p, &t, 0, 0, &mut memo)
}

fn any_match(patterns: &[&str], text: &str) -> bool {
    patterns.iter().any(|p| wildcard(p, text))
}

/// Filter oracle: drop managed variables, drop managed entries of path lists.
pub fn scrub_oracle(env: &EnvMap) -> EnvMap {
    env.iter()
        .filter(|(k, _)| !any_match(MANAGED_VARS, k))
        .map(|(k, v)| {
            if PATH_VARS.contains(&k.as_str()) && !v.is_empty() {
                let parts: Vec<&str> = v.split(':').collect();
                let kept: Vec<&str> = parts.iter().copied().filter(|e| !any_match(MANAGED_PATHS, e)).collect();
                if kept.len() != parts.len() {
                    return (k.clone(), kept.join(":"));
                }
            }
            (k.clone(), v.clone())
        })
        .collect()
}

/// Append oracle: user values stay, absent names get the default, path
/// lists get the default entries they lack appended once each.
pub fn merge_oracle(user: &EnvMap, defaults: &EnvMap) -> EnvMap {
    let mut names: Vec<&String> = user.keys().collect();
    names.extend(defaults.keys().filter(|k| !user.contains_key(*k)));
    names
        .into_iter()
        .map(|k| {
            let value = match (user.get(k), defaults.get(k)) {
                (Some(u), Some(d)) if PATH_VARS.contains(&k.as_str()) => {
                    let mut entries: Vec<String> = if u.is_empty() { vec![] } else { u.split(':').map(String::from).collect() };
                    let have: BTreeSet<String> = entries.iter().cloned().collect();
                    let mut added = BTreeSet::new();
                    if !d.is_empty() {
                        for e in d.split(':') {
                            if !have.contains(e) && added.insert(e.to_string()) {
                                entries.push(e.to_string());
                            }
                        }
                    }
                    entries.join(":")
                }
                (Some(u), _) => u.clone(),
                (None, Some(d)) => d.clone(),
                (None, None) => unreachable!(),
            };
            (k.clone(), value)
        })
        .collect()
}

pub fn random_env(rng: &mut StdRng) -> EnvMap {
    const NAMES: &[&str] = &[
        "ATLAS_ROOT", "ATLAS_RELEASE", "CMTPATH", "CMTCONFIG", "SBX_RELEASE", "SBX_SITE", "HOME", "USER", "LANG", "EDITOR", "LC_ALL",
        "MY_ATLAS", "XCMT", "SBXFOO", "TERM", "PATH", "LD_LIBRARY_PATH",
    ];
    const ENTRIES: &[&str] = &[
        "/usr/bin", "/bin", "/opt/atlas/bin", "/x/releases/sbx-2/bin", "/home/u/sbx-site/bin", "/home/u/bin", "", "/atlas",
        "/usr/local/bin", "/srv/releases", "/a/releases/", "/opt/tools",
    ];
    let mut env = EnvMap::new();
    let n = rng.gen_range(0..NAMES.len());
    for name in NAMES.choose_multiple(rng, n) {
        let value = if PATH_VARS.contains(name) {
            let k = rng.gen_range(0..6);
            (0..k).map(|_| *ENTRIES.choose(rng).unwrap()).collect::<Vec<_>>().join(":")
        } else {
            format!("v{}", rng.gen_range(0..100))
        };
        env.insert(name.to_string(), value);
    }
    env
}

pub fn random_defaults(rng: &mut StdRng) -> EnvMap {
    let mut d = EnvMap::new();
    if rng.gen_bool(0.8) {
        let entries = ["/usr/local/bin", "/usr/bin", "/bin", "/usr/bin"];
        let k = rng.gen_range(0..=entries.len());
        d.insert("PATH".into(), entries[..k].join(":"));
    }
    if rng.gen_bool(0.5) {
        d.insert("LC_ALL".into(), "C".into());
    }
    if rng.gen_bool(0.5) {
        d.insert("LD_LIBRARY_PATH".into(), "/usr/lib:/lib".into());
    }
    d
}

/// A shell command with multi-line output, decoy sentinel-shaped lines and
/// a chosen exit status. Never exits the shell it runs in.
pub fn random_command(rng: &mut StdRng) -> String {
    let mut parts = Vec::new();
    for _ in 0..rng.gen_range(0..5) {
        let part = match rng.gen_range(0..7) {
            0 => format!("printf 'line %d\\n' {}", rng.gen_range(0..1000)),
            1 => "printf 'a\\nb\\n\\nc'".to_string(),
            2 => format!("printf '__STARTKIT_{:08x}_{}__:0\\n'", rng.gen::<u32>(), rng.gen_range(1..50)),
            3 => "printf '\\n__STARTKIT_deadbeef_1__:7\\n__STARTKIT_x__\\n'".to_string(),
            4 => "echo to-stderr >&2".to_string(),
            5 => format!("i=0; while [ $i -lt {} ]; do echo row$i; i=$((i+1)); done", rng.gen_range(0..40)),
            _ => "printf 'no newline'".to_string(),
        };
        parts.push(part);
    }
    let code = rng.gen_range(0..=254);
    parts.push(format!("(exit {code})"));
    parts.join("; ")
}

pub fn detector() -> PromptDetector {
    PromptDetector::new(PromptSpec::new("^ask> ", Duration::from_millis(50)).unwrap())
}

/// Bursts of framework output, each followed by a pause. Includes real
/// prompts, prompts split mid-line, and prompt text followed by more output.
pub fn fixture_bursts(rng: &mut StdRng) -> Vec<String> {
    let mut bursts = vec!["sbxrun 2.0 interactive, release sbx-2\nenter an expression, or quit\nask> ".to_string()];
    for _ in 0..rng.gen_range(3..10) {
        let b = match rng.gen_range(0..6) {
            0 => format!("{}\nask> ", rng.gen_range(0..100)),
            1 => "value ask> ".to_string(),
            2 => "ask> still output\nask> ".to_string(),
            3 => "ask> still output\n".to_string(),
            4 => "partial ".to_string(),
            _ => "ask> ".to_string(),
        };
        bursts.push(b);
    }
    bursts
}

/// Does the output so far end on a prompt that starts its line?
pub fn ends_at_line_start_prompt(text: &str) -> bool {
    text.rsplit('\n').next() == Some("ask> ")
}

/// Cut `text` into random chunks, possibly inside multi-byte sequences.
pub fn random_chunks(rng: &mut StdRng, text: &[u8]) -> Vec<Vec<u8>> {
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let n = rng.gen_range(1..=(text.len() - i).min(7));
        chunks.push(text[i..i + n].to_vec());
        i += n;
    }
    chunks
}

/// Feed one fuzzed transcript; returns (false activations, misses).
pub fn fuzz_prompt_once(rng: &mut StdRng) -> (usize, usize) {
    let mut d = detector();
    let mut now = Instant::now();
    let mut seen = String::new();
    let (mut false_fires, mut misses) = (0, 0);
    for burst in fixture_bursts(rng) {
        for chunk in random_chunks(rng, burst.as_bytes()) {
            if d.poll(now) {
                false_fires += 1;
            }
            d.feed(&chunk, now);
            now += Duration::from_millis(rng.gen_range(0..40));
        }
        seen.push_str(&burst);
        now += Duration::from_millis(rng.gen_range(50..120));
        let fired = d.poll(now);
        let truth = ends_at_line_start_prompt(&seen);
        match (fired, truth) {
            (true, false) => false_fires += 1,
            (false, true) => misses += 1,
            _ => {}
        }
        if d.poll(now + Duration::from_secs(1)) {
            false_fires += 1;
        }
    }
    (false_fires, misses)
}

pub struct RandomRecipe {
    pub registry: RecipeRegistry,
    pub recipe: Recipe,
}

/// A recipe of at most 12 steps over the three phases, with random
/// acyclic constraints among the core steps.
pub fn random_recipe(rng: &mut StdRng) -> RandomRecipe {
    let total = rng.gen_range(1..=12);
    let ids: Vec<String> = (0..total).map(|i| format!("s{i}")).collect();
    let n_init = rng.gen_range(0..=total);
    let n_fin = rng.gen_range(0..=total - n_init);
    let init: Vec<&str> = ids[..n_init].iter().map(String::as_str).collect();
    let fin: Vec<&str> = ids[n_init..n_init + n_fin].iter().map(String::as_str).collect();
    let core: Vec<&str> = ids[n_init + n_fin..].iter().map(String::as_str).collect();
    let mut registry = RecipeRegistry::new();
    for id in &ids {
        registry.add_step(Step::new(id, "true")).unwrap();
    }
    let mut recipe = Recipe::new("r", make_template(&init, &fin).unwrap(), &core);
    let mut hidden: Vec<&str> = core.clone();
    hidden.shuffle(rng);
    for i in 0..hidden.len() {
        for j in i + 1..hidden.len() {
            if rng.gen_bool(0.3) {
                recipe.constraints.push((hidden[i].to_string(), hidden[j].to_string()));
            }
        }
    }
    registry.add_recipe(recipe.clone()).unwrap();
    RandomRecipe { registry, recipe }
}

/// Expected plan: init in order, core by repeatedly taking the earliest
/// declared step whose predecessors are done, finalize in order.
pub fn plan_oracle(recipe: &Recipe) -> Vec<String> {
    let mut order = recipe.template.init_steps.clone();
    let mut remaining: Vec<String> = recipe.core_steps.clone();
    while !remaining.is_empty() {
        let pick = remaining
            .iter()
            .position(|s| !recipe.constraints.iter().any(|(a, b)| b == s && remaining.contains(a)))
            .expect("acyclic");
        order.push(remaining.remove(pick));
    }
    order.extend(recipe.template.finalize_steps.iter().cloned());
    order
}

pub fn sha_of(path: &Path) -> String {
    startkit::sha256_hex(&std::fs::read(path).unwrap())
}

/// Every regular file under `dir`, relative path → sha256, skipping the
/// kit's own state directory.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel == ".startkit" {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(rel, sha_of(&p));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Host environment carrying six managed variables and three managed PATH
/// entries next to ordinary user settings.
pub fn polluted_host() -> EnvMap {
    let mut host = EnvMap::new();
    for (k, v) in [
        ("ATLAS_ROOT", "/opt/atlas"),
        ("ATLAS_RELEASE", "11.0.0"),
        ("CMTPATH", "/opt/atlas/cmt"),
        ("CMTCONFIG", "i686-slc3-gcc323-opt"),
        ("SBX_RELEASE", "sbx-0"),
        ("SBX_SITE", "/old/sbx-site"),
        ("HOME", "/home/user"),
        ("EDITOR", "vi"),
    ] {
        host.insert(k.into(), v.into());
    }
    host.insert("PATH".into(), "/opt/atlas/bin:/usr/bin:/x/releases/sbx-1/bin:/bin:/home/user/sbx-site/bin".into());
    host
}
