//! One line per acceptance criterion. Exits nonzero when any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use serde_json::json;
use startkit::cleanroom::{
    merge_missing, one_shot, scrub_environment, EnvMap, EnvironmentProfile, ExpertMode, SessionOptions, ShellSession, DEFAULT_SHELL,
};
use startkit::faults::ErrorClass;
use startkit::kit::{default_profile, Kit, KitConfig};
use startkit::sandbox::{load_corpus, run_scenario, scenario_host_env, FaultScenario, Injection, SandboxRoot, LATEST};
use startkit::scaffold::{ChangeReason, PackageSpec};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn profile() -> EnvironmentProfile {
    default_profile().try_into().unwrap()
}

fn session(mode: ExpertMode, host: EnvMap, dir: &Path) -> Result<ShellSession, String> {
    ShellSession::spawn_with(
        profile(),
        mode,
        dir,
        SessionOptions { shell: DEFAULT_SHELL.into(), timeout: Duration::from_secs(10), host_env: Some(host), events: None },
    )
    .map_err(err)
}

fn sandbox_kit(root: &SandboxRoot) -> Result<Kit, String> {
    let mut config = KitConfig::new(&root.work);
    config.site = Some(root.site.clone());
    config.fallback_sites = root.fallback_sites();
    config.host_env = Some(scenario_host_env(root, &EnvMap::new()));
    Kit::open(config).map_err(err)
}

fn clean_room_isolation() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let p = profile();
    let host = common::polluted_host();
    let managed_vars = host.keys().filter(|k| p.managed_vars.matches(k)).count();
    let managed_paths = host["PATH"].split(':').filter(|e| p.managed_paths.matches(e)).count();
    ensure(managed_vars >= 5 && managed_paths == 3, "fixture is not polluted enough")?;

    let dump = session(ExpertMode::NonExpert, host.clone(), dir.path())?.environment().map_err(err)?;
    let leaked: Vec<String> = dump
        .iter()
        .flat_map(|(k, v)| {
            let mut out = Vec::new();
            if p.managed_vars.matches(k) {
                out.push(k.clone());
            }
            if common::PATH_VARS.contains(&k.as_str()) {
                out.extend(v.split(':').filter(|e| p.managed_paths.matches(e)).map(|e| format!("{k}:{e}")));
            }
            out
        })
        .collect();
    ensure(leaked.is_empty(), format!("managed entries survived: {leaked:?}"))?;

    let dump = session(ExpertMode::Expert, host.clone(), dir.path())?.environment().map_err(err)?;
    for (k, v) in &host {
        let kept = if k == "PATH" { dump.get(k).is_some_and(|d| d.starts_with(v.as_str())) } else { dump.get(k) == Some(v) };
        ensure(kept, format!("expert mode lost {k}"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("{managed_vars} vars + {managed_paths} PATH entries scrubbed, expert kept all, {:.2}s < 5s", elapsed.as_secs_f64()))
}

fn sentinel_soundness() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xacce);
    let mut s = session(ExpertMode::NonExpert, common::polluted_host(), dir.path())?;
    let env = s.environment().map_err(err)?;
    let started = Instant::now();
    let mut agree = 0;
    for i in 0..100 {
        let cmd = common::random_command(&mut rng);
        let framed = s.execute(&cmd).map_err(err)?;
        let direct = one_shot(Path::new(DEFAULT_SHELL), &cmd, &env, dir.path()).map_err(err)?;
        ensure(framed.stdout == direct.stdout && framed.exit_code == direct.exit_code, format!("command {i} differs: {cmd}"))?;
        agree += 1;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{agree}/100 agree with direct execution, {:.2}s < 60s", elapsed.as_secs_f64()))
}

fn scrub_and_merge() -> Check {
    let p = profile();
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x5c2b);
    let (mut scrub_ok, mut merge_ok) = (0, 0);
    for _ in 0..1000 {
        let env = common::random_env(&mut rng);
        let defaults = common::random_defaults(&mut rng);
        let (once, _) = scrub_environment(&env, &p);
        let (twice, _) = scrub_environment(&once, &p);
        if once == common::scrub_oracle(&env) && twice == once {
            scrub_ok += 1;
        }
        if merge_missing(&env, &defaults, &p.path_vars) == common::merge_oracle(&env, &defaults) {
            merge_ok += 1;
        }
    }
    ensure(scrub_ok == 1000 && merge_ok == 1000, format!("scrub {scrub_ok}/1000, merge {merge_ok}/1000"))?;
    Ok("scrub idempotent and oracle-equal 1000/1000, merge oracle-equal 1000/1000".into())
}

/// Rebuild the scenario's sandbox and run the failing command straight in
/// a plain shell, returning what the tool itself writes to stderr.
fn direct_diagnostic(scenario: &FaultScenario, command: &str) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = SandboxRoot::make(dir.path()).map_err(err)?;
    let manifest = startkit::sandbox::standard_manifest(LATEST).map_err(err)?;
    for package in &scenario.packages {
        startkit::scaffold::generate_package(&PackageSpec::new(package, LATEST), &root.work, &manifest).map_err(err)?;
    }
    startkit::sandbox::inject(&scenario.name, &scenario.injections, &root).map_err(err)?;
    let mut env = EnvMap::new();
    env.insert("PATH".into(), format!("{}:/usr/bin:/bin", root.site.join("bin").display()));
    env.insert("HOME".into(), root.work.to_string_lossy().into_owned());
    env.insert("SBX_SITE".into(), root.site.to_string_lossy().into_owned());
    env.insert("SBX_RELEASE".into(), LATEST.into());
    Ok(one_shot(Path::new(DEFAULT_SHELL), command, &env, &root.work).map_err(err)?.stderr)
}

fn recovery_matrix() -> Check {
    let corpus = load_corpus().map_err(err)?;
    ensure(corpus.len() >= 10, format!("only {} scenarios", corpus.len()))?;
    let (mut recovered, mut identical, mut user_actions) = (0, 0, 0);
    for scenario in &corpus {
        let dir = tempfile::tempdir().map_err(err)?;
        let report = run_scenario(scenario, dir.path(), None).map_err(err)?;
        ensure(report.passed(), report.summary())?;
        ensure(report.ladder_ordered(), format!("{}: ladder out of order {:?}", report.name, report.ladder))?;
        if scenario.expected_class == ErrorClass::SystemBroken && scenario.recoverable {
            // one call, no stdin, nothing asked of the user
            ensure(report.recovered, format!("{} needed help", report.name))?;
            recovered += 1;
        }
        if scenario.expected_class == ErrorClass::UserAction {
            user_actions += 1;
            let failed = report.trace.iter().rev().find_map(|e| match e {
                startkit::recipes::TraceEntry::Step { command, exit_code, .. } if *exit_code != 0 => Some(command.clone()),
                _ => None,
            });
            match failed {
                Some(command) => {
                    let direct = direct_diagnostic(scenario, &command)?;
                    ensure(
                        !direct.is_empty() && direct == report.diagnostic,
                        format!(
                            "{}: diagnostic {:?} vs tool {:?}",
                            report.name,
                            String::from_utf8_lossy(&report.diagnostic),
                            String::from_utf8_lossy(&direct)
                        ),
                    )?;
                    identical += 1;
                }
                // rejected before any tool ran
                None => ensure(report.observed_class == Some(ErrorClass::UserAction), format!("{}: misclassified", report.name))?,
            }
        }
    }
    Ok(format!(
        "{} scenarios classified, {recovered} recoverable resolved unattended, {identical}/{} tool diagnostics byte-identical \
         (1 rejected before a tool ran), ladder ordered in every trace",
        corpus.len(),
        user_actions,
    ))
}

fn solution_cache() -> Check {
    let corpus = load_corpus().map_err(err)?;
    let scenario = corpus.iter().find(|s| s.name == "missing-settings").ok_or("no missing-settings scenario")?;
    let state = tempfile::tempdir().map_err(err)?;
    let cache = state.path().join("solutions.jsonl");
    let dir = tempfile::tempdir().map_err(err)?;
    let first = run_scenario(scenario, dir.path(), Some(&cache)).map_err(err)?;
    let second = run_scenario(scenario, dir.path(), Some(&cache)).map_err(err)?;
    ensure(first.recovered && second.recovered, "not recovered")?;
    ensure(second.ladder.first().map(|s| format!("{s:?}")) == Some("Cache".into()), format!("second run ladder {:?}", second.ladder))?;
    ensure(second.attempts < first.attempts, format!("attempts {} then {}", first.attempts, second.attempts))?;
    Ok(format!(
        "first resolved by {} in {} attempts, re-injected resolved by {} in {}",
        first.stage.unwrap_or_default(),
        first.attempts,
        second.stage.unwrap_or_default(),
        second.attempts
    ))
}

fn remote_fallback() -> Check {
    let scenario = FaultScenario {
        name: "settings-only-at-reference".into(),
        description: "local site lost its settings".into(),
        injections: vec![Injection::DeleteFile { path: format!("site/releases/{LATEST}/settings.txt") }],
        recipe: "run".into(),
        inputs: BTreeMap::new(),
        packages: Vec::new(),
        mode: ExpertMode::NonExpert,
        expected_class: ErrorClass::SystemBroken,
        recoverable: true,
        expected_stage: Some("fallback".into()),
    };
    let dir = tempfile::tempdir().map_err(err)?;
    let report = run_scenario(&scenario, dir.path(), None).map_err(err)?;
    ensure(report.passed(), report.summary())?;
    let reference = dir.path().join("reference");
    let provenance = report.provenance.clone().ok_or("no provenance recorded")?;
    ensure(provenance.starts_with(&reference), format!("provenance {}", provenance.display()))?;
    let traced = report.trace.iter().any(|e| matches!(e, startkit::recipes::TraceEntry::Recovery { provenance: Some(p), resolved: true, .. } if p.starts_with(&reference)));
    ensure(traced, "trace has no recovery from the reference site")?;
    ensure(report.executed_steps.iter().any(|s| s == "run-framework"), "framework never ran")?;
    Ok(format!("run completed, provenance {}", provenance.strip_prefix(dir.path()).unwrap_or(&provenance).display()))
}

fn uber_recipe() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = SandboxRoot::make(dir.path()).map_err(err)?;
    ensure(std::fs::read_dir(&root.work).map_err(err)?.next().is_none(), "work dir not empty")?;
    let mut kit = sandbox_kit(&root)?;
    let first = kit.run_options("SandboxOptions.txt").map_err(err)?;
    let output = root.work.join("sbx_output.txt");
    ensure(output.is_file() && first.artifacts.contains_key("sbx_output.txt"), "no framework output")?;
    let second = kit.run_options("SandboxOptions.txt").map_err(err)?;
    let (a, b) = (first.executed_steps().len(), second.executed_steps().len());
    kit.close();
    ensure(b < a, format!("steps {a} then {b}"))?;
    Ok(format!("sbx_output.txt produced, steps {a} then {b}"))
}

fn scaffold_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = SandboxRoot::make(dir.path()).map_err(err)?;
    let mut kit = sandbox_kit(&root)?;
    kit.new_package("MyAlg").map_err(err)?;
    let inputs = BTreeMap::from([("package".to_string(), "MyAlg".to_string())]);
    kit.invoke("build", &inputs).map_err(err)?;
    let source = root.work.join("MyAlg/src/MyAlg.alg");
    let mut text = std::fs::read_to_string(&source).map_err(err)?;
    text.push_str("# tuned by hand\n");
    std::fs::write(&source, text).map_err(err)?;
    let source_hash = common::sha_of(&source);

    let changes = kit.update_package("MyAlg", Some("sbx-1"), None).map_err(err)?;
    ensure(!changes.is_empty(), "update changed nothing")?;
    let paths: BTreeSet<&str> = changes.changes.iter().map(|c| c.path.as_str()).collect();
    ensure(paths == BTreeSet::from(["build.cfg"]), format!("changes outside build config: {paths:?}"))?;
    ensure(changes.changes.iter().all(|c| c.reason == ChangeReason::DependencyUpdate), "unexpected change reason")?;
    let again = kit.update_package("MyAlg", Some("sbx-1"), None).map_err(err)?;
    ensure(again.is_empty(), format!("repeat changed {:?}", again.changes))?;
    ensure(common::sha_of(&source) == source_hash, "user source touched")?;
    kit.close();
    Ok(format!("build passed, update touched {paths:?}, repeat empty, source hash unchanged"))
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let p = entry.unwrap().path();
        let target = to.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_tree(&p, &target);
        } else {
            std::fs::copy(&p, &target).unwrap();
        }
    }
}

fn script_fidelity() -> Check {
    let names: Vec<String> = startkit::recipes::RecipeRegistry::builtin().recipes().map(|r| r.name.clone()).collect();
    let mut compared = 0;
    for name in &names {
        let dir = tempfile::tempdir().map_err(err)?;
        let root = SandboxRoot::make(dir.path()).map_err(err)?;
        if name == "build" {
            let manifest = startkit::sandbox::standard_manifest(LATEST).map_err(err)?;
            startkit::scaffold::generate_package(&PackageSpec::new("HelloAlg", LATEST), &root.work, &manifest).map_err(err)?;
        }
        let pristine = dir.path().join("pristine");
        copy_tree(&root.work, &pristine);

        let mut kit = sandbox_kit(&root)?;
        let result = kit.invoke(name, &BTreeMap::new()).map_err(|e| format!("{name}: {e}"))?;
        let script = kit.script(name, &BTreeMap::new()).map_err(err)?;
        kit.close();
        let by_kit = common::tree_hashes(&root.work);
        ensure(!result.artifacts.is_empty(), format!("{name}: no artifacts"))?;

        std::fs::rename(&root.work, dir.path().join("by-kit")).map_err(err)?;
        std::fs::rename(&pristine, &root.work).map_err(err)?;
        let script_path = dir.path().join(format!("{name}.sh"));
        std::fs::write(&script_path, script).map_err(err)?;
        let status = std::process::Command::new("/usr/bin/env")
            .args(["-i", "PATH=/usr/bin:/bin", "/bin/sh"])
            .arg(&script_path)
            .arg(&root.work)
            .stdin(std::process::Stdio::null())
            .output()
            .map_err(err)?;
        ensure(status.status.success(), format!("{name}: script failed: {}", String::from_utf8_lossy(&status.stderr)))?;
        for (path, sha) in &result.artifacts {
            let p = root.work.join(path);
            ensure(p.is_file() && &common::sha_of(&p) == sha, format!("{name}: artifact {path} differs"))?;
        }
        ensure(common::tree_hashes(&root.work) == by_kit, format!("{name}: work trees differ"))?;
        compared += 1;
    }
    ensure(compared >= 4, format!("only {compared} recipes"))?;
    Ok(format!("{compared}/{} recipes reproduce their artifacts from a bare shell ({})", names.len(), names.join(", ")))
}

fn prompt_bridge() -> Check {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xb41d);
    let (mut false_fires, mut misses) = (0, 0);
    for _ in 0..200 {
        let (f, m) = common::fuzz_prompt_once(&mut rng);
        false_fires += f;
        misses += m;
    }
    ensure(false_fires == 0 && misses == 0, format!("{false_fires} false activations, {misses} misses"))?;
    Ok("200 fuzzed chunkings, 0 false activations, 0 misses".into())
}

fn cli_ui_parity() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = SandboxRoot::make(dir.path()).map_err(err)?;
    let mut interp = startkit::cli::Interpreter::with_kit(sandbox_kit(&root)?, Vec::new(), false);
    interp.execute_line("recipes()");
    ensure(interp.status() == 0, "recipes() failed")?;
    let cli: BTreeSet<String> = String::from_utf8_lossy(interp.output())
        .lines()
        .filter_map(|l| l.split_whitespace().next().map(str::to_string))
        .collect();
    interp.close();

    let mut config = KitConfig::new(&root.work);
    config.site = Some(root.site.clone());
    config.host_env = Some(scenario_host_env(&root, &EnvMap::new()));
    let handle = startkit::service::serve(startkit::service::ServiceConfig { kit: config, port: 0 }).map_err(err)?;
    let mut client = startkit::service::Client::connect(handle.local_addr()).map_err(err)?;
    client.set_read_timeout(Some(Duration::from_secs(10))).map_err(err)?;
    let reply = client.request(json!({"type": "catalog"})).map_err(err)?;
    handle.stop();
    let service: BTreeSet<String> = reply["recipes"]
        .as_array()
        .ok_or("catalog reply has no recipes")?
        .iter()
        .filter_map(|r| r["name"].as_str().map(str::to_string))
        .collect();
    ensure(!cli.is_empty() && cli == service, format!("cli {cli:?} vs service {service:?}"))?;
    Ok(format!("both list {{{}}}", cli.into_iter().collect::<Vec<_>>().join(", ")))
}

fn main() {
    let criteria: &[Criterion] = &[
        ("clean-room isolation", clean_room_isolation),
        ("sentinel soundness", sentinel_soundness),
        ("scrub idempotence and merge-missing", scrub_and_merge),
        ("recovery matrix", recovery_matrix),
        ("solution cache", solution_cache),
        ("remote fallback", remote_fallback),
        ("uber-recipe end-to-end", uber_recipe),
        ("scaffold round-trip", scaffold_round_trip),
        ("standalone script fidelity", script_fidelity),
        ("prompt bridge", prompt_bridge),
        ("cli/ui catalog parity", cli_ui_parity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
