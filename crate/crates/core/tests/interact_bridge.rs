mod common;

use rand::SeedableRng;
use startkit::events::EventKind;
use startkit::interact::{BridgeState, InteractError};
use startkit::kit::{Kit, KitConfig, KitError};
use startkit::sandbox::{scenario_host_env, SandboxRoot};

#[test]
fn two_hundred_fuzzed_chunkings_fire_exactly_at_real_prompts() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(200);
    for run in 0..200 {
        assert_eq!(common::fuzz_prompt_once(&mut rng), (0, 0), "run {run}");
    }
}

fn sandbox_kit(dir: &std::path::Path, extra: &[(&str, &str)]) -> (SandboxRoot, Kit) {
    let root = SandboxRoot::make(dir).unwrap();
    let mut env = startkit::cleanroom::EnvMap::new();
    for (k, v) in extra {
        env.insert(k.to_string(), v.to_string());
    }
    let mut config = KitConfig::new(&root.work);
    config.site = Some(root.site.clone());
    config.mode = startkit::cleanroom::ExpertMode::Expert;
    config.host_env = Some(scenario_host_env(&root, &env));
    let kit = Kit::open(config).unwrap();
    (root, kit)
}

#[test]
fn framework_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("inputs.log");
    let (_root, mut kit) = sandbox_kit(dir.path(), &[("SBX_INPUT_LOG", log.to_str().unwrap())]);
    let mut bridge = kit.start_framework().unwrap();
    assert_eq!(bridge.state(), BridgeState::AtPrompt);
    assert!(bridge.banner().contains("release sbx-2"), "{}", bridge.banner());
    assert_eq!(bridge.send_line("2+3").unwrap(), "5");
    // prompt text in the middle of a line, and at line start followed by more output
    let decoy = bridge.send_line("decoy").unwrap();
    assert!(decoy.contains("ask> still output"), "{decoy:?}");
    assert_eq!(bridge.state(), BridgeState::AtPrompt);
    assert_eq!(bridge.send_line("7*6").unwrap(), "42");
    assert!(matches!(bridge.send_line("a\nb"), Err(InteractError::MultiLineInput)));
    assert_eq!(bridge.send_line("quit").unwrap(), "bye");
    assert_eq!(bridge.state(), BridgeState::Closed(0));
    assert!(matches!(bridge.send_line("1"), Err(InteractError::BridgeClosed(0))));
    assert_eq!(bridge.stop(), 0);
    assert_eq!(std::fs::read_to_string(&log).unwrap(), "2+3\ndecoy\n7*6\nquit\n");
    let prompts = kit.events().snapshot().iter().filter(|e| e.kind == EventKind::Prompt).count();
    assert_eq!(prompts, 4);
}

#[test]
fn stop_while_busy_kills_the_program() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, mut kit) = sandbox_kit(dir.path(), &[]);
    let mut bridge = kit.start_framework().unwrap();
    bridge.prompt_timeout = std::time::Duration::from_millis(300);
    assert!(matches!(bridge.send_line("sleep 30"), Err(InteractError::PromptTimeout(_))));
    assert_eq!(bridge.state(), BridgeState::Busy);
    assert!(matches!(bridge.send_line("1"), Err(InteractError::NotAtPrompt)));
    let code = bridge.stop();
    assert_ne!(code, 0);
    assert_eq!(bridge.stop(), code);
}

#[test]
fn stop_at_prompt_quits_politely() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, mut kit) = sandbox_kit(dir.path(), &[]);
    let mut bridge = kit.start_framework().unwrap();
    assert_eq!(bridge.stop(), 0);
}

#[test]
fn launch_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, mut kit) = sandbox_kit(dir.path(), &[]);
    let spec = startkit::interact::PromptSpec::new("^ask> ", startkit::interact::DEFAULT_QUIESCENCE).unwrap();
    let err = startkit::interact::start_interactive(kit.session(), "no-such-program-here", spec).unwrap_err();
    assert!(matches!(err, InteractError::LaunchFailed { .. }));
    let err = KitError::from(err);
    assert_eq!(err.exit_code(), 2);
}
