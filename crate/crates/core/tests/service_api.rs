use std::time::Duration;

use serde_json::{json, Value};
use startkit::cleanroom::EnvMap;
use startkit::kit::KitConfig;
use startkit::sandbox::{scenario_host_env, SandboxRoot};
use startkit::service::{serve, workdir_summary, Client, ServiceConfig, ServiceError, ServiceHandle};

fn start(dir: &std::path::Path) -> (SandboxRoot, ServiceHandle, Client) {
    let root = SandboxRoot::make(dir).unwrap();
    let mut kit = KitConfig::new(&root.work);
    kit.site = Some(root.site.clone());
    kit.host_env = Some(scenario_host_env(&root, &EnvMap::new()));
    let handle = serve(ServiceConfig { kit, port: 0 }).unwrap();
    let client = connect(&handle);
    (root, handle, client)
}

fn connect(handle: &ServiceHandle) -> Client {
    let client = Client::connect(handle.local_addr()).unwrap();
    client.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    client
}

#[test]
fn binds_loopback_only() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, handle, _client) = start(dir.path());
    assert!(handle.local_addr().ip().is_loopback());
}

#[test]
fn every_reply_carries_schema_and_id() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, _handle, mut client) = start(dir.path());
    let reply = client.request(json!({"type": "catalog", "id": 7})).unwrap();
    assert_eq!(reply["schema_version"], 1);
    assert_eq!(reply["id"], 7);
    assert_eq!(reply["ok"], true);

    client.send(json!({"type": "catalog", "schema_version": 99})).unwrap();
    assert_eq!(client.receive().unwrap()["code"], "unsupported_schema");
    let reply = client.request(json!({"type": "no_such_type"})).unwrap();
    assert_eq!(reply["code"], "bad_request");
}

#[test]
fn invoke_reports_steps_and_unknown_recipes() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, _handle, mut client) = start(dir.path());
    let reply = client.request(json!({"type": "invoke", "recipe": "setup"})).unwrap();
    assert_eq!(reply["type"], "invoke_result", "{reply}");
    assert!(reply["executed_steps"].as_array().unwrap().iter().any(|s| s == "setup-runtime"));
    assert!(std::path::Path::new(reply["trace_file"].as_str().unwrap()).is_file());
    assert!(reply["first_seq"].as_u64().unwrap() <= reply["last_seq"].as_u64().unwrap());

    let reply = client.request(json!({"type": "invoke", "recipe": "nope"})).unwrap();
    assert_eq!(reply["code"], "not_found");
    let reply = client.request(json!({"type": "invoke", "recipe": "run", "inputs": {"options": "Missing.txt"}})).unwrap();
    assert_eq!(reply["code"], "user_error");
    assert_eq!(reply["class"], "user_action");
}

#[test]
fn workdir_summary_suggests_a_screen() {
    let dir = tempfile::tempdir().unwrap();
    let (root, _handle, mut client) = start(dir.path());
    let s = workdir_summary(&root.work).unwrap();
    assert_eq!((s.package_count, s.suggested_screen.as_str()), (0, "create"));
    let manifest = startkit::sandbox::standard_manifest("sbx-2").unwrap();
    startkit::scaffold::generate_package(&startkit::scaffold::PackageSpec::new("HelloAlg", "sbx-2"), &root.work, &manifest).unwrap();
    let reply = client.request(json!({"type": "workdir_summary", "dir": root.work})).unwrap();
    assert_eq!(reply["package_count"], 1);
    assert_eq!(reply["suggested_screen"], "work");
    let reply = client.request(json!({"type": "packages", "dir": root.work})).unwrap();
    assert_eq!(reply["packages"], json!(["HelloAlg"]));

    assert!(matches!(workdir_summary(&root.work.join("absent")), Err(ServiceError::BadDir(_))));
    let reply = client.request(json!({"type": "workdir_summary", "dir": root.work.join("absent")})).unwrap();
    assert_eq!(reply["code"], "bad_dir");
}

#[test]
fn event_stream_matches_the_persisted_log() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, handle, mut client) = start(dir.path());
    let mut events = connect(&handle);
    events.send(json!({"type": "subscribe", "after": 0})).unwrap();
    assert_eq!(events.receive().unwrap()["type"], "subscribed");

    let reply = client.request(json!({"type": "invoke", "recipe": "run"})).unwrap();
    assert_eq!(reply["ok"], true, "{reply}");
    let last = reply["last_seq"].as_u64().unwrap();
    assert!(last >= 10);

    let mut streamed: Vec<Value> = Vec::new();
    while streamed.last().map_or(0, |e| e["seq"].as_u64().unwrap()) < last {
        let msg = events.receive().unwrap();
        assert_eq!(msg["type"], "event");
        streamed.push(msg["event"].clone());
    }
    let seqs: Vec<u64> = streamed.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=last).collect::<Vec<_>>(), "no gaps, no duplicates");

    let session = client.request(json!({"type": "session"})).unwrap();
    let log = std::fs::read_to_string(session["event_log"].as_str().unwrap()).unwrap();
    let persisted: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).take(streamed.len()).collect();
    assert_eq!(persisted, streamed);
}

#[test]
fn framework_through_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let (_root, _handle, mut client) = start(dir.path());
    let reply = client.request(json!({"type": "input", "line": "1+1"})).unwrap();
    assert_eq!(reply["code"], "not_at_prompt");
    let reply = client.request(json!({"type": "start_framework"})).unwrap();
    assert_eq!(reply["state"], "at_prompt", "{reply}");
    let reply = client.request(json!({"type": "input", "line": "1+1"})).unwrap();
    assert_eq!(reply["output"], "2");
    let reply = client.request(json!({"type": "stop_framework"})).unwrap();
    assert_eq!(reply["exit_code"], 0);
}
