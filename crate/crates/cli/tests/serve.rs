//! The settings-driven launcher behind the HTTP service.

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use femagent_cli::SettingsLauncher;
use femagent_store::{AppState, BackgroundServer, Store};
use serde_json::{json, Value};

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn start(dir: &Path) -> BackgroundServer {
    let state = AppState::new(Store::open(dir.join("store")).unwrap())
        .with_launcher(Arc::new(SettingsLauncher::new(dir)))
        .with_gate_wait(Duration::from_secs(10));
    BackgroundServer::start("127.0.0.1:0".parse::<SocketAddr>().unwrap(), state).unwrap()
}

fn save_config(dir: &Path, name: &str, replies: &[&str], extra: &str) {
    let script: Vec<Value> = replies.iter().map(|r| json!({ "reply": r })).collect();
    std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string(&script).unwrap()).unwrap();
    let text = format!(
        "[endpoints.scripted]\nscript = \"{name}.json\"\n\n[sandbox]\nworkspace_root = \"{}\"\nwall_timeout = 30\n\n[duo]\nendpoint = \"scripted\"\n\n{extra}",
        dir.join("runs").display()
    );
    Store::open(dir.join("store")).unwrap().save_config(name, &text).unwrap();
}

fn launch(server: &BackgroundServer, body: Value) -> Value {
    let mut r = agent().post(&server.url("/runs")).send_json(&body).unwrap();
    assert_eq!(r.status().as_u16(), 201);
    r.body_mut().read_json().unwrap()
}

/// Follows the session stream until the service closes it.
fn events(server: &BackgroundServer, sid: &str) -> Vec<Value> {
    let r = agent().get(&server.url(&format!("/sessions/{sid}/events?cursor=0"))).call().unwrap();
    BufReader::new(r.into_body().into_reader()).lines().map(|l| serde_json::from_str(&l.unwrap()).unwrap()).collect()
}

fn wait_for(server: &BackgroundServer, run_id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let mut r = agent().get(&server.url(&format!("/runs/{run_id}"))).call().unwrap();
        let body: Value = r.body_mut().read_json().unwrap();
        if body["status"] != "running" {
            return body;
        }
        assert!(Instant::now() < deadline, "run never finished: {body}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn duo_run_streams_its_session() {
    let dir = tempfile::tempdir().unwrap();
    save_config(dir.path(), "duo", &["```python\nraise SystemExit(2)\n```", "```python\nprint('fine')\n```"], "");
    std::fs::write(dir.path().join("heat.md"), "Solve the heat equation.").unwrap();
    let server = start(dir.path());

    let run = launch(&server, json!({"config": "duo", "kind": "duo", "problem": "heat.md"}));
    let run_id = run["run_id"].as_str().unwrap();
    let evs = events(&server, run_id);
    let senders: Vec<&str> = evs.iter().filter_map(|e| e["payload"]["message"]["sender"].as_str()).collect();
    assert_eq!(senders, ["user", "fenics_coder", "executor", "fenics_coder", "executor"], "{evs:?}");
    assert_eq!(evs.last().unwrap()["payload"]["status"], "succeeded");
    assert_eq!(wait_for(&server, run_id)["status"], "succeeded");
}

#[test]
fn bench_run_stores_a_report_and_failures_close_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let registry = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../registry");
    let bench = format!("[bench]\nregistry = \"{}\"\nstrategy = \"duo\"\nparallelism = 1\n", registry.display());
    save_config(dir.path(), "bench", &["```python\nprint(1)\n```"], &bench);
    let server = start(dir.path());

    let run = launch(&server, json!({"config": "bench", "kind": "bench", "problem": "fm_q3"}));
    let run_id = run["run_id"].as_str().unwrap();
    assert_eq!(wait_for(&server, run_id)["status"], "succeeded");
    let mut r = agent().get(&server.url(&format!("/reports/{run_id}"))).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let report: Value = r.body_mut().read_json().unwrap();
    assert_eq!(report["overall"]["total"], 39);
    assert_eq!(report["ungraded"].as_array().unwrap().len(), 1);

    // a problem file that does not exist fails the run and still ends its stream
    let run = launch(&server, json!({"config": "bench", "kind": "duo", "problem": "missing.md"}));
    let run_id = run["run_id"].as_str().unwrap();
    let evs = events(&server, run_id);
    assert_eq!(evs.last().unwrap()["payload"]["status"], "failed");
    assert_eq!(wait_for(&server, run_id)["status"], "failed");
}
