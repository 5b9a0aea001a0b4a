mod common;

use std::sync::Arc;
use std::time::Duration;

use kubebench_core::k8s::{ClientError, KubeClient, LogCursor, RetryPolicy};
use kubebench_core::sched::{ManualClock, PodPhase};
use kubebench_core::sim::{start_sim, Scenario};
use serde_json::json;

use common::{client, job, pod};

fn manual(scenario: &str) -> (kubebench_core::sim::SimServer, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new());
    let sim = start_sim(Scenario::from_yaml_str(scenario).unwrap(), clock.clone()).unwrap();
    (sim, clock)
}

fn labeled(name: &str, id: &str) -> serde_json::Value {
    let mut p = pod(name);
    p["metadata"]["labels"] = json!({"rfm": id});
    p
}

#[test]
fn create_conflict_and_missing_namespace() {
    let (sim, _) = manual("namespaces: [default, team]");
    let c = client(&sim);
    assert_eq!(c.create_resource("v1", "Pod", "default", &pod("a")).unwrap(), "a");
    assert!(matches!(c.create_resource("v1", "Pod", "default", &pod("a")), Err(ClientError::Conflict(_))));
    assert_eq!(c.create_resource("v1", "Pod", "team", &pod("a")).unwrap(), "a");
    assert!(matches!(c.create_resource("v1", "Pod", "nope", &pod("b")), Err(ClientError::NotFound(_))));
    let mut nameless = pod("x");
    nameless["metadata"] = json!({});
    assert!(matches!(
        c.create_resource("v1", "Pod", "default", &nameless),
        Err(ClientError::Api { status: 422, .. })
    ));
}

#[test]
fn empty_scenario_lists_nothing() {
    let (sim, _) = manual("{}");
    assert!(client(&sim).list_pods("default", "rfm=abcdefgh").unwrap().is_empty());
    assert!(sim.snapshot().resources.is_empty());
}

#[test]
fn selectors_are_disjoint() {
    let (sim, _) = manual("{}");
    let c = client(&sim);
    for (name, id) in [("a1", "aaaaaaaa"), ("a2", "aaaaaaaa"), ("b1", "bbbbbbbb")] {
        c.create_resource("v1", "Pod", "default", &labeled(name, id)).unwrap();
    }
    let a: Vec<String> = c.list_pods("default", "rfm=aaaaaaaa").unwrap().into_iter().map(|p| p.name).collect();
    let b: Vec<String> = c.list_pods("default", "rfm=bbbbbbbb").unwrap().into_iter().map(|p| p.name).collect();
    assert_eq!(a, ["a1", "a2"]);
    assert_eq!(b, ["b1"]);
    assert!(c.list_pods("default", "rfm=cccccccc").unwrap().is_empty());
    assert!(matches!(c.list_pods("default", "rfm"), Err(ClientError::InvalidSelector(_))));
}

#[test]
fn pod_follows_scripted_timeline() {
    let (sim, clock) = manual(
        "pods:\n  'train-*':\n    timeline:\n      - {at: 1, phase: Running}\n      - {at: 2, log: L1}\n      - {at: 2, log: L2}\n      - {at: 3, log: L3}\n      - {at: 4, phase: Succeeded}\n",
    );
    let c = client(&sim);
    c.create_resource("v1", "Pod", "default", &labeled("train-0", "abcdefgh")).unwrap();
    let phase = |c: &KubeClient| c.list_pods("default", "rfm=abcdefgh").unwrap()[0].phase;
    assert_eq!(phase(&c), PodPhase::Pending);
    clock.set(Duration::from_millis(1500));
    assert_eq!(phase(&c), PodPhase::Running);
    clock.set(Duration::from_secs(2));
    let first = c.get_pod_logs("default", "train-0", LogCursor::default()).unwrap();
    assert_eq!(first.text, "L1\nL2\n");
    clock.set(Duration::from_secs(5));
    let rec = &c.list_pods("default", "rfm=abcdefgh").unwrap()[0];
    assert_eq!(rec.phase, PodPhase::Succeeded);
    assert_eq!(rec.exit_codes, [Some(0)]);
    let second = c.get_pod_logs("default", "train-0", first.cursor).unwrap();
    assert_eq!(second.text, "L3\n");
    assert!(second.cursor > first.cursor);
    let again = c.get_pod_logs("default", "train-0", second.cursor).unwrap();
    assert_eq!(again.text, "");
    assert_eq!(again.cursor, second.cursor);
    let all = c.get_pod_logs("default", "train-0", LogCursor::default()).unwrap();
    assert_eq!(all.text, "L1\nL2\nL3\n");
}

#[test]
fn unmatched_pods_succeed_immediately() {
    let (sim, _) = manual("{}");
    let c = client(&sim);
    c.create_resource("v1", "Pod", "default", &labeled("p", "abcdefgh")).unwrap();
    assert_eq!(c.list_pods("default", "rfm=abcdefgh").unwrap()[0].phase, PodPhase::Succeeded);
    assert_eq!(c.get_pod_logs("default", "p", LogCursor::default()).unwrap().text, "");
}

#[test]
fn failed_pod_reports_exit_code() {
    let (sim, clock) = manual("pods:\n  bad:\n    exit_code: 7\n    timeline: [{at: 0, phase: Running}, {at: 1, phase: Failed}]\n");
    let c = client(&sim);
    c.create_resource("v1", "Pod", "default", &labeled("bad", "abcdefgh")).unwrap();
    clock.advance(Duration::from_secs(1));
    let rec = &c.list_pods("default", "rfm=abcdefgh").unwrap()[0];
    assert_eq!(rec.phase, PodPhase::Failed);
    assert_eq!(rec.exit_codes, [Some(7)]);
}

#[test]
fn self_deleting_pod_surfaces_not_found() {
    let (sim, clock) = manual("pods:\n  gone:\n    hang: true\n    timeline: [{at: 0, phase: Running}, {at: 0.5, log: hi}, {at: 1, delete: true}]\n");
    let c = client(&sim);
    c.create_resource("v1", "Pod", "default", &labeled("gone", "abcdefgh")).unwrap();
    clock.set(Duration::from_millis(600));
    assert_eq!(c.get_pod_logs("default", "gone", LogCursor::default()).unwrap().text, "hi\n");
    clock.set(Duration::from_secs(1));
    assert!(matches!(c.get_pod_logs("default", "gone", LogCursor(3)), Err(ClientError::NotFound(_))));
    assert!(c.list_pods("default", "rfm=abcdefgh").unwrap().is_empty());
}

#[test]
fn delete_collection_is_idempotent() {
    let (sim, _) = manual("{}");
    let c = client(&sim);
    c.create_resource("v1", "Pod", "default", &labeled("a", "aaaaaaaa")).unwrap();
    c.create_resource("v1", "Pod", "default", &labeled("b", "bbbbbbbb")).unwrap();
    assert_eq!(c.delete_collection("default", "v1", "Pod", "rfm=aaaaaaaa").unwrap(), 1);
    assert_eq!(c.delete_collection("default", "v1", "Pod", "rfm=aaaaaaaa").unwrap(), 0);
    let snap = sim.snapshot();
    assert_eq!(snap.with_label("rfm", "aaaaaaaa").count(), 0);
    assert_eq!(snap.with_label("rfm", "bbbbbbbb").count(), 1);
}

#[test]
fn jobs_materialise_completion_pods() {
    let (sim, _) = manual("{}");
    let c = client(&sim);
    let mut j = job("train", Some(3));
    j["metadata"]["labels"] = json!({"rfm": "abcdefgh"});
    j["spec"]["template"]["metadata"]["labels"]["rfm"] = json!("abcdefgh");
    assert_eq!(c.create_resource("batch/v1", "Job", "default", &j).unwrap(), "train");
    let pods = c.list_pods("default", "rfm=abcdefgh").unwrap();
    let names: Vec<&str> = pods.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["train-0", "train-1", "train-2"]);
    assert!(pods.iter().all(|p| p.labels["job-name"] == "train" && p.labels["app"] == "train"));
    assert_eq!(c.delete_collection("default", "batch/v1", "Job", "rfm=abcdefgh").unwrap(), 1);
    assert!(sim.snapshot().resources.is_empty(), "job deletion cascades to its pods");

    let mut one = job("single", None);
    one["spec"]["template"]["metadata"]["labels"]["rfm"] = json!("bbbbbbbb");
    c.create_resource("batch/v1", "Job", "default", &one).unwrap();
    assert_eq!(c.list_pods("default", "rfm=bbbbbbbb").unwrap().len(), 1);
    assert!(matches!(
        c.create_resource("batch/v1", "Job", "default", &job("z", Some(0))),
        Err(ClientError::Api { status: 422, .. })
    ));
}

#[test]
fn injected_500_is_retried() {
    let (sim, _) = manual("faults: [{method: POST, nth: 1, status: 500}]");
    let c = client(&sim);
    assert_eq!(c.create_resource("v1", "Pod", "default", &pod("a")).unwrap(), "a");
    assert_eq!(sim.request_count(), 2);
    assert_eq!(sim.snapshot().pods().count(), 1);
}

#[test]
fn dropped_connection_is_retried() {
    let (sim, _) = manual("faults: [{method: GET, nth: 1, drop: true}]");
    let c = client(&sim);
    assert!(c.list_pods("default", "rfm=abcdefgh").unwrap().is_empty());
    assert_eq!(sim.request_count(), 2);
}

#[test]
fn retries_are_bounded() {
    let (sim, _) = manual(
        "faults:\n  - {nth: 1, status: 503}\n  - {nth: 2, status: 503}\n  - {nth: 3, status: 503}\n",
    );
    let endpoint = sim.endpoint();
    let c = KubeClient::with_retry(endpoint.clone(), RetryPolicy { max_retries: 2, base_delay: Duration::from_millis(1) }).unwrap();
    assert!(matches!(c.list_pods("default", "rfm=abcdefgh"), Err(ClientError::Api { status: 503, .. })));
    assert_eq!(sim.request_count(), 3);
    assert!(c.list_pods("default", "rfm=abcdefgh").is_ok());
}

#[test]
fn delayed_response_still_answers() {
    let (sim, _) = manual("faults: [{nth: 1, delay_ms: 50}]");
    assert!(client(&sim).list_pods("default", "rfm=abcdefgh").unwrap().is_empty());
    assert_eq!(sim.request_count(), 1);
}

#[test]
fn static_token_is_enforced() {
    let (sim, _) = manual("token: s3cret");
    let ok = client(&sim);
    assert!(ok.list_pods("default", "rfm=abcdefgh").is_ok());
    let mut ep = sim.endpoint();
    ep.token = Some("wrong".into());
    let bad = KubeClient::new(ep.clone()).unwrap();
    assert!(matches!(bad.list_pods("default", "rfm=abcdefgh"), Err(ClientError::Unauthorized(_))));
    ep.token = None;
    assert!(matches!(KubeClient::new(ep).unwrap().list_pods("default", "x=y"), Err(ClientError::Unauthorized(_))));
}

#[test]
fn two_clients_see_the_same_state() {
    let (sim, _) = manual("{}");
    let a = client(&sim);
    let b = client(&sim);
    a.create_resource("v1", "Pod", "default", &labeled("p", "abcdefgh")).unwrap();
    assert_eq!(b.list_pods("default", "rfm=abcdefgh").unwrap(), a.list_pods("default", "rfm=abcdefgh").unwrap());
}

#[test]
fn reset_forgets_resources_and_faults() {
    let (sim, _) = manual("faults: [{method: POST, nth: 1, status: 500}]");
    let c = KubeClient::with_retry(sim.endpoint(), RetryPolicy { max_retries: 0, base_delay: Duration::ZERO }).unwrap();
    assert!(c.create_resource("v1", "Pod", "default", &pod("a")).is_err());
    c.create_resource("v1", "Pod", "default", &pod("a")).unwrap();
    sim.reset();
    assert!(sim.snapshot().resources.is_empty());
    assert!(c.create_resource("v1", "Pod", "default", &pod("a")).is_err(), "fault re-armed");
}

#[test]
fn fixed_clock_gives_identical_runs() {
    let scenario = "pods:\n  'p*':\n    timeline: [{at: 1, phase: Running}, {at: 1, log: 'hello {pod}'}, {at: 2, phase: Succeeded}]\n";
    let run = || {
        let (sim, clock) = manual(scenario);
        let c = client(&sim);
        let mut trace = Vec::new();
        for i in 0..3 {
            c.create_resource("v1", "Pod", "default", &labeled(&format!("p{i}"), "abcdefgh")).unwrap();
        }
        for t in 0..4 {
            clock.set(Duration::from_secs(t));
            for p in c.list_pods("default", "rfm=abcdefgh").unwrap() {
                let log = c.get_pod_logs("default", &p.name, LogCursor::default()).unwrap().text;
                trace.push(format!("{t} {} {} {log:?}", p.name, p.phase));
            }
        }
        (trace, serde_json::to_string(&sim.snapshot()).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn ambiguous_script_rejected_at_create() {
    let (sim, _) = manual("pods:\n  'a-*': {timeline: [{at: 0, phase: Succeeded}]}\n  '*-b': {timeline: [{at: 0, phase: Failed}]}\n");
    let c = client(&sim);
    assert!(matches!(c.create_resource("v1", "Pod", "default", &pod("a-b")), Err(ClientError::Api { status: 422, .. })));
}
