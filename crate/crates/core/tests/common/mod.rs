#![allow(dead_code)]

pub mod fuzz;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use kubebench_core::k8s::{EndpointSource, K8sBackend, K8sOptions, KubeClient, RetryPolicy};
use kubebench_core::sched::{Clock, ScaledClock};
use kubebench_core::sim::{start_sim, Scenario, SimServer};
use serde_json::{json, Value};

/// Simulated seconds per real second in the lifecycle tests.
pub const SPEEDUP: f64 = 50.0;

pub struct Harness {
    pub sim: SimServer,
    pub clock: Arc<dyn Clock>,
    pub backend: Arc<K8sBackend>,
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(5) }
}

pub fn harness(scenario: &str) -> Harness {
    let scenario = Scenario::from_yaml_str(scenario).expect("scenario");
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(SPEEDUP));
    let sim = start_sim(scenario, clock.clone()).expect("simulator");
    let options = K8sOptions { retry: fast_retry(), ..K8sOptions::default() };
    let backend = Arc::new(K8sBackend::with_clock(EndpointSource::Fixed(sim.endpoint()), clock.clone(), options));
    Harness { sim, clock, backend }
}

pub fn client(sim: &SimServer) -> KubeClient {
    KubeClient::with_retry(sim.endpoint(), fast_retry()).unwrap()
}

pub fn pod(name: &str) -> Value {
    json!({
        "apiVersion": "v1",
        "kind": "Pod",
        "metadata": {"name": name},
        "spec": {"restartPolicy": "Never", "containers": [{"name": "main", "image": "busybox"}]},
    })
}

pub fn job(name: &str, completions: Option<u32>) -> Value {
    let mut spec = json!({
        "template": {
            "metadata": {"labels": {"app": name}},
            "spec": {"restartPolicy": "Never", "containers": [{"name": "main", "image": "busybox"}]},
        },
    });
    if let Some(c) = completions {
        spec["completions"] = json!(c);
    }
    json!({"apiVersion": "batch/v1", "kind": "Job", "metadata": {"name": name}, "spec": spec})
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_default()
}

pub const SIM_CONFIG: &str = "systems:\n  - name: eidf\n    partitions:\n      - {name: gpu-service, scheduler: k8s, launcher: k8s}\n";

pub fn sim_site() -> kubebench_core::SiteConfig {
    kubebench_core::SiteConfig::from_yaml_str(SIM_CONFIG, "sim-config", &kubebench_core::sched::BUILTIN_BACKENDS).unwrap()
}

pub fn registry(h: &Harness) -> kubebench_core::BackendRegistry {
    let mut reg = kubebench_core::BackendRegistry::new();
    reg.register(h.backend.clone()).unwrap();
    reg
}

/// Instantiates and runs a suite against the harness's simulator.
pub fn run(h: &Harness, suite: &str, root: &Path, concurrency: usize) -> Vec<kubebench_core::testkit::InstanceOutcome> {
    use kubebench_core::testkit::{instantiate, parse_suite, run_suite, RunOptions};
    let specs = parse_suite(suite, "suite").unwrap();
    let instances = instantiate(&specs, &sim_site(), &kubebench_core::config::SystemSelector::any()).unwrap();
    let mut options = RunOptions::new(root);
    options.concurrency = concurrency;
    run_suite(&instances, &registry(h), &options)
}
