//! Simulated cluster contents. Pod status is a pure function of the pod's
//! script and the time since it was created, so a fixed clock yields fixed
//! answers.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::scenario::{PodScript, Scenario};
use crate::sched::PodPhase;

#[derive(Debug, Clone)]
pub(crate) struct SimPod {
    pub object: Value,
    pub created_at: Duration,
    pub script: PodScript,
    pub owner_job: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PodView {
    pub phase: PodPhase,
    pub log: String,
    pub waiting: Option<String>,
    pub deleted: bool,
}

impl SimPod {
    fn name(&self) -> &str {
        self.object["metadata"]["name"].as_str().unwrap_or_default()
    }

    pub fn view(&self, now: Duration) -> PodView {
        let elapsed = now.saturating_sub(self.created_at);
        let mut view = PodView { phase: PodPhase::Pending, log: String::new(), waiting: None, deleted: false };
        for ev in self.script.timeline.iter().take_while(|ev| ev.offset() <= elapsed) {
            if let Some(p) = ev.phase {
                view.phase = p;
            }
            if let Some(line) = &ev.log {
                view.log.push_str(&line.replace("{pod}", self.name()));
                view.log.push('\n');
            }
            if let Some(reason) = &ev.waiting {
                view.waiting = Some(reason.clone());
            }
            view.deleted |= ev.delete;
        }
        if view.phase.is_terminal() {
            view.waiting = None;
        }
        view
    }

    pub fn to_json(&self, now: Duration) -> Value {
        let view = self.view(now);
        let mut obj = self.object.clone();
        let containers: Vec<String> = obj
            .pointer("/spec/containers")
            .and_then(Value::as_array)
            .map(|cs| {
                cs.iter()
                    .enumerate()
                    .map(|(i, c)| c.get("name").and_then(Value::as_str).map_or_else(|| format!("c{i}"), str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        let state = match (view.phase, &view.waiting) {
            (PodPhase::Succeeded, _) => json!({"terminated": {"exitCode": 0, "reason": "Completed"}}),
            (PodPhase::Failed, _) => json!({"terminated": {"exitCode": self.script.exit_code, "reason": "Error"}}),
            (_, Some(reason)) => json!({"waiting": {"reason": reason}}),
            (PodPhase::Running, None) => json!({"running": {}}),
            _ => json!({"waiting": {"reason": "ContainerCreating"}}),
        };
        let statuses: Vec<Value> = containers
            .iter()
            .map(|name| json!({"name": name, "ready": view.phase == PodPhase::Running, "restartCount": 0, "state": state}))
            .collect();
        obj["status"] = json!({"phase": view.phase.as_str(), "containerStatuses": statuses});
        obj
    }
}

/// One live resource as seen by [`super::SimServer::snapshot`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResourceSnapshot {
    pub kind: String,
    pub namespace: String,
    pub name: String,
    pub labels: BTreeMap<String, String>,
    pub phase: Option<PodPhase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterSnapshot {
    pub time: Duration,
    pub resources: Vec<ResourceSnapshot>,
}

impl ClusterSnapshot {
    pub fn with_label<'a>(&'a self, key: &'a str, value: &'a str) -> impl Iterator<Item = &'a ResourceSnapshot> + 'a {
        self.resources.iter().filter(move |r| r.labels.get(key).is_some_and(|v| v == value))
    }

    pub fn pods(&self) -> impl Iterator<Item = &ResourceSnapshot> {
        self.resources.iter().filter(|r| r.kind == "Pod")
    }
}

pub(crate) type Key = (String, String);

#[derive(Debug)]
pub(crate) struct ClusterState {
    pub scenario: Scenario,
    pub pods: BTreeMap<Key, SimPod>,
    /// Non-pod objects by (collection path, name).
    pub objects: BTreeMap<Key, (String, Value)>,
    pub uid_counter: u64,
    pub resource_version: u64,
    pub request_counts: BTreeMap<usize, u64>,
    pub fired_faults: Vec<bool>,
    pub requests: u64,
}

impl ClusterState {
    pub fn new(scenario: Scenario) -> Self {
        let fired_faults = vec![false; scenario.faults.len()];
        Self {
            scenario,
            pods: BTreeMap::new(),
            objects: BTreeMap::new(),
            uid_counter: 0,
            resource_version: 0,
            request_counts: BTreeMap::new(),
            fired_faults,
            requests: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = ClusterState::new(self.scenario.clone());
    }

    pub fn next_uid(&mut self) -> String {
        self.uid_counter += 1;
        format!("00000000-0000-0000-0000-{:012}", self.uid_counter)
    }

    /// Removes pods whose script deleted them.
    pub fn purge(&mut self, now: Duration) {
        self.pods.retain(|_, p| !p.view(now).deleted);
    }

    pub fn snapshot(&mut self, now: Duration) -> ClusterSnapshot {
        self.purge(now);
        let mut resources: Vec<ResourceSnapshot> = self
            .pods
            .iter()
            .map(|((ns, name), pod)| ResourceSnapshot {
                kind: "Pod".into(),
                namespace: ns.clone(),
                name: name.clone(),
                labels: labels_of(&pod.object),
                phase: Some(pod.view(now).phase),
            })
            .collect();
        resources.extend(self.objects.iter().map(|((_, name), (ns, obj))| ResourceSnapshot {
            kind: obj["kind"].as_str().unwrap_or_default().to_string(),
            namespace: ns.clone(),
            name: name.clone(),
            labels: labels_of(obj),
            phase: None,
        }));
        resources.sort_by(|a, b| (&a.kind, &a.namespace, &a.name).cmp(&(&b.kind, &b.namespace, &b.name)));
        ClusterSnapshot { time: now, resources }
    }
}

pub(crate) fn labels_of(obj: &Value) -> BTreeMap<String, String> {
    obj.pointer("/metadata/labels")
        .and_then(Value::as_object)
        .map(|m| m.iter().filter_map(|(k, v)| Some((k.clone(), v.as_str()?.to_string()))).collect())
        .unwrap_or_default()
}

/// Equality-based selector `k=v[,k=v...]`.
pub(crate) fn selector_matches(selector: Option<&str>, labels: &BTreeMap<String, String>) -> bool {
    let Some(selector) = selector.filter(|s| !s.is_empty()) else {
        return true;
    };
    selector.split(',').all(|term| match term.split_once('=') {
        Some((k, v)) => labels.get(k.trim()).is_some_and(|l| l == v.trim()),
        None => false,
    })
}

pub(crate) fn ensure_labels(obj: &mut Value) -> &mut Map<String, Value> {
    let meta = obj
        .as_object_mut()
        .expect("object")
        .entry("metadata")
        .or_insert_with(|| Value::Object(Map::new()));
    if !meta.is_object() {
        *meta = Value::Object(Map::new());
    }
    let labels = meta.as_object_mut().unwrap().entry("labels").or_insert_with(|| Value::Object(Map::new()));
    if !labels.is_object() {
        *labels = Value::Object(Map::new());
    }
    labels.as_object_mut().unwrap()
}
