//! In-process mock Kubernetes API server.
//!
//! Serves exactly the REST subset [`crate::k8s::KubeClient`] uses, on a
//! loopback port, with pod lifecycles scripted by a [`Scenario`]. Time comes
//! from a shared [`Clock`], so tests can run timelines faster than real time
//! or pin them completely with a [`crate::sched::ManualClock`].
//!
//! Jobs are modelled by creating `completions` pods named `<job>-<k>` at
//! creation time; there is no retry controller.

pub mod scenario;
mod state;

use std::io::Write;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

pub use scenario::{FaultInjection, PodScript, Scenario, ScenarioError, TimelineEvent};
pub use state::{ClusterSnapshot, ResourceSnapshot};

use crate::k8s::ApiEndpoint;
use crate::sched::Clock;
use state::{ensure_labels, labels_of, selector_matches, ClusterState, SimPod};

const WORKER_THREADS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cannot bind simulator port: {0}")]
    Bind(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// A running simulator. Stops serving when dropped.
pub struct SimServer {
    addr: SocketAddr,
    token: Option<String>,
    state: Arc<Mutex<ClusterState>>,
    clock: Arc<dyn Clock>,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

/// Starts a simulator on an ephemeral loopback port.
pub fn start_sim(scenario: Scenario, clock: Arc<dyn Clock>) -> Result<SimServer, SimError> {
    start_sim_at(scenario, clock, "127.0.0.1:0")
}

/// Starts a simulator listening on `addr`.
pub fn start_sim_at(scenario: Scenario, clock: Arc<dyn Clock>, addr: &str) -> Result<SimServer, SimError> {
    scenario.validate()?;
    let server = Arc::new(Server::http(addr).map_err(|e| SimError::Bind(format!("{addr}: {e}")))?);
    let addr = server.server_addr().to_ip().ok_or_else(|| SimError::Bind("not an IP listener".into()))?;
    let token = scenario.token.clone();
    let state = Arc::new(Mutex::new(ClusterState::new(scenario)));
    let workers = (0..WORKER_THREADS)
        .map(|i| {
            let server = server.clone();
            let state = state.clone();
            let clock = clock.clone();
            std::thread::Builder::new()
                .name(format!("k8s-sim-{i}"))
                .spawn(move || {
                    while let Ok(req) = server.recv() {
                        serve(req, &state, clock.as_ref());
                    }
                })
                .expect("spawn simulator worker")
        })
        .collect();
    log::debug!("simulated API server listening on {addr}");
    Ok(SimServer { addr, token, state, clock, server, workers })
}

impl SimServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn endpoint(&self) -> ApiEndpoint {
        let mut ep = ApiEndpoint::new(&self.url()).expect("loopback URL is valid").insecure();
        ep.token = self.token.clone();
        ep
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// All live resources with labels and phases at the current clock time.
    pub fn snapshot(&self) -> ClusterSnapshot {
        let now = self.clock.now();
        self.state.lock().unwrap().snapshot(now)
    }

    /// Forgets every resource and fault counter; the scenario stays.
    pub fn reset(&self) {
        self.state.lock().unwrap().reset();
    }

    /// Requests received so far, including those answered by a fault.
    pub fn request_count(&self) -> u64 {
        self.state.lock().unwrap().requests
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

enum Reply {
    Json(u16, Value),
    Text(u16, String),
}

fn status(code: u16, reason: &str, message: impl Into<String>) -> Reply {
    Reply::Json(
        code,
        json!({"kind": "Status", "apiVersion": "v1", "metadata": {}, "status": "Failure",
               "message": message.into(), "reason": reason, "code": code}),
    )
}

enum FaultAction {
    Status(u16),
    Delay(Duration),
    Drop,
}

fn serve(mut req: Request, state: &Mutex<ClusterState>, clock: &dyn Clock) {
    let method = req.method().as_str().to_string();
    let (path, query) = match req.url().split_once('?') {
        Some((p, q)) => (p.to_string(), q.to_string()),
        None => (req.url().to_string(), String::new()),
    };
    let fault = {
        let mut st = state.lock().unwrap();
        st.requests += 1;
        next_fault(&mut st, &method, &path)
    };
    match fault {
        Some(FaultAction::Drop) => {
            let mut w = req.into_writer();
            let _ = w.write_all(b"\x00garbage\r\n\r\n");
            let _ = w.flush();
            return;
        }
        Some(FaultAction::Delay(d)) => std::thread::sleep(d),
        Some(FaultAction::Status(code)) => {
            return respond(req, status(code, "InternalError", format!("injected fault ({code})")));
        }
        None => {}
    }
    let authorized = {
        let st = state.lock().unwrap();
        match &st.scenario.token {
            None => true,
            Some(t) => req
                .headers()
                .iter()
                .any(|h| h.field.equiv("Authorization") && h.value.as_str() == format!("Bearer {t}")),
        }
    };
    if !authorized {
        return respond(req, status(401, "Unauthorized", "Unauthorized"));
    }
    let mut body = String::new();
    if req.as_reader().read_to_string(&mut body).is_err() {
        return respond(req, status(400, "BadRequest", "unreadable body"));
    }
    let selector: Option<String> = url::form_urlencoded::parse(query.as_bytes())
        .find(|(k, _)| k == "labelSelector")
        .map(|(_, v)| v.into_owned());
    let reply = {
        let mut st = state.lock().unwrap();
        let now = clock.now();
        st.purge(now);
        route(&mut st, now, req.method(), &path, selector.as_deref(), &body)
    };
    respond(req, reply);
}

fn next_fault(st: &mut ClusterState, method: &str, path: &str) -> Option<FaultAction> {
    let mut action = None;
    for (i, f) in st.scenario.faults.iter().enumerate() {
        let applies = f.method.as_deref().is_none_or(|m| m.eq_ignore_ascii_case(method))
            && f.path.as_deref().is_none_or(|p| path.contains(p));
        if !applies || st.fired_faults[i] {
            continue;
        }
        let count = st.request_counts.entry(i).or_insert(0);
        *count += 1;
        if *count == f.nth && action.is_none() {
            st.fired_faults[i] = true;
            action = Some(if let Some(code) = f.status {
                FaultAction::Status(code)
            } else if let Some(ms) = f.delay_ms {
                FaultAction::Delay(Duration::from_millis(ms))
            } else {
                FaultAction::Drop
            });
        }
    }
    action
}

fn respond(req: Request, reply: Reply) {
    let (code, body, content_type) = match reply {
        Reply::Json(code, v) => (code, v.to_string(), "application/json"),
        Reply::Text(code, s) => (code, s, "text/plain"),
    };
    let header = Header::from_bytes("Content-Type", content_type).expect("static header");
    let _ = req.respond(Response::from_string(body).with_status_code(code).with_header(header));
}

fn route(st: &mut ClusterState, now: Duration, method: &Method, path: &str, selector: Option<&str>, body: &str) -> Reply {
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    match (method, segs.as_slice()) {
        (Method::Post, ["api", "v1", "namespaces", ns, "pods"]) => with_namespace(st, ns, |st| create_pod(st, now, ns, body)),
        (Method::Get, ["api", "v1", "namespaces", ns, "pods"]) => with_namespace(st, ns, |st| list_pods(st, now, ns, selector)),
        (Method::Delete, ["api", "v1", "namespaces", ns, "pods"]) => {
            with_namespace(st, ns, |st| delete_pods(st, now, ns, selector, |_| true))
        }
        (Method::Get, ["api", "v1", "namespaces", ns, "pods", name]) => match st.pods.get(&key(ns, name)) {
            Some(p) => Reply::Json(200, p.to_json(now)),
            None => pod_not_found(name),
        },
        (Method::Delete, ["api", "v1", "namespaces", ns, "pods", name]) => match st.pods.remove(&key(ns, name)) {
            Some(p) => Reply::Json(200, p.to_json(now)),
            None => pod_not_found(name),
        },
        (Method::Get, ["api", "v1", "namespaces", ns, "pods", name, "log"]) => match st.pods.get(&key(ns, name)) {
            Some(p) => Reply::Text(200, p.view(now).log),
            None => pod_not_found(name),
        },
        (Method::Post, ["apis", "batch", "v1", "namespaces", ns, "jobs"]) => {
            with_namespace(st, ns, |st| create_job(st, now, ns, path, body))
        }
        (Method::Post, ["api", "v1", "namespaces", ns, _]) | (Method::Post, ["apis", _, _, "namespaces", ns, _]) => {
            with_namespace(st, ns, |st| create_object(st, ns, path, body))
        }
        (Method::Get, ["api", "v1", "namespaces", ns, _]) | (Method::Get, ["apis", _, _, "namespaces", ns, _]) => {
            with_namespace(st, ns, |st| list_objects(st, now, path, selector))
        }
        (Method::Delete, ["api", "v1", "namespaces", ns, _]) | (Method::Delete, ["apis", _, _, "namespaces", ns, _]) => {
            with_namespace(st, ns, |st| delete_objects(st, now, ns, path, selector))
        }
        _ => status(404, "NotFound", format!("the server could not find the requested resource ({method} {path})")),
    }
}

fn key(ns: &str, name: &str) -> (String, String) {
    (ns.to_string(), name.to_string())
}

fn pod_not_found(name: &str) -> Reply {
    status(404, "NotFound", format!("pods \"{name}\" not found"))
}

fn with_namespace(st: &mut ClusterState, ns: &str, f: impl FnOnce(&mut ClusterState) -> Reply) -> Reply {
    if st.scenario.namespaces.iter().any(|n| n == ns) {
        f(st)
    } else {
        status(404, "NotFound", format!("namespaces \"{ns}\" not found"))
    }
}

fn parse_object(body: &str, kind: &str) -> Result<(Value, String), Reply> {
    let obj: Value = serde_json::from_str(body).map_err(|e| status(400, "BadRequest", format!("invalid JSON body: {e}")))?;
    if !obj.is_object() {
        return Err(status(400, "BadRequest", "body must be an object"));
    }
    if let Some(k) = obj.get("kind").and_then(Value::as_str) {
        if k != kind {
            return Err(status(400, "BadRequest", format!("expected kind {kind}, got {k}")));
        }
    }
    let name = obj
        .pointer("/metadata/name")
        .and_then(Value::as_str)
        .filter(|n| !n.is_empty())
        .ok_or_else(|| status(422, "Invalid", format!("{kind}: metadata.name: Required value")))?
        .to_string();
    Ok((obj, name))
}

fn stamp(st: &mut ClusterState, obj: &mut Value, ns: &str) {
    let uid = st.next_uid();
    st.resource_version += 1;
    let meta = obj["metadata"].as_object_mut().expect("metadata checked");
    meta.insert("namespace".into(), json!(ns));
    meta.insert("uid".into(), json!(uid));
    meta.insert("resourceVersion".into(), json!(st.resource_version.to_string()));
}

fn new_pod(st: &mut ClusterState, now: Duration, ns: &str, mut obj: Value, owner_job: Option<String>) -> Result<SimPod, Reply> {
    let name = obj["metadata"]["name"].as_str().unwrap_or_default().to_string();
    let script = match st.scenario.script_for(&name) {
        Ok(Some((_, s))) => s.clone(),
        Ok(None) => PodScript::instant_success(),
        Err(msg) => return Err(status(422, "Invalid", msg)),
    };
    obj["apiVersion"] = json!("v1");
    obj["kind"] = json!("Pod");
    stamp(st, &mut obj, ns);
    Ok(SimPod { object: obj, created_at: now, script, owner_job })
}

fn create_pod(st: &mut ClusterState, now: Duration, ns: &str, body: &str) -> Reply {
    let (obj, name) = match parse_object(body, "Pod") {
        Ok(v) => v,
        Err(r) => return r,
    };
    if st.pods.contains_key(&key(ns, &name)) {
        return status(409, "AlreadyExists", format!("pods \"{name}\" already exists"));
    }
    match new_pod(st, now, ns, obj, None) {
        Ok(pod) => {
            let out = pod.to_json(now);
            st.pods.insert(key(ns, &name), pod);
            Reply::Json(201, out)
        }
        Err(r) => r,
    }
}

fn create_job(st: &mut ClusterState, now: Duration, ns: &str, path: &str, body: &str) -> Reply {
    let (mut obj, name) = match parse_object(body, "Job") {
        Ok(v) => v,
        Err(r) => return r,
    };
    if st.objects.contains_key(&key(path, &name)) {
        return status(409, "AlreadyExists", format!("jobs.batch \"{name}\" already exists"));
    }
    let completions = match obj.pointer("/spec/completions") {
        None | Some(Value::Null) => 1,
        Some(v) => match v.as_u64().filter(|&n| n >= 1) {
            Some(n) => n,
            None => return status(422, "Invalid", format!("spec.completions: invalid value {v}")),
        },
    };
    let template = obj.pointer("/spec/template").cloned().unwrap_or_else(|| json!({}));
    let mut pods = Vec::new();
    for k in 0..completions {
        let pod_name = format!("{name}-{k}");
        if st.pods.contains_key(&key(ns, &pod_name)) {
            return status(409, "AlreadyExists", format!("pods \"{pod_name}\" already exists"));
        }
        let mut pod = json!({
            "metadata": template.get("metadata").cloned().unwrap_or_else(|| json!({})),
            "spec": template.get("spec").cloned().unwrap_or_else(|| json!({})),
        });
        if !pod["metadata"].is_object() {
            pod["metadata"] = json!({});
        }
        pod["metadata"]["name"] = json!(pod_name);
        pod["metadata"]["ownerReferences"] = json!([{"apiVersion": "batch/v1", "kind": "Job", "name": name}]);
        ensure_labels(&mut pod).insert("job-name".into(), json!(name));
        match new_pod(st, now, ns, pod, Some(name.clone())) {
            Ok(p) => pods.push((pod_name, p)),
            Err(r) => return r,
        }
    }
    stamp(st, &mut obj, ns);
    for (pod_name, p) in pods {
        st.pods.insert(key(ns, &pod_name), p);
    }
    let out = job_json(st, now, ns, &obj);
    st.objects.insert(key(path, &name), (ns.to_string(), obj));
    Reply::Json(201, out)
}

fn job_json(st: &ClusterState, now: Duration, ns: &str, obj: &Value) -> Value {
    let name = obj["metadata"]["name"].as_str().unwrap_or_default();
    let (mut active, mut succeeded, mut failed) = (0, 0, 0);
    for ((pns, _), pod) in &st.pods {
        if pns == ns && pod.owner_job.as_deref() == Some(name) {
            match pod.view(now).phase {
                crate::sched::PodPhase::Succeeded => succeeded += 1,
                crate::sched::PodPhase::Failed => failed += 1,
                _ => active += 1,
            }
        }
    }
    let mut out = obj.clone();
    out["status"] = json!({"active": active, "succeeded": succeeded, "failed": failed});
    out
}

fn create_object(st: &mut ClusterState, ns: &str, path: &str, body: &str) -> Reply {
    let obj: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return status(400, "BadRequest", format!("invalid JSON body: {e}")),
    };
    let kind = obj.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    let (mut obj, name) = match parse_object(body, &kind) {
        Ok(v) => v,
        Err(r) => return r,
    };
    if st.objects.contains_key(&key(path, &name)) {
        return status(409, "AlreadyExists", format!("{kind} \"{name}\" already exists"));
    }
    stamp(st, &mut obj, ns);
    st.objects.insert(key(path, &name), (ns.to_string(), obj.clone()));
    Reply::Json(201, obj)
}

fn list_kind(items: &[Value], fallback: &str) -> String {
    items
        .first()
        .and_then(|i| i.get("kind"))
        .and_then(Value::as_str)
        .map_or_else(|| fallback.to_string(), |k| format!("{k}List"))
}

fn list_pods(st: &ClusterState, now: Duration, ns: &str, selector: Option<&str>) -> Reply {
    let items: Vec<Value> = st
        .pods
        .iter()
        .filter(|((pns, _), p)| pns == ns && selector_matches(selector, &labels_of(&p.object)))
        .map(|(_, p)| p.to_json(now))
        .collect();
    Reply::Json(
        200,
        json!({"apiVersion": "v1", "kind": "PodList", "metadata": {"resourceVersion": st.resource_version.to_string()}, "items": items}),
    )
}

fn delete_pods(
    st: &mut ClusterState,
    now: Duration,
    ns: &str,
    selector: Option<&str>,
    extra: impl Fn(&SimPod) -> bool,
) -> Reply {
    let doomed: Vec<_> = st
        .pods
        .iter()
        .filter(|((pns, _), p)| pns == ns && selector_matches(selector, &labels_of(&p.object)) && extra(p))
        .map(|(k, _)| k.clone())
        .collect();
    let items: Vec<Value> = doomed.iter().filter_map(|k| st.pods.remove(k)).map(|p| p.to_json(now)).collect();
    st.resource_version += 1;
    Reply::Json(200, json!({"apiVersion": "v1", "kind": "PodList", "metadata": {}, "items": items}))
}

fn list_objects(st: &ClusterState, now: Duration, path: &str, selector: Option<&str>) -> Reply {
    let items: Vec<Value> = st
        .objects
        .iter()
        .filter(|((p, _), (_, obj))| p == path && selector_matches(selector, &labels_of(obj)))
        .map(|(_, (ns, obj))| if obj["kind"] == "Job" { job_json(st, now, ns, obj) } else { obj.clone() })
        .collect();
    let kind = list_kind(&items, "List");
    Reply::Json(200, json!({"kind": kind, "metadata": {}, "items": items}))
}

fn delete_objects(st: &mut ClusterState, now: Duration, ns: &str, path: &str, selector: Option<&str>) -> Reply {
    let doomed: Vec<_> = st
        .objects
        .iter()
        .filter(|((p, _), (_, obj))| p == path && selector_matches(selector, &labels_of(obj)))
        .map(|(k, _)| k.clone())
        .collect();
    let mut items = Vec::new();
    for k in doomed {
        if let Some((_, obj)) = st.objects.remove(&k) {
            if obj["kind"] == "Job" {
                let job = k.1.clone();
                let owned: Vec<_> = st
                    .pods
                    .iter()
                    .filter(|((pns, _), p)| pns == ns && p.owner_job.as_deref() == Some(job.as_str()))
                    .map(|(pk, _)| pk.clone())
                    .collect();
                for pk in owned {
                    st.pods.remove(&pk);
                }
            }
            items.push(obj);
        }
    }
    st.resource_version += 1;
    let _ = now;
    let kind = list_kind(&items, "List");
    Reply::Json(200, json!({"kind": kind, "metadata": {}, "items": items}))
}
