//! The Kubernetes scheduler backend.
//!
//! Lifecycle of one run:
//!
//! 1. label every metadata block of the manifest with `rfm=<id>` and create
//!    the workload;
//! 2. start a log worker copying matching pods' output to `rfm_job.out`;
//! 3. wait until all pods finished, the time limit passed, or the run was
//!    cancelled;
//! 4. delete the workload on success or cancellation, keep it on failure or
//!    timeout.

use std::collections::HashMap;
use std::fs::File;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::client::{ApiEndpoint, ClientError, KubeClient, PodRecord, RetryPolicy};
use super::ident::IdentifierPool;
use super::kubeconfig::{Kubeconfig, KubeconfigError};
use super::logs::{run_log_worker, LogStats, LogWorker, LogWorkerConfig};
use super::manifest::{detect_workload, inject_labels, WorkloadKind, WorkloadManifest};
use super::{RunIdentifier, RUN_LABEL};
use crate::sched::{
    Capabilities, CancelToken, CleanupAction, CleanupDecision, CleanupReport, Clock, JobHandle, Placement, PodOutcome,
    PodPhase, SchedError, SchedulerBackend, SubmitRequest, SystemClock, TerminationEvent, TerminationKind,
    DEFAULT_POLL_INTERVAL,
};

pub const K8S_BACKEND: &str = "k8s";

/// Container waiting reasons that mean the pod will not make progress.
pub const CRASH_REASONS: [&str; 7] = [
    "CrashLoopBackOff",
    "ImagePullBackOff",
    "ErrImagePull",
    "InvalidImageName",
    "CreateContainerConfigError",
    "CreateContainerError",
    "RunContainerError",
];

/// Where the backend finds its API server.
#[derive(Debug, Clone)]
pub enum EndpointSource {
    /// Always use this endpoint; contexts are ignored.
    Fixed(ApiEndpoint),
    /// Resolve the context in the kubeconfig file named by this value of
    /// `KUBECONFIG`.
    Kubeconfig(Option<String>),
}

impl EndpointSource {
    pub fn from_env() -> Self {
        EndpointSource::Kubeconfig(std::env::var(super::kubeconfig::KUBECONFIG_ENV).ok())
    }
}

#[derive(Debug, Clone)]
pub struct K8sOptions {
    pub poll_interval: Duration,
    /// Polls a pod may spend crashed (phase `Unknown` or a waiting reason in
    /// [`CRASH_REASONS`]) before it counts as failed.
    pub crash_grace_polls: u32,
    /// Completed pods expected for kinds other than Pod and Job.
    pub other_kind_completions: u32,
    pub retry: RetryPolicy,
}

impl Default for K8sOptions {
    fn default() -> Self {
        Self { poll_interval: DEFAULT_POLL_INTERVAL, crash_grace_polls: 2, other_kind_completions: 1, retry: RetryPolicy::default() }
    }
}

/// A created workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadRef {
    pub kind: WorkloadKind,
    pub api_version: String,
    pub name: String,
    pub namespace: String,
    pub id: RunIdentifier,
}

impl WorkloadRef {
    pub fn selector(&self) -> String {
        self.id.selector()
    }
}

/// Namespace and context for a run. Settings are taken from the first layer
/// that has them (highest precedence first); the namespace then falls back to
/// `default_namespace` and the context to the current context of the
/// kubeconfig named by `kubeconfig_env`. With `need_context == false` the
/// context may stay unresolved.
pub fn resolve_namespace_context(
    layers: &[&Placement],
    default_namespace: &str,
    kubeconfig_env: Option<&str>,
    need_context: bool,
) -> Result<(String, Option<String>), KubeconfigError> {
    let namespace = layers
        .iter()
        .find_map(|l| l.namespace.clone())
        .unwrap_or_else(|| default_namespace.to_string());
    let context = match layers.iter().find_map(|l| l.context.clone()) {
        Some(c) => Some(c),
        None if need_context => {
            let (path, cfg) = Kubeconfig::from_env(kubeconfig_env)?;
            Some(cfg.current_context.ok_or(KubeconfigError::NoCurrentContext(path))?)
        }
        None => None,
    };
    Ok((namespace, context))
}

/// Creates the labeled workload, like `kubectl create -f`.
pub fn launch(client: &KubeClient, manifest: &WorkloadManifest, namespace: &str) -> Result<WorkloadRef, ClientError> {
    let id = manifest
        .document()
        .pointer("/metadata/labels")
        .and_then(|l| l.get(RUN_LABEL))
        .and_then(|v| v.as_str())
        .and_then(|v| v.parse::<RunIdentifier>().ok())
        .ok_or_else(|| ClientError::Decode(format!("manifest is missing the `{RUN_LABEL}` label")))?;
    let name = client.create_resource(manifest.api_version(), manifest.kind().as_str(), namespace, manifest.document())?;
    Ok(WorkloadRef {
        kind: manifest.kind().clone(),
        api_version: manifest.api_version().to_string(),
        name,
        namespace: namespace.to_string(),
        id,
    })
}

/// Tracks how long each pod has looked crashed.
#[derive(Debug, Default)]
pub struct CrashTracker {
    since: HashMap<String, Duration>,
}

impl CrashTracker {
    /// Effective phase of `pod` at `now`: a pod crashed for at least `grace`
    /// counts as `Failed`.
    pub fn classify(&mut self, pod: &PodRecord, now: Duration, grace: Duration) -> PodPhase {
        let crashed = !pod.phase.is_terminal()
            && (pod.phase == PodPhase::Unknown
                || pod.waiting_reason.as_deref().is_some_and(|r| CRASH_REASONS.contains(&r)));
        if !crashed {
            self.since.remove(&pod.name);
            return pod.phase;
        }
        let since = *self.since.entry(pod.name.clone()).or_insert(now);
        if now.saturating_sub(since) >= grace {
            PodPhase::Failed
        } else {
            pod.phase
        }
    }
}

/// Polls the workload's pods until one of the three terminal events. If
/// several hold in the same poll, `AllFinished` wins over `UserCancel`, which
/// wins over `TimeLimit`.
pub fn await_termination(
    client: &KubeClient,
    workload: &WorkloadRef,
    expected_completions: u32,
    time_limit: Option<Duration>,
    cancelled: &dyn Fn() -> bool,
    clock: &dyn Clock,
    options: &K8sOptions,
) -> Result<TerminationEvent, ClientError> {
    let start = clock.now();
    let grace = options.poll_interval * options.crash_grace_polls;
    let selector = workload.selector();
    let mut crashes = CrashTracker::default();
    loop {
        let pods = client.list_pods(&workload.namespace, &selector)?;
        let now = clock.now();
        let outcomes: Vec<PodOutcome> = pods
            .iter()
            .map(|p| PodOutcome { name: p.name.clone(), phase: crashes.classify(p, now, grace) })
            .collect();
        let succeeded = outcomes.iter().filter(|o| o.phase == PodPhase::Succeeded).count();
        let failed = outcomes.iter().filter(|o| o.phase == PodPhase::Failed).count();
        let all_terminal = !outcomes.is_empty() && outcomes.iter().all(|o| o.phase.is_terminal());
        let kind = if all_terminal && (failed > 0 || succeeded >= expected_completions as usize) {
            Some(TerminationKind::AllFinished)
        } else if cancelled() {
            Some(TerminationKind::UserCancel)
        } else if time_limit.is_some_and(|limit| now.saturating_sub(start) >= limit) {
            Some(TerminationKind::TimeLimit)
        } else {
            None
        };
        if let Some(kind) = kind {
            return Ok(TerminationEvent::new(kind, outcomes));
        }
        clock.sleep(options.poll_interval);
    }
}

/// Stops the log worker after one final pass. Every pod was terminal when
/// the event was decided, so that pass reads complete logs.
pub fn settle_log_worker(worker: LogWorker, event: &TerminationEvent) -> LogStats {
    let stats = worker.stop_and_join();
    log::debug!("{:?}: collected {} log lines from {} pods", event.kind, stats.lines, stats.pods.len());
    stats
}

/// Applies the cleanup policy. Deletion failures are reported in the result
/// and never change the decision.
pub fn finalize_workload(client: &KubeClient, workload: &WorkloadRef, event: &TerminationEvent) -> CleanupReport {
    let decision = CleanupDecision::for_event(event);
    let mut report = CleanupReport { decision, deleted: 0, error: None };
    if decision.action == CleanupAction::Retain {
        log::info!(
            "retaining {} {}/{} ({:?}); inspect with selector {}",
            workload.kind,
            workload.namespace,
            workload.name,
            decision.reason,
            workload.selector()
        );
        return report;
    }
    let selector = workload.selector();
    let mut errors = Vec::new();
    match client.delete_collection(&workload.namespace, &workload.api_version, workload.kind.as_str(), &selector) {
        Ok(n) => report.deleted += n,
        Err(e) => errors.push(e.to_string()),
    }
    if workload.kind != WorkloadKind::Pod {
        match client.delete_collection(&workload.namespace, "v1", "Pod", &selector) {
            Ok(n) => report.deleted += n,
            Err(e) => errors.push(e.to_string()),
        }
    }
    if !errors.is_empty() {
        log::warn!("cleanup of {} incomplete: {}", workload.selector(), errors.join("; "));
        report.error = Some(errors.join("; "));
    }
    report
}

/// Waits for the workload, settles the log worker and applies the cleanup
/// policy in one go.
#[allow(clippy::too_many_arguments)]
pub fn await_and_finalize(
    client: &KubeClient,
    workload: &WorkloadRef,
    expected_completions: u32,
    time_limit: Option<Duration>,
    cancel: &CancelToken,
    worker: LogWorker,
    clock: &dyn Clock,
    options: &K8sOptions,
) -> Result<(TerminationEvent, CleanupReport), ClientError> {
    let event = match await_termination(client, workload, expected_completions, time_limit, &|| cancel.is_raised(), clock, options) {
        Ok(ev) => ev,
        Err(e) => {
            worker.stop_and_join();
            return Err(e);
        }
    };
    settle_log_worker(worker, &event);
    let report = finalize_workload(client, workload, &event);
    Ok((event, report))
}

struct RunState {
    client: KubeClient,
    workload: WorkloadRef,
    expected: u32,
    worker: Option<LogWorker>,
    event: Option<TerminationEvent>,
}

pub struct K8sBackend {
    source: EndpointSource,
    clock: Arc<dyn Clock>,
    options: K8sOptions,
    ids: IdentifierPool,
    clients: Mutex<HashMap<Option<String>, KubeClient>>,
    runs: Mutex<HashMap<RunIdentifier, Arc<Mutex<RunState>>>>,
}

impl K8sBackend {
    pub fn new(source: EndpointSource) -> Self {
        Self::with_clock(source, Arc::new(SystemClock::new()), K8sOptions::default())
    }

    pub fn with_clock(source: EndpointSource, clock: Arc<dyn Clock>, options: K8sOptions) -> Self {
        Self {
            source,
            clock,
            options,
            ids: IdentifierPool::new(),
            clients: Mutex::new(HashMap::new()),
            runs: Mutex::new(HashMap::new()),
        }
    }

    pub fn options(&self) -> &K8sOptions {
        &self.options
    }

    /// The workload created for a live handle.
    pub fn workload(&self, handle: &JobHandle) -> Option<WorkloadRef> {
        let runs = self.runs.lock().unwrap();
        runs.get(&handle.run_id).map(|r| r.lock().unwrap().workload.clone())
    }

    fn target(&self, placement: &Placement) -> Result<(String, KubeClient), SchedError> {
        let infra = |e: KubeconfigError| SchedError::Infrastructure(e.to_string());
        let (namespace, context, endpoint) = match &self.source {
            EndpointSource::Fixed(ep) => {
                let (ns, _) = resolve_namespace_context(&[placement], &ep.namespace, None, false).map_err(infra)?;
                (ns, None, ep.clone())
            }
            EndpointSource::Kubeconfig(env) => {
                let (ns, ctx) = resolve_namespace_context(&[placement], "default", env.as_deref(), true).map_err(infra)?;
                let ctx = ctx.expect("context resolved");
                let (_, cfg) = Kubeconfig::from_env(env.as_deref()).map_err(infra)?;
                let ep = cfg.endpoint_for(&ctx).map_err(infra)?;
                (ns, Some(ctx), ep)
            }
        };
        let mut clients = self.clients.lock().unwrap();
        let client = match clients.get(&context) {
            Some(c) => c.clone(),
            None => {
                let c = KubeClient::with_retry(endpoint, self.options.retry)
                    .map_err(|e| SchedError::Infrastructure(e.to_string()))?;
                clients.insert(context, c.clone());
                c
            }
        };
        Ok((namespace, client))
    }

    fn run(&self, handle: &JobHandle) -> Result<Arc<Mutex<RunState>>, SchedError> {
        self.runs
            .lock()
            .unwrap()
            .get(&handle.run_id)
            .cloned()
            .ok_or_else(|| SchedError::InvalidHandle(handle.run_id.to_string()))
    }
}

fn submit_error(e: ClientError) -> SchedError {
    match e {
        ClientError::Connection(_) | ClientError::Api { status: 500.., .. } => SchedError::Infrastructure(e.to_string()),
        other => SchedError::Rejected(other.to_string()),
    }
}

impl SchedulerBackend for K8sBackend {
    fn name(&self) -> &str {
        K8S_BACKEND
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_containers: true, supports_completions: true }
    }

    fn submit(&self, request: SubmitRequest<'_>) -> Result<JobHandle, SchedError> {
        let manifest =
            WorkloadManifest::parse(request.manifest.clone()).map_err(|e| SchedError::Rejected(e.to_string()))?;
        let (_, expected) = detect_workload(&manifest, self.options.other_kind_completions)
            .map_err(|e| SchedError::Rejected(e.to_string()))?;
        let (namespace, client) = self.target(&request.placement)?;
        let id = self.ids.next();
        let labeled = inject_labels(&manifest, &id);
        let staged = request.stage_dir.join("k8s_workload.yaml");
        if let Err(e) = std::fs::write(&staged, serde_yaml::to_string(labeled.document()).unwrap_or_default()) {
            log::warn!("cannot stage {}: {e}", staged.display());
        }
        let sink = File::create(request.log_path)
            .map_err(|e| SchedError::Infrastructure(format!("{}: {e}", request.log_path.display())))?;
        let workload = launch(&client, &labeled, &namespace).map_err(submit_error)?;
        log::info!("{}: launched {} {}/{} with {}", request.instance_name, workload.kind, namespace, workload.name, id.selector());
        let worker = run_log_worker(
            client.clone(),
            LogWorkerConfig {
                namespace: namespace.clone(),
                id: id.clone(),
                expected_pods: expected,
                poll_interval: self.options.poll_interval,
            },
            Box::new(sink),
            self.clock.clone(),
        );
        let token = format!("{}/{}/{}", workload.kind, namespace, workload.name);
        let state = RunState { client, workload, expected, worker: Some(worker), event: None };
        self.runs.lock().unwrap().insert(id.clone(), Arc::new(Mutex::new(state)));
        Ok(JobHandle::new(K8S_BACKEND, id, token))
    }

    fn wait(
        &self,
        handle: &JobHandle,
        time_limit: Option<Duration>,
        cancel: &CancelToken,
    ) -> Result<TerminationEvent, SchedError> {
        let run = self.run(handle)?;
        let mut run = run.lock().unwrap();
        if let Some(event) = &run.event {
            return Ok(event.clone());
        }
        let cancelled = || cancel.is_raised() || handle.cancel_token().is_raised();
        let result = await_termination(
            &run.client,
            &run.workload,
            run.expected,
            time_limit,
            &cancelled,
            self.clock.as_ref(),
            &self.options,
        );
        let worker = run.worker.take();
        match result {
            Ok(event) => {
                if let Some(w) = worker {
                    settle_log_worker(w, &event);
                }
                run.event = Some(event.clone());
                Ok(event)
            }
            Err(e) => {
                if let Some(w) = worker {
                    w.stop_and_join();
                }
                Err(SchedError::Infrastructure(e.to_string()))
            }
        }
    }

    fn finalize(&self, handle: &JobHandle, event: &TerminationEvent) -> Result<CleanupReport, SchedError> {
        let run = self
            .runs
            .lock()
            .unwrap()
            .remove(&handle.run_id)
            .ok_or_else(|| SchedError::InvalidHandle(handle.run_id.to_string()))?;
        let mut run = run.lock().unwrap();
        if let Some(w) = run.worker.take() {
            w.stop_and_join();
        }
        Ok(finalize_workload(&run.client, &run.workload, event))
    }
}
