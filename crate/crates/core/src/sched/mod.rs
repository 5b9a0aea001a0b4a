//! The scheduler backend contract shared by every execution system.

pub mod clock;
pub mod local;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use clock::{Clock, ManualClock, ScaledClock, SystemClock};

use crate::k8s::RunIdentifier;

/// Scheduler names a partition may reference.
pub const BUILTIN_BACKENDS: [&str; 2] = ["k8s", "local"];

/// Default interval between state polls while waiting.
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub supports_containers: bool,
    pub supports_completions: bool,
}

/// Pod phase, or its equivalent for backends without pods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PodPhase {
    Pending,
    Running,
    Succeeded,
    Failed,
    Unknown,
}

impl PodPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, PodPhase::Succeeded | PodPhase::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PodPhase::Pending => "Pending",
            PodPhase::Running => "Running",
            PodPhase::Succeeded => "Succeeded",
            PodPhase::Failed => "Failed",
            PodPhase::Unknown => "Unknown",
        }
    }
}

impl std::str::FromStr for PodPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Pending" => PodPhase::Pending,
            "Running" => PodPhase::Running,
            "Succeeded" => PodPhase::Succeeded,
            "Failed" => PodPhase::Failed,
            "Unknown" => PodPhase::Unknown,
            other => return Err(format!("unknown pod phase `{other}`")),
        })
    }
}

impl fmt::Display for PodPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationKind {
    AllFinished,
    TimeLimit,
    UserCancel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodOutcome {
    pub name: String,
    pub phase: PodPhase,
}

/// The event that ended a wait, with the pod phases observed at that moment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationEvent {
    pub kind: TerminationKind,
    pub pod_outcomes: Vec<PodOutcome>,
}

impl TerminationEvent {
    pub fn new(kind: TerminationKind, pod_outcomes: Vec<PodOutcome>) -> Self {
        debug_assert!(
            kind != TerminationKind::AllFinished || pod_outcomes.iter().all(|p| p.phase.is_terminal()),
            "AllFinished with non-terminal pods"
        );
        Self { kind, pod_outcomes }
    }

    /// True for `AllFinished` with at least one pod and no failures.
    pub fn all_succeeded(&self) -> bool {
        self.kind == TerminationKind::AllFinished
            && !self.pod_outcomes.is_empty()
            && self.pod_outcomes.iter().all(|p| p.phase == PodPhase::Succeeded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CleanupAction {
    Delete,
    Retain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CleanupReason {
    Success,
    Failure,
    Cancelled,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupDecision {
    pub action: CleanupAction,
    pub reason: CleanupReason,
}

impl CleanupDecision {
    /// Success and cancellation delete the workload; failures and timeouts
    /// keep it for inspection.
    pub fn for_event(event: &TerminationEvent) -> CleanupDecision {
        let reason = match event.kind {
            TerminationKind::AllFinished if event.all_succeeded() => CleanupReason::Success,
            TerminationKind::AllFinished => CleanupReason::Failure,
            TerminationKind::UserCancel => CleanupReason::Cancelled,
            TerminationKind::TimeLimit => CleanupReason::TimedOut,
        };
        let action = match reason {
            CleanupReason::Success | CleanupReason::Cancelled => CleanupAction::Delete,
            CleanupReason::Failure | CleanupReason::TimedOut => CleanupAction::Retain,
        };
        CleanupDecision { action, reason }
    }
}

/// Result of the cleanup stage. A failed deletion is reported in `error`
/// without changing the decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub decision: CleanupDecision,
    pub deleted: usize,
    pub error: Option<String>,
}

/// Cooperative cancellation flag, cheap to clone and share.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_raised(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Namespace and context requested for a run, already layered from test,
/// command line and partition settings. Backends fill in their own defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Placement {
    pub namespace: Option<String>,
    pub context: Option<String>,
}

pub struct SubmitRequest<'a> {
    pub instance_name: &'a str,
    pub manifest: &'a Value,
    pub placement: Placement,
    pub stage_dir: &'a Path,
    /// Where the workload's output is collected (`rfm_job.out`).
    pub log_path: &'a Path,
}

#[derive(Debug, Clone)]
pub struct JobHandle {
    pub backend: String,
    pub run_id: RunIdentifier,
    pub token: String,
    cancel: CancelToken,
}

impl JobHandle {
    pub fn new(backend: impl Into<String>, run_id: RunIdentifier, token: impl Into<String>) -> Self {
        Self { backend: backend.into(), run_id, token: token.into(), cancel: CancelToken::new() }
    }

    pub fn cancel_token(&self) -> &CancelToken {
        &self.cancel
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchedError {
    /// The backend refused the workload; a test failure, not an outage.
    #[error("workload rejected: {0}")]
    Rejected(String),
    #[error("infrastructure failure: {0}")]
    Infrastructure(String),
    #[error("unknown or finalized job handle `{0}`")]
    InvalidHandle(String),
}

/// An execution system the pipeline can hand workloads to.
///
/// One instance is shared by all concurrent pipeline workers; calls for
/// distinct handles may run concurrently.
pub trait SchedulerBackend: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Starts the workload and returns without waiting for it.
    fn submit(&self, request: SubmitRequest<'_>) -> Result<JobHandle, SchedError>;

    /// Blocks until every pod finished, `time_limit` elapsed, or either
    /// `cancel` or the handle's own token was raised. When several hold in
    /// the same poll, `AllFinished` beats `UserCancel` beats `TimeLimit`.
    /// Output collection has stopped by the time this returns, and repeated
    /// calls return the same event.
    fn wait(
        &self,
        handle: &JobHandle,
        time_limit: Option<Duration>,
        cancel: &CancelToken,
    ) -> Result<TerminationEvent, SchedError>;

    /// Requests cancellation of a running workload. Idempotent, and a no-op
    /// once the wait has ended.
    fn cancel(&self, handle: &JobHandle) {
        handle.cancel_token().raise();
    }

    /// Deletes or retains the workload according to the event and
    /// invalidates the handle.
    fn finalize(&self, handle: &JobHandle, event: &TerminationEvent) -> Result<CleanupReport, SchedError>;
}

#[derive(Debug, thiserror::Error)]
#[error("backend `{0}` is already registered")]
pub struct DuplicateBackend(pub String);

#[derive(Default, Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn SchedulerBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, backend: Arc<dyn SchedulerBackend>) -> Result<(), DuplicateBackend> {
        let name = backend.name().to_string();
        if self.backends.contains_key(&name) {
            return Err(DuplicateBackend(name));
        }
        self.backends.insert(name, backend);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn SchedulerBackend>> {
        self.backends.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}
