//! Runs the first container's `command`/`args` as a local subprocess.
//!
//! Images, resources and every other manifest field are ignored. Exit code 0
//! maps to `Succeeded`, anything else (or death by signal) to `Failed`.

use std::collections::HashMap;
use std::fs::File;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::{
    Capabilities, CancelToken, CleanupDecision, CleanupReport, Clock, JobHandle, PodOutcome, PodPhase, SchedError,
    SchedulerBackend, SubmitRequest, SystemClock, TerminationEvent, TerminationKind,
};
use crate::k8s::ident::IdentifierPool;
use crate::k8s::RunIdentifier;

pub const LOCAL_BACKEND: &str = "local";

pub struct LocalBackend {
    clock: Arc<dyn Clock>,
    poll_interval: Duration,
    ids: IdentifierPool,
    jobs: Mutex<HashMap<RunIdentifier, Arc<Mutex<LocalJob>>>>,
}

struct LocalJob {
    name: String,
    child: Child,
    event: Option<TerminationEvent>,
}

impl LocalBackend {
    pub fn new() -> Self {
        Self::with_clock(Arc::new(SystemClock::new()), Duration::from_millis(50))
    }

    pub fn with_clock(clock: Arc<dyn Clock>, poll_interval: Duration) -> Self {
        Self { clock, poll_interval, ids: IdentifierPool::new(), jobs: Mutex::new(HashMap::new()) }
    }

    fn job(&self, handle: &JobHandle) -> Result<Arc<Mutex<LocalJob>>, SchedError> {
        self.jobs
            .lock()
            .unwrap()
            .get(&handle.run_id)
            .cloned()
            .ok_or_else(|| SchedError::InvalidHandle(handle.run_id.to_string()))
    }
}

impl Default for LocalBackend {
    fn default() -> Self {
        Self::new()
    }
}

/// Program argv and environment of the first container.
pub type ContainerCommand = (Vec<String>, Vec<(String, String)>);

/// The command line of the first container: `command` followed by `args`.
pub fn container_command(manifest: &Value) -> Result<ContainerCommand, SchedError> {
    let kind = manifest
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| SchedError::Rejected("manifest has no `kind`".into()))?;
    let pod_spec = match kind {
        "Pod" => manifest.get("spec"),
        _ => manifest.pointer("/spec/template/spec"),
    }
    .ok_or_else(|| SchedError::Rejected(format!("no pod spec found in {kind} manifest")))?;
    let container = pod_spec
        .pointer("/containers/0")
        .ok_or_else(|| SchedError::Rejected("manifest has no containers".into()))?;
    let strings = |key: &str| -> Result<Vec<String>, SchedError> {
        match container.get(key) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    other => Err(SchedError::Rejected(format!("non-string entry in `{key}`: {other}"))),
                })
                .collect(),
            Some(other) => Err(SchedError::Rejected(format!("`{key}` must be a list, got {other}"))),
        }
    };
    let mut argv = strings("command")?;
    argv.extend(strings("args")?);
    if argv.is_empty() {
        return Err(SchedError::Rejected("first container has no command".into()));
    }
    let env = container
        .get("env")
        .and_then(Value::as_array)
        .map(|vars| {
            vars.iter()
                .filter_map(|v| {
                    let name = v.get("name")?.as_str()?;
                    let value = v.get("value").map(crate::document::scalar_text).unwrap_or_default();
                    Some((name.to_string(), value))
                })
                .collect()
        })
        .unwrap_or_default();
    Ok((argv, env))
}

impl SchedulerBackend for LocalBackend {
    fn name(&self) -> &str {
        LOCAL_BACKEND
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_containers: false, supports_completions: false }
    }

    fn submit(&self, request: SubmitRequest<'_>) -> Result<JobHandle, SchedError> {
        let (argv, env) = container_command(request.manifest)?;
        let out = File::create(request.log_path)
            .map_err(|e| SchedError::Infrastructure(format!("{}: {e}", request.log_path.display())))?;
        let err = out.try_clone().map_err(|e| SchedError::Infrastructure(e.to_string()))?;
        let child = Command::new(&argv[0])
            .args(&argv[1..])
            .envs(env)
            .current_dir(request.stage_dir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .spawn()
            .map_err(|e| SchedError::Rejected(format!("cannot start `{}`: {e}", argv[0])))?;
        let run_id = self.ids.next();
        let handle = JobHandle::new(LOCAL_BACKEND, run_id.clone(), child.id().to_string());
        let job = LocalJob { name: request.instance_name.to_string(), child, event: None };
        self.jobs.lock().unwrap().insert(run_id, Arc::new(Mutex::new(job)));
        Ok(handle)
    }

    fn wait(
        &self,
        handle: &JobHandle,
        time_limit: Option<Duration>,
        cancel: &CancelToken,
    ) -> Result<TerminationEvent, SchedError> {
        let job = self.job(handle)?;
        let mut job = job.lock().unwrap();
        if let Some(event) = &job.event {
            return Ok(event.clone());
        }
        let start = self.clock.now();
        let event = loop {
            let status = job.child.try_wait().map_err(|e| SchedError::Infrastructure(e.to_string()))?;
            let outcome = |phase| vec![PodOutcome { name: job.name.clone(), phase }];
            if let Some(status) = status {
                let phase = if status.success() { PodPhase::Succeeded } else { PodPhase::Failed };
                break TerminationEvent::new(TerminationKind::AllFinished, outcome(phase));
            }
            if cancel.is_raised() || handle.cancel_token().is_raised() {
                break TerminationEvent::new(TerminationKind::UserCancel, outcome(PodPhase::Running));
            }
            if time_limit.is_some_and(|limit| self.clock.now() - start >= limit) {
                break TerminationEvent::new(TerminationKind::TimeLimit, outcome(PodPhase::Running));
            }
            self.clock.sleep(self.poll_interval);
        };
        if event.kind != TerminationKind::AllFinished {
            let _ = job.child.kill();
            let _ = job.child.wait();
        }
        job.event = Some(event.clone());
        Ok(event)
    }

    fn finalize(&self, handle: &JobHandle, event: &TerminationEvent) -> Result<CleanupReport, SchedError> {
        let job = self
            .jobs
            .lock()
            .unwrap()
            .remove(&handle.run_id)
            .ok_or_else(|| SchedError::InvalidHandle(handle.run_id.to_string()))?;
        let mut job = job.lock().unwrap();
        if job.child.try_wait().ok().flatten().is_none() {
            let _ = job.child.kill();
            let _ = job.child.wait();
        }
        Ok(CleanupReport { decision: CleanupDecision::for_event(event), deleted: 0, error: None })
    }
}
