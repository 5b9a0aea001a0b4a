//! The fixed per-instance pipeline and the concurrent suite runner.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

use super::{Binding, TestInstance};
use crate::k8s::RunIdentifier;
use crate::perf::{self, PerfRecord, PerfReportRow, SanityOutcome};
use crate::sched::{
    BackendRegistry, CancelToken, CleanupReport, PodOutcome, Placement, SchedError, SchedulerBackend, SubmitRequest,
    TerminationEvent, TerminationKind,
};

pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum TestStatus {
    Pass,
    SanityFail,
    PerfFail,
    RunFail,
    TimedOut,
    Cancelled,
}

impl TestStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TestStatus::Pass => "PASS",
            TestStatus::SanityFail => "SANITY FAIL",
            TestStatus::PerfFail => "PERF FAIL",
            TestStatus::RunFail => "RUN FAIL",
            TestStatus::TimedOut => "TIMED OUT",
            TestStatus::Cancelled => "CANCELLED",
        }
    }
}

impl std::fmt::Display for TestStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub instance: String,
    pub target: String,
    pub binding: Binding,
    pub status: TestStatus,
    pub sanity: Option<String>,
    pub perf_records: Vec<PerfRecord>,
    /// `None` when the workload was never started.
    pub termination: Option<TerminationEvent>,
    pub run_id: Option<RunIdentifier>,
    pub cleanup: Option<CleanupReport>,
    pub log_path: PathBuf,
    /// Why the workload never ran, if it did not.
    pub message: Option<String>,
}

#[derive(Debug, Clone, thiserror::Error, Serialize)]
pub enum PipelineError {
    #[error("{instance}: infrastructure failure: {message}")]
    Infrastructure { instance: String, message: String },
    #[error("{instance}: no scheduler backend named `{backend}`")]
    UnknownBackend { instance: String, backend: String },
}

impl PipelineError {
    pub fn instance(&self) -> &str {
        match self {
            PipelineError::Infrastructure { instance, .. } | PipelineError::UnknownBackend { instance, .. } => instance,
        }
    }
}

pub type InstanceOutcome = Result<TestResult, PipelineError>;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub output_root: PathBuf,
    pub concurrency: usize,
    /// Command-line namespace/context; below the test's, above the
    /// partition's.
    pub placement: Placement,
    /// Replaces every test's own time limit.
    pub time_limit: Option<Duration>,
    pub cancel: CancelToken,
}

impl RunOptions {
    pub fn new(output_root: impl Into<PathBuf>) -> Self {
        Self {
            output_root: output_root.into(),
            concurrency: DEFAULT_CONCURRENCY,
            placement: Placement::default(),
            time_limit: None,
            cancel: CancelToken::new(),
        }
    }
}

fn sched_message(e: SchedError) -> String {
    match e {
        SchedError::Infrastructure(m) => m,
        other => other.to_string(),
    }
}

fn read_log(path: &Path) -> String {
    std::fs::read(path).map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default()
}

/// Runs one instance: set up its directories, submit, wait, check sanity and
/// performance, then let the backend delete or retain the workload. Test
/// failures are reported in the result; only infrastructure trouble is an
/// error.
pub fn run_pipeline(
    instance: &TestInstance,
    backend: &dyn SchedulerBackend,
    options: &RunOptions,
) -> Result<TestResult, PipelineError> {
    let infra = |message: String| PipelineError::Infrastructure { instance: instance.to_string(), message };
    let out_dir = instance.output_dir(&options.output_root);
    let stage_dir = instance.stage_dir(&options.output_root);
    let log_path = instance.log_path(&options.output_root);
    std::fs::create_dir_all(&stage_dir).map_err(|e| infra(format!("{}: {e}", stage_dir.display())))?;
    let mut result = TestResult {
        instance: instance.name.clone(),
        target: instance.target(),
        binding: instance.binding.clone(),
        status: TestStatus::Cancelled,
        sanity: None,
        perf_records: Vec::new(),
        termination: None,
        run_id: None,
        cleanup: None,
        log_path: log_path.clone(),
        message: None,
    };
    if options.cancel.is_raised() {
        result.message = Some("cancelled before submission".into());
        return Ok(result);
    }

    let request = SubmitRequest {
        instance_name: &instance.name,
        manifest: &instance.manifest,
        placement: instance.placement(&options.placement),
        stage_dir: &stage_dir,
        log_path: &log_path,
    };
    let handle = match backend.submit(request) {
        Ok(h) => h,
        Err(SchedError::Rejected(msg)) => {
            std::fs::write(&log_path, "").map_err(|e| infra(format!("{}: {e}", out_dir.display())))?;
            result.status = TestStatus::RunFail;
            result.message = Some(format!("workload rejected: {msg}"));
            return Ok(result);
        }
        Err(e) => return Err(infra(sched_message(e))),
    };
    result.run_id = Some(handle.run_id.clone());

    let time_limit = options.time_limit.or_else(|| instance.spec.time_limit());
    let event = match backend.wait(&handle, time_limit, &options.cancel) {
        Ok(ev) => ev,
        Err(e) => {
            // The workload is left in place; a timeout event selects retention.
            let _ = backend.finalize(&handle, &TerminationEvent::new(TerminationKind::TimeLimit, Vec::<PodOutcome>::new()));
            return Err(infra(sched_message(e)));
        }
    };

    let log = read_log(&log_path);
    let sanity = perf::compile_sanity(&instance.spec.sanity_patterns)
        .map(|p| perf::check_sanity(&log, &p))
        .unwrap_or_else(|e| SanityOutcome::Fail(e.to_string()));
    result.perf_records = perf::extract_perf(&log, &instance.spec.perf_variables);
    if let SanityOutcome::Fail(p) = &sanity {
        result.sanity = Some(p.clone());
    }
    result.status = match event.kind {
        TerminationKind::UserCancel => TestStatus::Cancelled,
        TerminationKind::TimeLimit => TestStatus::TimedOut,
        TerminationKind::AllFinished if !event.all_succeeded() => TestStatus::RunFail,
        TerminationKind::AllFinished if !sanity.passed() => TestStatus::SanityFail,
        TerminationKind::AllFinished if !result.perf_records.iter().all(|r| r.pass) => TestStatus::PerfFail,
        TerminationKind::AllFinished => TestStatus::Pass,
    };
    result.termination = Some(event.clone());

    match backend.finalize(&handle, &event) {
        Ok(report) => {
            if let Some(err) = &report.error {
                log::warn!("{instance}: cleanup incomplete: {err}");
            }
            result.cleanup = Some(report);
        }
        Err(e) => log::warn!("{instance}: finalize failed: {e}"),
    }
    Ok(result)
}

/// Runs the instances on up to `options.concurrency` worker threads. Results
/// come back sorted by instance name and target, whatever the completion
/// order.
pub fn run_suite(instances: &[TestInstance], registry: &BackendRegistry, options: &RunOptions) -> Vec<InstanceOutcome> {
    let next = AtomicUsize::new(0);
    let sink: Mutex<Vec<(usize, InstanceOutcome)>> = Mutex::new(Vec::with_capacity(instances.len()));
    let workers = options.concurrency.max(1).min(instances.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(instance) = instances.get(i) else { break };
                let outcome = match registry.get(&instance.partition.scheduler) {
                    Some(backend) => run_pipeline(instance, backend.as_ref(), options),
                    None => Err(PipelineError::UnknownBackend {
                        instance: instance.to_string(),
                        backend: instance.partition.scheduler.clone(),
                    }),
                };
                match &outcome {
                    Ok(r) => log::info!("{instance}: {}", r.status),
                    Err(e) => log::debug!("{e}"),
                }
                sink.lock().unwrap().push((i, outcome));
            });
        }
    });
    let mut collected = sink.into_inner().unwrap();
    collected.sort_by_key(|(i, _)| {
        let inst = &instances[*i];
        (inst.name.clone(), inst.target())
    });
    collected.into_iter().map(|(_, o)| o).collect()
}

/// Perf report lines for every record of every completed instance.
pub fn perf_report_rows(outcomes: &[InstanceOutcome]) -> Vec<PerfReportRow> {
    outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .flat_map(|r| {
            let label = format!("{}@{}", r.instance, r.target);
            r.perf_records.iter().map(move |p| PerfReportRow::new(&label, p))
        })
        .collect()
}
