//! Benchmark and regression-test orchestration with pluggable scheduler
//! backends.
//!
//! Tests are declared in YAML suites, expanded over their parameters, and
//! driven through a fixed pipeline (setup, submit, wait, sanity, performance,
//! cleanup) against a [`sched::SchedulerBackend`]. Two backends ship:
//!
//! * [`k8s::K8sBackend`] labels every resource of a run with `rfm=<id>`,
//!   creates the workload through the Kubernetes REST API, streams pod logs
//!   from a dedicated thread into `rfm_job.out`, waits for one of three
//!   terminal events and then deletes or retains the resources.
//! * [`sched::local::LocalBackend`] runs `spec.containers[0].command/args` as
//!   a local subprocess.
//!
//! [`sim`] contains an in-process Kubernetes API server driven by scenario
//! files, so every backend behaviour can be exercised offline.

pub mod config;
pub mod document;
pub mod k8s;
pub mod perf;
pub mod sched;
pub mod sim;
pub mod testkit;

pub use config::{PartitionConfig, SiteConfig, SystemConfig};
pub use k8s::{K8sBackend, RunIdentifier};
pub use sched::{BackendRegistry, CancelToken, SchedulerBackend, TerminationEvent, TerminationKind};
pub use testkit::{TestInstance, TestResult, TestSpec, TestStatus};

/// Name of the per-instance output file holding the workload's logs.
pub const JOB_OUTPUT_FILE: &str = "rfm_job.out";
