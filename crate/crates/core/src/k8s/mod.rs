//! Kubernetes scheduler backend and the REST client it talks through.

pub mod backend;
pub mod client;
pub mod ident;
pub mod kubeconfig;
pub mod logs;
pub mod manifest;

pub use backend::{
    await_and_finalize, await_termination, finalize_workload, launch, resolve_namespace_context, EndpointSource,
    K8sBackend, K8sOptions, WorkloadRef, K8S_BACKEND,
};
pub use client::{ApiEndpoint, ClientError, KubeClient, LogChunk, LogCursor, PodRecord, RetryPolicy};
pub use ident::{generate_identifier, IdentifierPool, RunIdentifier};
pub use logs::{run_log_worker, LogStats, LogWorker, LogWorkerConfig};
pub use manifest::{detect_workload, inject_labels, ManifestError, WorkloadKind, WorkloadManifest};

/// Label key carrying the run identifier on every resource of a run.
pub const RUN_LABEL: &str = "rfm";
