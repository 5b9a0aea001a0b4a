//! Test declarations and their expansion into runnable instances.
//!
//! A suite file is a YAML list of tests:
//!
//! ```yaml
//! - name: ResNet50Test
//!   valid_systems: ["eidf:gpu-service"]
//!   valid_prog_environs: ["*"]
//!   k8s_config: resnet50_pod.yml        # path, relative to the suite file
//!   params:
//!     num_gpus: [4, 8]
//!   mutations:
//!     - path: spec.containers[0].args
//!       value: ["--nproc_per_node={num_gpus}", "train.py"]
//!     - path: spec.containers[0].resources.limits."nvidia.com/gpu"
//!       value: "{num_gpus}"
//!   time_limit: 3600
//!   sanity_patterns: ["Epoch 1 complete"]
//!   perf_variables:
//!     - {name: throughput, pattern: 'throughput: (\S+)', unit: inputs/s,
//!        reference: 226.2, tolerance: 0.05, direction: higher_is_better}
//! ```
//!
//! `k8s_config` may also hold the manifest inline as a mapping.

mod pipeline;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

pub use pipeline::{
    perf_report_rows, run_pipeline, run_suite, InstanceOutcome, PipelineError, RunOptions, TestResult, TestStatus,
};

use crate::config::{PartitionConfig, SiteConfig, SystemSelector};
use crate::document::{apply_mutations, scalar_text, ManifestMutation, PathError};
use crate::perf::PerfVariable;
use crate::sched::Placement;

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("test `{test}`: {message}")]
    Invalid { test: String, message: String },
    #[error("instance `{instance}`: {source}")]
    Mutation { instance: String, source: PathError },
}

/// Where a test's workload manifest comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifestSource {
    Path(PathBuf),
    Inline(Value),
}

impl ManifestSource {
    pub fn load(&self) -> Result<Value, SuiteError> {
        match self {
            ManifestSource::Inline(v) => Ok(v.clone()),
            ManifestSource::Path(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| SuiteError::Io { path: p.display().to_string(), source })?;
                serde_yaml::from_str(&text)
                    .map_err(|e| SuiteError::Parse { origin: p.display().to_string(), message: e.to_string() })
            }
        }
    }
}

impl<'de> Deserialize<'de> for ManifestSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) => Ok(ManifestSource::Path(PathBuf::from(s))),
            v @ Value::Object(_) => Ok(ManifestSource::Inline(v)),
            other => Err(serde::de::Error::custom(format!(
                "k8s_config must be a path or a manifest mapping, got {other}"
            ))),
        }
    }
}

impl Serialize for ManifestSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ManifestSource::Path(p) => p.serialize(s),
            ManifestSource::Inline(v) => v.serialize(s),
        }
    }
}

fn any_selector() -> Vec<String> {
    vec!["*".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub name: String,
    #[serde(default = "any_selector")]
    pub valid_systems: Vec<String>,
    #[serde(default = "any_selector")]
    pub valid_prog_environs: Vec<String>,
    #[serde(rename = "k8s_config")]
    pub workload: ManifestSource,
    #[serde(default)]
    pub params: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    pub mutations: Vec<ManifestMutation>,
    /// Seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<f64>,
    #[serde(default)]
    pub sanity_patterns: Vec<String>,
    #[serde(default)]
    pub perf_variables: Vec<PerfVariable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl TestSpec {
    pub fn validate(&self) -> Result<(), SuiteError> {
        let invalid = |message: String| SuiteError::Invalid { test: self.name.clone(), message };
        if self.name.trim().is_empty() {
            return Err(invalid("name must not be empty".into()));
        }
        for sel in &self.valid_systems {
            sel.parse::<SystemSelector>().map_err(|e| invalid(format!("valid_systems: {e}")))?;
        }
        for (k, values) in &self.params {
            if values.is_empty() {
                return Err(invalid(format!("parameter `{k}` has no values")));
            }
        }
        if let Some(t) = self.time_limit {
            if !(t.is_finite() && t > 0.0) {
                return Err(invalid(format!("time_limit must be a positive number of seconds, got {t}")));
            }
        }
        crate::perf::compile_sanity(&self.sanity_patterns).map_err(|e| invalid(format!("sanity pattern: {e}")))?;
        Ok(())
    }

    pub fn time_limit(&self) -> Option<Duration> {
        self.time_limit.map(Duration::from_secs_f64)
    }

    fn targets(&self, system: &str, partition: &PartitionConfig) -> bool {
        let system_ok = self
            .valid_systems
            .iter()
            .filter_map(|s| s.parse::<SystemSelector>().ok())
            .any(|s| s.matches(system, &partition.name));
        let environ_ok = self
            .valid_prog_environs
            .iter()
            .any(|p| p == "*" || partition.environ_names.iter().any(|e| e == p));
        system_ok && environ_ok
    }
}

/// Reads a suite file. Relative manifest paths are resolved against the
/// suite file's directory.
pub fn load_suite(path: &Path) -> Result<Vec<TestSpec>, SuiteError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SuiteError::Io { path: path.display().to_string(), source })?;
    let mut specs = parse_suite(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for spec in &mut specs {
        if let ManifestSource::Path(p) = &mut spec.workload {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(specs)
}

pub fn parse_suite(text: &str, origin: &str) -> Result<Vec<TestSpec>, SuiteError> {
    let specs: Option<Vec<TestSpec>> = serde_yaml::from_str(text).map_err(|e| {
        let message = match e.location() {
            Some(l) => format!("line {}, column {}: {e}", l.line(), l.column()),
            None => e.to_string(),
        };
        SuiteError::Parse { origin: origin.to_string(), message }
    })?;
    let specs = specs.unwrap_or_default();
    let mut seen = HashSet::new();
    for spec in &specs {
        spec.validate()?;
        if !seen.insert(spec.name.as_str()) {
            return Err(SuiteError::Invalid { test: spec.name.clone(), message: "duplicate test name".into() });
        }
    }
    Ok(specs)
}

/// Parameter name to chosen value.
pub type Binding = BTreeMap<String, Value>;

/// Cartesian product of the parameter lists, ordered by parameter name and
/// then by position in each list.
pub fn expand_parameters(spec: &TestSpec) -> Vec<Binding> {
    spec.params.iter().fold(vec![Binding::new()], |acc, (name, values)| {
        acc.iter()
            .flat_map(|b| {
                values.iter().map(move |v| {
                    let mut b = b.clone();
                    b.insert(name.clone(), v.clone());
                    b
                })
            })
            .collect()
    })
}

/// `Test` or `Test_k1=v1_k2=v2`.
pub fn instance_name(spec_name: &str, binding: &Binding) -> String {
    let mut name = spec_name.to_string();
    for (k, v) in binding {
        name.push('_');
        name.push_str(k);
        name.push('=');
        name.push_str(&scalar_text(v));
    }
    name
}

/// Applies `mutations`, with `{param}` placeholders rendered from `binding`,
/// to a copy of `manifest`.
pub fn apply_parameter_mutations(
    manifest: &Value,
    binding: &Binding,
    mutations: &[ManifestMutation],
) -> Result<Value, PathError> {
    let rendered: Vec<ManifestMutation> = mutations.iter().map(|m| m.render(binding)).collect();
    apply_mutations(manifest, &rendered)
}

/// One parameter combination of one test on one partition.
#[derive(Debug, Clone)]
pub struct TestInstance {
    pub spec: Arc<TestSpec>,
    pub name: String,
    pub binding: Binding,
    pub system: String,
    pub partition: PartitionConfig,
    pub manifest: Value,
}

impl TestInstance {
    /// `system:partition`.
    pub fn target(&self) -> String {
        format!("{}:{}", self.system, self.partition.name)
    }

    /// `<root>/<system>/<partition>/<instance>`.
    pub fn output_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.system).join(&self.partition.name).join(self.name.replace(['/', '\\'], "_"))
    }

    pub fn stage_dir(&self, root: &Path) -> PathBuf {
        self.output_dir(root).join("stage")
    }

    pub fn log_path(&self, root: &Path) -> PathBuf {
        self.output_dir(root).join(crate::JOB_OUTPUT_FILE)
    }

    /// Namespace and context: the test's own settings, then the command
    /// line's, then the partition's.
    pub fn placement(&self, cli: &Placement) -> Placement {
        Placement {
            namespace: self.spec.namespace.clone().or_else(|| cli.namespace.clone()).or_else(|| self.partition.namespace.clone()),
            context: self.spec.context.clone().or_else(|| cli.context.clone()).or_else(|| self.partition.context.clone()),
        }
    }
}

impl fmt::Display for TestInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} @{}", self.name, self.target())
    }
}

/// Every instance of every test on every partition matched by both the test
/// and `filter`, sorted by name and then target.
pub fn instantiate(specs: &[TestSpec], cfg: &SiteConfig, filter: &SystemSelector) -> Result<Vec<TestInstance>, SuiteError> {
    let mut out = Vec::new();
    for spec in specs {
        let targets: Vec<_> = cfg.matching_partitions(filter).filter(|(s, p)| spec.targets(&s.name, p)).collect();
        if targets.is_empty() {
            continue;
        }
        let base = spec.workload.load()?;
        let spec_rc = Arc::new(spec.clone());
        for binding in expand_parameters(spec) {
            let name = instance_name(&spec.name, &binding);
            let manifest = apply_parameter_mutations(&base, &binding, &spec.mutations)
                .map_err(|source| SuiteError::Mutation { instance: name.clone(), source })?;
            for (system, partition) in &targets {
                out.push(TestInstance {
                    spec: spec_rc.clone(),
                    name: name.clone(),
                    binding: binding.clone(),
                    system: system.name.clone(),
                    partition: (*partition).clone(),
                    manifest: manifest.clone(),
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.name, &a.system, &a.partition.name).cmp(&(&b.name, &b.system, &b.partition.name)));
    Ok(out)
}
