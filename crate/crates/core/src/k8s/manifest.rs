use std::fmt;

use serde_json::{Map, Value};

use super::{RunIdentifier, RUN_LABEL};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    Pod,
    Job,
    Other(String),
}

impl WorkloadKind {
    pub fn from_name(kind: &str) -> Self {
        match kind {
            "Pod" => WorkloadKind::Pod,
            "Job" => WorkloadKind::Job,
            other => WorkloadKind::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            WorkloadKind::Pod => "Pod",
            WorkloadKind::Job => "Job",
            WorkloadKind::Other(k) => k,
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("manifest is not a mapping")]
    NotAMapping,
    #[error("manifest has no `kind`")]
    MissingKind,
    #[error("manifest has no `apiVersion`")]
    MissingApiVersion,
    #[error("manifest has no `metadata.name`")]
    MissingName,
    #[error("`spec.completions` must be a positive integer, got {0}")]
    BadCompletions(String),
    #[error("cannot parse manifest: {0}")]
    Parse(String),
}

/// A Kubernetes workload document (`apiVersion`/`kind`/`metadata`/`spec`).
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadManifest {
    doc: Value,
    kind: WorkloadKind,
}

impl WorkloadManifest {
    pub fn parse(doc: Value) -> Result<Self, ManifestError> {
        let obj = doc.as_object().ok_or(ManifestError::NotAMapping)?;
        let kind = obj.get("kind").and_then(Value::as_str).ok_or(ManifestError::MissingKind)?;
        obj.get("apiVersion").and_then(Value::as_str).ok_or(ManifestError::MissingApiVersion)?;
        obj.get("metadata").and_then(|m| m.get("name")).and_then(Value::as_str).ok_or(ManifestError::MissingName)?;
        let kind = WorkloadKind::from_name(kind);
        Ok(Self { doc, kind })
    }

    pub fn from_yaml_str(text: &str) -> Result<Self, ManifestError> {
        let doc: Value = serde_yaml::from_str(text).map_err(|e| ManifestError::Parse(e.to_string()))?;
        Self::parse(doc)
    }

    pub fn kind(&self) -> &WorkloadKind {
        &self.kind
    }

    pub fn api_version(&self) -> &str {
        self.doc["apiVersion"].as_str().unwrap_or_default()
    }

    pub fn name(&self) -> &str {
        self.doc["metadata"]["name"].as_str().unwrap_or_default()
    }

    pub fn document(&self) -> &Value {
        &self.doc
    }

    pub fn into_document(self) -> Value {
        self.doc
    }

    /// Number of nodes named `metadata` whose value is a mapping or null.
    pub fn metadata_block_count(&self) -> usize {
        fn count(v: &Value) -> usize {
            match v {
                Value::Object(map) => map
                    .iter()
                    .map(|(k, child)| usize::from(k == "metadata" && is_metadata_block(child)) + count(child))
                    .sum(),
                Value::Array(items) => items.iter().map(count).sum(),
                _ => 0,
            }
        }
        count(&self.doc)
    }

    /// Every metadata block's `labels` map, in document order.
    pub fn label_maps(&self) -> Vec<Option<&Map<String, Value>>> {
        fn collect<'a>(v: &'a Value, out: &mut Vec<Option<&'a Map<String, Value>>>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        if k == "metadata" && is_metadata_block(child) {
                            out.push(child.get("labels").and_then(Value::as_object));
                        }
                        collect(child, out);
                    }
                }
                Value::Array(items) => items.iter().for_each(|i| collect(i, out)),
                _ => {}
            }
        }
        let mut out = Vec::new();
        collect(&self.doc, &mut out);
        out
    }
}

fn is_metadata_block(v: &Value) -> bool {
    v.is_object() || v.is_null()
}

/// Returns a copy with `rfm: <id>` added to the labels of every metadata
/// block, top-level and nested (e.g. Job pod templates). Existing labels are
/// kept and missing `labels` maps created. The top-level `metadata.name` gets
/// a `-<id>` suffix so one manifest can back several concurrent runs.
/// Applying it twice with the same identifier equals applying it once.
pub fn inject_labels(manifest: &WorkloadManifest, id: &RunIdentifier) -> WorkloadManifest {
    fn walk(v: &mut Value, id: &RunIdentifier) {
        match v {
            Value::Object(map) => {
                for (k, child) in map.iter_mut() {
                    if k == "metadata" && is_metadata_block(child) {
                        label_block(child, id);
                    }
                    walk(child, id);
                }
            }
            Value::Array(items) => items.iter_mut().for_each(|i| walk(i, id)),
            _ => {}
        }
    }
    let mut doc = manifest.doc.clone();
    walk(&mut doc, id);
    let suffix = format!("-{id}");
    if let Some(name) = doc.pointer_mut("/metadata/name") {
        if let Some(s) = name.as_str().filter(|s| !s.ends_with(&suffix)) {
            *name = Value::String(format!("{s}{suffix}"));
        }
    }
    WorkloadManifest { doc, kind: manifest.kind.clone() }
}

fn label_block(block: &mut Value, id: &RunIdentifier) {
    if !block.is_object() {
        *block = Value::Object(Map::new());
    }
    let map = block.as_object_mut().expect("metadata block is an object");
    let labels = map.entry("labels").or_insert_with(|| Value::Object(Map::new()));
    if !labels.is_object() {
        *labels = Value::Object(Map::new());
    }
    labels.as_object_mut().unwrap().insert(RUN_LABEL.to_string(), Value::String(id.to_string()));
}

/// The workload kind and how many pods must succeed: 1 for a Pod,
/// `spec.completions` (default 1) for a Job, `other_expectation` otherwise.
pub fn detect_workload(manifest: &WorkloadManifest, other_expectation: u32) -> Result<(WorkloadKind, u32), ManifestError> {
    let expected = match manifest.kind() {
        WorkloadKind::Pod => 1,
        WorkloadKind::Job => match manifest.doc.pointer("/spec/completions") {
            None | Some(Value::Null) => 1,
            Some(v) => v
                .as_u64()
                .filter(|&n| n >= 1 && n <= u32::MAX as u64)
                .ok_or_else(|| ManifestError::BadCompletions(v.to_string()))? as u32,
        },
        WorkloadKind::Other(kind) => {
            log::warn!("workload kind `{kind}` has no dedicated support; expecting {other_expectation} completed pod(s)");
            other_expectation
        }
    };
    Ok((manifest.kind().clone(), expected))
}
