//! Addressing and mutating nodes of a manifest document tree.
//!
//! A [`DocPath`] is written as dot-separated keys with optional array
//! indices, e.g. `spec.containers[0].resources.limits."nvidia.com/gpu"`.
//! Keys containing dots or brackets are double-quoted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    Key(String),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DocPath {
    segments: Vec<Segment>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PathError {
    #[error("invalid document path `{path}`: {reason}")]
    Syntax { path: String, reason: String },
    #[error("cannot descend into scalar at `{at}` while setting `{path}`")]
    ScalarIntermediate { path: String, at: String },
    #[error("index {index} out of bounds (len {len}) at `{at}` while setting `{path}`")]
    IndexOutOfBounds { path: String, at: String, index: usize, len: usize },
    #[error("expected {expected} at `{at}` while setting `{path}`")]
    TypeMismatch { path: String, at: String, expected: &'static str },
}

impl DocPath {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get<'a>(&self, doc: &'a Value) -> Option<&'a Value> {
        self.segments.iter().try_fold(doc, |node, seg| match seg {
            Segment::Key(k) => node.as_object()?.get(k),
            Segment::Index(i) => node.as_array()?.get(*i),
        })
    }

    /// Sets the node at this path, creating missing objects along the way.
    /// An index equal to the array length appends.
    pub fn set(&self, doc: &mut Value, value: Value) -> Result<(), PathError> {
        let mut node = doc;
        for (depth, seg) in self.segments.iter().enumerate() {
            let at = self.prefix(depth);
            if node.is_null() {
                *node = match seg {
                    Segment::Key(_) => Value::Object(Map::new()),
                    Segment::Index(_) => Value::Array(Vec::new()),
                };
            }
            node = match (seg, node) {
                (Segment::Key(k), Value::Object(map)) => map.entry(k.clone()).or_insert(Value::Null),
                (Segment::Index(i), Value::Array(items)) => {
                    if *i == items.len() {
                        items.push(Value::Null);
                    }
                    let len = items.len();
                    items.get_mut(*i).ok_or_else(|| PathError::IndexOutOfBounds {
                        path: self.to_string(),
                        at: at.clone(),
                        index: *i,
                        len,
                    })?
                }
                (Segment::Key(_), Value::Array(_)) => {
                    return Err(PathError::TypeMismatch { path: self.to_string(), at, expected: "an object" })
                }
                (Segment::Index(_), Value::Object(_)) => {
                    return Err(PathError::TypeMismatch { path: self.to_string(), at, expected: "an array" })
                }
                _ => return Err(PathError::ScalarIntermediate { path: self.to_string(), at }),
            };
        }
        *node = value;
        Ok(())
    }

    fn prefix(&self, len: usize) -> String {
        if len == 0 {
            return "<root>".to_string();
        }
        DocPath { segments: self.segments[..len].to_vec() }.to_string()
    }
}

impl FromStr for DocPath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| PathError::Syntax { path: s.to_string(), reason: reason.to_string() };
        let chars: Vec<char> = s.chars().collect();
        let mut segments = Vec::new();
        let mut i = 0;
        let mut expect_key = true;
        while i < chars.len() {
            match chars[i] {
                '[' => {
                    let close = chars[i..].iter().position(|&c| c == ']').ok_or_else(|| err("unclosed `[`"))? + i;
                    let digits: String = chars[i + 1..close].iter().collect();
                    let index = digits.parse::<usize>().map_err(|_| err("array index must be a non-negative integer"))?;
                    if segments.is_empty() {
                        return Err(err("path must start with a key"));
                    }
                    segments.push(Segment::Index(index));
                    i = close + 1;
                    expect_key = false;
                }
                '.' if !expect_key => {
                    i += 1;
                    expect_key = true;
                    if i == chars.len() {
                        return Err(err("trailing `.`"));
                    }
                }
                '"' if expect_key => {
                    let close =
                        chars[i + 1..].iter().position(|&c| c == '"').ok_or_else(|| err("unclosed quote"))? + i + 1;
                    segments.push(Segment::Key(chars[i + 1..close].iter().collect()));
                    i = close + 1;
                    expect_key = false;
                }
                _ if expect_key => {
                    let end = chars[i..].iter().position(|&c| c == '.' || c == '[' || c == '"').map_or(chars.len(), |p| p + i);
                    if end == i {
                        return Err(err("empty key"));
                    }
                    segments.push(Segment::Key(chars[i..end].iter().collect()));
                    i = end;
                    expect_key = false;
                }
                _ => return Err(err("expected `.` or `[` between segments")),
            }
        }
        if segments.is_empty() {
            return Err(err("empty path"));
        }
        Ok(DocPath { segments })
    }
}

impl fmt::Display for DocPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Key(k) => {
                    if n > 0 {
                        f.write_str(".")?;
                    }
                    if k.contains(['.', '[', ']', '"']) || k.is_empty() {
                        write!(f, "\"{k}\"")?;
                    } else {
                        f.write_str(k)?;
                    }
                }
                Segment::Index(i) => write!(f, "[{i}]")?,
            }
        }
        Ok(())
    }
}

impl Serialize for DocPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DocPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One `(path, value)` edit of a manifest. String values may reference test
/// parameters as `{name}`; see [`ManifestMutation::render`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMutation {
    pub path: DocPath,
    pub value: Value,
}

impl ManifestMutation {
    pub fn new(path: DocPath, value: Value) -> Self {
        Self { path, value }
    }

    /// Substitutes `{param}` placeholders in string values. A string that is
    /// exactly one placeholder takes the parameter's value with its type, so
    /// `"{num_gpus}"` becomes the number `4`, not the string `"4"`.
    pub fn render(&self, binding: &BTreeMap<String, Value>) -> ManifestMutation {
        ManifestMutation { path: self.path.clone(), value: render_value(&self.value, binding) }
    }
}

fn render_value(value: &Value, binding: &BTreeMap<String, Value>) -> Value {
    match value {
        Value::String(s) => render_string(s, binding),
        Value::Array(items) => Value::Array(items.iter().map(|v| render_value(v, binding)).collect()),
        Value::Object(map) => {
            Value::Object(map.iter().map(|(k, v)| (k.clone(), render_value(v, binding))).collect())
        }
        other => other.clone(),
    }
}

fn render_string(s: &str, binding: &BTreeMap<String, Value>) -> Value {
    if let Some(name) = s.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
        if let Some(v) = binding.get(name) {
            return v.clone();
        }
    }
    let mut out = s.to_string();
    for (name, v) in binding {
        out = out.replace(&format!("{{{name}}}"), &scalar_text(v));
    }
    Value::String(out)
}

/// Text form of a parameter value as used in names and string templates.
pub fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Applies mutations in order to a copy of `manifest`.
pub fn apply_mutations(manifest: &Value, mutations: &[ManifestMutation]) -> Result<Value, PathError> {
    let mut doc = manifest.clone();
    for m in mutations {
        m.path.set(&mut doc, m.value.clone())?;
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn path(s: &str) -> DocPath {
        s.parse().unwrap()
    }

    #[test]
    fn parses_quoted_keys_and_indices() {
        let p = path(r#"spec.containers[0].resources.limits."nvidia.com/gpu""#);
        assert_eq!(
            p.segments(),
            &[
                Segment::Key("spec".into()),
                Segment::Key("containers".into()),
                Segment::Index(0),
                Segment::Key("resources".into()),
                Segment::Key("limits".into()),
                Segment::Key("nvidia.com/gpu".into()),
            ]
        );
        assert_eq!(p.to_string(), r#"spec.containers[0].resources.limits."nvidia.com/gpu""#);
    }

    #[test]
    fn rejects_malformed_paths() {
        for bad in ["", "a..b", "a.", "[0]", "a[x]", "a[0", "\"open", "a\"b\""] {
            assert!(bad.parse::<DocPath>().is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn sets_gpu_limit() {
        let doc = json!({"spec": {"containers": [{"resources": {"limits": {"nvidia.com/gpu": "4"}}}]}});
        let m = ManifestMutation::new(path(r#"spec.containers[0].resources.limits."nvidia.com/gpu""#), json!(8));
        let out = apply_mutations(&doc, &[m]).unwrap();
        assert_eq!(out["spec"]["containers"][0]["resources"]["limits"]["nvidia.com/gpu"], json!(8));
        assert_eq!(doc["spec"]["containers"][0]["resources"]["limits"]["nvidia.com/gpu"], json!("4"));
    }

    #[test]
    fn empty_mutation_list_is_identity() {
        let doc = json!({"kind": "Pod", "spec": {"x": [1, 2]}});
        assert_eq!(apply_mutations(&doc, &[]).unwrap(), doc);
    }

    #[test]
    fn last_mutation_wins() {
        let doc = json!({"a": {"b": 1}});
        let twice = apply_mutations(
            &doc,
            &[ManifestMutation::new(path("a.b"), json!(2)), ManifestMutation::new(path("a.b"), json!(3))],
        )
        .unwrap();
        let once = apply_mutations(&doc, &[ManifestMutation::new(path("a.b"), json!(3))]).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn creates_missing_nodes_and_appends() {
        let doc = json!({"spec": {"args": ["a"]}});
        let out = apply_mutations(
            &doc,
            &[
                ManifestMutation::new(path("metadata.labels.app"), json!("x")),
                ManifestMutation::new(path("spec.args[1]"), json!("b")),
            ],
        )
        .unwrap();
        assert_eq!(out, json!({"spec": {"args": ["a", "b"]}, "metadata": {"labels": {"app": "x"}}}));
    }

    #[test]
    fn scalar_intermediate_is_an_error() {
        let doc = json!({"spec": {"restartPolicy": "Never"}});
        let err = apply_mutations(&doc, &[ManifestMutation::new(path("spec.restartPolicy.x"), json!(1))]).unwrap_err();
        assert!(matches!(err, PathError::ScalarIntermediate { ref at, .. } if at == "spec.restartPolicy"));
        let err = apply_mutations(&doc, &[ManifestMutation::new(path("spec[0]"), json!(1))]).unwrap_err();
        assert!(matches!(err, PathError::TypeMismatch { .. }));
        let doc = json!({"a": [1]});
        let err = apply_mutations(&doc, &[ManifestMutation::new(path("a[3]"), json!(1))]).unwrap_err();
        assert!(matches!(err, PathError::IndexOutOfBounds { index: 3, len: 1, .. }));
    }

    #[test]
    fn render_keeps_types_for_whole_placeholders() {
        let binding = BTreeMap::from([("num_gpus".to_string(), json!(4))]);
        let m = ManifestMutation::new(path("a"), json!(["--nproc_per_node={num_gpus}", "{num_gpus}", "{other}"]));
        assert_eq!(m.render(&binding).value, json!(["--nproc_per_node=4", 4, "{other}"]));
    }
}
