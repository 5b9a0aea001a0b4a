//! Random manifests with metadata blocks at arbitrary depths, and an
//! independent oracle for what label injection must do to them.

use std::collections::BTreeMap;

use kubebench_core::k8s::RunIdentifier;
use proptest::prelude::*;
use serde_json::{json, Map, Value};

pub fn labels() -> impl Strategy<Value = BTreeMap<String, String>> {
    prop::collection::btree_map("[a-z]{1,6}", "[a-z0-9]{0,6}", 0..3)
}

pub fn metadata_block() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        Just(json!({})),
        labels().prop_map(|l| json!({ "labels": l })),
        (labels(), "[a-z]{1,8}").prop_map(|(l, n)| json!({"name": n, "labels": l, "annotations": {"a": "b"}})),
        Just(json!({"labels": "not-a-map"})),
    ]
}

pub fn tree() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        any::<i32>().prop_map(Value::from),
        "[a-z]{0,5}".prop_map(Value::from),
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
    ];
    leaf.prop_recursive(5, 96, 5, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::vec(
                (prop::sample::select(vec!["spec", "template", "containers", "items", "x", "metadata"]), inner.clone()),
                0..4
            )
            .prop_map(|entries| Value::Object(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())),
            (metadata_block(), inner).prop_map(|(m, rest)| json!({"metadata": m, "spec": rest})),
        ]
    })
}

pub fn manifest() -> impl Strategy<Value = Value> {
    (prop::sample::select(vec!["Pod", "Job", "IPUJob"]), labels(), tree()).prop_map(|(kind, l, spec)| {
        let mut meta = json!({"name": "workload"});
        if !l.is_empty() {
            meta["labels"] = json!(l);
        }
        json!({"apiVersion": "v1", "kind": kind, "metadata": meta, "spec": spec})
    })
}

pub fn identifier() -> impl Strategy<Value = RunIdentifier> {
    "[a-z0-9]{8}".prop_map(|s| s.parse().unwrap())
}

/// Every `metadata` node holding a mapping or null, keyed by its path.
pub fn blocks(v: &Value, path: String, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = format!("{path}/{k}");
                if k == "metadata" && (child.is_object() || child.is_null()) {
                    out.insert(p.clone(), child.clone());
                }
                blocks(child, p, out);
            }
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                blocks(item, format!("{path}/{i}"), out);
            }
        }
        _ => {}
    }
}

/// The document with every metadata block's labels and the top-level name
/// removed, and null blocks turned into empty mappings.
pub fn strip(v: &Value) -> Value {
    fn go(v: &Value) -> Value {
        match v {
            Value::Object(map) => Value::Object(
                map.iter()
                    .map(|(k, child)| {
                        let child = if k == "metadata" && (child.is_object() || child.is_null()) {
                            let mut m = child.as_object().cloned().unwrap_or_default();
                            m.remove("labels");
                            Value::Object(m)
                        } else {
                            child.clone()
                        };
                        (k.clone(), go(&child))
                    })
                    .collect::<Map<_, _>>(),
            ),
            Value::Array(items) => Value::Array(items.iter().map(go).collect()),
            other => other.clone(),
        }
    }
    let mut out = go(v);
    out["metadata"].as_object_mut().unwrap().remove("name");
    out
}

