//! Site configuration: systems, their partitions, and the scheduler backend
//! each partition uses.
//!
//! ```yaml
//! systems:
//!   - name: eidf
//!     partitions:
//!       - name: gpu-service
//!         scheduler: k8s
//!         launcher: k8s
//!         environs: [default]
//! environments:
//!   - name: default
//! logging: []
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sched::BUILTIN_BACKENDS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub systems: Vec<SystemConfig>,
    #[serde(default)]
    pub environments: Vec<EnvironmentConfig>,
    #[serde(default)]
    pub logging: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descr: Option<String>,
    pub partitions: Vec<PartitionConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub name: String,
    pub scheduler: String,
    pub launcher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, rename = "environs")]
    pub environ_names: Vec<String>,
}

/// A named, otherwise opaque set of key-value pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub name: String,
    #[serde(flatten)]
    pub settings: BTreeMap<String, Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}: parse error{}: {message}", location_suffix(.line, .column))]
    Parse { origin: String, line: Option<usize>, column: Option<usize>, message: String },
    #[error("{origin}: {location}: {message}")]
    Validation { origin: String, location: String, message: String },
    #[error("no partition matches `{0}`")]
    NotFound(String),
    #[error("invalid system selector `{0}`: expected `system:partition`")]
    Selector(String),
}

fn location_suffix(line: &Option<usize>, column: &Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l} column {c}"),
        _ => String::new(),
    }
}

const KNOWN_TOP_LEVEL_KEYS: [&str; 3] = ["systems", "environments", "logging"];

/// Loads and validates a site configuration against the built-in backends.
pub fn load_site_config(path: &Path) -> Result<SiteConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    SiteConfig::from_yaml_str(&text, &path.display().to_string(), &BUILTIN_BACKENDS)
}

impl SiteConfig {
    /// Parses and validates; `backends` is the set of scheduler names a
    /// partition may reference.
    pub fn from_yaml_str(text: &str, origin: &str, backends: &[&str]) -> Result<SiteConfig, ConfigError> {
        let parse_err = |e: serde_yaml::Error| ConfigError::Parse {
            origin: origin.to_string(),
            line: e.location().map(|l| l.line()),
            column: e.location().map(|l| l.column()),
            message: e.to_string(),
        };
        let mut raw: serde_yaml::Value = serde_yaml::from_str(text).map_err(parse_err)?;
        if let serde_yaml::Value::Mapping(map) = &mut raw {
            let unknown: Vec<serde_yaml::Value> = map
                .keys()
                .filter(|k| !k.as_str().is_some_and(|k| KNOWN_TOP_LEVEL_KEYS.contains(&k)))
                .cloned()
                .collect();
            for key in unknown {
                log::warn!("{origin}: ignoring unknown top-level key {key:?}");
                map.remove(&key);
            }
        }
        let cfg: SiteConfig = serde_yaml::from_value(raw).map_err(parse_err)?;
        cfg.validate(origin, backends)?;
        Ok(cfg)
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(self).expect("site config is always serializable")
    }

    pub fn validate(&self, origin: &str, backends: &[&str]) -> Result<(), ConfigError> {
        let fail = |location: String, message: String| ConfigError::Validation { origin: origin.to_string(), location, message };
        if self.systems.is_empty() {
            return Err(fail("systems".into(), "at least one system is required".into()));
        }
        let mut system_names = HashSet::new();
        for (si, system) in self.systems.iter().enumerate() {
            if !valid_name(&system.name) {
                return Err(fail(format!("systems[{si}].name"), format!("invalid system name `{}`", system.name)));
            }
            if !system_names.insert(system.name.as_str()) {
                return Err(fail(format!("systems[{si}].name"), format!("duplicate system name `{}`", system.name)));
            }
            let mut partition_names = HashSet::new();
            for (pi, part) in system.partitions.iter().enumerate() {
                let loc = format!("systems[{si}].partitions[{pi}]");
                if !valid_name(&part.name) {
                    return Err(fail(format!("{loc}.name"), format!("invalid partition name `{}`", part.name)));
                }
                if !partition_names.insert(part.name.as_str()) {
                    return Err(fail(
                        format!("{loc}.name"),
                        format!("duplicate partition `{}` in system `{}`", part.name, system.name),
                    ));
                }
                if !backends.contains(&part.scheduler.as_str()) {
                    return Err(fail(
                        format!("{loc}.scheduler"),
                        format!(
                            "partition `{}:{}` uses unknown scheduler `{}` (registered: {})",
                            system.name,
                            part.name,
                            part.scheduler,
                            backends.join(", ")
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every `(system, partition)` pair matched by `selector`.
    pub fn matching_partitions<'a>(
        &'a self,
        selector: &SystemSelector,
    ) -> impl Iterator<Item = (&'a SystemConfig, &'a PartitionConfig)> + 'a {
        let selector = selector.clone();
        self.systems
            .iter()
            .flat_map(|s| s.partitions.iter().map(move |p| (s, p)))
            .filter(move |(s, p)| selector.matches(&s.name, &p.name))
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.contains([':', '*', '/']) && !name.chars().any(char::is_whitespace)
}

/// Looks up the single partition named by an exact `system:partition` selector.
pub fn resolve_partition<'a>(cfg: &'a SiteConfig, selector: &str) -> Result<&'a PartitionConfig, ConfigError> {
    let sel: SystemSelector = selector.parse()?;
    let (Pattern::Exact(sys), Pattern::Exact(part)) = (&sel.system, &sel.partition) else {
        return Err(ConfigError::Selector(selector.to_string()));
    };
    cfg.systems
        .iter()
        .find(|s| &s.name == sys)
        .and_then(|s| s.partitions.iter().find(|p| &p.name == part))
        .ok_or_else(|| ConfigError::NotFound(selector.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pattern {
    Any,
    Exact(String),
}

impl Pattern {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            Pattern::Any => true,
            Pattern::Exact(s) => s == name,
        }
    }

    fn parse(s: &str) -> Option<Pattern> {
        match s {
            "*" => Some(Pattern::Any),
            "" => None,
            s if valid_name(s) => Some(Pattern::Exact(s.to_string())),
            _ => None,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Any => f.write_str("*"),
            Pattern::Exact(s) => f.write_str(s),
        }
    }
}

/// `system:partition` selector; either side may be `*`. A bare `*` matches
/// everything and a bare system name matches all of its partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemSelector {
    pub system: Pattern,
    pub partition: Pattern,
}

impl SystemSelector {
    pub fn any() -> Self {
        Self { system: Pattern::Any, partition: Pattern::Any }
    }

    pub fn matches(&self, system: &str, partition: &str) -> bool {
        self.system.matches(system) && self.partition.matches(partition)
    }
}

impl FromStr for SystemSelector {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Selector(s.to_string());
        let (system, partition) = match s.split_once(':') {
            Some((sys, part)) => (Pattern::parse(sys).ok_or_else(bad)?, Pattern::parse(part).ok_or_else(bad)?),
            None => (Pattern::parse(s).ok_or_else(bad)?, Pattern::Any),
        };
        Ok(SystemSelector { system, partition })
    }
}

impl fmt::Display for SystemSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.system, self.partition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EIDF: &str = r#"
systems:
  - name: eidf
    partitions:
      - name: gpu-service
        scheduler: k8s
        launcher: k8s
        environs: [default]
environments:
  - name: default
logging: []
"#;

    fn load(text: &str) -> Result<SiteConfig, ConfigError> {
        SiteConfig::from_yaml_str(text, "test.yaml", &BUILTIN_BACKENDS)
    }

    #[test]
    fn loads_k8s_partition() {
        let cfg = load(EIDF).unwrap();
        assert_eq!(cfg.systems[0].name, "eidf");
        let part = resolve_partition(&cfg, "eidf:gpu-service").unwrap();
        assert_eq!(part.scheduler, "k8s");
        assert_eq!(part.launcher, "k8s");
    }

    #[test]
    fn zero_systems_rejected() {
        let err = load("systems: []\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref location, .. } if location == "systems"));
    }

    #[test]
    fn only_registered_schedulers_accepted() {
        for token in ["slurm", "pbs", "flux", "K8S", "", "k8s "] {
            let text = EIDF.replace("scheduler: k8s", &format!("scheduler: '{token}'"));
            let err = load(&text).unwrap_err();
            match err {
                ConfigError::Validation { location, message, .. } => {
                    assert_eq!(location, "systems[0].partitions[0].scheduler");
                    assert!(message.contains("eidf:gpu-service"), "{message}");
                }
                other => panic!("expected validation error, got {other}"),
            }
        }
        for token in BUILTIN_BACKENDS {
            load(&EIDF.replace("scheduler: k8s", &format!("scheduler: {token}"))).unwrap();
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let dup_system = EIDF.replace(
            "environments:",
            "  - name: eidf\n    partitions: []\nenvironments:",
        );
        assert!(matches!(load(&dup_system), Err(ConfigError::Validation { .. })));
        let dup_partition = EIDF.replace(
            "        environs: [default]\n",
            "        environs: [default]\n      - name: gpu-service\n        scheduler: local\n        launcher: local\n",
        );
        let err = load(&dup_partition).unwrap_err();
        assert!(err.to_string().contains("duplicate partition"), "{err}");
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = load("systems:\n  - name: [unclosed\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert!(line.is_some()),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_top_level_keys_are_ignored() {
        let cfg = load(&format!("{EIDF}general:\n  check_search_path: [x]\n")).unwrap();
        assert_eq!(cfg.systems.len(), 1);
    }

    #[test]
    fn resolve_missing_partition() {
        let cfg = load(EIDF).unwrap();
        assert!(matches!(resolve_partition(&cfg, "eidf:missing"), Err(ConfigError::NotFound(_))));
        assert!(matches!(resolve_partition(&cfg, "other:gpu-service"), Err(ConfigError::NotFound(_))));
        assert!(matches!(resolve_partition(&cfg, "eidf:gpu:x"), Err(ConfigError::Selector(_))));
    }

    #[test]
    fn wildcard_matches_every_partition() {
        let text = r#"
systems:
  - name: a
    partitions:
      - {name: p1, scheduler: local, launcher: local}
      - {name: p2, scheduler: k8s, launcher: k8s}
  - name: b
    partitions:
      - {name: p1, scheduler: local, launcher: local}
"#;
        let cfg = load(text).unwrap();
        let all: Vec<_> = cfg
            .matching_partitions(&"*".parse().unwrap())
            .map(|(s, p)| format!("{}:{}", s.name, p.name))
            .collect();
        let brute: Vec<_> = cfg
            .systems
            .iter()
            .flat_map(|s| s.partitions.iter().map(move |p| format!("{}:{}", s.name, p.name)))
            .collect();
        assert_eq!(all, brute);
        let a_only: Vec<_> = cfg.matching_partitions(&"a:*".parse().unwrap()).map(|(_, p)| p.name.clone()).collect();
        assert_eq!(a_only, ["p1", "p2"]);
        let p1: Vec<_> = cfg.matching_partitions(&"*:p1".parse().unwrap()).map(|(s, _)| s.name.clone()).collect();
        assert_eq!(p1, ["a", "b"]);
    }
}
