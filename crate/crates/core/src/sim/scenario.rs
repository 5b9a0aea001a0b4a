//! Scenario files scripting what the simulated cluster does with the pods it
//! is asked to create.
//!
//! ```yaml
//! namespaces: [default]
//! pods:
//!   "resnet50-*":
//!     timeline:
//!       - {at: 0.5, phase: Running}
//!       - {at: 1.0, log: "Epoch 1 complete on {pod}"}
//!       - {at: 2.0, phase: Succeeded}
//!   "broken-*":
//!     exit_code: 2
//!     timeline:
//!       - {at: 0.5, phase: Running}
//!       - {at: 1.0, phase: Failed}
//!   "stuck-*":
//!     hang: true
//!     timeline:
//!       - {at: 0.0, waiting: ImagePullBackOff}
//! faults:
//!   - {method: POST, nth: 1, status: 500}
//! ```
//!
//! Offsets are seconds after the pod's creation. `{pod}` in a log line is
//! replaced by the pod's name. Pods matching no pattern succeed immediately
//! without output.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::sched::PodPhase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_namespaces")]
    pub namespaces: Vec<String>,
    /// Bearer token every request must carry, if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Pod-name glob pattern to script.
    #[serde(default)]
    pub pods: BTreeMap<String, PodScript>,
    #[serde(default)]
    pub faults: Vec<FaultInjection>,
}

fn default_namespaces() -> Vec<String> {
    vec!["default".to_string()]
}

impl Default for Scenario {
    fn default() -> Self {
        Self { namespaces: default_namespaces(), token: None, pods: BTreeMap::new(), faults: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodScript {
    #[serde(default)]
    pub timeline: Vec<TimelineEvent>,
    /// The pod never reaches a terminal phase.
    #[serde(default)]
    pub hang: bool,
    /// Container exit code reported once `Failed`.
    #[serde(default = "default_exit_code")]
    pub exit_code: i32,
}

fn default_exit_code() -> i32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineEvent {
    pub at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<PodPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
    /// Container waiting reason, e.g. `ImagePullBackOff`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waiting: Option<String>,
    /// The pod deletes itself.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub delete: bool,
}

impl TimelineEvent {
    pub fn offset(&self) -> Duration {
        Duration::from_secs_f64(self.at)
    }

    pub fn phase(at: f64, phase: PodPhase) -> Self {
        Self { at, phase: Some(phase), log: None, waiting: None, delete: false }
    }

    pub fn log(at: f64, line: impl Into<String>) -> Self {
        Self { at, phase: None, log: Some(line.into()), waiting: None, delete: false }
    }
}

/// One-shot fault, fired on the `nth` request (1-based) matching the method
/// and path filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub nth: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Substring the request path must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Answer with this HTTP status instead of handling the request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    /// Wall-clock delay before handling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
    /// Close the connection without answering.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub drop: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {0}: {1}")]
    Io(String, std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("scenario script `{pattern}`: {message}")]
    Script { pattern: String, message: String },
    #[error("scenario fault #{index}: {message}")]
    Fault { index: usize, message: String },
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
        Self::from_yaml_str(&text)
    }

    pub fn from_yaml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_yaml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (pattern, script) in &self.pods {
            glob::Pattern::new(pattern)
                .map_err(|e| ScenarioError::Script { pattern: pattern.clone(), message: e.to_string() })?;
            script
                .validate()
                .map_err(|message| ScenarioError::Script { pattern: pattern.clone(), message })?;
        }
        for (index, f) in self.faults.iter().enumerate() {
            let actions = usize::from(f.status.is_some()) + usize::from(f.delay_ms.is_some()) + usize::from(f.drop);
            if f.nth == 0 || actions != 1 {
                return Err(ScenarioError::Fault {
                    index,
                    message: "needs nth >= 1 and exactly one of status, delay_ms, drop".into(),
                });
            }
        }
        Ok(())
    }

    /// The script for `pod_name`; an error if several patterns match.
    pub fn script_for(&self, pod_name: &str) -> Result<Option<(&str, &PodScript)>, String> {
        let mut matches = self
            .pods
            .iter()
            .filter(|(p, _)| glob::Pattern::new(p).is_ok_and(|g| g.matches(pod_name)));
        let first = matches.next();
        if let Some((second, _)) = matches.next() {
            return Err(format!(
                "pod `{pod_name}` matches several scenario patterns (`{}`, `{second}`)",
                first.unwrap().0
            ));
        }
        Ok(first.map(|(p, s)| (p.as_str(), s)))
    }
}

fn phase_rank(p: PodPhase) -> Option<u8> {
    match p {
        PodPhase::Pending => Some(0),
        PodPhase::Running => Some(1),
        PodPhase::Succeeded | PodPhase::Failed => Some(2),
        PodPhase::Unknown => None,
    }
}

impl PodScript {
    pub fn validate(&self) -> Result<(), String> {
        let mut last_at = 0.0;
        let mut rank = 0;
        let mut terminal = false;
        for (i, ev) in self.timeline.iter().enumerate() {
            if !ev.at.is_finite() || ev.at < 0.0 {
                return Err(format!("event {i}: offset must be a non-negative number"));
            }
            if ev.at < last_at {
                return Err(format!("event {i}: offsets must be nondecreasing"));
            }
            last_at = ev.at;
            let kinds = usize::from(ev.phase.is_some())
                + usize::from(ev.log.is_some())
                + usize::from(ev.waiting.is_some())
                + usize::from(ev.delete);
            if kinds != 1 {
                return Err(format!("event {i}: needs exactly one of phase, log, waiting, delete"));
            }
            if let Some(p) = ev.phase {
                let r = phase_rank(p).ok_or_else(|| format!("event {i}: phase {p} cannot be scripted"))?;
                if terminal || r <= rank && !(r == 0 && rank == 0) {
                    return Err(format!("event {i}: phase {p} breaks Pending -> Running -> Succeeded|Failed"));
                }
                rank = r;
                terminal = r == 2;
            }
        }
        match (terminal, self.hang) {
            (false, false) => Err("timeline needs a terminal phase unless `hang: true`".into()),
            (true, true) => Err("a hanging pod cannot reach a terminal phase".into()),
            _ => Ok(()),
        }
    }

    /// Immediate success without output.
    pub fn instant_success() -> Self {
        PodScript { timeline: vec![TimelineEvent::phase(0.0, PodPhase::Succeeded)], hang: false, exit_code: 1 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_doc_example_is_valid() {
        let text = r#"
namespaces: [default]
pods:
  "resnet50-*":
    timeline:
      - {at: 0.5, phase: Running}
      - {at: 1.0, log: "Epoch 1 complete on {pod}"}
      - {at: 2.0, phase: Succeeded}
  "broken-*":
    exit_code: 2
    timeline:
      - {at: 0.5, phase: Running}
      - {at: 1.0, phase: Failed}
  "stuck-*":
    hang: true
    timeline:
      - {at: 0.0, waiting: ImagePullBackOff}
faults:
  - {method: POST, nth: 1, status: 500}
"#;
        let s = Scenario::from_yaml_str(text).unwrap();
        assert_eq!(s.pods.len(), 3);
        assert_eq!(s.script_for("resnet50-abc").unwrap().unwrap().0, "resnet50-*");
        assert!(s.script_for("other").unwrap().is_none());
    }

    #[test]
    fn rejects_bad_timelines() {
        let bad = [
            "timeline: [{at: 1, phase: Running}, {at: 0.5, phase: Succeeded}]",
            "timeline: [{at: 0, phase: Succeeded}, {at: 1, phase: Running}]",
            "timeline: [{at: 0, phase: Running}]",
            "{hang: true, timeline: [{at: 0, phase: Failed}]}",
            "timeline: [{at: 0, phase: Unknown}, {at: 1, phase: Failed}]",
            "timeline: [{at: 0, phase: Running, log: x}, {at: 1, phase: Failed}]",
            "timeline: [{at: -1, phase: Failed}]",
        ];
        for script in bad {
            let s: PodScript = serde_yaml::from_str(script).unwrap();
            assert!(s.validate().is_err(), "{script}");
        }
        let ok: PodScript = serde_yaml::from_str("timeline: [{at: 0, phase: Pending}, {at: 0, phase: Failed}]").unwrap();
        ok.validate().unwrap();
    }

    #[test]
    fn ambiguous_patterns_detected() {
        let s = Scenario::from_yaml_str(
            "pods:\n  'a-*': {timeline: [{at: 0, phase: Succeeded}]}\n  '*-b': {timeline: [{at: 0, phase: Failed}]}\n",
        )
        .unwrap();
        assert!(s.script_for("a-b").is_err());
        assert!(s.script_for("a-c").unwrap().is_some());
    }

    #[test]
    fn faults_need_one_action() {
        assert!(Scenario::from_yaml_str("faults: [{nth: 1}]").is_err());
        assert!(Scenario::from_yaml_str("faults: [{nth: 0, status: 500}]").is_err());
        assert!(Scenario::from_yaml_str("faults: [{nth: 1, status: 500, drop: true}]").is_err());
        assert!(Scenario::from_yaml_str("faults: [{nth: 2, drop: true}]").is_ok());
    }
}
