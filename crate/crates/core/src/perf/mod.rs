//! Sanity checks and performance extraction over captured logs, and the
//! per-epoch throughput metrics used to characterise training runs.
//!
//! An epoch splits into I/O time (copying data to the device) and compute
//! time. From those and the number of input items processed:
//!
//! * compute throughput = items / compute time
//! * compute fraction = compute time / (compute time + I/O time)
//! * effective throughput = items / (compute time + I/O time)
//!
//! so effective throughput is always compute throughput times compute
//! fraction.

pub mod published;
mod report;

use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use report::{read_csv, render_table, write_csv, PerfReportRow};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PerfError {
    #[error("invalid epoch timing: {0}")]
    Domain(String),
    #[error("perf variable `{variable}`: {message}")]
    Pattern { variable: String, message: String },
    #[error("perf variable `{variable}`: tolerance must be a non-negative number, got {tolerance}")]
    Tolerance { variable: String, tolerance: f64 },
}

/// Timing of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochTiming {
    epoch: u32,
    io_time: f64,
    compute_time: f64,
    items: u64,
}

impl EpochTiming {
    pub fn new(epoch: u32, io_time: f64, compute_time: f64, items: u64) -> Result<Self, PerfError> {
        if !(io_time.is_finite() && io_time >= 0.0) {
            return Err(PerfError::Domain(format!("io_time must be >= 0, got {io_time}")));
        }
        if !(compute_time.is_finite() && compute_time > 0.0) {
            return Err(PerfError::Domain(format!("compute_time must be > 0, got {compute_time}")));
        }
        if items == 0 {
            return Err(PerfError::Domain("items must be > 0".into()));
        }
        Ok(Self { epoch, io_time, compute_time, items })
    }

    /// The epoch that processes `items` inputs at the given compute
    /// throughput and compute fraction.
    pub fn from_rates(epoch: u32, items: u64, compute_throughput: f64, compute_fraction: f64) -> Result<Self, PerfError> {
        if !(compute_throughput.is_finite() && compute_throughput > 0.0) {
            return Err(PerfError::Domain(format!("compute throughput must be > 0, got {compute_throughput}")));
        }
        if !(compute_fraction > 0.0 && compute_fraction <= 1.0) {
            return Err(PerfError::Domain(format!("compute fraction must lie in (0, 1], got {compute_fraction}")));
        }
        let compute_time = items as f64 / compute_throughput;
        let io_time = compute_time * (1.0 - compute_fraction) / compute_fraction;
        Self::new(epoch, io_time, compute_time, items)
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn io_time(&self) -> f64 {
        self.io_time
    }

    pub fn compute_time(&self) -> f64 {
        self.compute_time
    }

    pub fn items(&self) -> u64 {
        self.items
    }

    pub fn total_time(&self) -> f64 {
        self.io_time + self.compute_time
    }
}

/// Inputs per second of pure computation.
pub fn compute_throughput(t: &EpochTiming) -> f64 {
    t.items as f64 / t.compute_time
}

/// Share of the epoch spent computing, in `(0, 1]`.
pub fn compute_fraction(t: &EpochTiming) -> f64 {
    t.compute_time / t.total_time()
}

/// Inputs per second of total epoch time.
pub fn effective_throughput(t: &EpochTiming) -> f64 {
    t.items as f64 / t.total_time()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputSummary {
    pub epochs: usize,
    pub compute_throughput: f64,
    pub compute_fraction: f64,
    pub effective_throughput: f64,
}

/// Arithmetic mean of the per-epoch metrics; `None` without epochs.
pub fn aggregate(epochs: &[EpochTiming]) -> Option<ThroughputSummary> {
    if epochs.is_empty() {
        return None;
    }
    let n = epochs.len() as f64;
    let mean = |f: fn(&EpochTiming) -> f64| epochs.iter().map(f).sum::<f64>() / n;
    Some(ThroughputSummary {
        epochs: epochs.len(),
        compute_throughput: mean(compute_throughput),
        compute_fraction: mean(compute_fraction),
        effective_throughput: mean(effective_throughput),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
    #[default]
    TwoSided,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::HigherIsBetter => "higher_is_better",
            Direction::LowerIsBetter => "lower_is_better",
            Direction::TwoSided => "two_sided",
        })
    }
}

/// Whether `measured` lies in the relative band around `reference`.
pub fn within_tolerance(measured: f64, reference: f64, tolerance: f64, direction: Direction) -> bool {
    let slack = reference.abs() * tolerance;
    let eps = 1e-12 * reference.abs().max(1.0);
    match direction {
        Direction::HigherIsBetter => measured >= reference - slack - eps,
        Direction::LowerIsBetter => measured <= reference + slack + eps,
        Direction::TwoSided => (measured - reference).abs() <= slack + eps,
    }
}

fn default_tolerance() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerfVariableDef {
    name: String,
    pattern: String,
    #[serde(default)]
    unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<f64>,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
    #[serde(default)]
    direction: Direction,
}

/// A performance figure scraped from the log by a regex with exactly one
/// capture group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PerfVariableDef", into = "PerfVariableDef")]
pub struct PerfVariable {
    pub name: String,
    pub unit: String,
    pub reference: Option<f64>,
    pub tolerance: f64,
    pub direction: Direction,
    regex: Regex,
}

impl PartialEq for PerfVariable {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.unit == other.unit
            && self.reference == other.reference
            && self.tolerance == other.tolerance
            && self.direction == other.direction
            && self.regex.as_str() == other.regex.as_str()
    }
}

impl PerfVariable {
    pub fn new(name: &str, pattern: &str, unit: &str) -> Result<Self, PerfError> {
        PerfVariableDef {
            name: name.into(),
            pattern: pattern.into(),
            unit: unit.into(),
            reference: None,
            tolerance: default_tolerance(),
            direction: Direction::default(),
        }
        .try_into()
    }

    pub fn with_reference(mut self, reference: f64, tolerance: f64, direction: Direction) -> Result<Self, PerfError> {
        check_tolerance(&self.name, tolerance)?;
        self.reference = Some(reference);
        self.tolerance = tolerance;
        self.direction = direction;
        Ok(self)
    }

    pub fn pattern(&self) -> &str {
        self.regex.as_str()
    }

    /// Value of the last match in `log`.
    pub fn extract(&self, log: &str) -> Option<f64> {
        self.regex.captures_iter(log).filter_map(|c| c.get(1)?.as_str().trim().parse().ok()).last()
    }

    pub fn evaluate(&self, log: &str) -> PerfRecord {
        let value = self.extract(log);
        let pass = match (value, self.reference) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(v), Some(r)) => within_tolerance(v, r, self.tolerance, self.direction),
        };
        PerfRecord {
            variable: self.name.clone(),
            value,
            unit: self.unit.clone(),
            reference: self.reference,
            tolerance: self.tolerance,
            direction: self.direction,
            pass,
        }
    }
}

fn check_tolerance(variable: &str, tolerance: f64) -> Result<(), PerfError> {
    if tolerance.is_finite() && tolerance >= 0.0 {
        Ok(())
    } else {
        Err(PerfError::Tolerance { variable: variable.into(), tolerance })
    }
}

impl TryFrom<PerfVariableDef> for PerfVariable {
    type Error = PerfError;

    fn try_from(d: PerfVariableDef) -> Result<Self, PerfError> {
        let regex = Regex::new(&d.pattern)
            .map_err(|e| PerfError::Pattern { variable: d.name.clone(), message: e.to_string() })?;
        let groups = regex.captures_len() - 1;
        if groups != 1 {
            return Err(PerfError::Pattern {
                variable: d.name,
                message: format!("pattern needs exactly one capture group, found {groups}"),
            });
        }
        check_tolerance(&d.name, d.tolerance)?;
        Ok(PerfVariable {
            name: d.name,
            unit: d.unit,
            reference: d.reference,
            tolerance: d.tolerance,
            direction: d.direction,
            regex,
        })
    }
}

impl From<PerfVariable> for PerfVariableDef {
    fn from(v: PerfVariable) -> Self {
        PerfVariableDef {
            pattern: v.regex.as_str().to_string(),
            name: v.name,
            unit: v.unit,
            reference: v.reference,
            tolerance: v.tolerance,
            direction: v.direction,
        }
    }
}

/// One extracted figure. `value == None` means the variable never matched.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfRecord {
    pub variable: String,
    pub value: Option<f64>,
    pub unit: String,
    pub reference: Option<f64>,
    pub tolerance: f64,
    pub direction: Direction,
    pub pass: bool,
}

impl PerfRecord {
    pub fn is_missing(&self) -> bool {
        self.value.is_none()
    }

    /// Recomputes the pass flag from the stored fields.
    pub fn recheck(&self) -> bool {
        match (self.value, self.reference) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(v), Some(r)) => within_tolerance(v, r, self.tolerance, self.direction),
        }
    }
}

pub fn extract_perf(log: &str, vars: &[PerfVariable]) -> Vec<PerfRecord> {
    vars.iter().map(|v| v.evaluate(log)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SanityOutcome {
    Pass,
    /// The first pattern that never matched.
    Fail(String),
}

impl SanityOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, SanityOutcome::Pass)
    }
}

/// Compiles sanity patterns; each is a regular expression.
pub fn compile_sanity(patterns: &[String]) -> Result<Vec<Regex>, regex::Error> {
    patterns.iter().map(|p| Regex::new(p)).collect()
}

pub fn check_sanity(log: &str, patterns: &[Regex]) -> SanityOutcome {
    match patterns.iter().find(|p| !p.is_match(log)) {
        Some(p) => SanityOutcome::Fail(p.as_str().to_string()),
        None => SanityOutcome::Pass,
    }
}
