//! Published training throughputs for ResNet-50, CosmoFlow and DeepCAM
//! (global batch size 32), used as reference fixtures.
//!
//! Rows for accelerators without a compute/I-O split only carry the effective
//! throughput. One DeepCAM row is internally inconsistent
//! (54.1 x 54.1% is 29.3, not 15.4) and is flagged as an erratum.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub benchmark: &'static str,
    pub hardware: &'static str,
    pub units: &'static str,
    /// Inputs per second of compute time.
    pub compute_throughput: Option<f64>,
    /// Compute fraction in percent.
    pub compute_fraction_pct: Option<f64>,
    /// Inputs per second of total time.
    pub effective_throughput: f64,
    pub erratum: bool,
}

impl PublishedRow {
    /// Rows whose three numbers are expected to satisfy the metric identity.
    pub fn is_consistent(&self) -> bool {
        self.compute_throughput.is_some() && self.compute_fraction_pct.is_some() && !self.erratum
    }
}

const fn row(
    benchmark: &'static str,
    hardware: &'static str,
    units: &'static str,
    ct: f64,
    pct: f64,
    eff: f64,
) -> PublishedRow {
    PublishedRow {
        benchmark,
        hardware,
        units,
        compute_throughput: Some(ct),
        compute_fraction_pct: Some(pct),
        effective_throughput: eff,
        erratum: false,
    }
}

const fn effective_only(benchmark: &'static str, hardware: &'static str, units: &'static str, eff: f64) -> PublishedRow {
    PublishedRow {
        benchmark,
        hardware,
        units,
        compute_throughput: None,
        compute_fraction_pct: None,
        effective_throughput: eff,
        erratum: false,
    }
}

pub const PUBLISHED_ROWS: [PublishedRow; 15] = [
    row("ResNet-50", "ARCHER2 CPU", "4 CPU", 40.5, 98.9, 40.1),
    row("ResNet-50", "ARCHER2 MI210", "4 GPU", 293.2, 77.3, 226.6),
    row("ResNet-50", "Cirrus V100", "4 GPU", 138.0, 97.3, 134.3),
    row("ResNet-50", "EIDF A100", "4 GPU", 226.2, 79.4, 179.7),
    effective_only("ResNet-50", "Graphcore", "8 IPU", 255.6),
    effective_only("ResNet-50", "Cerebras CS-2", "1 WSE", 452.0),
    row("CosmoFlow", "ARCHER2 CPU", "4 CPU", 14.9, 98.9, 14.8),
    row("CosmoFlow", "ARCHER2 MI210", "4 GPU", 479.9, 15.1, 72.5),
    row("CosmoFlow", "Cirrus V100", "4 GPU", 112.2, 69.6, 78.1),
    row("CosmoFlow", "EIDF A100", "4 GPU", 117.9, 49.3, 58.1),
    effective_only("CosmoFlow", "Graphcore (half precision)", "8 IPU", 14.5),
    row("DeepCAM", "ARCHER2 CPU", "8 CPU", 6.1, 98.7, 6.1),
    row("DeepCAM", "ARCHER2 MI210", "4 GPU", 26.4, 55.0, 14.5),
    PublishedRow { erratum: true, ..row("DeepCAM", "Cirrus V100", "4 GPU", 54.1, 54.1, 15.4) },
    row("DeepCAM", "EIDF A100", "4 GPU", 101.7, 13.5, 13.7),
];

/// Absolute tolerance, in inputs/s, for reproducing a published effective
/// throughput from the rounded compute throughput and percentage.
pub const IDENTITY_TOLERANCE: f64 = 0.15;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_classes() {
        assert_eq!(PUBLISHED_ROWS.iter().filter(|r| r.is_consistent()).count(), 11);
        assert_eq!(PUBLISHED_ROWS.iter().filter(|r| r.erratum).count(), 1);
        assert_eq!(PUBLISHED_ROWS.iter().filter(|r| r.compute_throughput.is_none()).count(), 3);
    }
}
