use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PerfRecord;

/// One line of the per-suite perf report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReportRow {
    pub instance: String,
    pub variable: String,
    pub value: Option<f64>,
    pub unit: String,
    pub reference: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl PerfReportRow {
    pub fn new(instance: &str, record: &PerfRecord) -> Self {
        Self {
            instance: instance.to_string(),
            variable: record.variable.clone(),
            value: record.value,
            unit: record.unit.clone(),
            reference: record.reference,
            tolerance: record.tolerance,
            pass: record.pass,
        }
    }
}

/// Writes the rows as CSV with a header line. Missing values and references
/// are empty fields.
pub fn write_csv(path: &Path, rows: &[PerfReportRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["instance", "variable", "value", "unit", "reference", "tolerance", "pass"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a report written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<PerfReportRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

fn opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |v| v.to_string())
}

/// Fixed-width table for the terminal.
pub fn render_table(rows: &[PerfReportRow]) -> String {
    let header = ["INSTANCE", "VARIABLE", "VALUE", "UNIT", "REFERENCE", "RESULT"].map(str::to_string);
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.instance.clone(),
                r.variable.clone(),
                opt(r.value, "missing"),
                r.unit.clone(),
                r.reference.map_or_else(|| "-".into(), |v| format!("{v} ±{}%", r.tolerance * 100.0)),
                if r.pass { "pass" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    let mut widths = header.clone().map(|h| h.chars().count());
    for cells in &body {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for cells in std::iter::once(&header).chain(&body) {
        let line: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf::{Direction, PerfVariable};

    fn rows() -> Vec<PerfReportRow> {
        let v = PerfVariable::new("tp", r"tp: (\S+)", "inputs/s")
            .unwrap()
            .with_reference(226.2, 0.05, Direction::HigherIsBetter)
            .unwrap();
        vec![
            PerfReportRow::new("A_n=1", &v.evaluate("tp: 226.2")),
            PerfReportRow::new("B", &v.evaluate("")),
        ]
    }

    #[test]
    fn csv_has_one_line_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perf.csv");
        write_csv(&path, &rows()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "instance,variable,value,unit,reference,tolerance,pass\n\
             A_n=1,tp,226.2,inputs/s,226.2,0.05,true\n\
             B,tp,,inputs/s,226.2,0.05,false\n"
        );
        assert_eq!(read_csv(&path).unwrap(), rows());
        write_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert!(read_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn table_is_aligned() {
        let t = render_table(&rows());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("226.2") && lines[1].ends_with("pass"));
        assert!(lines[2].contains("missing") && lines[2].ends_with("FAIL"));
        assert_eq!(lines[0].find("VARIABLE"), lines[1].find("tp"));
    }
}
