use std::path::Path;

use serde::{Deserialize, Serialize};
use uma_core::digest::sha256_hex;
use uma_core::verify::{GenerativeReport, RobustnessReport, CSV_HEADER};

use crate::manifest::Manifest;
use crate::CliError;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeEntry {
    pub eps: String,
    pub report: GenerativeReport,
}

/// Mean per-image L1 between reconstructions and ground truth on the retain set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainL1 {
    pub original: f64,
    pub unlearned: f64,
}

impl RetainL1 {
    pub fn relative_change(&self) -> f64 {
        (self.unlearned - self.original).abs() / self.original
    }
}

/// Everything the verify stage records for one unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub robustness: RobustnessReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generative: Vec<GenerativeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain_l1: Option<RetainL1>,
}

/// CSV text with [`CSV_HEADER`] columns.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Fixed-width table of the same rows.
pub fn table_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn report_rows(reports: &[RunReport]) -> Vec<Vec<String>> {
    reports.iter().flat_map(|r| r.robustness.csv_rows()).collect()
}

/// Renders `report.csv` and `report.txt` from the verified run reports of an
/// artifact directory. Nothing is written unless every digest checks out.
pub fn render_report(dir: &Path) -> Result<RenderedReport, CliError> {
    let manifest = Manifest::load(dir)?;
    if manifest.reports.is_empty() {
        return Err(CliError::Integrity("the manifest lists no run reports".into()));
    }
    for (rel, a) in &manifest.artifacts {
        if a.stage != "report" {
            manifest.verify_file(dir, rel)?;
        }
    }
    let mut reports = Vec::with_capacity(manifest.reports.len());
    for rel in &manifest.reports {
        let bytes = manifest.verify_file(dir, rel)?;
        let r: RunReport =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Integrity(format!("{rel}: {e}")))?;
        reports.push(r);
    }
    let rendered = RenderedReport::new(&reports);
    std::fs::write(dir.join(REPORT_CSV), &rendered.csv).map_err(|e| CliError::stage("report", e))?;
    std::fs::write(dir.join(REPORT_TXT), &rendered.table).map_err(|e| CliError::stage("report", e))?;
    Ok(rendered)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub csv: String,
    pub table: String,
    pub rows: usize,
}

impl RenderedReport {
    pub fn new(reports: &[RunReport]) -> Self {
        let rows = report_rows(reports);
        Self { csv: csv_text(&CSV_HEADER, &rows), table: table_text(&CSV_HEADER, &rows), rows: rows.len() }
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.csv.as_bytes())
    }
}
