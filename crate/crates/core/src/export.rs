//! CSV and JSON output for run reports.
//!
//! Floats are written with fixed precision so identical runs give
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gpac::ConsolidationStats;
use crate::sim::{RunReport, Summary};

pub const METRICS_HEADER: &str = "epoch,guest,accesses,near_resident_bytes,far_access_fraction,amat_ns,throughput_proxy,consolidation_ms,pages_consolidated,promoted_bytes,demoted_bytes,hot_pages,skewed_regions,near_utilization";
pub const MIGRATION_HEADER: &str = "epoch,guest,promoted_bytes,demoted_bytes,near_regions,far_regions";
pub const HEATMAP_HEADER: &str = "epoch,gpa_region,access_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub summary: Summary,
    pub consolidation: Vec<Option<ConsolidationStats>>,
    /// CDF points for k = 1..=512, per guest.
    pub cdf_before: Vec<Option<Vec<f64>>>,
    pub cdf_final: Vec<Option<Vec<f64>>>,
}

pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in &report.epochs {
        for (g, e) in m.guests.iter().enumerate() {
            writeln!(
                out,
                "{},{g},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{:.6}",
                m.epoch,
                e.accesses,
                e.near_resident_bytes,
                e.far_access_fraction,
                e.amat_ns,
                e.throughput_proxy,
                e.consolidation_ms,
                e.pages_consolidated,
                e.promoted_bytes,
                e.demoted_bytes,
                e.hot_pages,
                e.skewed_regions,
                m.near_utilization
            )
            .unwrap();
        }
    }
    out
}

pub fn migration_csv(report: &RunReport) -> String {
    let mut out = format!("{MIGRATION_HEADER}\n");
    for m in &report.epochs {
        for (g, e) in m.guests.iter().enumerate() {
            writeln!(out, "{},{g},{},{},{},{}", m.epoch, e.promoted_bytes, e.demoted_bytes, e.near_regions, e.far_regions)
                .unwrap();
        }
    }
    out
}

pub fn heatmap_csv(report: &RunReport, guest: usize) -> String {
    let mut out = format!("{HEATMAP_HEADER}\n");
    for c in &report.heatmaps[guest] {
        writeln!(out, "{},{},{}", c.epoch, c.gpa_region, c.access_count).unwrap();
    }
    out
}

pub fn summary_doc(report: &RunReport) -> SummaryDoc {
    let points = |v: &[Option<crate::telemetry::SkewnessCdf>]| v.iter().map(|c| c.as_ref().map(|c| c.points().to_vec())).collect();
    SummaryDoc {
        summary: report.summary.clone(),
        consolidation: report.consolidation.clone(),
        cdf_before: points(&report.cdf_before),
        cdf_final: points(&report.cdf_final),
    }
}

pub fn summary_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(&summary_doc(report)).expect("summary serialises") + "\n"
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text)?;
    written.push(p);
    Ok(())
}

/// Writes the requested formats into `dir`, creating it if needed, and
/// returns the files written.
pub fn export(report: &RunReport, dir: &Path, formats: &[Format]) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        write(dir, "metrics.csv", &metrics_csv(report), &mut written)?;
        write(dir, "migrations.csv", &migration_csv(report), &mut written)?;
        for g in 0..report.guest_count() {
            write(dir, &format!("heatmap_guest{g}.csv"), &heatmap_csv(report, g), &mut written)?;
            for (tag, cdf) in [("before", &report.cdf_before[g]), ("final", &report.cdf_final[g])] {
                let text = cdf.as_ref().map_or_else(|| "k,fraction\n".to_string(), |c| c.to_csv());
                write(dir, &format!("cdf_{tag}_guest{g}.csv"), &text, &mut written)?;
            }
            if let Some(log) = &report.gpac_logs[g] {
                write(dir, &format!("gpac_log_guest{g}.txt"), &log.to_text(), &mut written)?;
            }
        }
    }
    if formats.contains(&Format::Json) {
        write(dir, "summary.json", &summary_json(report), &mut written)?;
    }
    Ok(written)
}

pub fn export_all(report: &RunReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    export(report, dir, &[Format::Csv, Format::Json])
}
