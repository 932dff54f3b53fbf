//! Accessed-bit style hotness tracking.
//!
//! The guest view is per GVA base page; the host view is per GPA huge region
//! and is obtained by projecting the guest bits through the guest page table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::mem::{GpaPage, GuestPageTable, GvaPage, PageSize, RegionId, PAGES_PER_REGION};
use crate::workload::AccessTrace;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TelemetryError {
    #[error("trace references unmapped guest page {0}")]
    UnmappedAddress(GvaPage),
    #[error("hotness report has no hot regions")]
    EmptyReport,
}

/// Set of pages (or regions) whose accessed bit was set during one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessBitmap {
    pub epoch: u64,
    pub granularity: PageSize,
    bits: Vec<u64>,
}

impl AccessBitmap {
    pub fn new(epoch: u64, granularity: PageSize, mut bits: Vec<u64>) -> Self {
        bits.sort_unstable();
        bits.dedup();
        Self { epoch, granularity, bits }
    }

    pub fn contains(&self, index: u64) -> bool {
        self.bits.binary_search(&index).is_ok()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Set indices in ascending order.
    pub fn bits(&self) -> &[u64] {
        &self.bits
    }
}

/// Result of replaying one epoch's trace against the accessed bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochScan {
    pub guest: AccessBitmap,
    pub host: AccessBitmap,
    /// Accesses per touched GPA region, ascending by region.
    pub region_hits: Vec<(RegionId, u64)>,
}

/// Marks every accessed GVA page and the GPA region it currently maps into.
/// Bits start cleared each epoch.
pub fn scan_epoch(trace: &AccessTrace, gpt: &GuestPageTable) -> Result<EpochScan, TelemetryError> {
    let mut pages = Vec::with_capacity(trace.len());
    let mut hits: BTreeMap<u64, u64> = BTreeMap::new();
    for a in &trace.accesses {
        let gpa = gpt.translate(a.gva).ok_or(TelemetryError::UnmappedAddress(a.gva))?;
        pages.push(a.gva.0);
        *hits.entry(gpa.region().0).or_default() += 1;
    }
    let regions = hits.keys().copied().collect();
    Ok(EpochScan {
        guest: AccessBitmap::new(trace.epoch, PageSize::Base4K, pages),
        host: AccessBitmap::new(trace.epoch, PageSize::Huge2M, regions),
        region_hits: hits.into_iter().map(|(r, n)| (RegionId(r), n)).collect(),
    })
}

/// Hot base pages over a telemetry window and their distribution over regions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HotnessReport {
    pub window: Range<u64>,
    /// The hot page list handed to the consolidation filter, ascending by GVA,
    /// each with the GPA it mapped to when the report was built.
    pub hot_base_pages: Vec<(GvaPage, GpaPage)>,
    pub per_region_hot_count: BTreeMap<RegionId, u32>,
    pub hot_regions: BTreeSet<RegionId>,
}

impl HotnessReport {
    pub fn hot_page_count(&self) -> usize {
        self.hot_base_pages.len()
    }
}

/// A page is hot when its bit is set in at least `k_of_w` of the given bitmaps.
/// The window length is the number of bitmaps passed in.
///
/// Hot pages that are no longer mapped are dropped.
pub fn classify_hot(window: &[AccessBitmap], k_of_w: usize, gpt: &GuestPageTable) -> HotnessReport {
    assert!(k_of_w >= 1 && k_of_w <= window.len().max(1), "k_of_w must lie in [1, W]");
    let mut all: Vec<u64> = window.iter().flat_map(|b| b.bits().iter().copied()).collect();
    all.sort_unstable();
    let mut report = HotnessReport {
        window: match (window.first(), window.last()) {
            (Some(f), Some(l)) => f.epoch.min(l.epoch)..f.epoch.max(l.epoch) + 1,
            _ => 0..0,
        },
        ..HotnessReport::default()
    };
    for run in all.chunk_by(|a, b| a == b) {
        if run.len() < k_of_w {
            continue;
        }
        let gva = GvaPage(run[0]);
        let Some(gpa) = gpt.translate(gva) else { continue };
        report.hot_base_pages.push((gva, gpa));
        *report.per_region_hot_count.entry(gpa.region()).or_default() += 1;
    }
    report.hot_regions = report.per_region_hot_count.keys().copied().collect();
    report
}

/// Fraction of hot regions with at most `k` hot base pages, for `k` in 1..=512.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewnessCdf {
    points: Vec<f64>,
}

impl SkewnessCdf {
    /// `k` in 1..=512.
    pub fn at(&self, k: u32) -> f64 {
        self.points[(k as usize).clamp(1, PAGES_PER_REGION as usize) - 1]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,fraction\n");
        for (i, f) in self.points.iter().enumerate() {
            let _ = writeln!(out, "{},{:.6}", i + 1, f);
        }
        out
    }
}

pub fn skewness_cdf(report: &HotnessReport) -> Result<SkewnessCdf, TelemetryError> {
    let counts: Vec<u32> = report.per_region_hot_count.values().copied().filter(|&c| c > 0).collect();
    cdf_of_counts(&counts)
}

pub(crate) fn cdf_of_counts(counts: &[u32]) -> Result<SkewnessCdf, TelemetryError> {
    if counts.is_empty() {
        return Err(TelemetryError::EmptyReport);
    }
    let mut hist = vec![0u64; PAGES_PER_REGION as usize + 1];
    for &c in counts {
        hist[(c as usize).min(PAGES_PER_REGION as usize)] += 1;
    }
    let total = counts.len() as f64;
    let mut acc = 0u64;
    let points = (1..=PAGES_PER_REGION as usize)
        .map(|k| {
            acc += hist[k];
            acc as f64 / total
        })
        .collect();
    Ok(SkewnessCdf { points })
}

/// CDF of a raw trace: every page touched in any epoch is hot, over an
/// identity mapping sized to the largest page touched.
pub fn trace_cdf(traces: &[AccessTrace]) -> Result<SkewnessCdf, TelemetryError> {
    let max = traces.iter().flat_map(|t| t.accesses.iter().map(|a| a.gva.0)).max();
    let Some(max) = max else { return Err(TelemetryError::EmptyReport) };
    let gpt = GuestPageTable::identity((max + 1).next_multiple_of(PAGES_PER_REGION));
    let window = traces.iter().map(|t| scan_epoch(t, &gpt).map(|s| s.guest)).collect::<Result<Vec<_>, _>>()?;
    skewness_cdf(&classify_hot(&window, 1, &gpt))
}

/// Hot regions with fewer than `skew_threshold` hot base pages.
pub fn skewed_regions(report: &HotnessReport, skew_threshold: u32) -> BTreeSet<RegionId> {
    report
        .per_region_hot_count
        .iter()
        .filter(|(_, &c)| c >= 1 && c < skew_threshold)
        .map(|(r, _)| *r)
        .collect()
}
