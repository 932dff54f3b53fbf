//! Guest physical address consolidation.
//!
//! Hot base pages that sit in sparsely hot regions are copied into freshly
//! allocated 2 MB regions and their GVAs remapped, so that the host sees a few
//! densely hot huge pages instead of many sparsely hot ones. The host is not
//! involved: only guest mappings change.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{GpaPage, GuestMemory, GvaPage, MemError, RegionId, PAGES_PER_REGION};
use crate::telemetry::HotnessReport;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GpacError {
    #[error("consolidation limit {0} outside [1, 512]")]
    InvalidLimit(u32),
    #[error("batch of {0} pages outside [1, 512]")]
    BatchSize(usize),
    #[error("consolidation target allocation failed")]
    OutOfMemory,
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// Regions with fewer than this many hot base pages are consolidation sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ConsolidationLimit(u32);

impl ConsolidationLimit {
    pub fn new(cl: u32) -> Result<Self, GpacError> {
        if (1..=PAGES_PER_REGION as u32).contains(&cl) {
            Ok(Self(cl))
        } else {
            Err(GpacError::InvalidLimit(cl))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for ConsolidationLimit {
    type Error = GpacError;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ConsolidationLimit> for u32 {
    fn from(cl: ConsolidationLimit) -> u32 {
        cl.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConsolidationPlan {
    pub selected_pages: Vec<GvaPage>,
    pub batches: Vec<Vec<GvaPage>>,
}

impl ConsolidationPlan {
    pub fn is_empty(&self) -> bool {
        self.selected_pages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsolidationStats {
    pub pages_moved: u64,
    pub regions_created: u64,
    pub modeled_time_ms: f64,
    pub invocations: u64,
    pub failures: u64,
}

impl std::ops::AddAssign for ConsolidationStats {
    fn add_assign(&mut self, o: Self) {
        self.pages_moved += o.pages_moved;
        self.regions_created += o.regions_created;
        self.modeled_time_ms += o.modeled_time_ms;
        self.invocations += o.invocations;
        self.failures += o.failures;
    }
}

/// Linear cost of moving base pages (copy, remap and TLB flush together).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_page_us: f64,
}

impl CostModel {
    pub const DEFAULT_PER_PAGE_US: f64 = 8.5;

    /// The constant minimising the worst relative error over measured
    /// `(pages, milliseconds)` pairs: the harmonic mean of the extreme per-page costs.
    pub fn calibrate_minimax(samples: &[(u64, f64)]) -> Option<Self> {
        let per_page = samples.iter().filter(|(p, _)| *p > 0).map(|&(p, ms)| ms * 1000.0 / p as f64);
        let (lo, hi) = per_page.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c), hi.max(c)));
        lo.is_finite().then(|| Self { per_page_us: 2.0 * lo * hi / (lo + hi) })
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self { per_page_us: Self::DEFAULT_PER_PAGE_US }
    }
}

/// Modeled consolidation time in milliseconds.
pub fn consolidation_cost(pages: u64, model: &CostModel) -> f64 {
    pages as f64 * model.per_page_us / 1000.0
}

/// Selects every hot page whose region has between 1 and `cl - 1` hot pages,
/// skipping regions that are themselves consolidation targets. Pages are
/// ordered by (region, GPA) and packed greedily into batches of 512.
pub fn filter_scattered(
    report: &HotnessReport,
    cl: ConsolidationLimit,
    targets: &BTreeSet<RegionId>,
) -> ConsolidationPlan {
    let mut candidates: Vec<(GpaPage, GvaPage)> = report
        .hot_base_pages
        .iter()
        .filter(|(_, gpa)| {
            let r = gpa.region();
            let count = report.per_region_hot_count.get(&r).copied().unwrap_or(0);
            count >= 1 && count < cl.get() && !targets.contains(&r)
        })
        .map(|&(gva, gpa)| (gpa, gva))
        .collect();
    candidates.sort_unstable();
    let selected_pages: Vec<GvaPage> = candidates.into_iter().map(|(_, gva)| gva).collect();
    let batches = selected_pages.chunks(PAGES_PER_REGION as usize).map(<[GvaPage]>::to_vec).collect();
    ConsolidationPlan { selected_pages, batches }
}

/// One step of the consolidation routine, kept for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsolidationEvent {
    PageAlloc { batch: usize, region: Option<RegionId> },
    LockPage { batch: usize, page: GpaPage },
    Memcpy { batch: usize, from: GpaPage, to: GpaPage },
    SetPte { batch: usize, gva: GvaPage, to: GpaPage },
    FlushTlb { batch: usize, gva: GvaPage },
    UnlockPage { batch: usize, page: GpaPage },
    Free { batch: usize, page: GpaPage },
}

impl fmt::Display for ConsolidationEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ConsolidationEvent::*;
        match self {
            PageAlloc { batch, region: Some(r) } => write!(f, "batch {batch}: page_alloc(HPAGE_SIZE) -> region {r}"),
            PageAlloc { batch, region: None } => write!(f, "batch {batch}: page_alloc(HPAGE_SIZE) -> NULL, -ENOMEM"),
            LockPage { batch, page } => write!(f, "batch {batch}: lock_page({page})"),
            Memcpy { batch, from, to } => write!(f, "batch {batch}: memcpy({to}, {from})"),
            SetPte { batch, gva, to } => write!(f, "batch {batch}: set_pte_at({gva} -> {to})"),
            FlushTlb { batch, gva } => write!(f, "batch {batch}: flush_tlb_mm_range({gva}, +PAGE_SIZE)"),
            UnlockPage { batch, page } => write!(f, "batch {batch}: unlock_page({page})"),
            Free { batch, page } => write!(f, "batch {batch}: free({page})"),
        }
    }
}

/// Records the steps of the first `max_batches` consolidation calls.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventLog {
    pub max_batches: usize,
    batches_seen: usize,
    pub events: Vec<ConsolidationEvent>,
}

impl EventLog {
    pub fn new(max_batches: usize) -> Self {
        Self { max_batches, ..Self::default() }
    }

    fn begin_batch(&mut self) -> Option<usize> {
        let b = self.batches_seen;
        self.batches_seen += 1;
        (b < self.max_batches).then_some(b)
    }

    pub fn to_text(&self) -> String {
        self.events.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Moves one batch of at most 512 pages into a fresh region of the guest's
/// consolidation reserve. Page `i` of the batch lands at offset `i`.
///
/// Fails without touching any mapping if a page is unmapped or the reserve is
/// exhausted.
pub fn consolidate_pages(
    batch: &[GvaPage],
    guest: &mut GuestMemory,
    targets: &mut BTreeSet<RegionId>,
    cost: &CostModel,
    mut log: Option<&mut EventLog>,
) -> Result<ConsolidationStats, GpacError> {
    if batch.is_empty() || batch.len() > PAGES_PER_REGION as usize {
        return Err(GpacError::BatchSize(batch.len()));
    }
    let old_pages = batch.iter().map(|&g| guest.gpt.translate_checked(g)).collect::<Result<Vec<_>, _>>()?;
    let logged = log.as_deref_mut().and_then(EventLog::begin_batch);
    let mut emit = |e: ConsolidationEvent| {
        if let (Some(l), Some(_)) = (log.as_deref_mut(), logged) {
            l.events.push(e);
        }
    };
    let b = logged.unwrap_or(0);
    let region = match guest.reserve.alloc_region(&guest.gpt) {
        Ok(r) => r,
        Err(_) => {
            emit(ConsolidationEvent::PageAlloc { batch: b, region: None });
            return Err(GpacError::OutOfMemory);
        }
    };
    emit(ConsolidationEvent::PageAlloc { batch: b, region: Some(region) });
    for (i, (&gva, &old)) in batch.iter().zip(&old_pages).enumerate() {
        let new = region.page(i as u64);
        // Locking is a no-op in a single-threaded model; it is only logged.
        emit(ConsolidationEvent::LockPage { batch: b, page: old });
        emit(ConsolidationEvent::LockPage { batch: b, page: new });
        guest.contents.copy(old, new);
        emit(ConsolidationEvent::Memcpy { batch: b, from: old, to: new });
        guest.gpt.remap(gva, new)?;
        emit(ConsolidationEvent::SetPte { batch: b, gva, to: new });
        emit(ConsolidationEvent::FlushTlb { batch: b, gva });
        emit(ConsolidationEvent::UnlockPage { batch: b, page: new });
        emit(ConsolidationEvent::UnlockPage { batch: b, page: old });
        guest.contents.write(old, 0);
        guest.free_pages.push(old);
        emit(ConsolidationEvent::Free { batch: b, page: old });
    }
    targets.insert(region);
    Ok(ConsolidationStats {
        pages_moved: batch.len() as u64,
        regions_created: 1,
        modeled_time_ms: consolidation_cost(batch.len() as u64, cost),
        invocations: 1,
        failures: 0,
    })
}

/// Per-guest consolidation state: the limit, cost model and the set of regions
/// created as targets, which are never consolidated again.
#[derive(Debug, Clone)]
pub struct Consolidator {
    pub cl: ConsolidationLimit,
    pub cost: CostModel,
    targets: BTreeSet<RegionId>,
    pub stats: ConsolidationStats,
    pub log: Option<EventLog>,
}

impl Consolidator {
    pub fn new(cl: ConsolidationLimit, cost: CostModel) -> Self {
        Self { cl, cost, targets: BTreeSet::new(), stats: ConsolidationStats::default(), log: None }
    }

    pub fn with_log(mut self, max_batches: usize) -> Self {
        self.log = Some(EventLog::new(max_batches));
        self
    }

    pub fn targets(&self) -> &BTreeSet<RegionId> {
        &self.targets
    }

    pub fn plan(&self, report: &HotnessReport) -> ConsolidationPlan {
        filter_scattered(report, self.cl, &self.targets)
    }

    /// Filters `report` and consolidates every batch. Batches that fail
    /// allocation are skipped and counted.
    pub fn run(&mut self, report: &HotnessReport, guest: &mut GuestMemory) -> Result<ConsolidationStats, GpacError> {
        let plan = self.plan(report);
        let mut delta = ConsolidationStats::default();
        for batch in &plan.batches {
            match consolidate_pages(batch, guest, &mut self.targets, &self.cost, self.log.as_mut()) {
                Ok(s) => delta += s,
                Err(GpacError::OutOfMemory) => {
                    delta.invocations += 1;
                    delta.failures += 1;
                }
                Err(e) => return Err(e),
            }
        }
        self.stats += delta;
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{content_token, GuestId, GuestPageTable};
    use crate::telemetry::classify_hot;
    use crate::telemetry::AccessBitmap;
    use crate::mem::PageSize;

    fn cl(v: u32) -> ConsolidationLimit {
        ConsolidationLimit::new(v).unwrap()
    }

    /// Report with `counts[i]` hot pages at the start of region `i`, identity mapped.
    fn report(gpt: &GuestPageTable, counts: &[u32]) -> HotnessReport {
        let mut bits = Vec::new();
        for (r, &c) in counts.iter().enumerate() {
            bits.extend((0..c as u64).map(|o| r as u64 * 512 + o));
        }
        classify_hot(&[AccessBitmap::new(0, PageSize::Base4K, bits)], 1, gpt)
    }

    #[test]
    fn limit_bounds() {
        assert!(ConsolidationLimit::new(0).is_err());
        assert!(ConsolidationLimit::new(513).is_err());
        assert_eq!(cl(512).get(), 512);
    }

    #[test]
    fn filter_is_strict() {
        let gpt = GuestPageTable::identity(512 * 3);
        let plan = filter_scattered(&report(&gpt, &[5, 20, 300]), cl(20), &BTreeSet::new());
        assert_eq!(plan.selected_pages, (0..5).map(GvaPage).collect::<Vec<_>>());
        assert_eq!(plan.batches.len(), 1);
    }

    #[test]
    fn filter_cl_one_is_empty() {
        let gpt = GuestPageTable::identity(512 * 3);
        assert!(filter_scattered(&report(&gpt, &[1, 2, 3]), cl(1), &BTreeSet::new()).is_empty());
    }

    #[test]
    fn filter_batches_of_512() {
        let gpt = GuestPageTable::identity(512 * 128);
        let plan = filter_scattered(&report(&gpt, &[8; 128]), cl(9), &BTreeSet::new());
        assert_eq!(plan.selected_pages.len(), 1024);
        assert_eq!(plan.batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![512, 512]);
    }

    #[test]
    fn filter_skips_targets() {
        let gpt = GuestPageTable::identity(512 * 3);
        let targets: BTreeSet<_> = [RegionId(0)].into();
        let plan = filter_scattered(&report(&gpt, &[5, 6]), cl(20), &targets);
        assert_eq!(plan.selected_pages.len(), 6);
    }

    fn guest(regions: u64, reserve: u64) -> GuestMemory {
        GuestMemory::new(GuestId(0), regions * 512, reserve, 77)
    }

    #[test]
    fn full_batch_lands_in_one_region() {
        let mut g = guest(512, 2);
        // one page from each of 512 regions
        let batch: Vec<GvaPage> = (0..512).map(|r| GvaPage(r * 512 + 3)).collect();
        let mut targets = BTreeSet::new();
        let s = consolidate_pages(&batch, &mut g, &mut targets, &CostModel::default(), None).unwrap();
        assert_eq!(s.pages_moved, 512);
        let target = RegionId(512);
        assert_eq!(g.gpt.region_count(target), 512);
        for r in 0..512 {
            assert_eq!(g.gpt.region_count(RegionId(r)), 511);
        }
        for (i, gva) in batch.iter().enumerate() {
            assert_eq!(g.gpt.translate(*gva), Some(target.page(i as u64)));
        }
        assert_eq!(targets, [target].into());
        assert_eq!(g.free_pages.len(), 512);
    }

    #[test]
    fn single_page_keeps_content() {
        let mut g = guest(4, 1);
        let gva = GvaPage(1000);
        let before = g.contents.read(g.gpt.translate(gva).unwrap());
        assert_eq!(before, content_token(77, gva));
        consolidate_pages(&[gva], &mut g, &mut BTreeSet::new(), &CostModel::default(), None).unwrap();
        let gpa = g.gpt.translate(gva).unwrap();
        assert_eq!(gpa.region(), RegionId(4));
        assert_eq!(g.gpt.region_count(RegionId(4)), 1);
        assert_eq!(g.contents.read(gpa), before);
    }

    #[test]
    fn out_of_memory_is_atomic() {
        let mut g = guest(4, 0);
        let before: Vec<_> = g.gpt.iter().collect();
        let r = consolidate_pages(&[GvaPage(1), GvaPage(600)], &mut g, &mut BTreeSet::new(), &CostModel::default(), None);
        assert_eq!(r, Err(GpacError::OutOfMemory));
        assert_eq!(g.gpt.iter().collect::<Vec<_>>(), before);
    }

    #[test]
    fn unmapped_page_is_atomic() {
        let mut g = guest(4, 1);
        let r = consolidate_pages(&[GvaPage(1), GvaPage(99_999)], &mut g, &mut BTreeSet::new(), &CostModel::default(), None);
        assert!(matches!(r, Err(GpacError::Mem(MemError::GuestUnmapped(_)))));
        assert_eq!(g.gpt.translate(GvaPage(1)), Some(GpaPage(1)));
        assert_eq!(g.reserve.remaining(), 1);
    }

    #[test]
    fn batch_size_checked() {
        let mut g = guest(4, 1);
        assert_eq!(
            consolidate_pages(&[], &mut g, &mut BTreeSet::new(), &CostModel::default(), None),
            Err(GpacError::BatchSize(0))
        );
    }

    #[test]
    fn run_counts_failures() {
        let mut g = guest(128, 1);
        let r = report(&g.gpt, &[8; 128]);
        let mut c = Consolidator::new(cl(9), CostModel::default());
        let s = c.run(&r, &mut g).unwrap();
        assert_eq!(s.invocations, 2);
        assert_eq!(s.failures, 1);
        assert_eq!(s.regions_created, s.invocations - s.failures);
        assert_eq!(s.pages_moved, 512);
    }

    #[test]
    fn event_log_follows_routine() {
        let mut g = guest(8, 2);
        let r = report(&g.gpt, &[2, 1]);
        let mut c = Consolidator::new(cl(10), CostModel::default()).with_log(1);
        c.run(&r, &mut g).unwrap();
        let text = c.log.as_ref().unwrap().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "batch 0: page_alloc(HPAGE_SIZE) -> region 8");
        assert_eq!(lines.len(), 1 + 3 * 8);
        assert!(lines[3].starts_with("batch 0: memcpy("));
        assert!(lines.last().unwrap().starts_with("batch 0: free("));
    }

    #[test]
    fn cost_model_values() {
        let nine = CostModel { per_page_us: 9.0 };
        assert!((consolidation_cost(4142, &nine) - 37.278).abs() < 1e-9);
        assert!((consolidation_cost(950_758, &nine) - 8556.822).abs() < 1e-6);
        assert_eq!(consolidation_cost(0, &CostModel::default()), 0.0);
        // paper-reported rows stay inside the declared bands with the 9 us constant
        assert!((37.278f64 / 36.0 - 1.0).abs() < 0.15);
        assert!((8556.822f64 / 7329.0 - 1.0).abs() < 0.20);
    }

    #[test]
    fn minimax_calibration() {
        let c = CostModel::calibrate_minimax(&[(1000, 7.0), (1000, 11.0)]).unwrap();
        assert!((c.per_page_us - 2.0 * 7.0 * 11.0 / 18.0).abs() < 1e-12);
        assert!(CostModel::calibrate_minimax(&[]).is_none());
    }
}
