//! Epoch loop, performance proxy and run reports.
//!
//! Each epoch runs, per guest: trace generation, accessed-bit scan, hotness
//! classification and, when scheduled, consolidation. Then one tiering step
//! covers all guests and metrics are recorded. Guests are independent until
//! the tiering step, so the per-guest phase may run in parallel; results are
//! merged in guest-index order and the run is deterministic either way.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::gpac::{ConsolidationLimit, ConsolidationStats, Consolidator, EventLog, GpacError};
use crate::mem::{GuestId, GuestMemory, HostTable, MemError, RegionId, RegionKey, Tier, BASE_PAGE_BYTES};
use crate::par::{self, Exec};
use crate::scenario::{ConfigError, GuestSpec, InitialPlacement, LatencyParams, Scenario, TelemetryParams};
use crate::telemetry::{classify_hot, scan_epoch, skewed_regions, skewness_cdf, AccessBitmap, HotnessReport, SkewnessCdf};
use crate::tiering::TieringEngine;
use crate::workload::Workload;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated at epoch {epoch}: {message}")]
    Invariant { epoch: u64, message: String },
}

fn violation(epoch: u64, message: impl ToString) -> SimError {
    SimError::Invariant { epoch, message: message.to_string() }
}

/// Average memory access time in nanoseconds.
pub fn amat(lat: &LatencyParams, walk_cost: f64, far_fraction: f64) -> f64 {
    lat.base_ns * walk_cost + (1.0 - far_fraction) * lat.near_ns + far_fraction * lat.far_ns
}

/// Per-guest measurements for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GuestEpoch {
    pub accesses: u64,
    /// Mapped base pages in near-resident regions, in bytes.
    pub near_resident_bytes: u64,
    pub far_access_fraction: f64,
    pub amat_ns: f64,
    /// All-near AMAT over this AMAT, scaled by the share of the epoch not
    /// spent on charged overhead.
    pub throughput_proxy: f64,
    pub consolidation_ms: f64,
    pub pages_consolidated: u64,
    pub promoted_bytes: u64,
    pub demoted_bytes: u64,
    pub near_regions: u64,
    pub far_regions: u64,
    pub hot_pages: u64,
    pub skewed_regions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub guests: Vec<GuestEpoch>,
    /// Occupied fraction of the near tier after the tiering step.
    pub near_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuestSummary {
    pub rss_bytes: u64,
    pub mean_near_residency_pct: f64,
    pub final_near_residency_pct: f64,
    pub mean_far_access_fraction: f64,
    pub mean_throughput_proxy: f64,
    pub promoted_bytes: u64,
    pub demoted_bytes: u64,
    pub consolidation_ms: f64,
    pub pages_consolidated: u64,
    pub final_near_regions: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub measure_from: u64,
    pub measured_epochs: u64,
    /// Near-resident share of total RSS, averaged over measured epochs.
    pub mean_near_residency_pct: f64,
    pub final_near_residency_pct: f64,
    /// Mean over measured epochs of the mean over guests.
    pub mean_throughput_proxy: f64,
    pub total_promoted_bytes: u64,
    pub total_demoted_bytes: u64,
    pub total_consolidation_ms: f64,
    pub guests: Vec<GuestSummary>,
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0u64), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl Summary {
    /// Derives the summary from the series alone. Traffic and consolidation
    /// totals cover every epoch; means cover epochs from `measure_from` on.
    pub fn from_series(series: &[EpochMetrics], rss_bytes: &[u64], measure_from: u64) -> Self {
        let measured: Vec<&EpochMetrics> = series.iter().filter(|m| m.epoch >= measure_from).collect();
        let total_rss: u64 = rss_bytes.iter().sum();
        let last = series.last();
        let guests: Vec<GuestSummary> = rss_bytes
            .iter()
            .enumerate()
            .map(|(g, &rss)| {
                let all = || series.iter().map(move |m| &m.guests[g]);
                let window = || measured.iter().map(move |m| &m.guests[g]);
                GuestSummary {
                    rss_bytes: rss,
                    mean_near_residency_pct: mean(window().map(|e| pct(e.near_resident_bytes, rss))),
                    final_near_residency_pct: last.map_or(0.0, |m| pct(m.guests[g].near_resident_bytes, rss)),
                    mean_far_access_fraction: mean(window().map(|e| e.far_access_fraction)),
                    mean_throughput_proxy: mean(window().map(|e| e.throughput_proxy)),
                    promoted_bytes: all().map(|e| e.promoted_bytes).sum(),
                    demoted_bytes: all().map(|e| e.demoted_bytes).sum(),
                    consolidation_ms: all().map(|e| e.consolidation_ms).sum(),
                    pages_consolidated: all().map(|e| e.pages_consolidated).sum(),
                    final_near_regions: last.map_or(0, |m| m.guests[g].near_regions),
                }
            })
            .collect();
        let near_total = |m: &EpochMetrics| m.guests.iter().map(|e| e.near_resident_bytes).sum::<u64>();
        Summary {
            measure_from,
            measured_epochs: measured.len() as u64,
            mean_near_residency_pct: mean(measured.iter().map(|m| pct(near_total(m), total_rss))),
            final_near_residency_pct: last.map_or(0.0, |m| pct(near_total(m), total_rss)),
            mean_throughput_proxy: mean(
                measured.iter().map(|m| mean(m.guests.iter().map(|e| e.throughput_proxy))),
            ),
            total_promoted_bytes: guests.iter().map(|g| g.promoted_bytes).sum(),
            total_demoted_bytes: guests.iter().map(|g| g.demoted_bytes).sum(),
            total_consolidation_ms: guests.iter().map(|g| g.consolidation_ms).sum(),
            guests,
        }
    }
}

/// One touched region in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatCell {
    pub epoch: u64,
    pub gpa_region: u64,
    pub access_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rss_bytes: Vec<u64>,
    pub epochs: Vec<EpochMetrics>,
    pub summary: Summary,
    /// Sparse per-guest heatmaps.
    pub heatmaps: Vec<Vec<HeatCell>>,
    /// Hot-page CDF at the first consolidation epoch, before consolidating.
    pub cdf_before: Vec<Option<SkewnessCdf>>,
    /// Hot-page CDF at the last epoch.
    pub cdf_final: Vec<Option<SkewnessCdf>>,
    pub consolidation: Vec<Option<ConsolidationStats>>,
    pub gpac_logs: Vec<Option<EventLog>>,
}

impl RunReport {
    pub fn guest_count(&self) -> usize {
        self.rss_bytes.len()
    }

    /// Recomputes the summary from the series and compares.
    pub fn summary_consistent(&self) -> bool {
        Summary::from_series(&self.epochs, &self.rss_bytes, self.summary.measure_from) == self.summary
    }
}

struct GuestState {
    id: GuestId,
    workload: Workload,
    mem: GuestMemory,
    window: VecDeque<AccessBitmap>,
    consolidator: Option<Consolidator>,
    /// Overhead not yet charged against an epoch, in ms.
    pending_ms: f64,
    heat: Vec<HeatCell>,
    cdf_before: Option<SkewnessCdf>,
    cdf_final: Option<SkewnessCdf>,
}

/// What one guest's independent phase produced in one epoch.
struct GuestPhase {
    hits: Vec<(RegionId, u64)>,
    accesses: u64,
    far_accesses: u64,
    hot_pages: u64,
    skewed: u64,
    consolidated: ConsolidationStats,
}

fn seed_for(scenario_seed: u64, guest: usize, workload_seed: u64) -> u64 {
    let mut z = scenario_seed ^ (guest as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) ^ workload_seed
}

pub fn run(scenario: &Scenario) -> Result<RunReport, SimError> {
    run_with(scenario, Exec::default())
}

pub fn run_with(scenario: &Scenario, exec: Exec) -> Result<RunReport, SimError> {
    scenario.validate()?;
    let tel = scenario.telemetry;
    let lat = scenario.latency;
    let walk = scenario.walk_cost();
    let amat_near = amat(&lat, walk, 0.0);
    let measure_from = scenario.measure_from();

    let mut guests = Vec::with_capacity(scenario.guests.len());
    for (i, g) in scenario.guests.iter().enumerate() {
        let mut spec = g.workload.clone();
        spec.rng_seed = seed_for(scenario.rng_seed, i, spec.rng_seed);
        let seed = spec.rng_seed;
        let workload = Workload::new(spec).map_err(|e| ConfigError::Invalid(format!("guest {i}: {e}")))?;
        let reserve = if g.cl.is_some() { g.reserve_regions() } else { 0 };
        let consolidator = g.cl.map(|cl| {
            let c = Consolidator::new(ConsolidationLimit::new(cl).expect("validated"), scenario.cost_model());
            match scenario.gpac_log_batches {
                Some(k) => c.with_log(k),
                None => c,
            }
        });
        guests.push(GuestState {
            id: GuestId(i as u32),
            mem: GuestMemory::new(GuestId(i as u32), g.workload.rss_pages, reserve, seed),
            workload,
            window: VecDeque::with_capacity(tel.window),
            consolidator,
            pending_ms: 0.0,
            heat: Vec::new(),
            cdf_before: None,
            cdf_final: None,
        });
    }

    let mut host = HostTable::new(&scenario.tier_config());
    for (i, g) in scenario.guests.iter().enumerate() {
        for r in 0..g.rss_regions() {
            place_new(&mut host, scenario.initial_placement, RegionKey::new(GuestId(i as u32), RegionId(r)))
                .map_err(|e| violation(0, e))?;
        }
    }
    let mut engine = TieringEngine::new(scenario.policy);
    let mut series = Vec::with_capacity(scenario.epochs as usize);

    for epoch in 0..scenario.epochs {
        let specs = &scenario.guests;
        let host_ref = &host;
        let phases = par::map_mut(exec, &mut guests, |i, st| guest_phase(st, &specs[i], host_ref, epoch, epoch + 1 == scenario.epochs, tel));
        let phases: Vec<GuestPhase> = phases.into_iter().collect::<Result<_, _>>().map_err(|e| violation(epoch, e))?;

        for st in &guests {
            if let Some(c) = &st.consolidator {
                for &r in c.targets() {
                    let key = RegionKey::new(st.id, r);
                    if host.lookup(key).is_none() {
                        place_new(&mut host, scenario.initial_placement, key).map_err(|e| violation(epoch, e))?;
                    }
                }
            }
        }

        let hits: Vec<(RegionKey, u64)> = guests
            .iter()
            .zip(&phases)
            .flat_map(|(st, p)| p.hits.iter().map(move |&(r, n)| (RegionKey::new(st.id, r), n)))
            .collect();
        let delta = engine.policy_step(epoch, &mut host, &hits).map_err(|e| violation(epoch, e))?;
        host.check_invariants().map_err(|e| violation(epoch, e))?;

        let mut region_tiers: BTreeMap<GuestId, (u64, u64)> = BTreeMap::new();
        for (k, p) in host.iter() {
            let e = region_tiers.entry(k.guest).or_default();
            match p.tier {
                Tier::Near => e.0 += 1,
                Tier::Far => e.1 += 1,
            }
        }

        let mut metrics = Vec::with_capacity(guests.len());
        for (st, p) in guests.iter_mut().zip(&phases) {
            let moved = delta.get(&st.id).copied().unwrap_or_default();
            let far_fraction = if p.accesses == 0 { 0.0 } else { p.far_accesses as f64 / p.accesses as f64 };
            let a = amat(&lat, walk, far_fraction);
            st.pending_ms += p.consolidated.modeled_time_ms;
            if lat.fold_migration_cost {
                st.pending_ms += moved.total_bytes() as f64 * lat.migration_ns_per_byte / 1e6;
            }
            let charged = st.pending_ms.min(lat.epoch_ms);
            st.pending_ms -= charged;
            let near_resident_pages: u64 = st
                .mem
                .gpt
                .region_counts()
                .filter(|(r, _)| host.tier_of(RegionKey::new(st.id, *r)) == Some(Tier::Near))
                .map(|(_, c)| c as u64)
                .sum();
            let (near_regions, far_regions) = region_tiers.get(&st.id).copied().unwrap_or_default();
            let m = GuestEpoch {
                accesses: p.accesses,
                near_resident_bytes: near_resident_pages * BASE_PAGE_BYTES,
                far_access_fraction: far_fraction,
                amat_ns: a,
                throughput_proxy: amat_near / a * (1.0 - charged / lat.epoch_ms),
                consolidation_ms: p.consolidated.modeled_time_ms,
                pages_consolidated: p.consolidated.pages_moved,
                promoted_bytes: moved.promoted_bytes,
                demoted_bytes: moved.demoted_bytes,
                near_regions,
                far_regions,
                hot_pages: p.hot_pages,
                skewed_regions: p.skewed,
            };
            if !(0.0..=1.0).contains(&m.far_access_fraction) || m.near_resident_bytes > st.mem.rss_pages() * BASE_PAGE_BYTES {
                return Err(violation(epoch, format!("guest {} metrics out of range: {m:?}", st.id)));
            }
            metrics.push(m);
        }
        let cap = host.capacity(Tier::Near);
        series.push(EpochMetrics {
            epoch,
            guests: metrics,
            near_utilization: if cap == 0 { 0.0 } else { host.placed(Tier::Near) as f64 / cap as f64 },
        });
    }

    let rss_bytes: Vec<u64> = guests.iter().map(|g| g.mem.rss_pages() * BASE_PAGE_BYTES).collect();
    let summary = Summary::from_series(&series, &rss_bytes, measure_from);
    Ok(RunReport {
        rss_bytes,
        epochs: series,
        summary,
        heatmaps: guests.iter_mut().map(|g| std::mem::take(&mut g.heat)).collect(),
        cdf_before: guests.iter_mut().map(|g| g.cdf_before.take()).collect(),
        cdf_final: guests.iter_mut().map(|g| g.cdf_final.take()).collect(),
        consolidation: guests.iter().map(|g| g.consolidator.as_ref().map(|c| c.stats)).collect(),
        gpac_logs: guests.iter_mut().map(|g| g.consolidator.as_mut().and_then(|c| c.log.take())).collect(),
    })
}

fn place_new(host: &mut HostTable, rule: InitialPlacement, key: RegionKey) -> Result<(), MemError> {
    let first = match rule {
        InitialPlacement::NearFirst if host.free_frames(Tier::Near) > 0 => Tier::Near,
        _ if host.free_frames(Tier::Far) > 0 => Tier::Far,
        _ => Tier::Near,
    };
    host.place(key, first).map(|_| ())
}

fn guest_phase(
    st: &mut GuestState,
    spec: &GuestSpec,
    host: &HostTable,
    epoch: u64,
    last: bool,
    tel: TelemetryParams,
) -> Result<GuestPhase, String> {
    let trace = st.workload.generate_epoch(epoch);
    let scan = scan_epoch(&trace, &st.mem.gpt).map_err(|e| format!("guest {}: {e}", st.id))?;
    let mut far_accesses = 0;
    for &(r, n) in &scan.region_hits {
        match host.tier_of(RegionKey::new(st.id, r)) {
            Some(Tier::Far) => far_accesses += n,
            Some(Tier::Near) => {}
            None => return Err(format!("guest {} accessed unplaced region {r}", st.id)),
        }
        st.heat.push(HeatCell { epoch, gpa_region: r.0, access_count: n });
    }
    if st.window.len() == tel.window {
        st.window.pop_front();
    }
    st.window.push_back(scan.guest);

    let report = if st.window.len() >= tel.k_of_w {
        classify_hot(st.window.make_contiguous(), tel.k_of_w, &st.mem.gpt)
    } else {
        HotnessReport::default()
    };
    let skewed = skewed_regions(&report, tel.skew_threshold).len() as u64;
    if epoch == spec.consolidation_epoch {
        st.cdf_before = skewness_cdf(&report).ok();
    }
    let mut consolidated = ConsolidationStats::default();
    if spec.consolidates_at(epoch) {
        if let Some(c) = st.consolidator.as_mut() {
            consolidated = c.run(&report, &mut st.mem).map_err(|e: GpacError| format!("guest {}: {e}", st.id))?;
        }
    }
    if last {
        st.cdf_final = skewness_cdf(&report).ok();
    }
    Ok(GuestPhase {
        hits: scan.region_hits,
        accesses: trace.len() as u64,
        far_accesses,
        hot_pages: report.hot_page_count() as u64,
        skewed,
        consolidated,
    })
}
