//! Scenario files.
//!
//! A scenario is a TOML document whose keys are exactly the fields below.
//! Unknown keys anywhere in the tree are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gpac::{ConsolidationLimit, CostModel};
use crate::mem::{walk_cost, PageSize, TierConfig, TierSpec, WssLabel, HUGE_PAGE_BYTES, PAGES_PER_REGION};
use crate::tiering::PolicyKind;
use crate::workload::{Workload, WorkloadKind, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario is not valid TOML for this schema: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn d_consolidation_epoch() -> u64 {
    5
}
fn d_reserve() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestSpec {
    pub workload: WorkloadSpec,
    /// Consolidation limit; absent means consolidation is disabled for this guest.
    #[serde(default)]
    pub cl: Option<u32>,
    #[serde(default = "d_consolidation_epoch")]
    pub consolidation_epoch: u64,
    /// Re-run consolidation every this many epochs after the first run.
    #[serde(default)]
    pub consolidation_period: Option<u64>,
    /// Consolidation reserve as a fraction of RSS.
    #[serde(default = "d_reserve")]
    pub reserve_fraction: f64,
}

impl GuestSpec {
    pub fn new(workload: WorkloadSpec) -> Self {
        Self {
            workload,
            cl: None,
            consolidation_epoch: d_consolidation_epoch(),
            consolidation_period: None,
            reserve_fraction: d_reserve(),
        }
    }

    pub fn rss_regions(&self) -> u64 {
        self.workload.rss_pages.div_ceil(PAGES_PER_REGION)
    }

    pub fn reserve_regions(&self) -> u64 {
        (self.workload.rss_pages as f64 * self.reserve_fraction / PAGES_PER_REGION as f64).ceil() as u64
    }

    pub fn consolidates_at(&self, epoch: u64) -> bool {
        if self.cl.is_none() || epoch < self.consolidation_epoch {
            return false;
        }
        let since = epoch - self.consolidation_epoch;
        since == 0 || self.consolidation_period.is_some_and(|p| since.is_multiple_of(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierCapacity {
    pub near_bytes: u64,
    pub far_bytes: u64,
}

fn d_epoch_ms() -> f64 {
    10_000.0
}
fn d_ns_per_byte() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    pub near_ns: f64,
    pub far_ns: f64,
    /// Translation cost per access before scaling by the walk-cost factor.
    #[serde(default)]
    pub base_ns: f64,
    /// Modeled wall-clock length of one epoch; consolidation time is charged against it.
    #[serde(default = "d_epoch_ms")]
    pub epoch_ms: f64,
    /// Charge migration traffic against the epoch as well.
    #[serde(default)]
    pub fold_migration_cost: bool,
    #[serde(default = "d_ns_per_byte")]
    pub migration_ns_per_byte: f64,
}

impl LatencyParams {
    pub fn new(near_ns: f64, far_ns: f64, base_ns: f64) -> Self {
        Self {
            near_ns,
            far_ns,
            base_ns,
            epoch_ms: d_epoch_ms(),
            fold_migration_cost: false,
            migration_ns_per_byte: d_ns_per_byte(),
        }
    }
}

fn d_w() -> usize {
    4
}
fn d_k() -> usize {
    2
}
fn d_skew() -> u32 {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryParams {
    #[serde(default = "d_w")]
    pub window: usize,
    #[serde(default = "d_k")]
    pub k_of_w: usize,
    #[serde(default = "d_skew")]
    pub skew_threshold: u32,
}

impl Default for TelemetryParams {
    fn default() -> Self {
        Self { window: d_w(), k_of_w: d_k(), skew_threshold: d_skew() }
    }
}

fn d_guest_size() -> PageSize {
    PageSize::Base4K
}
fn d_host_size() -> PageSize {
    PageSize::Huge2M
}
fn d_wss() -> WssLabel {
    WssLabel::Gb64
}

/// Page sizes used only to pick the walk-cost factor; placement is always 2 MB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageSizes {
    #[serde(default = "d_guest_size")]
    pub guest: PageSize,
    #[serde(default = "d_host_size")]
    pub host: PageSize,
    #[serde(default = "d_wss")]
    pub wss: WssLabel,
}

impl Default for PageSizes {
    fn default() -> Self {
        Self { guest: d_guest_size(), host: d_host_size(), wss: d_wss() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPlacement {
    /// Every region starts in the far tier.
    #[default]
    Far,
    /// Guests fill the near tier in index order, then spill to far.
    NearFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub epochs: u64,
    #[serde(default)]
    pub rng_seed: u64,
    pub guests: Vec<GuestSpec>,
    pub tiers: TierCapacity,
    pub latency: LatencyParams,
    #[serde(default)]
    pub telemetry: TelemetryParams,
    #[serde(default)]
    pub page_sizes: PageSizes,
    pub policy: PolicyKind,
    #[serde(default)]
    pub initial_placement: InitialPlacement,
    /// First epoch included in summary means; defaults to the earliest
    /// consolidation epoch across guests.
    #[serde(default)]
    pub measure_from: Option<u64>,
    #[serde(default)]
    pub consolidation_cost_us: Option<f64>,
    /// Keep a step-by-step consolidation log for the first this many batches per guest.
    #[serde(default)]
    pub gpac_log_batches: Option<usize>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario file. Relative trace paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut s: Scenario = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for g in &mut s.guests {
            if let WorkloadKind::Trace { path } = &mut g.workload.kind {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn tier_config(&self) -> TierConfig {
        TierConfig {
            near: TierSpec { capacity_bytes: self.tiers.near_bytes, latency_ns: self.latency.near_ns },
            far: TierSpec { capacity_bytes: self.tiers.far_bytes, latency_ns: self.latency.far_ns },
        }
    }

    pub fn cost_model(&self) -> CostModel {
        self.consolidation_cost_us.map_or_else(CostModel::default, |per_page_us| CostModel { per_page_us })
    }

    pub fn walk_cost(&self) -> f64 {
        walk_cost(self.page_sizes.guest, self.page_sizes.host, self.page_sizes.wss).expect("validated")
    }

    pub fn measure_from(&self) -> u64 {
        self.measure_from
            .unwrap_or_else(|| self.guests.iter().map(|g| g.consolidation_epoch).min().unwrap_or(0))
    }

    /// Turns consolidation on for every guest with limit `cl`.
    pub fn set_cl(&mut self, cl: u32) {
        for g in &mut self.guests {
            g.cl = Some(cl);
        }
    }

    pub fn disable_gpac(&mut self) {
        for g in &mut self.guests {
            g.cl = None;
        }
    }

    pub fn total_rss_bytes(&self) -> u64 {
        self.guests.iter().map(|g| g.workload.rss_pages).sum::<u64>() * crate::mem::BASE_PAGE_BYTES
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.guests.is_empty() {
            return Err(invalid("at least one guest is required"));
        }
        let t = self.telemetry;
        if t.window == 0 || t.k_of_w == 0 || t.k_of_w > t.window {
            return Err(invalid("telemetry needs 1 <= k_of_w <= window"));
        }
        if !(1..=512).contains(&t.skew_threshold) {
            return Err(invalid("skew_threshold must lie in [1, 512]"));
        }
        let l = self.latency;
        if !(l.near_ns > 0.0 && l.far_ns > 0.0 && l.base_ns >= 0.0 && l.epoch_ms > 0.0 && l.migration_ns_per_byte >= 0.0) {
            return Err(invalid("latencies must be positive and base_ns, migration cost non-negative"));
        }
        walk_cost(self.page_sizes.guest, self.page_sizes.host, self.page_sizes.wss)
            .map_err(|e| invalid(e.to_string()))?;
        self.policy.validate().map_err(ConfigError::Invalid)?;
        if let Some(c) = self.consolidation_cost_us {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(invalid("consolidation_cost_us must be non-negative"));
            }
        }
        let mut needed_regions = 0;
        for (i, g) in self.guests.iter().enumerate() {
            Workload::new(g.workload.clone()).map_err(|e| invalid(format!("guest {i}: {e}")))?;
            if let Some(cl) = g.cl {
                ConsolidationLimit::new(cl).map_err(|e| invalid(format!("guest {i}: {e}")))?;
            }
            if g.consolidation_period == Some(0) {
                return Err(invalid(format!("guest {i}: consolidation_period must be at least 1")));
            }
            if !(0.0..=4.0).contains(&g.reserve_fraction) {
                return Err(invalid(format!("guest {i}: reserve_fraction must lie in [0, 4]")));
            }
            needed_regions += g.rss_regions() + if g.cl.is_some() { g.reserve_regions() } else { 0 };
        }
        let cfg = self.tier_config();
        let have = cfg.near.capacity_regions() + cfg.far.capacity_regions();
        if needed_regions > have {
            return Err(invalid(format!(
                "guests need {needed_regions} regions of {} MiB (RSS plus consolidation reserve) but the tiers hold {have}",
                HUGE_PAGE_BYTES >> 20
            )));
        }
        Ok(())
    }
}
