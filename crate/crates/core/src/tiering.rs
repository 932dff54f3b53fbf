//! Host-side tiering over 2 MB regions.
//!
//! Three policy families are modeled on top of the same region hotness
//! history. None of them can see inside a huge page: a region is hot as soon
//! as any of its base pages is touched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::mem::{Direction, GuestId, HostTable, MemError, RegionKey, Tier, HUGE_PAGE_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyVariant {
    /// Periodic user-space tiering that runs with or without pressure.
    Memtierd,
    /// Promote on first touch, demote only under pressure.
    Tpp,
    /// Like TPP but only a rotating sample of regions is examined per epoch.
    Autonuma,
}

impl std::str::FromStr for PolicyVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "memtierd" => Ok(Self::Memtierd),
            "tpp" => Ok(Self::Tpp),
            "autonuma" => Ok(Self::Autonuma),
            other => Err(format!("unknown policy {other:?} (expected memtierd, tpp or autonuma)")),
        }
    }
}

fn d_watermark() -> f64 {
    0.1
}
fn d_one() -> u64 {
    1
}
fn d_window() -> usize {
    4
}
fn d_k() -> usize {
    2
}
fn d_age() -> u64 {
    3
}
fn d_sample() -> f64 {
    0.125
}
fn d_start() -> u64 {
    9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyKind {
    pub variant: PolicyVariant,
    /// Free near-tier fraction the pressure-driven variants keep available.
    #[serde(default = "d_watermark")]
    pub watermark_fraction: f64,
    #[serde(default = "d_one")]
    pub scan_period: u64,
    /// Region is hot when touched in `promotion_k` of the last `promotion_window` epochs.
    #[serde(default = "d_window")]
    pub promotion_window: usize,
    #[serde(default = "d_k")]
    pub promotion_k: usize,
    /// Epochs without access after which a near region counts as cold.
    #[serde(default = "d_age")]
    pub demotion_age: u64,
    #[serde(default = "d_sample")]
    pub sample_fraction: f64,
    /// First epoch at which the policy acts.
    #[serde(default = "d_start")]
    pub start_epoch: u64,
}

impl PolicyKind {
    pub fn new(variant: PolicyVariant) -> Self {
        Self {
            variant,
            watermark_fraction: d_watermark(),
            scan_period: d_one(),
            promotion_window: d_window(),
            promotion_k: d_k(),
            demotion_age: d_age(),
            sample_fraction: d_sample(),
            start_epoch: d_start(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.watermark_fraction > 0.0 && self.watermark_fraction <= 1.0) {
            return Err("watermark_fraction must lie in (0, 1]".into());
        }
        if self.scan_period == 0 {
            return Err("scan_period must be at least 1".into());
        }
        if !(1..=32).contains(&self.promotion_window) || !(1..=self.promotion_window).contains(&self.promotion_k) {
            return Err("promotion rule needs 1 <= k <= window <= 32".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err("sample_fraction must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Promotion and demotion traffic for one guest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MigrationStats {
    pub promoted_bytes: u64,
    pub demoted_bytes: u64,
}

impl MigrationStats {
    fn record(&mut self, d: Direction) {
        match d {
            Direction::Promotion => self.promoted_bytes += HUGE_PAGE_BYTES,
            Direction::Demotion => self.demoted_bytes += HUGE_PAGE_BYTES,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.promoted_bytes + self.demoted_bytes
    }
}

impl std::ops::AddAssign for MigrationStats {
    fn add_assign(&mut self, o: Self) {
        self.promoted_bytes += o.promoted_bytes;
        self.demoted_bytes += o.demoted_bytes;
    }
}

/// Migrates `key` and charges the move to its guest.
pub fn migrate(
    host: &mut HostTable,
    key: RegionKey,
    to: Tier,
    stats: &mut BTreeMap<GuestId, MigrationStats>,
) -> Result<Option<Direction>, MemError> {
    let d = host.migrate(key, to)?;
    if let Some(d) = d {
        stats.entry(key.guest).or_default().record(d);
    }
    Ok(d)
}

#[derive(Debug, Clone, Default)]
struct RegionHistory {
    /// Bit `i` set when the region was touched `i` epochs ago.
    touched: u32,
    /// Accesses in each of the last `window` epochs, newest at `head`.
    counts: Vec<u64>,
    head: usize,
    window_hits: u64,
    last_access: Option<u64>,
}

impl RegionHistory {
    fn new(window: usize) -> Self {
        Self { counts: vec![0; window], ..Self::default() }
    }

    fn advance(&mut self, epoch: u64, hits: u64) {
        self.touched <<= 1;
        self.head = (self.head + 1) % self.counts.len();
        self.window_hits -= self.counts[self.head];
        self.counts[self.head] = hits;
        self.window_hits += hits;
        if hits > 0 {
            self.touched |= 1;
            self.last_access = Some(epoch);
        }
    }

    fn touched_now(&self) -> bool {
        self.touched & 1 == 1
    }

    fn hot(&self, window: usize, k: usize) -> bool {
        let mask = if window >= 32 { u32::MAX } else { (1u32 << window) - 1 };
        (self.touched & mask).count_ones() as usize >= k
    }

    fn idle_for(&self, epoch: u64) -> u64 {
        self.last_access.map_or(u64::MAX, |e| epoch - e)
    }
}

/// Region hotness history plus the policy that acts on it.
#[derive(Debug, Clone)]
pub struct TieringEngine {
    pub policy: PolicyKind,
    history: BTreeMap<RegionKey, RegionHistory>,
    cursor: usize,
    stats: BTreeMap<GuestId, MigrationStats>,
}

impl TieringEngine {
    pub fn new(policy: PolicyKind) -> Self {
        Self { policy, history: BTreeMap::new(), cursor: 0, stats: BTreeMap::new() }
    }

    /// Cumulative traffic per guest.
    pub fn stats(&self) -> &BTreeMap<GuestId, MigrationStats> {
        &self.stats
    }

    pub fn window_hits(&self, key: RegionKey) -> u64 {
        self.history.get(&key).map_or(0, |h| h.window_hits)
    }

    /// Records one epoch of host-visible accesses, then runs the policy if it
    /// is scheduled. `hits` must be sorted and unique by key. Returns the
    /// traffic this step generated per guest.
    pub fn policy_step(
        &mut self,
        epoch: u64,
        host: &mut HostTable,
        hits: &[(RegionKey, u64)],
    ) -> Result<BTreeMap<GuestId, MigrationStats>, MemError> {
        self.observe(epoch, host, hits);
        let mut delta = BTreeMap::new();
        let p = self.policy;
        if epoch < p.start_epoch || !(epoch - p.start_epoch).is_multiple_of(p.scan_period) {
            return Ok(delta);
        }
        match p.variant {
            PolicyVariant::Memtierd => self.memtierd(epoch, host, &mut delta)?,
            PolicyVariant::Tpp => {
                let candidates: Vec<RegionKey> =
                    self.history.iter().filter(|(_, h)| h.touched_now()).map(|(k, _)| *k).collect();
                self.pressure_driven(epoch, host, &candidates, &mut delta)?;
            }
            PolicyVariant::Autonuma => {
                let keys: Vec<RegionKey> = self.history.keys().copied().collect();
                let n = ((keys.len() as f64 * p.sample_fraction).ceil() as usize).clamp(1, keys.len().max(1));
                let candidates: Vec<RegionKey> = (0..n.min(keys.len()))
                    .map(|i| keys[(self.cursor + i) % keys.len()])
                    .filter(|k| self.history[k].touched_now())
                    .collect();
                self.cursor = if keys.is_empty() { 0 } else { (self.cursor + n) % keys.len() };
                self.pressure_driven(epoch, host, &candidates, &mut delta)?;
            }
        }
        for (g, d) in &delta {
            *self.stats.entry(*g).or_default() += *d;
        }
        Ok(delta)
    }

    fn observe(&mut self, epoch: u64, host: &HostTable, hits: &[(RegionKey, u64)]) {
        let window = self.policy.promotion_window;
        for (key, _) in host.iter() {
            self.history.entry(key).or_insert_with(|| RegionHistory::new(window));
        }
        let mut it = hits.iter().peekable();
        for (key, h) in self.history.iter_mut() {
            while it.peek().is_some_and(|(k, _)| k < key) {
                it.next();
            }
            let n = match it.peek() {
                Some((k, n)) if k == key => *n,
                _ => 0,
            };
            h.advance(epoch, n);
        }
    }

    /// Hotter first by windowed access count, then lower key.
    fn by_heat(&self, keys: &mut [RegionKey]) {
        keys.sort_by(|a, b| self.history[b].window_hits.cmp(&self.history[a].window_hits).then(a.cmp(b)));
    }

    /// Least recently touched first, ties by higher key.
    fn by_coldness(&self, keys: &mut [RegionKey]) {
        keys.sort_by(|a, b| {
            let la = self.history[a].last_access;
            let lb = self.history[b].last_access;
            la.cmp(&lb).then(b.cmp(a))
        });
    }

    fn in_tier(&self, host: &HostTable, tier: Tier) -> Vec<RegionKey> {
        host.iter().filter(|(_, p)| p.tier == tier).map(|(k, _)| k).collect()
    }

    fn memtierd(
        &mut self,
        epoch: u64,
        host: &mut HostTable,
        delta: &mut BTreeMap<GuestId, MigrationStats>,
    ) -> Result<(), MemError> {
        let p = self.policy;
        let mut cold: Vec<RegionKey> = self
            .in_tier(host, Tier::Near)
            .into_iter()
            .filter(|k| self.history[k].idle_for(epoch) >= p.demotion_age)
            .collect();
        self.by_coldness(&mut cold);
        let room = host.free_frames(Tier::Far) as usize;
        cold.truncate(room);
        for &k in &cold {
            migrate(host, k, Tier::Far, delta)?;
        }
        let cold: std::collections::BTreeSet<RegionKey> = cold.into_iter().collect();
        let mut hot: Vec<RegionKey> = self
            .in_tier(host, Tier::Far)
            .into_iter()
            .filter(|k| self.history[k].hot(p.promotion_window, p.promotion_k) && !cold.contains(k))
            .collect();
        self.by_heat(&mut hot);
        for k in hot {
            if host.free_frames(Tier::Near) == 0 {
                break;
            }
            migrate(host, k, Tier::Near, delta)?;
        }
        Ok(())
    }

    /// Reclaims near memory down to the watermark, then promotes far-resident
    /// candidates while frames remain. Regions demoted in this step are not
    /// promoted back in the same step.
    fn pressure_driven(
        &mut self,
        _epoch: u64,
        host: &mut HostTable,
        candidates: &[RegionKey],
        delta: &mut BTreeMap<GuestId, MigrationStats>,
    ) -> Result<(), MemError> {
        let cap = host.capacity(Tier::Near);
        let target_free = ((cap as f64 * self.policy.watermark_fraction).ceil() as u64).min(cap);
        let mut demoted = std::collections::BTreeSet::new();
        if host.free_frames(Tier::Near) < target_free {
            let mut victims = self.in_tier(host, Tier::Near);
            self.by_coldness(&mut victims);
            for k in victims {
                if host.free_frames(Tier::Near) >= target_free || host.free_frames(Tier::Far) == 0 {
                    break;
                }
                migrate(host, k, Tier::Far, delta)?;
                demoted.insert(k);
            }
        }
        let mut promote: Vec<RegionKey> = candidates
            .iter()
            .copied()
            .filter(|k| host.tier_of(*k) == Some(Tier::Far) && !demoted.contains(k))
            .collect();
        self.by_heat(&mut promote);
        for k in promote {
            if host.free_frames(Tier::Near) == 0 {
                break;
            }
            migrate(host, k, Tier::Near, delta)?;
        }
        Ok(())
    }
}
