//! Guest and host address spaces.
//!
//! The guest page table maps guest virtual pages (GVA) to guest physical
//! pages (GPA) at base-page granularity. The host maps each 2 MB GPA region
//! onto a frame in one of two tiers. GPA and HVA are treated as the same
//! address, so the host table is keyed directly by GPA region.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BASE_PAGE_BYTES: u64 = 4096;
pub const HUGE_PAGE_BYTES: u64 = 2 * 1024 * 1024;
/// Base pages per huge page. Also the largest batch one consolidation call accepts.
pub const PAGES_PER_REGION: u64 = HUGE_PAGE_BYTES / BASE_PAGE_BYTES;

const UNMAPPED: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageSize {
    #[serde(rename = "4K")]
    Base4K,
    #[serde(rename = "2M")]
    Huge2M,
}

impl PageSize {
    pub const fn bytes(self) -> u64 {
        match self {
            PageSize::Base4K => BASE_PAGE_BYTES,
            PageSize::Huge2M => HUGE_PAGE_BYTES,
        }
    }
}

impl fmt::Display for PageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PageSize::Base4K => f.write_str("4K"),
            PageSize::Huge2M => f.write_str("2M"),
        }
    }
}

macro_rules! index_newtype {
    ($(#[$m:meta])* $name:ident($inner:ty)) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

index_newtype!(
    /// Guest virtual page number.
    GvaPage(u64)
);
index_newtype!(
    /// Guest physical base page number.
    GpaPage(u64)
);
index_newtype!(
    /// Index of a 2 MB-aligned GPA region (`gpa / 512`).
    RegionId(u64)
);
index_newtype!(GuestId(u32));
index_newtype!(FrameId(u32));

impl GpaPage {
    pub const fn region(self) -> RegionId {
        RegionId(self.0 / PAGES_PER_REGION)
    }

    pub const fn offset_in_region(self) -> u32 {
        (self.0 % PAGES_PER_REGION) as u32
    }
}

impl RegionId {
    pub const fn page(self, offset: u64) -> GpaPage {
        GpaPage(self.0 * PAGES_PER_REGION + offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("mapping {gva} -> {gpa} conflicts with an existing mapping")]
    AlreadyMapped { gva: GvaPage, gpa: GpaPage },
    #[error("guest virtual page {0} is not mapped")]
    GuestUnmapped(GvaPage),
    #[error("region {region} of guest {guest} has no host placement")]
    HostUnmapped { guest: GuestId, region: RegionId },
    #[error("region {region} of guest {guest} is already placed")]
    AlreadyPlaced { guest: GuestId, region: RegionId },
    #[error("no walk cost is tabulated for host {host} / guest {guest} at {wss}")]
    UnknownConfiguration { guest: PageSize, host: PageSize, wss: WssLabel },
    #[error("consolidation reserve exhausted")]
    OutOfMemory,
    #[error("{0} tier has no free frame")]
    DestinationFull(Tier),
}

/// Guest virtual to guest physical mappings at base-page granularity.
#[derive(Debug, Clone, Default)]
pub struct GuestPageTable {
    forward: Vec<u64>,
    reverse: Vec<u64>,
    region_counts: Vec<u32>,
    mapped: usize,
}

impl GuestPageTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps `gva i -> gpa i` for every `i < pages`.
    pub fn identity(pages: u64) -> Self {
        let mut gpt = Self::new();
        gpt.forward = (0..pages).collect();
        gpt.reverse = gpt.forward.clone();
        let regions = pages.div_ceil(PAGES_PER_REGION);
        gpt.region_counts = vec![PAGES_PER_REGION as u32; regions as usize];
        if !pages.is_multiple_of(PAGES_PER_REGION) {
            if let Some(last) = gpt.region_counts.last_mut() {
                *last = (pages % PAGES_PER_REGION) as u32;
            }
        }
        gpt.mapped = pages as usize;
        gpt
    }

    fn slot(v: &[u64], i: u64) -> u64 {
        v.get(i as usize).copied().unwrap_or(UNMAPPED)
    }

    fn set_slot(v: &mut Vec<u64>, i: u64, value: u64) {
        let i = i as usize;
        if i >= v.len() {
            v.resize(i + 1, UNMAPPED);
        }
        v[i] = value;
    }

    fn bump_region(&mut self, gpa: GpaPage, up: bool) {
        let r = gpa.region().0 as usize;
        if r >= self.region_counts.len() {
            self.region_counts.resize(r + 1, 0);
        }
        if up {
            self.region_counts[r] += 1;
        } else {
            self.region_counts[r] -= 1;
        }
    }

    pub fn map(&mut self, gva: GvaPage, gpa: GpaPage) -> Result<(), MemError> {
        if Self::slot(&self.forward, gva.0) != UNMAPPED || Self::slot(&self.reverse, gpa.0) != UNMAPPED {
            return Err(MemError::AlreadyMapped { gva, gpa });
        }
        Self::set_slot(&mut self.forward, gva.0, gpa.0);
        Self::set_slot(&mut self.reverse, gpa.0, gva.0);
        self.bump_region(gpa, true);
        self.mapped += 1;
        Ok(())
    }

    pub fn unmap(&mut self, gva: GvaPage) -> Result<GpaPage, MemError> {
        let gpa = self.translate(gva).ok_or(MemError::GuestUnmapped(gva))?;
        self.forward[gva.0 as usize] = UNMAPPED;
        self.reverse[gpa.0 as usize] = UNMAPPED;
        self.bump_region(gpa, false);
        self.mapped -= 1;
        Ok(gpa)
    }

    /// Points `gva` at `new_gpa`, returning the page it previously used.
    /// The old GPA page becomes unmapped.
    pub fn remap(&mut self, gva: GvaPage, new_gpa: GpaPage) -> Result<GpaPage, MemError> {
        let old = self.translate(gva).ok_or(MemError::GuestUnmapped(gva))?;
        if Self::slot(&self.reverse, new_gpa.0) != UNMAPPED {
            return Err(MemError::AlreadyMapped { gva, gpa: new_gpa });
        }
        self.reverse[old.0 as usize] = UNMAPPED;
        self.bump_region(old, false);
        self.forward[gva.0 as usize] = new_gpa.0;
        Self::set_slot(&mut self.reverse, new_gpa.0, gva.0);
        self.bump_region(new_gpa, true);
        Ok(old)
    }

    pub fn translate(&self, gva: GvaPage) -> Option<GpaPage> {
        match Self::slot(&self.forward, gva.0) {
            UNMAPPED => None,
            gpa => Some(GpaPage(gpa)),
        }
    }

    pub fn translate_checked(&self, gva: GvaPage) -> Result<GpaPage, MemError> {
        self.translate(gva).ok_or(MemError::GuestUnmapped(gva))
    }

    /// The GVA currently mapped onto `gpa`, if any.
    pub fn owner(&self, gpa: GpaPage) -> Option<GvaPage> {
        match Self::slot(&self.reverse, gpa.0) {
            UNMAPPED => None,
            gva => Some(GvaPage(gva)),
        }
    }

    /// Number of mapped base pages inside `region`.
    pub fn region_count(&self, region: RegionId) -> u32 {
        self.region_counts.get(region.0 as usize).copied().unwrap_or(0)
    }

    /// Regions holding at least one mapped page, with their counts.
    pub fn region_counts(&self) -> impl Iterator<Item = (RegionId, u32)> + '_ {
        self.region_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(r, &c)| (RegionId(r as u64), c))
    }

    pub fn len(&self) -> usize {
        self.mapped
    }

    pub fn is_empty(&self) -> bool {
        self.mapped == 0
    }

    /// Mappings in ascending GVA order.
    pub fn iter(&self) -> impl Iterator<Item = (GvaPage, GpaPage)> + '_ {
        self.forward
            .iter()
            .enumerate()
            .filter(|(_, &g)| g != UNMAPPED)
            .map(|(v, &g)| (GvaPage(v as u64), GpaPage(g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Near,
    Far,
}

impl Tier {
    const fn slot(self) -> usize {
        match self {
            Tier::Near => 0,
            Tier::Far => 1,
        }
    }

    pub const fn other(self) -> Tier {
        match self {
            Tier::Near => Tier::Far,
            Tier::Far => Tier::Near,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tier::Near => f.write_str("near"),
            Tier::Far => f.write_str("far"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub capacity_bytes: u64,
    pub latency_ns: f64,
}

impl TierSpec {
    pub const fn capacity_regions(&self) -> u64 {
        self.capacity_bytes / HUGE_PAGE_BYTES
    }
}

/// One near and one far tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub near: TierSpec,
    pub far: TierSpec,
}

impl TierConfig {
    pub fn spec(&self, tier: Tier) -> &TierSpec {
        match tier {
            Tier::Near => &self.near,
            Tier::Far => &self.far,
        }
    }
}

/// Per-tier free lists of host huge frames.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    free: [Vec<FrameId>; 2],
    is_free: [Vec<bool>; 2],
    capacity: [u32; 2],
    allocated: [u64; 2],
    freed: [u64; 2],
}

impl FrameAllocator {
    pub fn new(tiers: &TierConfig) -> Self {
        let list = |n: u64| (0..n as u32).rev().map(FrameId).collect::<Vec<_>>();
        let near = tiers.near.capacity_regions();
        let far = tiers.far.capacity_regions();
        Self {
            free: [list(near), list(far)],
            is_free: [vec![true; near as usize], vec![true; far as usize]],
            capacity: [near as u32, far as u32],
            allocated: [0; 2],
            freed: [0; 2],
        }
    }

    pub fn alloc(&mut self, tier: Tier) -> Option<FrameId> {
        let frame = self.free[tier.slot()].pop()?;
        self.is_free[tier.slot()][frame.0 as usize] = false;
        self.allocated[tier.slot()] += 1;
        Some(frame)
    }

    pub fn free(&mut self, tier: Tier, frame: FrameId) {
        let slot = &mut self.is_free[tier.slot()][frame.0 as usize];
        assert!(!*slot, "double free of {tier} frame {frame}");
        *slot = true;
        self.free[tier.slot()].push(frame);
        self.freed[tier.slot()] += 1;
    }

    pub fn free_frames(&self, tier: Tier) -> u64 {
        self.free[tier.slot()].len() as u64
    }

    pub fn capacity(&self, tier: Tier) -> u64 {
        u64::from(self.capacity[tier.slot()])
    }

    /// Frames handed out and not yet returned.
    pub fn in_use(&self, tier: Tier) -> u64 {
        self.allocated[tier.slot()] - self.freed[tier.slot()]
    }

    fn is_free(&self, tier: Tier, frame: FrameId) -> bool {
        self.is_free[tier.slot()].get(frame.0 as usize).copied().unwrap_or(false)
    }
}

/// A host-visible 2 MB region: which guest it belongs to and its GPA region index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionKey {
    pub guest: GuestId,
    pub region: RegionId,
}

impl RegionKey {
    pub const fn new(guest: GuestId, region: RegionId) -> Self {
        Self { guest, region }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub tier: Tier,
    pub frame: FrameId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Promotion,
    Demotion,
}

/// Host physical location of a guest base page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostLocation {
    pub tier: Tier,
    pub frame: FrameId,
    pub offset: u32,
}

/// GPA region to host frame placements. Always huge-page granular.
#[derive(Debug, Clone)]
pub struct HostTable {
    placements: BTreeMap<RegionKey, Placement>,
    frames: FrameAllocator,
    placed: [u64; 2],
}

impl HostTable {
    pub fn new(tiers: &TierConfig) -> Self {
        Self { placements: BTreeMap::new(), frames: FrameAllocator::new(tiers), placed: [0; 2] }
    }

    pub fn place(&mut self, key: RegionKey, tier: Tier) -> Result<Placement, MemError> {
        if self.placements.contains_key(&key) {
            return Err(MemError::AlreadyPlaced { guest: key.guest, region: key.region });
        }
        let frame = self.frames.alloc(tier).ok_or(MemError::DestinationFull(tier))?;
        let placement = Placement { tier, frame };
        self.placements.insert(key, placement);
        self.placed[tier.slot()] += 1;
        Ok(placement)
    }

    pub fn lookup(&self, key: RegionKey) -> Option<Placement> {
        self.placements.get(&key).copied()
    }

    pub fn tier_of(&self, key: RegionKey) -> Option<Tier> {
        self.placements.get(&key).map(|p| p.tier)
    }

    /// Moves a region to `to`. Returns `None` when it already lives there.
    pub fn migrate(&mut self, key: RegionKey, to: Tier) -> Result<Option<Direction>, MemError> {
        let current = self
            .placements
            .get(&key)
            .copied()
            .ok_or(MemError::HostUnmapped { guest: key.guest, region: key.region })?;
        if current.tier == to {
            return Ok(None);
        }
        let frame = self.frames.alloc(to).ok_or(MemError::DestinationFull(to))?;
        self.frames.free(current.tier, current.frame);
        self.placements.insert(key, Placement { tier: to, frame });
        self.placed[current.tier.slot()] -= 1;
        self.placed[to.slot()] += 1;
        Ok(Some(match to {
            Tier::Near => Direction::Promotion,
            Tier::Far => Direction::Demotion,
        }))
    }

    pub fn placed(&self, tier: Tier) -> u64 {
        self.placed[tier.slot()]
    }

    pub fn free_frames(&self, tier: Tier) -> u64 {
        self.frames.free_frames(tier)
    }

    pub fn capacity(&self, tier: Tier) -> u64 {
        self.frames.capacity(tier)
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RegionKey, Placement)> + '_ {
        self.placements.iter().map(|(k, p)| (*k, *p))
    }

    pub fn frames(&self) -> &FrameAllocator {
        &self.frames
    }

    /// Checks frame uniqueness, capacity and counter consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        let mut counted = [0u64; 2];
        for (key, p) in &self.placements {
            if !seen.insert((p.tier, p.frame)) {
                return Err(format!("{} frame {} backs more than one region (one is {key:?})", p.tier, p.frame));
            }
            if self.frames.is_free(p.tier, p.frame) {
                return Err(format!("{} frame {} is both free and placed", p.tier, p.frame));
            }
            counted[p.tier.slot()] += 1;
        }
        for tier in [Tier::Near, Tier::Far] {
            let s = tier.slot();
            if counted[s] != self.placed[s] || counted[s] != self.frames.in_use(tier) {
                return Err(format!(
                    "{tier} tier accounting mismatch: placements {} counter {} allocator {}",
                    counted[s],
                    self.placed[s],
                    self.frames.in_use(tier)
                ));
            }
            if counted[s] > self.frames.capacity(tier) {
                return Err(format!("{tier} tier over capacity"));
            }
        }
        Ok(())
    }
}

/// Composes the guest walk with the host placement lookup.
pub fn full_translate(
    gpt: &GuestPageTable,
    host: &HostTable,
    guest: GuestId,
    gva: GvaPage,
) -> Result<HostLocation, MemError> {
    let gpa = gpt.translate_checked(gva)?;
    let region = gpa.region();
    let p = host
        .lookup(RegionKey::new(guest, region))
        .ok_or(MemError::HostUnmapped { guest, region })?;
    Ok(HostLocation { tier: p.tier, frame: p.frame, offset: gpa.offset_in_region() })
}

/// Working-set size columns of the walk-cost table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WssLabel {
    #[serde(rename = "32GB")]
    Gb32,
    #[serde(rename = "64GB")]
    Gb64,
    #[serde(rename = "256GB")]
    Gb256,
}

impl fmt::Display for WssLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WssLabel::Gb32 => "32GB",
            WssLabel::Gb64 => "64GB",
            WssLabel::Gb256 => "256GB",
        })
    }
}

/// TLB-miss walk cost relative to huge pages at both levels.
///
/// Host base pages under guest huge pages has no tabulated value and is refused.
pub fn walk_cost(guest: PageSize, host: PageSize, wss: WssLabel) -> Result<f64, MemError> {
    let col = match wss {
        WssLabel::Gb32 => 0,
        WssLabel::Gb64 => 1,
        WssLabel::Gb256 => 2,
    };
    match (guest, host) {
        (PageSize::Base4K, PageSize::Base4K) => Ok([5.2, 4.2, 4.1][col]),
        (PageSize::Base4K, PageSize::Huge2M) => Ok([3.2, 2.3, 2.3][col]),
        (PageSize::Huge2M, PageSize::Huge2M) => Ok(1.0),
        (PageSize::Huge2M, PageSize::Base4K) => Err(MemError::UnknownConfiguration { guest, host, wss }),
    }
}

/// Bump allocator over a contiguous GPA range set aside for consolidation targets.
#[derive(Debug, Clone)]
pub struct ConsolidationReserve {
    start: RegionId,
    end: RegionId,
    cursor: u64,
}

impl ConsolidationReserve {
    pub fn new(start: RegionId, regions: u64) -> Self {
        Self { start, end: RegionId(start.0 + regions), cursor: start.0 }
    }

    pub fn range(&self) -> std::ops::Range<u64> {
        self.start.0..self.end.0
    }

    pub fn remaining(&self) -> u64 {
        self.end.0 - self.cursor
    }

    /// Hands out the next unused, empty, 2 MB-aligned region.
    pub fn alloc_region(&mut self, gpt: &GuestPageTable) -> Result<RegionId, MemError> {
        while self.cursor < self.end.0 {
            let r = RegionId(self.cursor);
            self.cursor += 1;
            if gpt.region_count(r) == 0 {
                return Ok(r);
            }
        }
        Err(MemError::OutOfMemory)
    }
}

/// 64-bit content token per GPA page, standing in for page bytes.
#[derive(Debug, Clone, Default)]
pub struct ContentStore {
    tokens: Vec<u64>,
}

impl ContentStore {
    /// Seeds every mapped page with a token derived from its original GVA.
    pub fn seeded(gpt: &GuestPageTable, seed: u64) -> Self {
        let mut store = Self::default();
        for (gva, gpa) in gpt.iter() {
            store.write(gpa, content_token(seed, gva));
        }
        store
    }

    pub fn read(&self, gpa: GpaPage) -> u64 {
        self.tokens.get(gpa.0 as usize).copied().unwrap_or(0)
    }

    pub fn write(&mut self, gpa: GpaPage, token: u64) {
        let i = gpa.0 as usize;
        if i >= self.tokens.len() {
            self.tokens.resize(i + 1, 0);
        }
        self.tokens[i] = token;
    }

    pub fn copy(&mut self, from: GpaPage, to: GpaPage) {
        let t = self.read(from);
        self.write(to, t);
    }
}

/// splitmix64 of the seed and GVA.
pub fn content_token(seed: u64, gva: GvaPage) -> u64 {
    let mut z = seed ^ gva.0.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Everything the guest owns: its page table, consolidation reserve, page contents
/// and the pool of GPA pages freed by consolidation.
#[derive(Debug, Clone)]
pub struct GuestMemory {
    pub id: GuestId,
    pub gpt: GuestPageTable,
    pub reserve: ConsolidationReserve,
    pub contents: ContentStore,
    pub free_pages: Vec<GpaPage>,
    rss_pages: u64,
}

impl GuestMemory {
    /// Fully backed guest: `rss_pages` identity-mapped pages followed by
    /// `reserve_regions` empty regions for consolidation.
    pub fn new(id: GuestId, rss_pages: u64, reserve_regions: u64, seed: u64) -> Self {
        let gpt = GuestPageTable::identity(rss_pages);
        let contents = ContentStore::seeded(&gpt, seed);
        let reserve = ConsolidationReserve::new(RegionId(rss_pages.div_ceil(PAGES_PER_REGION)), reserve_regions);
        Self { id, gpt, reserve, contents, free_pages: Vec::new(), rss_pages }
    }

    pub fn rss_pages(&self) -> u64 {
        self.rss_pages
    }

    /// Every GPA region the guest owns, mapped or reserved.
    pub fn regions(&self) -> std::ops::Range<u64> {
        0..self.reserve.range().end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiers(near: u64, far: u64) -> TierConfig {
        TierConfig {
            near: TierSpec { capacity_bytes: near * HUGE_PAGE_BYTES, latency_ns: 100.0 },
            far: TierSpec { capacity_bytes: far * HUGE_PAGE_BYTES, latency_ns: 300.0 },
        }
    }

    #[test]
    fn page_size_ratio() {
        assert_eq!(PageSize::Base4K.bytes(), 4096);
        assert_eq!(PageSize::Huge2M.bytes(), 2_097_152);
        assert_eq!(PageSize::Huge2M.bytes() / PageSize::Base4K.bytes(), 512);
        assert_eq!(PAGES_PER_REGION, 512);
    }

    #[test]
    fn map_identity_page() {
        let mut gpt = GuestPageTable::new();
        gpt.map(GvaPage(0), GpaPage(0)).unwrap();
        assert_eq!(gpt.translate(GvaPage(0)), Some(GpaPage(0)));
    }

    #[test]
    fn map_updates_region_index() {
        let mut gpt = GuestPageTable::new();
        gpt.map(GvaPage(7), GpaPage(1024)).unwrap();
        assert_eq!(gpt.region_count(RegionId(2)), 1);
        assert_eq!(gpt.region_count(RegionId(0)), 0);
    }

    #[test]
    fn full_region_count() {
        let mut gpt = GuestPageTable::new();
        for i in 0..512 {
            gpt.map(GvaPage(100 + i), GpaPage(512 * 3 + i)).unwrap();
        }
        assert_eq!(gpt.region_count(RegionId(3)), 512);
    }

    #[test]
    fn map_rejects_reuse_of_either_side() {
        let mut gpt = GuestPageTable::new();
        gpt.map(GvaPage(1), GpaPage(5)).unwrap();
        assert!(matches!(gpt.map(GvaPage(1), GpaPage(6)), Err(MemError::AlreadyMapped { .. })));
        assert!(matches!(gpt.map(GvaPage(2), GpaPage(5)), Err(MemError::AlreadyMapped { .. })));
        assert_eq!(gpt.len(), 1);
    }

    #[test]
    fn remap_moves_region_counts() {
        let mut gpt = GuestPageTable::identity(1024);
        let old = gpt.remap(GvaPage(3), GpaPage(2048)).unwrap();
        assert_eq!(old, GpaPage(3));
        assert_eq!(gpt.region_count(RegionId(0)), 511);
        assert_eq!(gpt.region_count(RegionId(4)), 1);
        assert_eq!(gpt.owner(GpaPage(3)), None);
        assert_eq!(gpt.owner(GpaPage(2048)), Some(GvaPage(3)));
        assert!(gpt.remap(GvaPage(4), GpaPage(2048)).is_err());
    }

    #[test]
    fn identity_partial_region() {
        let gpt = GuestPageTable::identity(700);
        assert_eq!(gpt.region_count(RegionId(0)), 512);
        assert_eq!(gpt.region_count(RegionId(1)), 188);
        assert_eq!(gpt.len(), 700);
    }

    #[test]
    fn translate_through_host() {
        let gpt = GuestPageTable::identity(512);
        let mut host = HostTable::new(&tiers(2, 8));
        let g = GuestId(0);
        for _ in 0..3 {
            // burn frames 0..2 so region 0 lands on frame 3
            let k = RegionKey::new(GuestId(9), RegionId(host.len() as u64));
            host.place(k, Tier::Far).unwrap();
        }
        host.place(RegionKey::new(g, RegionId(0)), Tier::Far).unwrap();
        let loc = full_translate(&gpt, &host, g, GvaPage(0)).unwrap();
        assert_eq!(loc, HostLocation { tier: Tier::Far, frame: FrameId(3), offset: 0 });
    }

    #[test]
    fn translate_unmapped_guest_page() {
        let gpt = GuestPageTable::identity(10);
        let host = HostTable::new(&tiers(1, 1));
        assert_eq!(
            full_translate(&gpt, &host, GuestId(0), GvaPage(99)),
            Err(MemError::GuestUnmapped(GvaPage(99)))
        );
        assert!(matches!(
            full_translate(&gpt, &host, GuestId(0), GvaPage(1)),
            Err(MemError::HostUnmapped { .. })
        ));
    }

    #[test]
    fn walk_cost_table() {
        use PageSize::*;
        assert_eq!(walk_cost(Base4K, Base4K, WssLabel::Gb32).unwrap(), 5.2);
        assert_eq!(walk_cost(Base4K, Huge2M, WssLabel::Gb64).unwrap(), 2.3);
        for wss in [WssLabel::Gb32, WssLabel::Gb64, WssLabel::Gb256] {
            assert_eq!(walk_cost(Huge2M, Huge2M, wss).unwrap(), 1.0);
            assert!(matches!(walk_cost(Huge2M, Base4K, wss), Err(MemError::UnknownConfiguration { .. })));
        }
    }

    #[test]
    fn reserve_bump_allocation() {
        let gpt = GuestPageTable::identity(512 * 4);
        let mut reserve = ConsolidationReserve::new(RegionId(4), 16);
        let mut last = None;
        for _ in 0..16 {
            let r = reserve.alloc_region(&gpt).unwrap();
            assert_eq!(gpt.region_count(r), 0);
            if let Some(prev) = last {
                assert!(r > prev);
            }
            last = Some(r);
        }
        assert_eq!(reserve.alloc_region(&gpt), Err(MemError::OutOfMemory));
    }

    #[test]
    fn reserve_skips_occupied_regions() {
        let mut gpt = GuestPageTable::identity(512);
        gpt.map(GvaPage(9000), RegionId(1).page(0)).unwrap();
        let mut reserve = ConsolidationReserve::new(RegionId(1), 2);
        assert_eq!(reserve.alloc_region(&gpt), Ok(RegionId(2)));
        assert_eq!(reserve.alloc_region(&gpt), Err(MemError::OutOfMemory));
    }

    #[test]
    fn migrate_moves_frames() {
        let mut host = HostTable::new(&tiers(1, 2));
        let k = RegionKey::new(GuestId(0), RegionId(7));
        host.place(k, Tier::Far).unwrap();
        assert_eq!(host.migrate(k, Tier::Near).unwrap(), Some(Direction::Promotion));
        assert_eq!(host.placed(Tier::Near), 1);
        assert_eq!(host.placed(Tier::Far), 0);
        assert_eq!(host.migrate(k, Tier::Near).unwrap(), None);
        let k2 = RegionKey::new(GuestId(0), RegionId(8));
        host.place(k2, Tier::Far).unwrap();
        assert_eq!(host.migrate(k2, Tier::Near), Err(MemError::DestinationFull(Tier::Near)));
        assert_eq!(host.migrate(k, Tier::Far).unwrap(), Some(Direction::Demotion));
        host.check_invariants().unwrap();
    }

    #[test]
    fn content_tokens_follow_copies() {
        let gpt = GuestPageTable::identity(4);
        let mut store = ContentStore::seeded(&gpt, 42);
        let t = store.read(GpaPage(2));
        assert_eq!(t, content_token(42, GvaPage(2)));
        store.copy(GpaPage(2), GpaPage(900));
        assert_eq!(store.read(GpaPage(900)), t);
    }
}
