//! Property checks shared by the property tests and the acceptance run.
//! Each check drives a deterministic proptest runner and returns the first
//! counterexample as an error string.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use tiersim::export::{heatmap_csv, metrics_csv, migration_csv, summary_json};
use tiersim::gpac::{filter_scattered, ConsolidationLimit, Consolidator, CostModel};
use tiersim::mem::{
    content_token, full_translate, GpaPage, GuestId, GuestMemory, GuestPageTable, GvaPage, HostTable, MemError, RegionId,
    RegionKey, Tier, TierConfig, TierSpec, HUGE_PAGE_BYTES,
};
use tiersim::scenario::{GuestSpec, InitialPlacement, LatencyParams, Scenario, TierCapacity};
use tiersim::telemetry::{classify_hot, AccessBitmap, HotnessReport};
use tiersim::tiering::{migrate, PolicyKind, PolicyVariant, TieringEngine};
use tiersim::workload::{ScatterGroup, WorkloadKind, WorkloadSpec};
use tiersim::{run_with, Exec};

pub fn runner(cases: u32, seed: u8) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn check<S: Strategy>(cases: u32, seed: u8, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases, seed).run(&strategy, test).map_err(|e| e.to_string())
}

pub fn tiers(near: u64, far: u64) -> TierConfig {
    TierConfig {
        near: TierSpec { capacity_bytes: near * HUGE_PAGE_BYTES, latency_ns: 100.0 },
        far: TierSpec { capacity_bytes: far * HUGE_PAGE_BYTES, latency_ns: 300.0 },
    }
}

/// Hot set: a region list with a hot-page count each, laid out at the region start.
fn hot_report(gpt: &GuestPageTable, counts: &[(u64, u32)]) -> HotnessReport {
    let bits: Vec<u64> = counts.iter().flat_map(|&(r, c)| (0..c as u64).map(move |o| r * 512 + o)).collect();
    classify_hot(&[AccessBitmap::new(0, tiersim::mem::PageSize::Base4K, bits)], 1, gpt)
}

fn hot_counts(regions: u64) -> impl Strategy<Value = Vec<(u64, u32)>> {
    proptest::collection::btree_map(0..regions, 1u32..=512, 0..regions as usize)
        .prop_map(|m| m.into_iter().collect())
}

/// The composed GVA to host-frame lookup agrees with a brute-force join of
/// the two tables, including after guest remaps.
pub fn translation_composition(cases: u32) -> Result<(), String> {
    let strat = (
        1u64..6,
        proptest::collection::vec(any::<bool>(), 12),
        proptest::collection::vec((0u64..2048, 0u64..3072), 0..60),
    );
    check(cases, 1, strat, |(guest_regions, near_mask, remaps)| {
        let pages = guest_regions * 512;
        let mut gpt = GuestPageTable::identity(pages);
        let mut free: BTreeSet<u64> = (pages..pages + 512).collect();
        for (gva, target) in remaps {
            let gva = GvaPage(gva % pages);
            let to = pages + target % 512;
            if free.remove(&to) {
                let old = gpt.remap(gva, GpaPage(to)).unwrap();
                free.insert(old.0);
            }
        }
        let mut host = HostTable::new(&tiers(8, 8));
        for r in 0..=guest_regions {
            let t = if near_mask[r as usize] { Tier::Near } else { Tier::Far };
            host.place(RegionKey::new(GuestId(3), RegionId(r)), t).unwrap();
        }
        let placements: Vec<_> = host.iter().collect();
        for (gva, gpa) in gpt.iter() {
            let (_, p) = placements.iter().find(|(k, _)| k.region.0 == gpa.0 / 512).unwrap();
            let loc = full_translate(&gpt, &host, GuestId(3), gva).unwrap();
            prop_assert_eq!((loc.tier, loc.frame, loc.offset), (p.tier, p.frame, (gpa.0 % 512) as u32));
        }
        let unmapped = full_translate(&gpt, &host, GuestId(4), GvaPage(0));
        let refused = matches!(unmapped, Err(MemError::HostUnmapped { .. }));
        prop_assert!(refused);
        Ok(())
    })
}

/// Every mapped page reads back its original token after consolidation.
pub fn consolidation_integrity(cases: u32) -> Result<(), String> {
    check(cases, 2, (hot_counts(12), 1u32..=512, any::<u64>()), |(counts, cl, seed)| {
        let mut g = GuestMemory::new(GuestId(0), 12 * 512, 6, seed);
        let report = hot_report(&g.gpt, &counts);
        let mut c = Consolidator::new(ConsolidationLimit::new(cl).unwrap(), CostModel::default());
        c.run(&report, &mut g).unwrap();
        prop_assert_eq!(g.gpt.len(), 12 * 512);
        for (gva, gpa) in g.gpt.iter() {
            prop_assert_eq!(g.contents.read(gpa), content_token(seed, gva));
        }
        Ok(())
    })
}

/// Raising the limit never deselects a page.
pub fn filter_monotone_in_cl(cases: u32) -> Result<(), String> {
    check(cases, 3, (hot_counts(16), 1u32..=512, 1u32..=512), |(counts, a, b)| {
        let (lo, hi) = (a.min(b), a.max(b));
        let gpt = GuestPageTable::identity(16 * 512);
        let report = hot_report(&gpt, &counts);
        let none = BTreeSet::new();
        let small: BTreeSet<GvaPage> =
            filter_scattered(&report, ConsolidationLimit::new(lo).unwrap(), &none).selected_pages.into_iter().collect();
        let large: BTreeSet<GvaPage> =
            filter_scattered(&report, ConsolidationLimit::new(hi).unwrap(), &none).selected_pages.into_iter().collect();
        prop_assert!(small.is_subset(&large));
        Ok(())
    })
}

/// A second pass over the same hot pages moves nothing.
pub fn consolidation_idempotent(cases: u32) -> Result<(), String> {
    check(cases, 4, (hot_counts(12), 2u32..=512), |(counts, cl)| {
        let mut g = GuestMemory::new(GuestId(0), 12 * 512, 12, 5);
        let bits: Vec<u64> = counts.iter().flat_map(|&(r, c)| (0..c as u64).map(move |o| r * 512 + o)).collect();
        let bitmap = AccessBitmap::new(0, tiersim::mem::PageSize::Base4K, bits);
        let mut c = Consolidator::new(ConsolidationLimit::new(cl).unwrap(), CostModel::default());
        c.run(&classify_hot(std::slice::from_ref(&bitmap), 1, &g.gpt), &mut g).unwrap();
        let before: Vec<_> = g.gpt.iter().collect();
        let again = c.run(&classify_hot(std::slice::from_ref(&bitmap), 1, &g.gpt), &mut g).unwrap();
        prop_assert_eq!(again.pages_moved, 0);
        prop_assert_eq!(before, g.gpt.iter().collect::<Vec<_>>());
        Ok(())
    })
}

/// Near occupancy stays within capacity and every region keeps exactly one
/// placement across arbitrary policy steps.
pub fn tier_capacity(cases: u32) -> Result<(), String> {
    let variant = prop_oneof![Just(PolicyVariant::Memtierd), Just(PolicyVariant::Tpp), Just(PolicyVariant::Autonuma)];
    let epochs = proptest::collection::vec(proptest::collection::btree_map(0u64..48, 1u64..100, 0..48), 1..20);
    check(cases, 5, (variant, epochs, 1u64..30, 0usize..4), |(variant, epochs, near, age)| {
        let mut host = HostTable::new(&tiers(near, 60));
        for r in 0..48 {
            host.place(RegionKey::new(GuestId((r % 3) as u32), RegionId(r)), Tier::Far).unwrap();
        }
        let policy = PolicyKind { start_epoch: 0, promotion_k: 1, demotion_age: age as u64, ..PolicyKind::new(variant) };
        let mut engine = TieringEngine::new(policy);
        for (e, touched) in epochs.iter().enumerate() {
            let mut hits: Vec<(RegionKey, u64)> =
                touched.iter().map(|(&r, &n)| (RegionKey::new(GuestId((r % 3) as u32), RegionId(r)), n)).collect();
            hits.sort();
            engine.policy_step(e as u64, &mut host, &hits).unwrap();
            prop_assert!(host.placed(Tier::Near) <= near);
            prop_assert_eq!(host.len(), 48);
            prop_assert_eq!(host.placed(Tier::Near) + host.placed(Tier::Far), 48);
            host.check_invariants().map_err(TestCaseError::fail)?;
        }
        Ok(())
    })
}

/// Placement and traffic counters equal a replay of the accepted moves.
pub fn migration_replay(cases: u32) -> Result<(), String> {
    let moves = proptest::collection::vec((0u64..24, any::<bool>()), 0..300);
    check(cases, 6, (moves, 1u64..24), |(moves, near)| {
        let mut host = HostTable::new(&tiers(near, 24));
        let key = |r: u64| RegionKey::new(GuestId((r % 2) as u32), RegionId(r));
        for r in 0..24 {
            host.place(key(r), Tier::Far).unwrap();
        }
        let mut stats = BTreeMap::new();
        let mut log = Vec::new();
        for (r, up) in moves {
            let to = if up { Tier::Near } else { Tier::Far };
            match migrate(&mut host, key(r), to, &mut stats) {
                Ok(Some(_)) => log.push((r, to)),
                Ok(None) | Err(MemError::DestinationFull(_)) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
        let mut tier = [Tier::Far; 24];
        let mut bytes: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for &(r, to) in &log {
            tier[r as usize] = to;
            let e = bytes.entry((r % 2) as u32).or_default();
            if to == Tier::Near {
                e.0 += HUGE_PAGE_BYTES;
            } else {
                e.1 += HUGE_PAGE_BYTES;
            }
        }
        for r in 0..24 {
            prop_assert_eq!(host.tier_of(key(r)), Some(tier[r as usize]));
        }
        let near_count = tier.iter().filter(|t| **t == Tier::Near).count() as u64;
        prop_assert_eq!(host.placed(Tier::Near), near_count);
        for (g, (p, d)) in bytes {
            let s = stats[&GuestId(g)];
            prop_assert_eq!((s.promoted_bytes, s.demoted_bytes), (p, d));
        }
        Ok(())
    })
}

pub fn small_scenario(seed: u64, counts: &[u32], variant: PolicyVariant, cl: Option<u32>) -> Scenario {
    let groups: Vec<ScatterGroup> = counts.iter().map(|&c| ScatterGroup { regions: 2, hot_pages: c }).collect();
    let mut guest = GuestSpec::new(WorkloadSpec {
        kind: WorkloadKind::ScatterSet { groups },
        rss_pages: 24 * 512,
        accesses_per_epoch: 3000,
        write_fraction: 0.1,
        rng_seed: seed,
    });
    guest.cl = cl;
    let mut second = guest.clone();
    second.workload.rng_seed = seed ^ 0xabc;
    Scenario {
        epochs: 14,
        rng_seed: seed,
        guests: vec![guest, second],
        tiers: TierCapacity { near_bytes: 16 * HUGE_PAGE_BYTES, far_bytes: 64 * HUGE_PAGE_BYTES },
        latency: LatencyParams::new(100.0, 300.0, 20.0),
        telemetry: Default::default(),
        page_sizes: Default::default(),
        policy: PolicyKind::new(variant),
        initial_placement: InitialPlacement::NearFirst,
        measure_from: None,
        consolidation_cost_us: None,
        gpac_log_batches: Some(1),
    }
}

fn outputs(s: &Scenario, exec: Exec) -> Vec<String> {
    let r = run_with(s, exec).unwrap();
    let mut v = vec![metrics_csv(&r), migration_csv(&r), summary_json(&r)];
    v.extend((0..r.guest_count()).map(|g| heatmap_csv(&r, g)));
    v
}

/// Identical scenarios give byte-identical exports in either execution mode.
pub fn run_determinism(cases: u32) -> Result<(), String> {
    let variant = prop_oneof![Just(PolicyVariant::Memtierd), Just(PolicyVariant::Tpp), Just(PolicyVariant::Autonuma)];
    let counts = proptest::collection::vec(1u32..=512, 1..8);
    check(cases, 7, (any::<u64>(), counts, variant, proptest::option::of(1u32..=512)), |(seed, counts, variant, cl)| {
        let s = small_scenario(seed, &counts, variant, cl);
        let text = s.to_toml_string();
        let reparsed = Scenario::from_toml_str(&text).unwrap();
        let a = outputs(&s, Exec::Sequential);
        prop_assert_eq!(&a, &outputs(&reparsed, Exec::Sequential));
        prop_assert_eq!(&a, &outputs(&s, Exec::Parallel));
        Ok(())
    })
}

pub type Property = (&'static str, fn(u32) -> Result<(), String>, u32);

pub const PROPERTIES: [Property; 7] = [
    ("translation composition", translation_composition, 128),
    ("consolidation data integrity", consolidation_integrity, 128),
    ("filter monotone in CL", filter_monotone_in_cl, 256),
    ("consolidation idempotence", consolidation_idempotent, 128),
    ("tier capacity and single placement", tier_capacity, 128),
    ("migration log replay", migration_replay, 256),
    ("full-run CSV determinism", run_determinism, 12),
];
