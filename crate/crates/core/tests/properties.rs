mod common;

use common::*;

#[test]
fn translation_composition_matches_join() {
    translation_composition(256).unwrap();
}

#[test]
fn consolidation_preserves_contents() {
    consolidation_integrity(256).unwrap();
}

#[test]
fn filter_selection_grows_with_cl() {
    filter_monotone_in_cl(512).unwrap();
}

#[test]
fn second_consolidation_pass_is_a_no_op() {
    consolidation_idempotent(256).unwrap();
}

#[test]
fn policies_keep_capacity_and_single_placement() {
    tier_capacity(256).unwrap();
}

#[test]
fn migration_counters_replay() {
    migration_replay(512).unwrap();
}

#[test]
fn runs_are_byte_identical() {
    run_determinism(24).unwrap();
}
