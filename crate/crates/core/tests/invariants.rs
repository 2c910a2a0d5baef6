//! Structural invariants of the encoder, decoupler, plan and checkpoint.

mod common;

use common::criteria;

#[test]
fn s0_streams_are_bit_identical() {
    criteria::s0_streams_identical().unwrap();
}

#[test]
fn decouplers_reconstruct_exactly() {
    criteria::decoupler_reconstruction().unwrap();
}

#[test]
fn losses_only_reach_their_own_feature() {
    criteria::graph_separation().unwrap();
}

#[test]
fn relation_plans_must_be_prefixes() {
    criteria::plan_prefix_rule().unwrap();
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let index = common::synth(&dir.path().join("data"), 4, 4, 0, 0);
    criteria::checkpoint_round_trip(&index, dir.path()).unwrap();
}
