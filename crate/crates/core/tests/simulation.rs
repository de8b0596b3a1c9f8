//! End-to-end simulator scenarios: the optimistic path, determinism, and
//! the failure models driving view changes, fork proofs and partitions.

use specbft_core::consensus::Behavior;
use specbft_core::simnet::{self, Duration, SimConfig};

#[test]
fn four_honest_validators_run_clean() {
    // Constant delay below the timeout, 25 blocks: no view changes, no
    // forks, and macro blocks at heights 11 and 22.
    let mut config = SimConfig::honest(4, 7);
    config.duration = Duration::Blocks(25);
    let out = simnet::run(&config).expect("run");
    let m = &out.trace.metrics;
    assert_eq!(m.heights_with_view_change, 0, "no view changes expected");
    assert_eq!(m.fork_heights, 0, "no forks expected");
    assert_eq!(m.finalized_macros, 2);
    assert!(!m.safety_violation);
    assert!(m.canonical_blocks >= 26);
    // All nodes share the chain, up to blocks still propagating.
    assert!(m.honest_heads_agree, "diverged: {:?}", m.final_heads);
}

#[test]
fn identical_configs_yield_identical_traces() {
    let mut config = SimConfig::honest(4, 99);
    config.duration = Duration::Blocks(15);
    let a = simnet::run(&config).expect("run a");
    let b = simnet::run(&config).expect("run b");
    assert_eq!(a.trace.to_text(), b.trace.to_text());
    assert_eq!(a.export, b.export);
}

#[test]
fn one_offline_validator_causes_view_changes_at_its_slots() {
    let mut config = SimConfig::honest(4, 21);
    config.duration = Duration::Blocks(1000);
    config.time_cap_ms = 3_600_000_000;
    let config = config
        .assign_behavior(3, Behavior::Offline { from_height: 0 })
        .unwrap();
    let out = simnet::run(&config).expect("run");
    let m = &out.trace.metrics;
    assert!(!m.safety_violation);

    // Every height whose first owner belongs to the offline node must have
    // gone through a view change, and only those.
    let rosters: std::collections::BTreeMap<u64, Vec<u32>> = out
        .trace
        .epochs
        .iter()
        .map(|r| (r.epoch, r.slot_nodes.clone()))
        .collect();
    let params = config.params();
    let mut offline_owned = 0u64;
    let mut offline_owned_with_vc = 0u64;
    let mut micro_heights = 0u64;
    for c in out.trace.canonical.iter().filter(|c| c.height > 0) {
        let epoch = params.epoch_of(c.height);
        let Some(roster) = rosters.get(&epoch) else {
            continue;
        };
        micro_heights += 1;
        if roster[c.first_owner_slot as usize] == 3 {
            offline_owned += 1;
            if c.view > 0 {
                offline_owned_with_vc += 1;
            }
        } else {
            assert_eq!(c.view, 0, "unexpected view change at height {}", c.height);
        }
    }
    assert_eq!(offline_owned, offline_owned_with_vc);
    // Rate roughly the offline node's slot share (1/4 in expectation).
    let rate = offline_owned as f64 / micro_heights as f64;
    assert!(
        (rate - 0.25).abs() < 0.08,
        "view-change rate {rate} far from slot share"
    );
}

#[test]
fn equivocator_is_caught_and_proof_lands_on_chain() {
    use specbft_core::simnet::trace::Observation;

    let mut config = SimConfig::honest(4, 5);
    // Several epochs so detection, inclusion and settlement all happen.
    config.duration = Duration::Blocks(40);
    let config = config.assign_behavior(2, Behavior::Equivocator).unwrap();
    let out = simnet::run(&config).expect("run");
    let trace = &out.trace;
    assert!(!trace.metrics.safety_violation);

    let created = trace
        .events
        .iter()
        .any(|e| matches!(e.what, Observation::ForkProofCreated { .. }));
    assert!(created, "someone must observe the equivocation");
    let on_chain = trace
        .events
        .iter()
        .any(|e| matches!(e.what, Observation::ForkProofOnChain { .. }));
    assert!(on_chain, "a fork proof must make it into a block");
    assert!(trace.metrics.fork_heights > 0);
}

#[test]
fn partition_stalls_both_sides_and_heals() {
    let mut config = SimConfig::honest(4, 11);
    config.duration = Duration::Millis(120_000);
    config.time_cap_ms = 130_000;
    let config = config
        .inject_partition(20_000, 60_000, vec![0, 1])
        .unwrap();
    let out = simnet::run(&config).expect("run");
    let m = &out.trace.metrics;
    assert!(!m.safety_violation);
    assert!(m.messages_dropped_partition > 0);
    // After healing, everyone converges again (up to blocks in flight).
    assert!(m.honest_heads_agree, "heads diverged: {:?}", m.final_heads);
    let heights: Vec<u64> = m.final_heads.iter().map(|(_, h, _)| *h).collect();
    let spread = heights.iter().max().unwrap() - heights.iter().min().unwrap();
    assert!(spread <= 3, "nodes drifted apart: {:?}", m.final_heads);
    assert_eq!(
        m.messages_sent,
        m.messages_delivered + m.messages_dropped_partition + m.messages_pending_at_end
    );
}
