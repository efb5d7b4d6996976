//! Invariants over randomized topologies: single pending tick, buffer
//! capacity, per-pair FIFO delivery, conservation at quiescence, wake-up on
//! full -> not-full outgoing buffers, and agreement with always mode.

mod support;

use support::random_scenario::{check, run_suite, scenario};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;

const SEED: [u8; 32] = *b"tickwell-rule-properties-seed-01";

#[test]
fn invariants_hold_on_1000_random_scenarios() {
    let stats = run_suite(1000, SEED).unwrap_or_else(|e| panic!("{e}"));
    assert_eq!(stats.runs, 1000);
    assert!(
        stats.backprop_wakes > 0,
        "no run exercised a full outgoing buffer"
    );
}

#[test]
fn generated_scenarios_are_reproducible() {
    let mut a = TestRunner::deterministic();
    let mut b = TestRunner::deterministic();
    for _ in 0..20 {
        let sa = scenario().new_tree(&mut a).unwrap().current();
        let sb = scenario().new_tree(&mut b).unwrap().current();
        let (oa, ob) = (check(&sa).unwrap(), check(&sb).unwrap());
        assert_eq!(oa.final_vtime, ob.final_vtime);
        assert_eq!(oa.metrics, ob.metrics);
    }
}

/// A timer wake landing on an already pending tick that then makes
/// progress must not leave a stale re-arm behind.
#[test]
fn timer_wake_on_progressing_tick_leaves_no_extra_tick() {
    use support::random_scenario::{BankSpec, GenSpec, Scenario};
    use tickwell::models::Pattern;
    let s = Scenario {
        gens: vec![GenSpec {
            freq: 500_000_000,
            pattern: Pattern::IdleFraction { fraction: 0.08 },
            total: 22,
            max_outstanding: 5,
            dests: vec![0],
            seed: 13946198849374363539,
        }],
        banks: vec![BankSpec {
            freq: 500_000_000,
            latency: 1,
            width: 2,
        }],
        cache: None,
        in_cap: 2,
        out_cap: 3,
        xbar_freq: 2_000_000_000,
        xbar_latency: 3,
    };
    check(&s).unwrap();
}
