use basilic_core::harness::suites::{attack_scenarios, base_scenario, echo_split_scenario};
use basilic_core::harness::{run, ProtocolKind};

#[test]
fn honest_instances_decide() {
    for (protocol, n) in [(ProtocolKind::Binary, 4), (ProtocolKind::Multi, 7), (ProtocolKind::Binary, 10)] {
        let s = base_scenario("honest", protocol, n, 0, 0, 0);
        for seed in 0..5 {
            let r = run(&s, seed);
            assert_eq!(r.honest_decided, n, "{protocol:?} n={n} seed={seed}");
            assert_eq!(r.branches, 1);
            assert!(r.violation.is_none());
        }
    }
}

#[test]
fn crashed_minority_does_not_block() {
    // 7 processes, 2 crashed at start, threshold 5
    let s = base_scenario("crash", ProtocolKind::Multi, 7, 0, 0, 2);
    for seed in 0..5 {
        let r = run(&s, seed);
        assert_eq!(r.honest_decided, r.honest, "seed {seed}");
    }
}

#[test]
fn equivocation_is_caught() {
    let s = echo_split_scenario();
    let r = run(&s, 3);
    assert!(r.violation.is_none());
    assert_eq!(r.honest_decided, r.honest);
    assert_eq!(r.false_accusations, 0);
}

#[test]
fn forks_leave_proofs_against_the_coalition() {
    let mut forked = 0;
    for s in attack_scenarios() {
        let need = 2 * s.h0() - s.n;
        for seed in 1..=5 {
            let r = run(&s, seed);
            assert_eq!(r.false_accusations, 0, "{}#{seed}", s.name);
            if r.branches > 1 {
                forked += 1;
                assert!(r.min_honest_accused >= need, "{}#{seed}", s.name);
            }
        }
    }
    assert!(forked > 0);
}

#[test]
fn runs_replay_identically() {
    let s = attack_scenarios().remove(0);
    let a = serde_json::to_string(&run(&s, 11)).unwrap();
    let b = serde_json::to_string(&run(&s, 11)).unwrap();
    assert_eq!(a, b);
}
