use std::collections::BTreeSet;
use std::sync::Arc;

use basilic_core::analysis::{alpha_confirm_threshold, max_branches, min_blockdepth};
use basilic_core::committee::{consensus_tolerated, default_threshold, threshold_tolerated, Committee, FaultProfile};
use basilic_core::crypto::{ConsensusId, KeyedHash, Keyring, Layer, MessageKind, Phase, ProcessId, SignedMessage, Signer};
use basilic_core::ledger::{generate_fork, replay_oracle};
use basilic_core::membership::{choose, reconfig_threshold};
use num_rational::Ratio;
use proptest::prelude::*;

fn profile() -> impl Strategy<Value = FaultProfile> {
    (1usize..=40).prop_flat_map(|n| {
        (Just(n), 0..=n).prop_flat_map(|(n, t)| {
            (Just(n), Just(t), 0..=n - t)
                .prop_flat_map(|(n, t, d)| (Just(n), Just(t), Just(d), 0..=n - t - d))
                .prop_map(|(n, t, d, q)| FaultProfile::new(n, t, d, q).unwrap())
        })
    })
}

fn signers(n: usize) -> (Keyring, Vec<Signer>) {
    let (ring, keys) = Keyring::generate(Arc::new(KeyedHash::new()), n, 5);
    let s = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| Signer::new(ProcessId(i as u32), k, &ring))
        .collect();
    (ring, s)
}

proptest! {
    #[test]
    fn some_threshold_iff_consensus_tolerated(p in profile()) {
        let some_h = (p.n / 2 + 1..=p.n).any(|h| threshold_tolerated(&p, h) == Ok((true, true)));
        prop_assert_eq!(some_h, consensus_tolerated(&p));
    }

    #[test]
    fn threshold_drops_with_exclusions(n in 4usize..30, k in 0usize..10) {
        let h0 = default_threshold(n);
        let k = k.min(n - 1);
        let roster: Vec<ProcessId> = (0..n as u32).map(ProcessId).collect();
        let c = Committee::with_excluded(roster, h0, (0..k as u32).map(ProcessId)).unwrap();
        prop_assert_eq!(c.d_r(), k);
        prop_assert_eq!(c.threshold(), h0.saturating_sub(k).max(1));
        prop_assert_eq!(c.size(), n - k);
    }

    #[test]
    fn branches_grow_with_coalition(n in 4usize..60, dt in 0usize..60) {
        let h = default_threshold(n);
        let dt = dt.min(n);
        if let (Ok(a), Ok(b)) = (max_branches(n, h, dt), max_branches(n, h, dt + 1)) {
            prop_assert!(a <= b);
            prop_assert!(a >= 1);
        }
    }

    #[test]
    fn alpha_threshold_stays_in_range(n in 3usize..40, num in 0u64..=9) {
        let h = default_threshold(n);
        let lo = alpha_confirm_threshold(n, h, Ratio::new(num, 9));
        let hi = alpha_confirm_threshold(n, h, Ratio::new((num + 1).min(9), 9));
        prop_assert!(lo <= hi && hi <= n);
        prop_assert!(lo >= 1);
    }

    #[test]
    fn blockdepth_grows_with_gain(a in 1.0f64..40.0, rho in 0.5f64..0.95) {
        let small = min_blockdepth(a, 0.1, rho).unwrap();
        let large = min_blockdepth(a + 5.0, 0.1, rho).unwrap();
        prop_assert!(small <= large);
    }

    #[test]
    fn reconfig_majority(n in 1usize..40, hp in 1usize..40, e in 0usize..40) {
        let hp = hp.clamp(n / 2 + 1, n);
        let e = e.min(n);
        let h = reconfig_threshold(n, hp, e);
        prop_assert!(h <= n && h >= hp.min(n));
        if e < n {
            prop_assert!(2 * (h - e) > n - e);
        }
    }

    #[test]
    fn choose_is_order_free(
        lists in proptest::collection::vec(proptest::collection::vec(100u32..130, 0..6), 1..6),
        members in proptest::collection::btree_set(100u32..130, 0..5),
        need in 0usize..8,
        rot in 0usize..6,
    ) {
        let props: Vec<(ProcessId, Vec<ProcessId>)> = lists
            .iter()
            .enumerate()
            .map(|(i, l)| (ProcessId(i as u32), l.iter().copied().map(ProcessId).collect()))
            .collect();
        let members: Vec<ProcessId> = members.into_iter().map(ProcessId).collect();
        let mut rotated = props.clone();
        rotated.rotate_left(rot % props.len());
        let a = choose(&props, need, &members);
        prop_assert_eq!(&a, &choose(&rotated, need, &members));
        if let Ok(picked) = a {
            prop_assert_eq!(picked.len(), need);
            let uniq: BTreeSet<_> = picked.iter().collect();
            prop_assert_eq!(uniq.len(), need);
            prop_assert!(picked.iter().all(|p| !members.contains(p)));
        }
    }

    #[test]
    fn merge_order_matches_oracle(seed in any::<u64>(), txs in 1usize..30) {
        let (_, s) = signers(4);
        let f = generate_fork(&s, seed, txs);
        let oracle = replay_oracle(&f.genesis, f.deposit, &f.all_txs());
        for b_first in [false, true] {
            let st = f.replay(b_first);
            prop_assert_eq!(&st.utxos, &oracle.utxos);
            prop_assert_eq!(st.deposit, oracle.deposit);
            prop_assert_eq!(&st.inputs_deposit, &oracle.inputs_deposit);
        }
    }

    #[test]
    fn signed_messages_round_trip(round in 0u32..50, payload in proptest::collection::vec(any::<u8>(), 0..64), flip in any::<usize>()) {
        let (ring, s) = signers(3);
        let inst = ConsensusId::new(Layer::Binary, 0, 0).sub(0);
        let m = s[1].sign(MessageKind::Echo, inst, round, Phase::Broadcast, payload, None);
        let back = SignedMessage::decode(&m.encode()).unwrap();
        prop_assert_eq!(&back, m.as_ref());
        prop_assert!(ring.verify(&back));
        let mut bytes = back.signing_bytes();
        let i = flip % bytes.len();
        bytes[i] ^= 1;
        prop_assert!(!ring.verify_raw(back.signer, &bytes, &back.signature));
    }
}
