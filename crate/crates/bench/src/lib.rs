//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use basilic_core::crypto::{KeyedHash, Keyring, ProcessId, SignatureScheme, Signer};
use basilic_core::harness::suites::base_scenario;
use basilic_core::harness::{Attack, ProtocolKind, Scenario};

pub fn signers(scheme: Arc<dyn SignatureScheme>, n: usize) -> (Keyring, Vec<Signer>) {
    let (ring, keys) = Keyring::generate(scheme, n, 7);
    let signers = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| Signer::new(ProcessId(i as u32), k, &ring))
        .collect();
    (ring, signers)
}

pub fn keyed_signers(n: usize) -> (Keyring, Vec<Signer>) {
    signers(Arc::new(KeyedHash::new()), n)
}

/// All-honest instance of size `n`.
pub fn honest(protocol: ProtocolKind, n: usize) -> Scenario {
    base_scenario(&format!("bench-{n}"), protocol, n, 0, 0, 0)
}

/// Largest tolerated deceitful coalition running the equivocation attack.
pub fn attacked(n: usize) -> Scenario {
    let d = (n - 1) / 3;
    let mut s = base_scenario(&format!("bench-attack-{n}"), ProtocolKind::Multi, n, 0, d, 0);
    s.attack = Attack::ReliableBroadcast;
    s
}
