//! Named acceptance suites. Each criterion returns a verdict with a short
//! detail line; the CLI and the acceptance test print one line per verdict.

use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{alpha_confirm_threshold, conservative_branches, deposit_flux, max_branches, max_branches_by_partition, min_blockdepth, ZeroLossParams};
use crate::basilic::{confirm, Confirmation, DecisionMode};
use crate::committee::{consensus_tolerated, threshold_tolerated, FaultProfile};
use crate::crypto::{KeyedHash, Keyring, ProcessId, Signer};
use crate::ledger::{generate_fork, replay_oracle};
use crate::membership::PoolConfig;
use crate::simnet::{BenignBehavior, DelayModel, Dist};

use super::{csv_string, run, Attack, ByzantineSpec, ProtocolKind, RunRecord, Scenario};

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// Criterion builders in order.
pub const CRITERIA: [(u8, &str, fn() -> Verdict); 11] = [
    (1, "bound-equivalence", bound_equivalence),
    (2, "agreement", agreement),
    (3, "active-accountability", active_accountability),
    (4, "accountability", accountability),
    (5, "branch-bound", branch_bound),
    (6, "alpha-confirmation", alpha_confirmation),
    (7, "zero-loss", zero_loss),
    (8, "convergence", convergence),
    (9, "ledger-conservation", ledger_conservation),
    (10, "complexity", complexity),
    (11, "determinism", determinism),
];

/// Suite names and the criteria they include.
pub const SUITES: [(&str, &[u8]); 10] = [
    ("all", &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]),
    ("bounds", &[1, 5, 6]),
    ("agreement", &[2]),
    ("accountability", &[3, 4]),
    ("attack", &[4, 5]),
    ("zeroloss", &[7]),
    ("convergence", &[8]),
    ("ledger", &[9]),
    ("complexity", &[10]),
    ("determinism", &[11]),
];

pub fn criterion(id: u8) -> Option<Verdict> {
    CRITERIA.iter().find(|(i, _, _)| *i == id).map(|(_, _, f)| f())
}

/// Runs a named suite, calling `each` as verdicts come in.
pub fn run_suite(name: &str, mut each: impl FnMut(&Verdict)) -> Option<Vec<Verdict>> {
    let (_, ids) = SUITES.iter().find(|(n, _)| *n == name)?;
    let mut out = Vec::new();
    for id in *ids {
        let v = criterion(*id).expect("listed criterion");
        each(&v);
        out.push(v);
    }
    Some(out)
}

fn verdict(id: u8, pass: bool, detail: String) -> Verdict {
    let name = CRITERIA.iter().find(|(i, _, _)| *i == id).map(|(_, n, _)| *n).unwrap_or("?");
    Verdict { id, name, pass, detail }
}

/// Bare scenario with uniform 1-10 ms links and a 20 ms bound.
pub fn base_scenario(name: &str, protocol: ProtocolKind, n: usize, t: usize, d: usize, q: usize) -> Scenario {
    Scenario {
        name: name.into(),
        protocol,
        n,
        t,
        d,
        q,
        h0: None,
        h0_prime: None,
        attack: Attack::None,
        delay: DelayModel::uniform(1.0, 10.0, 20.0),
        horizon_ms: None,
        mode: DecisionMode::MinIndex,
        timeouts: crate::actor::TimeoutSchedule::Constant,
        signatures: Default::default(),
        seeds: None,
        benign: None,
        byzantine: None,
        partitions: None,
        share_evidence: true,
        pool: None,
        instances: None,
        deposit: None,
    }
}

fn partitioned(gst_ms: f64) -> DelayModel {
    DelayModel {
        base: Dist::Uniform { lo_ms: 1.0, hi_ms: 10.0 },
        cross: Some(Dist::Uniform { lo_ms: 100.0, hi_ms: 300.0 }),
        gst_ms,
        delta_ms: 20.0,
    }
}

pub fn bound_equivalence() -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    let mut mismatch = None;
    for n in 1..=12 {
        for t in 0..=n {
            for d in 0..=n - t {
                for q in 0..=n - t - d {
                    let p = FaultProfile::new(n, t, d, q).expect("in range");
                    let some_h = (n / 2 + 1..=n).any(|h| threshold_tolerated(&p, h) == Ok((true, true)));
                    checked += 1;
                    if some_h != consensus_tolerated(&p) && mismatch.is_none() {
                        mismatch = Some((n, t, d, q));
                    }
                }
            }
        }
    }
    let el = start.elapsed();
    verdict(
        1,
        mismatch.is_none() && el.as_secs_f64() < 1.0,
        format!("{checked} profiles, mismatch {mismatch:?}, {:.1} ms", el.as_secs_f64() * 1e3),
    )
}

/// A random tolerated profile for `n` with a random attack and delays.
pub fn random_tolerated(n: usize, rng: &mut ChaCha8Rng, idx: usize) -> Scenario {
    loop {
        let h0 = rng.random_range(n / 2 + 1..=n);
        let t = rng.random_range(0..=n / 3);
        let d = rng.random_range(0..=n / 2);
        let q = rng.random_range(0..=n / 3);
        if t + d + q > n {
            continue;
        }
        let p = FaultProfile::new(n, t, d, q).expect("in range");
        if threshold_tolerated(&p, h0) != Ok((true, true)) {
            continue;
        }
        let honest = n - t - d - q;
        let mut s = base_scenario(&format!("agreement-n{n}-{idx}"), ProtocolKind::Multi, n, t, d, q);
        s.h0 = Some(h0);
        s.delay = partitioned(rng.random_range(0.0..400.0));
        s.mode = if rng.random_bool(0.5) { DecisionMode::Superblock } else { DecisionMode::MinIndex };
        if rng.random_bool(0.3) {
            s.protocol = ProtocolKind::Binary;
        }
        if d + t > 0 {
            s.attack = match rng.random_range(0..4) {
                0 => Attack::None,
                1 if honest >= 2 => Attack::ReliableBroadcast,
                2 if honest >= 2 => Attack::BinaryConsensus { j: None, k: None },
                3 if s.protocol == ProtocolKind::Multi => Attack::EchoSplit,
                _ => Attack::None,
            };
        }
        if t > 0 {
            s.byzantine = Some(ByzantineSpec {
                drop: rng.random_range(0.0..0.5),
                garble: rng.random_range(0.0..0.3),
            });
        }
        if q > 0 {
            s.benign = Some(match rng.random_range(0..3) {
                0 => BenignBehavior::CrashAt { at_ms: rng.random_range(0.0..200.0) },
                1 => BenignBehavior::OmitFraction { p: rng.random_range(0.0..1.0) },
                _ => BenignBehavior::Stale { extra_ms: rng.random_range(0.0..100.0) },
            });
        }
        if !matches!(s.attack, Attack::ReliableBroadcast | Attack::BinaryConsensus { .. }) {
            s.partitions = Some(rng.random_range(1..=2.min(honest.max(1))));
        }
        s.validate().expect("generated scenario is valid");
        return s;
    }
}

pub fn agreement() -> Verdict {
    let start = Instant::now();
    let mut runs = 0;
    let mut failures = Vec::new();
    for n in [4usize, 7, 10] {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa9 + n as u64);
        for i in 0..200 {
            let s = random_tolerated(n, &mut rng, i);
            let r = run(&s, i as u64);
            runs += 1;
            let ok = r.branches <= 1 && r.honest_decided == r.honest && r.violation.is_none() && !r.horizon_hit;
            if !ok && failures.len() < 3 {
                failures.push(format!("{}#{} ({:?})", s.name, r.seed, r.violation));
            }
        }
    }
    let el = start.elapsed().as_secs_f64();
    verdict(
        2,
        failures.is_empty() && el < 120.0,
        format!("{runs} runs, failures {failures:?}, {el:.1} s"),
    )
}

pub fn echo_split_scenario() -> Scenario {
    let mut s = base_scenario("echo-split", ProtocolKind::Multi, 4, 0, 1, 1);
    s.h0 = Some(3);
    s.attack = Attack::EchoSplit;
    s
}

pub fn active_accountability() -> Verdict {
    let s = echo_split_scenario();
    let mut bad = Vec::new();
    for seed in 1..=100 {
        let r = run(&s, seed);
        let ok = r.honest == 2
            && r.honest_decided == 2
            && r.min_honest_accused == 1
            && r.max_honest_excluded == 1
            && r.false_accusations == 0;
        if !ok {
            bad.push(seed);
        }
    }
    verdict(3, bad.is_empty(), format!("100 seeds, failing {bad:?}"))
}

/// Forced-disagreement scenarios: both partition attacks over slow cross links.
pub fn attack_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    for (n, d, h0) in [(4usize, 2usize, 3usize), (9, 3, 6), (10, 4, 7)] {
        let mut rb = base_scenario(&format!("rb-n{n}"), ProtocolKind::Multi, n, 0, d, 0);
        rb.h0 = Some(h0);
        rb.attack = Attack::ReliableBroadcast;
        rb.delay = partitioned(5000.0);
        out.push(rb.clone());
        let mut bc = rb.clone();
        bc.name = format!("bc-n{n}");
        bc.attack = Attack::BinaryConsensus { j: None, k: None };
        bc.mode = DecisionMode::Superblock;
        out.push(bc.clone());
        bc.name = format!("bc-binary-n{n}");
        bc.protocol = ProtocolKind::Binary;
        out.push(bc);
    }
    let mut three = base_scenario("rb-n12-3way", ProtocolKind::Multi, 12, 0, 6, 0);
    three.h0 = Some(8);
    three.attack = Attack::ReliableBroadcast;
    three.partitions = Some(3);
    three.delay = partitioned(5000.0);
    out.push(three);
    out
}

pub fn accountability() -> Verdict {
    let mut forked = 0;
    let mut runs = 0;
    let mut bad = Vec::new();
    for s in attack_scenarios() {
        let need = 2 * s.h0() - s.n;
        for seed in 1..=100 {
            let r = run(&s, seed);
            runs += 1;
            if r.branches > 1 {
                forked += 1;
                if r.min_honest_accused < need || r.false_accusations > 0 {
                    bad.push(format!("{}#{seed}", s.name));
                }
            }
        }
    }
    verdict(
        4,
        bad.is_empty() && forked > 0,
        format!("{runs} runs, {forked} with disagreement, unaccountable {bad:?}"),
    )
}

pub fn branch_bound() -> Verdict {
    let mut oracle_mismatch = None;
    for n in 1..=12 {
        for h in n / 2 + 1..=n {
            for dt in 0..h {
                if max_branches(n, h, dt) != max_branches_by_partition(n, h, dt) && oracle_mismatch.is_none() {
                    oracle_mismatch = Some((n, h, dt));
                }
            }
        }
    }
    let mut worst = 0;
    let mut over = Vec::new();
    for s in attack_scenarios() {
        for seed in 1..=20 {
            let r = run(&s, seed);
            worst = worst.max(r.branches);
            if r.branches > r.branch_bound {
                over.push(format!("{}#{seed}: {} > {}", s.name, r.branches, r.branch_bound));
            }
        }
    }
    verdict(
        5,
        oracle_mismatch.is_none() && over.is_empty(),
        format!("oracle mismatch {oracle_mismatch:?}, max observed {worst}, over bound {over:?}"),
    )
}

pub fn alpha_confirmation() -> Verdict {
    let low = Ratio::new(4u64, 9);
    let high = Ratio::new(2u64, 3);
    let a = alpha_confirm_threshold(9, 6, low);
    let b = alpha_confirm_threshold(9, 6, high);
    let ops = confirm(9, 6, low, 8, false) == Confirmation::Confirmed
        && confirm(9, 6, low, 7, false) == Confirmation::Pending
        && confirm(9, 6, high, 9, false) == Confirmation::Confirmed
        && confirm(9, 6, high, 8, false) == Confirmation::Pending
        && confirm(9, 6, high, 9, true) == Confirmation::DisagreementDetected;
    verdict(6, a == 8 && b == 9 && ops, format!("alpha=4/9 needs {a}, alpha=2/3 needs {b}"))
}

pub fn zero_loss() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for (delta, expect) in [(0.5, 28u32), (0.6, 37), (0.64, 46), (0.66, 58)] {
        let a = conservative_branches(delta, 2.0 / 3.0).map(|x| x as f64);
        let w = a.as_ref().map_err(|e| e.clone()).and_then(|a| min_blockdepth(*a, 0.1, 0.9));
        let flips = match (&a, &w) {
            (Ok(a), Ok(w)) => {
                let g = |w| deposit_flux(&ZeroLossParams { a: *a, b: 0.1, rho: 0.9, w });
                g(*w) >= 0.0 && (*w == 0 || g(w - 1) < 0.0)
            }
            _ => false,
        };
        ok &= w == Ok(expect) && flips;
        let shown = w.as_ref().map_or("err".into(), |w| w.to_string());
        if w == Ok(expect) {
            notes.push(format!("d={delta}:w={shown}"));
        } else {
            notes.push(format!("d={delta}:w={shown} (expected {expect})"));
        }
    }
    // a claimed depth of 4 at rho=0.55 is below what the flux formula requires
    let low = min_blockdepth(3.0, 0.1, 0.55);
    ok &= low == Ok(5);
    notes.push(format!("rho=0.55:w={} (claimed 4)", low.map_or("err".into(), |w| w.to_string())));
    verdict(7, ok, notes.join(" "))
}

pub fn convergence_scenario() -> Scenario {
    let mut s = base_scenario("convergence", ProtocolKind::Zlb, 9, 0, 5, 0);
    s.h0 = Some(7);
    s.h0_prime = Some(7);
    s.attack = Attack::ReliableBroadcast;
    s.mode = DecisionMode::Superblock;
    s.delay = partitioned(1000.0);
    s.pool = Some(PoolConfig {
        size: 18,
        honest_fraction: 2.0 / 3.0,
    });
    s.instances = Some(100);
    s.horizon_ms = Some(600_000.0);
    s
}

fn non_increasing(traj: &str) -> bool {
    let ratios: Vec<f64> = traj
        .split(';')
        .filter_map(|p| {
            let (a, b) = p.split_once('/')?;
            Some(a.parse::<f64>().ok()? / b.parse::<f64>().ok()?)
        })
        .collect();
    ratios.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

pub fn convergence() -> Verdict {
    let s = convergence_scenario();
    let mut bad = Vec::new();
    let mut trajectories = Vec::new();
    for seed in 1..=8 {
        let r = run(&s, seed);
        let ok = (1..=3).contains(&r.membership_changes)
            && r.instances_after_change >= 100
            && r.agreed_after_change == r.instances_after_change
            && non_increasing(&r.deceitful_trajectory)
            && r.false_accusations == 0;
        trajectories.push(r.deceitful_trajectory.clone());
        if !ok {
            bad.push(format!(
                "#{seed} changes={} agreed={}/{} traj={}",
                r.membership_changes, r.agreed_after_change, r.instances_after_change, r.deceitful_trajectory
            ));
        }
    }
    verdict(8, bad.is_empty(), format!("trajectories {trajectories:?}, failing {bad:?}"))
}

pub fn ledger_conservation() -> Verdict {
    let (ring, keys) = Keyring::generate(std::sync::Arc::new(KeyedHash::new()), 4, 99);
    let signers: Vec<Signer> = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| Signer::new(ProcessId(i as u32), k, &ring))
        .collect();
    let mut bad = Vec::new();
    let mut funded = 0;
    for seed in 0..1000 {
        let f = generate_fork(&signers, seed, 20);
        let oracle = replay_oracle(&f.genesis, f.deposit, &f.all_txs());
        let ab = f.replay(false);
        let ba = f.replay(true);
        let matches = |s: &crate::ledger::LedgerState| {
            s.utxos == oracle.utxos && s.deposit == oracle.deposit && s.inputs_deposit == oracle.inputs_deposit
        };
        if !oracle.inputs_deposit.is_empty() {
            funded += 1;
        }
        if !(matches(&ab) && matches(&ba) && ab.txs == ba.txs) {
            bad.push(seed);
        }
    }
    verdict(
        9,
        bad.is_empty(),
        format!("1000 scenarios, {funded} deposit-funded, mismatching seeds {:?}", &bad[..bad.len().min(5)]),
    )
}

pub fn staller_scenario(n: usize) -> Scenario {
    let mut s = base_scenario(&format!("complexity-n{n}"), ProtocolKind::Binary, n, 0, (n - 1) / 3, 0);
    s.attack = Attack::RoundStaller;
    s
}

pub fn complexity() -> Verdict {
    let sizes = [4usize, 10, 20, 40];
    let mut means = Vec::new();
    for n in sizes {
        let s = staller_scenario(n);
        let total: u64 = (1..=20).map(|seed| run(&s, seed).packets_post_gst).sum();
        means.push(total as f64 / 20.0);
    }
    let c: Vec<f64> = sizes.iter().zip(&means).map(|(n, m)| m / (*n as f64).powi(3)).collect();
    let ratio = means[3] / means[2];
    let cmax = c.iter().cloned().fold(0.0, f64::max);
    let bounded = c[3] <= cmax + 1e-12 || c[3] <= 1.5 * c[2];
    verdict(
        10,
        (4.0..=12.0).contains(&ratio) && bounded,
        format!(
            "mean messages {:?}, m/n^3 {:?}, m(40)/m(20) = {ratio:.2}",
            means.iter().map(|m| m.round() as u64).collect::<Vec<_>>(),
            c.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

pub fn determinism() -> Verdict {
    let mut short_zlb = convergence_scenario();
    short_zlb.instances = Some(10);
    let mut scenarios = attack_scenarios();
    scenarios.truncate(3);
    scenarios.push(echo_split_scenario());
    scenarios.push(staller_scenario(10));
    scenarios.push(short_zlb);
    let mut bad = Vec::new();
    for s in &scenarios {
        for seed in [3u64, 11] {
            let a: RunRecord = run(s, seed);
            let b = run(s, seed);
            if a != b || csv_string(&[a]) != csv_string(&[b]) {
                bad.push(format!("{}#{seed}", s.name));
            }
        }
    }
    verdict(11, bad.is_empty(), format!("{} scenarios x 2 seeds, differing {bad:?}", scenarios.len()))
}
