//! Scenario files, seeded runs, run records and CSV output.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{Env, ProtocolConfig, TimeoutSchedule};
use crate::analysis::max_branches;
use crate::basilic::{Basilic, BasilicOptions, DecisionMode, InstanceKind};
use crate::committee::{default_threshold, threshold_tolerated, Committee, FaultProfile};
use crate::crypto::{ConsensusId, Ed25519, KeyPair, KeyedHash, Keyring, Layer, ProcessId, SignatureScheme, Signer};
use crate::ledger::DepositPolicy;
use crate::membership::{PoolConfig, ZlbConfig, ZlbNode};
use crate::simnet::{
    BenignBehavior, BenignNode, ConsensusActor, DeceitfulNode, DelayModel, EchoSplit, HonestNode, Input,
    Node, ProcessReport, Protocol, Role, RoundStaller, SimConfig, SimResult, Simulator, TraceLine, MS,
};

pub mod suites;

/// Version of the CSV column layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario field `{field}`: {msg}")]
    Scenario { field: &'static str, msg: String },
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn field_err(field: &'static str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Scenario {
        field,
        msg: msg.into(),
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// One multi-valued instance.
    Multi,
    /// One binary instance.
    Binary,
    /// Repeated instances with membership change.
    Zlb,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Attack {
    #[default]
    None,
    /// Each partition receives a different proposal from every coalition source.
    ReliableBroadcast,
    /// Opposite bits on indices j and k in two partitions.
    BinaryConsensus {
        #[serde(default)]
        j: Option<usize>,
        #[serde(default)]
        k: Option<usize>,
    },
    /// Per-recipient split of one coalition member's echoes.
    EchoSplit,
    /// Coalition coordinators keep the binary instance from deciding.
    RoundStaller,
}

impl Attack {
    pub fn label(&self) -> &'static str {
        match self {
            Attack::None => "none",
            Attack::ReliableBroadcast => "reliable-broadcast",
            Attack::BinaryConsensus { .. } => "binary-consensus",
            Attack::EchoSplit => "echo-split",
            Attack::RoundStaller => "round-staller",
        }
    }

    fn worlds(&self) -> usize {
        match self {
            Attack::ReliableBroadcast | Attack::BinaryConsensus { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    #[default]
    KeyedHash,
    Ed25519,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    pub drop: f64,
    pub garble: f64,
}

/// One experiment. Times in milliseconds; fault counts are mandatory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub protocol: ProtocolKind,
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub q: usize,
    /// Defaults to ceil(2n/3).
    #[serde(default)]
    pub h0: Option<usize>,
    /// Membership-change threshold; defaults to ceil(7n/9).
    #[serde(default)]
    pub h0_prime: Option<usize>,
    #[serde(default)]
    pub attack: Attack,
    pub delay: DelayModel,
    /// Defaults to 50 * delta * n.
    #[serde(default)]
    pub horizon_ms: Option<f64>,
    #[serde(default)]
    pub mode: DecisionMode,
    #[serde(default = "default_schedule")]
    pub timeouts: TimeoutSchedule,
    #[serde(default)]
    pub signatures: SchemeKind,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Behaviour of the q benign processes; defaults to crashing at time 0.
    #[serde(default)]
    pub benign: Option<BenignBehavior>,
    /// Extra misbehaviour of the t Byzantine processes.
    #[serde(default)]
    pub byzantine: Option<ByzantineSpec>,
    /// Honest partitions; defaults to 2 for the partition attacks, else 1.
    #[serde(default)]
    pub partitions: Option<usize>,
    #[serde(default = "yes")]
    pub share_evidence: bool,
    /// Membership-change runs.
    #[serde(default)]
    pub pool: Option<PoolConfig>,
    /// Membership-change runs: instances to complete after the last change.
    #[serde(default)]
    pub instances: Option<usize>,
    #[serde(default)]
    pub deposit: Option<DepositPolicy>,
}

fn default_schedule() -> TimeoutSchedule {
    TimeoutSchedule::Constant
}

fn yes() -> bool {
    true
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn h0(&self) -> usize {
        self.h0.unwrap_or_else(|| default_threshold(self.n))
    }

    pub fn h0_prime(&self) -> usize {
        self.h0_prime.unwrap_or_else(|| (7 * self.n).div_ceil(9))
    }

    pub fn horizon(&self) -> u64 {
        let ms = self
            .horizon_ms
            .unwrap_or(50.0 * self.delay.delta_ms * self.n as f64);
        (ms * MS as f64) as u64
    }

    pub fn worlds(&self) -> usize {
        self.partitions.unwrap_or_else(|| self.attack.worlds()).max(1)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n == 0 {
            return Err(field_err("n", "must be positive"));
        }
        if self.t + self.d + self.q > self.n {
            return Err(field_err("t", format!("t+d+q = {} exceeds n = {}", self.t + self.d + self.q, self.n)));
        }
        let h0 = self.h0();
        if h0 <= self.n / 2 || h0 > self.n {
            return Err(field_err("h0", format!("{h0} not in (n/2, n]")));
        }
        let hp = self.h0_prime();
        if hp <= self.n / 2 || hp > self.n {
            return Err(field_err("h0_prime", format!("{hp} not in (n/2, n]")));
        }
        self.delay
            .validate()
            .map_err(|e| field_err("delay", e.to_string()))?;
        if let Some(h) = self.horizon_ms {
            if !(h > 0.0) {
                return Err(field_err("horizon_ms", "must be positive"));
            }
        }
        if let Some(b) = &self.byzantine {
            if !(0.0..=1.0).contains(&b.drop) || !(0.0..=1.0).contains(&b.garble) {
                return Err(field_err("byzantine", "probabilities must lie in [0, 1]"));
            }
        }
        if let Some(BenignBehavior::OmitFraction { p }) = &self.benign {
            if !(0.0..=1.0).contains(p) {
                return Err(field_err("benign", "p must lie in [0, 1]"));
            }
        }
        let honest = self.n - self.t - self.d - self.q;
        if self.worlds() > honest.max(1) {
            return Err(field_err("partitions", "more partitions than honest processes"));
        }
        match (&self.attack, self.protocol) {
            (Attack::RoundStaller, ProtocolKind::Binary) | (Attack::None, _) => {}
            (Attack::RoundStaller, _) => return Err(field_err("attack", "round-staller needs protocol binary")),
            (Attack::EchoSplit, ProtocolKind::Zlb) => return Err(field_err("attack", "echo-split is a single-instance attack")),
            (Attack::BinaryConsensus { .. }, ProtocolKind::Zlb) => {
                return Err(field_err("attack", "binary-consensus is a single-instance attack"))
            }
            _ => {}
        }
        if self.attack != Attack::None && self.d + self.t == 0 {
            return Err(field_err("attack", "needs at least one deceitful or Byzantine process"));
        }
        if self.protocol == ProtocolKind::Zlb {
            let pool = self.pool.as_ref().ok_or_else(|| field_err("pool", "required for zlb"))?;
            if !(0.0..=1.0).contains(&pool.honest_fraction) {
                return Err(field_err("pool", "honest_fraction must lie in [0, 1]"));
            }
        }
        if let Some(dp) = &self.deposit {
            dp.validate().map_err(|e| field_err("deposit", e.to_string()))?;
        }
        Ok(())
    }

    pub fn profile(&self) -> FaultProfile {
        FaultProfile::new(self.n, self.t, self.d, self.q).expect("validated")
    }

    /// Role of every id: deceitful first, then Byzantine, benign, honest.
    pub fn roles(&self) -> Vec<Role> {
        let benign = self.benign.clone().unwrap_or(BenignBehavior::CrashAt { at_ms: 0.0 });
        (0..self.n)
            .map(|i| {
                if i < self.d {
                    Role::Deceitful
                } else if i < self.d + self.t {
                    Role::Byzantine
                } else if i < self.d + self.t + self.q {
                    Role::Benign(benign.clone())
                } else {
                    Role::Honest
                }
            })
            .collect()
    }

    /// Honest ids grouped into partitions, contiguous, larger groups first.
    pub fn partition_groups(&self) -> Vec<Vec<ProcessId>> {
        let honest: Vec<ProcessId> = (self.d + self.t + self.q..self.n).map(|i| ProcessId(i as u32)).collect();
        split(&honest, self.worlds())
    }

    /// Both safety and liveness hold for this profile and threshold.
    pub fn within_model(&self) -> bool {
        threshold_tolerated(&self.profile(), self.h0()) == Ok((true, true))
    }
}

fn split(ids: &[ProcessId], parts: usize) -> Vec<Vec<ProcessId>> {
    let parts = parts.max(1);
    let base = ids.len() / parts;
    let extra = ids.len() % parts;
    let mut out = Vec::new();
    let mut at = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(ids[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Parses `a..b` (inclusive), `a,b,c` or a single seed.
pub fn parse_seeds(arg: &str) -> Result<Vec<u64>, HarnessError> {
    let bad = || field_err("seeds", format!("cannot parse `{arg}`"));
    if let Some((a, b)) = arg.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    arg.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| bad()))
        .collect()
}

/// Per-run summary; one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub protocol: String,
    pub attack: String,
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub q: usize,
    pub h0: usize,
    pub within_model: bool,
    pub honest: usize,
    pub honest_decided: usize,
    /// Distinct decisions among honest processes, maximised over slots.
    pub branches: usize,
    pub branch_bound: usize,
    /// Honest processes outside the largest agreeing group, summed over slots.
    pub disagreeing: usize,
    pub min_honest_accused: usize,
    pub max_honest_excluded: usize,
    /// Honest ids named by some verified proof (must be 0).
    pub false_accusations: usize,
    pub max_round: u32,
    pub timeouts: u64,
    pub messages: u64,
    pub messages_post_gst: u64,
    pub packets: u64,
    pub packets_post_gst: u64,
    pub end_time_us: u64,
    pub last_decision_us: u64,
    pub horizon_hit: bool,
    pub mean_intra_delay_ms: f64,
    pub mean_cross_delay_ms: f64,
    pub membership_changes: usize,
    pub time_to_detect_us: Option<u64>,
    pub exclusion_us: Option<u64>,
    pub inclusion_us: Option<u64>,
    /// Deceitful fraction of the committee at each epoch, `num/den` joined by `;`.
    pub deceitful_trajectory: String,
    pub agreed_after_change: usize,
    pub instances_after_change: usize,
    pub deposit_flux: Option<f64>,
    pub violation: Option<String>,
}

pub struct RunOutput {
    pub record: RunRecord,
    pub reports: Vec<(ProcessId, Role, ProcessReport)>,
    pub trace: Vec<TraceLine>,
}

fn scheme(kind: SchemeKind) -> Arc<dyn SignatureScheme> {
    match kind {
        SchemeKind::KeyedHash => Arc::new(KeyedHash::new()),
        SchemeKind::Ed25519 => Arc::new(Ed25519),
    }
}

fn node_seed(seed: u64, id: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((id as u64) << 20) ^ salt
}

struct World {
    keyring: Keyring,
    keys: Vec<KeyPair>,
    config: ProtocolConfig,
}

impl World {
    fn env(&self, id: usize) -> Env {
        Env {
            signer: Signer::new(ProcessId(id as u32), self.keys[id].clone(), &self.keyring),
            keyring: self.keyring.clone(),
            config: self.config,
        }
    }
}

pub fn run(s: &Scenario, seed: u64) -> RunRecord {
    run_full(s, seed, false).record
}

pub fn run_full(s: &Scenario, seed: u64, trace: bool) -> RunOutput {
    let extra = match s.protocol {
        ProtocolKind::Zlb => s.pool.as_ref().map_or(0, |p| p.size),
        _ => 0,
    };
    let (keyring, keys) = Keyring::generate(scheme(s.signatures), s.n + extra, seed);
    let mut config = ProtocolConfig::new((s.delay.delta_ms * MS as f64) as u64);
    config.schedule = s.timeouts;
    config.assumed_q = s.q;
    config.assumed_t = s.t;
    let world = World { keyring, keys, config };
    let groups = s.partition_groups();
    let (nodes, pool_roles) = match s.protocol {
        ProtocolKind::Zlb => build_zlb(s, seed, &world, &groups),
        _ => (build_single(s, seed, &world, &groups), Vec::new()),
    };
    let sim = Simulator::new(
        SimConfig {
            delay: s.delay.clone(),
            horizon: s.horizon(),
            seed,
            partitions: groups.clone(),
            trace,
        },
        nodes,
    );
    let res = sim.run();
    let record = summarize(s, seed, &res, &pool_roles);
    RunOutput {
        record,
        reports: res.reports,
        trace: res.trace,
    }
}

fn world_map(groups: &[Vec<ProcessId>]) -> BTreeMap<ProcessId, u16> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(w, g)| g.iter().map(move |p| (*p, w as u16)))
        .collect()
}

fn build_single(s: &Scenario, seed: u64, w: &World, groups: &[Vec<ProcessId>]) -> Vec<Box<dyn Node>> {
    let roles = s.roles();
    let roster: Vec<ProcessId> = (0..s.n).map(|i| ProcessId(i as u32)).collect();
    let coalition: BTreeSet<ProcessId> = roster.iter().copied().filter(|p| roles[p.0 as usize].is_coalition()).collect();
    let cid = ConsensusId::new(Layer::Asmr, 0, 0);
    let kind = match s.protocol {
        ProtocolKind::Binary => InstanceKind::Binary,
        _ => InstanceKind::Multi,
    };
    let opts = BasilicOptions {
        mode: s.mode,
        share_evidence: s.share_evidence,
        validity: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb175);
    let bits: Vec<bool> = (0..s.n).map(|_| rng.random_bool(0.5)).collect();
    let group_a: BTreeSet<ProcessId> = match s.attack {
        Attack::RoundStaller => {
            let honest: Vec<ProcessId> = groups.iter().flatten().copied().collect();
            let a = s.h0().saturating_sub(s.d).min(honest.len());
            honest[..a].iter().copied().collect()
        }
        _ => BTreeSet::new(),
    };
    let honest_input = |i: usize| -> Input {
        match kind {
            InstanceKind::Multi => Input::Value(format!("p{i}").into_bytes()),
            InstanceKind::Binary => match s.attack {
                Attack::RoundStaller => Input::Bit(!group_a.contains(&ProcessId(i as u32))),
                _ => Input::Bit(bits[i]),
            },
        }
    };
    let make = |i: usize, input: Input| -> ConsensusActor {
        let committee = Committee::new(roster.clone(), s.h0()).expect("validated");
        ConsensusActor::new(w.env(i), Basilic::new(cid, committee, kind, opts.clone()), input)
    };
    let worlds = s.worlds();
    let (j, k) = match s.attack {
        Attack::BinaryConsensus { j, k } => {
            let first = |g: usize| groups.get(g).and_then(|g| g.first()).map(|p| p.0 as usize).unwrap_or(0);
            (j.unwrap_or_else(|| first(0)), k.unwrap_or_else(|| first(1.min(groups.len() - 1))))
        }
        _ => (0, 0),
    };
    let echo_zero: BTreeSet<ProcessId> = {
        let honest: Vec<ProcessId> = groups.iter().flatten().copied().collect();
        honest[..honest.len() / 2].iter().copied().collect()
    };
    let world_of = world_map(groups);
    let mut nodes: Vec<Box<dyn Node>> = Vec::new();
    for (i, role) in roles.iter().enumerate() {
        let node: Box<dyn Node> = match role {
            Role::Honest => Box::new(HonestNode::new(Box::new(make(i, honest_input(i))))),
            Role::Benign(b) => Box::new(BenignNode::new(
                Box::new(make(i, honest_input(i))),
                b.clone(),
                node_seed(seed, i, 1),
            )),
            Role::Deceitful | Role::Byzantine => {
                let replicas: Vec<Box<dyn Protocol>> = match s.attack {
                    Attack::RoundStaller => vec![Box::new(RoundStaller::new(
                        w.env(i).signer,
                        cid.sub(0),
                        roster.clone(),
                        coalition.clone(),
                        group_a.clone(),
                    ))],
                    _ => (0..worlds)
                        .map(|wd| -> Box<dyn Protocol> {
                            let input = match (kind, &s.attack) {
                                (InstanceKind::Multi, Attack::ReliableBroadcast) => {
                                    Input::Value(format!("p{i}w{wd}").into_bytes())
                                }
                                (InstanceKind::Binary, Attack::ReliableBroadcast | Attack::BinaryConsensus { .. }) => {
                                    Input::Bit(wd == 0)
                                }
                                _ => honest_input(i),
                            };
                            let mut a = make(i, input);
                            if kind == InstanceKind::Multi && matches!(s.attack, Attack::BinaryConsensus { .. }) {
                                a = a.with_forced(vec![(j, wd == 0), (k, wd != 0)]);
                            }
                            Box::new(a)
                        })
                        .collect(),
                };
                let mut node = DeceitfulNode::new(
                    replicas,
                    world_of.clone(),
                    coalition.clone(),
                    w.env(i).signer,
                    node_seed(seed, i, 2),
                );
                if s.within_model() {
                    node = node.listen_all();
                }
                if s.attack == Attack::EchoSplit {
                    node = node.with_rewriter(Box::new(EchoSplit {
                        zero_to: echo_zero.clone(),
                    }));
                }
                if *role == Role::Byzantine {
                    let b = s.byzantine.unwrap_or(ByzantineSpec { drop: 0.0, garble: 0.0 });
                    node = node.byzantine(b.drop, b.garble);
                }
                Box::new(node)
            }
        };
        nodes.push(node);
    }
    nodes
}

fn build_zlb(s: &Scenario, seed: u64, w: &World, groups: &[Vec<ProcessId>]) -> (Vec<Box<dyn Node>>, Vec<Role>) {
    let pool = s.pool.clone().expect("validated");
    let roles = s.roles();
    // pool candidates: honest fraction honoured exactly, order shuffled by seed
    let honest_pool = (pool.size as f64 * pool.honest_fraction).ceil() as usize;
    let mut pool_roles: Vec<Role> = (0..pool.size)
        .map(|i| if i < honest_pool { Role::Honest } else { Role::Deceitful })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9001);
    for i in (1..pool_roles.len()).rev() {
        let j = rng.random_range(0..=i);
        pool_roles.swap(i, j);
    }
    let all_roles: Vec<Role> = roles.iter().cloned().chain(pool_roles.iter().cloned()).collect();
    let roster: Vec<ProcessId> = (0..s.n).map(|i| ProcessId(i as u32)).collect();
    let candidates: Vec<ProcessId> = (s.n..s.n + pool.size).map(|i| ProcessId(i as u32)).collect();
    let coalition: BTreeSet<ProcessId> = (0..all_roles.len())
        .filter(|i| all_roles[*i].is_coalition())
        .map(|i| ProcessId(i as u32))
        .collect();
    // honest pool members join partitions alternately
    let mut groups: Vec<Vec<ProcessId>> = groups.to_vec();
    let mut next = 0;
    for (i, r) in pool_roles.iter().enumerate() {
        if r.is_honest() {
            let g = next % groups.len();
            groups[g].push(candidates[i]);
            next += 1;
        }
    }
    let world_of = world_map(&groups);
    let cfg = ZlbConfig {
        n: s.n,
        h0: s.h0(),
        h0_prime: s.h0_prime(),
        instances_after_change: s.instances.unwrap_or(100),
        max_instances: s.instances.unwrap_or(100) * 3 + 20,
        share_evidence: s.share_evidence,
    };
    let make = |i: usize, tag: String| -> Box<dyn Protocol> {
        let member = i < s.n;
        Box::new(ZlbNode::new(
            w.env(i),
            cfg.clone(),
            if member { Some(roster.clone()) } else { None },
            candidates.clone(),
            tag,
        ))
    };
    let mut nodes: Vec<Box<dyn Node>> = Vec::new();
    for (i, role) in all_roles.iter().enumerate() {
        let node: Box<dyn Node> = match role {
            Role::Honest => Box::new(HonestNode::new(make(i, String::new()))),
            Role::Benign(b) => Box::new(BenignNode::new(make(i, String::new()), b.clone(), node_seed(seed, i, 1))),
            Role::Deceitful | Role::Byzantine => {
                let replicas = (0..s.worlds()).map(|wd| make(i, format!("/w{wd}"))).collect();
                let mut node = DeceitfulNode::new(
                    replicas,
                    world_of.clone(),
                    coalition.clone(),
                    w.env(i).signer,
                    node_seed(seed, i, 2),
                );
                if *role == Role::Byzantine {
                    let b = s.byzantine.unwrap_or(ByzantineSpec { drop: 0.0, garble: 0.0 });
                    node = node.byzantine(b.drop, b.garble);
                }
                Box::new(node)
            }
        };
        nodes.push(node);
    }
    (nodes, pool_roles)
}

fn summarize(s: &Scenario, seed: u64, res: &SimResult, pool_roles: &[Role]) -> RunRecord {
    let honest: Vec<&(ProcessId, Role, ProcessReport)> =
        res.reports.iter().filter(|(_, r, _)| r.is_honest()).collect();
    let role_of = |p: ProcessId| -> Role {
        let i = p.0 as usize;
        if i < s.n {
            s.roles()[i].clone()
        } else {
            pool_roles.get(i - s.n).cloned().unwrap_or(Role::Honest)
        }
    };
    let honest_ids: BTreeSet<ProcessId> = res
        .reports
        .iter()
        .map(|(p, _, _)| *p)
        .filter(|p| role_of(*p).is_honest())
        .collect();
    // per slot: value -> count among honest
    let mut slots: BTreeMap<(u32, u64), BTreeMap<&str, usize>> = BTreeMap::new();
    for (_, _, r) in &honest {
        for d in &r.decisions {
            *slots.entry((d.epoch, d.slot)).or_default().entry(d.value.as_str()).or_default() += 1;
        }
    }
    let branches = slots.values().map(|m| m.len()).max().unwrap_or(0);
    let disagreeing: usize = slots
        .values()
        .map(|m| m.values().sum::<usize>() - m.values().max().copied().unwrap_or(0))
        .sum();
    let active: Vec<&&(ProcessId, Role, ProcessReport)> = honest
        .iter()
        .filter(|(_, _, r)| r.extra.get("member").is_none_or(|v| v == "true"))
        .collect();
    let decided = active.iter().filter(|(_, _, r)| !r.decisions.is_empty() && r.extra.get("done").is_none_or(|v| v == "true")).count();
    let false_acc: BTreeSet<ProcessId> = res
        .reports
        .iter()
        .filter(|(_, r, _)| r.is_honest())
        .flat_map(|(_, _, r)| r.accused.iter().copied())
        .filter(|p| honest_ids.contains(p))
        .collect();
    let dt = s.d + s.t;
    let branch_bound = max_branches(s.n, s.h0(), dt).unwrap_or(usize::MAX);
    let min_acc = active.iter().map(|(_, _, r)| r.accused.len()).min().unwrap_or(0);
    let max_exc = active.iter().map(|(_, _, r)| r.excluded.len()).max().unwrap_or(0);
    let max_round = res.reports.iter().filter(|(_, r, _)| r.is_honest()).flat_map(|(_, _, r)| r.decisions.iter().map(|d| d.round)).max().unwrap_or(0);
    let timeouts = honest.iter().map(|(_, _, r)| r.timeouts as u64).sum();
    let last_decision = honest.iter().flat_map(|(_, _, r)| r.decisions.iter().map(|d| d.time)).max().unwrap_or(0);

    // membership metrics from the honest process that saw the most epochs
    let zlb = honest
        .iter()
        .filter(|(_, _, r)| r.extra.contains_key("committees"))
        .max_by_key(|(p, _, r)| (r.extra.get("epoch").and_then(|e| e.parse::<u32>().ok()).unwrap_or(0), std::cmp::Reverse(*p)));
    let mut changes = 0;
    let mut trajectory = String::new();
    let (mut detect, mut excl, mut incl, mut agreed, mut after) = (None, None, None, 0, 0);
    let mut flux = None;
    if let Some((_, _, r)) = zlb {
        let committees: Vec<Vec<u32>> = serde_json::from_str(&r.extra["committees"]).unwrap_or_default();
        changes = committees.len().saturating_sub(1);
        trajectory = committees
            .iter()
            .map(|c| {
                let bad = c.iter().filter(|p| role_of(ProcessId(**p)).is_coalition()).count();
                format!("{bad}/{}", c.len())
            })
            .collect::<Vec<_>>()
            .join(";");
        let num = |k: &str| r.extra.get(k).and_then(|v| v.parse::<u64>().ok());
        detect = num("detect_us");
        excl = num("exclusion_us");
        incl = num("inclusion_us");
        let final_epoch = committees.len().saturating_sub(1) as u32;
        let final_slots: Vec<&BTreeMap<&str, usize>> = slots
            .iter()
            .filter(|((e, _), _)| *e == final_epoch)
            .map(|(_, m)| m)
            .collect();
        after = final_slots.len();
        agreed = final_slots.iter().filter(|m| m.len() == 1).count();
        if let Some(dp) = &s.deposit {
            let slashed = committees
                .first()
                .map(|c0| {
                    let last: BTreeSet<u32> = committees.last().unwrap().iter().copied().collect();
                    c0.iter().filter(|p| !last.contains(p)).count()
                })
                .unwrap_or(0);
            let forks: usize = slots.values().map(|m| m.len().saturating_sub(1)).sum();
            flux = Some(slashed as f64 * dp.per_process_deposit(s.n) - forks as f64 * dp.gain_cap as f64);
        }
    }

    let within = s.within_model();
    let mut violation = None;
    if !false_acc.is_empty() {
        violation = Some(format!("honest accused: {false_acc:?}"));
    } else if within && branches > 1 && s.protocol != ProtocolKind::Zlb {
        violation = Some("agreement".into());
    } else if within && decided < active.len() && s.protocol != ProtocolKind::Zlb {
        violation = Some("termination".into());
    }
    RunRecord {
        schema_version: SCHEMA_VERSION,
        scenario: s.name.clone(),
        seed,
        protocol: format!("{:?}", s.protocol).to_lowercase(),
        attack: s.attack.label().into(),
        n: s.n,
        t: s.t,
        d: s.d,
        q: s.q,
        h0: s.h0(),
        within_model: within,
        honest: active.len(),
        honest_decided: decided,
        branches,
        branch_bound,
        disagreeing,
        min_honest_accused: min_acc,
        max_honest_excluded: max_exc,
        false_accusations: false_acc.len(),
        max_round,
        timeouts,
        messages: res.metrics.messages,
        messages_post_gst: res.metrics.messages_post_gst,
        packets: res.metrics.packets,
        packets_post_gst: res.metrics.packets_post_gst,
        end_time_us: res.metrics.end_time,
        last_decision_us: last_decision,
        horizon_hit: res.metrics.horizon_hit,
        mean_intra_delay_ms: res.metrics.mean_intra_delay_ms,
        mean_cross_delay_ms: res.metrics.mean_cross_delay_ms,
        membership_changes: changes,
        time_to_detect_us: detect,
        exclusion_us: excl,
        inclusion_us: incl,
        deceitful_trajectory: trajectory,
        agreed_after_change: agreed,
        instances_after_change: after,
        deposit_flux: flux,
        violation,
    }
}

/// Writes records as CSV with a header row.
pub fn write_csv<W: std::io::Write>(out: W, records: &[RunRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(records: &[RunRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, records).expect("in-memory csv");
    String::from_utf8(buf).expect("utf8 csv")
}

/// Runs seeds on all available cores; records come back in seed-list order.
pub fn run_batch(s: &Scenario, seeds: &[u64]) -> Vec<RunRecord> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(seeds.len());
    if workers <= 1 {
        return seeds.iter().map(|seed| run(s, *seed)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<RunRecord>> = vec![None; seeds.len()];
    let done: Vec<Vec<(usize, RunRecord)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(seed) = seeds.get(i) else { break };
                        mine.push((i, run(s, *seed)));
                    }
                    mine
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_and_split() {
        assert_eq!(parse_seeds("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("3,9").unwrap(), vec![3, 9]);
        assert!(parse_seeds("x").is_err());
        let ids: Vec<ProcessId> = (0..5).map(ProcessId).collect();
        let parts = split(&ids, 2);
        assert_eq!(parts[0].len(), 3);
        assert_eq!(parts[1].len(), 2);
    }
}
