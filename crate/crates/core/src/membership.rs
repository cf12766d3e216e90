//! Committee change: exclusion of proven fraudsters, inclusion from a
//! candidate pool, and the replicated state machine that hosts both.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{Effects, Env, Packet, TimerKey};
use crate::basilic::{Basilic, BasilicOptions, BlockCertificate, DecisionMode, InstanceKind, Outcome};
use crate::committee::Committee;
use crate::crypto::{
    decode_pofs, encode_pofs, sha256, verify_pofs, ConsensusId, Digest, Keyring, Layer, MessageKind, PofKey,
    ProcessId, ProofOfFraud,
};
use crate::simnet::{DecisionRecord, ProcessReport, Protocol, Time};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MembershipError {
    #[error("pool exhausted: needed {needed}, found {found}")]
    PoolExhausted { needed: usize, found: usize },
    #[error("invalid certificate at height {height} ({consensus})")]
    InvalidCertificate { height: usize, consensus: String },
    #[error("catch-up roster mismatch")]
    Roster,
}

/// Reaction to newly learned proofs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MembershipAction {
    None,
    StartExclusion,
    /// Exclusion is running and the working committee shrank to this set.
    UpdateWorking(Vec<ProcessId>),
}

/// Proofs of fraud gathered against the durable committee.
#[derive(Clone, Debug)]
pub struct MembershipState {
    committee: Vec<ProcessId>,
    n: usize,
    h0: usize,
    pofs: BTreeMap<PofKey, ProofOfFraud>,
    excluding: bool,
}

impl MembershipState {
    pub fn new(committee: Vec<ProcessId>, h0: usize) -> Self {
        MembershipState {
            n: committee.len(),
            committee,
            h0,
            pofs: BTreeMap::new(),
            excluding: false,
        }
    }

    /// Proofs needed to trigger a change, 2h0 - n.
    pub fn f_d(&self) -> usize {
        (2 * self.h0).saturating_sub(self.n)
    }

    pub fn committee(&self) -> &[ProcessId] {
        &self.committee
    }

    pub fn is_excluding(&self) -> bool {
        self.excluding
    }

    /// Committee members named by a stored proof.
    pub fn accused(&self) -> BTreeSet<ProcessId> {
        self.pofs
            .values()
            .map(|p| p.accused())
            .filter(|p| self.committee.contains(p))
            .collect()
    }

    /// Every process ever named by a stored proof.
    pub fn all_accused(&self) -> BTreeSet<ProcessId> {
        self.pofs.values().map(|p| p.accused()).collect()
    }

    /// Committee minus the accused.
    pub fn working(&self) -> Vec<ProcessId> {
        let acc = self.accused();
        self.committee.iter().copied().filter(|p| !acc.contains(p)).collect()
    }

    /// One proof per accused committee member.
    pub fn proposal(&self) -> Vec<ProofOfFraud> {
        let mut seen = BTreeSet::new();
        self.pofs
            .values()
            .filter(|p| self.committee.contains(&p.accused()) && seen.insert(p.accused()))
            .cloned()
            .collect()
    }

    /// Verifies and stores proofs; returns the action plus the fresh proofs.
    pub fn on_pofs(&mut self, pofs: &[ProofOfFraud], keyring: &Keyring) -> (MembershipAction, Vec<ProofOfFraud>) {
        let before = self.accused();
        let mut fresh = Vec::new();
        for p in pofs {
            if self.pofs.contains_key(&p.key()) || !p.verify(keyring) {
                continue;
            }
            self.pofs.insert(p.key(), p.clone());
            fresh.push(p.clone());
        }
        let after = self.accused();
        let action = if self.excluding {
            if after.len() > before.len() {
                MembershipAction::UpdateWorking(self.working())
            } else {
                MembershipAction::None
            }
        } else if after.len() >= self.f_d().max(1) {
            self.excluding = true;
            MembershipAction::StartExclusion
        } else {
            MembershipAction::None
        };
        (action, fresh)
    }

    /// Installs the committee produced by a completed change.
    pub fn install(&mut self, committee: Vec<ProcessId>) {
        self.committee = committee;
        self.excluding = false;
    }
}

/// Pool size and the fraction of honest candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub size: usize,
    #[serde(default = "two_thirds")]
    pub honest_fraction: f64,
}

fn two_thirds() -> f64 {
    2.0 / 3.0
}

/// Candidates in a fixed order; none is proposed twice.
#[derive(Clone, Debug)]
pub struct Pool {
    candidates: Vec<ProcessId>,
    proposed: BTreeSet<ProcessId>,
}

impl Pool {
    pub fn new(candidates: Vec<ProcessId>) -> Self {
        Pool {
            candidates,
            proposed: BTreeSet::new(),
        }
    }

    /// Next `k` candidates not proposed before and not in `members`.
    pub fn take(&mut self, k: usize, members: &[ProcessId]) -> Vec<ProcessId> {
        let out: Vec<ProcessId> = self
            .candidates
            .iter()
            .copied()
            .filter(|c| !self.proposed.contains(c) && !members.contains(c))
            .take(k)
            .collect();
        self.proposed.extend(out.iter().copied());
        out
    }

    pub fn mark(&mut self, ids: impl IntoIterator<Item = ProcessId>) {
        self.proposed.extend(ids);
    }

    pub fn remaining(&self) -> usize {
        self.candidates.iter().filter(|c| !self.proposed.contains(c)).count()
    }
}

/// Picks `need` candidates round-robin across proposals ordered by proposer,
/// skipping duplicates and current members.
pub fn choose(
    proposals: &[(ProcessId, Vec<ProcessId>)],
    need: usize,
    members: &[ProcessId],
) -> Result<Vec<ProcessId>, MembershipError> {
    let mut sorted: Vec<&(ProcessId, Vec<ProcessId>)> = proposals.iter().collect();
    sorted.sort_by_key(|(p, _)| *p);
    let depth = sorted.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    'outer: for i in 0..depth {
        for (_, cands) in &sorted {
            if out.len() == need {
                break 'outer;
            }
            if let Some(c) = cands.get(i) {
                if !out.contains(c) && !members.contains(c) {
                    out.push(*c);
                }
            }
        }
    }
    if out.len() < need {
        return Err(MembershipError::PoolExhausted {
            needed: need,
            found: out.len(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProposal {
    /// First undecided replicated-state-machine index of the proposer.
    pub next: u64,
    pub candidates: Vec<ProcessId>,
}

/// Digest of a decided outcome: hash of its superblock.
pub fn outcome_digest(outcome: &Outcome) -> Digest {
    sha256(&serde_json::to_vec(&outcome.superblock()).expect("serializable"))
}

/// One decided instance with the committee its certificate is checked against.
#[derive(Clone, Debug)]
pub struct ChainEntry {
    pub consensus: ConsensusId,
    pub roster: Vec<ProcessId>,
    pub h0: usize,
    pub pre_excluded: Vec<ProcessId>,
    pub digest: Digest,
    pub cert: BlockCertificate,
}

impl ChainEntry {
    pub fn verify(&self, keyring: &Keyring) -> Result<Outcome, ()> {
        if self.cert.consensus != self.consensus {
            return Err(());
        }
        let outcome = self
            .cert
            .verify(keyring, &self.roster, self.h0, &self.pre_excluded)
            .map_err(|_| ())?;
        if outcome_digest(&outcome) != self.digest {
            return Err(());
        }
        Ok(outcome)
    }
}

/// Chain state handed to a newly included process.
#[derive(Clone, Debug)]
pub struct CatchupPackage {
    pub epoch: u32,
    pub roster: Vec<ProcessId>,
    pub restart: u64,
    pub entries: Vec<ChainEntry>,
}

impl CatchupPackage {
    /// Signed messages carried by all certificates.
    pub fn weight(&self) -> usize {
        self.entries.iter().map(|e| e.cert.weight()).sum()
    }
}

/// Outcome of a successful catch-up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Synced {
    pub verified: usize,
    /// Roster of every epoch, genesis first.
    pub rosters: Vec<Vec<ProcessId>>,
}

/// Verifies each block certificate in order and re-derives the final roster
/// from the last inclusion decision.
pub fn catch_up(pkg: &CatchupPackage, keyring: &Keyring, genesis: &[ProcessId]) -> Result<Synced, MembershipError> {
    let mut rosters = vec![genesis.to_vec()];
    for (height, e) in pkg.entries.iter().enumerate() {
        let outcome = e.verify(keyring).map_err(|_| MembershipError::InvalidCertificate {
            height,
            consensus: e.consensus.to_string(),
        })?;
        if e.consensus.layer == Layer::Inclusion {
            let removed: BTreeSet<ProcessId> = e.pre_excluded.iter().copied().collect();
            let remaining: Vec<ProcessId> = e.roster.iter().copied().filter(|p| !removed.contains(p)).collect();
            let proposals = inclusion_proposals(&e.roster, &outcome);
            let chosen = choose(&proposals, removed.len(), &e.roster)?;
            rosters.push(remaining.into_iter().chain(chosen).collect());
        }
    }
    if rosters.last() != Some(&pkg.roster) {
        return Err(MembershipError::Roster);
    }
    Ok(Synced {
        verified: pkg.entries.len(),
        rosters,
    })
}

/// Threshold for the reconfiguration instances once `excluded` members are
/// out. Never below a strict majority of the rest, so two halves of the
/// remaining members cannot both decide.
pub fn reconfig_threshold(n: usize, h0_prime: usize, excluded: usize) -> usize {
    let rest = n.saturating_sub(excluded);
    h0_prime.max(excluded + rest / 2 + 1).min(n)
}

fn inclusion_proposals(roster: &[ProcessId], outcome: &Outcome) -> Vec<(ProcessId, Vec<ProcessId>)> {
    outcome
        .selected()
        .into_iter()
        .filter_map(|(k, v)| {
            let p: InclusionProposal = serde_json::from_slice(v).ok()?;
            Some((roster[k], p.candidates))
        })
        .collect()
}

fn decided_pofs(outcome: &Outcome) -> Vec<ProofOfFraud> {
    outcome.superblock().iter().filter_map(|v| decode_pofs(v).ok()).flatten().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZlbConfig {
    pub n: usize,
    pub h0: usize,
    pub h0_prime: usize,
    /// Instances to decide in the final committee before stopping.
    pub instances_after_change: usize,
    pub max_instances: usize,
    pub share_evidence: bool,
}

/// Decided instances kept alive to answer slower peers.
const WINDOW: u64 = 64;
/// Packets buffered for instances not yet started.
const BUFFER_CAP: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Eq)]
enum Stage {
    Normal,
    Excluding(ConsensusId),
    Including(ConsensusId, Vec<ProcessId>),
    Halted,
}

/// Replicated state machine over repeated Basilic instances with membership change.
pub struct ZlbNode {
    env: Env,
    cfg: ZlbConfig,
    tag: String,
    genesis: Vec<ProcessId>,
    roster: Option<Vec<ProcessId>>,
    epoch: u32,
    index: u64,
    stage: Stage,
    membership: MembershipState,
    pool: Pool,
    instances: BTreeMap<ConsensusId, Basilic>,
    buffer: BTreeMap<ConsensusId, Vec<(ProcessId, Packet)>>,
    buffered: usize,
    chain: Vec<ChainEntry>,
    committees: Vec<Vec<ProcessId>>,
    excluded: BTreeSet<ProcessId>,
    decisions: Vec<DecisionRecord>,
    decided_in_epoch: usize,
    decided_total: usize,
    timeouts: u32,
    uncertified: u32,
    detect_at: Option<Time>,
    exclusion_us: Option<Time>,
    inclusion_us: Option<Time>,
    stage_started: Time,
    error: Option<String>,
}

impl ZlbNode {
    pub fn new(env: Env, cfg: ZlbConfig, roster: Option<Vec<ProcessId>>, candidates: Vec<ProcessId>, tag: String) -> Self {
        let genesis: Vec<ProcessId> = (0..cfg.n).map(|i| ProcessId(i as u32)).collect();
        let membership = MembershipState::new(genesis.clone(), cfg.h0);
        ZlbNode {
            committees: if roster.is_some() { vec![genesis.clone()] } else { Vec::new() },
            env,
            tag,
            genesis,
            roster,
            epoch: 0,
            index: 0,
            stage: Stage::Normal,
            membership,
            pool: Pool::new(candidates),
            instances: BTreeMap::new(),
            buffer: BTreeMap::new(),
            buffered: 0,
            chain: Vec::new(),
            excluded: BTreeSet::new(),
            decisions: Vec::new(),
            decided_in_epoch: 0,
            decided_total: 0,
            timeouts: 0,
            uncertified: 0,
            detect_at: None,
            exclusion_us: None,
            inclusion_us: None,
            stage_started: 0,
            error: None,
            cfg,
        }
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn is_member(&self) -> bool {
        self.roster.as_ref().is_some_and(|r| r.contains(&self.env.me()))
    }

    fn current(&self) -> ConsensusId {
        match &self.stage {
            Stage::Excluding(c) | Stage::Including(c, _) => *c,
            _ => ConsensusId::new(Layer::Asmr, self.epoch, self.index),
        }
    }

    fn target_reached(&self) -> bool {
        self.decided_in_epoch >= self.cfg.instances_after_change || self.decided_total >= self.cfg.max_instances
    }

    fn options(&self, validity: Option<crate::basilic::Validity>, evidence: bool) -> BasilicOptions {
        BasilicOptions {
            mode: DecisionMode::Superblock,
            share_evidence: evidence,
            validity,
        }
    }

    fn start_asmr(&mut self, now: Time, out: &mut Effects) {
        let Some(roster) = self.roster.clone() else { return };
        if self.target_reached() || !roster.contains(&self.env.me()) {
            return;
        }
        let cid = ConsensusId::new(Layer::Asmr, self.epoch, self.index);
        let mut committee = Committee::new(roster, self.cfg.h0).expect("validated threshold");
        committee.update(&self.membership.proposal(), &self.env.keyring);
        let inst = Basilic::new(cid, committee, InstanceKind::Multi, self.options(None, self.cfg.share_evidence));
        let value = format!("b:{}:{}:{}{}", self.epoch, self.index, self.env.me().0, self.tag).into_bytes();
        self.install(now, cid, inst, value, out);
    }

    fn install(&mut self, now: Time, cid: ConsensusId, mut inst: Basilic, value: Vec<u8>, out: &mut Effects) {
        let _ = inst.propose(&self.env, value, out);
        self.instances.insert(cid, inst);
        if let Some(pending) = self.buffer.remove(&cid) {
            self.buffered -= pending.len();
            for p in pending {
                self.deliver(cid, &p.1, out);
            }
        }
        self.after(now, cid, out);
    }

    fn deliver(&mut self, cid: ConsensusId, packet: &Packet, out: &mut Effects) {
        if let Some(inst) = self.instances.get_mut(&cid) {
            inst.handle(&self.env, packet, out);
        }
    }

    /// Harvests proofs and decisions after any step of instance `cid`.
    fn after(&mut self, now: Time, cid: ConsensusId, out: &mut Effects) {
        let fresh = match self.instances.get_mut(&cid) {
            Some(inst) => inst.take_new_pofs(),
            None => return,
        };
        if !fresh.is_empty() {
            self.learn(now, fresh, out);
        }
        if cid != self.current() {
            return;
        }
        let decided = self.instances.get(&cid).is_some_and(|i| i.is_decided() && !i.is_stopped());
        if !decided {
            return;
        }
        match self.stage.clone() {
            Stage::Normal => self.on_asmr_decided(now, cid, out),
            Stage::Excluding(_) => self.on_exclusion_decided(now, cid, out),
            Stage::Including(_, removed) => self.on_inclusion_decided(now, cid, removed, out),
            Stage::Halted => {}
        }
    }

    fn record_entry(&mut self, cid: ConsensusId, removed: &[ProcessId]) -> Option<Outcome> {
        let inst = self.instances.get(&cid)?;
        let outcome = inst.outcome()?.clone();
        if let Some(cert) = inst.certificate() {
            let c = inst.committee();
            // joiners re-derive the roster from this set, so removed members stay in it
            let pre: Vec<ProcessId> = c
                .excluded()
                .iter()
                .copied()
                .filter(|p| removed.contains(p) || !cert.pofs.iter().any(|f| f.accused() == *p))
                .collect();
            self.chain.push(ChainEntry {
                consensus: cid,
                roster: c.roster().to_vec(),
                h0: c.h0(),
                pre_excluded: pre,
                digest: outcome_digest(&outcome),
                cert,
            });
        }
        Some(outcome)
    }

    fn on_asmr_decided(&mut self, now: Time, cid: ConsensusId, out: &mut Effects) {
        let Some(outcome) = self.record_entry(cid, &[]) else { return };
        let stats = self.instances[&cid].stats();
        self.decisions.push(DecisionRecord {
            epoch: self.epoch,
            slot: cid.index,
            value: hex::encode(outcome_digest(&outcome)),
            time: now,
            round: stats.max_round,
        });
        self.decided_in_epoch += 1;
        self.decided_total += 1;
        self.index += 1;
        self.prune();
        self.start_asmr(now, out);
    }

    fn prune(&mut self) {
        let (epoch, index) = (self.epoch, self.index);
        let stale: Vec<ConsensusId> = self
            .instances
            .keys()
            .filter(|c| c.layer == Layer::Asmr && (c.epoch < epoch || c.index + WINDOW < index))
            .copied()
            .collect();
        for c in stale {
            let inst = self.instances.remove(&c).expect("present");
            let s = inst.stats();
            self.timeouts += s.timeouts;
            self.uncertified += s.uncertified;
        }
    }

    fn learn(&mut self, now: Time, pofs: Vec<ProofOfFraud>, out: &mut Effects) {
        let (action, fresh) = self.membership.on_pofs(&pofs, &self.env.keyring);
        if fresh.is_empty() {
            return;
        }
        let live: Vec<ConsensusId> = self
            .instances
            .iter()
            .filter(|(c, i)| !i.is_stopped() && (c.epoch == self.epoch || c.layer != Layer::Asmr))
            .map(|(c, _)| *c)
            .collect();
        for c in live {
            if let Some(inst) = self.instances.get_mut(&c) {
                inst.add_pofs(&self.env, fresh.clone(), out);
                inst.take_new_pofs();
            }
        }
        if action == MembershipAction::StartExclusion && self.roster.is_some() {
            self.start_exclusion(now, out);
        }
    }

    fn start_exclusion(&mut self, now: Time, out: &mut Effects) {
        let roster = self.roster.clone().expect("member");
        if let Some(inst) = self.instances.get_mut(&ConsensusId::new(Layer::Asmr, self.epoch, self.index)) {
            inst.stop();
        }
        self.detect_at.get_or_insert(now);
        self.stage_started = now;
        let cid = ConsensusId::new(Layer::Exclusion, self.epoch, 0);
        self.stage = Stage::Excluding(cid);
        let accused = self.membership.accused();
        let h = reconfig_threshold(roster.len(), self.cfg.h0_prime, accused.len());
        let committee = Committee::with_excluded(roster, h, accused).expect("validated threshold");
        let keyring = self.env.keyring.clone();
        let validity: crate::basilic::Validity =
            Arc::new(move |v: &[u8]| decode_pofs(v).is_ok_and(|p| !p.is_empty() && verify_pofs(&p, &keyring)));
        let inst = Basilic::new(cid, committee, InstanceKind::Multi, self.options(Some(validity), false));
        let value = encode_pofs(&self.membership.proposal());
        self.install(now, cid, inst, value, out);
    }

    fn on_exclusion_decided(&mut self, now: Time, cid: ConsensusId, out: &mut Effects) {
        let Some(outcome) = self.record_entry(cid, &[]) else { return };
        let roster = self.roster.clone().expect("member");
        let pofs: Vec<ProofOfFraud> = decided_pofs(&outcome)
            .into_iter()
            .filter(|p| p.verify(&self.env.keyring))
            .collect();
        self.membership.on_pofs(&pofs, &self.env.keyring);
        let removed: Vec<ProcessId> = {
            let acc: BTreeSet<ProcessId> = pofs.iter().map(|p| p.accused()).collect();
            roster.iter().copied().filter(|p| acc.contains(p)).collect()
        };
        self.exclusion_us.get_or_insert(now - self.stage_started);
        self.stage_started = now;
        let icid = ConsensusId::new(Layer::Inclusion, self.epoch, 0);
        self.stage = Stage::Including(icid, removed.clone());
        let h = reconfig_threshold(roster.len(), self.cfg.h0_prime, removed.len());
        let committee =
            Committee::with_excluded(roster.clone(), h, removed.iter().copied()).expect("validated threshold");
        let validity: crate::basilic::Validity =
            Arc::new(|v: &[u8]| serde_json::from_slice::<InclusionProposal>(v).is_ok());
        let inst = Basilic::new(icid, committee, InstanceKind::Multi, self.options(Some(validity), false));
        let proposal = InclusionProposal {
            next: self.index,
            candidates: self.pool.take(removed.len(), &roster),
        };
        let value = serde_json::to_vec(&proposal).expect("serializable");
        self.install(now, icid, inst, value, out);
    }

    fn on_inclusion_decided(&mut self, now: Time, cid: ConsensusId, removed: Vec<ProcessId>, out: &mut Effects) {
        let Some(outcome) = self.record_entry(cid, &removed) else { return };
        let roster = self.roster.clone().expect("member");
        let proposals = inclusion_proposals(&roster, &outcome);
        let chosen = match choose(&proposals, removed.len(), &roster) {
            Ok(c) => c,
            Err(e) => {
                self.error = Some(e.to_string());
                self.stage = Stage::Halted;
                return;
            }
        };
        let restart = outcome
            .selected()
            .iter()
            .filter_map(|(_, v)| serde_json::from_slice::<InclusionProposal>(v).ok())
            .map(|p| p.next)
            .max()
            .unwrap_or(self.index);
        self.inclusion_us.get_or_insert(now - self.stage_started);
        self.excluded.extend(removed.iter().copied());
        self.pool.mark(chosen.iter().copied());
        let next: Vec<ProcessId> = roster
            .iter()
            .copied()
            .filter(|p| !removed.contains(p))
            .chain(chosen.iter().copied())
            .collect();
        let pkg = Arc::new(CatchupPackage {
            epoch: self.epoch + 1,
            roster: next.clone(),
            restart,
            entries: self.chain.clone(),
        });
        for c in &chosen {
            out.sends.push((*c, Packet::Catchup(pkg.clone())));
        }
        self.enter_epoch(now, self.epoch + 1, next, restart, out);
    }

    fn enter_epoch(&mut self, now: Time, epoch: u32, roster: Vec<ProcessId>, restart: u64, out: &mut Effects) {
        self.epoch = epoch;
        self.index = restart;
        self.decided_in_epoch = 0;
        self.membership.install(roster.clone());
        self.committees.push(roster.clone());
        self.roster = Some(roster);
        self.stage = Stage::Normal;
        self.prune();
        // drop buffered packets of epochs that can no longer start
        let old: Vec<ConsensusId> = self.buffer.keys().filter(|c| c.epoch < epoch && c.layer == Layer::Asmr).copied().collect();
        for c in old {
            self.buffered -= self.buffer.remove(&c).map_or(0, |v| v.len());
        }
        self.start_asmr(now, out);
        // proofs against new members may have arrived before the handover
        if self.membership.on_pofs(&[], &self.env.keyring).0 == MembershipAction::StartExclusion {
            self.start_exclusion(now, out);
        }
    }

    fn on_catchup(&mut self, now: Time, from: ProcessId, pkg: &CatchupPackage, out: &mut Effects) {
        if self.is_member() || !pkg.roster.contains(&self.env.me()) || !pkg.roster.contains(&from) {
            return;
        }
        let synced = match catch_up(pkg, &self.env.keyring, &self.genesis) {
            Ok(s) => s,
            Err(e) => {
                self.error = Some(e.to_string());
                return;
            }
        };
        self.chain = pkg.entries.clone();
        for e in &self.chain {
            if e.consensus.layer == Layer::Inclusion {
                self.excluded.extend(e.pre_excluded.iter().copied());
            }
        }
        // the last roster is pushed again when entering the epoch
        self.committees = synced.rosters[..synced.rosters.len() - 1].to_vec();
        self.pool.mark(synced.rosters.iter().flatten().copied());
        for e in &pkg.entries {
            for p in &e.cert.pofs {
                self.membership.pofs.insert(p.key(), p.clone());
            }
        }
        self.enter_epoch(now, pkg.epoch, pkg.roster.clone(), pkg.restart, out);
    }

    fn buffer_packet(&mut self, from: ProcessId, cid: ConsensusId, packet: &Packet) {
        let future = cid.epoch > self.epoch
            || (cid.epoch == self.epoch
                && match cid.layer {
                    Layer::Asmr => cid.index > self.index,
                    _ => true,
                })
            || self.roster.is_none();
        if !future {
            return;
        }
        if self.buffered >= BUFFER_CAP {
            // shed the furthest instance first
            if let Some((&last, _)) = self.buffer.iter().next_back() {
                if last <= cid {
                    return;
                }
                self.buffered -= self.buffer.remove(&last).map_or(0, |v| v.len());
            }
        }
        self.buffer.entry(cid).or_default().push((from, packet.clone()));
        self.buffered += 1;
    }
}

impl Protocol for ZlbNode {
    fn me(&self) -> ProcessId {
        self.env.me()
    }

    fn start(&mut self, now: Time, out: &mut Effects) {
        if self.roster.is_some() {
            self.start_asmr(now, out);
        }
    }

    fn on_packet(&mut self, now: Time, from: ProcessId, packet: &Packet, out: &mut Effects) {
        if let Packet::Catchup(pkg) = packet {
            self.on_catchup(now, from, pkg, out);
            return;
        }
        if self.stage == Stage::Halted {
            return;
        }
        let mut pofs = Vec::new();
        for m in packet.messages() {
            if m.kind == MessageKind::PofList {
                if let Ok(p) = decode_pofs(&m.payload) {
                    pofs.extend(p);
                }
            }
        }
        if !pofs.is_empty() && self.roster.is_some() {
            self.learn(now, pofs, out);
        }
        let Some(cid) = packet.consensus() else { return };
        if self.instances.contains_key(&cid) {
            self.deliver(cid, packet, out);
            self.after(now, cid, out);
        } else {
            self.buffer_packet(from, cid, packet);
        }
    }

    fn on_timer(&mut self, now: Time, key: TimerKey, out: &mut Effects) {
        if let Some(inst) = self.instances.get_mut(&key.consensus) {
            inst.on_timer(&self.env, key, out);
            self.after(now, key.consensus, out);
        }
    }

    fn audience(&self) -> Vec<ProcessId> {
        self.roster.clone().unwrap_or_default()
    }

    fn done(&self) -> bool {
        match self.stage {
            Stage::Halted => true,
            Stage::Normal => !self.is_member() || self.target_reached(),
            _ => false,
        }
    }

    fn report(&self) -> ProcessReport {
        let mut timeouts = self.timeouts;
        let mut uncertified = self.uncertified;
        for inst in self.instances.values() {
            let s = inst.stats();
            timeouts += s.timeouts;
            uncertified += s.uncertified;
        }
        let mut extra = BTreeMap::new();
        extra.insert("member".into(), self.is_member().to_string());
        extra.insert("done".into(), self.done().to_string());
        extra.insert("epoch".into(), self.epoch.to_string());
        extra.insert("index".into(), self.index.to_string());
        let committees: Vec<Vec<u32>> = self.committees.iter().map(|c| c.iter().map(|p| p.0).collect()).collect();
        extra.insert("committees".into(), serde_json::to_string(&committees).expect("serializable"));
        for (k, v) in [
            ("detect_us", self.detect_at),
            ("exclusion_us", self.exclusion_us),
            ("inclusion_us", self.inclusion_us),
        ] {
            if let Some(v) = v {
                extra.insert(k.into(), v.to_string());
            }
        }
        if let Some(e) = &self.error {
            extra.insert("error".into(), e.clone());
        }
        ProcessReport {
            decisions: self.decisions.clone(),
            accused: self.membership.all_accused(),
            excluded: self.excluded.clone(),
            committee: self.roster.clone().unwrap_or_default(),
            timeouts,
            uncertified,
            extra,
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ProcessId> {
        v.iter().map(|i| ProcessId(*i)).collect()
    }

    #[test]
    fn round_robin_choice() {
        let props = vec![(ProcessId(1), ids(&[10, 11, 12])), (ProcessId(0), ids(&[20, 21, 22]))];
        assert_eq!(choose(&props, 3, &[]).unwrap(), ids(&[20, 10, 21]));
        let one = vec![(ProcessId(0), ids(&[5, 6, 7]))];
        assert_eq!(choose(&one, 2, &[]).unwrap(), ids(&[5, 6]));
        let dup = vec![(ProcessId(0), ids(&[5, 6])), (ProcessId(1), ids(&[5, 6]))];
        assert_eq!(choose(&dup, 2, &[]).unwrap(), ids(&[5, 6]));
        assert_eq!(
            choose(&dup, 3, &[]),
            Err(MembershipError::PoolExhausted { needed: 3, found: 2 })
        );
    }

    #[test]
    fn pool_never_repeats() {
        let mut pool = Pool::new(ids(&[9, 10, 11, 12]));
        assert_eq!(pool.take(2, &ids(&[9])), ids(&[10, 11]));
        assert_eq!(pool.take(5, &[]), ids(&[9, 12]));
        assert_eq!(pool.remaining(), 0);
    }

    #[test]
    fn reconfig_keeps_majority() {
        // 9 members, 5 out: 4 left need 3 votes
        assert_eq!(reconfig_threshold(9, 7, 5), 8);
        assert_eq!(reconfig_threshold(9, 7, 1), 7);
        assert_eq!(reconfig_threshold(4, 3, 4), 4);
    }
}
