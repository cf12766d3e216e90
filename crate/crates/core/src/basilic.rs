//! Multi-valued consensus from n reliable broadcasts and n binary consensus
//! instances, hosted by one actor that owns the committee view and the
//! message store.
//!
//! Also holds decision confirmation, block certificates and the eventual
//! consensus adapter.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aabc::{verify_decision, AabcStats, BinaryConsensus};
use crate::aarb::{verify_ready, ReliableBroadcast};
use crate::actor::{Ctx, Effects, Env, Event, Packet, TimerKey, TimerSlot};
use crate::analysis::alpha_confirm_threshold;
use crate::committee::Committee;
use crate::crypto::{
    decode_pofs, encode_pofs, ConsensusId, Digest, Keyring, MessageKind, MessageStore, Msg,
    Phase, ProcessId, ProofOfFraud,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BasilicError {
    #[error("already started")]
    AlreadyStarted,
    #[error("wrong instance kind")]
    WrongKind,
    #[error("process not in roster")]
    NotInRoster,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionMode {
    #[default]
    MinIndex,
    Superblock,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    /// n broadcasts and n binary instances.
    Multi,
    /// A single binary instance.
    Binary,
}

/// Application validity predicate on proposals.
pub type Validity = Arc<dyn Fn(&[u8]) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct BasilicOptions {
    pub mode: DecisionMode,
    /// Share the message store once decided so diverging processes find frauds.
    pub share_evidence: bool,
    pub validity: Option<Validity>,
}

impl Default for BasilicOptions {
    fn default() -> Self {
        BasilicOptions {
            mode: DecisionMode::MinIndex,
            share_evidence: false,
            validity: None,
        }
    }
}

impl std::fmt::Debug for BasilicOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BasilicOptions")
            .field("mode", &self.mode)
            .field("share_evidence", &self.share_evidence)
            .field("validity", &self.validity.is_some())
            .finish()
    }
}

/// Decided bit vector with the broadcast values of the selected indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub bits: Vec<bool>,
    pub values: Vec<Option<Vec<u8>>>,
}

impl Outcome {
    /// Value of the lowest index decided 1.
    pub fn min_index(&self) -> Option<(usize, &[u8])> {
        self.bits
            .iter()
            .zip(&self.values)
            .enumerate()
            .find_map(|(k, (b, v))| if *b { v.as_deref().map(|v| (k, v)) } else { None })
    }

    /// Values of all indices decided 1, sorted by encoding.
    pub fn superblock(&self) -> Vec<Vec<u8>> {
        let mut out: Vec<Vec<u8>> = self
            .bits
            .iter()
            .zip(&self.values)
            .filter_map(|(b, v)| if *b { v.clone() } else { None })
            .collect();
        out.sort();
        out
    }

    pub fn project(&self, mode: DecisionMode) -> Vec<Vec<u8>> {
        match mode {
            DecisionMode::MinIndex => self
                .min_index()
                .map(|(_, v)| vec![v.to_vec()])
                .unwrap_or_default(),
            DecisionMode::Superblock => self.superblock(),
        }
    }

    /// (index, value) of every selected proposal in index order.
    pub fn selected(&self) -> Vec<(usize, &[u8])> {
        self.bits
            .iter()
            .zip(&self.values)
            .enumerate()
            .filter_map(|(k, (b, v))| if *b { v.as_deref().map(|v| (k, v)) } else { None })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BasilicStats {
    pub max_round: u32,
    pub timeouts: u32,
    pub uncertified: u32,
    pub rejected_signatures: u32,
    pub adopted: u32,
}

/// One process's view of one consensus instance.
pub struct Basilic {
    id: ConsensusId,
    kind: InstanceKind,
    opts: BasilicOptions,
    committee: Committee,
    store: MessageStore,
    checked_certs: HashSet<Digest>,
    aarb: Vec<ReliableBroadcast>,
    aabc: Vec<BinaryConsensus>,
    values: Vec<Option<Vec<u8>>>,
    bits: Vec<Option<bool>>,
    zeros_started: bool,
    outcome: Option<Outcome>,
    stopped: bool,
    local: VecDeque<Msg>,
    events: VecDeque<Event>,
    new_pofs: Vec<ProofOfFraud>,
    rejected: u32,
}

impl Basilic {
    pub fn new(id: ConsensusId, committee: Committee, kind: InstanceKind, opts: BasilicOptions) -> Self {
        let n = match kind {
            InstanceKind::Multi => committee.n0(),
            InstanceKind::Binary => 1,
        };
        let aarb = match kind {
            InstanceKind::Multi => committee
                .roster()
                .iter()
                .enumerate()
                .map(|(k, p)| ReliableBroadcast::new(id.sub(k as u32), *p))
                .collect(),
            InstanceKind::Binary => Vec::new(),
        };
        Basilic {
            id,
            kind,
            opts,
            aabc: (0..n).map(|k| BinaryConsensus::new(id.sub(k as u32))).collect(),
            aarb,
            committee,
            store: MessageStore::new(),
            checked_certs: HashSet::new(),
            values: vec![None; n],
            bits: vec![None; n],
            zeros_started: false,
            outcome: None,
            stopped: false,
            local: VecDeque::new(),
            events: VecDeque::new(),
            new_pofs: Vec::new(),
            rejected: 0,
        }
    }

    pub fn id(&self) -> ConsensusId {
        self.id
    }

    pub fn committee(&self) -> &Committee {
        &self.committee
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn decided_bits(&self) -> &[Option<bool>] {
        &self.bits
    }

    pub fn is_decided(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn mode(&self) -> DecisionMode {
        self.opts.mode
    }

    /// Halts the instance; later inputs are ignored.
    pub fn stop(&mut self) {
        self.stopped = true;
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn store(&self) -> &MessageStore {
        &self.store
    }

    /// Proofs of fraud found or accepted since the last call.
    pub fn take_new_pofs(&mut self) -> Vec<ProofOfFraud> {
        std::mem::take(&mut self.new_pofs)
    }

    pub fn binary(&self, k: usize) -> Option<&BinaryConsensus> {
        self.aabc.get(k)
    }

    pub fn stats(&self) -> BasilicStats {
        let mut s = BasilicStats {
            rejected_signatures: self.rejected,
            ..Default::default()
        };
        for b in &self.aabc {
            let AabcStats {
                timeouts,
                uncertified,
                adopted,
                ..
            } = b.stats.clone();
            s.max_round = s.max_round.max(b.decided().map(|d| d.1).unwrap_or(b.round()));
            s.timeouts += timeouts;
            s.uncertified += uncertified;
            s.adopted += adopted as u32;
        }
        s
    }

    pub fn propose(&mut self, env: &Env, value: Vec<u8>, out: &mut Effects) -> Result<(), BasilicError> {
        if self.kind != InstanceKind::Multi {
            return Err(BasilicError::WrongKind);
        }
        let k = self
            .committee
            .position(env.me())
            .ok_or(BasilicError::NotInRoster)?;
        let mut fx = Effects::default();
        let res = {
            let mut ctx = ctx(env, &self.committee, &mut fx);
            for rb in self.aarb.iter_mut() {
                rb.activate(&mut ctx);
            }
            self.aarb[k].broadcast(&mut ctx, value)
        };
        self.absorb(fx, out);
        self.drain(env, out);
        res.map_err(|_| BasilicError::AlreadyStarted)
    }

    pub fn propose_bit(&mut self, env: &Env, bit: bool, out: &mut Effects) -> Result<(), BasilicError> {
        if self.kind != InstanceKind::Binary {
            return Err(BasilicError::WrongKind);
        }
        let res = self.start_binary(env, 0, bit, out);
        self.drain(env, out);
        res
    }

    /// Starts binary instance `k` with `bit` regardless of deliveries. Used by
    /// adversary replicas; round-one estimates need no justification.
    pub fn force_bit(&mut self, env: &Env, k: usize, bit: bool, out: &mut Effects) -> Result<(), BasilicError> {
        if k >= self.aabc.len() {
            return Err(BasilicError::WrongKind);
        }
        let res = self.start_binary(env, k, bit, out);
        self.drain(env, out);
        res
    }

    fn start_binary(&mut self, env: &Env, k: usize, bit: bool, out: &mut Effects) -> Result<(), BasilicError> {
        let mut fx = Effects::default();
        let res = {
            let mut ctx = ctx(env, &self.committee, &mut fx);
            self.aabc[k].propose(&mut ctx, bit)
        };
        self.absorb(fx, out);
        res.map_err(|_| BasilicError::AlreadyStarted)
    }

    fn absorb(&mut self, fx: Effects, out: &mut Effects) {
        for p in &fx.broadcasts {
            if let Packet::Signed(m) = p {
                self.local.push_back(m.clone());
            }
        }
        self.events.extend(fx.events);
        out.broadcasts.extend(fx.broadcasts);
        out.sends.extend(fx.sends);
        out.timers.extend(fx.timers);
    }

    fn drain(&mut self, env: &Env, out: &mut Effects) {
        loop {
            if let Some(m) = self.local.pop_front() {
                self.dispatch(env, &m, out);
            } else if let Some(e) = self.events.pop_front() {
                self.on_event(env, e, out);
            } else {
                break;
            }
        }
        self.try_decide(out);
    }

    pub fn handle(&mut self, env: &Env, packet: &Packet, out: &mut Effects) {
        if self.stopped {
            return;
        }
        let evidence_only = matches!(packet, Packet::Evidence(_));
        for m in packet.messages() {
            if m.instance.consensus != self.id {
                continue;
            }
            if evidence_only && (!m.kind.conflict_eligible() || self.store.holds(m)) {
                continue;
            }
            if !self.committee.in_roster(m.signer) || !env.keyring.verify(m) {
                self.rejected += 1;
                continue;
            }
            if evidence_only {
                let pofs = self.store.check_conflicts([m]);
                self.apply_pofs(env, pofs, out);
            } else {
                self.ingest(env, m, out);
            }
        }
        self.drain(env, out);
    }

    fn ingest(&mut self, env: &Env, m: &Msg, out: &mut Effects) {
        if m.kind == MessageKind::PofList {
            if let Ok(pofs) = decode_pofs(&m.payload) {
                self.apply_pofs(env, pofs, out);
            }
            return;
        }
        let mut batch = vec![m.clone()];
        if let (Some(cert), Some(d)) = (&m.certificate, m.cert_digest) {
            if self.checked_certs.insert(d) {
                batch.extend(cert.signatures.iter().filter(|e| {
                    e.instance.consensus == self.id
                        && self.committee.in_roster(e.signer)
                        && env.keyring.verify(e)
                }).cloned());
            }
        }
        let pofs = self.store.check_conflicts(&batch);
        self.apply_pofs(env, pofs, out);
        self.route(env, m, out);
    }

    /// Own messages skip verification but are stored like any other.
    fn dispatch(&mut self, env: &Env, m: &Msg, out: &mut Effects) {
        if self.stopped {
            return;
        }
        self.store.check_conflicts([m]);
        self.route(env, m, out);
    }

    fn route(&mut self, env: &Env, m: &Msg, out: &mut Effects) {
        let k = m.instance.sub as usize;
        let mut fx = Effects::default();
        {
            let mut ctx = ctx(env, &self.committee, &mut fx);
            match m.phase {
                Phase::Broadcast => {
                    if let Some(rb) = self.aarb.get_mut(k) {
                        let excluded_source =
                            m.kind == MessageKind::Init && self.committee.is_excluded(m.signer);
                        if !excluded_source {
                            rb.handle(&mut ctx, m);
                        }
                    }
                }
                Phase::BinValue | Phase::Aux | Phase::Decide => {
                    if let Some(bc) = self.aabc.get_mut(k) {
                        bc.handle(&mut ctx, m);
                    }
                }
                _ => {}
            }
        }
        self.absorb(fx, out);
    }

    /// Applies proofs from any origin; fresh ones are gossiped.
    pub fn apply_pofs(&mut self, env: &Env, pofs: Vec<ProofOfFraud>, out: &mut Effects) {
        if pofs.is_empty() {
            return;
        }
        let up = self.committee.update(&pofs, &env.keyring);
        if !up.to_broadcast.is_empty() {
            let m = env.signer.sign(
                MessageKind::PofList,
                self.id.sub(0),
                0,
                Phase::Control,
                encode_pofs(&up.to_broadcast),
                None,
            );
            out.broadcast(m);
            self.new_pofs.extend(up.to_broadcast.iter().cloned());
        }
        if up.changed() && !self.stopped {
            let mut fx = Effects::default();
            {
                let mut ctx = ctx(env, &self.committee, &mut fx);
                for rb in self.aarb.iter_mut() {
                    rb.on_committee_change(&mut ctx);
                }
                for bc in self.aabc.iter_mut() {
                    bc.on_committee_change(&mut ctx);
                }
            }
            self.absorb(fx, out);
            self.maybe_start_zeros(env, out);
        }
    }

    /// Entry point for proofs learned outside this instance.
    pub fn add_pofs(&mut self, env: &Env, pofs: Vec<ProofOfFraud>, out: &mut Effects) {
        self.apply_pofs(env, pofs, out);
        self.drain(env, out);
    }

    fn on_event(&mut self, env: &Env, e: Event, out: &mut Effects) {
        match e {
            Event::Delivered { source, value } => {
                let k = source as usize;
                let valid = self.opts.validity.as_ref().is_none_or(|f| f(&value));
                self.values[k] = Some(value);
                if valid && !self.aabc[k].started() && !self.stopped {
                    let _ = self.start_binary(env, k, true, out);
                }
            }
            Event::BitDecided { index, bit, .. } => {
                self.bits[index as usize] = Some(bit);
                self.maybe_start_zeros(env, out);
            }
        }
    }

    fn maybe_start_zeros(&mut self, env: &Env, out: &mut Effects) {
        if self.kind != InstanceKind::Multi || self.zeros_started || self.stopped {
            return;
        }
        let ones = self.bits.iter().filter(|b| **b == Some(true)).count();
        if ones < self.committee.threshold() {
            return;
        }
        self.zeros_started = true;
        for k in 0..self.aabc.len() {
            if !self.aabc[k].started() {
                let _ = self.start_binary(env, k, false, out);
            }
        }
    }

    fn try_decide(&mut self, out: &mut Effects) {
        if self.outcome.is_some() || self.stopped {
            return;
        }
        let Some(bits) = self.bits.iter().copied().collect::<Option<Vec<bool>>>() else {
            return;
        };
        let values: Vec<Option<Vec<u8>>> = match self.kind {
            InstanceKind::Binary => vec![None],
            InstanceKind::Multi => {
                if bits.iter().zip(&self.values).any(|(b, v)| *b && v.is_none()) {
                    return;
                }
                bits.iter()
                    .zip(&self.values)
                    .map(|(b, v)| if *b { v.clone() } else { None })
                    .collect()
            }
        };
        self.outcome = Some(Outcome { bits, values });
        if self.opts.share_evidence {
            out.broadcasts.push(Packet::Evidence(Arc::new(self.evidence())));
        }
    }

    /// Every stored first message plus the binary decision messages.
    pub fn evidence(&self) -> Vec<Msg> {
        let mut ev: Vec<Msg> = self.store.messages().cloned().collect();
        ev.extend(self.aabc.iter().filter_map(|b| b.decision_message().cloned()));
        ev
    }

    pub fn on_timer(&mut self, env: &Env, key: TimerKey, out: &mut Effects) {
        if self.stopped || key.consensus != self.id {
            return;
        }
        let mut fx = Effects::default();
        {
            let mut ctx = ctx(env, &self.committee, &mut fx);
            match key.slot {
                TimerSlot::Aarb(k) => {
                    if self.outcome.is_none() {
                        if let Some(rb) = self.aarb.get_mut(k as usize) {
                            rb.on_timer(&mut ctx, key.generation);
                        }
                    }
                }
                TimerSlot::Aabc(k) => {
                    if let Some(bc) = self.aabc.get_mut(k as usize) {
                        bc.on_timer(&mut ctx, key.generation);
                    }
                }
            }
        }
        self.absorb(fx, out);
        self.drain(env, out);
    }

    /// Transferable proof of this instance's outcome.
    pub fn certificate(&self) -> Option<BlockCertificate> {
        let outcome = self.outcome.as_ref()?;
        let decisions = self
            .aabc
            .iter()
            .map(|b| b.decision_message().cloned())
            .collect::<Option<Vec<_>>>()?;
        let values = match self.kind {
            InstanceKind::Binary => vec![None],
            InstanceKind::Multi => outcome
                .bits
                .iter()
                .zip(&self.aarb)
                .map(|(b, rb)| if *b { rb.ready_message().cloned() } else { None })
                .collect(),
        };
        Some(BlockCertificate {
            consensus: self.id,
            decisions,
            values,
            pofs: self.committee.pofs().cloned().collect(),
        })
    }
}

fn ctx<'a>(env: &'a Env, committee: &'a Committee, out: &'a mut Effects) -> Ctx<'a> {
    Ctx {
        signer: &env.signer,
        keyring: &env.keyring,
        committee,
        config: &env.config,
        out,
    }
}

/// Decision messages for every index, READY certificates for the selected
/// values, and the proofs behind any in-instance exclusion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCertificate {
    pub consensus: ConsensusId,
    pub decisions: Vec<Msg>,
    pub values: Vec<Option<Msg>>,
    pub pofs: Vec<ProofOfFraud>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CertificateError {
    #[error("index count {0} does not match roster")]
    Shape(usize),
    #[error("invalid decision at index {0}")]
    Decision(usize),
    #[error("invalid value proof at index {0}")]
    Value(usize),
}

impl BlockCertificate {
    /// Re-derives the outcome from scratch against the given committee.
    pub fn verify(
        &self,
        keyring: &Keyring,
        roster: &[ProcessId],
        h0: usize,
        pre_excluded: &[ProcessId],
    ) -> Result<Outcome, CertificateError> {
        let mut committee = Committee::with_excluded(roster.to_vec(), h0, pre_excluded.iter().copied())
            .map_err(|_| CertificateError::Shape(roster.len()))?;
        committee.update(&self.pofs, keyring);
        if self.decisions.len() != self.values.len() || self.decisions.is_empty() {
            return Err(CertificateError::Shape(self.decisions.len()));
        }
        let multi = self.decisions.len() > 1 || self.values[0].is_some();
        if multi && self.decisions.len() != roster.len() {
            return Err(CertificateError::Shape(self.decisions.len()));
        }
        let mut bits = Vec::with_capacity(self.decisions.len());
        let mut values = Vec::with_capacity(self.decisions.len());
        for (k, (d, v)) in self.decisions.iter().zip(&self.values).enumerate() {
            let inst = self.consensus.sub(k as u32);
            if !committee.in_roster(d.signer) || !keyring.verify(d) {
                return Err(CertificateError::Decision(k));
            }
            let bit = verify_decision(keyring, &committee, inst, d).ok_or(CertificateError::Decision(k))?;
            bits.push(bit);
            match (bit && multi, v) {
                (true, Some(r)) => {
                    if !keyring.verify(r) || !verify_ready(keyring, &committee, inst, r) {
                        return Err(CertificateError::Value(k));
                    }
                    values.push(Some(r.payload.clone()));
                }
                (true, None) => return Err(CertificateError::Value(k)),
                (false, _) => values.push(None),
            }
        }
        Ok(Outcome { bits, values })
    }

    /// Signed messages verified by [`BlockCertificate::verify`].
    pub fn weight(&self) -> usize {
        let inner = |m: &Msg| 1 + m.certificate.as_ref().map_or(0, |c| c.signatures.len());
        self.decisions.iter().map(inner).sum::<usize>()
            + self.values.iter().flatten().map(inner).sum::<usize>()
            + 2 * self.pofs.len()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Confirmation {
    Confirmed,
    DisagreementDetected,
    Pending,
}

/// Confirmed once more than n-h+alpha*n processes certified the decision and
/// nothing conflicting was seen.
pub fn confirm(n: usize, h: usize, alpha: Ratio<u64>, certs: usize, conflicting: bool) -> Confirmation {
    if conflicting {
        Confirmation::DisagreementDetected
    } else if certs >= alpha_confirm_threshold(n, h, alpha) {
        Confirmation::Confirmed
    } else {
        Confirmation::Pending
    }
}

/// Collects certified decisions for one instance from distinct processes.
#[derive(Clone, Debug)]
pub struct ConfirmTracker {
    decided: Digest,
    supporters: BTreeSet<ProcessId>,
    conflicting: BTreeSet<ProcessId>,
    pub malformed: u32,
}

impl ConfirmTracker {
    pub fn new(me: ProcessId, decided: Digest) -> Self {
        ConfirmTracker {
            decided,
            supporters: BTreeSet::from([me]),
            conflicting: BTreeSet::new(),
            malformed: 0,
        }
    }

    pub fn record(&mut self, from: ProcessId, digest: Option<Digest>) {
        match digest {
            Some(d) if d == self.decided => {
                self.supporters.insert(from);
            }
            Some(_) => {
                self.conflicting.insert(from);
            }
            None => self.malformed += 1,
        }
    }

    pub fn supporters(&self) -> usize {
        self.supporters.len()
    }

    pub fn status(&self, n: usize, h: usize, alpha: Ratio<u64>) -> Confirmation {
        confirm(n, h, alpha, self.supporters.len(), !self.conflicting.is_empty())
    }
}

/// Sequence of eventual-consensus outputs: starts from a decision and
/// resolves disagreements reported in later epochs deterministically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EcSequence {
    epoch: u32,
    bits: Vec<bool>,
    values: Vec<Option<Vec<u8>>>,
    outputs: Vec<Vec<u8>>,
    pending: Vec<Disagreement>,
}

/// A conflicting outcome observed for one index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Disagreement {
    /// Another process delivered `value` for index k.
    Value { index: usize, value: Vec<u8> },
    /// Another process decided 1 at index k.
    Bit { index: usize, value: Vec<u8> },
}

impl EcSequence {
    pub fn new(first: &Outcome) -> Self {
        let mut s = EcSequence {
            epoch: 0,
            bits: first.bits.clone(),
            values: first.values.clone(),
            outputs: Vec::new(),
            pending: Vec::new(),
        };
        let out = s.current();
        s.outputs.push(out);
        s
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn outputs(&self) -> &[Vec<u8>] {
        &self.outputs
    }

    pub fn report(&mut self, d: Disagreement) {
        self.pending.push(d);
    }

    fn current(&self) -> Vec<u8> {
        self.bits
            .iter()
            .zip(&self.values)
            .find_map(|(b, v)| if *b { v.clone() } else { None })
            .unwrap_or_default()
    }

    /// Closes the next epoch and returns its output together with the
    /// disagreements it resolved, for rebroadcast.
    pub fn propose_ec(&mut self) -> (Vec<u8>, Vec<Disagreement>) {
        self.epoch += 1;
        let treated = std::mem::take(&mut self.pending);
        for d in &treated {
            match d {
                Disagreement::Value { index, value } => {
                    let slot = &mut self.values[*index];
                    *slot = Some(match slot.take() {
                        Some(v) => v.min(value.clone()),
                        None => value.clone(),
                    });
                }
                Disagreement::Bit { index, value } => {
                    self.bits[*index] = true;
                    let slot = &mut self.values[*index];
                    *slot = Some(match slot.take() {
                        Some(v) => v.min(value.clone()),
                        None => value.clone(),
                    });
                }
            }
        }
        let out = self.current();
        self.outputs.push(out.clone());
        (out, treated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(bits: &[bool]) -> Outcome {
        Outcome {
            bits: bits.to_vec(),
            values: bits
                .iter()
                .enumerate()
                .map(|(k, b)| b.then(|| vec![b'v', b'0' + k as u8]))
                .collect(),
        }
    }

    #[test]
    fn projections() {
        let o = outcome(&[true, false, true, false]);
        assert_eq!(o.min_index(), Some((0, &b"v0"[..])));
        assert_eq!(o.superblock(), vec![b"v0".to_vec(), b"v2".to_vec()]);
    }

    #[test]
    fn confirm_thresholds() {
        let a = Ratio::new(4, 9);
        assert_eq!(confirm(9, 6, a, 7, false), Confirmation::Pending);
        assert_eq!(confirm(9, 6, a, 8, false), Confirmation::Confirmed);
        assert_eq!(confirm(9, 6, Ratio::new(2, 3), 8, false), Confirmation::Pending);
        assert_eq!(confirm(9, 6, Ratio::new(2, 3), 9, false), Confirmation::Confirmed);
        assert_eq!(confirm(9, 6, a, 5, true), Confirmation::DisagreementDetected);
    }

    #[test]
    fn eventual_sequence() {
        let mut s = EcSequence::new(&outcome(&[false, true]));
        assert_eq!(s.propose_ec().0, b"v1".to_vec());
        s.report(Disagreement::Value { index: 1, value: b"u1".to_vec() });
        assert_eq!(s.propose_ec().0, b"u1".to_vec());
        s.report(Disagreement::Bit { index: 0, value: b"w0".to_vec() });
        assert_eq!(s.propose_ec().0, b"w0".to_vec());
        assert_eq!(s.outputs().len(), 4);
    }
}
