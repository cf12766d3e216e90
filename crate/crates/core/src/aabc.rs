//! Actively accountable binary consensus.
//!
//! A round has two phases. In the first, processes binary-value broadcast
//! their estimate and the coordinator proposes the first value it delivers.
//! In the second, processes echo an auxiliary set and collect echoes until
//! `comp_vals` yields a value set. Each phase ends only once its condition
//! holds and its timer has expired. Every message after round 1 carries a
//! certificate justifying its value, and every accepted certificate is
//! cross-checked by the owning actor, which is how deceitful processes are
//! caught and excluded while the instance runs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::actor::{count_support, Ctx, Event, TimerKey, TimerSlot};
use crate::committee::Committee;
use crate::crypto::{
    bit_payload, Certificate, Digest, InstanceId, Keyring, MessageKind, Msg, Phase, ProcessId,
    SignedMessage,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AabcError {
    #[error("already started")]
    AlreadyStarted,
}

/// Round parity bit: round r favours r mod 2.
pub fn parity(round: u32) -> bool {
    round % 2 == 1
}

/// Set of bits encoded as a mask: bit 0 for value 0, bit 1 for value 1.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct BitSet(u8);

impl BitSet {
    pub const EMPTY: BitSet = BitSet(0);

    pub fn single(b: bool) -> Self {
        BitSet(1 << (b as u8))
    }

    pub fn both() -> Self {
        BitSet(3)
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        (1..=3).contains(&b).then_some(BitSet(b))
    }

    pub fn byte(self) -> u8 {
        self.0
    }

    pub fn contains(self, b: bool) -> bool {
        self.0 & (1 << (b as u8)) != 0
    }

    pub fn insert(&mut self, b: bool) {
        self.0 |= 1 << (b as u8);
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset(self, other: BitSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: BitSet) -> BitSet {
        BitSet(self.0 | other.0)
    }

    /// The only element of a singleton.
    pub fn single_value(self) -> Option<bool> {
        match self.0 {
            1 => Some(false),
            2 => Some(true),
            _ => None,
        }
    }
}

/// Second-phase value selection: `aux` if h echoes match it exactly, else the
/// union of echoed sets once h echoes hold only delivered values.
pub fn comp_vals(
    echoes: impl IntoIterator<Item = BitSet> + Clone,
    bin_vals: BitSet,
    aux: BitSet,
    h: usize,
) -> BitSet {
    if echoes.clone().into_iter().filter(|e| *e == aux).count() >= h {
        return aux;
    }
    let within: Vec<BitSet> = echoes
        .into_iter()
        .filter(|e| e.is_subset(bin_vals))
        .collect();
    if within.len() >= h {
        within.into_iter().fold(BitSet::EMPTY, BitSet::union)
    } else {
        BitSet::EMPTY
    }
}

/// Bit carried by a DECISION for `inst` whose certificate holds h(d_r)
/// member echoes of exactly that bit in the decision round.
pub fn verify_decision(
    keyring: &Keyring,
    committee: &Committee,
    inst: InstanceId,
    m: &SignedMessage,
) -> Option<bool> {
    if m.kind != MessageKind::Decision || m.instance != inst || m.phase != Phase::Decide {
        return None;
    }
    let v = m.bit()?;
    let cert = m.certificate.as_deref()?;
    if v != parity(m.round) || cert.round != m.round || cert.value != bit_payload(v) {
        return None;
    }
    let want = [BitSet::single(v).byte()];
    let support = count_support(keyring, committee, &cert.signatures, |e| {
        e.kind == MessageKind::Echo
            && e.instance == inst
            && e.round == m.round
            && e.payload == want
    });
    (support >= committee.threshold()).then_some(v)
}

/// Outcome of the end-of-round decision step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecideStep {
    pub decide: Option<bool>,
    pub est: bool,
}

pub fn decide_step(round: u32, vals: BitSet, already_decided: bool) -> DecideStep {
    match vals.single_value() {
        Some(v) => DecideStep {
            decide: (v == parity(round) && !already_decided).then_some(v),
            est: v,
        },
        None => DecideStep {
            decide: None,
            est: parity(round),
        },
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Idle,
    Abv,
    EchoWait,
    Decided,
}

#[derive(Clone, Debug, Default)]
struct RoundState {
    /// First certified EST/BVECHO per signer, per value.
    support: [BTreeMap<ProcessId, Msg>; 2],
    sent_bv: [bool; 2],
    sent_ready: [bool; 2],
    /// Delivered values with their binary-value certificate.
    bin: [Option<Arc<Certificate>>; 2],
    first_bin: Option<bool>,
    ready_msgs: [Option<Msg>; 2],
    coord: Option<(bool, Msg)>,
    sent_coord: bool,
    echoes: BTreeMap<ProcessId, (BitSet, Msg)>,
    sent_echo: bool,
    aux: BitSet,
}

impl RoundState {
    fn bin_vals(&self) -> BitSet {
        let mut s = BitSet::EMPTY;
        for b in [false, true] {
            if self.bin[b as usize].is_some() {
                s.insert(b);
            }
        }
        s
    }

    fn phase_one_msgs(&self) -> impl Iterator<Item = &Msg> {
        self.support
            .iter()
            .flat_map(|s| s.values())
            .chain(self.ready_msgs.iter().flatten())
            .chain(self.coord.iter().map(|(_, m)| m))
    }

    fn echo_msgs(&self) -> impl Iterator<Item = &Msg> {
        self.echoes.values().map(|(_, m)| m)
    }
}

/// Per-instance counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AabcStats {
    pub timeouts: u32,
    pub rebroadcasts: u32,
    pub uncertified: u32,
    pub adopted: bool,
}

const PENDING_CAP: usize = 4096;

/// One process's state for one binary consensus instance.
#[derive(Clone, Debug)]
pub struct BinaryConsensus {
    inst: InstanceId,
    stage: Stage,
    est: bool,
    round: u32,
    expired: bool,
    timer_gen: u64,
    timeout: u64,
    rounds: BTreeMap<u32, RoundState>,
    /// cert[r]: justification of the estimate carried into round r+1.
    certs: BTreeMap<u32, Option<Certificate>>,
    decided: Option<(bool, u32)>,
    decision: Option<Msg>,
    answered: BTreeSet<ProcessId>,
    pending: Vec<Msg>,
    valid_certs: HashSet<Digest>,
    pub stats: AabcStats,
}

impl BinaryConsensus {
    pub fn new(inst: InstanceId) -> Self {
        BinaryConsensus {
            inst,
            stage: Stage::Idle,
            est: false,
            round: 0,
            expired: false,
            timer_gen: 0,
            timeout: 0,
            rounds: BTreeMap::new(),
            certs: BTreeMap::new(),
            decided: None,
            decision: None,
            answered: BTreeSet::new(),
            pending: Vec::new(),
            valid_certs: HashSet::new(),
            stats: AabcStats::default(),
        }
    }

    pub fn instance(&self) -> InstanceId {
        self.inst
    }

    pub fn started(&self) -> bool {
        self.stage != Stage::Idle
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn estimate(&self) -> bool {
        self.est
    }

    /// (bit, round) once decided.
    pub fn decided(&self) -> Option<(bool, u32)> {
        self.decided
    }

    /// Decision message carrying h signed echoes, once decided.
    pub fn decision_message(&self) -> Option<&Msg> {
        self.decision.as_ref()
    }

    pub fn bin_vals(&self, round: u32) -> BitSet {
        self.rounds
            .get(&round)
            .map(RoundState::bin_vals)
            .unwrap_or_default()
    }

    pub fn propose(&mut self, ctx: &mut Ctx<'_>, v: bool) -> Result<(), AabcError> {
        if self.started() {
            return Err(AabcError::AlreadyStarted);
        }
        self.est = v;
        self.timeout = ctx.config.delta;
        self.start_round(ctx, 1);
        self.progress(ctx);
        Ok(())
    }

    fn sign(
        &self,
        ctx: &Ctx<'_>,
        kind: MessageKind,
        round: u32,
        phase: Phase,
        payload: Vec<u8>,
        cert: Option<Certificate>,
    ) -> Msg {
        ctx.signer.sign(kind, self.inst, round, phase, payload, cert)
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>, fresh_phase: bool) {
        if fresh_phase {
            self.expired = false;
        }
        if self.timer_gen > 0 {
            self.timeout = ctx.config.next_timeout(self.timeout);
        }
        self.timer_gen += 1;
        ctx.out.timers.push((
            TimerKey {
                consensus: self.inst.consensus,
                slot: TimerSlot::Aabc(self.inst.sub),
                generation: self.timer_gen,
            },
            self.timeout,
        ));
    }

    fn start_round(&mut self, ctx: &mut Ctx<'_>, r: u32) {
        self.round = r;
        self.stage = Stage::Abv;
        let prev = r.checked_sub(1).and_then(|p| self.certs.get(&p).cloned().flatten());
        let m = self.sign(
            ctx,
            MessageKind::Est,
            r,
            Phase::BinValue,
            bit_payload(self.est),
            prev,
        );
        self.rounds.entry(r).or_default().sent_bv[self.est as usize] = true;
        ctx.out.broadcast(m);
        self.arm(ctx, true);
    }

    /// Second-echo threshold, and the lower one that applies once an exact
    /// even split is observed: with an even number of active processes
    /// neither half reaches a strict majority, so halves relay at half.
    fn relay_thresholds(&self, ctx: &Ctx<'_>) -> (usize, usize, usize) {
        let active = ctx.committee.n0().saturating_sub(ctx.config.assumed_q + ctx.config.assumed_t);
        let d_r = ctx.committee.d_r();
        let strict = (active / 2 + 1).saturating_sub(d_r).max(1);
        let split = active.div_ceil(2).saturating_sub(d_r).max(1);
        (strict, split, active.saturating_sub(d_r))
    }

    /// Certificate of at least h(d_r) signed EST/BVECHO[round](v).
    fn valid_bv_cert(&mut self, ctx: &Ctx<'_>, round: u32, v: bool, cert: &Certificate) -> bool {
        if cert.round != round || cert.value != bit_payload(v) {
            return false;
        }
        let key = cert.digest();
        if self.valid_certs.contains(&key) {
            return true;
        }
        let inst = self.inst;
        let ok = count_support(ctx.keyring, ctx.committee, &cert.signatures, |m| {
            matches!(m.kind, MessageKind::Est | MessageKind::BvEcho)
                && m.instance == inst
                && m.round == round
                && m.bit() == Some(v)
        }) >= ctx.committee.threshold();
        if ok {
            self.valid_certs.insert(key);
        }
        ok
    }

    /// Certificate of at least h(d_r) signed ECHO[round] each containing only v.
    fn valid_echo_cert(&mut self, ctx: &Ctx<'_>, round: u32, v: bool, cert: &Certificate) -> bool {
        if cert.round != round || cert.value != bit_payload(v) {
            return false;
        }
        let key = cert.digest();
        if self.valid_certs.contains(&key) {
            return true;
        }
        let inst = self.inst;
        let want = [BitSet::single(v).byte()];
        let ok = count_support(ctx.keyring, ctx.committee, &cert.signatures, |m| {
            m.kind == MessageKind::Echo
                && m.instance == inst
                && m.round == round
                && m.payload == want
        }) >= ctx.committee.threshold();
        if ok {
            self.valid_certs.insert(key);
        }
        ok
    }

    /// Rule 2: after round 1 a value needs a certificate from the previous
    /// round, except value 1 in round 2.
    fn certified(&mut self, ctx: &Ctx<'_>, m: &SignedMessage, v: bool) -> bool {
        let r = m.round;
        if r <= 1 {
            return true;
        }
        let prev = r - 1;
        if v == parity(prev) && prev == 1 {
            return true;
        }
        let Some(cert) = m.certificate.as_deref() else {
            return false;
        };
        if v == parity(prev) {
            self.valid_bv_cert(ctx, prev, v, cert)
        } else {
            self.valid_echo_cert(ctx, prev, v, cert)
        }
    }

    fn answer_laggard(&mut self, ctx: &mut Ctx<'_>, m: &SignedMessage) {
        if let (Some((_, r)), Some(dm)) = (self.decided, &self.decision) {
            if m.round >= r && m.signer != ctx.me() && self.answered.insert(m.signer) {
                ctx.out
                    .sends
                    .push((m.signer, crate::actor::Packet::Signed(dm.clone())));
            }
        }
    }

    /// Processes one verified, conflict-checked message of this instance.
    pub fn handle(&mut self, ctx: &mut Ctx<'_>, m: &Msg) {
        if self.decided.is_some() {
            if m.kind != MessageKind::Decision {
                self.answer_laggard(ctx, m);
            }
            return;
        }
        if self.absorb(ctx, m) {
            self.progress(ctx);
        }
    }

    /// Stores a message; returns whether state may have changed.
    fn absorb(&mut self, ctx: &mut Ctx<'_>, m: &Msg) -> bool {
        if m.instance != self.inst || m.round == 0 {
            return false;
        }
        let r = m.round;
        match (m.kind, m.phase) {
            (MessageKind::Est | MessageKind::BvEcho, Phase::BinValue) => {
                let Some(v) = m.bit() else { return false };
                if !self.certified(ctx, m, v) {
                    self.defer(m);
                    return false;
                }
                let rs = self.rounds.entry(r).or_default();
                rs.support[v as usize].entry(m.signer).or_insert_with(|| m.clone());
                true
            }
            (MessageKind::BvReady, Phase::BinValue) => {
                let Some(v) = m.bit() else { return false };
                let Some(cert) = m.certificate.clone() else {
                    return false;
                };
                if !self.valid_bv_cert(ctx, r, v, &cert) {
                    self.defer(m);
                    return false;
                }
                let rs = self.rounds.entry(r).or_default();
                if rs.bin[v as usize].is_none() {
                    rs.bin[v as usize] = Some(cert);
                    rs.ready_msgs[v as usize] = Some(m.clone());
                    rs.first_bin.get_or_insert(v);
                }
                true
            }
            (MessageKind::Coord, Phase::BinValue) => {
                let Some(v) = m.bit() else { return false };
                if m.signer != ctx.committee.coordinator(r) {
                    return false;
                }
                let rs = self.rounds.entry(r).or_default();
                rs.coord.get_or_insert_with(|| (v, m.clone()));
                true
            }
            (MessageKind::Echo, Phase::Aux) => {
                let Some(set) = m.payload.first().copied().and_then(BitSet::from_byte) else {
                    return false;
                };
                if m.payload.len() != 1 {
                    return false;
                }
                let rs = self.rounds.entry(r).or_default();
                rs.echoes.entry(m.signer).or_insert_with(|| (set, m.clone()));
                true
            }
            (MessageKind::Decision, Phase::Decide) => {
                let Some(v) = m.bit() else { return false };
                let Some(cert) = m.certificate.clone() else {
                    return false;
                };
                if v != parity(r) || !self.valid_echo_cert(ctx, r, v, &cert) {
                    self.defer(m);
                    return false;
                }
                self.decided = Some((v, r));
                self.est = v;
                self.stage = Stage::Decided;
                self.decision = Some(m.clone());
                self.stats.adopted = true;
                ctx.out.events.push(Event::BitDecided {
                    index: self.inst.sub,
                    bit: v,
                    round: r,
                });
                false
            }
            _ => false,
        }
    }

    fn defer(&mut self, m: &Msg) {
        self.stats.uncertified += 1;
        if self.pending.len() < PENDING_CAP {
            self.pending.push(m.clone());
        }
    }

    /// Called by the owner after the committee shrank: re-validates deferred
    /// messages, re-checks termination, and resets the current timer.
    pub fn on_committee_change(&mut self, ctx: &mut Ctx<'_>) {
        if self.decided.is_some() || !self.started() {
            // certificates deferred before the start are re-examined at start
            let pending = std::mem::take(&mut self.pending);
            for m in &pending {
                if self.decided.is_none() {
                    self.absorb(ctx, m);
                }
            }
            return;
        }
        let pending = std::mem::take(&mut self.pending);
        for m in &pending {
            if self.decided.is_some() {
                break;
            }
            self.absorb(ctx, m);
        }
        let before = (self.round, self.stage);
        self.progress(ctx);
        if self.decided.is_none() && (self.round, self.stage) == before {
            self.arm(ctx, true);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, generation: u64) {
        if generation != self.timer_gen || self.decided.is_some() || !self.started() {
            return;
        }
        self.stats.timeouts += 1;
        self.expired = true;
        let before = (self.round, self.stage);
        self.progress(ctx);
        if self.decided.is_none() && (self.round, self.stage) == before {
            self.rebroadcast(ctx);
            self.arm(ctx, false);
        }
    }

    /// Rule 4: re-send delivered messages of the blocked phase and all later ones.
    fn rebroadcast(&mut self, ctx: &mut Ctx<'_>) {
        let r = self.round;
        let mut bundle: Vec<Msg> = Vec::new();
        for (&ro, rs) in self.rounds.range(r..) {
            if ro > r || self.stage == Stage::Abv {
                bundle.extend(rs.phase_one_msgs().cloned());
            }
            if ro > r || self.stage == Stage::EchoWait {
                bundle.extend(rs.echo_msgs().cloned());
            }
        }
        if !bundle.is_empty() {
            self.stats.rebroadcasts += 1;
            ctx.out
                .broadcasts
                .push(crate::actor::Packet::Bundle(Arc::new(bundle)));
        }
    }

    fn members_of<'a>(
        ctx: &Ctx<'_>,
        it: impl Iterator<Item = (&'a ProcessId, &'a Msg)>,
    ) -> Vec<Msg> {
        it.filter(|(p, _)| ctx.committee.is_member(**p))
            .map(|(_, m)| m.clone())
            .collect()
    }

    /// Relay and delivery rules of the binary-value broadcast for `r`.
    fn abv_step(&mut self, ctx: &mut Ctx<'_>, r: u32) {
        let (strict, split, active) = self.relay_thresholds(ctx);
        let h = ctx.committee.threshold();
        let relay = match self.rounds.get(&r) {
            Some(rs) => {
                let count = |i: usize| rs.support[i].keys().filter(|p| ctx.committee.is_member(**p)).count();
                let (c0, c1) = (count(0), count(1));
                let seen = rs.support[0]
                    .keys()
                    .chain(rs.support[1].keys())
                    .filter(|p| ctx.committee.is_member(**p))
                    .collect::<std::collections::BTreeSet<_>>()
                    .len();
                if c0.max(c1) < strict && seen >= active {
                    split
                } else {
                    strict
                }
            }
            None => return,
        };
        for v in [false, true] {
            let i = v as usize;
            let Some(rs) = self.rounds.get(&r) else { return };
            let supporters = Self::members_of(ctx, rs.support[i].iter());
            if supporters.len() >= relay && !rs.sent_bv[i] {
                let cert = supporters
                    .iter()
                    .find_map(|m| m.certificate.as_deref().cloned());
                let m = self.sign(ctx, MessageKind::BvEcho, r, Phase::BinValue, bit_payload(v), cert);
                self.rounds.get_mut(&r).unwrap().sent_bv[i] = true;
                ctx.out.broadcast(m);
            }
            let rs = self.rounds.get_mut(&r).unwrap();
            if supporters.len() >= h && rs.bin[i].is_none() {
                let cert = Certificate::new(r, bit_payload(v), supporters[..h].to_vec());
                rs.bin[i] = Some(Arc::new(cert));
                rs.first_bin.get_or_insert(v);
            }
            if !rs.sent_ready[i] {
                if let Some(cert) = rs.bin[i].clone() {
                    rs.sent_ready[i] = true;
                    let m = self.sign(
                        ctx,
                        MessageKind::BvReady,
                        r,
                        Phase::BinValue,
                        bit_payload(v),
                        Some((*cert).clone()),
                    );
                    ctx.out.broadcast(m);
                }
            }
        }
    }

    fn current_vals(&self, ctx: &Ctx<'_>) -> BitSet {
        let Some(rs) = self.rounds.get(&self.round) else {
            return BitSet::EMPTY;
        };
        let echoes = rs
            .echoes
            .iter()
            .filter(|(p, _)| ctx.committee.is_member(**p))
            .map(|(_, (s, _))| *s);
        let echoes: Vec<BitSet> = echoes.collect();
        comp_vals(
            echoes.iter().copied(),
            rs.bin_vals(),
            rs.aux,
            ctx.committee.threshold(),
        )
    }

    fn progress(&mut self, ctx: &mut Ctx<'_>) {
        loop {
            if self.decided.is_some() {
                return;
            }
            let r = self.round;
            let past: Vec<u32> = self.rounds.range(..=r).map(|(k, _)| *k).collect();
            for ro in past {
                self.abv_step(ctx, ro);
            }
            match self.stage {
                Stage::Idle | Stage::Decided => return,
                Stage::Abv => {
                    let me = ctx.me();
                    let rs = self.rounds.entry(r).or_default();
                    if ctx.committee.coordinator(r) == me && !rs.sent_coord {
                        if let Some(w) = rs.first_bin {
                            rs.sent_coord = true;
                            let m = self.sign(ctx, MessageKind::Coord, r, Phase::BinValue, bit_payload(w), None);
                            ctx.out.broadcast(m);
                        }
                    }
                    let rs = self.rounds.get_mut(&r).unwrap();
                    let bin = rs.bin_vals();
                    if !(self.expired && !bin.is_empty()) {
                        return;
                    }
                    rs.aux = match rs.coord {
                        Some((w, _)) if bin.contains(w) => BitSet::single(w),
                        _ => bin,
                    };
                    rs.sent_echo = true;
                    let aux = rs.aux;
                    let m = self.sign(ctx, MessageKind::Echo, r, Phase::Aux, vec![aux.byte()], None);
                    ctx.out.broadcast(m);
                    self.stage = Stage::EchoWait;
                    self.arm(ctx, true);
                }
                Stage::EchoWait => {
                    if !self.expired {
                        return;
                    }
                    let vals = self.current_vals(ctx);
                    if vals.is_empty() {
                        return;
                    }
                    self.end_round(ctx, vals);
                }
            }
        }
    }

    fn end_round(&mut self, ctx: &mut Ctx<'_>, vals: BitSet) {
        let r = self.round;
        let step = decide_step(r, vals, self.decided.is_some());
        self.est = step.est;
        let cert = self.compute_cert(ctx, vals);
        if let Some(v) = step.decide {
            let echo_cert = cert.clone().expect("decision certificate");
            let m = self.sign(ctx, MessageKind::Decision, r, Phase::Decide, bit_payload(v), Some(echo_cert));
            self.decided = Some((v, r));
            self.decision = Some(m.clone());
            self.stage = Stage::Decided;
            ctx.out.broadcast(m);
            ctx.out.events.push(Event::BitDecided {
                index: self.inst.sub,
                bit: v,
                round: r,
            });
            return;
        }
        self.certs.insert(r, if parity(r) == self.est && r == 1 { None } else { cert });
        self.start_round(ctx, r + 1);
    }

    /// Justification for the estimate leaving round r: the binary-value
    /// certificate when the estimate is the parity bit, h signed singleton
    /// echoes otherwise (and for a decision).
    fn compute_cert(&self, ctx: &Ctx<'_>, vals: BitSet) -> Option<Certificate> {
        let r = self.round;
        let rs = self.rounds.get(&r)?;
        let h = ctx.committee.threshold();
        let singleton_echoes = |v: bool| {
            let want = BitSet::single(v);
            let msgs: Vec<Msg> = rs
                .echoes
                .iter()
                .filter(|(p, (s, _))| ctx.committee.is_member(**p) && *s == want)
                .map(|(_, (_, m))| m.clone())
                .take(h)
                .collect();
            (msgs.len() >= h).then(|| Certificate::new(r, bit_payload(v), msgs))
        };
        if vals.single_value() == Some(parity(r)) {
            // decision certificate, and also the next-round justification
            if let Some(c) = singleton_echoes(parity(r)) {
                return Some(c);
            }
        }
        if self.est == parity(r) {
            if r == 1 {
                return None;
            }
            return rs.bin[self.est as usize].as_deref().cloned();
        }
        let c = singleton_echoes(self.est);
        debug_assert!(c.is_some(), "cannot assemble {h} echoes for est");
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comp_vals_branches() {
        let one = BitSet::single(true);
        let zero = BitSet::single(false);
        assert_eq!(comp_vals([one, one, one], one, one, 3), one);
        assert_eq!(comp_vals([zero, one, one], BitSet::both(), one, 3), BitSet::both());
        assert_eq!(comp_vals([one, one], one, one, 3), BitSet::EMPTY);
        assert_eq!(comp_vals([zero, one, one], one, one, 3), BitSet::EMPTY);
    }

    #[test]
    fn decide_step_parity() {
        let one = BitSet::single(true);
        let zero = BitSet::single(false);
        assert_eq!(decide_step(1, one, false), DecideStep { decide: Some(true), est: true });
        assert_eq!(decide_step(1, zero, false), DecideStep { decide: None, est: false });
        assert_eq!(decide_step(1, BitSet::both(), false), DecideStep { decide: None, est: true });
        assert_eq!(decide_step(2, zero, false).decide, Some(false));
        assert_eq!(decide_step(2, zero, true).decide, None);
    }
}
