//! Scripted coalition behaviours beyond per-world replication.

use std::any::Any;
use std::collections::BTreeSet;

use crate::aabc::{parity, BitSet};
use crate::actor::{Effects, Packet, TimerKey};
use crate::crypto::{bit_payload, InstanceId, MessageKind, Msg, Phase, ProcessId, Signer};

use super::{ProcessReport, Protocol, Rewriter, Time};

/// Sends every AABC echo as {0} to `zero_to` and as {1} to everyone else.
/// No honest process can reach a quorum on either version until the copies
/// meet, which only happens through timeout rebroadcasts.
#[derive(Clone, Debug, Default)]
pub struct EchoSplit {
    pub zero_to: BTreeSet<ProcessId>,
}

impl Rewriter for EchoSplit {
    fn rewrite(&mut self, _replica: &dyn Protocol, signer: &Signer, to: ProcessId, m: &Msg) -> Vec<Msg> {
        if m.kind != MessageKind::Echo || m.phase != Phase::Aux {
            return vec![m.clone()];
        }
        let set = BitSet::single(!self.zero_to.contains(&to));
        vec![signer.resign_with_payload(m, vec![set.byte()])]
    }
}

/// Keeps a binary instance undecided for as long as the coalition holds
/// coordinators.
///
/// Honest processes are split into `group_a` and the rest. Every coalition
/// member supports every value an honest process carries into a round, so
/// both values are always delivered. In a round it coordinates, a member
/// pushes `group_a` towards the non-parity value and the rest towards the
/// parity value, and equivocates its echo accordingly. Other members echo
/// the non-parity value. The equivocation surfaces one round later inside the
/// certificates of `group_a`, so exactly one member is excluded per round.
pub struct RoundStaller {
    signer: Signer,
    inst: InstanceId,
    roster: Vec<ProcessId>,
    coalition: BTreeSet<ProcessId>,
    group_a: BTreeSet<ProcessId>,
    supported: BTreeSet<(u32, bool)>,
    rounds: BTreeSet<u32>,
}

impl RoundStaller {
    pub fn new(
        signer: Signer,
        inst: InstanceId,
        roster: Vec<ProcessId>,
        coalition: BTreeSet<ProcessId>,
        group_a: BTreeSet<ProcessId>,
    ) -> Self {
        RoundStaller {
            signer,
            inst,
            roster,
            coalition,
            group_a,
            supported: BTreeSet::new(),
            rounds: BTreeSet::new(),
        }
    }

    fn coordinator(&self, r: u32) -> ProcessId {
        self.roster[(r.max(1) as usize - 1) % self.roster.len()]
    }

    fn honest(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.roster.iter().copied().filter(|p| !self.coalition.contains(p))
    }

    fn react(&mut self, m: &Msg, out: &mut Effects) {
        if m.instance != self.inst
            || self.coalition.contains(&m.signer)
            || m.phase != Phase::BinValue
            || !matches!(m.kind, MessageKind::Est | MessageKind::BvEcho)
        {
            return;
        }
        let (Some(v), r) = (m.bit(), m.round) else { return };
        if self.supported.insert((r, v)) {
            let cert = m.certificate.as_deref().cloned();
            out.broadcast(self.signer.sign(MessageKind::BvEcho, self.inst, r, Phase::BinValue, bit_payload(v), cert));
        }
        if !self.rounds.insert(r) {
            return;
        }
        let p = parity(r);
        if self.coordinator(r) == self.signer.id {
            let honest: Vec<ProcessId> = self.honest().collect();
            for to in honest {
                let w = if self.group_a.contains(&to) { !p } else { p };
                let coord = self.signer.sign(MessageKind::Coord, self.inst, r, Phase::BinValue, bit_payload(w), None);
                let echo = self.signer.sign(MessageKind::Echo, self.inst, r, Phase::Aux, vec![BitSet::single(w).byte()], None);
                out.sends.push((to, Packet::Bundle(std::sync::Arc::new(vec![coord, echo]))));
            }
        } else {
            let echo = self.signer.sign(MessageKind::Echo, self.inst, r, Phase::Aux, vec![BitSet::single(!p).byte()], None);
            out.broadcast(echo);
        }
    }
}

impl Protocol for RoundStaller {
    fn me(&self) -> ProcessId {
        self.signer.id
    }

    fn start(&mut self, _now: Time, _out: &mut Effects) {}

    fn on_packet(&mut self, _now: Time, _from: ProcessId, packet: &Packet, out: &mut Effects) {
        if matches!(packet, Packet::Evidence(_)) {
            return;
        }
        for m in packet.messages() {
            self.react(m, out);
        }
    }

    fn on_timer(&mut self, _now: Time, _key: TimerKey, _out: &mut Effects) {}

    fn audience(&self) -> Vec<ProcessId> {
        self.roster.clone()
    }

    fn done(&self) -> bool {
        true
    }

    fn report(&self) -> ProcessReport {
        ProcessReport::default()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
