//! Plumbing shared by the protocol state machines: packets, effects, timers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::committee::Committee;
use crate::crypto::{ConsensusId, Keyring, Msg, ProcessId, Signer};

/// What travels on a link.
#[derive(Clone, Debug)]
pub enum Packet {
    Signed(Msg),
    /// A set of previously delivered messages, re-sent on timeout.
    Bundle(Arc<Vec<Msg>>),
    /// Stored messages shared after deciding, only cross-checked for conflicts.
    Evidence(Arc<Vec<Msg>>),
    /// Chain state handed to a newly included process.
    Catchup(Arc<crate::membership::CatchupPackage>),
}

impl Packet {
    pub fn messages(&self) -> &[Msg] {
        match self {
            Packet::Signed(m) => std::slice::from_ref(m),
            Packet::Bundle(b) | Packet::Evidence(b) => b.as_slice(),
            Packet::Catchup(_) => &[],
        }
    }

    /// Number of signed messages on the wire.
    pub fn weight(&self) -> usize {
        match self {
            Packet::Catchup(c) => c.weight(),
            _ => self.messages().len(),
        }
    }

    /// Consensus instance of the first carried message, if any.
    pub fn consensus(&self) -> Option<ConsensusId> {
        self.messages().first().map(|m| m.instance.consensus)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimerSlot {
    Aarb(u32),
    Aabc(u32),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimerKey {
    pub consensus: ConsensusId,
    pub slot: TimerSlot,
    pub generation: u64,
}

/// Observable protocol outcomes reported to the owning actor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Delivered { source: u32, value: Vec<u8> },
    BitDecided { index: u32, bit: bool, round: u32 },
}

/// Outputs of one state-machine step.
#[derive(Debug, Default)]
pub struct Effects {
    pub broadcasts: Vec<Packet>,
    pub sends: Vec<(ProcessId, Packet)>,
    pub timers: Vec<(TimerKey, u64)>,
    pub events: Vec<Event>,
}

impl Effects {
    pub fn broadcast(&mut self, m: Msg) {
        self.broadcasts.push(Packet::Signed(m));
    }

    pub fn is_empty(&self) -> bool {
        self.broadcasts.is_empty()
            && self.sends.is_empty()
            && self.timers.is_empty()
            && self.events.is_empty()
    }
}

/// Timeout schedule.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TimeoutSchedule {
    Constant,
    /// Multiply the timeout by this factor at every reset.
    Backoff(f64),
}

/// Static parameters every process of a run agrees on. Times in microseconds.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub delta: u64,
    pub schedule: TimeoutSchedule,
    /// Assumed bounds on benign and Byzantine processes, used by the relay rule.
    pub assumed_q: usize,
    pub assumed_t: usize,
}

impl ProtocolConfig {
    pub fn new(delta: u64) -> Self {
        ProtocolConfig {
            delta,
            schedule: TimeoutSchedule::Constant,
            assumed_q: 0,
            assumed_t: 0,
        }
    }

    pub fn next_timeout(&self, current: u64) -> u64 {
        match self.schedule {
            TimeoutSchedule::Constant => self.delta,
            TimeoutSchedule::Backoff(f) => ((current as f64) * f).min(1e15) as u64,
        }
    }
}

/// Identity and static configuration of one process.
#[derive(Clone, Debug)]
pub struct Env {
    pub signer: Signer,
    pub keyring: Keyring,
    pub config: ProtocolConfig,
}

impl Env {
    pub fn me(&self) -> ProcessId {
        self.signer.id
    }
}

/// Context handed to a sub-protocol step.
pub struct Ctx<'a> {
    pub signer: &'a Signer,
    pub keyring: &'a Keyring,
    pub committee: &'a Committee,
    pub config: &'a ProtocolConfig,
    pub out: &'a mut Effects,
}

impl Ctx<'_> {
    pub fn me(&self) -> ProcessId {
        self.signer.id
    }
}

/// Distinct non-excluded signers among `msgs` satisfying `pred` whose signatures verify.
pub(crate) fn count_support<'m>(
    keyring: &Keyring,
    committee: &Committee,
    msgs: impl IntoIterator<Item = &'m Msg>,
    pred: impl Fn(&crate::crypto::SignedMessage) -> bool,
) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for m in msgs {
        if committee.is_member(m.signer)
            && !seen.contains(&m.signer)
            && pred(m)
            && keyring.verify(m)
        {
            seen.insert(m.signer);
        }
    }
    seen.len()
}
