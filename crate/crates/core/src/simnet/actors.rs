//! Single-instance consensus actor driven by the simulator.

use std::any::Any;
use std::collections::BTreeSet;

use crate::actor::{Effects, Env, Packet, TimerKey};
use crate::basilic::{Basilic, DecisionMode, Outcome};
use crate::crypto::{sha256, ProcessId};

use super::{DecisionRecord, ProcessReport, Protocol, Time};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Value(Vec<u8>),
    Bit(bool),
}

/// Hex digest identifying a decided outcome under `mode`.
pub fn outcome_digest(outcome: &Outcome, mode: DecisionMode, binary: bool) -> String {
    if binary {
        return if outcome.bits[0] { "1" } else { "0" }.to_string();
    }
    let proj = outcome.project(mode);
    let bytes = serde_json::to_vec(&proj).expect("serializable");
    hex::encode(sha256(&bytes))
}

/// Runs one Basilic instance from start to decision.
pub struct ConsensusActor {
    env: Env,
    inst: Basilic,
    input: Input,
    /// Binary indices started with a fixed bit before any delivery.
    forced: Vec<(usize, bool)>,
    audience: Vec<ProcessId>,
    decided_at: Option<Time>,
    binary: bool,
}

impl ConsensusActor {
    pub fn new(env: Env, inst: Basilic, input: Input) -> Self {
        let audience = inst.committee().roster().to_vec();
        let binary = matches!(input, Input::Bit(_));
        ConsensusActor {
            env,
            inst,
            input,
            forced: Vec::new(),
            audience,
            decided_at: None,
            binary,
        }
    }

    pub fn with_forced(mut self, forced: Vec<(usize, bool)>) -> Self {
        self.forced = forced;
        self
    }

    pub fn basilic(&self) -> &Basilic {
        &self.inst
    }

    fn after(&mut self, now: Time) {
        if self.decided_at.is_none() && self.inst.is_decided() {
            self.decided_at = Some(now);
        }
    }
}

impl Protocol for ConsensusActor {
    fn me(&self) -> ProcessId {
        self.env.me()
    }

    fn start(&mut self, now: Time, out: &mut Effects) {
        for (k, b) in self.forced.clone() {
            let _ = self.inst.force_bit(&self.env, k, b, out);
        }
        let _ = match &self.input {
            Input::Value(v) => self.inst.propose(&self.env, v.clone(), out),
            Input::Bit(b) => self.inst.propose_bit(&self.env, *b, out),
        };
        self.after(now);
    }

    fn on_packet(&mut self, now: Time, _from: ProcessId, packet: &Packet, out: &mut Effects) {
        self.inst.handle(&self.env, packet, out);
        self.after(now);
    }

    fn on_timer(&mut self, now: Time, key: TimerKey, out: &mut Effects) {
        self.inst.on_timer(&self.env, key, out);
        self.after(now);
    }

    fn audience(&self) -> Vec<ProcessId> {
        self.audience.clone()
    }

    fn done(&self) -> bool {
        self.inst.is_decided()
    }

    fn report(&self) -> ProcessReport {
        let c = self.inst.committee();
        let stats = self.inst.stats();
        let decisions = self
            .inst
            .outcome()
            .map(|o| DecisionRecord {
                epoch: 0,
                slot: 0,
                value: outcome_digest(o, self.inst.mode(), self.binary),
                time: self.decided_at.unwrap_or_default(),
                round: stats.max_round,
            })
            .into_iter()
            .collect();
        ProcessReport {
            decisions,
            accused: c.pofs().map(|p| p.accused()).collect::<BTreeSet<_>>(),
            excluded: c.excluded().clone(),
            committee: c.members().collect(),
            timeouts: stats.timeouts,
            uncertified: stats.uncertified,
            ..Default::default()
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
