//! Actively accountable reliable broadcast.
//!
//! The source sends INIT, every process echoes the first INIT it sees, and h
//! matching echoes form the certificate carried by READY. A READY with a valid
//! certificate is enough to deliver, so certificates double as evidence.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::actor::{count_support, Ctx, Event, Packet, TimerKey, TimerSlot};
use crate::committee::Committee;
use crate::crypto::{Certificate, InstanceId, Keyring, MessageKind, Msg, Phase, ProcessId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AarbError {
    #[error("only the source may broadcast")]
    NotSource,
    #[error("already started")]
    AlreadyStarted,
}

const PENDING_CAP: usize = 256;

/// True iff `m` is a READY for `inst` whose certificate holds h(d_r) member
/// echoes of the same value.
pub fn verify_ready(keyring: &Keyring, committee: &Committee, inst: InstanceId, m: &Msg) -> bool {
    if m.kind != MessageKind::Ready || m.instance != inst {
        return false;
    }
    let Some(cert) = m.certificate.as_deref() else {
        return false;
    };
    if cert.value != m.payload {
        return false;
    }
    count_support(keyring, committee, &cert.signatures, |e| {
        e.kind == MessageKind::Echo
            && e.phase == Phase::Broadcast
            && e.instance == inst
            && e.payload == m.payload
    }) >= committee.threshold()
}

#[derive(Clone, Debug)]
pub struct ReliableBroadcast {
    inst: InstanceId,
    source: ProcessId,
    init: Option<Msg>,
    sent_init: bool,
    sent_echo: bool,
    echoes: BTreeMap<Vec<u8>, BTreeMap<ProcessId, Msg>>,
    ready: Option<Msg>,
    delivered: Option<Vec<u8>>,
    pending: Vec<Msg>,
    timer_gen: u64,
    active: bool,
    armed: bool,
    /// Someone retransmitted since our last READY retransmission.
    laggard: bool,
}

impl ReliableBroadcast {
    pub fn new(inst: InstanceId, source: ProcessId) -> Self {
        ReliableBroadcast {
            inst,
            source,
            init: None,
            sent_init: false,
            sent_echo: false,
            echoes: BTreeMap::new(),
            ready: None,
            delivered: None,
            pending: Vec::new(),
            timer_gen: 0,
            active: false,
            armed: false,
            laggard: false,
        }
    }

    pub fn source(&self) -> ProcessId {
        self.source
    }

    pub fn delivered(&self) -> Option<&[u8]> {
        self.delivered.as_deref()
    }

    /// READY message whose certificate proves the delivered value.
    pub fn ready_message(&self) -> Option<&Msg> {
        self.ready.as_ref()
    }

    pub fn broadcast(&mut self, ctx: &mut Ctx<'_>, value: Vec<u8>) -> Result<(), AarbError> {
        if ctx.me() != self.source {
            return Err(AarbError::NotSource);
        }
        if self.sent_init {
            return Err(AarbError::AlreadyStarted);
        }
        self.sent_init = true;
        let m = ctx
            .signer
            .sign(MessageKind::Init, self.inst, 0, Phase::Broadcast, value, None);
        ctx.out.broadcast(m);
        self.activate(ctx);
        Ok(())
    }

    /// Starts the retransmission timer.
    pub fn activate(&mut self, ctx: &mut Ctx<'_>) {
        if !self.active {
            self.active = true;
            self.arm(ctx);
        }
    }

    fn arm(&mut self, ctx: &mut Ctx<'_>) {
        self.armed = true;
        self.timer_gen += 1;
        ctx.out.timers.push((
            TimerKey {
                consensus: self.inst.consensus,
                slot: TimerSlot::Aarb(self.inst.sub),
                generation: self.timer_gen,
            },
            ctx.config.delta,
        ));
    }

    fn valid_ready(&self, ctx: &Ctx<'_>, m: &Msg) -> bool {
        verify_ready(ctx.keyring, ctx.committee, self.inst, m)
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, m: &Msg) {
        if m.instance != self.inst || m.phase != Phase::Broadcast {
            return;
        }
        if self.ready.is_some() && matches!(m.kind, MessageKind::Init | MessageKind::Echo) {
            // a retransmission means someone has not delivered yet
            self.laggard = true;
            if !self.armed {
                self.arm(ctx);
            }
        }
        match m.kind {
            MessageKind::Init if m.signer == self.source => {
                if self.init.is_none() {
                    self.init = Some(m.clone());
                }
                if !self.sent_echo {
                    self.sent_echo = true;
                    let e = ctx.signer.sign(
                        MessageKind::Echo,
                        self.inst,
                        0,
                        Phase::Broadcast,
                        m.payload.clone(),
                        None,
                    );
                    ctx.out.broadcast(e);
                }
                self.activate(ctx);
            }
            MessageKind::Echo => {
                self.echoes
                    .entry(m.payload.clone())
                    .or_default()
                    .entry(m.signer)
                    .or_insert_with(|| m.clone());
                self.try_certify(ctx);
            }
            MessageKind::Ready => {
                if self.ready.is_some() {
                    return;
                }
                if self.valid_ready(ctx, m) {
                    let cert = m.certificate.as_deref().cloned();
                    self.send_ready(ctx, m.payload.clone(), cert);
                } else if self.pending.len() < PENDING_CAP {
                    self.pending.push(m.clone());
                }
            }
            _ => {}
        }
    }

    fn try_certify(&mut self, ctx: &mut Ctx<'_>) {
        if self.ready.is_some() {
            return;
        }
        let h = ctx.committee.threshold();
        let found = self.echoes.iter().find_map(|(v, by)| {
            let members: Vec<Msg> = by
                .iter()
                .filter(|(p, _)| ctx.committee.is_member(**p))
                .map(|(_, m)| m.clone())
                .take(h)
                .collect();
            (members.len() >= h).then(|| (v.clone(), members))
        });
        if let Some((v, msgs)) = found {
            let cert = Certificate::new(0, v.clone(), msgs);
            self.send_ready(ctx, v, Some(cert));
        }
    }

    fn send_ready(&mut self, ctx: &mut Ctx<'_>, v: Vec<u8>, cert: Option<Certificate>) {
        let r = ctx
            .signer
            .sign(MessageKind::Ready, self.inst, 0, Phase::Broadcast, v.clone(), cert);
        self.ready = Some(r.clone());
        ctx.out.broadcast(r);
        if self.delivered.is_none() {
            self.delivered = Some(v.clone());
            ctx.out.events.push(Event::Delivered {
                source: self.inst.sub,
                value: v,
            });
        }
    }

    /// Re-evaluates echo quorums and deferred READYs at the new threshold.
    pub fn on_committee_change(&mut self, ctx: &mut Ctx<'_>) {
        self.try_certify(ctx);
        if self.ready.is_some() {
            self.pending.clear();
            return;
        }
        let pending = std::mem::take(&mut self.pending);
        for m in &pending {
            self.handle(ctx, m);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, generation: u64) {
        if generation != self.timer_gen {
            return;
        }
        self.armed = false;
        if let Some(r) = &self.ready {
            if std::mem::take(&mut self.laggard) {
                ctx.out.broadcast(r.clone());
                self.arm(ctx);
            }
            return;
        }
        let bundle: Vec<Msg> = self
            .init
            .iter()
            .chain(self.echoes.values().flat_map(|by| by.values()))
            .cloned()
            .collect();
        if !bundle.is_empty() {
            ctx.out.broadcasts.push(Packet::Bundle(Arc::new(bundle)));
        }
        self.arm(ctx);
    }
}
