//! Deterministic discrete-event network.
//!
//! Virtual time in microseconds. Events are processed in (time, sequence)
//! order, the sequence being assigned at send, so a seed fully determines a
//! run. Messages are delayed, never dropped. After GST every message arrives
//! within `delta` of `max(send, gst)`.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod actors;
mod attacks;

pub use actors::{outcome_digest, ConsensusActor, Input};
pub use attacks::{EchoSplit, RoundStaller};

use crate::actor::{Effects, Packet, TimerKey};
use crate::crypto::{Msg, ProcessId, Signer};

pub type Time = u64;

pub const MS: Time = 1_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid delay model: {0}")]
    Delay(String),
    #[error("invalid latency trace: {0}")]
    Trace(String),
}

/// A protocol actor as seen by the simulator.
pub trait Protocol {
    fn me(&self) -> ProcessId;
    fn start(&mut self, now: Time, out: &mut Effects);
    fn on_packet(&mut self, now: Time, from: ProcessId, packet: &Packet, out: &mut Effects);
    fn on_timer(&mut self, now: Time, key: TimerKey, out: &mut Effects);
    /// Recipients of a broadcast.
    fn audience(&self) -> Vec<ProcessId>;
    /// True once the process has nothing left to decide.
    fn done(&self) -> bool;
    fn report(&self) -> ProcessReport;
    fn as_any(&self) -> &dyn Any;
}

/// One decided slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    #[serde(default)]
    pub epoch: u32,
    pub slot: u64,
    /// Hex digest of the decided value.
    pub value: String,
    pub time: Time,
    pub round: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessReport {
    pub decisions: Vec<DecisionRecord>,
    /// Every process named by a proof of fraud this process verified.
    pub accused: BTreeSet<ProcessId>,
    /// Processes excluded from the last committee this process ran.
    pub excluded: BTreeSet<ProcessId>,
    pub committee: Vec<ProcessId>,
    pub timeouts: u32,
    pub uncertified: u32,
    /// Extra metrics of layered protocols.
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BenignBehavior {
    /// Stops sending and receiving at this time (ms).
    CrashAt { at_ms: f64 },
    /// Omits each outgoing message with this probability.
    OmitFraction { p: f64 },
    /// Adds this delay (ms) to every outgoing message.
    Stale { extra_ms: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Honest,
    Benign(BenignBehavior),
    Deceitful,
    Byzantine,
}

impl Role {
    pub fn is_honest(&self) -> bool {
        matches!(self, Role::Honest)
    }

    pub fn is_coalition(&self) -> bool {
        matches!(self, Role::Deceitful | Role::Byzantine)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Role::Honest => "honest",
            Role::Benign(_) => "benign",
            Role::Deceitful => "deceitful",
            Role::Byzantine => "byzantine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Dist {
    Uniform { lo_ms: f64, hi_ms: f64 },
    Gamma { shape: f64, scale_ms: f64 },
    Trace(LatencyTrace),
}

impl Dist {
    fn validate(&self) -> Result<(), SimError> {
        match self {
            Dist::Uniform { lo_ms, hi_ms } if !(0.0 <= *lo_ms && lo_ms <= hi_ms) => {
                Err(SimError::Delay(format!("uniform bounds {lo_ms}..{hi_ms}")))
            }
            Dist::Gamma { shape, scale_ms } if !(*shape > 0.0 && *scale_ms > 0.0) => {
                Err(SimError::Delay(format!("gamma({shape}, {scale_ms})")))
            }
            Dist::Trace(t) => t.validate(),
            _ => Ok(()),
        }
    }

    fn sample(&self, from: ProcessId, to: ProcessId, rng: &mut ChaCha8Rng) -> Time {
        let ms = match self {
            Dist::Uniform { lo_ms, hi_ms } => {
                if lo_ms == hi_ms {
                    *lo_ms
                } else {
                    rng.random_range(*lo_ms..*hi_ms)
                }
            }
            Dist::Gamma { shape, scale_ms } => Gamma::new(*shape, *scale_ms)
                .map(|g| g.sample(rng))
                .unwrap_or(0.0),
            Dist::Trace(t) => t.sample(from, to, rng),
        };
        (ms.max(0.0) * MS as f64).round() as Time
    }
}

/// Region-to-region latency table; processes are assigned regions round-robin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub regions: Vec<String>,
    /// One-way latency in ms, `table[i][j]` from region i to j.
    pub table: Vec<Vec<f64>>,
    /// Uniform jitter in [0, jitter_ms).
    pub jitter_ms: f64,
}

impl LatencyTrace {
    /// Parses a CSV with a header row of region names and one row per origin
    /// region, first column the origin name.
    pub fn from_csv(text: &str, jitter_ms: f64) -> Result<Self, SimError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| SimError::Trace(e.to_string()))?;
        let regions: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut table = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| SimError::Trace(e.to_string()))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|c| c.trim().parse::<f64>().map_err(|e| SimError::Trace(format!("{c}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            table.push(row);
        }
        let t = LatencyTrace {
            regions,
            table,
            jitter_ms,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), SimError> {
        let k = self.regions.len();
        if k == 0 || self.table.len() != k || self.table.iter().any(|r| r.len() != k) {
            return Err(SimError::Trace(format!("need a {k}x{k} table")));
        }
        if self.table.iter().flatten().any(|v| !(*v >= 0.0)) || !(self.jitter_ms >= 0.0) {
            return Err(SimError::Trace("negative latency".into()));
        }
        Ok(())
    }

    pub fn region_of(&self, p: ProcessId) -> usize {
        p.0 as usize % self.regions.len()
    }

    fn sample(&self, from: ProcessId, to: ProcessId, rng: &mut ChaCha8Rng) -> f64 {
        let base = self.table[self.region_of(from)][self.region_of(to)];
        let jitter = if self.jitter_ms > 0.0 {
            rng.random_range(0.0..self.jitter_ms)
        } else {
            0.0
        };
        base + jitter
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub base: Dist,
    /// Used between honest processes of different partitions.
    pub cross: Option<Dist>,
    pub gst_ms: f64,
    pub delta_ms: f64,
}

impl DelayModel {
    pub fn uniform(lo_ms: f64, hi_ms: f64, delta_ms: f64) -> Self {
        DelayModel {
            base: Dist::Uniform { lo_ms, hi_ms },
            cross: None,
            gst_ms: 0.0,
            delta_ms,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.base.validate()?;
        if let Some(c) = &self.cross {
            c.validate()?;
        }
        if !(self.gst_ms >= 0.0 && self.delta_ms > 0.0) {
            return Err(SimError::Delay("gst >= 0 and delta > 0 required".into()));
        }
        Ok(())
    }

    pub fn gst(&self) -> Time {
        (self.gst_ms * MS as f64) as Time
    }

    pub fn delta(&self) -> Time {
        (self.delta_ms * MS as f64) as Time
    }

    /// Delivery time of a message sent at `now`.
    pub fn sample(
        &self,
        from: ProcessId,
        to: ProcessId,
        cross: bool,
        now: Time,
        rng: &mut ChaCha8Rng,
    ) -> Time {
        let dist = match (&self.cross, cross) {
            (Some(c), true) => c,
            _ => &self.base,
        };
        let d = dist.sample(from, to, rng);
        (now + d).min(now.max(self.gst()) + self.delta())
    }
}

/// Side effects of a node step.
#[derive(Debug, Default)]
pub struct Io {
    pub now: Time,
    pub gst: Time,
    out: Vec<Outgoing>,
    timers: Vec<(u16, TimerKey, Time)>,
}

#[derive(Debug)]
struct Outgoing {
    to: ProcessId,
    packet: Packet,
    world: Option<u16>,
    extra: Time,
}

impl Io {
    fn send(&mut self, to: ProcessId, packet: Packet) {
        self.out.push(Outgoing {
            to,
            packet,
            world: None,
            extra: 0,
        });
    }
}

/// A simulated process with its fault behaviour.
pub trait Node {
    fn id(&self) -> ProcessId;
    fn role(&self) -> Role;
    fn start(&mut self, io: &mut Io);
    fn on_packet(&mut self, io: &mut Io, from: ProcessId, world: Option<u16>, packet: &Packet);
    fn on_timer(&mut self, io: &mut Io, world: u16, key: TimerKey);
    fn done(&self) -> bool;
    fn report(&self) -> ProcessReport;
}

fn emit_all(io: &mut Io, me: ProcessId, audience: &[ProcessId], fx: Effects) {
    for p in fx.broadcasts {
        for &to in audience {
            if to != me {
                io.send(to, p.clone());
            }
        }
    }
    for (to, p) in fx.sends {
        if to != me {
            io.send(to, p);
        }
    }
    for (k, d) in fx.timers {
        io.timers.push((0, k, d));
    }
}

pub struct HonestNode {
    proto: Box<dyn Protocol>,
}

impl HonestNode {
    pub fn new(proto: Box<dyn Protocol>) -> Self {
        HonestNode { proto }
    }
}

impl Node for HonestNode {
    fn id(&self) -> ProcessId {
        self.proto.me()
    }
    fn role(&self) -> Role {
        Role::Honest
    }
    fn start(&mut self, io: &mut Io) {
        let mut fx = Effects::default();
        self.proto.start(io.now, &mut fx);
        emit_all(io, self.id(), &self.proto.audience(), fx);
    }
    fn on_packet(&mut self, io: &mut Io, from: ProcessId, _w: Option<u16>, packet: &Packet) {
        let mut fx = Effects::default();
        self.proto.on_packet(io.now, from, packet, &mut fx);
        emit_all(io, self.id(), &self.proto.audience(), fx);
    }
    fn on_timer(&mut self, io: &mut Io, _w: u16, key: TimerKey) {
        let mut fx = Effects::default();
        self.proto.on_timer(io.now, key, &mut fx);
        emit_all(io, self.id(), &self.proto.audience(), fx);
    }
    fn done(&self) -> bool {
        self.proto.done()
    }
    fn report(&self) -> ProcessReport {
        self.proto.report()
    }
}

/// Honest logic with crash, omission or staleness; never conflicts.
pub struct BenignNode {
    proto: Box<dyn Protocol>,
    behavior: BenignBehavior,
    rng: ChaCha8Rng,
}

impl BenignNode {
    pub fn new(proto: Box<dyn Protocol>, behavior: BenignBehavior, seed: u64) -> Self {
        BenignNode {
            proto,
            behavior,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn crashed(&self, now: Time) -> bool {
        matches!(self.behavior, BenignBehavior::CrashAt { at_ms } if now as f64 >= at_ms * MS as f64)
    }

    fn filter(&mut self, io: &mut Io, fx: Effects) {
        let mut tmp = Io {
            now: io.now,
            gst: io.gst,
            ..Default::default()
        };
        emit_all(&mut tmp, self.id(), &self.proto.audience(), fx);
        for mut o in tmp.out {
            match self.behavior {
                BenignBehavior::OmitFraction { p } if self.rng.random_bool(p.clamp(0.0, 1.0)) => continue,
                BenignBehavior::Stale { extra_ms } => o.extra = (extra_ms * MS as f64) as Time,
                _ => {}
            }
            io.out.push(o);
        }
        io.timers.extend(tmp.timers);
    }
}

impl Node for BenignNode {
    fn id(&self) -> ProcessId {
        self.proto.me()
    }
    fn role(&self) -> Role {
        Role::Benign(self.behavior.clone())
    }
    fn start(&mut self, io: &mut Io) {
        if self.crashed(io.now) {
            return;
        }
        let mut fx = Effects::default();
        self.proto.start(io.now, &mut fx);
        self.filter(io, fx);
    }
    fn on_packet(&mut self, io: &mut Io, from: ProcessId, _w: Option<u16>, packet: &Packet) {
        if self.crashed(io.now) {
            return;
        }
        let mut fx = Effects::default();
        self.proto.on_packet(io.now, from, packet, &mut fx);
        self.filter(io, fx);
    }
    fn on_timer(&mut self, io: &mut Io, _w: u16, key: TimerKey) {
        if self.crashed(io.now) {
            return;
        }
        let mut fx = Effects::default();
        self.proto.on_timer(io.now, key, &mut fx);
        self.filter(io, fx);
    }
    fn done(&self) -> bool {
        self.proto.done()
    }
    fn report(&self) -> ProcessReport {
        self.proto.report()
    }
}

/// Per-recipient rewriting of a coalition member's outgoing messages.
pub trait Rewriter {
    /// Messages actually sent to `to` in place of `m`.
    fn rewrite(&mut self, replica: &dyn Protocol, signer: &Signer, to: ProcessId, m: &Msg) -> Vec<Msg>;
}

/// A coalition member: one honest replica per world, each talking only to its
/// world's honest processes and to the coalition.
pub struct DeceitfulNode {
    id: ProcessId,
    replicas: Vec<Box<dyn Protocol>>,
    world_of: BTreeMap<ProcessId, u16>,
    coalition: BTreeSet<ProcessId>,
    signer: Signer,
    rewriter: Option<Box<dyn Rewriter>>,
    /// Byzantine extras: drop or garble a fraction of own sends.
    byzantine: Option<(f64, f64)>,
    rng: ChaCha8Rng,
    /// Replicas also hear other worlds from GST on.
    listen_all: bool,
    /// Other-world honest packets received before GST, released at GST.
    held: Vec<(u16, ProcessId, Packet)>,
}

impl DeceitfulNode {
    pub fn new(
        replicas: Vec<Box<dyn Protocol>>,
        world_of: BTreeMap<ProcessId, u16>,
        coalition: BTreeSet<ProcessId>,
        signer: Signer,
        seed: u64,
    ) -> Self {
        assert!(!replicas.is_empty(), "at least one world");
        DeceitfulNode {
            id: replicas[0].me(),
            replicas,
            world_of,
            coalition,
            signer,
            rewriter: None,
            byzantine: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            listen_all: false,
            held: Vec::new(),
        }
    }

    /// Lets every replica hear every honest process from GST on, so that the
    /// coalition does not also omit messages. Off for committed partition attacks.
    pub fn listen_all(mut self) -> Self {
        self.listen_all = true;
        self
    }

    fn release(&mut self, io: &mut Io) {
        if io.now < io.gst || self.held.is_empty() {
            return;
        }
        for (w, from, packet) in std::mem::take(&mut self.held) {
            let mut fx = Effects::default();
            self.replicas[w as usize].on_packet(io.now, from, &packet, &mut fx);
            self.route(io, w, fx);
        }
    }

    pub fn with_rewriter(mut self, r: Box<dyn Rewriter>) -> Self {
        self.rewriter = Some(r);
        self
    }

    /// Drop and garble probabilities for own sends.
    pub fn byzantine(mut self, drop: f64, garble: f64) -> Self {
        self.byzantine = Some((drop, garble));
        self
    }

    fn world_index(&self, p: ProcessId) -> u16 {
        let w = self.world_of.get(&p).copied().unwrap_or(0);
        w.min(self.replicas.len() as u16 - 1)
    }

    fn rewrite_packet(&mut self, w: u16, to: ProcessId, p: &Packet) -> Option<Packet> {
        let Some(rw) = self.rewriter.as_mut() else {
            return Some(p.clone());
        };
        let replica = self.replicas[w as usize].as_ref();
        match p {
            Packet::Signed(m) => {
                let mut ms = rw.rewrite(replica, &self.signer, to, m);
                match ms.len() {
                    0 => None,
                    1 => Some(Packet::Signed(ms.pop().unwrap())),
                    _ => Some(Packet::Bundle(std::sync::Arc::new(ms))),
                }
            }
            Packet::Bundle(b) => {
                let ms: Vec<Msg> = b
                    .iter()
                    .flat_map(|m| {
                        if m.signer == self.signer.id {
                            rw.rewrite(replica, &self.signer, to, m)
                        } else {
                            vec![m.clone()]
                        }
                    })
                    .collect();
                Some(Packet::Bundle(std::sync::Arc::new(ms)))
            }
            other => Some(other.clone()),
        }
    }

    fn garble(&mut self, p: Packet) -> Option<Packet> {
        let Some((drop, garble)) = self.byzantine else {
            return Some(p);
        };
        if self.rng.random_bool(drop.clamp(0.0, 1.0)) {
            return None;
        }
        if let Packet::Signed(m) = &p {
            if self.rng.random_bool(garble.clamp(0.0, 1.0)) {
                let mut bad = (**m).clone();
                bad.payload.push(0xff);
                return Some(Packet::Signed(std::sync::Arc::new(bad)));
            }
        }
        Some(p)
    }

    fn route(&mut self, io: &mut Io, w: u16, fx: Effects) {
        let audience = self.replicas[w as usize].audience();
        let mut sends: Vec<(ProcessId, Packet)> = Vec::new();
        for p in fx.broadcasts {
            for &to in &audience {
                if to != self.id {
                    sends.push((to, p.clone()));
                }
            }
        }
        sends.extend(fx.sends.into_iter().filter(|(to, _)| *to != self.id));
        for (to, p) in sends {
            if self.coalition.contains(&to) {
                io.out.push(Outgoing {
                    to,
                    packet: p,
                    world: Some(w),
                    extra: 0,
                });
            } else if self.world_index(to) == w {
                if let Some(p) = self.rewrite_packet(w, to, &p).and_then(|p| self.garble(p)) {
                    io.send(to, p);
                }
            }
        }
        for (k, d) in fx.timers {
            io.timers.push((w, k, d));
        }
    }
}

impl Node for DeceitfulNode {
    fn id(&self) -> ProcessId {
        self.id
    }
    fn role(&self) -> Role {
        if self.byzantine.is_some() {
            Role::Byzantine
        } else {
            Role::Deceitful
        }
    }
    fn start(&mut self, io: &mut Io) {
        for w in 0..self.replicas.len() {
            let mut fx = Effects::default();
            self.replicas[w].start(io.now, &mut fx);
            self.route(io, w as u16, fx);
        }
    }
    fn on_packet(&mut self, io: &mut Io, from: ProcessId, world: Option<u16>, packet: &Packet) {
        let w = if self.coalition.contains(&from) {
            world.unwrap_or(0).min(self.replicas.len() as u16 - 1)
        } else {
            self.world_index(from)
        };
        self.release(io);
        let mut fx = Effects::default();
        self.replicas[w as usize].on_packet(io.now, from, packet, &mut fx);
        self.route(io, w, fx);
        if self.listen_all && !self.coalition.contains(&from) {
            for o in (0..self.replicas.len() as u16).filter(|o| *o != w) {
                if io.now < io.gst {
                    self.held.push((o, from, packet.clone()));
                } else {
                    let mut fx = Effects::default();
                    self.replicas[o as usize].on_packet(io.now, from, packet, &mut fx);
                    self.route(io, o, fx);
                }
            }
        }
    }
    fn on_timer(&mut self, io: &mut Io, world: u16, key: TimerKey) {
        self.release(io);
        let w = world.min(self.replicas.len() as u16 - 1);
        let mut fx = Effects::default();
        self.replicas[w as usize].on_timer(io.now, key, &mut fx);
        self.route(io, w, fx);
    }
    fn done(&self) -> bool {
        true
    }
    fn report(&self) -> ProcessReport {
        self.replicas[0].report()
    }
}

#[derive(Debug)]
enum Ev {
    Start(usize),
    Deliver {
        from: ProcessId,
        to: usize,
        world: Option<u16>,
        packet: Packet,
    },
    Timer {
        node: usize,
        world: u16,
        key: TimerKey,
    },
}

/// Network-level counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetMetrics {
    /// Signed messages sent (bundles count each carried message).
    pub messages: u64,
    pub messages_post_gst: u64,
    /// Point-to-point transmissions; a bundle is one packet.
    pub packets: u64,
    pub packets_post_gst: u64,
    pub events: u64,
    pub end_time: Time,
    pub horizon_hit: bool,
    pub mean_intra_delay_ms: f64,
    pub mean_cross_delay_ms: f64,
}

/// One line of the opt-in event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub t: Time,
    pub from: u32,
    pub to: u32,
    /// Hex of the canonical encoding of each carried message.
    pub msgs: Vec<String>,
}

pub struct SimConfig {
    pub delay: DelayModel,
    pub horizon: Time,
    pub seed: u64,
    /// Honest processes grouped by partition.
    pub partitions: Vec<Vec<ProcessId>>,
    pub trace: bool,
}

#[derive(Debug)]
pub struct SimResult {
    pub reports: Vec<(ProcessId, Role, ProcessReport)>,
    pub metrics: NetMetrics,
    pub trace: Vec<TraceLine>,
}

pub struct Simulator {
    cfg: SimConfig,
    nodes: Vec<Box<dyn Node>>,
    index: BTreeMap<ProcessId, usize>,
    partition_of: BTreeMap<ProcessId, usize>,
    queue: BTreeMap<(Time, u64), Ev>,
    seq: u64,
    rng: ChaCha8Rng,
    in_flight_honest: u64,
    metrics: NetMetrics,
    intra: (f64, u64),
    cross: (f64, u64),
    trace: Vec<TraceLine>,
}

impl Simulator {
    pub fn new(cfg: SimConfig, nodes: Vec<Box<dyn Node>>) -> Self {
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id(), i)).collect();
        let partition_of = cfg
            .partitions
            .iter()
            .enumerate()
            .flat_map(|(k, ps)| ps.iter().map(move |p| (*p, k)))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0e7);
        Simulator {
            cfg,
            nodes,
            index,
            partition_of,
            queue: BTreeMap::new(),
            seq: 0,
            rng,
            in_flight_honest: 0,
            metrics: NetMetrics::default(),
            intra: (0.0, 0),
            cross: (0.0, 0),
            trace: Vec::new(),
        }
    }

    fn push(&mut self, t: Time, ev: Ev) {
        self.seq += 1;
        self.queue.insert((t, self.seq), ev);
    }

    fn flush(&mut self, from: ProcessId, io: Io) {
        let now = io.now;
        let gst = self.cfg.delay.gst();
        let from_idx = self.index[&from];
        for (w, key, d) in io.timers {
            self.push(now + d, Ev::Timer { node: from_idx, world: w, key });
        }
        for o in io.out {
            let Some(&to) = self.index.get(&o.to) else { continue };
            let weight = o.packet.weight() as u64;
            self.metrics.messages += weight;
            self.metrics.packets += 1;
            if now >= gst {
                self.metrics.messages_post_gst += weight;
                self.metrics.packets_post_gst += 1;
            }
            let cross = match (self.partition_of.get(&from), self.partition_of.get(&o.to)) {
                (Some(a), Some(b)) => a != b,
                _ => false,
            };
            let at = self.cfg.delay.sample(from, o.to, cross, now, &mut self.rng) + o.extra;
            let acc = if cross { &mut self.cross } else { &mut self.intra };
            acc.0 += (at - now) as f64 / MS as f64;
            acc.1 += 1;
            if self.nodes[to].role().is_honest() {
                self.in_flight_honest += 1;
            }
            self.push(
                at,
                Ev::Deliver {
                    from,
                    to,
                    world: o.world,
                    packet: o.packet,
                },
            );
        }
    }

    fn all_honest_done(&self) -> bool {
        self.nodes
            .iter()
            .filter(|n| n.role().is_honest())
            .all(|n| n.done())
    }

    pub fn run(mut self) -> SimResult {
        for i in 0..self.nodes.len() {
            self.push(0, Ev::Start(i));
        }
        let gst = self.cfg.delay.gst();
        while let Some(((t, _), ev)) = self.queue.pop_first() {
            if t > self.cfg.horizon {
                self.metrics.horizon_hit = true;
                break;
            }
            self.metrics.events += 1;
            self.metrics.end_time = t;
            let mut io = Io {
                now: t,
                gst,
                ..Default::default()
            };
            let idx = match ev {
                Ev::Start(i) => {
                    self.nodes[i].start(&mut io);
                    i
                }
                Ev::Deliver {
                    from,
                    to,
                    world,
                    packet,
                } => {
                    if self.nodes[to].role().is_honest() {
                        self.in_flight_honest -= 1;
                    }
                    if self.cfg.trace {
                        self.trace.push(TraceLine {
                            t,
                            from: from.0,
                            to: self.nodes[to].id().0,
                            msgs: packet.messages().iter().map(|m| hex::encode(m.encode())).collect(),
                        });
                    }
                    self.nodes[to].on_packet(&mut io, from, world, &packet);
                    to
                }
                Ev::Timer { node, world, key } => {
                    self.nodes[node].on_timer(&mut io, world, key);
                    node
                }
            };
            let id = self.nodes[idx].id();
            self.flush(id, io);
            if self.in_flight_honest == 0 && self.all_honest_done() {
                break;
            }
        }
        let mean = |(s, c): (f64, u64)| if c == 0 { 0.0 } else { s / c as f64 };
        self.metrics.mean_intra_delay_ms = mean(self.intra);
        self.metrics.mean_cross_delay_ms = mean(self.cross);
        let reports = self
            .nodes
            .iter()
            .map(|n| (n.id(), n.role(), n.report()))
            .collect();
        SimResult {
            reports,
            metrics: self.metrics,
            trace: self.trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DelayModel::uniform(200.0, 200.0, 1000.0);
        assert_eq!(m.sample(ProcessId(0), ProcessId(1), false, 0, &mut rng), 200 * MS);
        let slow = DelayModel {
            base: Dist::Uniform { lo_ms: 5000.0, hi_ms: 9000.0 },
            cross: None,
            gst_ms: 100.0,
            delta_ms: 50.0,
        };
        for now in [0, 100 * MS, 400 * MS] {
            let at = slow.sample(ProcessId(0), ProcessId(1), false, now, &mut rng);
            assert!(at <= now.max(100 * MS) + 50 * MS);
        }
    }

    #[test]
    fn trace_table() {
        let csv = "from,eu,us\neu,10,82\nus,82,12\n";
        let t = LatencyTrace::from_csv(csv, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dist::Trace(t);
        assert_eq!(d.sample(ProcessId(0), ProcessId(1), &mut rng), 82 * MS);
        assert_eq!(d.sample(ProcessId(1), ProcessId(3), &mut rng), 12 * MS);
        assert!(LatencyTrace::from_csv("from,a\na,x\n", 0.0).is_err());
    }
}
