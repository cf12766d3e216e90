//! Identities, canonical encoding, signatures and proofs of fraud.
//!
//! Every protocol message is a [`SignedMessage`]. The signature covers the
//! canonical encoding of all fields except the signature itself; an attached
//! certificate is covered through its digest, so messages embedded in other
//! certificates can be carried without their own certificate and still verify.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, RwLock};

use ed25519_dalek::{Signer as _, Verifier as _};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub type Digest = [u8; 32];

/// Shared handle to an immutable signed message.
pub type Msg = Arc<SignedMessage>;

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

#[derive(
    Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Est,
    Coord,
    Echo,
    BvEcho,
    BvReady,
    Init,
    Ready,
    PofList,
    Decision,
}

impl MessageKind {
    const ALL: [MessageKind; 9] = [
        MessageKind::Est,
        MessageKind::Coord,
        MessageKind::Echo,
        MessageKind::BvEcho,
        MessageKind::BvReady,
        MessageKind::Init,
        MessageKind::Ready,
        MessageKind::PofList,
        MessageKind::Decision,
    ];

    fn code(self) -> u8 {
        MessageKind::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        MessageKind::ALL.get(c as usize).copied()
    }

    /// Kinds for which two different payloads in one slot are a fraud.
    pub fn conflict_eligible(self) -> bool {
        !matches!(self, MessageKind::PofList | MessageKind::Decision)
    }

    /// Kinds an honest process may legitimately send once per value.
    fn value_keyed(self) -> bool {
        matches!(self, MessageKind::BvEcho | MessageKind::BvReady)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Reliable broadcast traffic.
    Broadcast,
    /// Binary-value broadcast and coordinator proposal (first phase of a round).
    BinValue,
    /// Auxiliary echo (second phase of a round).
    Aux,
    /// Binary decision certificate.
    Decide,
    /// Proof-of-fraud gossip.
    Control,
    /// Block confirmation.
    Confirm,
}

impl Phase {
    const ALL: [Phase; 6] = [
        Phase::Broadcast,
        Phase::BinValue,
        Phase::Aux,
        Phase::Decide,
        Phase::Control,
        Phase::Confirm,
    ];

    fn code(self) -> u8 {
        Phase::ALL.iter().position(|p| *p == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Phase::ALL.get(c as usize).copied()
    }
}

/// Which protocol a consensus instance belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    /// Standalone binary consensus.
    Binary,
    /// Replicated-state-machine slot.
    Asmr,
    /// Membership change: exclusion consensus.
    Exclusion,
    /// Membership change: inclusion consensus.
    Inclusion,
}

impl Layer {
    const ALL: [Layer; 4] = [Layer::Binary, Layer::Asmr, Layer::Exclusion, Layer::Inclusion];

    fn code(self) -> u8 {
        Layer::ALL.iter().position(|l| *l == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Layer::ALL.get(c as usize).copied()
    }
}

/// Identifies one consensus instance. The epoch counts committee changes so that
/// an instance restarted under a new committee never shares slots with the old one.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConsensusId {
    pub layer: Layer,
    pub epoch: u32,
    pub index: u64,
}

impl ConsensusId {
    pub fn new(layer: Layer, epoch: u32, index: u64) -> Self {
        ConsensusId { layer, epoch, index }
    }

    pub fn sub(self, sub: u32) -> InstanceId {
        InstanceId { consensus: self, sub }
    }
}

impl fmt::Display for ConsensusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{}/{}", self.layer, self.epoch, self.index)
    }
}

/// (consensus index, sub-instance index).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId {
    pub consensus: ConsensusId,
    pub sub: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub round: u32,
    pub value: Vec<u8>,
    /// Supporting messages, each carried without its own certificate.
    pub signatures: Vec<Msg>,
}

impl Certificate {
    pub fn new(round: u32, value: Vec<u8>, signatures: Vec<Msg>) -> Self {
        let signatures = signatures.into_iter().map(strip).collect();
        Certificate {
            round,
            value,
            signatures,
        }
    }

    pub fn digest(&self) -> Digest {
        let mut w = Writer::default();
        encode_certificate(&mut w, self);
        sha256(&w.buf)
    }

    pub fn signers(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.signatures.iter().map(|m| m.signer)
    }
}

/// A message before signing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsignedMessage {
    pub kind: MessageKind,
    pub instance: InstanceId,
    pub round: u32,
    pub phase: Phase,
    pub payload: Vec<u8>,
    pub certificate: Option<Certificate>,
    pub signer: ProcessId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignedMessage {
    pub kind: MessageKind,
    pub instance: InstanceId,
    pub round: u32,
    pub phase: Phase,
    pub payload: Vec<u8>,
    /// Present on messages received directly; absent on embedded copies.
    pub certificate: Option<Arc<Certificate>>,
    /// Digest of the certificate covered by the signature, if one was attached.
    pub cert_digest: Option<Digest>,
    pub signer: ProcessId,
    pub signature: Vec<u8>,
}

impl SignedMessage {
    /// Bytes covered by the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        encode_header(
            &mut w,
            self.kind,
            &self.instance,
            self.round,
            self.phase,
            &self.payload,
            self.signer,
            self.cert_digest.as_ref(),
        );
        w.buf
    }

    /// Wire encoding: header, optional certificate, signature.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        encode_message(&mut w, self);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<SignedMessage, DecodeError> {
        let mut r = Reader::new(bytes);
        let m = decode_message(&mut r, 0)?;
        r.finish()?;
        Ok(m)
    }

    /// Unique identity of this signed statement (independent of the attached certificate body).
    pub fn id(&self) -> Digest {
        let mut bytes = self.signing_bytes();
        bytes.extend_from_slice(&self.signature);
        sha256(&bytes)
    }

    pub fn stripped(&self) -> SignedMessage {
        SignedMessage {
            certificate: None,
            ..self.clone()
        }
    }

    pub fn bit(&self) -> Option<bool> {
        match self.payload.as_slice() {
            [0] => Some(false),
            [1] => Some(true),
            _ => None,
        }
    }

    fn slot(&self) -> SlotKey {
        SlotKey {
            signer: self.signer,
            kind: self.kind,
            instance: self.instance,
            round: self.round,
            phase: self.phase,
            value: if self.kind.value_keyed() {
                Some(self.payload.clone())
            } else {
                None
            },
        }
    }
}

/// Drops the certificate body of a message while keeping its digest.
pub fn strip(m: Msg) -> Msg {
    if m.certificate.is_none() {
        m
    } else {
        Arc::new(m.stripped())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("invalid tag {0}")]
    Tag(u8),
    #[error("trailing bytes")]
    Trailing,
    #[error("nesting too deep")]
    Depth,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError::Trailing)
        }
    }
}

const DOMAIN: &[u8; 4] = b"BSL1";

#[allow(clippy::too_many_arguments)]
fn encode_header(
    w: &mut Writer,
    kind: MessageKind,
    instance: &InstanceId,
    round: u32,
    phase: Phase,
    payload: &[u8],
    signer: ProcessId,
    cert_digest: Option<&Digest>,
) {
    w.buf.extend_from_slice(DOMAIN);
    w.u8(kind.code());
    w.u8(instance.consensus.layer.code());
    w.u32(instance.consensus.epoch);
    w.u64(instance.consensus.index);
    w.u32(instance.sub);
    w.u32(round);
    w.u8(phase.code());
    w.u32(signer.0);
    w.bytes(payload);
    match cert_digest {
        Some(d) => {
            w.u8(1);
            w.buf.extend_from_slice(d);
        }
        None => w.u8(0),
    }
}

fn encode_message(w: &mut Writer, m: &SignedMessage) {
    encode_header(
        w,
        m.kind,
        &m.instance,
        m.round,
        m.phase,
        &m.payload,
        m.signer,
        m.cert_digest.as_ref(),
    );
    match &m.certificate {
        Some(c) => {
            w.u8(1);
            encode_certificate(w, c);
        }
        None => w.u8(0),
    }
    w.bytes(&m.signature);
}

fn encode_certificate(w: &mut Writer, c: &Certificate) {
    w.u32(c.round);
    w.bytes(&c.value);
    w.u32(c.signatures.len() as u32);
    for m in &c.signatures {
        encode_message(w, m);
    }
}

const MAX_DEPTH: usize = 4;

fn decode_message(r: &mut Reader<'_>, depth: usize) -> Result<SignedMessage, DecodeError> {
    if depth > MAX_DEPTH {
        return Err(DecodeError::Depth);
    }
    if r.take(4)? != DOMAIN {
        return Err(DecodeError::Tag(0));
    }
    let k = r.u8()?;
    let kind = MessageKind::from_code(k).ok_or(DecodeError::Tag(k))?;
    let l = r.u8()?;
    let layer = Layer::from_code(l).ok_or(DecodeError::Tag(l))?;
    let epoch = r.u32()?;
    let index = r.u64()?;
    let sub = r.u32()?;
    let round = r.u32()?;
    let p = r.u8()?;
    let phase = Phase::from_code(p).ok_or(DecodeError::Tag(p))?;
    let signer = ProcessId(r.u32()?);
    let payload = r.bytes()?;
    let cert_digest = match r.u8()? {
        0 => None,
        1 => Some(<Digest>::try_from(r.take(32)?).unwrap()),
        t => return Err(DecodeError::Tag(t)),
    };
    let certificate = match r.u8()? {
        0 => None,
        1 => Some(Arc::new(decode_certificate(r, depth + 1)?)),
        t => return Err(DecodeError::Tag(t)),
    };
    let signature = r.bytes()?;
    Ok(SignedMessage {
        kind,
        instance: ConsensusId::new(layer, epoch, index).sub(sub),
        round,
        phase,
        payload,
        certificate,
        cert_digest,
        signer,
        signature,
    })
}

fn decode_certificate(r: &mut Reader<'_>, depth: usize) -> Result<Certificate, DecodeError> {
    let round = r.u32()?;
    let value = r.bytes()?;
    let count = r.u32()? as usize;
    let mut signatures = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        signatures.push(Arc::new(decode_message(r, depth)?));
    }
    Ok(Certificate {
        round,
        value,
        signatures,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub secret: Vec<u8>,
    pub public: Vec<u8>,
    pub security_bits: u32,
}

/// Pluggable signature backend.
pub trait SignatureScheme: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    /// Derives a key pair deterministically from a 32-byte seed.
    fn keypair(&self, seed: [u8; 32]) -> KeyPair;
    fn sign_bytes(&self, key: &KeyPair, bytes: &[u8]) -> Vec<u8>;
    fn verify_bytes(&self, public: &[u8], bytes: &[u8], signature: &[u8]) -> bool;
}

/// Ed25519 signatures.
#[derive(Debug, Default)]
pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    fn name(&self) -> &'static str {
        "ed25519"
    }

    fn keypair(&self, seed: [u8; 32]) -> KeyPair {
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        KeyPair {
            secret: seed.to_vec(),
            public: sk.verifying_key().to_bytes().to_vec(),
            security_bits: 128,
        }
    }

    fn sign_bytes(&self, key: &KeyPair, bytes: &[u8]) -> Vec<u8> {
        let seed: [u8; 32] = key.secret.as_slice().try_into().expect("ed25519 seed");
        let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
        sk.sign(bytes).to_bytes().to_vec()
    }

    fn verify_bytes(&self, public: &[u8], bytes: &[u8], signature: &[u8]) -> bool {
        let Ok(pk) = <[u8; 32]>::try_from(public) else {
            return false;
        };
        let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
            return false;
        };
        vk.verify(bytes, &sig).is_ok()
    }
}

/// Keyed-hash tags checked against a per-run registry of secrets.
///
/// Only as strong as the registry is private; the simulator never forges.
#[derive(Debug, Default)]
pub struct KeyedHash {
    registry: RwLock<HashMap<Vec<u8>, Vec<u8>>>,
}

impl KeyedHash {
    pub fn new() -> Self {
        Self::default()
    }

    fn tag(secret: &[u8], bytes: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update((secret.len() as u32).to_be_bytes());
        h.update(secret);
        h.update(bytes);
        h.finalize().to_vec()
    }
}

impl SignatureScheme for KeyedHash {
    fn name(&self) -> &'static str {
        "keyed-sha256"
    }

    fn keypair(&self, seed: [u8; 32]) -> KeyPair {
        let secret = seed.to_vec();
        let mut p = b"public".to_vec();
        p.extend_from_slice(&secret);
        let public = sha256(&p).to_vec();
        self.registry
            .write()
            .unwrap()
            .insert(public.clone(), secret.clone());
        KeyPair {
            secret,
            public,
            security_bits: 128,
        }
    }

    fn sign_bytes(&self, key: &KeyPair, bytes: &[u8]) -> Vec<u8> {
        Self::tag(&key.secret, bytes)
    }

    fn verify_bytes(&self, public: &[u8], bytes: &[u8], signature: &[u8]) -> bool {
        let reg = self.registry.read().unwrap();
        match reg.get(public) {
            Some(secret) => Self::tag(secret, bytes) == signature,
            None => false,
        }
    }
}

/// Signs `msg` under `key`. Total over well-formed input.
pub fn sign(scheme: &dyn SignatureScheme, key: &KeyPair, msg: UnsignedMessage) -> SignedMessage {
    let cert_digest = msg.certificate.as_ref().map(Certificate::digest);
    let mut m = SignedMessage {
        kind: msg.kind,
        instance: msg.instance,
        round: msg.round,
        phase: msg.phase,
        payload: msg.payload,
        certificate: msg.certificate.map(Arc::new),
        cert_digest,
        signer: msg.signer,
        signature: Vec::new(),
    };
    m.signature = scheme.sign_bytes(key, &m.signing_bytes());
    m
}

/// True iff the signature matches the canonical encoding under `public` and
/// any attached certificate matches the signed digest.
pub fn verify(scheme: &dyn SignatureScheme, msg: &SignedMessage, public: &[u8]) -> bool {
    if let Some(c) = &msg.certificate {
        if msg.cert_digest != Some(c.digest()) {
            return false;
        }
    }
    scheme.verify_bytes(public, &msg.signing_bytes(), &msg.signature)
}

/// Public keys of every process in a run plus the scheme itself.
#[derive(Clone, Debug)]
pub struct Keyring {
    scheme: Arc<dyn SignatureScheme>,
    publics: Vec<Vec<u8>>,
}

impl Keyring {
    /// Generates `count` key pairs from `seed`, returning the keyring and secrets.
    pub fn generate(
        scheme: Arc<dyn SignatureScheme>,
        count: usize,
        seed: u64,
    ) -> (Keyring, Vec<KeyPair>) {
        let keys: Vec<KeyPair> = (0..count)
            .map(|i| {
                let mut s = b"basilic-key".to_vec();
                s.extend_from_slice(&seed.to_be_bytes());
                s.extend_from_slice(&(i as u64).to_be_bytes());
                scheme.keypair(sha256(&s))
            })
            .collect();
        let publics = keys.iter().map(|k| k.public.clone()).collect();
        (Keyring { scheme, publics }, keys)
    }

    pub fn scheme(&self) -> &dyn SignatureScheme {
        self.scheme.as_ref()
    }

    pub fn len(&self) -> usize {
        self.publics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.publics.is_empty()
    }

    pub fn public(&self, id: ProcessId) -> Option<&[u8]> {
        self.publics.get(id.0 as usize).map(Vec::as_slice)
    }

    pub fn verify(&self, msg: &SignedMessage) -> bool {
        match self.public(msg.signer) {
            Some(pk) => verify(self.scheme.as_ref(), msg, pk),
            None => false,
        }
    }

    /// Verifies a detached signature by `id` over `bytes`.
    pub fn verify_raw(&self, id: ProcessId, bytes: &[u8], signature: &[u8]) -> bool {
        self.public(id)
            .is_some_and(|pk| self.scheme.verify_bytes(pk, bytes, signature))
    }

    /// Verifies a message and every message embedded in its certificate.
    pub fn verify_deep(&self, msg: &SignedMessage) -> bool {
        self.verify(msg)
            && msg
                .certificate
                .as_ref()
                .is_none_or(|c| c.signatures.iter().all(|m| self.verify(m)))
    }
}

/// A process's signing identity.
#[derive(Clone, Debug)]
pub struct Signer {
    pub id: ProcessId,
    key: KeyPair,
    scheme: Arc<dyn SignatureScheme>,
}

impl Signer {
    pub fn new(id: ProcessId, key: KeyPair, keyring: &Keyring) -> Self {
        Signer {
            id,
            key,
            scheme: keyring.scheme.clone(),
        }
    }

    pub fn sign(
        &self,
        kind: MessageKind,
        instance: InstanceId,
        round: u32,
        phase: Phase,
        payload: Vec<u8>,
        certificate: Option<Certificate>,
    ) -> Msg {
        Arc::new(sign(
            self.scheme.as_ref(),
            &self.key,
            UnsignedMessage {
                kind,
                instance,
                round,
                phase,
                payload,
                certificate,
                signer: self.id,
            },
        ))
    }

    /// Detached signature over arbitrary bytes.
    pub fn sign_raw(&self, bytes: &[u8]) -> Vec<u8> {
        self.scheme.sign_bytes(&self.key, bytes)
    }

    /// Re-signs `msg` under this identity with a different payload.
    pub fn resign_with_payload(&self, msg: &SignedMessage, payload: Vec<u8>) -> Msg {
        let mut m = SignedMessage {
            payload,
            signature: Vec::new(),
            ..msg.clone()
        };
        m.signer = self.id;
        m.signature = self.scheme.sign_bytes(&self.key, &m.signing_bytes());
        Arc::new(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct SlotKey {
    signer: ProcessId,
    kind: MessageKind,
    instance: InstanceId,
    round: u32,
    phase: Phase,
    value: Option<Vec<u8>>,
}

/// Dedup key of a proof of fraud.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PofKey {
    pub accused: ProcessId,
    pub kind: MessageKind,
    pub instance: InstanceId,
    pub round: u32,
    pub phase: Phase,
}

/// True iff the two messages cannot both be sent by one honest process.
pub fn conflicting(a: &SignedMessage, b: &SignedMessage) -> bool {
    a.kind.conflict_eligible() && a.slot() == b.slot() && a.payload != b.payload
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProofOfFraud {
    pub first: Msg,
    pub second: Msg,
}

impl ProofOfFraud {
    pub fn accused(&self) -> ProcessId {
        self.first.signer
    }

    pub fn key(&self) -> PofKey {
        PofKey {
            accused: self.first.signer,
            kind: self.first.kind,
            instance: self.first.instance,
            round: self.first.round,
            phase: self.first.phase,
        }
    }

    pub fn verify(&self, keyring: &Keyring) -> bool {
        self.first.signer == self.second.signer
            && conflicting(&self.first, &self.second)
            && keyring.verify(&self.first)
            && keyring.verify(&self.second)
    }
}

pub fn verify_pofs(pofs: &[ProofOfFraud], keyring: &Keyring) -> bool {
    pofs.iter().all(|p| p.verify(keyring))
}

pub fn encode_pofs(pofs: &[ProofOfFraud]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(pofs.len() as u32);
    for p in pofs {
        encode_message(&mut w, &p.first);
        encode_message(&mut w, &p.second);
    }
    w.buf
}

pub fn decode_pofs(bytes: &[u8]) -> Result<Vec<ProofOfFraud>, DecodeError> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let first = Arc::new(decode_message(&mut r, 0)?);
        let second = Arc::new(decode_message(&mut r, 0)?);
        out.push(ProofOfFraud { first, second });
    }
    r.finish()?;
    Ok(out)
}

/// Append-only store of signed messages, first message per slot.
#[derive(Clone, Debug, Default)]
pub struct MessageStore {
    slots: BTreeMap<SlotKey, Msg>,
    reported: HashSet<PofKey>,
}

impl MessageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// First message of every slot, in slot order.
    pub fn messages(&self) -> impl Iterator<Item = &Msg> {
        self.slots.values()
    }

    /// True if an identical message already occupies this message's slot.
    pub fn holds(&self, m: &SignedMessage) -> bool {
        self.slots.get(&m.slot()).is_some_and(|f| f.payload == m.payload)
    }

    /// Stores `new` and returns one proof per freshly conflicting slot.
    pub fn check_conflicts<'a, I>(&mut self, new: I) -> Vec<ProofOfFraud>
    where
        I: IntoIterator<Item = &'a Msg>,
    {
        let mut out = Vec::new();
        for m in new {
            if !m.kind.conflict_eligible() {
                continue;
            }
            let slot = m.slot();
            match self.slots.get(&slot) {
                None => {
                    self.slots.insert(slot, strip(m.clone()));
                }
                Some(first) if first.payload != m.payload => {
                    let pof = ProofOfFraud {
                        first: first.clone(),
                        second: strip(m.clone()),
                    };
                    if self.reported.insert(pof.key()) {
                        out.push(pof);
                    }
                }
                Some(_) => {}
            }
        }
        out
    }
}

/// Free-function form of [`MessageStore::check_conflicts`].
pub fn check_conflicts(new: &[Msg], store: &mut MessageStore) -> Vec<ProofOfFraud> {
    store.check_conflicts(new)
}

pub fn bit_payload(b: bool) -> Vec<u8> {
    vec![b as u8]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(scheme: Arc<dyn SignatureScheme>) -> (Keyring, Vec<Signer>) {
        let (ring, keys) = Keyring::generate(scheme, 3, 7);
        let signers = keys
            .into_iter()
            .enumerate()
            .map(|(i, k)| Signer::new(ProcessId(i as u32), k, &ring))
            .collect();
        (ring, signers)
    }

    fn inst() -> InstanceId {
        ConsensusId::new(Layer::Binary, 0, 0).sub(2)
    }

    fn echo(s: &Signer, round: u32, v: u8) -> Msg {
        s.sign(MessageKind::Echo, inst(), round, Phase::Aux, vec![v], None)
    }

    #[test]
    fn sign_verify_both_schemes() {
        for scheme in [
            Arc::new(Ed25519) as Arc<dyn SignatureScheme>,
            Arc::new(KeyedHash::new()),
        ] {
            let (ring, s) = ring(scheme);
            let m = echo(&s[0], 1, 1);
            assert!(ring.verify(&m));
            let pk1 = ring.public(ProcessId(1)).unwrap();
            assert!(!verify(ring.scheme(), &m, pk1));
        }
    }

    #[test]
    fn encoding_round_trip_with_certificate() {
        let (ring, s) = ring(Arc::new(KeyedHash::new()));
        let inner: Vec<Msg> = (0..3).map(|i| echo(&s[i], 1, 1)).collect();
        let cert = Certificate::new(1, vec![1], inner);
        let m = s[0].sign(
            MessageKind::Decision,
            inst(),
            1,
            Phase::Decide,
            vec![1],
            Some(cert),
        );
        let back = SignedMessage::decode(&m.encode()).unwrap();
        assert_eq!(&back, m.as_ref());
        assert!(ring.verify_deep(&back));
        let stripped = back.stripped();
        assert!(ring.verify(&stripped));
    }

    #[test]
    fn tampered_certificate_fails() {
        let (ring, s) = ring(Arc::new(KeyedHash::new()));
        let cert = Certificate::new(1, vec![1], vec![echo(&s[1], 1, 1)]);
        let m = s[0].sign(
            MessageKind::Ready,
            inst(),
            0,
            Phase::Broadcast,
            vec![9],
            Some(cert),
        );
        let mut bad = (*m).clone();
        bad.certificate = Some(Arc::new(Certificate::new(1, vec![0], vec![])));
        assert!(!ring.verify(&bad));
    }

    #[test]
    fn conflicts_detected_once() {
        let (ring, s) = ring(Arc::new(KeyedHash::new()));
        let mut store = MessageStore::new();
        let a = echo(&s[2], 3, 1);
        let b = echo(&s[2], 3, 2);
        assert!(store.check_conflicts([&a, &a]).is_empty());
        let pofs = store.check_conflicts([&b]);
        assert_eq!(pofs.len(), 1);
        assert!(verify_pofs(&pofs, &ring));
        assert_eq!(pofs[0].accused(), ProcessId(2));
        assert!(store.check_conflicts([&b]).is_empty());
        let other_round = echo(&s[2], 4, 2);
        assert!(store.check_conflicts([&other_round]).is_empty());
    }

    #[test]
    fn value_keyed_kinds_never_conflict() {
        let (_, s) = ring(Arc::new(KeyedHash::new()));
        let mut store = MessageStore::new();
        let b0 = s[0].sign(MessageKind::BvEcho, inst(), 1, Phase::BinValue, vec![0], None);
        let b1 = s[0].sign(MessageKind::BvEcho, inst(), 1, Phase::BinValue, vec![1], None);
        assert!(store.check_conflicts([&b0, &b1]).is_empty());
        let e0 = s[0].sign(MessageKind::Est, inst(), 1, Phase::BinValue, vec![0], None);
        let e1 = s[0].sign(MessageKind::Est, inst(), 1, Phase::BinValue, vec![1], None);
        assert_eq!(store.check_conflicts([&e0, &e1]).len(), 1);
    }

    #[test]
    fn pof_list_round_trip() {
        let (ring, s) = ring(Arc::new(Ed25519));
        let pof = ProofOfFraud {
            first: echo(&s[1], 1, 0),
            second: echo(&s[1], 1, 1),
        };
        let back = decode_pofs(&encode_pofs(std::slice::from_ref(&pof))).unwrap();
        assert_eq!(back, vec![pof.clone()]);
        assert!(verify_pofs(&back, &ring));
        let mixed = ProofOfFraud {
            first: echo(&s[1], 1, 0),
            second: echo(&s[2], 1, 1),
        };
        assert!(!mixed.verify(&ring));
    }
}
