//! Actively accountable consensus in the Byzantine-deceitful-benign fault
//! model, with membership change, fork merging and a deterministic simulator.

pub mod aabc;
pub mod aarb;
pub mod actor;
pub mod analysis;
pub mod basilic;
pub mod committee;
pub mod crypto;
pub mod harness;
pub mod ledger;
pub mod membership;
pub mod simnet;

pub use actor::{Effects, Env, Event, Packet, ProtocolConfig, TimeoutSchedule, TimerKey};
pub use basilic::{Basilic, DecisionMode, Outcome};
pub use committee::{Committee, FaultProfile};
pub use crypto::{
    Certificate, ConsensusId, InstanceId, Keyring, MessageKind, Msg, Phase, ProcessId,
    ProofOfFraud, SignedMessage, Signer,
};
