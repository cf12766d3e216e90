//! UTXO ledger with fork merging and a slashing deposit.
//!
//! A conflicting block is merged transaction by transaction: spendable inputs
//! are consumed, the others are funded from the deposit and remembered so a
//! later block that creates them refunds the deposit. The deposit is a signed
//! balance, so a shortfall is recorded instead of aborting the merge.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sha256, Digest, Keyring, ProcessId, Signer};

pub type Account = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutPoint {
    #[serde(with = "hex_digest")]
    pub tx: Digest,
    pub index: u32,
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("digest length"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxInput {
    pub outpoint: OutPoint,
    pub value: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TxOutput {
    pub account: Account,
    pub value: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub issuer: ProcessId,
    pub seq: u64,
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
    #[serde(with = "hex")]
    pub signature: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("outputs exceed inputs")]
    Unbalanced,
    #[error("bad signature on transaction {0}")]
    BadSignature(String),
    #[error("sequence {seq} not above {last} for issuer {issuer}")]
    Sequence { issuer: u32, seq: u64, last: u64 },
    #[error("input {0} is not spendable")]
    Unspendable(String),
    #[error("block gain {gain} exceeds cap {cap}")]
    GainCap { gain: u64, cap: u64 },
    #[error("invalid deposit policy: {0}")]
    Policy(String),
}

impl Transaction {
    /// Canonical encoding without the signature; its hash names the outputs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.issuer.0.to_be_bytes());
        b.extend_from_slice(&self.seq.to_be_bytes());
        b.extend_from_slice(&(self.inputs.len() as u32).to_be_bytes());
        for i in &self.inputs {
            b.extend_from_slice(&i.outpoint.tx);
            b.extend_from_slice(&i.outpoint.index.to_be_bytes());
            b.extend_from_slice(&i.value.to_be_bytes());
        }
        b.extend_from_slice(&(self.outputs.len() as u32).to_be_bytes());
        for o in &self.outputs {
            b.extend_from_slice(&o.account.to_be_bytes());
            b.extend_from_slice(&o.value.to_be_bytes());
        }
        b
    }

    pub fn hash(&self) -> Digest {
        sha256(&self.signing_bytes())
    }

    pub fn signed(signer: &Signer, seq: u64, inputs: Vec<TxInput>, outputs: Vec<TxOutput>) -> Self {
        let mut tx = Transaction {
            issuer: signer.id,
            seq,
            inputs,
            outputs,
            signature: Vec::new(),
        };
        tx.signature = signer.sign_raw(&tx.signing_bytes());
        tx
    }

    pub fn outpoint(&self, index: u32) -> OutPoint {
        OutPoint {
            tx: self.hash(),
            index,
        }
    }

    pub fn input_total(&self) -> u64 {
        self.inputs.iter().map(|i| i.value).sum()
    }

    pub fn output_total(&self) -> u64 {
        self.outputs.iter().map(|o| o.value).sum()
    }

    /// Balance and signature, independent of any ledger state.
    pub fn validate(&self, keyring: &Keyring) -> Result<(), LedgerError> {
        if self.output_total() > self.input_total() {
            return Err(LedgerError::Unbalanced);
        }
        if !keyring.verify_raw(self.issuer, &self.signing_bytes(), &self.signature) {
            return Err(LedgerError::BadSignature(hex::encode(&self.hash()[..8])));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub txs: Vec<Transaction>,
    /// Digest of the certificate that decided this block, if any.
    #[serde(default)]
    pub cert_digest: Option<String>,
}

/// Sum of all outputs of all transactions.
pub fn gain_of_block(block: &Block) -> u64 {
    block.txs.iter().map(Transaction::output_total).sum()
}

/// Gain cap, deposit factor and finalisation depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepositPolicy {
    /// Maximum gain per block, in coins.
    pub gain_cap: u64,
    pub b: f64,
    /// Blocks a deposit is retained before refund.
    pub blockdepth: u32,
}

impl DepositPolicy {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.gain_cap == 0 || !(self.b > 0.0) {
            return Err(LedgerError::Policy("gain_cap and b must be positive".into()));
        }
        Ok(())
    }

    /// Total deposit, b times the gain cap.
    pub fn total_deposit(&self) -> f64 {
        self.b * self.gain_cap as f64
    }

    /// Deposit of one process, 3bG/n.
    pub fn per_process_deposit(&self, n: usize) -> f64 {
        3.0 * self.total_deposit() / n as f64
    }

    /// Whether every coalition of ceil(n/3) processes holds the total deposit.
    pub fn coalition_covers(&self, n: usize) -> bool {
        n.div_ceil(3) as f64 * self.per_process_deposit(n) + 1e-9 >= self.total_deposit()
    }

    /// Block validity hook: rejects blocks above the gain cap.
    pub fn check_block(&self, block: &Block) -> Result<u64, LedgerError> {
        let gain = gain_of_block(block);
        if gain > self.gain_cap {
            return Err(LedgerError::GainCap {
                gain,
                cap: self.gain_cap,
            });
        }
        Ok(gain)
    }
}

/// One entry of the chain dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub index: u64,
    pub merged: bool,
    pub txs: Vec<String>,
    pub cert_digest: Option<String>,
    pub gain: u64,
}

/// Blockchain state of one process.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LedgerState {
    pub deposit: i128,
    /// Deposit-funded inputs with their value and multiplicity.
    pub inputs_deposit: BTreeMap<OutPoint, (u64, u32)>,
    pub punished_acts: BTreeSet<Account>,
    /// Outputs credited to punished accounts during merges.
    pub punished_outputs: BTreeSet<OutPoint>,
    pub txs: BTreeSet<Digest>,
    pub utxos: BTreeMap<OutPoint, TxOutput>,
    pub seqs: BTreeMap<ProcessId, u64>,
    pub blocks: Vec<BlockRecord>,
}

impl LedgerState {
    pub fn new(deposit: i128) -> Self {
        LedgerState {
            deposit,
            ..Default::default()
        }
    }

    /// Adds the genesis outputs directly.
    pub fn with_genesis(deposit: i128, genesis: &Transaction) -> Self {
        let mut s = LedgerState::new(deposit);
        s.txs.insert(genesis.hash());
        s.add_outputs(genesis);
        s
    }

    pub fn deposit_negative(&self) -> bool {
        self.deposit < 0
    }

    pub fn punish_account(&mut self, account: Account) {
        self.punished_acts.insert(account);
    }

    fn add_outputs(&mut self, tx: &Transaction) {
        let h = tx.hash();
        for (i, o) in tx.outputs.iter().enumerate() {
            self.utxos.insert(OutPoint { tx: h, index: i as u32 }, o.clone());
        }
    }

    /// Normal commit of a non-conflicting block: every transaction must be
    /// valid, fresh in sequence and fully spendable.
    pub fn commit_block(&mut self, keyring: &Keyring, block: &Block) -> Result<(), LedgerError> {
        let mut trial = self.clone();
        for tx in &block.txs {
            if trial.txs.contains(&tx.hash()) {
                continue;
            }
            tx.validate(keyring)?;
            let last = trial.seqs.get(&tx.issuer).copied();
            if let Some(last) = last {
                if tx.seq <= last {
                    return Err(LedgerError::Sequence {
                        issuer: tx.issuer.0,
                        seq: tx.seq,
                        last,
                    });
                }
            }
            for i in &tx.inputs {
                if trial.utxos.remove(&i.outpoint).is_none() {
                    return Err(LedgerError::Unspendable(hex::encode(&i.outpoint.tx[..8])));
                }
            }
            trial.seqs.insert(tx.issuer, tx.seq);
            trial.txs.insert(tx.hash());
            trial.add_outputs(tx);
        }
        trial.store(block, false);
        *self = trial;
        Ok(())
    }

    /// Applies one transaction of a conflicting block.
    pub fn commit_tx_merge(&mut self, tx: &Transaction) {
        for i in &tx.inputs {
            if self.utxos.remove(&i.outpoint).is_none() {
                let e = self.inputs_deposit.entry(i.outpoint).or_insert((i.value, 0));
                e.1 += 1;
                self.deposit -= i.value as i128;
            }
        }
        self.txs.insert(tx.hash());
        let last = self.seqs.entry(tx.issuer).or_insert(tx.seq);
        *last = (*last).max(tx.seq);
        self.add_outputs(tx);
    }

    /// Consumes deposit-funded inputs that became spendable and refills the deposit.
    pub fn refund_inputs(&mut self) {
        let ready: Vec<OutPoint> = self
            .inputs_deposit
            .keys()
            .filter(|o| self.utxos.contains_key(o))
            .copied()
            .collect();
        for o in ready {
            self.utxos.remove(&o);
            let (value, count) = self.inputs_deposit[&o];
            if count <= 1 {
                self.inputs_deposit.remove(&o);
            } else {
                self.inputs_deposit.insert(o, (value, count - 1));
            }
            self.deposit += value as i128;
        }
    }

    /// Merges a block that conflicts with the local chain. Invalid transactions
    /// reject the whole block.
    pub fn merge_block(&mut self, keyring: &Keyring, block: &Block) -> Result<(), LedgerError> {
        for tx in &block.txs {
            tx.validate(keyring)?;
        }
        self.merge_unchecked(block);
        Ok(())
    }

    /// Merge without signature checks, for replay of already verified blocks.
    pub fn merge_unchecked(&mut self, block: &Block) {
        for tx in &block.txs {
            if self.txs.contains(&tx.hash()) {
                continue;
            }
            self.commit_tx_merge(tx);
            for (i, out) in tx.outputs.iter().enumerate() {
                if self.punished_acts.contains(&out.account) {
                    self.punished_outputs.insert(tx.outpoint(i as u32));
                }
            }
        }
        self.refund_inputs();
        self.store(block, true);
    }

    fn store(&mut self, block: &Block, merged: bool) {
        self.blocks.push(BlockRecord {
            index: block.index,
            merged,
            txs: block.txs.iter().map(|t| hex::encode(t.hash())).collect(),
            cert_digest: block.cert_digest.clone(),
            gain: gain_of_block(block),
        });
    }

    /// Chain dump, one JSON object per line.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&serde_json::to_string(b).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Total value held by unspent outputs.
    pub fn utxo_value(&self) -> u64 {
        self.utxos.values().map(|o| o.value).sum()
    }
}

/// The state any merge order must reach, computed by counting spends of
/// every outpoint over the union of all transactions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayResult {
    pub utxos: BTreeMap<OutPoint, TxOutput>,
    pub deposit: i128,
    pub inputs_deposit: BTreeMap<OutPoint, (u64, u32)>,
}

pub fn replay_oracle(genesis: &Transaction, deposit: i128, txs: &[Transaction]) -> ReplayResult {
    let mut seen = BTreeSet::new();
    let mut created: BTreeMap<OutPoint, TxOutput> = BTreeMap::new();
    let mut spends: BTreeMap<OutPoint, (u64, u32)> = BTreeMap::new();
    for tx in std::iter::once(genesis).chain(txs) {
        if !seen.insert(tx.hash()) {
            continue;
        }
        for (i, o) in tx.outputs.iter().enumerate() {
            created.insert(tx.outpoint(i as u32), o.clone());
        }
        if std::ptr::eq(tx, genesis) {
            continue;
        }
        for i in &tx.inputs {
            let e = spends.entry(i.outpoint).or_insert((i.value, 0));
            e.1 += 1;
        }
    }
    let mut utxos = BTreeMap::new();
    let mut inputs_deposit = BTreeMap::new();
    let mut deposit = deposit;
    for (o, out) in &created {
        if !spends.contains_key(o) {
            utxos.insert(*o, out.clone());
        }
    }
    for (o, (value, k)) in spends {
        let funded = k - u32::from(created.contains_key(&o));
        if funded > 0 {
            inputs_deposit.insert(o, (value, funded));
            deposit -= value as i128 * funded as i128;
        }
    }
    ReplayResult {
        utxos,
        deposit,
        inputs_deposit,
    }
}

/// Two conflicting branches over a common genesis.
#[derive(Clone, Debug)]
pub struct ForkScenario {
    pub genesis: Transaction,
    pub deposit: i128,
    pub branch_a: Vec<Block>,
    pub branch_b: Vec<Block>,
}

impl ForkScenario {
    pub fn all_txs(&self) -> Vec<Transaction> {
        self.branch_a
            .iter()
            .chain(&self.branch_b)
            .flat_map(|b| b.txs.iter().cloned())
            .collect()
    }

    /// Applies `first` then merges `second`.
    pub fn replay(&self, b_first: bool) -> LedgerState {
        let (first, second) = if b_first {
            (&self.branch_b, &self.branch_a)
        } else {
            (&self.branch_a, &self.branch_b)
        };
        let mut s = LedgerState::with_genesis(self.deposit, &self.genesis);
        for b in first.iter().chain(second) {
            s.merge_unchecked(b);
        }
        s
    }
}

/// Random fork with double spends and dependent spends across branches.
/// Issuers rotate round-robin and values lie in 1..=100.
pub fn generate_fork(signers: &[Signer], seed: u64, max_txs: usize) -> ForkScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let issuers = signers.len().max(1);
    let mut seq = vec![0u64; issuers];
    let coins = rng.random_range(2..=6usize);
    let genesis_outputs: Vec<TxOutput> = (0..coins)
        .map(|i| TxOutput {
            account: (i % issuers) as u32,
            value: rng.random_range(1..=100),
        })
        .collect();
    let genesis = Transaction::signed(&signers[0], 0, Vec::new(), genesis_outputs);
    let mut pool: Vec<TxInput> = genesis
        .outputs
        .iter()
        .enumerate()
        .map(|(i, o)| TxInput {
            outpoint: genesis.outpoint(i as u32),
            value: o.value,
        })
        .collect();
    let total = rng.random_range(1..=max_txs.max(1));
    let mut branches: [Vec<Vec<Transaction>>; 2] = [vec![Vec::new()], vec![Vec::new()]];
    let mut k = 0usize;
    for _ in 0..total {
        if pool.is_empty() {
            break;
        }
        let take = rng.random_range(1..=pool.len().min(3));
        let mut inputs = Vec::new();
        for _ in 0..take {
            // reuse inputs sometimes to create double spends
            let idx = rng.random_range(0..pool.len());
            let inp = if rng.random_bool(0.3) { pool[idx].clone() } else { pool.swap_remove(idx) };
            if !inputs.contains(&inp) {
                inputs.push(inp);
            }
        }
        let value: u64 = inputs.iter().map(|i| i.value).sum();
        let split = if value > 1 && rng.random_bool(0.5) { rng.random_range(1..value) } else { value };
        let mut outputs = vec![TxOutput {
            account: rng.random_range(0..issuers as u32 + 2),
            value: split,
        }];
        if split < value {
            outputs.push(TxOutput {
                account: rng.random_range(0..issuers as u32 + 2),
                value: value - split,
            });
        }
        let who = k % issuers;
        k += 1;
        seq[who] += 1;
        let tx = Transaction::signed(&signers[who], seq[who], inputs, outputs);
        for (i, o) in tx.outputs.iter().enumerate() {
            pool.push(TxInput {
                outpoint: tx.outpoint(i as u32),
                value: o.value,
            });
        }
        let side = rng.random_range(0..3usize);
        for (b, branch) in branches.iter_mut().enumerate() {
            if side == 2 || side == b {
                if rng.random_bool(0.3) {
                    branch.push(Vec::new());
                }
                branch.last_mut().unwrap().push(tx.clone());
            }
        }
    }
    let to_blocks = |bs: &[Vec<Transaction>]| -> Vec<Block> {
        bs.iter()
            .enumerate()
            .map(|(i, txs)| Block {
                index: i as u64 + 1,
                txs: txs.clone(),
                cert_digest: None,
            })
            .collect()
    };
    ForkScenario {
        genesis,
        deposit: rng.random_range(0..=300),
        branch_a: to_blocks(&branches[0]),
        branch_b: to_blocks(&branches[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyedHash;
    use std::sync::Arc;

    fn signers(n: usize) -> (Keyring, Vec<Signer>) {
        let (ring, keys) = Keyring::generate(Arc::new(KeyedHash::new()), n, 7);
        let s = keys
            .into_iter()
            .enumerate()
            .map(|(i, k)| Signer::new(ProcessId(i as u32), k, &ring))
            .collect();
        (ring, s)
    }

    #[test]
    fn double_spend_uses_deposit_then_refunds() {
        let (ring, s) = signers(2);
        let genesis = Transaction::signed(&s[0], 0, vec![], vec![TxOutput { account: 0, value: 30 }]);
        let coin = TxInput {
            outpoint: genesis.outpoint(0),
            value: 30,
        };
        let mut st = LedgerState::with_genesis(100, &genesis);
        let pay_a = Transaction::signed(&s[0], 1, vec![coin.clone()], vec![TxOutput { account: 1, value: 30 }]);
        let pay_b = Transaction::signed(&s[0], 1, vec![coin], vec![TxOutput { account: 5, value: 30 }]);
        st.commit_block(&ring, &Block { index: 1, txs: vec![pay_a], cert_digest: None }).unwrap();
        st.merge_block(&ring, &Block { index: 1, txs: vec![pay_b.clone()], cert_digest: None }).unwrap();
        assert_eq!(st.deposit, 70);
        assert_eq!(st.inputs_deposit.len(), 1);

        // an input funded before its creating transaction is merged gets refunded
        let mut st = LedgerState::with_genesis(100, &genesis);
        let child = TxInput {
            outpoint: pay_b.outpoint(0),
            value: 30,
        };
        let spend = Transaction::signed(&s[1], 1, vec![child], vec![TxOutput { account: 1, value: 30 }]);
        st.merge_block(&ring, &Block { index: 2, txs: vec![spend], cert_digest: None }).unwrap();
        assert_eq!(st.deposit, 70);
        st.merge_block(&ring, &Block { index: 1, txs: vec![pay_b], cert_digest: None }).unwrap();
        assert_eq!(st.deposit, 100);
        assert!(st.inputs_deposit.is_empty());
    }

    #[test]
    fn unspendable_only() {
        let (_, s) = signers(1);
        let ghost = |i| TxInput {
            outpoint: OutPoint { tx: [9; 32], index: i },
            value: 25,
        };
        let tx = Transaction::signed(&s[0], 1, vec![ghost(0), ghost(1)], vec![TxOutput { account: 0, value: 50 }]);
        let mut st = LedgerState::new(0);
        st.commit_tx_merge(&tx);
        assert_eq!(st.deposit, -50);
        assert!(st.deposit_negative());
        assert_eq!(st.inputs_deposit.len(), 2);
    }

    #[test]
    fn gain_and_cap() {
        let (_, s) = signers(1);
        let tx = |v| Transaction::signed(&s[0], 1, vec![], vec![TxOutput { account: 0, value: v }]);
        let empty = Block { index: 0, txs: vec![], cert_digest: None };
        assert_eq!(gain_of_block(&empty), 0);
        let b = Block { index: 1, txs: vec![tx(3), tx(4)], cert_digest: None };
        assert_eq!(gain_of_block(&b), 7);
        let p = DepositPolicy { gain_cap: 5, b: 0.1, blockdepth: 28 };
        assert_eq!(p.check_block(&b), Err(LedgerError::GainCap { gain: 7, cap: 5 }));
        assert!(p.coalition_covers(90));
    }

    #[test]
    fn no_conflict_merge_is_commit() {
        let (ring, s) = signers(1);
        let genesis = Transaction::signed(&s[0], 0, vec![], vec![TxOutput { account: 0, value: 10 }]);
        let tx = Transaction::signed(
            &s[0],
            1,
            vec![TxInput { outpoint: genesis.outpoint(0), value: 10 }],
            vec![TxOutput { account: 1, value: 10 }],
        );
        let block = Block { index: 1, txs: vec![tx], cert_digest: None };
        let mut a = LedgerState::with_genesis(100, &genesis);
        let mut b = a.clone();
        a.commit_block(&ring, &block).unwrap();
        b.merge_block(&ring, &block).unwrap();
        assert_eq!((a.deposit, &a.utxos), (b.deposit, &b.utxos));
    }
}
