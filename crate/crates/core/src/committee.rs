//! Committee view with the live voting threshold h(d_r) = h0 - d_r, and the
//! fault-model tolerance predicates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Keyring, PofKey, ProcessId, ProofOfFraud};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommitteeError {
    #[error("threshold out of (n/2, n]")]
    ThresholdOutOfRange,
    #[error("invalid fault profile: t+d+q exceeds n")]
    InvalidProfile,
}

/// Byzantine (t), deceitful (d) and benign (q) counts among n processes.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultProfile {
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub q: usize,
}

impl FaultProfile {
    pub fn new(n: usize, t: usize, d: usize, q: usize) -> Result<Self, CommitteeError> {
        if t + d + q > n {
            return Err(CommitteeError::InvalidProfile);
        }
        Ok(FaultProfile { n, t, d, q })
    }
}

/// Consensus is solvable iff n > 3t + d + 2q.
pub fn consensus_tolerated(p: &FaultProfile) -> bool {
    p.n > 3 * p.t + p.d + 2 * p.q
}

fn check_threshold(n: usize, h: usize) -> Result<(), CommitteeError> {
    if 2 * h <= n || h > n {
        Err(CommitteeError::ThresholdOutOfRange)
    } else {
        Ok(())
    }
}

/// (safety, liveness) of threshold `h`: d+t < 2h-n and q+t <= n-h.
pub fn threshold_tolerated(p: &FaultProfile, h: usize) -> Result<(bool, bool), CommitteeError> {
    check_threshold(p.n, h)?;
    let safety = p.d + p.t + p.n < 2 * h;
    let liveness = p.q + p.t + h <= p.n;
    Ok((safety, liveness))
}

/// Eventual consensus with threshold `h`: d+t < h and q+t <= n-h.
pub fn eventual_consensus_tolerated(p: &FaultProfile, h: usize) -> Result<bool, CommitteeError> {
    check_threshold(p.n, h)?;
    Ok(p.d + p.t < h && p.q + p.t + h <= p.n)
}

/// Default initial threshold, ceil(2n/3).
pub fn default_threshold(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

/// Result of applying proofs of fraud to a committee.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommitteeUpdate {
    pub newly_excluded: BTreeSet<ProcessId>,
    /// Fresh proofs, to be gossiped.
    pub to_broadcast: Vec<ProofOfFraud>,
    pub rejected: usize,
}

impl CommitteeUpdate {
    pub fn changed(&self) -> bool {
        !self.newly_excluded.is_empty()
    }
}

/// Committee of one consensus instance as seen by one process.
#[derive(Clone, Debug)]
pub struct Committee {
    roster: Vec<ProcessId>,
    h0: usize,
    local_deceitful: BTreeSet<ProcessId>,
    local_pofs: BTreeMap<PofKey, ProofOfFraud>,
}

impl Committee {
    pub fn new(roster: Vec<ProcessId>, h0: usize) -> Result<Self, CommitteeError> {
        check_threshold(roster.len(), h0)?;
        Ok(Committee {
            roster,
            h0,
            local_deceitful: BTreeSet::new(),
            local_pofs: BTreeMap::new(),
        })
    }

    /// Committee whose threshold starts below h0 because `excluded` are already out.
    pub fn with_excluded(
        roster: Vec<ProcessId>,
        h0: usize,
        excluded: impl IntoIterator<Item = ProcessId>,
    ) -> Result<Self, CommitteeError> {
        let mut c = Committee::new(roster, h0)?;
        for id in excluded {
            if c.roster.contains(&id) {
                c.local_deceitful.insert(id);
            }
        }
        Ok(c)
    }

    pub fn roster(&self) -> &[ProcessId] {
        &self.roster
    }

    pub fn n0(&self) -> usize {
        self.roster.len()
    }

    pub fn h0(&self) -> usize {
        self.h0
    }

    pub fn d_r(&self) -> usize {
        self.local_deceitful.len()
    }

    /// h(d_r) = h0 - d_r, never below 1.
    pub fn threshold(&self) -> usize {
        self.h0.saturating_sub(self.d_r()).max(1)
    }

    pub fn excluded(&self) -> &BTreeSet<ProcessId> {
        &self.local_deceitful
    }

    pub fn is_excluded(&self, id: ProcessId) -> bool {
        self.local_deceitful.contains(&id)
    }

    pub fn is_member(&self, id: ProcessId) -> bool {
        self.roster.contains(&id) && !self.is_excluded(id)
    }

    pub fn in_roster(&self, id: ProcessId) -> bool {
        self.roster.contains(&id)
    }

    pub fn members(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.roster
            .iter()
            .copied()
            .filter(|p| !self.local_deceitful.contains(p))
    }

    pub fn size(&self) -> usize {
        self.n0() - self.d_r()
    }

    pub fn position(&self, id: ProcessId) -> Option<usize> {
        self.roster.iter().position(|p| *p == id)
    }

    /// Coordinator of round r >= 1 over the initial roster, so that an
    /// excluded coordinator keeps its round.
    pub fn coordinator(&self, round: u32) -> ProcessId {
        let r = round.max(1) as usize - 1;
        self.roster[r % self.roster.len()]
    }

    pub fn pofs(&self) -> impl Iterator<Item = &ProofOfFraud> {
        self.local_pofs.values()
    }

    /// True when exclusions pushed the threshold to or below a simple majority.
    pub fn out_of_model(&self) -> bool {
        self.threshold() <= self.n0() / 2
    }

    /// Stores fresh valid proofs and removes the accused members.
    pub fn update(&mut self, new_pofs: &[ProofOfFraud], keyring: &Keyring) -> CommitteeUpdate {
        let mut up = CommitteeUpdate::default();
        for pof in new_pofs {
            let key = pof.key();
            if self.local_pofs.contains_key(&key) {
                continue;
            }
            if !pof.verify(keyring) {
                up.rejected += 1;
                continue;
            }
            self.local_pofs.insert(key, pof.clone());
            up.to_broadcast.push(pof.clone());
            let accused = pof.accused();
            if self.roster.contains(&accused) && self.local_deceitful.insert(accused) {
                up.newly_excluded.insert(accused);
            }
        }
        up
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ConsensusId, KeyedHash, Layer, MessageKind, Phase, Signer};
    use std::sync::Arc;

    fn p(n: usize, t: usize, d: usize, q: usize) -> FaultProfile {
        FaultProfile::new(n, t, d, q).unwrap()
    }

    #[test]
    fn predicates() {
        assert!(consensus_tolerated(&p(4, 1, 0, 0)));
        assert!(!consensus_tolerated(&p(3, 1, 0, 0)));
        assert!(consensus_tolerated(&p(9, 1, 2, 1)));
        assert_eq!(threshold_tolerated(&p(9, 0, 4, 2), 7), Ok((true, true)));
        assert_eq!(threshold_tolerated(&p(9, 0, 3, 0), 6), Ok((false, true)));
        assert_eq!(threshold_tolerated(&p(90, 29, 0, 0), 60), Ok((true, true)));
        assert_eq!(threshold_tolerated(&p(90, 30, 0, 0), 60), Ok((false, true)));
        assert_eq!(
            threshold_tolerated(&p(9, 0, 0, 0), 4),
            Err(CommitteeError::ThresholdOutOfRange)
        );
        assert_eq!(eventual_consensus_tolerated(&p(9, 0, 5, 3), 6), Ok(true));
        assert_eq!(eventual_consensus_tolerated(&p(9, 0, 6, 0), 6), Ok(false));
        assert_eq!(eventual_consensus_tolerated(&p(6, 1, 1, 1), 4), Ok(true));
    }

    #[test]
    fn update_dedups() {
        let (ring, keys) = crate::crypto::Keyring::generate(Arc::new(KeyedHash::new()), 10, 1);
        let s3 = Signer::new(ProcessId(3), keys[3].clone(), &ring);
        let inst = ConsensusId::new(Layer::Binary, 0, 0).sub(0);
        let pof = |round| ProofOfFraud {
            first: s3.sign(MessageKind::Echo, inst, round, Phase::Aux, vec![1], None),
            second: s3.sign(MessageKind::Echo, inst, round, Phase::Aux, vec![2], None),
        };
        let roster = (0..10).map(ProcessId).collect();
        let mut c = Committee::new(roster, 7).unwrap();
        let up = c.update(&[pof(1)], &ring);
        assert_eq!(up.newly_excluded.len(), 1);
        assert_eq!((c.size(), c.threshold()), (9, 6));
        assert_eq!(c.update(&[pof(1)], &ring), CommitteeUpdate::default());
        let up = c.update(&[pof(2)], &ring);
        assert!(!up.changed());
        assert_eq!(up.to_broadcast.len(), 1);
        assert_eq!(c.d_r(), 1);
    }
}
