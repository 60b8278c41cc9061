//! The evidence chain: hash-linked, attested records of every state transition
//! of the shared object (participation history and auditor designations).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpftrl::ParticipationHistory;
use crate::encoding::CanonicalWriter;
use crate::primitives::{hash, verify_quote, Digest, Nonce, Platform, PublicKey, Quote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Init,
    Update,
    Recovery,
    /// Records who actually contributed to an update's aggregation.
    Participation,
}

impl EvidenceKind {
    fn tag(self) -> u8 {
        match self {
            EvidenceKind::Init => 0,
            EvidenceKind::Update => 1,
            EvidenceKind::Recovery => 2,
            EvidenceKind::Participation => 3,
        }
    }

    /// Kinds that consume a round index.
    pub fn advances_round(self) -> bool {
        matches!(self, EvidenceKind::Update | EvidenceKind::Recovery)
    }
}

/// Every evidence field except the quote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceBody {
    pub chain_id: Nonce,
    pub prev_digest: Option<Digest>,
    pub kind: EvidenceKind,
    pub auditors_next: Vec<usize>,
    pub cohort: Vec<usize>,
    pub round_index: Option<u64>,
    pub args_secagg_hash: Option<Digest>,
    pub pubkey_list_digest: Option<Digest>,
}

impl EvidenceBody {
    pub fn encode(&self) -> Vec<u8> {
        CanonicalWriter::new()
            .bytes(&self.chain_id.0)
            .opt_bytes(self.prev_digest.as_ref().map(|d| &d.0[..]))
            .u8(self.kind.tag())
            .index_list(&self.auditors_next)
            .index_list(&self.cohort)
            .opt_u64(self.round_index)
            .opt_bytes(self.args_secagg_hash.as_ref().map(|d| &d.0[..]))
            .opt_bytes(self.pubkey_list_digest.as_ref().map(|d| &d.0[..]))
            .finish()
    }

    /// Attest this body on `platform` under `code_id`.
    pub fn attest(mut self, platform: &Platform, code_id: &Digest) -> Evidence {
        self.auditors_next.sort_unstable();
        self.cohort.sort_unstable();
        let quote = platform.attest(code_id, self.encode());
        Evidence {
            chain_id: self.chain_id,
            prev_digest: self.prev_digest,
            kind: self.kind,
            auditors_next: self.auditors_next,
            cohort: self.cohort,
            round_index: self.round_index,
            args_secagg_hash: self.args_secagg_hash,
            pubkey_list_digest: self.pubkey_list_digest,
            quote,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evidence {
    pub chain_id: Nonce,
    pub prev_digest: Option<Digest>,
    pub kind: EvidenceKind,
    pub auditors_next: Vec<usize>,
    pub cohort: Vec<usize>,
    pub round_index: Option<u64>,
    pub args_secagg_hash: Option<Digest>,
    pub pubkey_list_digest: Option<Digest>,
    pub quote: Quote,
}

impl Evidence {
    pub fn body(&self) -> EvidenceBody {
        EvidenceBody {
            chain_id: self.chain_id,
            prev_digest: self.prev_digest,
            kind: self.kind,
            auditors_next: self.auditors_next.clone(),
            cohort: self.cohort.clone(),
            round_index: self.round_index,
            args_secagg_hash: self.args_secagg_hash,
            pubkey_list_digest: self.pubkey_list_digest,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body().encode();
        out.extend(CanonicalWriter::new().bytes(&self.quote.encode()).finish());
        out
    }

    pub fn digest(&self) -> Digest {
        hash(&self.encode())
    }

    /// Whether the quote is genuine and covers exactly this entry's fields.
    pub fn quote_valid(&self, manufacturer_pk: &PublicKey, code_id: &Digest) -> bool {
        verify_quote(&self.quote, code_id, manufacturer_pk) && self.quote.payload == self.body().encode()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("evidence chain is empty")]
    EmptyChain,
    #[error("entry {0} does not link to its predecessor")]
    BrokenLink(usize),
    #[error("latest evidence quote does not verify")]
    BadQuote,
    #[error("entry {0} carries a different chain id")]
    MixedChainId(usize),
    #[error("entry {0} has an unexpected round index")]
    BadRoundIndex(usize),
    #[error("entry {0} has an unexpected kind")]
    BadKind(usize),
    #[error("entry {index} names client {client} outside 0..{n}")]
    UnknownClient { index: usize, client: usize, n: usize },
    #[error("invalid chain: {0}")]
    InvalidChain(Box<ChainError>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvidenceChain {
    pub entries: Vec<Evidence>,
}

impl EvidenceChain {
    pub fn genesis(init: Evidence) -> Self {
        Self {
            entries: vec![init],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<&Evidence> {
        self.entries.last()
    }

    pub fn chain_id(&self) -> Option<Nonce> {
        self.entries.first().map(|e| e.chain_id)
    }

    /// A new chain with `evidence` appended.
    pub fn appended(&self, evidence: Evidence) -> Self {
        let mut entries = self.entries.clone();
        entries.push(evidence);
        Self { entries }
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self {
            entries: self.entries[..len].to_vec(),
        }
    }

    /// Number of round-consuming entries; the next update takes this index.
    pub fn next_round(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind.advances_round())
            .count() as u64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn chain_digest(chain: &EvidenceChain) -> Result<Digest, ChainError> {
    chain
        .latest()
        .map(Evidence::digest)
        .ok_or(ChainError::EmptyChain)
}

/// Links, chain id, kinds and round indices. Quotes are not checked.
pub fn check_structure(chain: &EvidenceChain) -> Result<(), ChainError> {
    let first = chain.entries.first().ok_or(ChainError::EmptyChain)?;
    if first.kind != EvidenceKind::Init
        || first.prev_digest.is_some()
        || first.round_index.is_some()
        || first.pubkey_list_digest.is_none()
    {
        return Err(ChainError::BadKind(0));
    }
    let mut rounds = 0u64;
    for (k, pair) in chain.entries.windows(2).enumerate() {
        let (prev, cur) = (&pair[0], &pair[1]);
        let k = k + 1;
        if cur.chain_id != first.chain_id {
            return Err(ChainError::MixedChainId(k));
        }
        if cur.prev_digest != Some(prev.digest()) {
            return Err(ChainError::BrokenLink(k));
        }
        match cur.kind {
            EvidenceKind::Init => return Err(ChainError::BadKind(k)),
            EvidenceKind::Update | EvidenceKind::Recovery => {
                if cur.round_index != Some(rounds) {
                    return Err(ChainError::BadRoundIndex(k));
                }
                rounds += 1;
            }
            EvidenceKind::Participation => {
                if prev.kind != EvidenceKind::Update {
                    return Err(ChainError::BadKind(k));
                }
                if cur.round_index != prev.round_index {
                    return Err(ChainError::BadRoundIndex(k));
                }
            }
        }
    }
    Ok(())
}

/// Structure plus the attestation of the latest entry. Earlier entries are
/// authenticated through the hash links.
pub fn verify_chain(
    chain: &EvidenceChain,
    manufacturer_pk: &PublicKey,
    planner_code_id: &Digest,
) -> Result<(), ChainError> {
    check_structure(chain)?;
    let latest = chain.latest().expect("non-empty after structure check");
    if !latest.quote_valid(manufacturer_pk, planner_code_id) {
        return Err(ChainError::BadQuote);
    }
    Ok(())
}

pub fn latest_auditors(chain: &EvidenceChain) -> Result<Vec<usize>, ChainError> {
    check_structure(chain).map_err(|e| ChainError::InvalidChain(Box::new(e)))?;
    Ok(chain.latest().expect("non-empty").auditors_next.clone())
}

/// Fold the chain's update entries into a participation history over `n` clients.
pub fn derive_history(chain: &EvidenceChain, n: usize) -> Result<ParticipationHistory, ChainError> {
    check_structure(chain).map_err(|e| ChainError::InvalidChain(Box::new(e)))?;
    let mut history = ParticipationHistory::empty(n);
    for (index, entry) in chain.entries.iter().enumerate() {
        if entry.kind != EvidenceKind::Update {
            continue;
        }
        let round = entry.round_index.expect("checked") as usize;
        for &client in &entry.cohort {
            if client >= n {
                return Err(ChainError::UnknownClient { index, client, n });
            }
            history.insert_unchecked(client, round);
        }
    }
    Ok(history)
}
