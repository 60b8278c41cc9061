//! The simulated planner enclave.
//!
//! One [`EnclaveState`] is one enclave instance. The initial instance collects
//! unanimous consent, picks the first auditors and seals the long-lived
//! secrets; every round then runs in a fresh instance replicated from that
//! blob plus the server-supplied evidence chain. Nothing leaves an instance
//! except quotes, evidence, the sealed blob and aggregation outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index::sample;
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpftrl::{
    clip, correlated_noise, f_qualify, DpError, ModelVector, NoiseMatrix, ParticipationSchema,
    StrategyMatrix,
};
use crate::encoding::{decode_index_list, encode_index_list, CanonicalReader, CanonicalWriter, DecodeError};
use crate::evidence::{
    chain_digest, derive_history, latest_auditors, verify_chain, ChainError, Evidence, EvidenceBody,
    EvidenceChain, EvidenceKind,
};
use crate::primitives::{
    aead_decrypt, aead_encrypt, dh_shared, dh_with_raw, hash, hmac_tag, hmac_verify, party_rng,
    verify, verify_quote, Digest, KeyPair, Nonce, PartyId, Platform, PublicKey, Quote, SealError,
    SealedBlob, Signature, SymmetricKey,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnclaveError {
    #[error("quorum {tau} must be a strict majority of {n_audit} auditors")]
    BadQuorumParams { n_audit: usize, tau: usize },
    #[error("invalid planner parameters: {0}")]
    BadParams(String),
    #[error("initialization lacks signatures from {missing:?}")]
    InitConsensusIncomplete { missing: Vec<usize> },
    #[error("signature from client {client} does not verify")]
    BadSignature { client: usize },
    #[error("{got} candidates supplied, at least {need} required")]
    TooFewCandidates { got: usize, need: usize },
    #[error("evidence chain rejected: {0}")]
    InvalidChain(ChainError),
    #[error("evidence chain belongs to another deployment")]
    WrongChainId,
    #[error(transparent)]
    Schema(DpError),
    #[error("aggregation arguments rejected: {0}")]
    InvalidArgs(String),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error("sealed state is malformed: {0}")]
    CorruptState(String),
    #[error("only {valid} of {required} auditor signatures are valid")]
    QuorumNotReached {
        valid: usize,
        required: usize,
        rejected: Vec<(usize, SignatureRejection)>,
    },
    #[error("{present} valid contributions, {required} required")]
    CohortIncomplete {
        present: usize,
        required: usize,
        rejected: Vec<(usize, MessageRejection)>,
    },
    #[error("recovery carries {valid} valid auditor signatures, {required} required")]
    BadRecoverySignatures { valid: usize, required: usize },
    #[error("broadcast is not a genuine update broadcast for this chain")]
    BadBroadcast,
    #[error("operation needs phase {expected:?}, enclave is {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("enclave instance has crashed")]
    Crashed,
}

impl From<ChainError> for EnclaveError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::InvalidChain(inner) => EnclaveError::InvalidChain(*inner),
            other => EnclaveError::InvalidChain(other),
        }
    }
}

impl From<DpError> for EnclaveError {
    fn from(e: DpError) -> Self {
        EnclaveError::Schema(e)
    }
}

/// Why an individual auditor signature did not count towards the quorum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureRejection {
    BadSignature,
    NotAnAuditor,
    Duplicate,
}

/// Why an individual secure-aggregation message was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRejection {
    NotInCohort,
    Duplicate,
    WrongNonce,
    MacFailure,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    AwaitingInitConsensus,
    SealedReady,
    Loaded,
    AwaitingAgreement,
    Agreed,
    Aggregating,
    Done,
    Crashed,
}

/// Deployment-wide settings fixed at initialization and carried in the seal,
/// so a server cannot weaken them between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerParams {
    pub n_clients: usize,
    pub n_audit: usize,
    pub tau: usize,
    /// `ceil(n * kappa)`: smallest candidate pool `f_select` accepts.
    pub min_candidates: usize,
    pub overselect_margin: usize,
    pub schema: ParticipationSchema,
    pub d: usize,
    pub sigma: f64,
    pub zeta: f64,
    pub strategy: StrategyMatrix,
    pub record_participation: bool,
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), EnclaveError> {
        if self.n_audit == 0 || 2 * self.tau <= self.n_audit || self.tau > self.n_audit {
            return Err(EnclaveError::BadQuorumParams {
                n_audit: self.n_audit,
                tau: self.tau,
            });
        }
        let bad = |m: &str| Err(EnclaveError::BadParams(m.to_string()));
        if self.n_clients == 0 {
            return bad("no clients");
        }
        if self.d == 0 {
            return bad("model dimension must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return bad("zeta must be positive");
        }
        if self.strategy.size() != self.schema.n_round {
            return bad("strategy matrix size differs from n_round");
        }
        Ok(())
    }

    pub fn digest(&self) -> Digest {
        hash(&serde_json::to_vec(self).expect("params serialize"))
    }
}

pub fn pubkey_list_digest(pubkeys: &[PublicKey]) -> Digest {
    let mut w = CanonicalWriter::new();
    w.bytes(b"pubkey-list");
    for pk in pubkeys {
        w.bytes(&pk.to_bytes());
    }
    hash(&w.finish())
}

/// Seed of the noise matrix `Z` used by a deployment started from `master_seed`.
/// Only harnesses that emulate the trusted party need this.
pub fn derive_noise_seed(master_seed: u64) -> u64 {
    init_rng(master_seed).next_u64()
}

fn init_rng(master_seed: u64) -> ChaCha20Rng {
    party_rng(master_seed, "enclave", 0)
}

/// Uniform `n_audit`-subset of the (deduplicated) candidates, sorted.
pub fn f_select(
    candidates: &[usize],
    n_audit: usize,
    min_candidates: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<usize>, EnclaveError> {
    let pool: Vec<usize> = candidates.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let need = min_candidates.max(n_audit);
    if pool.len() < need {
        return Err(EnclaveError::TooFewCandidates {
            got: pool.len(),
            need,
        });
    }
    let mut chosen: Vec<usize> = sample(rng, pool.len(), n_audit)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// A client's signature over a broadcast's thread nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSignature {
    pub signer: usize,
    pub signature: Signature,
}

impl AuditSignature {
    /// Wire size of an audit response.
    pub fn wire_len(&self) -> usize {
        CanonicalWriter::new()
            .u64(self.signer as u64)
            .bytes(&self.signature.0)
            .finish()
            .len()
    }
}

/// Aggregation arguments: the model the cohort trains against this round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecAggArgs {
    pub theta: ModelVector,
}

impl SecAggArgs {
    pub fn digest(&self) -> Digest {
        hash(
            &CanonicalWriter::new()
                .bytes(b"args-secagg")
                .bytes(&self.theta.to_le_bytes())
                .finish(),
        )
    }
}

/// Binds a broadcast to exactly one (cohort, arguments) pair.
pub fn input_hash(cohort: &[usize], args_hash: &Digest) -> Digest {
    hash(
        &CanonicalWriter::new()
            .bytes(b"input")
            .index_list(cohort)
            .bytes(&args_hash.0)
            .finish(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitBroadcast {
    pub chain_id: Nonce,
    pub thread_nonce: Nonce,
    pub pubkey_list_digest: Digest,
    pub params_digest: Digest,
}

/// What auditors see before signing a state transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateBroadcast {
    pub chain_id: Nonce,
    pub thread_nonce: Nonce,
    pub input_hash: Digest,
    pub chain_digest: Digest,
    pub round_index: u64,
    /// `C_next` under the recovery key; opaque to everyone outside an enclave.
    pub sealed_next: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Broadcast {
    Init(InitBroadcast),
    Update(UpdateBroadcast),
}

impl Broadcast {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new();
        match self {
            Broadcast::Init(b) => w
                .u8(0)
                .bytes(&b.chain_id.0)
                .bytes(&b.thread_nonce.0)
                .bytes(&b.pubkey_list_digest.0)
                .bytes(&b.params_digest.0),
            Broadcast::Update(b) => w
                .u8(1)
                .bytes(&b.chain_id.0)
                .bytes(&b.thread_nonce.0)
                .bytes(&b.input_hash.0)
                .bytes(&b.chain_digest.0)
                .u64(b.round_index)
                .bytes(&b.sealed_next),
        };
        w.finish()
    }

    pub fn decode(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = CanonicalReader::new(raw);
        let out = match r.u8("tag")? {
            0 => Broadcast::Init(InitBroadcast {
                chain_id: Nonce(r.array("chain_id")?),
                thread_nonce: Nonce(r.array("thread_nonce")?),
                pubkey_list_digest: Digest(r.array("pubkey_list_digest")?),
                params_digest: Digest(r.array("params_digest")?),
            }),
            1 => Broadcast::Update(UpdateBroadcast {
                chain_id: Nonce(r.array("chain_id")?),
                thread_nonce: Nonce(r.array("thread_nonce")?),
                input_hash: Digest(r.array("input_hash")?),
                chain_digest: Digest(r.array("chain_digest")?),
                round_index: r.u64("round_index")?,
                sealed_next: r.bytes()?.to_vec(),
            }),
            t => return Err(DecodeError::UnknownTag(t)),
        };
        r.finish()?;
        Ok(out)
    }

    pub fn chain_id(&self) -> Nonce {
        match self {
            Broadcast::Init(b) => b.chain_id,
            Broadcast::Update(b) => b.chain_id,
        }
    }

    pub fn thread_nonce(&self) -> Nonce {
        match self {
            Broadcast::Init(b) => b.thread_nonce,
            Broadcast::Update(b) => b.thread_nonce,
        }
    }
}

/// Invitation to the cohort once the transition is agreed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecAggRequest {
    pub chain_id: Nonce,
    pub thread_nonce: Nonce,
    pub round_index: u64,
    pub args_hash: Digest,
    pub enclave_pub: [u8; 32],
}

impl SecAggRequest {
    pub fn encode(&self) -> Vec<u8> {
        CanonicalWriter::new()
            .u8(2)
            .bytes(&self.chain_id.0)
            .bytes(&self.thread_nonce.0)
            .u64(self.round_index)
            .bytes(&self.args_hash.0)
            .bytes(&self.enclave_pub)
            .finish()
    }

    pub fn decode(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = CanonicalReader::new(raw);
        match r.u8("tag")? {
            2 => {}
            t => return Err(DecodeError::UnknownTag(t)),
        }
        let out = Self {
            chain_id: Nonce(r.array("chain_id")?),
            thread_nonce: Nonce(r.array("thread_nonce")?),
            round_index: r.u64("round_index")?,
            args_hash: Digest(r.array("args_hash")?),
            enclave_pub: r.array("enclave_pub")?,
        };
        r.finish()?;
        Ok(out)
    }
}

/// Keys for one client-enclave channel: the ephemeral agreement gives
/// freshness, the static one authenticates the sender.
fn channel_keys(ephemeral: &SymmetricKey, fixed: &SymmetricKey) -> (SymmetricKey, SymmetricKey) {
    let derive = |label: &[u8]| {
        SymmetricKey(hash(&[label, &ephemeral.0[..], &fixed.0[..]].concat()).0)
    };
    (derive(b"wrap"), derive(b"mac"))
}

fn seal_with_tag(key: &SymmetricKey, nonce: &Nonce, plaintext: &[u8]) -> Vec<u8> {
    let (mut ct, tag) = aead_encrypt(key, nonce, plaintext);
    ct.extend_from_slice(&tag);
    ct
}

fn open_with_tag(key: &SymmetricKey, nonce: &Nonce, data: &[u8]) -> Option<Vec<u8>> {
    let split = data.len().checked_sub(16)?;
    let tag: [u8; 16] = data[split..].try_into().ok()?;
    aead_decrypt(key, nonce, &data[..split], &tag).ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecAggMessage {
    pub sender: usize,
    pub encrypted_update: Vec<u8>,
    pub encrypted_decryption_key: Vec<u8>,
    pub ec_pub_key: [u8; 32],
    pub mac: [u8; 32],
    pub thread_nonce: Nonce,
}

impl SecAggMessage {
    /// Client side: encrypt `update` for the enclave behind `request`.
    pub fn build(
        sender: usize,
        identity: &KeyPair,
        request: &SecAggRequest,
        update: &ModelVector,
        rng: &mut impl RngCore,
    ) -> Self {
        let ephemeral = KeyPair::random(rng, identity.owner_id);
        let update_key = SymmetricKey::random(rng);
        let (wrap, mac_key) = channel_keys(
            &dh_with_raw(&ephemeral.secret_key, &request.enclave_pub),
            &dh_with_raw(&identity.secret_key, &request.enclave_pub),
        );
        let mut msg = Self {
            sender,
            encrypted_update: seal_with_tag(&update_key, &request.thread_nonce, &update.to_le_bytes()),
            encrypted_decryption_key: seal_with_tag(&wrap, &request.thread_nonce, &update_key.0),
            ec_pub_key: ephemeral.public_key.agree,
            mac: [0; 32],
            thread_nonce: request.thread_nonce,
        };
        msg.mac = hmac_tag(&mac_key, &msg.mac_input());
        msg
    }

    fn mac_input(&self) -> Vec<u8> {
        CanonicalWriter::new()
            .u64(self.sender as u64)
            .bytes(&self.encrypted_update)
            .bytes(&self.encrypted_decryption_key)
            .bytes(&self.ec_pub_key)
            .bytes(&self.thread_nonce.0)
            .finish()
    }

    /// Every field except the encrypted update itself.
    pub fn control_len(&self) -> usize {
        CanonicalWriter::new()
            .u64(self.sender as u64)
            .bytes(&self.encrypted_decryption_key)
            .bytes(&self.ec_pub_key)
            .bytes(&self.mac)
            .bytes(&self.thread_nonce.0)
            .finish()
            .len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub output: ModelVector,
    pub participants: Vec<usize>,
    pub rejected: Vec<(usize, MessageRejection)>,
    /// Present when the deployment records actual participants on the chain.
    pub participation: Option<Evidence>,
}

#[derive(Clone)]
struct SealedState {
    chain_id: Nonce,
    noise_seed: u64,
    recovery_key: SymmetricKey,
    pubkeys: Vec<PublicKey>,
    params: PlannerParams,
}

impl SealedState {
    fn encode(&self) -> Vec<u8> {
        let keys: Vec<u8> = self.pubkeys.iter().flat_map(|pk| pk.to_bytes()).collect();
        CanonicalWriter::new()
            .bytes(&self.chain_id.0)
            .u64(self.noise_seed)
            .bytes(&self.recovery_key.0)
            .bytes(&keys)
            .bytes(&serde_json::to_vec(&self.params).expect("params serialize"))
            .finish()
    }

    fn decode(raw: &[u8]) -> Result<Self, EnclaveError> {
        let corrupt = |e: DecodeError| EnclaveError::CorruptState(e.to_string());
        let mut r = CanonicalReader::new(raw);
        let chain_id = Nonce(r.array("chain_id").map_err(corrupt)?);
        let noise_seed = r.u64("noise_seed").map_err(corrupt)?;
        let recovery_key = SymmetricKey(r.array("recovery_key").map_err(corrupt)?);
        let keys = r.bytes().map_err(corrupt)?;
        if keys.len() % 64 != 0 {
            return Err(EnclaveError::CorruptState("pubkey list length".into()));
        }
        let pubkeys = keys
            .chunks_exact(64)
            .map(|c| PublicKey {
                verify: c[..32].try_into().unwrap(),
                agree: c[32..].try_into().unwrap(),
            })
            .collect();
        let params = serde_json::from_slice(r.bytes().map_err(corrupt)?)
            .map_err(|e| EnclaveError::CorruptState(e.to_string()))?;
        r.finish().map_err(corrupt)?;
        Ok(Self {
            chain_id,
            noise_seed,
            recovery_key,
            pubkeys,
            params,
        })
    }
}

fn count_quorum(
    auditors: &[usize],
    pubkeys: &[PublicKey],
    nonce: &Nonce,
    signatures: &[AuditSignature],
) -> (usize, Vec<(usize, SignatureRejection)>) {
    let auditors: BTreeSet<usize> = auditors.iter().copied().collect();
    let mut accepted = BTreeSet::new();
    let mut rejected = Vec::new();
    for s in signatures {
        let reason = if !auditors.contains(&s.signer) {
            Some(SignatureRejection::NotAnAuditor)
        } else if accepted.contains(&s.signer) {
            Some(SignatureRejection::Duplicate)
        } else if !verify(&pubkeys[s.signer], &nonce.0, &s.signature) {
            Some(SignatureRejection::BadSignature)
        } else {
            None
        };
        match reason {
            Some(r) => rejected.push((s.signer, r)),
            None => {
                accepted.insert(s.signer);
            }
        }
    }
    (accepted.len(), rejected)
}

#[allow(clippy::too_many_arguments)]
fn update_evidence(
    platform: &Platform,
    code_id: &Digest,
    chain_id: Nonce,
    prev: Digest,
    auditors_next: Vec<usize>,
    cohort: Vec<usize>,
    round: u64,
    args_hash: Digest,
) -> Evidence {
    EvidenceBody {
        chain_id,
        prev_digest: Some(prev),
        kind: EvidenceKind::Update,
        auditors_next,
        cohort,
        round_index: Some(round),
        args_secagg_hash: Some(args_hash),
        pubkey_list_digest: None,
    }
    .attest(platform, code_id)
}

/// One planner enclave instance.
pub struct EnclaveState {
    platform: Platform,
    code_id: Digest,
    rng: ChaCha20Rng,
    phase: Phase,
    state: SealedState,
    pubkey_list_digest: Digest,
    loaded_chain: EvidenceChain,
    cohort: Vec<usize>,
    args: Option<SecAggArgs>,
    candidates: Vec<usize>,
    chosen_auditors: Vec<usize>,
    next_auditors: Vec<usize>,
    thread_nonce: Nonce,
    round: u64,
    dh_key: Option<KeyPair>,
    emitted: Option<Evidence>,
}

impl fmt::Debug for EnclaveState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveState")
            .field("phase", &self.phase)
            .field("chain_id", &self.state.chain_id)
            .field("round", &self.round)
            .field("thread_nonce", &self.thread_nonce)
            .finish_non_exhaustive()
    }
}

/// Start a deployment: draws the noise seed, chain id and recovery key, and
/// returns the broadcast every client must sign.
pub fn init_enclave(
    platform: &Platform,
    code_id: &Digest,
    pubkeys: Vec<PublicKey>,
    args_selection: Vec<usize>,
    params: PlannerParams,
    master_seed: u64,
) -> Result<(EnclaveState, Quote), EnclaveError> {
    params.validate()?;
    if pubkeys.len() != params.n_clients {
        return Err(EnclaveError::BadParams(format!(
            "{} public keys for {} clients",
            pubkeys.len(),
            params.n_clients
        )));
    }
    if args_selection.is_empty() {
        return Err(EnclaveError::TooFewCandidates {
            got: 0,
            need: params.min_candidates.max(params.n_audit),
        });
    }
    let mut rng = init_rng(master_seed);
    let noise_seed = rng.next_u64();
    let chain_id = Nonce::random(&mut rng);
    let thread_nonce = Nonce::random(&mut rng);
    let recovery_key = SymmetricKey::random(&mut rng);
    let pk_digest = pubkey_list_digest(&pubkeys);
    let broadcast = Broadcast::Init(InitBroadcast {
        chain_id,
        thread_nonce,
        pubkey_list_digest: pk_digest,
        params_digest: params.digest(),
    });
    let quote = platform.attest(code_id, broadcast.encode());
    let state = EnclaveState {
        platform: platform.clone(),
        code_id: *code_id,
        rng,
        phase: Phase::AwaitingInitConsensus,
        state: SealedState {
            chain_id,
            noise_seed,
            recovery_key,
            pubkeys,
            params,
        },
        pubkey_list_digest: pk_digest,
        loaded_chain: EvidenceChain::default(),
        cohort: Vec::new(),
        args: None,
        candidates: args_selection,
        chosen_auditors: Vec::new(),
        next_auditors: Vec::new(),
        thread_nonce,
        round: 0,
        dh_key: None,
        emitted: None,
    };
    Ok((state, quote))
}

/// Load a fresh instance for the next round from sealed state and the chain
/// the server presents. Returns the quote auditors must sign.
#[allow(clippy::too_many_arguments)]
pub fn replicate(
    platform: &Platform,
    code_id: &Digest,
    mut rng: ChaCha20Rng,
    blob: &SealedBlob,
    chain: &EvidenceChain,
    cohort: Vec<usize>,
    args: SecAggArgs,
    candidates: Vec<usize>,
) -> Result<(EnclaveState, Quote), EnclaveError> {
    let state = SealedState::decode(&platform.unseal(code_id, blob)?)?;
    verify_chain(chain, &platform.manufacturer_pk(), code_id)?;
    let pk_digest = pubkey_list_digest(&state.pubkeys);
    if chain.chain_id() != Some(state.chain_id)
        || chain.entries[0].pubkey_list_digest != Some(pk_digest)
    {
        return Err(EnclaveError::WrongChainId);
    }
    let params = &state.params;
    let round = chain.next_round();
    let history = derive_history(chain, params.n_clients)?;
    let qualified = f_qualify(&params.schema, &history, round as usize)?;
    let mut seen = BTreeSet::new();
    for &j in &cohort {
        if j >= params.n_clients {
            return Err(DpError::UnknownClient {
                client: j,
                n: params.n_clients,
            }
            .into());
        }
        if !qualified.contains(&j) || !seen.insert(j) {
            return Err(DpError::SchemaViolation {
                client: j,
                round: round as usize,
            }
            .into());
        }
    }
    if args.theta.dim() != params.d || !args.theta.is_finite() {
        return Err(EnclaveError::InvalidArgs(format!(
            "model must be a finite {}-vector",
            params.d
        )));
    }
    let chosen_auditors = latest_auditors(chain)?;
    let next_auditors = f_select(&candidates, params.n_audit, params.min_candidates, &mut rng)?;
    let thread_nonce = Nonce::random(&mut rng);
    let dh_key = KeyPair::random(&mut rng, PartyId::Enclave(round));
    let args_hash = args.digest();
    let broadcast = Broadcast::Update(UpdateBroadcast {
        chain_id: state.chain_id,
        thread_nonce,
        input_hash: input_hash(&cohort, &args_hash),
        chain_digest: chain_digest(chain)?,
        round_index: round,
        sealed_next: seal_with_tag(
            &state.recovery_key,
            &thread_nonce,
            &encode_index_list(&next_auditors),
        ),
    });
    let quote = platform.attest(code_id, broadcast.encode());
    let mut cohort = cohort;
    cohort.sort_unstable();
    let enclave = EnclaveState {
        platform: platform.clone(),
        code_id: *code_id,
        rng,
        phase: Phase::AwaitingAgreement,
        state,
        pubkey_list_digest: pk_digest,
        loaded_chain: chain.clone(),
        cohort,
        args: Some(args),
        candidates,
        chosen_auditors,
        next_auditors,
        thread_nonce,
        round,
        dh_key: Some(dh_key),
        emitted: None,
    };
    Ok((enclave, quote))
}

/// Re-issue the update evidence of a process that crashed after its auditors
/// agreed. The output is byte-identical to what the crashed instance would
/// have emitted; its aggregation result is lost.
#[allow(clippy::too_many_arguments)]
pub fn recovery(
    platform: &Platform,
    code_id: &Digest,
    blob: &SealedBlob,
    chain: &EvidenceChain,
    crashed_broadcast: &Quote,
    cohort: &[usize],
    args: &SecAggArgs,
    signatures: &[AuditSignature],
) -> Result<Evidence, EnclaveError> {
    if !verify_quote(crashed_broadcast, code_id, &platform.manufacturer_pk()) {
        return Err(EnclaveError::BadBroadcast);
    }
    let Ok(Broadcast::Update(b)) = Broadcast::decode(&crashed_broadcast.payload) else {
        return Err(EnclaveError::BadBroadcast);
    };
    let state = SealedState::decode(&platform.unseal(code_id, blob)?)?;
    verify_chain(chain, &platform.manufacturer_pk(), code_id)?;
    if chain.chain_id() != Some(state.chain_id) || b.chain_id != state.chain_id {
        return Err(EnclaveError::WrongChainId);
    }
    let args_hash = args.digest();
    if b.chain_digest != chain_digest(chain)?
        || b.round_index != chain.next_round()
        || b.input_hash != input_hash(cohort, &args_hash)
    {
        return Err(EnclaveError::BadBroadcast);
    }
    let auditors = latest_auditors(chain)?;
    let (valid, _) = count_quorum(&auditors, &state.pubkeys, &b.thread_nonce, signatures);
    if valid < state.params.tau {
        return Err(EnclaveError::BadRecoverySignatures {
            valid,
            required: state.params.tau,
        });
    }
    let next = open_with_tag(&state.recovery_key, &b.thread_nonce, &b.sealed_next)
        .and_then(|raw| decode_index_list(&raw).ok())
        .ok_or(EnclaveError::BadBroadcast)?;
    let mut cohort = cohort.to_vec();
    cohort.sort_unstable();
    Ok(update_evidence(
        platform,
        code_id,
        state.chain_id,
        b.chain_digest,
        next,
        cohort,
        b.round_index,
        args_hash,
    ))
}

impl EnclaveState {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn chain_id(&self) -> Nonce {
        self.state.chain_id
    }

    pub fn thread_nonce(&self) -> Nonce {
        self.thread_nonce
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn cohort(&self) -> &[usize] {
        &self.cohort
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn params(&self) -> &PlannerParams {
        &self.state.params
    }

    pub fn pubkey_list_digest(&self) -> Digest {
        self.pubkey_list_digest
    }

    /// Auditors whose signatures this instance accepts (read from the chain).
    pub fn chosen_auditors(&self) -> &[usize] {
        &self.chosen_auditors
    }

    /// Auditors this instance designated for the next transition.
    pub fn designated_next(&self) -> &[usize] {
        &self.next_auditors
    }

    pub fn loaded_digest(&self) -> Option<Digest> {
        chain_digest(&self.loaded_chain).ok()
    }

    /// A crashed instance never answers again.
    pub fn crash(&mut self) {
        self.phase = Phase::Crashed;
    }

    fn expect_phase(&self, allowed: &[Phase]) -> Result<(), EnclaveError> {
        if self.phase == Phase::Crashed {
            return Err(EnclaveError::Crashed);
        }
        if !allowed.contains(&self.phase) {
            return Err(EnclaveError::WrongPhase {
                expected: allowed[0],
                actual: self.phase,
            });
        }
        Ok(())
    }

    /// Requires a valid signature over the init nonce from every client.
    pub fn finish_init(
        &mut self,
        signatures: &[AuditSignature],
    ) -> Result<(SealedBlob, Evidence), EnclaveError> {
        self.expect_phase(&[Phase::AwaitingInitConsensus])?;
        let n = self.state.params.n_clients;
        let mut signed = vec![false; n];
        for s in signatures {
            if s.signer >= n
                || !verify(&self.state.pubkeys[s.signer], &self.thread_nonce.0, &s.signature)
            {
                return Err(EnclaveError::BadSignature { client: s.signer });
            }
            signed[s.signer] = true;
        }
        let missing: Vec<usize> = (0..n).filter(|&j| !signed[j]).collect();
        if !missing.is_empty() {
            return Err(EnclaveError::InitConsensusIncomplete { missing });
        }
        let params = &self.state.params;
        let auditors = f_select(
            &self.candidates,
            params.n_audit,
            params.min_candidates,
            &mut self.rng,
        )?;
        let evidence = EvidenceBody {
            chain_id: self.state.chain_id,
            prev_digest: None,
            kind: EvidenceKind::Init,
            auditors_next: auditors.clone(),
            cohort: Vec::new(),
            round_index: None,
            args_secagg_hash: None,
            pubkey_list_digest: Some(self.pubkey_list_digest),
        }
        .attest(&self.platform, &self.code_id);
        let blob = self.platform.seal(&self.code_id, &self.state.encode());
        self.next_auditors = auditors;
        self.emitted = Some(evidence.clone());
        self.phase = Phase::SealedReady;
        Ok((blob, evidence))
    }

    /// Accepts once `tau` distinct auditors of the loaded chain have signed
    /// this instance's thread nonce. Signatures that do not count are listed
    /// in the error if the quorum is missed.
    pub fn collect_agreement(
        &mut self,
        signatures: &[AuditSignature],
    ) -> Result<Evidence, EnclaveError> {
        self.expect_phase(&[Phase::AwaitingAgreement])?;
        let tau = self.state.params.tau;
        let (valid, rejected) = count_quorum(
            &self.chosen_auditors,
            &self.state.pubkeys,
            &self.thread_nonce,
            signatures,
        );
        if valid < tau {
            return Err(EnclaveError::QuorumNotReached {
                valid,
                required: tau,
                rejected,
            });
        }
        let evidence = update_evidence(
            &self.platform,
            &self.code_id,
            self.state.chain_id,
            chain_digest(&self.loaded_chain)?,
            self.next_auditors.clone(),
            self.cohort.clone(),
            self.round,
            self.args.as_ref().expect("loaded").digest(),
        );
        self.emitted = Some(evidence.clone());
        self.phase = Phase::Agreed;
        Ok(evidence)
    }

    /// Quote inviting the cohort to submit encrypted updates.
    pub fn secagg_request(&mut self) -> Result<Quote, EnclaveError> {
        self.expect_phase(&[Phase::Agreed, Phase::Aggregating])?;
        let request = SecAggRequest {
            chain_id: self.state.chain_id,
            thread_nonce: self.thread_nonce,
            round_index: self.round,
            args_hash: self.args.as_ref().expect("loaded").digest(),
            enclave_pub: self.dh_key.as_ref().expect("loaded").public_key.agree,
        };
        self.phase = Phase::Aggregating;
        Ok(self.platform.attest(&self.code_id, request.encode()))
    }

    fn open_message(&self, msg: &SecAggMessage) -> Result<ModelVector, MessageRejection> {
        if msg.thread_nonce != self.thread_nonce {
            return Err(MessageRejection::WrongNonce);
        }
        let me = self.dh_key.as_ref().expect("loaded");
        let (wrap, mac_key) = channel_keys(
            &dh_with_raw(&me.secret_key, &msg.ec_pub_key),
            &dh_shared(&me.secret_key, &self.state.pubkeys[msg.sender]),
        );
        if !hmac_verify(&mac_key, &msg.mac_input(), &msg.mac) {
            return Err(MessageRejection::MacFailure);
        }
        let key = open_with_tag(&wrap, &self.thread_nonce, &msg.encrypted_decryption_key)
            .and_then(|k| <[u8; 32]>::try_from(k.as_slice()).ok())
            .ok_or(MessageRejection::Malformed)?;
        let update = open_with_tag(&SymmetricKey(key), &self.thread_nonce, &msg.encrypted_update)
            .and_then(|raw| ModelVector::from_le_bytes(&raw))
            .filter(|v| v.dim() == self.state.params.d && v.is_finite())
            .ok_or(MessageRejection::Malformed)?;
        Ok(update)
    }

    /// Decrypts the cohort's updates, clips each to `zeta`, and releases their
    /// sum plus this round's correlated noise. Bad messages count as dropouts.
    pub fn secure_aggregate(
        &mut self,
        messages: &[SecAggMessage],
    ) -> Result<AggregateOutcome, EnclaveError> {
        self.expect_phase(&[Phase::Agreed, Phase::Aggregating])?;
        let params = &self.state.params;
        let cohort: BTreeSet<usize> = self.cohort.iter().copied().collect();
        let mut accepted: BTreeMap<usize, ModelVector> = BTreeMap::new();
        let mut rejected = Vec::new();
        for msg in messages {
            let verdict = if !cohort.contains(&msg.sender) {
                Err(MessageRejection::NotInCohort)
            } else if accepted.contains_key(&msg.sender) {
                Err(MessageRejection::Duplicate)
            } else {
                self.open_message(msg)
            };
            match verdict {
                Ok(update) => {
                    accepted.insert(msg.sender, update);
                }
                Err(r) => rejected.push((msg.sender, r)),
            }
        }
        let required = self.cohort.len().saturating_sub(params.overselect_margin);
        if accepted.len() < required {
            return Err(EnclaveError::CohortIncomplete {
                present: accepted.len(),
                required,
                rejected,
            });
        }
        let mut output = ModelVector::zeros(params.d);
        for update in accepted.values() {
            output.add_assign(&clip(update, params.zeta));
        }
        let z = NoiseMatrix::new(self.state.noise_seed, params.sigma);
        output.add_assign(&correlated_noise(
            &z,
            &params.strategy,
            self.round as usize,
            params.d,
            params.zeta,
        )?);
        let participants: Vec<usize> = accepted.keys().copied().collect();
        let participation = params.record_participation.then(|| {
            let update = self.emitted.as_ref().expect("agreed");
            EvidenceBody {
                chain_id: self.state.chain_id,
                prev_digest: Some(update.digest()),
                kind: EvidenceKind::Participation,
                auditors_next: self.next_auditors.clone(),
                cohort: participants.clone(),
                round_index: Some(self.round),
                args_secagg_hash: update.args_secagg_hash,
                pubkey_list_digest: None,
            }
            .attest(&self.platform, &self.code_id)
        });
        self.phase = Phase::Done;
        Ok(AggregateOutcome {
            output,
            participants,
            rejected,
            participation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpftrl::ParticipationSchema;
    use crate::primitives::{keygen, planner_code_id};
    use rand::SeedableRng;

    struct Fx {
        platform: Platform,
        keys: Vec<KeyPair>,
        params: PlannerParams,
    }

    fn fx(n: usize, n_audit: usize, tau: usize) -> Fx {
        let n_round = 6;
        Fx {
            platform: Platform::new(1),
            keys: (0..n as u64).map(keygen).collect(),
            params: PlannerParams {
                n_clients: n,
                n_audit,
                tau,
                min_candidates: n,
                overselect_margin: 0,
                schema: ParticipationSchema::once(n_round),
                d: 3,
                sigma: 1.0,
                zeta: 2.0,
                strategy: StrategyMatrix::identity(n_round),
                record_participation: false,
            },
        }
    }

    impl Fx {
        fn pubkeys(&self) -> Vec<PublicKey> {
            self.keys.iter().map(|k| k.public_key).collect()
        }

        fn sign_all(&self, nonce: &Nonce, who: impl IntoIterator<Item = usize>) -> Vec<AuditSignature> {
            who.into_iter()
                .map(|j| AuditSignature {
                    signer: j,
                    signature: self.keys[j].sign(&nonce.0),
                })
                .collect()
        }

        fn init(&self, seed: u64) -> (SealedBlob, EvidenceChain) {
            let n = self.keys.len();
            let (mut e, quote) = init_enclave(
                &self.platform,
                &planner_code_id(),
                self.pubkeys(),
                (0..n).collect(),
                self.params.clone(),
                seed,
            )
            .unwrap();
            let nonce = Broadcast::decode(&quote.payload).unwrap().thread_nonce();
            let (blob, ev) = e.finish_init(&self.sign_all(&nonce, 0..n)).unwrap();
            (blob, EvidenceChain::genesis(ev))
        }

        fn replicate(
            &self,
            blob: &SealedBlob,
            chain: &EvidenceChain,
            cohort: Vec<usize>,
            seed: u64,
        ) -> Result<(EnclaveState, Quote), EnclaveError> {
            let n = self.keys.len();
            replicate(
                &self.platform,
                &planner_code_id(),
                ChaCha20Rng::seed_from_u64(seed),
                blob,
                chain,
                cohort,
                SecAggArgs {
                    theta: ModelVector::zeros(self.params.d),
                },
                (0..n).collect(),
            )
        }

        fn agree(&self, e: &mut EnclaveState) -> Evidence {
            let sigs = self.sign_all(&e.thread_nonce(), e.chosen_auditors().to_vec());
            e.collect_agreement(&sigs).unwrap()
        }
    }

    fn request(e: &mut EnclaveState) -> SecAggRequest {
        SecAggRequest::decode(&e.secagg_request().unwrap().payload).unwrap()
    }

    #[test]
    fn init_broadcast_carries_key_list_digest() {
        let f = fx(10, 3, 2);
        let (_, q) = init_enclave(
            &f.platform,
            &planner_code_id(),
            f.pubkeys(),
            (0..10).collect(),
            f.params.clone(),
            7,
        )
        .unwrap();
        assert!(verify_quote(&q, &planner_code_id(), &f.platform.manufacturer_pk()));
        let Broadcast::Init(b) = Broadcast::decode(&q.payload).unwrap() else {
            panic!("not an init broadcast")
        };
        assert_eq!(b.pubkey_list_digest, pubkey_list_digest(&f.pubkeys()));
        assert_eq!(b.params_digest, f.params.digest());
    }

    #[test]
    fn quorum_must_be_strict_majority() {
        let mut f = fx(10, 4, 2);
        let r = init_enclave(&f.platform, &planner_code_id(), f.pubkeys(), vec![0], f.params.clone(), 1);
        assert_eq!(
            r.unwrap_err(),
            EnclaveError::BadQuorumParams { n_audit: 4, tau: 2 }
        );
        f.params.tau = 3;
        assert!(init_enclave(&f.platform, &planner_code_id(), f.pubkeys(), vec![0], f.params, 1).is_ok());
    }

    #[test]
    fn chain_id_depends_on_master_seed() {
        let f = fx(10, 3, 2);
        let id = |seed| {
            init_enclave(&f.platform, &planner_code_id(), f.pubkeys(), vec![0], f.params.clone(), seed)
                .unwrap()
                .0
                .chain_id()
        };
        assert_ne!(id(1), id(2));
        assert_eq!(id(3), id(3));
    }

    #[test]
    fn finish_init_needs_every_client() {
        let f = fx(10, 3, 2);
        let (blob, chain) = f.init(4);
        assert!(!blob.ciphertext.is_empty());
        assert_eq!(chain.len(), 1);
        assert_eq!(
            verify_chain(&chain, &f.platform.manufacturer_pk(), &planner_code_id()),
            Ok(())
        );
        assert_eq!(chain.entries[0].auditors_next.len(), 3);

        let start = || {
            init_enclave(&f.platform, &planner_code_id(), f.pubkeys(), (0..10).collect(), f.params.clone(), 4)
                .unwrap()
                .0
        };
        let mut e = start();
        let sigs = f.sign_all(&e.thread_nonce(), 0..9);
        assert_eq!(
            e.finish_init(&sigs).unwrap_err(),
            EnclaveError::InitConsensusIncomplete { missing: vec![9] }
        );

        let mut e = start();
        let mut sigs = f.sign_all(&e.thread_nonce(), 0..10);
        sigs[6].signature = f.keys[6].sign(b"some other nonce");
        assert_eq!(
            e.finish_init(&sigs).unwrap_err(),
            EnclaveError::BadSignature { client: 6 }
        );
    }

    #[test]
    fn f_select_edge_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(f_select(&all, 10, 10, &mut rng).unwrap(), all);
        assert_eq!(
            f_select(&all[..9], 3, 10, &mut rng).unwrap_err(),
            EnclaveError::TooFewCandidates { got: 9, need: 10 }
        );
        // duplicates do not inflate the pool
        let padded = [0, 0, 1, 1, 2, 2];
        assert!(f_select(&padded, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn f_select_marginals_are_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let all: Vec<usize> = (0..10).collect();
        let trials = 100_000;
        let mut hits = [0u32; 10];
        for _ in 0..trials {
            let s = f_select(&all, 3, 10, &mut rng).unwrap();
            assert_eq!(s.len(), 3);
            for j in s {
                hits[j] += 1;
            }
        }
        // Each client is in a uniform 3-of-10 subset with probability 3/10.
        let se = (0.3f64 * 0.7 / trials as f64).sqrt();
        for h in hits {
            let freq = h as f64 / trials as f64;
            assert!((freq - 0.3).abs() < 3.0 * se, "{freq}");
        }
    }

    #[test]
    fn replicate_quotes_the_loaded_digest() {
        let f = fx(10, 3, 2);
        let (blob, chain) = f.init(4);
        let (e, q) = f.replicate(&blob, &chain, vec![0, 1], 9).unwrap();
        assert!(verify_quote(&q, &planner_code_id(), &f.platform.manufacturer_pk()));
        let Broadcast::Update(b) = Broadcast::decode(&q.payload).unwrap() else {
            panic!()
        };
        assert_eq!(b.chain_digest, chain_digest(&chain).unwrap());
        assert_eq!(b.round_index, 0);
        assert_eq!(b.chain_id, chain.chain_id().unwrap());
        assert_eq!(e.chosen_auditors(), &chain.entries[0].auditors_next[..]);
        assert_eq!(e.phase(), Phase::AwaitingAgreement);
    }

    #[test]
    fn replicate_enforces_the_schema() {
        let f = fx(10, 3, 2);
        let (blob, chain) = f.init(4);
        let (mut e, _) = f.replicate(&blob, &chain, vec![0], 9).unwrap();
        let chain = chain.appended(f.agree(&mut e));
        let err = f.replicate(&blob, &chain, vec![0, 2], 10).unwrap_err();
        assert_eq!(
            err,
            EnclaveError::Schema(DpError::SchemaViolation { client: 0, round: 1 })
        );
        assert!(f.replicate(&blob, &chain, vec![1, 2], 10).is_ok());
    }

    #[test]
    fn stale_chain_replicates_but_cannot_gather_honest_quorum() {
        let f = fx(10, 3, 2);
        let (blob, chain0) = f.init(4);
        let (mut e, _) = f.replicate(&blob, &chain0, vec![0], 9).unwrap();
        let _chain1 = chain0.appended(f.agree(&mut e));
        // Replicating again on the superseded prefix is allowed; rejection
        // happens at the auditors.
        assert!(f.replicate(&blob, &chain0, vec![0], 10).is_ok());
    }

    #[test]
    fn quorum_counting() {
        let f = fx(10, 5, 3);
        let (blob, chain) = f.init(4);
        let auditors = chain.entries[0].auditors_next.clone();
        let outsider = (0..10).find(|j| !auditors.contains(j)).unwrap();

        let (mut e, _) = f.replicate(&blob, &chain, vec![0], 9).unwrap();
        let sigs = f.sign_all(&e.thread_nonce(), auditors[..2].to_vec());
        assert!(matches!(
            e.collect_agreement(&sigs),
            Err(EnclaveError::QuorumNotReached { valid: 2, required: 3, .. })
        ));

        let mut who = auditors[..2].to_vec();
        who.push(outsider);
        who.push(auditors[0]);
        let sigs = f.sign_all(&e.thread_nonce(), who);
        match e.collect_agreement(&sigs).unwrap_err() {
            EnclaveError::QuorumNotReached { valid, rejected, .. } => {
                assert_eq!(valid, 2);
                assert_eq!(
                    rejected,
                    vec![
                        (outsider, SignatureRejection::NotAnAuditor),
                        (auditors[0], SignatureRejection::Duplicate)
                    ]
                );
            }
            other => panic!("{other:?}"),
        }

        let sigs = f.sign_all(&e.thread_nonce(), auditors[..3].to_vec());
        let ev = e.collect_agreement(&sigs).unwrap();
        assert_eq!(ev.round_index, Some(0));
        assert_eq!(ev.prev_digest, Some(chain_digest(&chain).unwrap()));
        assert_eq!(e.phase(), Phase::Agreed);
        let extended = chain.appended(ev);
        assert_eq!(
            verify_chain(&extended, &f.platform.manufacturer_pk(), &planner_code_id()),
            Ok(())
        );
    }

    fn round_with(f: &Fx, cohort: Vec<usize>, margin: usize) -> (EnclaveState, SecAggRequest) {
        let mut f2 = Fx {
            platform: f.platform.clone(),
            keys: f.keys.clone(),
            params: f.params.clone(),
        };
        f2.params.overselect_margin = margin;
        let (blob, chain) = f2.init(4);
        let (mut e, _) = f2.replicate(&blob, &chain, cohort, 9).unwrap();
        f2.agree(&mut e);
        let req = request(&mut e);
        (e, req)
    }

    fn noise_row(f: &Fx, round: usize) -> ModelVector {
        let z = NoiseMatrix::new(derive_noise_seed(4), f.params.sigma);
        correlated_noise(&z, &f.params.strategy, round, f.params.d, f.params.zeta).unwrap()
    }

    #[test]
    fn aggregate_is_sum_plus_seeded_noise() {
        let f = fx(10, 3, 2);
        let (mut e, req) = round_with(&f, vec![0, 1], 0);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let u0 = ModelVector(vec![0.5, -0.25, 1.0]);
        let u1 = ModelVector(vec![0.1, 0.2, 0.3]);
        let msgs = vec![
            SecAggMessage::build(0, &f.keys[0], &req, &u0, &mut rng),
            SecAggMessage::build(1, &f.keys[1], &req, &u1, &mut rng),
        ];
        let out = e.secure_aggregate(&msgs).unwrap();
        let noise = noise_row(&f, 0);
        for k in 0..3 {
            let expect = u0.0[k] + u1.0[k] + noise.0[k];
            assert!((out.output.0[k] - expect).abs() < 1e-12);
        }
        assert_eq!(out.participants, vec![0, 1]);
        assert_eq!(e.phase(), Phase::Done);
    }

    #[test]
    fn zero_updates_yield_exactly_the_noise_row() {
        let f = fx(10, 3, 2);
        let (mut e, req) = round_with(&f, vec![2, 5], 0);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let zero = ModelVector::zeros(3);
        let msgs: Vec<_> = [2, 5]
            .iter()
            .map(|&j| SecAggMessage::build(j, &f.keys[j], &req, &zero, &mut rng))
            .collect();
        let out = e.secure_aggregate(&msgs).unwrap();
        let mut expect = ModelVector::zeros(3);
        expect.add_assign(&noise_row(&f, 0));
        assert_eq!(out.output, expect);
    }

    #[test]
    fn tampered_mac_counts_as_dropout() {
        let f = fx(10, 3, 2);
        let u = ModelVector(vec![1.0, 0.0, 0.0]);
        let build = |req: &SecAggRequest| {
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            let mut msgs: Vec<_> = [0, 1, 2]
                .iter()
                .map(|&j| SecAggMessage::build(j, &f.keys[j], req, &u, &mut rng))
                .collect();
            msgs[1].mac[0] ^= 1;
            msgs
        };

        let (mut e, req) = round_with(&f, vec![0, 1, 2], 1);
        let out = e.secure_aggregate(&build(&req)).unwrap();
        assert_eq!(out.participants, vec![0, 2]);
        assert_eq!(out.rejected, vec![(1, MessageRejection::MacFailure)]);

        let (mut e, req) = round_with(&f, vec![0, 1, 2], 0);
        assert!(matches!(
            e.secure_aggregate(&build(&req)),
            Err(EnclaveError::CohortIncomplete { present: 2, required: 3, .. })
        ));
    }

    #[test]
    fn impersonation_and_replay_are_rejected() {
        let f = fx(10, 3, 2);
        let u = ModelVector(vec![1.0, 0.0, 0.0]);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (mut e, req) = round_with(&f, vec![0, 1], 1);
        // Client 3's key used to speak for client 1.
        let forged = SecAggMessage::build(1, &f.keys[3], &req, &u, &mut rng);
        let mut stale = SecAggMessage::build(0, &f.keys[0], &req, &u, &mut rng);
        stale.thread_nonce = Nonce([0; 16]);
        let err = e.secure_aggregate(&[forged, stale]).unwrap_err();
        let EnclaveError::CohortIncomplete { rejected, .. } = err else {
            panic!()
        };
        assert_eq!(
            rejected,
            vec![(1, MessageRejection::MacFailure), (0, MessageRejection::WrongNonce)]
        );
    }

    #[test]
    fn recovery_reproduces_the_lost_evidence() {
        let f = fx(10, 3, 2);
        let (blob, chain) = f.init(4);
        let args = SecAggArgs {
            theta: ModelVector::zeros(3),
        };
        // The crash-free reference.
        let (mut live, q_live) = f.replicate(&blob, &chain, vec![4, 1], 9).unwrap();
        let sigs = f.sign_all(&live.thread_nonce(), live.chosen_auditors().to_vec());
        let reference = live.collect_agreement(&sigs).unwrap();

        // Same process, crashed right after the quorum was gathered.
        let (mut doomed, q) = f.replicate(&blob, &chain, vec![4, 1], 9).unwrap();
        assert_eq!(q, q_live);
        doomed.crash();
        assert_eq!(doomed.collect_agreement(&sigs).unwrap_err(), EnclaveError::Crashed);
        let code = planner_code_id();
        let recovered = recovery(&f.platform, &code, &blob, &chain, &q, &[1, 4], &args, &sigs).unwrap();
        assert_eq!(recovered.encode(), reference.encode());

        let err = recovery(&f.platform, &code, &blob, &chain, &q, &[1, 4], &args, &sigs[..1]).unwrap_err();
        assert_eq!(err, EnclaveError::BadRecoverySignatures { valid: 1, required: 2 });

        let wrong_cohort = recovery(&f.platform, &code, &blob, &chain, &q, &[1], &args, &sigs);
        assert_eq!(wrong_cohort.unwrap_err(), EnclaveError::BadBroadcast);

        let chain = chain.appended(recovered);
        let (mut next, _) = f.replicate(&blob, &chain, vec![0], 10).unwrap();
        assert_eq!(next.round(), 1);
        let chain = chain.appended(f.agree(&mut next));
        assert_eq!(
            verify_chain(&chain, &f.platform.manufacturer_pk(), &code),
            Ok(())
        );
    }

    #[test]
    fn evidence_is_deterministic() {
        let f = fx(10, 3, 2);
        let (b1, c1) = f.init(4);
        let (b2, c2) = f.init(4);
        assert_eq!(b1, b2);
        assert_eq!(c1.entries[0].encode(), c2.entries[0].encode());
    }

    #[test]
    fn participation_entry_links_to_the_update() {
        let mut f = fx(10, 3, 2);
        f.params.record_participation = true;
        f.params.overselect_margin = 1;
        let (blob, chain) = f.init(4);
        let (mut e, _) = f.replicate(&blob, &chain, vec![0, 1], 9).unwrap();
        let update = f.agree(&mut e);
        let req = request(&mut e);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let msg = SecAggMessage::build(1, &f.keys[1], &req, &ModelVector::zeros(3), &mut rng);
        let out = e.secure_aggregate(&[msg]).unwrap();
        let p = out.participation.unwrap();
        assert_eq!(p.cohort, vec![1]);
        let chain = chain.appended(update).appended(p);
        assert_eq!(
            verify_chain(&chain, &f.platform.manufacturer_pk(), &planner_code_id()),
            Ok(())
        );
        // History follows the selected cohort, not the participants.
        let h = derive_history(&chain, 10).unwrap();
        assert!(h.rounds_of(0).contains(&0));
        let (next, _) = f.replicate(&blob, &chain, vec![2], 10).unwrap();
        assert_eq!(next.round(), 1);
    }

    #[test]
    fn message_sizes_do_not_depend_on_dimension() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = keygen(1);
        let req = SecAggRequest {
            chain_id: Nonce([1; 16]),
            thread_nonce: Nonce([2; 16]),
            round_index: 0,
            args_hash: hash(b"a"),
            enclave_pub: keygen(2).public_key.agree,
        };
        let a = SecAggMessage::build(0, &kp, &req, &ModelVector::zeros(8), &mut rng);
        let b = SecAggMessage::build(9999, &kp, &req, &ModelVector::zeros(512), &mut rng);
        assert_eq!(a.control_len(), b.control_len());
        assert_ne!(a.encrypted_update.len(), b.encrypted_update.len());
    }
}
