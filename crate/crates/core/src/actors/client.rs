use std::collections::BTreeSet;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dpftrl::{local_update, ClientData, ModelVector};
use crate::enclave::{AuditSignature, Broadcast, SecAggArgs, SecAggMessage, SecAggRequest};
use crate::primitives::{verify_quote, Digest, KeyPair, Nonce, PublicKey, Quote};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Adversary-controlled: signs every broadcast (or none, when withholding)
    /// and submits forged updates.
    Corrupted { withhold: bool },
    /// Honest, but offline in the listed rounds.
    Dropout(BTreeSet<u64>),
}

/// What a client trusts before it has seen anything from the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustAnchors {
    pub manufacturer_pk: PublicKey,
    pub code_id: Digest,
    pub pubkey_list_digest: Digest,
    pub params_digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    AttestationFailed,
    WrongChainId,
    ReplayedDigest,
    UnknownKeyList,
    ArgsMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditReply {
    Signed(AuditSignature),
    Aborted(AbortReason),
    Silent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub message: SecAggMessage,
    /// The update in the clear. Harness bookkeeping only; never shown to the server.
    pub plaintext: ModelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SecAggReply {
    Submitted(Submission),
    Aborted(AbortReason),
    Silent,
}

/// Where a client's training data comes from; materialized on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub task_seed: u64,
    pub client_seed: u64,
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct Client {
    pub index: usize,
    pub keys: KeyPair,
    pub evidence_chain_id: Option<Nonce>,
    pub signed_digests: BTreeSet<Digest>,
    pub behavior: Behavior,
    source: DataSource,
    dataset: Option<ClientData>,
    anchors: TrustAnchors,
    d: usize,
    zeta: f64,
    rng: ChaCha20Rng,
}

/// Bounded-norm update chosen by the adversary for a corrupted client.
pub fn forged_update(client: usize, round: u64, d: usize, zeta: f64) -> ModelVector {
    let scale = 0.9 * zeta / (d as f64).sqrt();
    ModelVector(
        (0..d)
            .map(|k| {
                if (k + client + round as usize) % 2 == 0 {
                    scale
                } else {
                    -scale
                }
            })
            .collect(),
    )
}

impl Client {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        keys: KeyPair,
        behavior: Behavior,
        source: DataSource,
        anchors: TrustAnchors,
        d: usize,
        zeta: f64,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            index,
            keys,
            evidence_chain_id: None,
            signed_digests: BTreeSet::new(),
            behavior,
            source,
            dataset: None,
            anchors,
            d,
            zeta,
            rng,
        }
    }

    pub fn is_corrupted(&self) -> bool {
        matches!(self.behavior, Behavior::Corrupted { .. })
    }

    pub fn is_offline(&self, round: u64) -> bool {
        matches!(&self.behavior, Behavior::Dropout(s) if s.contains(&round))
    }

    pub fn dataset(&mut self) -> &ClientData {
        let s = &self.source;
        self.dataset
            .get_or_insert_with(|| ClientData::synthetic(s.task_seed, s.client_seed, self.d, s.points))
    }

    fn sign(&self, nonce: &Nonce) -> AuditReply {
        AuditReply::Signed(AuditSignature {
            signer: self.index,
            signature: self.keys.sign(&nonce.0),
        })
    }

    /// Decide whether to endorse a planner broadcast.
    pub fn client_audit(&mut self, quote: &Quote) -> AuditReply {
        let decoded = Broadcast::decode(&quote.payload);
        if let Behavior::Corrupted { withhold } = self.behavior {
            // Withholding only bites on state transitions; refusing the
            // initialization would just stop the deployment from existing.
            return match decoded {
                Ok(Broadcast::Update(_)) if withhold => AuditReply::Silent,
                Ok(b) => self.sign(&b.thread_nonce()),
                Err(_) => AuditReply::Silent,
            };
        }
        if let Ok(Broadcast::Update(b)) = &decoded {
            if self.is_offline(b.round_index) {
                return AuditReply::Silent;
            }
        }
        let a = &self.anchors;
        if !verify_quote(quote, &a.code_id, &a.manufacturer_pk) {
            return AuditReply::Aborted(AbortReason::AttestationFailed);
        }
        let Ok(broadcast) = decoded else {
            return AuditReply::Aborted(AbortReason::AttestationFailed);
        };
        if let Broadcast::Init(init) = &broadcast {
            if init.pubkey_list_digest != a.pubkey_list_digest || init.params_digest != a.params_digest {
                return AuditReply::Aborted(AbortReason::UnknownKeyList);
            }
        }
        match self.evidence_chain_id {
            None => self.evidence_chain_id = Some(broadcast.chain_id()),
            Some(id) if id != broadcast.chain_id() => {
                return AuditReply::Aborted(AbortReason::WrongChainId)
            }
            Some(_) => {}
        }
        if let Broadcast::Update(b) = &broadcast {
            if !self.signed_digests.insert(b.chain_digest) {
                return AuditReply::Aborted(AbortReason::ReplayedDigest);
            }
        }
        self.sign(&broadcast.thread_nonce())
    }

    /// Answer an aggregation request with an encrypted update against `args`.
    pub fn client_secagg(&mut self, quote: &Quote, args: &SecAggArgs) -> SecAggReply {
        let request = SecAggRequest::decode(&quote.payload);
        if let Ok(r) = &request {
            if self.is_offline(r.round_index) {
                return SecAggReply::Silent;
            }
        }
        let a = &self.anchors;
        if !verify_quote(quote, &a.code_id, &a.manufacturer_pk) {
            return SecAggReply::Aborted(AbortReason::AttestationFailed);
        }
        let Ok(request) = request else {
            return SecAggReply::Aborted(AbortReason::AttestationFailed);
        };
        if !self.is_corrupted() && self.evidence_chain_id != Some(request.chain_id) {
            return SecAggReply::Aborted(AbortReason::WrongChainId);
        }
        if args.digest() != request.args_hash {
            return SecAggReply::Aborted(AbortReason::ArgsMismatch);
        }
        let plaintext = if self.is_corrupted() {
            forged_update(self.index, request.round_index, self.d, self.zeta)
        } else {
            let zeta = self.zeta;
            local_update(self.dataset(), &args.theta, zeta)
        };
        let message = SecAggMessage::build(self.index, &self.keys, &request, &plaintext, &mut self.rng);
        SecAggReply::Submitted(Submission { message, plaintext })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpftrl::{ParticipationSchema, StrategyMatrix};
    use crate::enclave::{init_enclave, replicate, PlannerParams};
    use crate::evidence::EvidenceChain;
    use crate::primitives::{keygen, planner_code_id, Platform, PartyId};
    use rand::SeedableRng;

    struct Fx {
        platform: Platform,
        clients: Vec<Client>,
        chain: EvidenceChain,
        blob: crate::primitives::SealedBlob,
    }

    fn fx(behaviors: Vec<Behavior>) -> Fx {
        let n = behaviors.len();
        let platform = Platform::new(3);
        let keys: Vec<KeyPair> = (0..n as u64).map(|s| keygen(s).owned_by(PartyId::Client(s as u32))).collect();
        let params = PlannerParams {
            n_clients: n,
            n_audit: n,
            tau: n / 2 + 1,
            min_candidates: n,
            overselect_margin: 0,
            schema: ParticipationSchema::min_separation(1, 4),
            d: 2,
            sigma: 1.0,
            zeta: 1.0,
            strategy: StrategyMatrix::identity(4),
            record_participation: false,
        };
        let pubkeys: Vec<_> = keys.iter().map(|k| k.public_key).collect();
        let anchors = TrustAnchors {
            manufacturer_pk: platform.manufacturer_pk(),
            code_id: planner_code_id(),
            pubkey_list_digest: crate::enclave::pubkey_list_digest(&pubkeys),
            params_digest: params.digest(),
        };
        let mut clients: Vec<Client> = behaviors
            .into_iter()
            .enumerate()
            .map(|(j, b)| {
                Client::new(
                    j,
                    keys[j].clone(),
                    b,
                    DataSource { task_seed: 1, client_seed: j as u64, points: 3 },
                    anchors,
                    2,
                    1.0,
                    ChaCha20Rng::seed_from_u64(j as u64),
                )
            })
            .collect();
        let (mut e, q) = init_enclave(&platform, &planner_code_id(), pubkeys, (0..n).collect(), params, 8).unwrap();
        let sigs: Vec<_> = clients
            .iter_mut()
            .map(|c| match c.client_audit(&q) {
                AuditReply::Signed(s) => s,
                other => panic!("{other:?}"),
            })
            .collect();
        let (blob, ev) = e.finish_init(&sigs).unwrap();
        Fx {
            platform,
            clients,
            chain: EvidenceChain::genesis(ev),
            blob,
        }
    }

    fn update_quote(f: &Fx, seed: u64) -> (crate::enclave::EnclaveState, Quote) {
        replicate(
            &f.platform,
            &planner_code_id(),
            ChaCha20Rng::seed_from_u64(seed),
            &f.blob,
            &f.chain,
            vec![0],
            SecAggArgs { theta: ModelVector::zeros(2) },
            (0..f.clients.len()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn honest_client_signs_once_per_digest() {
        let mut f = fx(vec![Behavior::Honest; 3]);
        let (_, q1) = update_quote(&f, 1);
        let c = &mut f.clients[0];
        assert!(matches!(c.client_audit(&q1), AuditReply::Signed(_)));
        assert!(c.evidence_chain_id.is_some());
        // A second process on the same chain digest: a fork attempt.
        let (_, q2) = update_quote(&f, 2);
        assert_ne!(q1, q2);
        assert_eq!(
            f.clients[0].client_audit(&q2),
            AuditReply::Aborted(AbortReason::ReplayedDigest)
        );
    }

    #[test]
    fn foreign_chain_and_forged_quote_are_refused() {
        let mut f = fx(vec![Behavior::Honest; 3]);
        let (_, q) = update_quote(&f, 1);
        let mut payload = Broadcast::decode(&q.payload).unwrap();
        if let Broadcast::Update(b) = &mut payload {
            b.chain_id = Nonce([9; 16]);
        }
        let foreign = f.platform.attest(&planner_code_id(), payload.encode());
        assert_eq!(
            f.clients[1].client_audit(&foreign),
            AuditReply::Aborted(AbortReason::WrongChainId)
        );
        let rogue = Platform::new(77).attest(&planner_code_id(), q.payload.clone());
        assert_eq!(
            f.clients[1].client_audit(&rogue),
            AuditReply::Aborted(AbortReason::AttestationFailed)
        );
    }

    #[test]
    fn corrupted_clients_sign_everything() {
        let mut f = fx(vec![Behavior::Corrupted { withhold: false }, Behavior::Honest, Behavior::Honest]);
        let (_, q1) = update_quote(&f, 1);
        let (_, q2) = update_quote(&f, 2);
        assert!(matches!(f.clients[0].client_audit(&q1), AuditReply::Signed(_)));
        assert!(matches!(f.clients[0].client_audit(&q2), AuditReply::Signed(_)));
        assert!(f.clients[0].signed_digests.is_empty());
    }

    #[test]
    fn dropout_is_silent_in_scheduled_rounds() {
        let mut f = fx(vec![Behavior::Dropout([0].into()), Behavior::Honest, Behavior::Honest]);
        let (_, q) = update_quote(&f, 1);
        assert_eq!(f.clients[0].client_audit(&q), AuditReply::Silent);
    }

    #[test]
    fn secagg_requires_attestation_and_matching_args() {
        let mut f = fx(vec![Behavior::Honest, Behavior::Honest, Behavior::Corrupted { withhold: true }]);
        let (mut e, q) = update_quote(&f, 1);
        let sigs: Vec<_> = f
            .clients
            .iter_mut()
            .filter_map(|c| match c.client_audit(&q) {
                AuditReply::Signed(s) => Some(s),
                _ => None,
            })
            .collect();
        assert_eq!(sigs.len(), 2);
        e.collect_agreement(&sigs).unwrap();
        let req = e.secagg_request().unwrap();
        let args = SecAggArgs { theta: ModelVector::zeros(2) };

        let stripped = Quote {
            signature: crate::primitives::Signature([0; 64]),
            ..req.clone()
        };
        assert_eq!(
            f.clients[0].client_secagg(&stripped, &args),
            SecAggReply::Aborted(AbortReason::AttestationFailed)
        );
        let other = SecAggArgs { theta: ModelVector(vec![1.0, 0.0]) };
        assert_eq!(
            f.clients[0].client_secagg(&req, &other),
            SecAggReply::Aborted(AbortReason::ArgsMismatch)
        );
        let SecAggReply::Submitted(s) = f.clients[0].client_secagg(&req, &args) else {
            panic!()
        };
        let out = e.secure_aggregate(&[s.message]).unwrap();
        assert_eq!(out.participants, vec![0]);

        let SecAggReply::Submitted(forged) = f.clients[2].client_secagg(&req, &args) else {
            panic!()
        };
        assert!(forged.plaintext.norm() <= 1.0);
        assert_eq!(forged.plaintext, forged_update(2, 0, 2, 1.0));
    }
}
