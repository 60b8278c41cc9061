//! Seedable stand-ins for the cryptographic services the protocol relies on.
//!
//! Everything here is built from standard primitives (SHA-256, Ed25519, X25519,
//! ChaCha20-Poly1305, HMAC-SHA-256) but keyed from deterministic seeds, so a
//! simulation run is reproducible byte for byte. Nothing here is hardened: no
//! constant-time guarantees, no key erasure.
//!
//! [`Platform`] plays the role of the TEE vendor plus the host's sealing
//! facility. It signs quotes with a single manufacturer key and seals state
//! under a key bound to the enclave code identity. Sealed blobs are plain data;
//! anyone holding one can copy and replay it.

use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Tag};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::encoding::CanonicalWriter;

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let h = self.to_hex();
                write!(f, concat!(stringify!($name), "({}..)"), &h[..12.min(h.len())])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let raw = hex::decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; $len] = raw.try_into().map_err(|v: Vec<u8>| {
                    serde::de::Error::custom(format!(
                        "expected {} bytes, got {}",
                        $len,
                        v.len()
                    ))
                })?;
                Ok($name(arr))
            }
        }
    };
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);
hex_bytes!(Digest, 32);

/// 16-byte nonce. Chain IDs and per-process thread nonces use this type.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; 16]);
hex_bytes!(Nonce, 16);

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 64]);
hex_bytes!(Signature, 64);

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SymmetricKey(pub [u8; 32]);
hex_bytes!(SymmetricKey, 32);

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

impl Nonce {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut n = [0u8; 16];
        rng.fill_bytes(&mut n);
        Nonce(n)
    }
}

impl SymmetricKey {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        SymmetricKey(k)
    }
}

/// Independent generator for one party, derived from the run's master seed.
///
/// Each (label, index) pair yields its own stream, so the adversary's choices
/// cannot perturb the randomness an honest party observes.
pub fn party_rng(master_seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"party-rng");
    h.update(master_seed.to_be_bytes());
    h.update((label.len() as u32).to_be_bytes());
    h.update(label.as_bytes());
    h.update(index.to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Code identity of the planner enclave binary.
pub fn planner_code_id() -> Digest {
    hash(b"planner-enclave/v1")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartyId {
    Unassigned,
    Client(u32),
    Manufacturer,
    Enclave(u64),
}

/// Ed25519 verification key plus X25519 agreement key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    pub verify: [u8; 32],
    pub agree: [u8; 32],
}

impl PublicKey {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.verify);
        out[32..].copy_from_slice(&self.agree);
        out
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", &hex::encode(self.verify)[..12])
    }
}

/// 32-byte seed from which both the signing and the agreement secrets derive.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    fn signing(&self) -> SigningKey {
        SigningKey::from_bytes(&self.0)
    }

    fn agreement(&self) -> x25519_dalek::StaticSecret {
        let mut h = Sha256::new();
        h.update(b"x25519");
        h.update(self.0);
        let seed: [u8; 32] = h.finalize().into();
        x25519_dalek::StaticSecret::from(seed)
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub secret_key: SecretKey,
    pub owner_id: PartyId,
}

impl KeyPair {
    pub fn from_secret(secret: [u8; 32], owner_id: PartyId) -> Self {
        let secret_key = SecretKey(secret);
        let verify = secret_key.signing().verifying_key().to_bytes();
        let agree = x25519_dalek::PublicKey::from(&secret_key.agreement()).to_bytes();
        Self {
            public_key: PublicKey { verify, agree },
            secret_key,
            owner_id,
        }
    }

    pub fn random(rng: &mut impl RngCore, owner_id: PartyId) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::from_secret(secret, owner_id)
    }

    pub fn owned_by(mut self, owner_id: PartyId) -> Self {
        self.owner_id = owner_id;
        self
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(&self.secret_key, message)
    }
}

pub fn keygen(seed: u64) -> KeyPair {
    let mut h = Sha256::new();
    h.update(b"keygen");
    h.update(seed.to_be_bytes());
    KeyPair::from_secret(h.finalize().into(), PartyId::Unassigned)
}

pub fn sign(sk: &SecretKey, message: &[u8]) -> Signature {
    Signature(sk.signing().sign(message).to_bytes())
}

pub fn verify(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&pk.verify) else {
        return false;
    };
    vk.verify(message, &ed25519_dalek::Signature::from_bytes(&sig.0))
        .is_ok()
}

/// X25519 agreement between `my_sk` and the agreement half of `peer_pk`,
/// hashed into a symmetric key.
pub fn dh_shared(my_sk: &SecretKey, peer_pk: &PublicKey) -> SymmetricKey {
    dh_with_raw(my_sk, &peer_pk.agree)
}

pub fn dh_with_raw(my_sk: &SecretKey, peer_agree: &[u8; 32]) -> SymmetricKey {
    let shared = my_sk
        .agreement()
        .diffie_hellman(&x25519_dalek::PublicKey::from(*peer_agree));
    let mut h = Sha256::new();
    h.update(b"dh-shared");
    h.update(shared.as_bytes());
    SymmetricKey(h.finalize().into())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication tag mismatch")]
    MacFailure,
}

/// ChaCha20-Poly1305 with the first 12 nonce bytes as IV and the full 16-byte
/// nonce as associated data, so every nonce byte is authenticated.
pub fn aead_encrypt(key: &SymmetricKey, nonce: &Nonce, plaintext: &[u8]) -> (Vec<u8>, [u8; 16]) {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(nonce.0[..12].into(), &nonce.0, &mut buf)
        .expect("plaintext within AEAD limits");
    (buf, tag.into())
}

pub fn aead_decrypt(
    key: &SymmetricKey,
    nonce: &Nonce,
    ciphertext: &[u8],
    mac: &[u8; 16],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut buf = ciphertext.to_vec();
    cipher
        .decrypt_in_place_detached(nonce.0[..12].into(), &nonce.0, &mut buf, Tag::from_slice(mac))
        .map_err(|_| CryptoError::MacFailure)?;
    Ok(buf)
}

pub fn hmac_tag(key: &SymmetricKey, data: &[u8]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

pub fn hmac_verify(key: &SymmetricKey, data: &[u8], tag: &[u8]) -> bool {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("any key length");
    mac.update(data);
    mac.verify_slice(tag).is_ok()
}

/// Attestation report: a manufacturer signature over (code identity, payload).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub code_id: Digest,
    #[serde(with = "hex_vec")]
    pub payload: Vec<u8>,
    pub signature: Signature,
}

impl Quote {
    fn signed_bytes(code_id: &Digest, payload: &[u8]) -> Vec<u8> {
        CanonicalWriter::new()
            .bytes(b"quote")
            .bytes(&code_id.0)
            .bytes(payload)
            .finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        CanonicalWriter::new()
            .bytes(&self.code_id.0)
            .bytes(&self.payload)
            .bytes(&self.signature.0)
            .finish()
    }

    /// Size of the quote on the wire.
    pub fn wire_len(&self) -> usize {
        self.encode().len()
    }
}

pub fn verify_quote(quote: &Quote, expected_code_id: &Digest, manufacturer_pk: &PublicKey) -> bool {
    quote.code_id == *expected_code_id
        && verify(
            manufacturer_pk,
            &Quote::signed_bytes(&quote.code_id, &quote.payload),
            &quote.signature,
        )
}

/// Enclave state encrypted to a code identity. Copyable and replayable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub code_id: Digest,
    #[serde(with = "hex_vec")]
    pub iv: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub tag: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SealError {
    #[error("blob sealed for a different code identity")]
    WrongCodeIdentity,
    #[error("sealed blob failed authentication")]
    SealCorrupted,
}

/// The TEE vendor and the host sealing facility, collapsed into one object.
#[derive(Debug, Clone)]
pub struct Platform {
    manufacturer: KeyPair,
    seal_root: [u8; 32],
}

impl Platform {
    pub fn new(seed: u64) -> Self {
        let mut rng = party_rng(seed, "platform", 0);
        let manufacturer = KeyPair::random(&mut rng, PartyId::Manufacturer);
        let mut seal_root = [0u8; 32];
        rng.fill_bytes(&mut seal_root);
        Self {
            manufacturer,
            seal_root,
        }
    }

    pub fn manufacturer_pk(&self) -> PublicKey {
        self.manufacturer.public_key
    }

    pub fn attest(&self, code_id: &Digest, payload: Vec<u8>) -> Quote {
        let signature = self
            .manufacturer
            .sign(&Quote::signed_bytes(code_id, &payload));
        Quote {
            code_id: *code_id,
            payload,
            signature,
        }
    }

    fn seal_key(&self, code_id: &Digest) -> SymmetricKey {
        let mut h = Sha256::new();
        h.update(b"seal");
        h.update(self.seal_root);
        h.update(code_id.0);
        SymmetricKey(h.finalize().into())
    }

    /// Deterministic: the IV is derived from the state itself, so sealing the
    /// same state twice gives the same blob.
    pub fn seal(&self, code_id: &Digest, state: &[u8]) -> SealedBlob {
        let key = self.seal_key(code_id);
        let iv = &hash(&[&code_id.0[..], state].concat()).0[..12];
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
        let mut buf = state.to_vec();
        let tag = cipher
            .encrypt_in_place_detached(iv.into(), &code_id.0, &mut buf)
            .expect("state within AEAD limits");
        SealedBlob {
            code_id: *code_id,
            iv: iv.to_vec(),
            ciphertext: buf,
            tag: tag.to_vec(),
        }
    }

    /// Succeeds for any authentic blob of the same code identity, including
    /// stale copies. Freshness is the protocol's problem.
    pub fn unseal(&self, code_id: &Digest, blob: &SealedBlob) -> Result<Vec<u8>, SealError> {
        if blob.code_id != *code_id {
            return Err(SealError::WrongCodeIdentity);
        }
        if blob.iv.len() != 12 || blob.tag.len() != 16 {
            return Err(SealError::SealCorrupted);
        }
        let key = self.seal_key(code_id);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
        let mut buf = blob.ciphertext.clone();
        cipher
            .decrypt_in_place_detached(
                blob.iv.as_slice().into(),
                &code_id.0,
                &mut buf,
                Tag::from_slice(&blob.tag),
            )
            .map_err(|_| SealError::SealCorrupted)?;
        Ok(buf)
    }
}

pub(crate) mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
