//! Authenticated public-key and session primitives.
//!
//! Every protocol module talks to cryptography through the [`Envelope`]
//! trait. Two bindings ship with the crate:
//!
//! * [`StandardScheme`]: Ed25519 signatures, X25519 key agreement and
//!   ChaCha20-Poly1305 for both sealed blobs and session traffic.
//! * [`ToyScheme`]: a SHA-256 construction that is *not* secure (anyone
//!   holding a public key can forge its signatures) but preserves every
//!   structural property the protocols rely on. It is an order of magnitude
//!   faster and is used by long simulations and exhaustive tests.
//!
//! All operations are pure functions of their inputs. Sealing derives its
//! ephemeral key from the sender's signature over the message, so sealing
//! the same message twice yields the same bytes.
//!
//! Multi-field digests use the canonical encoding from [`encode_fields`]:
//! every field is prefixed with its length as a big-endian `u32` and the
//! fields are concatenated in order.

use std::fmt;
use std::sync::Arc;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Millis;

pub const STANDARD_ALGORITHM: &str = "ed25519+x25519+chacha20poly1305";
pub const TOY_ALGORITHM: &str = "toy-sha256";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("sender authenticity could not be verified")]
    AuthenticityFailure,
    #[error("blob cannot be opened with this key")]
    ConfidentialityFailure,
    #[error("malformed encoding")]
    Malformed,
}

macro_rules! opaque_bytes {
    ($name:ident) => {
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(#[serde(with = "hex_bytes")] pub Vec<u8>);

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let hex = hex::encode(&self.0);
                let shown = &hex[..hex.len().min(12)];
                write!(f, "{}({}..)", stringify!($name), shown)
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }
    };
}

opaque_bytes!(PublicKey);
opaque_bytes!(PrivateKey);
opaque_bytes!(Signature);

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
    pub algorithm_id: String,
}

/// Binding of a username to a public key, signed by a certificate authority.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub username: String,
    pub public_key: PublicKey,
    pub issuer: String,
    pub signature: Signature,
}

impl Certificate {
    /// Bytes covered by the issuer signature: `username ‖ public_key`.
    pub fn signed_bytes(username: &str, public_key: &PublicKey) -> Vec<u8> {
        encode_fields(&[username.as_bytes(), &public_key.0])
    }

    pub fn verify(&self, env: &dyn Envelope, ca_public: &PublicKey) -> bool {
        env.verify(
            ca_public,
            &Self::signed_bytes(&self.username, &self.public_key),
            &self.signature,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_fields(&[
            self.username.as_bytes(),
            &self.public_key.0,
            self.issuer.as_bytes(),
            &self.signature.0,
        ])
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let fields = decode_fields(bytes)?;
        let [username, public_key, issuer, signature]: [Vec<u8>; 4] =
            fields.try_into().map_err(|_| CryptoError::Malformed)?;
        Ok(Certificate {
            username: String::from_utf8(username).map_err(|_| CryptoError::Malformed)?,
            public_key: PublicKey(public_key),
            issuer: String::from_utf8(issuer).map_err(|_| CryptoError::Malformed)?,
            signature: Signature(signature),
        })
    }
}

/// Symmetric key shared by the two ends of a connection.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionKey {
    #[serde(with = "hex_bytes")]
    pub key: Vec<u8>,
    pub established_at: Millis,
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("established_at", &self.established_at)
            .finish_non_exhaustive()
    }
}

impl SessionKey {
    pub fn generate<R: RngCore>(rng: &mut R, now: Millis) -> Self {
        let mut key = vec![0u8; 32];
        rng.fill_bytes(&mut key);
        SessionKey {
            key,
            established_at: now,
        }
    }

    fn encode(&self) -> Vec<u8> {
        encode_fields(&[self.key.as_slice(), &self.established_at.to_be_bytes()])
    }

    fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let fields = decode_fields(bytes)?;
        let [key, at]: [Vec<u8>; 2] = fields.try_into().map_err(|_| CryptoError::Malformed)?;
        let at: [u8; 8] = at.try_into().map_err(|_| CryptoError::Malformed)?;
        Ok(SessionKey {
            key,
            established_at: u64::from_be_bytes(at),
        })
    }
}

/// The pluggable primitive set.
pub trait Envelope: fmt::Debug + Send + Sync {
    fn algorithm_id(&self) -> &'static str;

    fn generate_keypair(&self, seed: u64) -> KeyPair;

    fn sign(&self, private: &PrivateKey, message: &[u8]) -> Signature;

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool;

    /// Public-key encryption to `recipient`. `entropy` must be unpredictable
    /// to third parties; it seeds the per-message ephemeral key.
    fn encrypt_to(&self, recipient: &PublicKey, plaintext: &[u8], entropy: &[u8]) -> Vec<u8>;

    fn decrypt_with(&self, recipient: &PrivateKey, blob: &[u8]) -> Result<Vec<u8>, CryptoError>;

    fn session_encrypt(&self, key: &SessionKey, nonce: u64, plaintext: &[u8]) -> Vec<u8>;

    fn session_decrypt(
        &self,
        key: &SessionKey,
        nonce: u64,
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError>;
}

pub type SharedEnvelope = Arc<dyn Envelope>;

/// Resolves a scheme name (`"standard"` or `"toy"`) to an envelope.
pub fn envelope_by_name(name: &str) -> Option<SharedEnvelope> {
    match name {
        "standard" | STANDARD_ALGORITHM => Some(Arc::new(StandardScheme)),
        "toy" | TOY_ALGORITHM => Some(Arc::new(ToyScheme)),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Canonical field encoding

pub fn encode_fields<F: AsRef<[u8]>>(fields: &[F]) -> Vec<u8> {
    let total: usize = fields.iter().map(|f| 4 + f.as_ref().len()).sum();
    let mut out = Vec::with_capacity(total);
    for field in fields {
        let field = field.as_ref();
        out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        out.extend_from_slice(field);
    }
    out
}

pub fn decode_fields(mut bytes: &[u8]) -> Result<Vec<Vec<u8>>, CryptoError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(CryptoError::Malformed);
        }
        let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        bytes = &bytes[4..];
        if bytes.len() < len {
            return Err(CryptoError::Malformed);
        }
        out.push(bytes[..len].to_vec());
        bytes = &bytes[len..];
    }
    Ok(out)
}

/// Signs the canonical encoding of an ordered field list.
pub fn sign_digest<F: AsRef<[u8]>>(
    env: &dyn Envelope,
    private: &PrivateKey,
    fields: &[F],
) -> Signature {
    debug_assert!(!fields.is_empty(), "digest over an empty field list");
    env.sign(private, &encode_fields(fields))
}

pub fn verify_digest<F: AsRef<[u8]>>(
    env: &dyn Envelope,
    public: &PublicKey,
    fields: &[F],
    signature: &Signature,
) -> bool {
    env.verify(public, &encode_fields(fields), signature)
}

// ---------------------------------------------------------------------------
// Sender-signed, recipient-encrypted blobs

fn seal_signed_bytes(recipient: &PublicKey, plaintext: &[u8]) -> Vec<u8> {
    encode_fields(&[b"myzone-seal".as_slice(), &recipient.0, plaintext])
}

/// Signs `plaintext` with the sender key and encrypts signature and
/// plaintext to `recipient`. Only the recipient can open it and the opener
/// learns which key signed it.
pub fn seal(
    env: &dyn Envelope,
    sender: &PrivateKey,
    recipient: &PublicKey,
    plaintext: &[u8],
) -> Vec<u8> {
    let signature = env.sign(sender, &seal_signed_bytes(recipient, plaintext));
    let inner = encode_fields(&[&signature.0, plaintext]);
    env.encrypt_to(recipient, &inner, &signature.0)
}

/// Decrypts a sealed blob without checking who signed it. Returns the
/// signature and plaintext so callers can verify against a key that is only
/// known after parsing the plaintext.
pub fn unseal(
    env: &dyn Envelope,
    recipient: &PrivateKey,
    blob: &[u8],
) -> Result<(Signature, Vec<u8>), CryptoError> {
    let inner = env.decrypt_with(recipient, blob)?;
    let fields = decode_fields(&inner).map_err(|_| CryptoError::ConfidentialityFailure)?;
    let [signature, plaintext]: [Vec<u8>; 2] = fields
        .try_into()
        .map_err(|_| CryptoError::ConfidentialityFailure)?;
    Ok((Signature(signature), plaintext))
}

pub fn verify_sealed(
    env: &dyn Envelope,
    sender: &PublicKey,
    recipient: &PublicKey,
    signature: &Signature,
    plaintext: &[u8],
) -> bool {
    env.verify(sender, &seal_signed_bytes(recipient, plaintext), signature)
}

/// Opens a sealed blob and checks that `sender` signed it.
pub fn open(
    env: &dyn Envelope,
    recipient: &KeyPair,
    sender: &PublicKey,
    blob: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let (signature, plaintext) = unseal(env, &recipient.private_key, blob)?;
    if verify_sealed(env, sender, &recipient.public_key, &signature, &plaintext) {
        Ok(plaintext)
    } else {
        Err(CryptoError::AuthenticityFailure)
    }
}

pub fn seal_session_key(
    env: &dyn Envelope,
    sender: &PrivateKey,
    recipient: &PublicKey,
    key: &SessionKey,
) -> Vec<u8> {
    seal(env, sender, recipient, &key.encode())
}

pub fn open_session_key(
    env: &dyn Envelope,
    recipient: &KeyPair,
    sender: &PublicKey,
    sealed: &[u8],
) -> Result<SessionKey, CryptoError> {
    let bytes = open(env, recipient, sender, sealed)?;
    SessionKey::decode(&bytes).map_err(|_| CryptoError::ConfidentialityFailure)
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

// ---------------------------------------------------------------------------
// Standard scheme

/// Ed25519 + X25519 + ChaCha20-Poly1305.
///
/// Public key layout: `ed25519 verifying key (32) ‖ x25519 public (32)`.
/// Private key layout: `ed25519 seed (32) ‖ x25519 secret (32)`.
/// Sealed blob layout: `ephemeral x25519 public (32) ‖ AEAD ciphertext`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardScheme;

impl StandardScheme {
    fn split(bytes: &[u8]) -> Option<([u8; 32], [u8; 32])> {
        if bytes.len() != 64 {
            return None;
        }
        let mut a = [0u8; 32];
        let mut b = [0u8; 32];
        a.copy_from_slice(&bytes[..32]);
        b.copy_from_slice(&bytes[32..]);
        Some((a, b))
    }

    fn aead_key(shared: &[u8; 32], eph_public: &[u8; 32], recipient_x: &[u8; 32]) -> [u8; 32] {
        sha256(&[b"myzone-ecies", shared, eph_public, recipient_x])
    }

    fn nonce(n: u64) -> Nonce {
        let mut bytes = [0u8; 12];
        bytes[4..].copy_from_slice(&n.to_be_bytes());
        *Nonce::from_slice(&bytes)
    }
}

impl Envelope for StandardScheme {
    fn algorithm_id(&self) -> &'static str {
        STANDARD_ALGORITHM
    }

    fn generate_keypair(&self, seed: u64) -> KeyPair {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ed_seed = [0u8; 32];
        let mut x_secret = [0u8; 32];
        rng.fill_bytes(&mut ed_seed);
        rng.fill_bytes(&mut x_secret);
        let signing = SigningKey::from_bytes(&ed_seed);
        let x_static = x25519_dalek::StaticSecret::from(x_secret);
        let x_public = x25519_dalek::PublicKey::from(&x_static);
        let mut public = signing.verifying_key().to_bytes().to_vec();
        public.extend_from_slice(x_public.as_bytes());
        let mut private = ed_seed.to_vec();
        private.extend_from_slice(&x_static.to_bytes());
        KeyPair {
            public_key: PublicKey(public),
            private_key: PrivateKey(private),
            algorithm_id: STANDARD_ALGORITHM.to_string(),
        }
    }

    fn sign(&self, private: &PrivateKey, message: &[u8]) -> Signature {
        let (ed_seed, _) = Self::split(&private.0).expect("standard private key is 64 bytes");
        let signing = SigningKey::from_bytes(&ed_seed);
        Signature(signing.sign(message).to_bytes().to_vec())
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        let Some((ed_public, _)) = Self::split(&public.0) else {
            return false;
        };
        let Ok(verifying) = VerifyingKey::from_bytes(&ed_public) else {
            return false;
        };
        let Ok(sig_bytes) = <[u8; 64]>::try_from(signature.0.as_slice()) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
        verifying.verify(message, &sig).is_ok()
    }

    fn encrypt_to(&self, recipient: &PublicKey, plaintext: &[u8], entropy: &[u8]) -> Vec<u8> {
        let (_, recipient_x) = Self::split(&recipient.0).expect("standard public key is 64 bytes");
        let eph_secret =
            x25519_dalek::StaticSecret::from(sha256(&[b"myzone-eph", entropy, &recipient.0, plaintext]));
        let eph_public = x25519_dalek::PublicKey::from(&eph_secret);
        let shared = eph_secret.diffie_hellman(&x25519_dalek::PublicKey::from(recipient_x));
        let key = Self::aead_key(shared.as_bytes(), eph_public.as_bytes(), &recipient_x);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
        let ct = cipher
            .encrypt(&Self::nonce(0), plaintext)
            .expect("chacha20poly1305 encryption does not fail");
        let mut out = eph_public.as_bytes().to_vec();
        out.extend_from_slice(&ct);
        out
    }

    fn decrypt_with(&self, recipient: &PrivateKey, blob: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let (_, x_secret) = Self::split(&recipient.0).ok_or(CryptoError::ConfidentialityFailure)?;
        if blob.len() < 32 {
            return Err(CryptoError::ConfidentialityFailure);
        }
        let mut eph = [0u8; 32];
        eph.copy_from_slice(&blob[..32]);
        let secret = x25519_dalek::StaticSecret::from(x_secret);
        let recipient_x = x25519_dalek::PublicKey::from(&secret);
        let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
        let key = Self::aead_key(shared.as_bytes(), &eph, recipient_x.as_bytes());
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
        cipher
            .decrypt(&Self::nonce(0), &blob[32..])
            .map_err(|_| CryptoError::ConfidentialityFailure)
    }

    fn session_encrypt(&self, key: &SessionKey, nonce: u64, plaintext: &[u8]) -> Vec<u8> {
        let k = sha256(&[b"myzone-session", &key.key]);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&k));
        cipher
            .encrypt(&Self::nonce(nonce), plaintext)
            .expect("chacha20poly1305 encryption does not fail")
    }

    fn session_decrypt(
        &self,
        key: &SessionKey,
        nonce: u64,
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        let k = sha256(&[b"myzone-session", &key.key]);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&k));
        cipher
            .decrypt(&Self::nonce(nonce), ciphertext)
            .map_err(|_| CryptoError::ConfidentialityFailure)
    }
}

// ---------------------------------------------------------------------------
// Toy scheme

/// Fast deterministic stand-in. Not secure: signatures are keyed only by
/// the public key. Blob layout: `tag (16) ‖ nonce (16) ‖ body`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyScheme;

impl ToyScheme {
    fn public_of(private: &[u8]) -> Vec<u8> {
        sha256(&[b"toy-pub", private]).to_vec()
    }

    fn keystream_xor(seed: &[u8], data: &mut [u8]) {
        for (block_index, chunk) in data.chunks_mut(32).enumerate() {
            let block = sha256(&[b"toy-stream", seed, &(block_index as u64).to_be_bytes()]);
            for (byte, k) in chunk.iter_mut().zip(block.iter()) {
                *byte ^= k;
            }
        }
    }

    fn tag(parts: &[&[u8]]) -> [u8; 16] {
        let full = sha256(parts);
        let mut tag = [0u8; 16];
        tag.copy_from_slice(&full[..16]);
        tag
    }
}

impl Envelope for ToyScheme {
    fn algorithm_id(&self) -> &'static str {
        TOY_ALGORITHM
    }

    fn generate_keypair(&self, seed: u64) -> KeyPair {
        let private = sha256(&[b"toy-priv", &seed.to_be_bytes()]).to_vec();
        KeyPair {
            public_key: PublicKey(Self::public_of(&private)),
            private_key: PrivateKey(private),
            algorithm_id: TOY_ALGORITHM.to_string(),
        }
    }

    fn sign(&self, private: &PrivateKey, message: &[u8]) -> Signature {
        let public = Self::public_of(&private.0);
        Signature(sha256(&[b"toy-sig", &public, message]).to_vec())
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        sha256(&[b"toy-sig", &public.0, message]).as_slice() == signature.0.as_slice()
    }

    fn encrypt_to(&self, recipient: &PublicKey, plaintext: &[u8], entropy: &[u8]) -> Vec<u8> {
        let nonce = Self::tag(&[b"toy-nonce", entropy, plaintext]);
        let tag = Self::tag(&[b"toy-tag", &recipient.0, &nonce, plaintext]);
        let mut body = plaintext.to_vec();
        Self::keystream_xor(&[recipient.0.as_slice(), &nonce].concat(), &mut body);
        let mut out = Vec::with_capacity(32 + body.len());
        out.extend_from_slice(&tag);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        out
    }

    fn decrypt_with(&self, recipient: &PrivateKey, blob: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if blob.len() < 32 {
            return Err(CryptoError::ConfidentialityFailure);
        }
        let public = Self::public_of(&recipient.0);
        let (tag, rest) = blob.split_at(16);
        let (nonce, body) = rest.split_at(16);
        let mut plain = body.to_vec();
        Self::keystream_xor(&[public.as_slice(), nonce].concat(), &mut plain);
        if Self::tag(&[b"toy-tag", &public, nonce, &plain]) != tag {
            return Err(CryptoError::ConfidentialityFailure);
        }
        Ok(plain)
    }

    fn session_encrypt(&self, key: &SessionKey, nonce: u64, plaintext: &[u8]) -> Vec<u8> {
        let seed = [key.key.as_slice(), &nonce.to_be_bytes()].concat();
        let mut body = plaintext.to_vec();
        Self::keystream_xor(&seed, &mut body);
        let tag = Self::tag(&[b"toy-session", &seed, plaintext]);
        let mut out = tag.to_vec();
        out.extend_from_slice(&body);
        out
    }

    fn session_decrypt(
        &self,
        key: &SessionKey,
        nonce: u64,
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < 16 {
            return Err(CryptoError::ConfidentialityFailure);
        }
        let seed = [key.key.as_slice(), &nonce.to_be_bytes()].concat();
        let (tag, body) = ciphertext.split_at(16);
        let mut plain = body.to_vec();
        Self::keystream_xor(&seed, &mut plain);
        if Self::tag(&[b"toy-session", &seed, &plain]) != tag {
            return Err(CryptoError::ConfidentialityFailure);
        }
        Ok(plain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schemes() -> Vec<SharedEnvelope> {
        vec![Arc::new(StandardScheme), Arc::new(ToyScheme)]
    }

    #[test]
    fn keypair_generation_is_deterministic() {
        for env in schemes() {
            let a = env.generate_keypair(1);
            let b = env.generate_keypair(1);
            let c = env.generate_keypair(2);
            assert_eq!(a, b);
            assert_ne!(a.public_key, c.public_key);
            let sig = env.sign(&a.private_key, b"x");
            assert!(env.verify(&a.public_key, b"x", &sig));
        }
    }

    #[test]
    fn digest_is_order_sensitive() {
        for env in schemes() {
            let keys = env.generate_keypair(7);
            let fields: [&[u8]; 3] = [b"10.0.0.1", b"4000", b"UDP"];
            let sig = sign_digest(env.as_ref(), &keys.private_key, &fields);
            assert!(verify_digest(env.as_ref(), &keys.public_key, &fields, &sig));
            let swapped: [&[u8]; 3] = [b"4000", b"10.0.0.1", b"UDP"];
            assert!(!verify_digest(env.as_ref(), &keys.public_key, &swapped, &sig));
        }
    }

    #[test]
    fn every_single_bit_flip_breaks_the_digest() {
        for env in schemes() {
            let keys = env.generate_keypair(9);
            let fields: Vec<Vec<u8>> = vec![b"192.168.1.7".to_vec(), b"5555".to_vec(), b"TCP".to_vec()];
            let sig = sign_digest(env.as_ref(), &keys.private_key, &fields);
            for f in 0..fields.len() {
                for byte in 0..fields[f].len() {
                    for bit in 0..8 {
                        let mut mutated = fields.clone();
                        mutated[f][byte] ^= 1 << bit;
                        assert!(!verify_digest(env.as_ref(), &keys.public_key, &mutated, &sig));
                    }
                }
            }
            for byte in 0..sig.0.len() {
                for bit in 0..8 {
                    let mut bad = sig.clone();
                    bad.0[byte] ^= 1 << bit;
                    assert!(!verify_digest(env.as_ref(), &keys.public_key, &fields, &bad));
                }
            }
        }
    }

    #[test]
    fn session_key_sealing_enumerates_all_key_pairs() {
        for env in schemes() {
            let keys: Vec<KeyPair> = (1..=3).map(|s| env.generate_keypair(s)).collect();
            let session = SessionKey {
                key: vec![42; 32],
                established_at: 17,
            };
            for (s, sender) in keys.iter().enumerate() {
                for (r, recipient) in keys.iter().enumerate() {
                    if s == r {
                        continue;
                    }
                    let sealed =
                        seal_session_key(env.as_ref(), &sender.private_key, &recipient.public_key, &session);
                    for (o, opener) in keys.iter().enumerate() {
                        for (c, claimed) in keys.iter().enumerate() {
                            let got = open_session_key(env.as_ref(), opener, &claimed.public_key, &sealed);
                            match (o == r, c == s) {
                                (true, true) => assert_eq!(got.unwrap(), session),
                                (false, _) => {
                                    assert_eq!(got.unwrap_err(), CryptoError::ConfidentialityFailure)
                                }
                                (true, false) => {
                                    assert_eq!(got.unwrap_err(), CryptoError::AuthenticityFailure)
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sealed_blob_mutations_are_detected() {
        for env in schemes() {
            let a = env.generate_keypair(11);
            let b = env.generate_keypair(12);
            let sealed = seal(env.as_ref(), &a.private_key, &b.public_key, b"hello mirror");
            for i in 0..sealed.len() {
                let mut bad = sealed.clone();
                bad[i] ^= 0x01;
                assert!(open(env.as_ref(), &b, &a.public_key, &bad).is_err(), "byte {i}");
            }
        }
    }

    #[test]
    fn session_traffic_round_trips() {
        for env in schemes() {
            let key = SessionKey {
                key: vec![3; 32],
                established_at: 0,
            };
            let ct = env.session_encrypt(&key, 5, b"profile delta");
            assert_ne!(&ct[..], b"profile delta");
            assert_eq!(env.session_decrypt(&key, 5, &ct).unwrap(), b"profile delta");
            assert!(env.session_decrypt(&key, 6, &ct).is_err());
        }
    }

    #[test]
    fn certificate_encoding_round_trips() {
        let cert = Certificate {
            username: "alice".into(),
            public_key: PublicKey(vec![1, 2, 3]),
            issuer: "ca".into(),
            signature: Signature(vec![9; 8]),
        };
        assert_eq!(Certificate::decode(&cert.encode()).unwrap(), cert);
    }

    proptest::proptest! {
        #[test]
        fn seal_open_round_trips(payload in proptest::collection::vec(proptest::num::u8::ANY, 0..2048), seed in 0u64..1000) {
            for env in schemes() {
                let a = env.generate_keypair(seed);
                let b = env.generate_keypair(seed + 1);
                let sealed = seal(env.as_ref(), &a.private_key, &b.public_key, &payload);
                proptest::prop_assert_eq!(open(env.as_ref(), &b, &a.public_key, &sealed).unwrap(), payload.clone());
            }
        }
    }
}
