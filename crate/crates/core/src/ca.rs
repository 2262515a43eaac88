//! Certificate authority.
//!
//! A request is the field list `username ‖ public_key`, sealed by the
//! requester's private key to the CA's public key. The reply is the encoded
//! certificate sealed by the CA to the requester, so both directions are
//! confidential and authenticated.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{
    decode_fields, encode_fields, open, seal, unseal, verify_sealed, Certificate, CryptoError,
    KeyPair, PublicKey, SharedEnvelope,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CaError {
    #[error("username is already taken")]
    DuplicateUsername,
    #[error("request could not be opened or verified")]
    MalformedRequest,
    #[error("reply could not be opened: {0}")]
    BadReply(CryptoError),
}

/// Lookup of issued certificates by username.
pub trait CertificateDirectory {
    fn certificate(&self, username: &str) -> Option<&Certificate>;

    fn has_certificate(&self, username: &str) -> bool {
        self.certificate(username).is_some()
    }
}

#[derive(Debug)]
pub struct CaServer {
    pub name: String,
    env: SharedEnvelope,
    keys: KeyPair,
    issued: BTreeMap<String, Certificate>,
}

impl CaServer {
    pub fn new(env: SharedEnvelope, name: &str, seed: u64) -> Self {
        let keys = env.generate_keypair(seed);
        CaServer {
            name: name.to_string(),
            env,
            keys,
            issued: BTreeMap::new(),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public_key
    }

    pub fn issued_count(&self) -> usize {
        self.issued.len()
    }

    pub fn issue_certificate(&mut self, sealed_request: &[u8]) -> Result<Vec<u8>, CaError> {
        let env = self.env.as_ref();
        let (signature, plaintext) =
            unseal(env, &self.keys.private_key, sealed_request).map_err(|_| CaError::MalformedRequest)?;
        let fields = decode_fields(&plaintext).map_err(|_| CaError::MalformedRequest)?;
        let [username, public_key]: [Vec<u8>; 2] =
            fields.try_into().map_err(|_| CaError::MalformedRequest)?;
        let username = String::from_utf8(username).map_err(|_| CaError::MalformedRequest)?;
        let public_key = PublicKey(public_key);
        if username.is_empty()
            || !verify_sealed(env, &public_key, &self.keys.public_key, &signature, &plaintext)
        {
            return Err(CaError::MalformedRequest);
        }
        if self.issued.contains_key(&username) {
            return Err(CaError::DuplicateUsername);
        }
        let signature = env.sign(
            &self.keys.private_key,
            &Certificate::signed_bytes(&username, &public_key),
        );
        let cert = Certificate {
            username: username.clone(),
            public_key: public_key.clone(),
            issuer: self.name.clone(),
            signature,
        };
        self.issued.insert(username, cert.clone());
        Ok(seal(env, &self.keys.private_key, &public_key, &cert.encode()))
    }
}

impl CertificateDirectory for CaServer {
    fn certificate(&self, username: &str) -> Option<&Certificate> {
        self.issued.get(username)
    }
}

/// Builds a sealed certificate request.
pub fn certificate_request(
    env: &SharedEnvelope,
    keys: &KeyPair,
    username: &str,
    ca_public: &PublicKey,
) -> Vec<u8> {
    let body = encode_fields(&[username.as_bytes(), &keys.public_key.0]);
    seal(env.as_ref(), &keys.private_key, ca_public, &body)
}

pub fn open_certificate_reply(
    env: &SharedEnvelope,
    keys: &KeyPair,
    ca_public: &PublicKey,
    reply: &[u8],
) -> Result<Certificate, CaError> {
    let bytes = open(env.as_ref(), keys, ca_public, reply).map_err(CaError::BadReply)?;
    Certificate::decode(&bytes).map_err(CaError::BadReply)
}

/// Runs the full request/reply exchange against an in-process CA.
pub fn obtain_certificate(
    ca: &mut CaServer,
    env: &SharedEnvelope,
    keys: &KeyPair,
    username: &str,
) -> Result<Certificate, CaError> {
    let ca_public = ca.public_key().clone();
    let request = certificate_request(env, keys, username, &ca_public);
    let reply = ca.issue_certificate(&request)?;
    open_certificate_reply(env, keys, &ca_public, &reply)
}
