//! Private messages.
//!
//! A message body is sealed with the sender's private key to the recipient's
//! public key. The blob sits in the sender's outbox, which is replicated to
//! mirrors like the rest of the profile; only the recipient can open it.

use serde::{Deserialize, Serialize};

use super::engine::Device;
use super::{EntryId, ReplicationError};
use crate::crypto::{open, seal, CryptoError, Envelope, KeyPair, PublicKey};
use crate::Millis;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedMessage {
    pub id: EntryId,
    pub from: String,
    pub to: String,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub blob: Vec<u8>,
}

/// Seals `body` for `to` and stores it in the sender's outbox.
pub fn seal_private_message(
    env: &dyn Envelope,
    sender: &mut Device,
    keys: &KeyPair,
    to: &str,
    recipient_key: &PublicKey,
    body: &[u8],
    now: Millis,
) -> Result<SealedMessage, ReplicationError> {
    if !sender.own.image.zones.is_active(to) {
        return Err(ReplicationError::NotFriend);
    }
    let id = sender
        .own
        .image
        .outbox
        .last()
        .map_or(now, |m| now.max(m.id + 1));
    let msg = SealedMessage {
        id,
        from: sender.user.clone(),
        to: to.to_string(),
        blob: seal(env, &keys.private_key, recipient_key, body),
    };
    sender.own.image.outbox.push(msg.clone());
    Ok(msg)
}

/// Opens a message with the reader's keys, checking it came from `sender_key`.
pub fn open_private_message(
    env: &dyn Envelope,
    reader: &KeyPair,
    sender_key: &PublicKey,
    msg: &SealedMessage,
) -> Result<Vec<u8>, CryptoError> {
    open(env, reader, sender_key, &msg.blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::StandardScheme;
    use crate::replication::engine::sync_with_replicas;
    use crate::replication::zones::FriendStatus;

    #[test]
    fn only_recipient_reads_and_mirror_cannot() {
        let env = StandardScheme;
        let ka = env.generate_keypair(1);
        let kb = env.generate_keypair(2);
        let km = env.generate_keypair(3);
        let mut a = Device::new("a", 0);
        let mut b = Device::new("b", 0);
        let mut m = Device::new("m", 0);
        a.own.image.zones.set_friend("b", FriendStatus::Active);
        a.own.image.zones.set_friend("m", FriendStatus::Active);
        b.own.image.zones.set_friend("a", FriendStatus::Active);
        m.host_mirror("a", 1, 1 << 20);
        seal_private_message(&env, &mut a, &ka, "b", &kb.public_key, b"meet at noon", 5).unwrap();
        sync_with_replicas(&mut a, &mut [(&mut m, true)], 6);
        // b pulls from the mirror and receives the blob.
        b.pull_updates(&m, "a", 7, true).unwrap();
        let msg = b.inbox[0].clone();
        assert_eq!(open_private_message(&env, &kb, &ka.public_key, &msg).unwrap(), b"meet at noon");
        let at_mirror = &m.mirrored["a"].image.outbox[0];
        assert_eq!(
            open_private_message(&env, &km, &ka.public_key, at_mirror),
            Err(CryptoError::ConfidentialityFailure)
        );
        let mut bad = msg.clone();
        let n = bad.blob.len();
        bad.blob[n - 1] ^= 1;
        assert!(open_private_message(&env, &kb, &ka.public_key, &bad).is_err());
    }

    #[test]
    fn blob_replaced_by_mirror_fails_authenticity() {
        // A mirror holding the outbox can re-seal a body of its choosing to
        // the recipient, but not under the sender's key.
        for env in [
            Box::new(StandardScheme) as Box<dyn Envelope>,
            Box::new(crate::crypto::ToyScheme),
        ] {
            let ka = env.generate_keypair(1);
            let kb = env.generate_keypair(2);
            let km = env.generate_keypair(3);
            let mut a = Device::new("a", 0);
            a.own.image.zones.set_friend("b", FriendStatus::Active);
            let mut msg = seal_private_message(env.as_ref(), &mut a, &ka, "b", &kb.public_key, b"hello", 1).unwrap();
            msg.blob = seal(env.as_ref(), &km.private_key, &kb.public_key, b"send money");
            assert_eq!(
                open_private_message(env.as_ref(), &kb, &ka.public_key, &msg),
                Err(CryptoError::AuthenticityFailure)
            );
        }
    }

    #[test]
    fn non_friend_is_refused() {
        let env = StandardScheme;
        let ka = env.generate_keypair(1);
        let kz = env.generate_keypair(9);
        let mut a = Device::new("a", 0);
        assert_eq!(
            seal_private_message(&env, &mut a, &ka, "z", &kz.public_key, b"x", 1),
            Err(ReplicationError::NotFriend)
        );
    }
}
