//! Relay server.
//!
//! A peer that cannot accept inbound connections registers a serving slot
//! here. Registration is a challenge/response: the relay seals a fresh
//! timestamp to the peer's certified key, and the peer returns it sealed
//! under its own signature. Clients attach to a slot by username and the
//! relay then forwards frames verbatim between the two ends. Frames are
//! already encrypted with the peers' session key, so the relay never holds
//! application plaintext.
//!
//! Wire format: every frame is a 4-byte big-endian length followed by the
//! body. The first body byte is a tag:
//!
//! | tag | message         | rest of body                            |
//! |-----|-----------------|-----------------------------------------|
//! | 1   | REGISTER        | fields(certificate, sealed response)    |
//! | 2   | SERVER_IS_ALIVE | slot id (u64)                           |
//! | 3   | ATTACH          | target username                         |
//! | 4   | DATA            | connection id (u64), opaque payload     |

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddrV4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    decode_fields, encode_fields, seal, unseal, verify_sealed, Certificate, KeyPair, PublicKey,
    SharedEnvelope,
};
use crate::rendezvous::{RendezvousError, RendezvousServer};
use crate::Millis;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayConfig {
    pub rendezvous: SocketAddrV4,
    pub port: u16,
    pub max_connections: u32,
    pub ping_interval_ms: Millis,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RelayError {
    #[error("all serving slots are taken")]
    CapacityExhausted,
    #[error("challenge response does not authenticate the peer")]
    AuthFailure,
    #[error("challenge response was already used or is stale")]
    ReplayDetected,
    #[error("no such serving slot")]
    UnknownSlot,
    #[error("the paired endpoint is gone")]
    PairBroken,
    #[error("malformed frame")]
    MalformedFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Client,
    Server,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingSlot {
    pub username: String,
    pub certificate: Certificate,
    pub registered_at: Millis,
    pub last_alive: Millis,
    pub pending_clients: VecDeque<ConnId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Pair {
    client: String,
    slot: SlotId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct InFlight {
    conn: ConnId,
    to: Side,
    #[serde(with = "crate::crypto::hex_bytes")]
    frame: Vec<u8>,
}

#[derive(Debug)]
pub struct RelayServer {
    pub addr: SocketAddrV4,
    pub config: RelayConfig,
    env: SharedEnvelope,
    keys: KeyPair,
    ca_public: PublicKey,
    slots: BTreeMap<SlotId, ServingSlot>,
    outstanding: BTreeMap<String, Millis>,
    used: BTreeSet<Millis>,
    last_stamp: Option<Millis>,
    pairs: BTreeMap<ConnId, Pair>,
    in_flight: VecDeque<InFlight>,
    next_slot: u64,
    next_conn: u64,
    pub bytes_forwarded: u64,
}

impl RelayServer {
    pub fn new(
        env: SharedEnvelope,
        addr: SocketAddrV4,
        config: RelayConfig,
        ca_public: PublicKey,
        seed: u64,
    ) -> Self {
        assert!(config.ping_interval_ms > 0, "ping interval must be positive");
        let keys = env.generate_keypair(seed);
        RelayServer {
            addr,
            config,
            env,
            keys,
            ca_public,
            slots: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            used: BTreeSet::new(),
            last_stamp: None,
            pairs: BTreeMap::new(),
            in_flight: VecDeque::new(),
            next_slot: 1,
            next_conn: 1,
            bytes_forwarded: 0,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public_key
    }

    pub fn grace_ms(&self) -> Millis {
        2 * self.config.ping_interval_ms
    }

    pub fn load(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn capacity(&self) -> u32 {
        self.config.max_connections
    }

    /// Registers with the rendezvous directory.
    pub fn announce(&self, rendezvous: &mut RendezvousServer, now: Millis) -> Millis {
        rendezvous.register_relay(self.addr, self.capacity(), now)
    }

    /// Reports the live slot count to the rendezvous directory.
    pub fn heartbeat(&self, rendezvous: &mut RendezvousServer, now: Millis) -> Result<(), RendezvousError> {
        rendezvous.relay_heartbeat(self.addr, self.load(), self.capacity(), now)
    }

    /// Issues a challenge: a fresh timestamp sealed to the certificate key.
    pub fn challenge(&mut self, cert: &Certificate, now: Millis) -> Result<Vec<u8>, RelayError> {
        if !cert.verify(self.env.as_ref(), &self.ca_public) {
            return Err(RelayError::AuthFailure);
        }
        let stamp = match self.last_stamp {
            Some(last) if last >= now => last + 1,
            _ => now,
        };
        self.last_stamp = Some(stamp);
        self.outstanding.insert(cert.username.clone(), stamp);
        Ok(seal(
            self.env.as_ref(),
            &self.keys.private_key,
            &cert.public_key,
            &stamp.to_be_bytes(),
        ))
    }

    /// Completes registration with the peer's sealed echo of the challenge.
    pub fn accept_server_peer(
        &mut self,
        cert: &Certificate,
        response: &[u8],
        now: Millis,
    ) -> Result<(SlotId, Millis), RelayError> {
        if !cert.verify(self.env.as_ref(), &self.ca_public) {
            return Err(RelayError::AuthFailure);
        }
        let (signature, body) =
            unseal(self.env.as_ref(), &self.keys.private_key, response).map_err(|_| RelayError::AuthFailure)?;
        if !verify_sealed(self.env.as_ref(), &cert.public_key, &self.keys.public_key, &signature, &body) {
            return Err(RelayError::AuthFailure);
        }
        let stamp = Millis::from_be_bytes(body.try_into().map_err(|_| RelayError::AuthFailure)?);
        if self.used.contains(&stamp) || now.saturating_sub(stamp) > self.grace_ms() {
            return Err(RelayError::ReplayDetected);
        }
        if self.outstanding.get(&cert.username) != Some(&stamp) {
            return Err(RelayError::AuthFailure);
        }
        if self.load() >= self.config.max_connections {
            return Err(RelayError::CapacityExhausted);
        }
        self.used.insert(stamp);
        self.outstanding.remove(&cert.username);
        let id = SlotId(self.next_slot);
        self.next_slot += 1;
        self.slots.insert(
            id,
            ServingSlot {
                username: cert.username.clone(),
                certificate: cert.clone(),
                registered_at: now,
                last_alive: now,
                pending_clients: VecDeque::new(),
            },
        );
        Ok((id, self.config.ping_interval_ms))
    }

    pub fn keep_alive(&mut self, slot: SlotId, now: Millis) -> Result<(), RelayError> {
        let s = self.slots.get_mut(&slot).ok_or(RelayError::UnknownSlot)?;
        s.last_alive = now;
        Ok(())
    }

    /// Removes slots silent for longer than the grace period and breaks
    /// their pairs.
    pub fn expire_slots(&mut self, now: Millis) -> usize {
        let grace = self.grace_ms();
        let before = self.slots.len();
        self.slots.retain(|_, s| now.saturating_sub(s.last_alive) <= grace);
        let slots = &self.slots;
        self.pairs.retain(|_, p| slots.contains_key(&p.slot));
        before - self.slots.len()
    }

    /// Drops a slot at the serving peer's request.
    pub fn release(&mut self, slot: SlotId) {
        self.slots.remove(&slot);
        self.pairs.retain(|_, p| p.slot != slot);
    }

    pub fn slot_of(&self, username: &str) -> Option<SlotId> {
        self.slots
            .iter()
            .filter(|(_, s)| s.username == username)
            .max_by_key(|(id, s)| (s.registered_at, **id))
            .map(|(id, _)| *id)
    }

    pub fn has_slot(&self, slot: SlotId) -> bool {
        self.slots.contains_key(&slot)
    }

    /// Pairs a client with the most recent slot of `server_username`.
    pub fn attach(&mut self, client: &str, server_username: &str) -> Result<ConnId, RelayError> {
        let slot = self.slot_of(server_username).ok_or(RelayError::UnknownSlot)?;
        let conn = ConnId(self.next_conn);
        self.next_conn += 1;
        self.pairs.insert(
            conn,
            Pair {
                client: client.to_string(),
                slot,
            },
        );
        if let Some(s) = self.slots.get_mut(&slot) {
            s.pending_clients.push_back(conn);
        }
        Ok(conn)
    }

    pub fn detach(&mut self, conn: ConnId) {
        if let Some(pair) = self.pairs.remove(&conn) {
            if let Some(s) = self.slots.get_mut(&pair.slot) {
                s.pending_clients.retain(|c| *c != conn);
            }
        }
        self.in_flight.retain(|f| f.conn != conn);
    }

    /// Queues `frame` for the other end of `conn`, unchanged.
    pub fn forward(&mut self, conn: ConnId, from: Side, frame: Vec<u8>) -> Result<(), RelayError> {
        let pair = self.pairs.get(&conn).ok_or(RelayError::PairBroken)?;
        if !self.slots.contains_key(&pair.slot) {
            self.pairs.remove(&conn);
            return Err(RelayError::PairBroken);
        }
        let to = match from {
            Side::Client => Side::Server,
            Side::Server => Side::Client,
        };
        self.bytes_forwarded += frame.len() as u64;
        self.in_flight.push_back(InFlight { conn, to, frame });
        Ok(())
    }

    /// Hands every queued frame for `(conn, side)` to that endpoint.
    pub fn deliver(&mut self, conn: ConnId, side: Side) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        self.in_flight.retain(|f| {
            if f.conn == conn && f.to == side {
                out.push(f.frame.clone());
                false
            } else {
                true
            }
        });
        out
    }

    /// Serialised view of everything the relay holds, including frames in
    /// transit. Used by audits that search for leaked plaintext.
    pub fn state_dump(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Dump<'a> {
            addr: SocketAddrV4,
            slots: &'a BTreeMap<SlotId, ServingSlot>,
            pairs: &'a BTreeMap<ConnId, Pair>,
            in_flight: &'a VecDeque<InFlight>,
            outstanding: &'a BTreeMap<String, Millis>,
        }
        let mut bytes = serde_json::to_vec(&Dump {
            addr: self.addr,
            slots: &self.slots,
            pairs: &self.pairs,
            in_flight: &self.in_flight,
            outstanding: &self.outstanding,
        })
        .expect("relay state serialises");
        // Raw frame bytes too, so a search does not depend on hex encoding.
        for f in &self.in_flight {
            bytes.extend_from_slice(&f.frame);
        }
        bytes
    }
}

/// Peer side of the challenge: open the sealed timestamp and return it
/// sealed to the relay.
pub fn answer_challenge(
    env: &SharedEnvelope,
    keys: &KeyPair,
    relay_public: &PublicKey,
    challenge: &[u8],
) -> Result<Vec<u8>, RelayError> {
    let stamp = crate::crypto::open(env.as_ref(), keys, relay_public, challenge)
        .map_err(|_| RelayError::AuthFailure)?;
    Ok(seal(env.as_ref(), &keys.private_key, relay_public, &stamp))
}

/// Control and data messages exchanged with a relay.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Register { certificate: Certificate, response: Vec<u8> },
    ServerIsAlive { slot: SlotId },
    Attach { target: String },
    Data { conn: ConnId, payload: Vec<u8> },
}

pub const TAG_REGISTER: u8 = 1;
pub const TAG_SERVER_IS_ALIVE: u8 = 2;
pub const TAG_ATTACH: u8 = 3;
pub const TAG_DATA: u8 = 4;

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Frame::Register { certificate, response } => {
                body.push(TAG_REGISTER);
                body.extend(encode_fields(&[certificate.encode(), response.clone()]));
            }
            Frame::ServerIsAlive { slot } => {
                body.push(TAG_SERVER_IS_ALIVE);
                body.extend(slot.0.to_be_bytes());
            }
            Frame::Attach { target } => {
                body.push(TAG_ATTACH);
                body.extend(target.as_bytes());
            }
            Frame::Data { conn, payload } => {
                body.push(TAG_DATA);
                body.extend(conn.0.to_be_bytes());
                body.extend(payload);
            }
        }
        let mut out = (body.len() as u32).to_be_bytes().to_vec();
        out.extend(body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, RelayError> {
        let bad = || RelayError::MalformedFrame;
        if bytes.len() < 5 {
            return Err(bad());
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[4..];
        if body.len() != len {
            return Err(bad());
        }
        let rest = &body[1..];
        let u64_at = |b: &[u8]| -> Result<u64, RelayError> {
            Ok(u64::from_be_bytes(b.get(..8).ok_or_else(bad)?.try_into().unwrap()))
        };
        match body[0] {
            TAG_REGISTER => {
                let [cert, response]: [Vec<u8>; 2] = decode_fields(rest)
                    .map_err(|_| bad())?
                    .try_into()
                    .map_err(|_| bad())?;
                Ok(Frame::Register {
                    certificate: Certificate::decode(&cert).map_err(|_| bad())?,
                    response,
                })
            }
            TAG_SERVER_IS_ALIVE if rest.len() == 8 => Ok(Frame::ServerIsAlive {
                slot: SlotId(u64_at(rest)?),
            }),
            TAG_ATTACH => Ok(Frame::Attach {
                target: String::from_utf8(rest.to_vec()).map_err(|_| bad())?,
            }),
            TAG_DATA => Ok(Frame::Data {
                conn: ConnId(u64_at(rest)?),
                payload: rest[8..].to_vec(),
            }),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ca::{obtain_certificate, CaServer};
    use crate::crypto::ToyScheme;
    use std::net::Ipv4Addr;
    use std::sync::Arc;

    fn setup(capacity: u32) -> (SharedEnvelope, CaServer, RelayServer) {
        let env: SharedEnvelope = Arc::new(ToyScheme);
        let ca = CaServer::new(env.clone(), "ca", 1);
        let relay = RelayServer::new(
            env.clone(),
            SocketAddrV4::new(Ipv4Addr::new(100, 9, 0, 1), 9000),
            RelayConfig {
                rendezvous: SocketAddrV4::new(Ipv4Addr::new(100, 0, 0, 1), 7000),
                port: 9000,
                max_connections: capacity,
                ping_interval_ms: 1_000,
            },
            ca.public_key().clone(),
            5,
        );
        (env, ca, relay)
    }

    fn user(env: &SharedEnvelope, ca: &mut CaServer, name: &str, seed: u64) -> (KeyPair, Certificate) {
        let keys = env.generate_keypair(seed);
        let cert = obtain_certificate(ca, env, &keys, name).unwrap();
        (keys, cert)
    }

    fn register(env: &SharedEnvelope, relay: &mut RelayServer, keys: &KeyPair, cert: &Certificate, now: Millis) -> Result<SlotId, RelayError> {
        let ch = relay.challenge(cert, now)?;
        let resp = answer_challenge(env, keys, &relay.public_key().clone(), &ch)?;
        relay.accept_server_peer(cert, &resp, now).map(|(s, _)| s)
    }

    #[test]
    fn capacity_is_enforced() {
        let (env, mut ca, mut relay) = setup(20);
        for i in 0..20 {
            let (k, c) = user(&env, &mut ca, &format!("u{i}"), i);
            register(&env, &mut relay, &k, &c, 0).unwrap();
        }
        let (k, c) = user(&env, &mut ca, "u20", 20);
        assert_eq!(register(&env, &mut relay, &k, &c, 0), Err(RelayError::CapacityExhausted));
        assert_eq!(relay.load(), 20);
    }

    #[test]
    fn replayed_response_is_detected() {
        let (env, mut ca, mut relay) = setup(5);
        let (k, c) = user(&env, &mut ca, "alice", 1);
        let ch = relay.challenge(&c, 0).unwrap();
        let resp = answer_challenge(&env, &k, &relay.public_key().clone(), &ch).unwrap();
        relay.accept_server_peer(&c, &resp, 0).unwrap();
        assert_eq!(relay.accept_server_peer(&c, &resp, 10), Err(RelayError::ReplayDetected));
    }

    #[test]
    fn wrong_key_fails_auth() {
        let (env, mut ca, mut relay) = setup(5);
        let (_, c) = user(&env, &mut ca, "alice", 1);
        let (mk, _) = user(&env, &mut ca, "mallory", 2);
        let ch = relay.challenge(&c, 0).unwrap();
        assert_eq!(
            answer_challenge(&env, &mk, &relay.public_key().clone(), &ch),
            Err(RelayError::AuthFailure)
        );
        // Mallory signs a guessed stamp herself.
        let forged = seal(env.as_ref(), &mk.private_key, relay.public_key(), &0u64.to_be_bytes());
        assert_eq!(relay.accept_server_peer(&c, &forged, 0), Err(RelayError::AuthFailure));
    }

    #[test]
    fn slots_expire_after_grace() {
        let (env, mut ca, mut relay) = setup(5);
        let (k, c) = user(&env, &mut ca, "alice", 1);
        let slot = register(&env, &mut relay, &k, &c, 0).unwrap();
        for t in (1_000..=10_000).step_by(1_000) {
            relay.keep_alive(slot, t).unwrap();
            assert_eq!(relay.expire_slots(t), 0);
        }
        assert_eq!(relay.expire_slots(10_000 + 2_000), 0);
        assert_eq!(relay.expire_slots(10_000 + 2_001), 1);
        assert_eq!(relay.keep_alive(slot, 12_002), Err(RelayError::UnknownSlot));
    }

    #[test]
    fn frames_pass_verbatim_until_pair_breaks() {
        let (env, mut ca, mut relay) = setup(5);
        let (k, c) = user(&env, &mut ca, "alice", 1);
        register(&env, &mut relay, &k, &c, 0).unwrap();
        let conn = relay.attach("bob", "alice").unwrap();
        relay.forward(conn, Side::Client, vec![1, 2, 3]).unwrap();
        assert_eq!(relay.deliver(conn, Side::Server), vec![vec![1, 2, 3]]);
        relay.forward(conn, Side::Server, vec![9]).unwrap();
        assert_eq!(relay.deliver(conn, Side::Client), vec![vec![9]]);
        relay.expire_slots(10_000);
        assert_eq!(relay.forward(conn, Side::Client, vec![4]), Err(RelayError::PairBroken));
    }

    #[test]
    fn frame_codec_round_trips() {
        let (env, mut ca, _) = setup(1);
        let (_, cert) = user(&env, &mut ca, "alice", 1);
        let frames = vec![
            Frame::Register { certificate: cert, response: vec![7; 40] },
            Frame::ServerIsAlive { slot: SlotId(3) },
            Frame::Attach { target: "alice".into() },
            Frame::Data { conn: ConnId(9), payload: b"opaque".to_vec() },
        ];
        for f in frames {
            let bytes = f.encode();
            assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
            assert_eq!(Frame::decode(&bytes).unwrap(), f);
        }
        assert_eq!(Frame::decode(&[0, 0, 0, 1, 99]), Err(RelayError::MalformedFrame));
    }

    #[test]
    fn heartbeat_reports_live_slot_count() {
        let (env, mut ca, mut relay) = setup(5);
        let mut rdv = RendezvousServer::new(
            env.clone(),
            "rdv",
            relay.config.rendezvous,
            ca.public_key().clone(),
            Default::default(),
            9,
        );
        relay.announce(&mut rdv, 0);
        let (k, c) = user(&env, &mut ca, "alice", 1);
        register(&env, &mut relay, &k, &c, 0).unwrap();
        relay.heartbeat(&mut rdv, 1).unwrap();
        assert_eq!(rdv.relays().next().unwrap().load, 1);
    }
}
