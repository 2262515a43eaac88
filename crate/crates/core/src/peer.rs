//! Peers of the single-server deployment.
//!
//! An [`Overlay`] holds the service layer (CA, dual-homed STUN, a rendezvous
//! server with backups, relays), the simulated network and every peer. A
//! peer owns up to three devices. Each device classifies its NAT, takes a
//! relay slot when some initiators could not reach it even after hole
//! punching, and registers a signed record. Friends exchange passphrase
//! tokens through the rendezvous mailbox and locate each other by trying
//! device priorities 0 to 2 and then the owner's mirrors by rank.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ca::{obtain_certificate, CaError, CaServer, CertificateDirectory};
use crate::chord::complaint::Notification;
use crate::crypto::{
    envelope_by_name, open, open_session_key, seal, seal_session_key, Certificate, CryptoError,
    KeyPair, SessionKey, SharedEnvelope, Signature,
};
use crate::netsim::{can_reach, EndpointId, NatProfile, NatType, Network, Reachability, StunServer};
use crate::relay::{answer_challenge, ConnId, RelayConfig, RelayError, RelayServer, Side, SlotId};
use crate::rendezvous::{
    verify_mirror_list, FriendshipRequest, MirrorRef, NatKind, Protocol, RegistrationRecord,
    RendezvousConfig, RendezvousError, RendezvousServer, StoredRecord, Token, MAX_DEVICE_PRIORITY,
};
use crate::replication::engine::{sync_with_replicas, SyncReport};
use crate::replication::{Device, EntryId, FriendStatus, SessionError};
use crate::ring_id::RingId;
use crate::{Millis, SECOND};

pub const MAX_DEVICES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PeerError {
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("{0} has no device with priority {1}")]
    UnknownDevice(String, u8),
    #[error("username {0} is taken")]
    DuplicatePeer(String),
    #[error("a peer needs between 1 and 3 devices")]
    DeviceCount,
    #[error("peer has no certificate yet")]
    NoCertificate,
    #[error("device has not classified its NAT")]
    NotBootstrapped,
    #[error("device is offline")]
    DeviceOffline,
    #[error("STUN server unreachable")]
    StunUnreachable,
    #[error("rendezvous server is down")]
    RendezvousDown,
    #[error("certificate authority: {0}")]
    Ca(#[from] CaError),
    #[error("rendezvous: {0}")]
    Rendezvous(#[from] RendezvousError),
    #[error("relay: {0}")]
    Relay(#[from] RelayError),
    #[error("{op} is not allowed from state {from:?}")]
    InvalidTransition {
        op: &'static str,
        from: Option<FriendshipState>,
    },
    #[error("{0} is not an active friend")]
    NotFriend(String),
    #[error("invalid mirror set")]
    InvalidMirrorSet,
    #[error("no device or mirror reachable after {attempts} attempts")]
    AllUnreachable { attempts: u32 },
    #[error("serving peer cannot be reached")]
    Unreachable,
    #[error("handshake failed")]
    AuthFailure,
    #[error("connection refused by a non-friend")]
    Refused,
    #[error("session: {0}")]
    Session(#[from] SessionError),
    #[error("unknown envelope scheme {0}")]
    UnknownScheme(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FriendshipState {
    PendingSent,
    PendingReceived,
    Active,
    Revoked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Friendship {
    pub state: FriendshipState,
    /// Token handed to the friend and listed in this peer's registrations.
    pub issued: Option<Token>,
    /// Token received from the friend, used to locate it.
    pub held: Option<Token>,
    pub established_at: Option<Millis>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorAssignment {
    pub username: String,
    pub rank: u32,
    pub capacity_bytes: u64,
}

/// Friends hosting this peer's profile, ranked from 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorSet {
    entries: Vec<MirrorAssignment>,
}

impl MirrorSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a mirror at the next rank.
    pub fn add(&mut self, username: &str, capacity_bytes: u64) -> Result<u32, PeerError> {
        if self.rank_of(username).is_some() {
            return Err(PeerError::InvalidMirrorSet);
        }
        let rank = self.entries.len() as u32 + 1;
        self.entries.push(MirrorAssignment {
            username: username.to_string(),
            rank,
            capacity_bytes,
        });
        Ok(rank)
    }

    /// Removes a mirror; lower-ranked mirrors move up.
    pub fn remove(&mut self, username: &str) -> bool {
        let before = self.entries.len();
        self.entries.retain(|m| m.username != username);
        for (i, m) in self.entries.iter_mut().enumerate() {
            m.rank = i as u32 + 1;
        }
        before != self.entries.len()
    }

    pub fn rank_of(&self, username: &str) -> Option<u32> {
        self.entries.iter().find(|m| m.username == username).map(|m| m.rank)
    }

    pub fn entries(&self) -> &[MirrorAssignment] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn refs(&self) -> Vec<MirrorRef> {
        self.entries
            .iter()
            .map(|m| MirrorRef {
                username: m.username.clone(),
                rank: m.rank,
            })
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        let names: BTreeSet<&str> = self.entries.iter().map(|m| m.username.as_str()).collect();
        names.len() == self.entries.len()
            && self.entries.iter().enumerate().all(|(i, m)| m.rank == i as u32 + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayLease {
    pub relay: usize,
    pub addr: SocketAddrV4,
    pub slot: SlotId,
}

#[derive(Clone, Debug)]
pub struct PeerDevice {
    pub priority: u8,
    pub endpoint: EndpointId,
    pub nat: Option<NatType>,
    pub relay: Option<RelayLease>,
    /// Last record accepted by the rendezvous server.
    pub record: Option<RegistrationRecord>,
    pub needs_registration: bool,
    pub data: Device,
}

#[derive(Clone, Debug)]
pub struct Peer {
    pub username: String,
    pub keys: KeyPair,
    pub certificate: Option<Certificate>,
    pub devices: BTreeMap<u8, PeerDevice>,
    pub friends: BTreeMap<String, Friendship>,
    pub mirrors: MirrorSet,
    /// Verified records from locate replies, by serving `(username, priority)`.
    pub located: BTreeMap<(String, u8), StoredRecord>,
    /// Verified mirror lists of friends.
    pub mirror_lists: BTreeMap<String, Vec<MirrorRef>>,
    /// Owner signatures over the cached mirror lists.
    pub mirror_digests: BTreeMap<String, Signature>,
    /// Signed reports of records that failed verification.
    pub notifications: Vec<Notification>,
}

impl Peer {
    pub fn device(&self, priority: u8) -> Result<&PeerDevice, PeerError> {
        self.devices
            .get(&priority)
            .ok_or_else(|| PeerError::UnknownDevice(self.username.clone(), priority))
    }

    pub fn device_mut(&mut self, priority: u8) -> Result<&mut PeerDevice, PeerError> {
        let name = self.username.clone();
        self.devices
            .get_mut(&priority)
            .ok_or(PeerError::UnknownDevice(name, priority))
    }

    pub fn friendship(&self, friend: &str) -> Option<FriendshipState> {
        self.friends.get(friend).map(|f| f.state)
    }

    pub fn is_active_friend(&self, friend: &str) -> bool {
        self.friendship(friend) == Some(FriendshipState::Active)
    }

    pub fn active_friends(&self) -> impl Iterator<Item = &str> {
        self.friends
            .iter()
            .filter(|(_, f)| f.state == FriendshipState::Active)
            .map(|(n, _)| n.as_str())
    }

    fn passphrases(&self) -> Vec<Token> {
        self.friends
            .values()
            .filter(|f| matches!(f.state, FriendshipState::PendingSent | FriendshipState::Active))
            .filter_map(|f| f.issued.clone())
            .collect()
    }

    fn set_zone_status(&mut self, friend: &str, status: FriendStatus) {
        for d in self.devices.values_mut() {
            d.data.own.image.zones.set_friend(friend, status);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    NoRelayAvailable,
    RegistrationFailed(String),
    /// A located record failed verification and was skipped.
    Detection { subject: String, priority: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayEvent {
    pub at: Millis,
    pub user: String,
    pub priority: u8,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Path {
    Direct,
    HolePunched,
    Relayed { relay: usize, conn: ConnId },
}

/// An authenticated, encrypted connection between two devices.
#[derive(Clone, Debug)]
pub struct SecureChannel {
    pub client: (String, u8),
    pub server: (String, u8),
    pub path: Path,
    key: SessionKey,
    nonce: u64,
}

impl SecureChannel {
    pub fn session_key(&self) -> &SessionKey {
        &self.key
    }
}

/// A completed update or posting session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub serving: String,
    pub priority: u8,
    pub device: u8,
    pub bytes: u64,
    pub elapsed_ms: Millis,
    pub detections: u32,
    /// Entry ids transmitted (updates) or delivered (posts).
    pub entries: Vec<EntryId>,
    pub relayed: bool,
}

/// Result of a successful locate.
#[derive(Clone, Debug)]
pub struct Located {
    /// Username of the serving identity: the friend itself or a mirror.
    pub serving: String,
    /// Locate priority that succeeded: 0 to 2 for devices, 3 and up for mirrors.
    pub priority: u8,
    /// Device priority of the serving device.
    pub device: u8,
    pub channel: SecureChannel,
    pub attempts: u32,
    pub detections: u32,
    pub elapsed_ms: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub seed: u64,
    pub scheme: String,
    pub rendezvous: RendezvousConfig,
    pub backups: usize,
    pub relays: usize,
    pub relay_capacity: u32,
    pub relay_ping_ms: Millis,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            seed: 1,
            scheme: "standard".into(),
            rendezvous: RendezvousConfig::default(),
            backups: 1,
            relays: 2,
            relay_capacity: 20,
            relay_ping_ms: 30 * SECOND,
        }
    }
}

/// Whether some initiator could not open a connection to a device behind
/// `nat`, even with the rendezvous server coordinating a hole punch.
pub fn inbound_needs_relay(nat: NatType) -> bool {
    let server = SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 1), 3478);
    let mut responder = NatProfile::new(
        nat,
        SocketAddrV4::new(Ipv4Addr::new(10, 255, 0, 1), 5000),
        Ipv4Addr::new(100, 255, 0, 1),
    );
    responder.send_to(server, 0);
    NatType::ALL.iter().any(|&kind| {
        let mut initiator = NatProfile::new(
            kind,
            SocketAddrV4::new(Ipv4Addr::new(10, 255, 0, 2), 5000),
            Ipv4Addr::new(100, 255, 0, 2),
        );
        initiator.send_to(server, 0);
        can_reach(&initiator, &responder, true, 0) == Reachability::RelayRequired
    })
}

fn nat_kind(nat: NatType) -> NatKind {
    match nat {
        NatType::Public => NatKind::PublicIp,
        NatType::FullCone => NatKind::FullCone,
        _ => NatKind::NonFullCone,
    }
}

pub struct Overlay {
    pub env: SharedEnvelope,
    pub ca: CaServer,
    pub rendezvous: RendezvousServer,
    pub backups: Vec<RendezvousServer>,
    rendezvous_up: bool,
    pub relays: Vec<RelayServer>,
    relay_endpoints: Vec<EndpointId>,
    pub net: Network,
    pub stun: StunServer,
    stun_endpoints: (EndpointId, EndpointId),
    rendezvous_endpoint: EndpointId,
    pub peers: BTreeMap<String, Peer>,
    pub events: Vec<OverlayEvent>,
    pub detections: Vec<Notification>,
    rng: ChaCha20Rng,
    tokens: BTreeSet<Token>,
}

impl Overlay {
    pub fn new(config: &OverlayConfig) -> Result<Self, PeerError> {
        let env = envelope_by_name(&config.scheme).ok_or_else(|| PeerError::UnknownScheme(config.scheme.clone()))?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut net = Network::new(rng.gen());
        let stun_a = net.add_endpoint("stun-a", NatType::Public);
        let stun_b = net.add_endpoint("stun-b", NatType::Public);
        let stun = StunServer::new(
            net.advertised(stun_a).expect("public endpoint"),
            net.advertised(stun_b).expect("public endpoint"),
        );
        let ca = CaServer::new(env.clone(), "ca", rng.gen());
        let rv_ep = net.add_endpoint("rendezvous", NatType::Public);
        let rv_addr = net.advertised(rv_ep).expect("public endpoint");
        let mut rendezvous = RendezvousServer::new(
            env.clone(),
            "rendezvous",
            rv_addr,
            ca.public_key().clone(),
            config.rendezvous.clone(),
            rng.gen(),
        );
        let backups = (0..config.backups)
            .map(|i| {
                let ep = net.add_endpoint(&format!("rendezvous-backup-{i}"), NatType::Public);
                RendezvousServer::new(
                    env.clone(),
                    &format!("rendezvous-backup-{i}"),
                    net.advertised(ep).expect("public endpoint"),
                    ca.public_key().clone(),
                    config.rendezvous.clone(),
                    rng.gen(),
                )
            })
            .collect();
        let mut relays = Vec::new();
        let mut relay_endpoints = Vec::new();
        for i in 0..config.relays {
            let ep = net.add_endpoint(&format!("relay-{i}"), NatType::Public);
            let addr = net.advertised(ep).expect("public endpoint");
            let relay = RelayServer::new(
                env.clone(),
                addr,
                RelayConfig {
                    rendezvous: rv_addr,
                    port: addr.port(),
                    max_connections: config.relay_capacity,
                    ping_interval_ms: config.relay_ping_ms,
                },
                ca.public_key().clone(),
                rng.gen(),
            );
            relay.announce(&mut rendezvous, 0);
            relays.push(relay);
            relay_endpoints.push(ep);
        }
        Ok(Overlay {
            env,
            ca,
            rendezvous,
            backups,
            rendezvous_up: true,
            relays,
            relay_endpoints,
            net,
            stun,
            stun_endpoints: (stun_a, stun_b),
            rendezvous_endpoint: rv_ep,
            peers: BTreeMap::new(),
            events: Vec::new(),
            detections: Vec::new(),
            rng,
            tokens: BTreeSet::new(),
        })
    }

    pub fn now(&self) -> Millis {
        self.net.now()
    }

    /// Moves virtual time forward, delivering any queued network traffic.
    pub fn advance_to(&mut self, t: Millis) {
        if t > self.now() {
            self.net.step(t);
        }
    }

    pub fn rendezvous_up(&self) -> bool {
        self.rendezvous_up
    }

    /// Takes the rendezvous server down or brings it back.
    pub fn set_rendezvous_up(&mut self, up: bool) {
        self.rendezvous_up = up;
        self.net.set_online(self.rendezvous_endpoint, up);
    }

    pub fn relay_endpoint(&self, relay: usize) -> EndpointId {
        self.relay_endpoints[relay]
    }

    pub fn peer(&self, name: &str) -> Result<&Peer, PeerError> {
        self.peers.get(name).ok_or_else(|| PeerError::UnknownPeer(name.to_string()))
    }

    pub fn peer_mut(&mut self, name: &str) -> Result<&mut Peer, PeerError> {
        self.peers.get_mut(name).ok_or_else(|| PeerError::UnknownPeer(name.to_string()))
    }

    /// Creates a peer with one device per entry of `nats`, priorities in
    /// order. Devices start online.
    pub fn add_peer(&mut self, username: &str, nats: &[NatType]) -> Result<(), PeerError> {
        if self.peers.contains_key(username) {
            return Err(PeerError::DuplicatePeer(username.to_string()));
        }
        if nats.is_empty() || nats.len() > MAX_DEVICES {
            return Err(PeerError::DeviceCount);
        }
        let keys = self.env.generate_keypair(self.rng.gen());
        let mut devices = BTreeMap::new();
        for (i, &nat) in nats.iter().enumerate() {
            let priority = i as u8;
            let endpoint = self.net.add_endpoint(&format!("{username}#{priority}"), nat);
            devices.insert(
                priority,
                PeerDevice {
                    priority,
                    endpoint,
                    nat: None,
                    relay: None,
                    record: None,
                    needs_registration: true,
                    data: Device::new(username, priority),
                },
            );
        }
        self.peers.insert(
            username.to_string(),
            Peer {
                username: username.to_string(),
                keys,
                certificate: None,
                devices,
                friends: BTreeMap::new(),
                mirrors: MirrorSet::new(),
                located: BTreeMap::new(),
                mirror_lists: BTreeMap::new(),
                mirror_digests: BTreeMap::new(),
                notifications: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn device_online(&self, user: &str, priority: u8) -> bool {
        self.peers
            .get(user)
            .and_then(|p| p.devices.get(&priority))
            .is_some_and(|d| self.net.endpoint(d.endpoint).online)
    }

    /// Obtains a certificate if needed and bootstraps every online device.
    pub fn bootstrap(&mut self, user: &str) -> Result<(), PeerError> {
        let peer = self.peer(user)?;
        if peer.certificate.is_none() {
            let keys = peer.keys.clone();
            let cert = obtain_certificate(&mut self.ca, &self.env, &keys, user)?;
            self.peer_mut(user)?.certificate = Some(cert);
        }
        let priorities: Vec<u8> = self.peer(user)?.devices.keys().copied().collect();
        for p in priorities {
            if self.device_online(user, p) {
                self.bootstrap_device(user, p)?;
            }
        }
        Ok(())
    }

    /// NAT discovery, relay acquisition when needed, then registration.
    pub fn bootstrap_device(&mut self, user: &str, priority: u8) -> Result<(), PeerError> {
        let now = self.now();
        let peer = self.peer(user)?;
        if peer.certificate.is_none() {
            return Err(PeerError::NoCertificate);
        }
        let ep = peer.device(priority)?.endpoint;
        if !self.net.endpoint(ep).online {
            return Err(PeerError::DeviceOffline);
        }
        let (a, b) = self.stun_endpoints;
        let nat = self
            .net
            .classify_nat(ep, &self.stun, a, b)
            .map_err(|_| PeerError::StunUnreachable)?;
        self.release_relay(user, priority)?;
        {
            let dev = self.peer_mut(user)?.device_mut(priority)?;
            dev.nat = Some(nat);
            dev.needs_registration = true;
        }
        if inbound_needs_relay(nat) {
            match self.acquire_relay(user, priority) {
                Ok(lease) => self.peer_mut(user)?.device_mut(priority)?.relay = Some(lease),
                Err(PeerError::Rendezvous(RendezvousError::NoRelayAvailable)) => {
                    self.events.push(OverlayEvent {
                        at: now,
                        user: user.to_string(),
                        priority,
                        kind: EventKind::NoRelayAvailable,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        self.register_device(user, priority)
    }

    fn acquire_relay(&mut self, user: &str, priority: u8) -> Result<RelayLease, PeerError> {
        if !self.rendezvous_up {
            return Err(PeerError::RendezvousDown);
        }
        let now = self.now();
        for relay in &self.relays {
            if relay.heartbeat(&mut self.rendezvous, now).is_err() {
                relay.announce(&mut self.rendezvous, now);
            }
        }
        let addr = self.rendezvous.request_relay(now)?;
        let idx = self
            .relays
            .iter()
            .position(|r| r.addr == addr)
            .ok_or(PeerError::Rendezvous(RendezvousError::UnknownRelay))?;
        let peer = self.peers.get(user).expect("checked by caller");
        let cert = peer.certificate.clone().ok_or(PeerError::NoCertificate)?;
        let ep = peer.device(priority)?.endpoint;
        let relay = &mut self.relays[idx];
        let challenge = relay.challenge(&cert, now)?;
        let response = answer_challenge(&self.env, &peer.keys, &relay.public_key().clone(), &challenge)?;
        let (slot, _) = relay.accept_server_peer(&cert, &response, now)?;
        self.net.touch(ep, self.relay_endpoints[idx]);
        Ok(RelayLease { relay: idx, addr, slot })
    }

    fn release_relay(&mut self, user: &str, priority: u8) -> Result<(), PeerError> {
        let lease = self.peer_mut(user)?.device_mut(priority)?.relay.take();
        if let Some(lease) = lease {
            self.relays[lease.relay].release(lease.slot);
        }
        Ok(())
    }

    /// Takes a device offline or brings it back. Coming back rebinds its
    /// NAT and bootstraps again; a failed bootstrap is logged and retried at
    /// the next registration refresh.
    pub fn set_device_online(&mut self, user: &str, priority: u8, online: bool) -> Result<(), PeerError> {
        let ep = self.peer(user)?.device(priority)?.endpoint;
        if !online {
            self.net.set_online(ep, false);
            self.release_relay(user, priority)?;
            return Ok(());
        }
        self.net.reconnect(ep);
        if self.peer(user)?.certificate.is_none() {
            return self.bootstrap(user);
        }
        if let Err(e) = self.bootstrap_device(user, priority) {
            self.peer_mut(user)?.device_mut(priority)?.needs_registration = true;
            self.events.push(OverlayEvent {
                at: self.now(),
                user: user.to_string(),
                priority,
                kind: EventKind::RegistrationFailed(e.to_string()),
            });
        }
        Ok(())
    }

    /// Signs (when the content changed) and stores this device's record,
    /// then processes any friendship requests waiting in the mailbox.
    pub fn register_device(&mut self, user: &str, priority: u8) -> Result<(), PeerError> {
        let now = self.now();
        let peer = self.peers.get_mut(user).ok_or_else(|| PeerError::UnknownPeer(user.to_string()))?;
        let cert = peer.certificate.clone().ok_or(PeerError::NoCertificate)?;
        let passphrases = peer.passphrases();
        let mirrors = peer.mirrors.refs();
        let keys = peer.keys.clone();
        let dev = peer.device_mut(priority)?;
        dev.needs_registration = true;
        let ep = dev.endpoint;
        if !self.rendezvous_up {
            return Err(PeerError::RendezvousDown);
        }
        if !self.net.connected(ep, self.rendezvous_endpoint) {
            return Err(PeerError::DeviceOffline);
        }
        let nat = dev.nat.ok_or(PeerError::NotBootstrapped)?;
        let endpoint = self
            .net
            .advertised(ep)
            .unwrap_or(self.net.endpoint(ep).nat.internal);
        let relay = dev.relay.map(|l| l.addr);
        let reusable = dev.record.as_ref().filter(|r| {
            r.endpoint() == endpoint
                && r.nat_kind == nat_kind(nat)
                && r.relay == relay
                && r.passphrases == passphrases
                && r.mirrors == mirrors
        });
        let record = match reusable {
            Some(r) => r.clone(),
            None => RegistrationRecord::signed(
                &self.env,
                &keys.private_key,
                user,
                priority,
                endpoint,
                nat_kind(nat),
                Protocol::Udp,
                relay,
                passphrases,
                mirrors,
                now,
            ),
        };
        let (session, sealed) = self.rendezvous.handshake(&cert, now)?;
        open_session_key(self.env.as_ref(), &keys, self.rendezvous.public_key(), &sealed)
            .map_err(|_| PeerError::AuthFailure)?;
        let ack = self.rendezvous.register_peer(session, &cert, record.clone(), now);
        self.rendezvous.close_session(session);
        let ack = ack?;
        let dev = self.peer_mut(user)?.device_mut(priority)?;
        dev.record = Some(record);
        dev.needs_registration = false;
        self.process_requests(user, ack.pending)?;
        self.refresh_friendships(user)
    }

    /// Registers every online device of `user`. Returns how many succeeded.
    pub fn register_all(&mut self, user: &str) -> Result<usize, PeerError> {
        let priorities: Vec<u8> = self.peer(user)?.devices.keys().copied().collect();
        let mut ok = 0;
        for p in priorities {
            if self.device_online(user, p) && self.register_device(user, p).is_ok() {
                ok += 1;
            }
        }
        Ok(ok)
    }

    /// Registers every online device flagged as needing it.
    pub fn refresh_pending_registrations(&mut self) -> usize {
        if !self.rendezvous_up {
            return 0;
        }
        let due: Vec<(String, u8)> = self
            .peers
            .values()
            .flat_map(|p| {
                p.devices
                    .values()
                    .filter(|d| d.needs_registration && d.nat.is_some())
                    .map(|d| (p.username.clone(), d.priority))
            })
            .filter(|(u, p)| self.device_online(u, *p))
            .collect();
        due.into_iter()
            .filter(|(u, p)| self.bootstrap_device(u, *p).is_ok())
            .count()
    }

    fn fresh_token(&mut self) -> Token {
        loop {
            let t = Token::random(&mut self.rng);
            if self.tokens.insert(t.clone()) {
                return t;
            }
        }
    }

    fn mail_token(&mut self, from: &str, to: &str, token: &Token) -> Result<(), PeerError> {
        let now = self.now();
        let peer = self.peer(from)?;
        let cert = peer.certificate.clone().ok_or(PeerError::NoCertificate)?;
        let target_key = self
            .ca
            .certificate(to)
            .ok_or_else(|| PeerError::UnknownPeer(to.to_string()))?
            .public_key
            .clone();
        let request = FriendshipRequest {
            requester: from.to_string(),
            sealed_passphrase: seal(self.env.as_ref(), &peer.keys.private_key, &target_key, token.0.as_bytes()),
            submitted_at: now,
        };
        let (session, _) = self.rendezvous.handshake(&cert, now)?;
        let result = self.rendezvous.submit_friendship_request(session, to, request, &self.ca);
        self.rendezvous.close_session(session);
        Ok(result?)
    }

    /// Requester side: a fresh token for `to`, sealed and left in its
    /// mailbox, and listed in the requester's next registration.
    pub fn send_friendship_request(&mut self, from: &str, to: &str) -> Result<(), PeerError> {
        if !self.rendezvous_up {
            return Err(PeerError::RendezvousDown);
        }
        self.peer(to)?;
        if let Some(state) = self.peer(from)?.friendship(to) {
            return Err(PeerError::InvalidTransition {
                op: "send_friendship_request",
                from: Some(state),
            });
        }
        let token = self.fresh_token();
        self.mail_token(from, to, &token)?;
        self.peer_mut(from)?.friends.insert(
            to.to_string(),
            Friendship {
                state: FriendshipState::PendingSent,
                issued: Some(token),
                held: None,
                established_at: None,
            },
        );
        self.register_all(from)?;
        Ok(())
    }

    /// Target side: answers a pending request with the reciprocal token.
    pub fn accept_friendship(&mut self, user: &str, requester: &str) -> Result<(), PeerError> {
        if !self.rendezvous_up {
            return Err(PeerError::RendezvousDown);
        }
        let state = self.peer(user)?.friendship(requester);
        if state != Some(FriendshipState::PendingReceived) {
            return Err(PeerError::InvalidTransition {
                op: "accept_friendship",
                from: state,
            });
        }
        let token = self.fresh_token();
        let now = self.now();
        let peer = self.peer_mut(user)?;
        let f = peer.friends.get_mut(requester).expect("state checked");
        f.state = FriendshipState::Active;
        f.issued = Some(token.clone());
        f.established_at = Some(now);
        peer.set_zone_status(requester, FriendStatus::Active);
        self.register_all(user)?;
        self.mail_token(user, requester, &token)
    }

    /// Drops the friend's token, zone memberships, mirror role and cached
    /// data. The friend loses lookup access at the next registration, which
    /// happens here for every online device.
    pub fn revoke_friendship(&mut self, user: &str, friend: &str) -> Result<(), PeerError> {
        let peer = self.peer_mut(user)?;
        let state = peer.friendship(friend);
        if !matches!(
            state,
            Some(FriendshipState::Active | FriendshipState::PendingSent | FriendshipState::PendingReceived)
        ) {
            return Err(PeerError::InvalidTransition {
                op: "revoke_friendship",
                from: state,
            });
        }
        let f = peer.friends.get_mut(friend).expect("state checked");
        f.state = FriendshipState::Revoked;
        f.issued = None;
        f.held = None;
        let was_mirror = peer.mirrors.remove(friend);
        peer.located.retain(|(u, _), _| u != friend);
        peer.mirror_lists.remove(friend);
        peer.mirror_digests.remove(friend);
        peer.set_zone_status(friend, FriendStatus::Revoked);
        for d in peer.devices.values_mut() {
            d.data.friends.remove(friend);
            d.data.drop_mirror(friend);
            d.needs_registration = true;
        }
        if was_mirror {
            if let Some(m) = self.peers.get_mut(friend) {
                for d in m.devices.values_mut() {
                    d.data.drop_mirror(user);
                }
            }
        }
        self.register_all(user)?;
        Ok(())
    }

    fn process_requests(&mut self, user: &str, pending: Vec<FriendshipRequest>) -> Result<(), PeerError> {
        for req in pending {
            let Some(sender) = self.ca.certificate(&req.requester).map(|c| c.public_key.clone()) else {
                continue;
            };
            let env = self.env.clone();
            let peer = self.peer_mut(user)?;
            let Ok(bytes) = open(env.as_ref(), &peer.keys, &sender, &req.sealed_passphrase) else {
                continue;
            };
            let Ok(text) = String::from_utf8(bytes) else { continue };
            let token = Token(text);
            match peer.friends.get_mut(&req.requester) {
                None => {
                    peer.friends.insert(
                        req.requester.clone(),
                        Friendship {
                            state: FriendshipState::PendingReceived,
                            issued: None,
                            held: Some(token),
                            established_at: None,
                        },
                    );
                }
                Some(f) if f.state == FriendshipState::PendingSent => f.held = Some(token),
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Activates sent requests whose reply token now resolves.
    pub fn refresh_friendships(&mut self, user: &str) -> Result<(), PeerError> {
        if !self.rendezvous_up {
            return Ok(());
        }
        let now = self.now();
        let peer = self.peers.get_mut(user).ok_or_else(|| PeerError::UnknownPeer(user.to_string()))?;
        let mut activated = Vec::new();
        for (name, f) in peer.friends.iter_mut() {
            if f.state != FriendshipState::PendingSent {
                continue;
            }
            if let Some(held) = &f.held {
                if self.rendezvous.resolve_token(held) == Some(name.as_str()) {
                    f.state = FriendshipState::Active;
                    f.established_at = Some(now);
                    activated.push(name.clone());
                }
            }
        }
        for name in activated {
            peer.set_zone_status(&name, FriendStatus::Active);
        }
        Ok(())
    }

    /// Runs the whole request, accept and activation exchange for each
    /// pair, batching registrations. Pairs that already have a state are
    /// skipped.
    pub fn establish_friendships(&mut self, pairs: &[(String, String)]) -> Result<usize, PeerError> {
        let mut sent = Vec::new();
        let mut touched = BTreeSet::new();
        for (a, b) in pairs {
            if a == b || self.peer(a)?.friendship(b).is_some() || self.peer(b)?.friendship(a).is_some() {
                continue;
            }
            let token = self.fresh_token();
            self.mail_token(a, b, &token)?;
            self.peer_mut(a)?.friends.insert(
                b.clone(),
                Friendship {
                    state: FriendshipState::PendingSent,
                    issued: Some(token),
                    held: None,
                    established_at: None,
                },
            );
            touched.insert(a.clone());
            touched.insert(b.clone());
            sent.push((a.clone(), b.clone()));
        }
        for u in &touched {
            self.register_all(u)?;
        }
        for (a, b) in &sent {
            let token = self.fresh_token();
            let now = self.now();
            let peer = self.peer_mut(b)?;
            match peer.friends.get_mut(a) {
                Some(f) if f.state == FriendshipState::PendingReceived => {
                    f.state = FriendshipState::Active;
                    f.issued = Some(token.clone());
                    f.established_at = Some(now);
                }
                _ => continue,
            }
            peer.set_zone_status(a, FriendStatus::Active);
            self.mail_token(b, a, &token)?;
        }
        for u in &touched {
            self.register_all(u)?;
        }
        for u in &touched {
            self.register_all(u)?;
        }
        Ok(sent
            .iter()
            .filter(|(a, b)| {
                self.peers[a].is_active_friend(b) && self.peers[b].is_active_friend(a)
            })
            .count())
    }

    /// Makes `mirror` host `owner`'s profile at the next rank. Both must be
    /// active friends.
    pub fn add_mirror(&mut self, owner: &str, mirror: &str, capacity_bytes: u64) -> Result<u32, PeerError> {
        if !self.peer(owner)?.is_active_friend(mirror) {
            return Err(PeerError::NotFriend(mirror.to_string()));
        }
        if !self.peer(mirror)?.is_active_friend(owner) {
            return Err(PeerError::NotFriend(owner.to_string()));
        }
        let rank = self.peer_mut(owner)?.mirrors.add(mirror, capacity_bytes)?;
        self.peer_mut(mirror)?
            .device_mut(0)?
            .data
            .host_mirror(owner, rank, capacity_bytes);
        for d in self.peer_mut(owner)?.devices.values_mut() {
            d.needs_registration = true;
        }
        self.register_all(owner)?;
        Ok(rank)
    }

    /// Copies the primary's state to the backups.
    pub fn sync_backups(&mut self) -> Vec<Result<usize, RendezvousError>> {
        if !self.rendezvous_up {
            return Vec::new();
        }
        let now = self.now();
        self.rendezvous.sync_backups(&mut self.backups, |_| true, now)
    }

    fn report(&mut self, reporter: &str, subject: &str, priority: u8) {
        let now = self.now();
        let server = RingId::of_address(&self.rendezvous.addr.to_string());
        let env = self.env.clone();
        let Some(peer) = self.peers.get_mut(reporter) else { return };
        let n = Notification::signed(env.as_ref(), &peer.keys.private_key, reporter, subject, server, now);
        peer.notifications.push(n.clone());
        self.detections.push(n);
        self.events.push(OverlayEvent {
            at: now,
            user: reporter.to_string(),
            priority,
            kind: EventKind::Detection {
                subject: subject.to_string(),
                priority,
            },
        });
    }

    /// Checks a locate reply. `expected` is the serving username for this
    /// priority if already known.
    fn reply_verifies(&self, requester: &str, target: &str, reply: &crate::rendezvous::LocateReply) -> bool {
        let Some(target_cert) = self.ca.certificate(target) else { return false };
        let record = &reply.record;
        let cert = &reply.certificate;
        if reply.owner != target || cert.username != record.username {
            return false;
        }
        let expected_user = if reply.priority <= MAX_DEVICE_PRIORITY {
            record.priority == reply.priority && record.username == target
        } else {
            let rank = (reply.priority - MAX_DEVICE_PRIORITY) as u32;
            record.priority == 0
                && reply
                    .owner_mirrors
                    .iter()
                    .any(|m| m.rank == rank && m.username == record.username)
        };
        if !expected_user {
            return false;
        }
        let peer = &self.peers[requester];
        let list_cached = peer.mirror_lists.get(target) == Some(&reply.owner_mirrors)
            && peer.mirror_digests.get(target) == Some(&reply.owner_mirrors_digest);
        if !list_cached
            && !verify_mirror_list(&self.env, &target_cert.public_key, &reply.owner_mirrors, &reply.owner_mirrors_digest)
        {
            return false;
        }
        let cached = self.peers[requester]
            .located
            .get(&(record.username.clone(), record.priority))
            .is_some_and(|s| s.record == *record && s.certificate == *cert);
        cached
            || (cert.verify(self.env.as_ref(), self.ca.public_key())
                && record.verify(&self.env, &cert.public_key))
    }

    /// One escalation step: the record to try for locate priority `p`, from
    /// the rendezvous server when it answers, else from the cache.
    #[allow(clippy::too_many_arguments)]
    fn record_for(
        &mut self,
        requester: &str,
        token: &Token,
        target: &str,
        p: u8,
        client_ep: EndpointId,
        elapsed: &mut Millis,
        detections: &mut u32,
    ) -> Option<StoredRecord> {
        let rtt = self.net.rtt(client_ep, self.rendezvous_endpoint);
        if self.rendezvous_up && self.net.connected(client_ep, self.rendezvous_endpoint) {
            *elapsed += rtt;
            match self.rendezvous.locate_peer(token, p) {
                Ok(reply) => {
                    if !self.reply_verifies(requester, target, &reply) {
                        *detections += 1;
                        self.report(requester, target, p);
                        return None;
                    }
                    let stored = StoredRecord {
                        record: reply.record,
                        certificate: reply.certificate,
                    };
                    let peer = self.peers.get_mut(requester).expect("requester exists");
                    peer.mirror_lists.insert(target.to_string(), reply.owner_mirrors);
                    peer.mirror_digests.insert(target.to_string(), reply.owner_mirrors_digest);
                    peer.located.insert(
                        (stored.record.username.clone(), stored.record.priority),
                        stored.clone(),
                    );
                    Some(stored)
                }
                Err(_) => None,
            }
        } else {
            *elapsed += 2 * rtt;
            let peer = &self.peers[requester];
            let key = if p <= MAX_DEVICE_PRIORITY {
                (target.to_string(), p)
            } else {
                let rank = (p - MAX_DEVICE_PRIORITY) as u32;
                let m = peer.mirror_lists.get(target)?.iter().find(|m| m.rank == rank)?;
                (m.username.clone(), 0)
            };
            peer.located.get(&key).cloned()
        }
    }

    fn mirror_count(&self, requester: &str, target: &str) -> usize {
        self.peers[requester].mirror_lists.get(target).map_or(0, Vec::len)
    }

    /// Locates `target` and opens a secure channel to the first identity
    /// that answers, trying device priorities 0 to 2 and then mirror ranks.
    pub fn locate_and_connect(&mut self, requester: &str, device: u8, target: &str) -> Result<Located, PeerError> {
        let peer = self.peer(requester)?;
        let client_ep = peer.device(device)?.endpoint;
        if !self.net.endpoint(client_ep).online {
            return Err(PeerError::DeviceOffline);
        }
        let token = match peer.friends.get(target) {
            Some(f) if f.state == FriendshipState::Active => f.held.clone(),
            _ => None,
        }
        .ok_or_else(|| PeerError::NotFriend(target.to_string()))?;
        self.peer(target)?;

        let mut attempts = 0;
        let mut detections = 0;
        let mut elapsed = 0;
        let mut p: u8 = 0;
        loop {
            if p > MAX_DEVICE_PRIORITY && (p - MAX_DEVICE_PRIORITY) as usize > self.mirror_count(requester, target) {
                break;
            }
            attempts += 1;
            if let Some(stored) = self.record_for(requester, &token, target, p, client_ep, &mut elapsed, &mut detections) {
                let serving = stored.record.username.clone();
                let sprio = stored.record.priority;
                match self.connect_record(requester, device, target, &stored.record) {
                    Ok(channel) => {
                        let server_ep = self.peers[&serving].devices[&sprio].endpoint;
                        elapsed += self.net.rtt(client_ep, server_ep);
                        return Ok(Located {
                            serving,
                            priority: p,
                            device: sprio,
                            channel,
                            attempts,
                            detections,
                            elapsed_ms: elapsed,
                        });
                    }
                    Err(_) => {
                        let server_ep = self
                            .peers
                            .get(&serving)
                            .and_then(|s| s.devices.get(&sprio))
                            .map_or(client_ep, |d| d.endpoint);
                        elapsed += 2 * self.net.rtt(client_ep, server_ep);
                    }
                }
            }
            p = p.saturating_add(1);
            if p == u8::MAX {
                break;
            }
        }
        Err(PeerError::AllUnreachable { attempts })
    }

    /// Opens a channel to the device described by `record`, checking that
    /// the advertised endpoint or relay is still the live one.
    fn connect_record(
        &mut self,
        requester: &str,
        device: u8,
        owner: &str,
        record: &RegistrationRecord,
    ) -> Result<SecureChannel, PeerError> {
        let client_ep = self.peer(requester)?.device(device)?.endpoint;
        let serving = self.peer(&record.username)?;
        let dev = serving.device(record.priority)?;
        let server_ep = dev.endpoint;
        let lease = dev.relay;
        if dev.data.replica(owner).is_none() {
            return Err(PeerError::Unreachable);
        }
        if !self.net.connected(client_ep, server_ep) {
            return Err(PeerError::Unreachable);
        }
        let current = self.net.advertised(server_ep);
        let mut path = None;
        if current == Some(record.endpoint()) {
            match self.net.reachability(client_ep, server_ep, true) {
                Reachability::Direct => path = Some(Path::Direct),
                Reachability::AfterHolePunch => {
                    self.net.punch(server_ep, client_ep);
                    path = Some(Path::HolePunched);
                }
                Reachability::RelayRequired => {}
            }
        }
        if path.is_none() {
            let lease = match (record.relay, lease) {
                (Some(addr), Some(lease)) if lease.addr == addr => lease,
                _ => return Err(PeerError::Unreachable),
            };
            let relay_ep = self.relay_endpoints[lease.relay];
            if !self.net.connected(client_ep, relay_ep)
                || !self.net.connected(server_ep, relay_ep)
                || !self.relays[lease.relay].has_slot(lease.slot)
            {
                return Err(PeerError::Unreachable);
            }
            let conn = self.relays[lease.relay].attach(requester, &record.username)?;
            path = Some(Path::Relayed { relay: lease.relay, conn });
        }
        let path = path.expect("set above");
        let result = self.establish_secure_channel((requester, device), (&record.username, record.priority), owner, path);
        if result.is_err() {
            if let Path::Relayed { relay, conn } = path {
                self.relays[relay].detach(conn);
            }
        }
        result
    }

    /// Certificate exchange and session key agreement over `path`. The
    /// server refuses clients that are neither its friends nor friends of
    /// `owner` when it serves `owner`'s profile as a mirror.
    pub fn establish_secure_channel(
        &mut self,
        client: (&str, u8),
        server: (&str, u8),
        owner: &str,
        path: Path,
    ) -> Result<SecureChannel, PeerError> {
        let now = self.now();
        let ca_public = self.ca.public_key().clone();
        let c = self.peer(client.0)?;
        let s = self.peer(server.0)?;
        let c_cert = c.certificate.clone().ok_or(PeerError::NoCertificate)?;
        let s_cert = s.certificate.clone().ok_or(PeerError::NoCertificate)?;
        let c_private = c.keys.private_key.clone();
        let env = self.env.clone();
        let env = env.as_ref();
        if !c_cert.verify(env, &ca_public)
            || !s_cert.verify(env, &ca_public)
            || c_cert.username != client.0
            || s_cert.username != server.0
        {
            return Err(PeerError::AuthFailure);
        }
        let s_dev = s.device(server.1)?;
        let friend_of_server = s.is_active_friend(client.0);
        let friend_of_owner = owner != server.0
            && s_dev
                .data
                .replica(owner)
                .is_some_and(|r| r.image.zones.is_active(client.0));
        if client.0 != server.0 && !friend_of_server && !friend_of_owner {
            return Err(PeerError::Refused);
        }
        let key = SessionKey::generate(&mut self.rng, now);
        let mut sealed = seal_session_key(env, &c_private, &s_cert.public_key, &key);
        if let Path::Relayed { relay, conn } = path {
            self.relays[relay].forward(conn, Side::Client, sealed)?;
            sealed = self.relays[relay]
                .deliver(conn, Side::Server)
                .pop()
                .ok_or(PeerError::Relay(RelayError::PairBroken))?;
        }
        let s = &self.peers[server.0];
        let opened = open_session_key(env, &s.keys, &c_cert.public_key, &sealed)
            .map_err(|_| PeerError::AuthFailure)?;
        if opened != key {
            return Err(PeerError::AuthFailure);
        }
        Ok(SecureChannel {
            client: (client.0.to_string(), client.1),
            server: (server.0.to_string(), server.1),
            path,
            key,
            nonce: 0,
        })
    }

    /// Sends one encrypted frame from `from` and returns the plaintext as
    /// decrypted by the other end.
    pub fn transmit(&mut self, channel: &mut SecureChannel, from: Side, plaintext: &[u8]) -> Result<Vec<u8>, PeerError> {
        let nonce = channel.nonce;
        channel.nonce += 1;
        let mut frame = self.env.session_encrypt(&channel.key, nonce, plaintext);
        if let Path::Relayed { relay, conn } = channel.path {
            let to = match from {
                Side::Client => Side::Server,
                Side::Server => Side::Client,
            };
            self.relays[relay].forward(conn, from, frame)?;
            frame = self.relays[relay]
                .deliver(conn, to)
                .pop()
                .ok_or(PeerError::Relay(RelayError::PairBroken))?;
        }
        self.env
            .session_decrypt(&channel.key, nonce, &frame)
            .map_err(|e: CryptoError| match e {
                CryptoError::AuthenticityFailure | CryptoError::ConfidentialityFailure | CryptoError::Malformed => {
                    PeerError::AuthFailure
                }
            })
    }

    pub fn close(&mut self, channel: &SecureChannel) {
        if let Path::Relayed { relay, conn } = channel.path {
            self.relays[relay].detach(conn);
        }
    }

    /// Connection record of `user`'s device as known to `by`: the server's
    /// copy when it answers, else the last one `by` saw.
    fn known_record(&self, by: &str, user: &str, priority: u8) -> Option<RegistrationRecord> {
        if self.rendezvous_up {
            return self.rendezvous.record(user, priority).map(|s| s.record.clone());
        }
        if by == user {
            return self.peers.get(user)?.devices.get(&priority)?.record.clone();
        }
        self.peers
            .get(by)?
            .located
            .get(&(user.to_string(), priority))
            .map(|s| s.record.clone())
    }

    /// Whether `by`'s device can open a channel to `user`'s device now.
    fn link(&mut self, by: (&str, u8), to: (&str, u8), owner: &str) -> bool {
        let Some(record) = self.known_record(by.0, to.0, to.1) else { return false };
        match self.connect_record(by.0, by.1, owner, &record) {
            Ok(ch) => {
                self.close(&ch);
                true
            }
            Err(_) => false,
        }
    }

    /// One synchronization round of `owner`'s primary device with its other
    /// devices and its mirrors.
    pub fn sync_replicas(&mut self, owner: &str) -> Result<SyncReport, PeerError> {
        if !self.device_online(owner, 0) {
            return Err(PeerError::DeviceOffline);
        }
        let now = self.now();
        let peer = self.peer(owner)?;
        let own: Vec<u8> = peer.devices.keys().copied().filter(|p| *p != 0).collect();
        let mirrors: Vec<String> = peer.mirrors.entries().iter().map(|m| m.username.clone()).collect();
        let mut ok = BTreeMap::new();
        for p in &own {
            let up = self.link((owner, 0), (owner, *p), owner);
            ok.insert((owner.to_string(), *p), up);
        }
        for m in &mirrors {
            let up = self.link((owner, 0), (m, 0), owner);
            ok.insert((m.clone(), 0), up);
        }
        let mut peer = self.peers.remove(owner).expect("checked above");
        let mut devices = std::mem::take(&mut peer.devices);
        let mut master = devices.remove(&0).expect("primary exists");
        let mut replicas: Vec<(&mut Device, bool)> = Vec::new();
        for (p, d) in devices.iter_mut() {
            replicas.push((&mut d.data, ok[&(owner.to_string(), *p)]));
        }
        for (name, mp) in self.peers.iter_mut() {
            if let Some(&up) = ok.get(&(name.clone(), 0)) {
                if let Some(d) = mp.devices.get_mut(&0) {
                    replicas.push((&mut d.data, up));
                }
            }
        }
        let report = sync_with_replicas(&mut master.data, &mut replicas, now);
        devices.insert(0, master);
        peer.devices = devices;
        self.peers.insert(owner.to_string(), peer);
        Ok(report)
    }

    /// Runs `f` on the devices `a` and `b`, which may belong to the same
    /// peer or even be the same device. In the latter case `b` is a copy
    /// whose replicas are written back afterwards.
    fn with_devices<R>(
        &mut self,
        a: (&str, u8),
        b: (&str, u8),
        f: impl FnOnce(&mut Device, &mut Device) -> R,
    ) -> Result<R, PeerError> {
        self.peer(a.0)?.device(a.1)?;
        self.peer(b.0)?.device(b.1)?;
        let mut pa = self.peers.remove(a.0).expect("checked above");
        let out = if a == b {
            let dev = &mut pa.devices.get_mut(&a.1).expect("checked above").data;
            let mut srv = dev.clone();
            let out = f(dev, &mut srv);
            dev.own = srv.own;
            dev.mirrored = srv.mirrored;
            out
        } else if a.0 == b.0 {
            let mut da = pa.devices.remove(&a.1).expect("checked above");
            let out = f(&mut da.data, &mut pa.devices.get_mut(&b.1).expect("checked above").data);
            pa.devices.insert(a.1, da);
            out
        } else {
            let db = &mut self.peers.get_mut(b.0).expect("checked above").devices.get_mut(&b.1).expect("checked above").data;
            f(&mut pa.devices.get_mut(&a.1).expect("checked above").data, db)
        };
        self.peers.insert(a.0.to_string(), pa);
        Ok(out)
    }

    fn session_result(located: &Located, bytes: u64, entries: Vec<EntryId>) -> SessionOutcome {
        SessionOutcome {
            serving: located.serving.clone(),
            priority: located.priority,
            device: located.device,
            bytes,
            elapsed_ms: located.elapsed_ms,
            detections: located.detections,
            entries,
            relayed: matches!(located.channel.path, Path::Relayed { .. }),
        }
    }

    /// Locates `target`, downloads its delta over the secure channel and
    /// applies it to the requester's cache.
    pub fn update_session(&mut self, requester: &str, device: u8, target: &str) -> Result<SessionOutcome, PeerError> {
        let now = self.now();
        let mut located = self.locate_and_connect(requester, device, target)?;
        let serving = (located.serving.clone(), located.device);
        let since = self.peer(requester)?.device(device)?.data.friends.get(target).map_or(0, |c| c.watermark);
        let bundle = self.peer(&serving.0)?.device(serving.1)?.data.serve_delta(target, requester, since, now);
        let result = match bundle {
            Ok(bundle) => {
                let wire = serde_json::to_vec(&bundle).expect("bundle serialises");
                self.transmit(&mut located.channel, Side::Server, &wire).and_then(|got| {
                    if got != wire {
                        return Err(PeerError::AuthFailure);
                    }
                    let out = self.with_devices((requester, device), (&serving.0, serving.1), |client, server| {
                        client.pull_updates(server, target, now, true)
                    })??;
                    Ok(Self::session_result(&located, out.bytes, out.transmitted))
                })
            }
            Err(e) => Err(PeerError::Session(e)),
        };
        self.close(&located.channel);
        result
    }

    /// Locates `target` and delivers the posts queued for it.
    pub fn post_session(&mut self, requester: &str, device: u8, target: &str) -> Result<SessionOutcome, PeerError> {
        let now = self.now();
        let mut located = self.locate_and_connect(requester, device, target)?;
        let serving = (located.serving.clone(), located.device);
        let queued: Vec<_> = self
            .peer(requester)?
            .device(device)?
            .data
            .pending
            .iter()
            .filter(|p| p.target == target)
            .map(|p| p.entry.clone())
            .collect();
        let wire = serde_json::to_vec(&queued).expect("entries serialise");
        let result = self.transmit(&mut located.channel, Side::Client, &wire).and_then(|got| {
            if got != wire {
                return Err(PeerError::AuthFailure);
            }
            let out = self.with_devices((requester, device), (&serving.0, serving.1), |client, server| {
                client.push_posts(server, target, now, true)
            })??;
            Ok(Self::session_result(&located, out.bytes, out.delivered))
        });
        self.close(&located.channel);
        result
    }

    /// Counts a failed session against the posts queued for `target`.
    pub fn note_failed_post(&mut self, requester: &str, device: u8, target: &str) -> Result<(), PeerError> {
        let dev = &mut self.peer_mut(requester)?.device_mut(device)?.data;
        for p in dev.pending.iter_mut().filter(|p| p.target == target) {
            p.attempts += 1;
        }
        Ok(())
    }

    pub fn relay_bytes(&self) -> u64 {
        self.relays.iter().map(|r| r.bytes_forwarded).sum()
    }
}
