//! Rendezvous server.
//!
//! Holds signed connection records keyed by `(username, priority)`, resolves
//! passphrase tokens to records, keeps a directory of live relay servers,
//! buffers friendship requests for offline targets, and replicates its state
//! to backup servers.
//!
//! The connection digest of a record covers, in order: IP address, port,
//! protocol, relay address, relay port and the passphrase list. The mirror
//! list is covered by a second digest. Both are signed with the registrant's
//! certificate key so a client can detect a server that alters a record.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ca::CertificateDirectory;
use crate::crypto::{
    encode_fields, seal_session_key, sign_digest, verify_digest, Certificate, KeyPair, PrivateKey,
    PublicKey, SessionKey, SharedEnvelope, Signature,
};
use crate::Millis;

/// Highest device priority a user may register for itself.
pub const MAX_DEVICE_PRIORITY: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NatKind {
    FullCone,
    NonFullCone,
    PublicIp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl Protocol {
    fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        }
    }
}

/// Opaque per-friendship capability.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub String);

impl Token {
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Token(hex::encode(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MirrorRef {
    pub username: String,
    pub rank: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub username: String,
    pub priority: u8,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub nat_kind: NatKind,
    pub protocol: Protocol,
    pub relay: Option<SocketAddrV4>,
    pub passphrases: Vec<Token>,
    pub mirrors: Vec<MirrorRef>,
    pub conn_digest: Signature,
    pub mirrors_digest: Signature,
    pub registered_at: Millis,
}

impl RegistrationRecord {
    /// Builds a record and signs both digests.
    #[allow(clippy::too_many_arguments)]
    pub fn signed(
        env: &SharedEnvelope,
        private: &PrivateKey,
        username: &str,
        priority: u8,
        endpoint: SocketAddrV4,
        nat_kind: NatKind,
        protocol: Protocol,
        relay: Option<SocketAddrV4>,
        passphrases: Vec<Token>,
        mirrors: Vec<MirrorRef>,
        now: Millis,
    ) -> Self {
        let mut record = RegistrationRecord {
            username: username.to_string(),
            priority,
            ip: *endpoint.ip(),
            port: endpoint.port(),
            nat_kind,
            protocol,
            relay,
            passphrases,
            mirrors,
            conn_digest: Signature(Vec::new()),
            mirrors_digest: Signature(Vec::new()),
            registered_at: now,
        };
        record.conn_digest = sign_digest(env.as_ref(), private, &record.conn_fields());
        record.mirrors_digest = sign_digest(env.as_ref(), private, &record.mirror_fields());
        record
    }

    pub fn conn_fields(&self) -> Vec<Vec<u8>> {
        let (relay_ip, relay_port) = match self.relay {
            Some(r) => (r.ip().to_string(), r.port().to_string()),
            None => (String::new(), String::new()),
        };
        vec![
            self.ip.to_string().into_bytes(),
            self.port.to_string().into_bytes(),
            self.protocol.as_str().as_bytes().to_vec(),
            relay_ip.into_bytes(),
            relay_port.into_bytes(),
            encode_fields(&self.passphrases.iter().map(|t| t.0.as_bytes()).collect::<Vec<_>>()),
        ]
    }

    pub fn mirror_fields(&self) -> Vec<Vec<u8>> {
        vec![mirror_list_bytes(&self.mirrors)]
    }

    pub fn verify(&self, env: &SharedEnvelope, public: &PublicKey) -> bool {
        verify_digest(env.as_ref(), public, &self.conn_fields(), &self.conn_digest)
            && verify_digest(env.as_ref(), public, &self.mirror_fields(), &self.mirrors_digest)
    }

    pub fn endpoint(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.ip, self.port)
    }

    /// Same content ignoring the registration time.
    fn same_content(&self, other: &RegistrationRecord) -> bool {
        RegistrationRecord {
            registered_at: 0,
            ..self.clone()
        } == RegistrationRecord {
            registered_at: 0,
            ..other.clone()
        }
    }

    /// Approximate wire size, for traffic accounting.
    pub fn wire_size(&self) -> usize {
        64 + self.username.len()
            + self.passphrases.iter().map(|t| t.0.len() + 4).sum::<usize>()
            + self.mirrors.iter().map(|m| m.username.len() + 8).sum::<usize>()
            + self.conn_digest.0.len()
            + self.mirrors_digest.0.len()
    }
}

fn mirror_list_bytes(mirrors: &[MirrorRef]) -> Vec<u8> {
    let items: Vec<Vec<u8>> = mirrors
        .iter()
        .map(|m| encode_fields(&[m.username.as_bytes(), &m.rank.to_be_bytes()]))
        .collect();
    encode_fields(&items)
}

/// Checks an owner's mirror list against its digest, as returned alongside
/// a mirror's record by `locate_peer`.
pub fn verify_mirror_list(env: &SharedEnvelope, owner_public: &PublicKey, mirrors: &[MirrorRef], digest: &Signature) -> bool {
    verify_digest(env.as_ref(), owner_public, &[mirror_list_bytes(mirrors)], digest)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRecord {
    pub addr: SocketAddrV4,
    pub capacity: u32,
    pub load: u32,
    pub last_heartbeat: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FriendshipRequest {
    pub requester: String,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub sealed_passphrase: Vec<u8>,
    pub submitted_at: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendezvousConfig {
    pub age_ms: Millis,
    pub refresh_interval_ms: Millis,
    pub registration_refresh_ms: Millis,
}

impl Default for RendezvousConfig {
    fn default() -> Self {
        RendezvousConfig {
            age_ms: 90_000,
            refresh_interval_ms: 30_000,
            registration_refresh_ms: 2 * crate::MINUTE,
        }
    }
}

impl RendezvousConfig {
    pub fn validate(&self) -> Result<(), RendezvousError> {
        if self.refresh_interval_ms >= self.age_ms || self.refresh_interval_ms == 0 {
            return Err(RendezvousError::InvalidConfig);
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RendezvousError {
    #[error("certificate does not verify under the CA key")]
    BadCertificate,
    #[error("no session established")]
    NoSession,
    #[error("record digest does not verify")]
    DigestMismatch,
    #[error("record username differs from the session identity")]
    IdentityMismatch,
    #[error("device priority out of range")]
    InvalidPriority,
    #[error("not found")]
    NotFound,
    #[error("target has no certificate")]
    UnknownTarget,
    #[error("relay is not registered")]
    UnknownRelay,
    #[error("no relay available")]
    NoRelayAvailable,
    #[error("backup unreachable")]
    BackupUnreachable,
    #[error("no backup alive")]
    NoBackupAlive,
    #[error("refresh interval must be positive and below age")]
    InvalidConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub record: RegistrationRecord,
    pub certificate: Certificate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub pending: Vec<FriendshipRequest>,
}

/// Answer to a locate query. For mirror priorities `record` belongs to the
/// mirror; `owner_mirrors` is the owner's signed mirror list either way.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocateReply {
    pub owner: String,
    pub priority: u8,
    pub record: RegistrationRecord,
    pub certificate: Certificate,
    pub owner_mirrors: Vec<MirrorRef>,
    pub owner_mirrors_digest: Signature,
}

/// Misbehaviour switches used in detection tests.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    /// Alter the port of records returned by `locate_peer` for these owners.
    pub tamper_locate: BTreeSet<String>,
    /// Alter every returned record.
    pub tamper_all: bool,
}

/// Full server state shipped to backups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub records: Vec<StoredRecord>,
    pub relays: Vec<RelayRecord>,
    pub mailboxes: BTreeMap<String, Vec<FriendshipRequest>>,
    pub primary_addr: SocketAddrV4,
    pub taken_at: Millis,
}

#[derive(Debug)]
pub struct RendezvousServer {
    pub name: String,
    pub addr: SocketAddrV4,
    pub config: RendezvousConfig,
    pub behavior: Behavior,
    env: SharedEnvelope,
    keys: KeyPair,
    ca_public: PublicKey,
    rng: ChaCha20Rng,
    next_session: u64,
    sessions: BTreeMap<SessionId, (String, SessionKey)>,
    records: BTreeMap<(String, u8), StoredRecord>,
    passphrases: BTreeMap<Token, String>,
    relays: BTreeMap<SocketAddrV4, RelayRecord>,
    mailboxes: BTreeMap<String, Vec<FriendshipRequest>>,
    /// Primary address as last announced, with the announcement time.
    announced_primary: Option<(SocketAddrV4, Millis)>,
}

impl RendezvousServer {
    pub fn new(
        env: SharedEnvelope,
        name: &str,
        addr: SocketAddrV4,
        ca_public: PublicKey,
        config: RendezvousConfig,
        seed: u64,
    ) -> Self {
        config.validate().expect("invalid rendezvous config");
        let keys = env.generate_keypair(seed);
        RendezvousServer {
            name: name.to_string(),
            addr,
            config,
            behavior: Behavior::default(),
            env,
            keys,
            ca_public,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x005e_ed0f_5e55_10f5),
            next_session: 1,
            sessions: BTreeMap::new(),
            records: BTreeMap::new(),
            passphrases: BTreeMap::new(),
            relays: BTreeMap::new(),
            mailboxes: BTreeMap::new(),
            announced_primary: None,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public_key
    }

    /// Opens a session for the certificate holder. The reply carries a fresh
    /// session key sealed to the certificate's public key.
    pub fn handshake(
        &mut self,
        cert: &Certificate,
        now: Millis,
    ) -> Result<(SessionId, Vec<u8>), RendezvousError> {
        if !cert.verify(self.env.as_ref(), &self.ca_public) {
            return Err(RendezvousError::BadCertificate);
        }
        let key = SessionKey::generate(&mut self.rng, now);
        let sealed = seal_session_key(self.env.as_ref(), &self.keys.private_key, &cert.public_key, &key);
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(id, (cert.username.clone(), key));
        Ok((id, sealed))
    }

    pub fn close_session(&mut self, id: SessionId) {
        self.sessions.remove(&id);
    }

    fn session_user(&self, id: SessionId) -> Result<&str, RendezvousError> {
        self.sessions
            .get(&id)
            .map(|(u, _)| u.as_str())
            .ok_or(RendezvousError::NoSession)
    }

    fn certificate_for_session(&self, id: SessionId, cert: &Certificate) -> Result<(), RendezvousError> {
        if self.session_user(id)? != cert.username {
            return Err(RendezvousError::IdentityMismatch);
        }
        Ok(())
    }

    /// Stores a record. `cert` is the certificate presented in the handshake.
    pub fn register_peer(
        &mut self,
        session: SessionId,
        cert: &Certificate,
        record: RegistrationRecord,
        now: Millis,
    ) -> Result<RegisterAck, RendezvousError> {
        self.certificate_for_session(session, cert)?;
        if record.username != cert.username {
            return Err(RendezvousError::IdentityMismatch);
        }
        if record.priority > MAX_DEVICE_PRIORITY {
            return Err(RendezvousError::InvalidPriority);
        }
        let key = (record.username.clone(), record.priority);
        let unchanged = self
            .records
            .get(&key)
            .is_some_and(|s| s.record.same_content(&record) && s.certificate == *cert);
        if !unchanged && !record.verify(&self.env, &cert.public_key) {
            return Err(RendezvousError::DigestMismatch);
        }
        let mut record = record;
        record.registered_at = now;
        let username = record.username.clone();
        self.records.insert(
            key,
            StoredRecord {
                record,
                certificate: cert.clone(),
            },
        );
        self.rebuild_passphrases_for(&username);
        let pending = self.mailboxes.remove(&username).unwrap_or_default();
        Ok(RegisterAck { pending })
    }

    /// Removes the record of one device, e.g. when it signs off.
    pub fn unregister(&mut self, username: &str, priority: u8) {
        self.records.remove(&(username.to_string(), priority));
        self.rebuild_passphrases_for(username);
    }

    /// The token table for a user follows the passphrase list of that user's
    /// most recent registration.
    fn rebuild_passphrases_for(&mut self, username: &str) {
        self.passphrases.retain(|_, owner| owner != username);
        let latest = self
            .records
            .range((username.to_string(), 0)..=(username.to_string(), u8::MAX))
            .max_by_key(|(k, s)| (s.record.registered_at, std::cmp::Reverse(k.1)))
            .map(|(_, s)| s.record.passphrases.clone());
        for token in latest.into_iter().flatten() {
            self.passphrases.insert(token, username.to_string());
        }
    }

    pub fn resolve_token(&self, token: &Token) -> Option<&str> {
        self.passphrases.get(token).map(String::as_str)
    }

    pub fn record(&self, username: &str, priority: u8) -> Option<&StoredRecord> {
        self.records.get(&(username.to_string(), priority))
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn passphrase_count(&self) -> usize {
        self.passphrases.len()
    }

    /// Looks up the record a friend should contact. Priorities 0 to 2 name
    /// the owner's devices; priority `p >= 3` names the owner's rank `p - 2`
    /// mirror, answered with that mirror's primary-device record.
    pub fn locate_peer(&self, token: &Token, priority: u8) -> Result<LocateReply, RendezvousError> {
        let owner = self.passphrases.get(token).ok_or(RendezvousError::NotFound)?;
        let owner_latest = self
            .records
            .range((owner.clone(), 0)..=(owner.clone(), MAX_DEVICE_PRIORITY))
            .max_by_key(|(_, s)| s.record.registered_at)
            .map(|(_, s)| s)
            .ok_or(RendezvousError::NotFound)?;
        let stored = if priority <= MAX_DEVICE_PRIORITY {
            self.records
                .get(&(owner.clone(), priority))
                .ok_or(RendezvousError::NotFound)?
        } else {
            let rank = (priority - MAX_DEVICE_PRIORITY) as u32;
            let mirror = owner_latest
                .record
                .mirrors
                .iter()
                .find(|m| m.rank == rank)
                .ok_or(RendezvousError::NotFound)?;
            self.records
                .get(&(mirror.username.clone(), 0))
                .ok_or(RendezvousError::NotFound)?
        };
        let mut record = stored.record.clone();
        if self.behavior.tamper_all || self.behavior.tamper_locate.contains(owner) {
            record.port = record.port.wrapping_add(1);
        }
        Ok(LocateReply {
            owner: owner.clone(),
            priority,
            record,
            certificate: stored.certificate.clone(),
            owner_mirrors: owner_latest.record.mirrors.clone(),
            owner_mirrors_digest: owner_latest.record.mirrors_digest.clone(),
        })
    }

    /// Leaves a friendship request for `target`. Requests from the same
    /// requester replace the earlier one.
    pub fn submit_friendship_request(
        &mut self,
        session: SessionId,
        target: &str,
        request: FriendshipRequest,
        directory: &dyn CertificateDirectory,
    ) -> Result<(), RendezvousError> {
        let user = self.session_user(session)?;
        if user != request.requester {
            return Err(RendezvousError::IdentityMismatch);
        }
        if !directory.has_certificate(target) {
            return Err(RendezvousError::UnknownTarget);
        }
        let mailbox = self.mailboxes.entry(target.to_string()).or_default();
        mailbox.retain(|r| r.requester != request.requester);
        mailbox.push(request);
        Ok(())
    }

    pub fn mailbox_len(&self, target: &str) -> usize {
        self.mailboxes.get(target).map_or(0, Vec::len)
    }

    pub fn register_relay(&mut self, addr: SocketAddrV4, capacity: u32, now: Millis) -> Millis {
        self.relays.insert(
            addr,
            RelayRecord {
                addr,
                capacity,
                load: 0,
                last_heartbeat: now,
            },
        );
        self.config.refresh_interval_ms
    }

    pub fn relay_heartbeat(
        &mut self,
        addr: SocketAddrV4,
        load: u32,
        capacity: u32,
        now: Millis,
    ) -> Result<(), RendezvousError> {
        let relay = self.relays.get_mut(&addr).ok_or(RendezvousError::UnknownRelay)?;
        relay.load = load.min(capacity);
        relay.capacity = capacity;
        relay.last_heartbeat = now;
        Ok(())
    }

    pub fn expire_relays(&mut self, now: Millis) -> usize {
        let age = self.config.age_ms;
        let before = self.relays.len();
        self.relays
            .retain(|_, r| now.saturating_sub(r.last_heartbeat) <= age);
        before - self.relays.len()
    }

    pub fn relays(&self) -> impl Iterator<Item = &RelayRecord> {
        self.relays.values()
    }

    /// Picks the live relay with the lowest load ratio, lowest address on
    /// ties, and counts the new client against it until the next heartbeat.
    pub fn request_relay(&mut self, now: Millis) -> Result<SocketAddrV4, RendezvousError> {
        let age = self.config.age_ms;
        let best = self
            .relays
            .values()
            .filter(|r| now.saturating_sub(r.last_heartbeat) <= age && r.load < r.capacity)
            .min_by(|a, b| {
                // a.load / a.cap vs b.load / b.cap without floating point.
                let lhs = a.load as u64 * b.capacity as u64;
                let rhs = b.load as u64 * a.capacity as u64;
                lhs.cmp(&rhs).then(a.addr.cmp(&b.addr))
            })
            .map(|r| r.addr)
            .ok_or(RendezvousError::NoRelayAvailable)?;
        if let Some(r) = self.relays.get_mut(&best) {
            r.load += 1;
        }
        Ok(best)
    }

    pub fn snapshot(&self, now: Millis) -> Snapshot {
        Snapshot {
            records: self.records.values().cloned().collect(),
            relays: self.relays.values().cloned().collect(),
            mailboxes: self.mailboxes.clone(),
            primary_addr: self.addr,
            taken_at: now,
        }
    }

    /// Replaces local state with a snapshot, keeping only records whose
    /// certificate and digests verify. Returns the number of rows dropped.
    pub fn apply_snapshot(&mut self, snapshot: &Snapshot) -> usize {
        let mut dropped = 0;
        self.records.clear();
        for stored in &snapshot.records {
            let ok = stored.certificate.username == stored.record.username
                && stored.certificate.verify(self.env.as_ref(), &self.ca_public)
                && stored.record.verify(&self.env, &stored.certificate.public_key);
            if ok {
                self.records.insert(
                    (stored.record.username.clone(), stored.record.priority),
                    stored.clone(),
                );
            } else {
                dropped += 1;
            }
        }
        self.passphrases.clear();
        let users: BTreeSet<String> = self.records.keys().map(|(u, _)| u.clone()).collect();
        for user in users {
            self.rebuild_passphrases_for(&user);
        }
        self.relays = snapshot.relays.iter().map(|r| (r.addr, r.clone())).collect();
        self.mailboxes = snapshot.mailboxes.clone();
        match self.announced_primary {
            Some((_, at)) if at > snapshot.taken_at => {}
            _ => self.announced_primary = Some((snapshot.primary_addr, snapshot.taken_at)),
        }
        dropped
    }

    /// Pushes a full snapshot to every backup. `reachable(i)` tells whether
    /// backup `i` can be contacted. Per-backup results are returned in order.
    pub fn sync_backups(
        &self,
        backups: &mut [RendezvousServer],
        reachable: impl Fn(usize) -> bool,
        now: Millis,
    ) -> Vec<Result<usize, RendezvousError>> {
        let snapshot = self.snapshot(now);
        backups
            .iter_mut()
            .enumerate()
            .map(|(i, backup)| {
                if reachable(i) {
                    Ok(backup.apply_snapshot(&snapshot))
                } else {
                    Err(RendezvousError::BackupUnreachable)
                }
            })
            .collect()
    }

    /// Records a new primary address announced at `at`. Later announcements
    /// win; an older one is ignored.
    pub fn accept_announcement(&mut self, addr: SocketAddrV4, at: Millis) {
        match self.announced_primary {
            Some((_, prev)) if prev > at => {}
            _ => self.announced_primary = Some((addr, at)),
        }
    }

    /// Primary address as known to this server.
    pub fn primary_addr(&self) -> Option<SocketAddrV4> {
        self.announced_primary.map(|(a, _)| a)
    }

    /// Every stored record that fails verification. Always empty for a
    /// correct server.
    pub fn audit(&self) -> Vec<(String, u8)> {
        self.records
            .iter()
            .filter(|(_, s)| {
                !(s.certificate.verify(self.env.as_ref(), &self.ca_public)
                    && s.record.verify(&self.env, &s.certificate.public_key))
            })
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Test hook: overwrite a stored record without verification, as a
    /// compromised database would.
    pub fn corrupt_record(&mut self, username: &str, priority: u8, f: impl FnOnce(&mut RegistrationRecord)) {
        if let Some(stored) = self.records.get_mut(&(username.to_string(), priority)) {
            f(&mut stored.record);
        }
    }
}

/// Moves the primary to `new_addr` and tells every reachable backup.
pub fn failover_announce(
    primary: &mut RendezvousServer,
    backups: &mut [RendezvousServer],
    reachable: impl Fn(usize) -> bool,
    new_addr: SocketAddrV4,
    now: Millis,
) -> Result<usize, RendezvousError> {
    let mut told = 0;
    for (i, backup) in backups.iter_mut().enumerate() {
        if reachable(i) {
            backup.accept_announcement(new_addr, now);
            told += 1;
        }
    }
    if told == 0 {
        return Err(RendezvousError::NoBackupAlive);
    }
    primary.addr = new_addr;
    Ok(told)
}
