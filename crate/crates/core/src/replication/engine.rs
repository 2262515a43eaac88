//! Per-device replication engine.
//!
//! A device plays two roles. As a client it pulls friends' updates, flushes
//! its posting queue and, when it belongs to the profile owner, synchronizes
//! the owner's replicas. As a server it answers delta requests and absorbs
//! posts for its own profile and for every profile it mirrors.
//!
//! Session outcomes are decided by the caller (`link_ok`): a session either
//! completes or leaves no trace on either side.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::delta::{audit, compute_delta, compute_range, FriendCache, BUNDLE_OVERHEAD};
use super::message::SealedMessage;
use super::store::MergeOutcome;
use super::zones::{check_write, ZoneTable};
use super::{EntryId, EntryKind, ProfileEntry, ProfileStore, ReplicationError, DEFAULT_ENTRIES_PER_PAGE};
use crate::{Millis, MINUTE};

/// Bytes exchanged by a sync round that finds nothing to do.
pub const SYNC_PROBE_BYTES: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settings {
    pub entries_per_page: usize,
    pub rendezvous_addr: String,
    pub stun_addr: String,
    pub server_port: u16,
    pub cache_size_bytes: u64,
    pub priority: u8,
    pub sync_period_ms: Millis,
    pub refresh_ms: Millis,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            entries_per_page: DEFAULT_ENTRIES_PER_PAGE,
            rendezvous_addr: "rendezvous:5999".into(),
            stun_addr: "stun:3478".into(),
            server_port: 5000,
            cache_size_bytes: 50 * 1024 * 1024,
            priority: 0,
            sync_period_ms: 5 * MINUTE,
            refresh_ms: 30 * MINUTE,
        }
    }
}

/// A full profile as held by its owner or a replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileImage {
    pub store: ProfileStore,
    pub zones: ZoneTable,
    pub outbox: Vec<SealedMessage>,
}

impl ProfileImage {
    pub fn new(owner: &str) -> Self {
        ProfileImage {
            store: ProfileStore::with_default_pages(owner),
            zones: ZoneTable::new(owner),
            outbox: Vec::new(),
        }
    }

    pub fn owner(&self) -> &str {
        &self.store.owner
    }
}

/// A copy of a profile this device serves: the owner's own image on the
/// primary device, a replica on a secondary device or a mirror.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub image: ProfileImage,
    /// `None` for the owner's own devices.
    pub capacity_bytes: Option<u64>,
    /// Device priority (1, 2) or mirror rank (1..k, offset by 2).
    pub order: u32,
    /// Posts absorbed since the last sync, awaiting pickup by the owner.
    pub absorbed: Vec<ProfileEntry>,
    /// `(author, submitted id)` of every post ever accepted, for dedup.
    pub seen_posts: BTreeSet<(String, EntryId)>,
}

impl Replica {
    pub fn new(owner: &str, capacity_bytes: Option<u64>, order: u32) -> Self {
        Replica {
            image: ProfileImage::new(owner),
            capacity_bytes,
            order,
            absorbed: Vec::new(),
            seen_posts: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPost {
    pub target: String,
    pub entry: ProfileEntry,
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: Millis,
    pub target: String,
    pub entry_id: EntryId,
    pub reason: ReplicationError,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionError {
    #[error("session failed")]
    SessionFailed,
    #[error("device does not serve {0}'s profile")]
    NotServing(String),
    #[error("bundle failed the visibility audit")]
    VisibilityViolation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullOutcome {
    pub applied: usize,
    pub transmitted: Vec<EntryId>,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushOutcome {
    pub delivered: Vec<EntryId>,
    pub rejected: Vec<EntryId>,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub pulled: usize,
    pub pushed_to: Vec<String>,
    pub unreachable: Vec<String>,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Device {
    pub user: String,
    pub priority: u8,
    pub settings: Settings,
    /// This user's own profile.
    pub own: Replica,
    pub friends: BTreeMap<String, FriendCache>,
    pub mirrored: BTreeMap<String, Replica>,
    pub pending: Vec<PendingPost>,
    pub inbox: Vec<SealedMessage>,
    pub audit_log: Vec<AuditRecord>,
    last_post_id: EntryId,
}

impl Device {
    pub fn new(user: &str, priority: u8) -> Self {
        Device {
            user: user.to_string(),
            priority,
            settings: Settings {
                priority,
                ..Settings::default()
            },
            own: Replica::new(user, None, priority as u32),
            friends: BTreeMap::new(),
            mirrored: BTreeMap::new(),
            pending: Vec::new(),
            inbox: Vec::new(),
            audit_log: Vec::new(),
            last_post_id: 0,
        }
    }

    pub fn last_post_id(&self) -> EntryId {
        self.last_post_id
    }

    pub fn set_last_post_id(&mut self, id: EntryId) {
        self.last_post_id = id;
    }

    pub fn is_primary(&self) -> bool {
        self.priority == 0
    }

    /// The replica of `owner`'s profile held here, if any.
    pub fn replica(&self, owner: &str) -> Option<&Replica> {
        if owner == self.user {
            Some(&self.own)
        } else {
            self.mirrored.get(owner)
        }
    }

    pub fn replica_mut(&mut self, owner: &str) -> Option<&mut Replica> {
        if owner == self.user {
            Some(&mut self.own)
        } else {
            self.mirrored.get_mut(owner)
        }
    }

    /// Starts hosting `owner`'s profile as a mirror of the given rank.
    pub fn host_mirror(&mut self, owner: &str, rank: u32, capacity_bytes: u64) {
        self.mirrored
            .entry(owner.to_string())
            .or_insert_with(|| Replica::new(owner, Some(capacity_bytes), rank + 2));
    }

    pub fn drop_mirror(&mut self, owner: &str) {
        self.mirrored.remove(owner);
    }

    /// Posts to this user's own profile.
    pub fn post_own(
        &mut self,
        now: Millis,
        kind: EntryKind,
        zone: &str,
        body: &[u8],
        parent: Option<EntryId>,
    ) -> Result<EntryId, ReplicationError> {
        let user = self.user.clone();
        self.own.image.store.create(now, kind, &user, zone, body, parent)
    }

    /// Queues a post for a friend's profile and returns its id.
    pub fn queue_post(
        &mut self,
        target: &str,
        now: Millis,
        kind: EntryKind,
        zone: &str,
        body: &[u8],
        parent: Option<EntryId>,
    ) -> EntryId {
        let id = now.max(self.last_post_id + 1);
        self.last_post_id = id;
        self.pending.push(PendingPost {
            target: target.to_string(),
            entry: ProfileEntry {
                id,
                kind,
                author: self.user.clone(),
                shared_with: zone.to_string(),
                body: body.to_vec(),
                parent_id: parent,
            },
            attempts: 0,
        });
        id
    }

    pub fn pending_for(&self, target: &str) -> usize {
        self.pending.iter().filter(|p| p.target == target).count()
    }

    /// Server side of a post: permission check, dedup, store.
    pub fn absorb_post(&mut self, owner: &str, entry: ProfileEntry) -> Result<EntryId, ReplicationError> {
        let is_owner_device = owner == self.user;
        let replica = self.replica_mut(owner).ok_or(ReplicationError::PermissionDenied)?;
        let key = (entry.author.clone(), entry.id);
        if replica.seen_posts.contains(&key) {
            return Ok(entry.id);
        }
        check_write(&replica.image.store, &replica.image.zones, &entry, &entry.author.clone())?;
        let id = replica.image.store.next_id(entry.id);
        let stored = ProfileEntry { id, ..entry };
        replica.image.store.append(stored.clone())?;
        replica.seen_posts.insert(key);
        if !is_owner_device || replica.capacity_bytes.is_some() || replica.order > 0 {
            replica.absorbed.push(stored);
        }
        Ok(id)
    }

    /// Answers a delta request for `owner`'s profile.
    pub fn serve_delta(&self, owner: &str, friend: &str, since: EntryId, now: Millis) -> Result<super::DeltaBundle, SessionError> {
        let replica = self
            .replica(owner)
            .ok_or_else(|| SessionError::NotServing(owner.to_string()))?;
        Ok(compute_delta(&replica.image.store, &replica.image.zones, friend, since, now))
    }

    /// Client side of an update session against `server`.
    pub fn pull_updates(&mut self, server: &Device, owner: &str, now: Millis, link_ok: bool) -> Result<PullOutcome, SessionError> {
        let since = self.friends.get(owner).map_or(0, |c| c.watermark);
        let bundle = server.serve_delta(owner, &self.user, since, now)?;
        if let Some(r) = server.replica(owner) {
            if !audit(&r.image.store, &r.image.zones, &bundle) {
                return Err(SessionError::VisibilityViolation);
            }
        }
        if !link_ok {
            return Err(SessionError::SessionFailed);
        }
        let cache = self
            .friends
            .entry(owner.to_string())
            .or_insert_with(|| FriendCache::new(owner));
        let applied = cache.apply(&bundle);
        // Messages for this device ride along with the update.
        if let Some(r) = server.replica(owner) {
            for m in r.image.outbox.iter().filter(|m| m.to == self.user) {
                if !self.inbox.iter().any(|x| x.id == m.id && x.from == m.from) {
                    self.inbox.push(m.clone());
                }
            }
        }
        Ok(PullOutcome {
            applied,
            transmitted: bundle.entries.iter().map(|e| e.id).collect(),
            bytes: bundle.wire_bytes(),
        })
    }

    /// Re-fetches the oldest evicted range of `owner`'s cache.
    pub fn refetch_evicted(&mut self, server: &Device, owner: &str, now: Millis) -> Result<usize, SessionError> {
        let Some(&(after, upto)) = self.friends.get(owner).and_then(|c| c.evicted.first()) else {
            return Ok(0);
        };
        let replica = server
            .replica(owner)
            .ok_or_else(|| SessionError::NotServing(owner.to_string()))?;
        let bundle = compute_range(&replica.image.store, &replica.image.zones, &self.user, after, upto, now);
        Ok(self.friends.get_mut(owner).map_or(0, |c| c.apply_range(&bundle)))
    }

    /// Flushes queued posts for `target` to `server`.
    pub fn push_posts(&mut self, server: &mut Device, target: &str, now: Millis, link_ok: bool) -> Result<PushOutcome, SessionError> {
        if server.replica(target).is_none() {
            return Err(SessionError::NotServing(target.to_string()));
        }
        let mut out = PushOutcome::default();
        if !link_ok {
            for p in self.pending.iter_mut().filter(|p| p.target == target) {
                p.attempts += 1;
            }
            return Err(SessionError::SessionFailed);
        }
        let mut keep = Vec::with_capacity(self.pending.len());
        for p in std::mem::take(&mut self.pending) {
            if p.target != target {
                keep.push(p);
                continue;
            }
            out.bytes += p.entry.size();
            match server.absorb_post(target, p.entry.clone()) {
                Ok(_) => out.delivered.push(p.entry.id),
                Err(reason) => {
                    out.rejected.push(p.entry.id);
                    self.audit_log.push(AuditRecord {
                        at: now,
                        target: target.to_string(),
                        entry_id: p.entry.id,
                        reason,
                    });
                }
            }
        }
        self.pending = keep;
        out.bytes += BUNDLE_OVERHEAD;
        Ok(out)
    }
}

/// One synchronization round run by an owner device. `replicas` are the
/// owner's other devices and the devices mirroring the profile, each with a
/// reachability flag; they are visited in replica order (devices by
/// priority, then mirrors by rank).
pub fn sync_with_replicas(master: &mut Device, replicas: &mut [(&mut Device, bool)], _now: Millis) -> SyncReport {
    let owner = master.user.clone();
    let mut report = SyncReport::default();
    replicas.sort_by_key(|(d, _)| d.replica(&owner).map_or(u32::MAX, |r| r.order));

    // Pull what each replica absorbed and merge it.
    for (dev, reachable) in replicas.iter_mut() {
        let Some(rep) = dev.replica_mut(&owner) else { continue };
        if !*reachable {
            continue;
        }
        report.bytes += SYNC_PROBE_BYTES;
        let absorbed = std::mem::take(&mut rep.absorbed);
        report.bytes += absorbed.iter().map(ProfileEntry::size).sum::<u64>();
        let seen: Vec<(String, EntryId)> = rep.seen_posts.iter().cloned().collect();
        for e in absorbed {
            if let MergeOutcome::Inserted | MergeOutcome::Replaced | MergeOutcome::Relocated(_) = master.own.image.store.merge(e) {
                report.pulled += 1;
            }
        }
        master.own.seen_posts.extend(seen);
    }
    // Entries the master itself absorbed as a secondary device are now merged.
    master.own.absorbed.clear();

    // Push the merged image back.
    let image = &master.own.image;
    for (dev, reachable) in replicas.iter_mut() {
        let name = format!("{}#{}", dev.user, dev.priority);
        let Some(rep) = dev.replica_mut(&owner) else { continue };
        if !*reachable {
            report.unreachable.push(name);
            continue;
        }
        let target: Vec<ProfileEntry> = match rep.capacity_bytes {
            Some(cap) => image.store.newest_within(cap),
            None => image.store.entries().cloned().collect(),
        };
        let held = rep.image.store.ids();
        let fresh: u64 = target.iter().filter(|e| !held.contains(&e.id) || rep.image.store.get(e.id) != Some(e)).map(ProfileEntry::size).sum();
        let same = fresh == 0 && held.len() == target.len() && rep.image.zones == image.zones && rep.image.outbox == image.outbox;
        if !same {
            rep.image.store.replace_all(target);
            rep.image.zones = image.zones.clone();
            rep.image.outbox = image.outbox.clone();
            report.bytes += BUNDLE_OVERHEAD + fresh;
        }
        rep.seen_posts.extend(master.own.seen_posts.iter().cloned());
        report.pushed_to.push(name);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replication::zones::FriendStatus;
    use crate::replication::ALL_ZONE;

    fn befriend(devs: &mut [&mut Device]) {
        let names: Vec<String> = devs.iter().map(|d| d.user.clone()).collect();
        for d in devs.iter_mut() {
            for n in &names {
                if *n != d.user {
                    d.own.image.zones.set_friend(n, FriendStatus::Active);
                }
            }
        }
    }

    #[test]
    fn pull_is_atomic_and_idempotent() {
        let mut alice = Device::new("alice", 0);
        let mut bob = Device::new("bob", 0);
        befriend(&mut [&mut alice, &mut bob]);
        for t in 1..=5 {
            alice.post_own(t, EntryKind::Status, ALL_ZONE, b"s", None).unwrap();
        }
        assert_eq!(bob.pull_updates(&alice, "alice", 10, false), Err(SessionError::SessionFailed));
        assert!(bob.friends.get("alice").is_none_or(|c| c.watermark == 0));
        let first = bob.pull_updates(&alice, "alice", 11, true).unwrap();
        assert_eq!(first.applied, 5);
        let second = bob.pull_updates(&alice, "alice", 12, true).unwrap();
        assert_eq!((second.applied, second.transmitted.len()), (0, 0));
    }

    #[test]
    fn posts_stay_queued_until_delivered_once() {
        let mut alice = Device::new("alice", 0);
        let mut bob = Device::new("bob", 0);
        befriend(&mut [&mut alice, &mut bob]);
        let id = bob.queue_post("alice", 100, EntryKind::WallPost, ALL_ZONE, b"hey", None);
        for _ in 0..3 {
            assert!(bob.push_posts(&mut alice, "alice", 101, false).is_err());
            assert_eq!(bob.pending_for("alice"), 1);
        }
        let out = bob.push_posts(&mut alice, "alice", 102, true).unwrap();
        assert_eq!(out.delivered, vec![id]);
        assert_eq!(bob.pending_for("alice"), 0);
        // A replayed delivery does not duplicate the entry.
        let replay = ProfileEntry {
            id,
            kind: EntryKind::WallPost,
            author: "bob".into(),
            shared_with: ALL_ZONE.into(),
            body: b"hey".to_vec(),
            parent_id: None,
        };
        alice.absorb_post("alice", replay).unwrap();
        assert_eq!(alice.own.image.store.entries().filter(|e| e.author == "bob").count(), 1);
    }

    #[test]
    fn post_outside_zone_is_dropped_with_audit() {
        let mut alice = Device::new("alice", 0);
        let mut bob = Device::new("bob", 0);
        befriend(&mut [&mut alice, &mut bob]);
        alice.own.image.zones.define_zone("family");
        bob.queue_post("alice", 5, EntryKind::WallPost, "family", b"x", None);
        let out = bob.push_posts(&mut alice, "alice", 6, true).unwrap();
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(bob.pending_for("alice"), 0);
        assert_eq!(bob.audit_log[0].reason, ReplicationError::PermissionDenied);
    }

    #[test]
    fn idle_sync_costs_only_probes() {
        let mut alice = Device::new("alice", 0);
        let mut m = Device::new("mike", 0);
        alice.own.image.zones.set_friend("mike", FriendStatus::Active);
        m.host_mirror("alice", 1, 1_000_000);
        alice.post_own(1, EntryKind::Status, ALL_ZONE, b"s", None).unwrap();
        let r1 = sync_with_replicas(&mut alice, &mut [(&mut m, true)], 10);
        assert!(r1.bytes > SYNC_PROBE_BYTES);
        let r2 = sync_with_replicas(&mut alice, &mut [(&mut m, true)], 20);
        assert_eq!(r2.bytes, SYNC_PROBE_BYTES);
    }
}
