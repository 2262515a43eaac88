//! Zones and visibility.
//!
//! An entry is shared with one zone. Comments, likes, dislikes and
//! tombstones take the zone of the entry they hang off. The zone `All` holds
//! every active friend; a zone name the owner never defined admits only the
//! owner.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ProfileEntry, ProfileStore, ReplicationError};

pub const ALL_ZONE: &str = "All";

const MAX_PARENT_DEPTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FriendStatus {
    PendingSent,
    PendingReceived,
    Active,
    Revoked,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneTable {
    pub owner: String,
    zones: BTreeMap<String, BTreeSet<String>>,
    friends: BTreeMap<String, FriendStatus>,
}

impl ZoneTable {
    pub fn new(owner: &str) -> Self {
        ZoneTable {
            owner: owner.to_string(),
            ..Default::default()
        }
    }

    pub fn set_friend(&mut self, friend: &str, status: FriendStatus) {
        self.friends.insert(friend.to_string(), status);
        if status == FriendStatus::Revoked {
            for members in self.zones.values_mut() {
                members.remove(friend);
            }
        }
    }

    pub fn status(&self, friend: &str) -> Option<FriendStatus> {
        self.friends.get(friend).copied()
    }

    pub fn is_active(&self, friend: &str) -> bool {
        self.status(friend) == Some(FriendStatus::Active)
    }

    pub fn active_friends(&self) -> impl Iterator<Item = &str> {
        self.friends
            .iter()
            .filter(|(_, s)| **s == FriendStatus::Active)
            .map(|(f, _)| f.as_str())
    }

    pub fn define_zone(&mut self, zone: &str) {
        if zone != ALL_ZONE {
            self.zones.entry(zone.to_string()).or_default();
        }
    }

    pub fn add_member(&mut self, zone: &str, friend: &str) {
        if zone != ALL_ZONE {
            self.zones
                .entry(zone.to_string())
                .or_default()
                .insert(friend.to_string());
        }
    }

    pub fn remove_member(&mut self, zone: &str, friend: &str) {
        if let Some(m) = self.zones.get_mut(zone) {
            m.remove(friend);
        }
    }

    pub fn zone_names(&self) -> Vec<String> {
        std::iter::once(ALL_ZONE.to_string())
            .chain(self.zones.keys().cloned())
            .collect()
    }

    pub fn members(&self, zone: &str) -> BTreeSet<String> {
        if zone == ALL_ZONE {
            return self.active_friends().map(String::from).collect();
        }
        self.zones
            .get(zone)
            .map(|m| m.iter().filter(|f| self.is_active(f)).cloned().collect())
            .unwrap_or_default()
    }

    /// Whether `user` may read entries shared with `zone`.
    pub fn admits(&self, zone: &str, user: &str) -> bool {
        if user == self.owner {
            return true;
        }
        if !self.is_active(user) {
            return false;
        }
        if zone == ALL_ZONE {
            return true;
        }
        self.zones.get(zone).is_some_and(|m| m.contains(user))
    }
}

/// The zone that governs `entry`: its own for top-level entries, the root
/// ancestor's otherwise. `None` when a parent is missing.
pub fn effective_zone<'a>(store: &'a ProfileStore, entry: &'a ProfileEntry) -> Option<&'a str> {
    let mut cur = entry;
    for _ in 0..MAX_PARENT_DEPTH {
        if !cur.kind.needs_parent() {
            return Some(&cur.shared_with);
        }
        cur = store.get(cur.parent_id?)?;
    }
    None
}

pub fn visible_to(store: &ProfileStore, zones: &ZoneTable, entry: &ProfileEntry, user: &str) -> bool {
    if user == zones.owner {
        return true;
    }
    match effective_zone(store, entry) {
        Some(zone) => zones.admits(zone, user),
        None => false,
    }
}

/// Server-side write check for an entry submitted by `writer`.
pub fn check_write(store: &ProfileStore, zones: &ZoneTable, entry: &ProfileEntry, writer: &str) -> Result<(), ReplicationError> {
    if entry.author != writer {
        return Err(ReplicationError::PermissionDenied);
    }
    if writer == zones.owner {
        return Ok(());
    }
    if !zones.is_active(writer) {
        return Err(ReplicationError::PermissionDenied);
    }
    if entry.kind.needs_parent() {
        let parent = entry.parent_id.ok_or(ReplicationError::PermissionDenied)?;
        let target = store.read(parent).ok_or(ReplicationError::UnknownId(parent))?;
        if !visible_to(store, zones, target, writer) {
            return Err(ReplicationError::PermissionDenied);
        }
        if entry.is_tombstone() && target.author != writer {
            return Err(ReplicationError::PermissionDenied);
        }
        Ok(())
    } else if zones.admits(&entry.shared_with, writer) {
        Ok(())
    } else {
        Err(ReplicationError::PermissionDenied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replication::EntryKind;

    fn fixture() -> (ProfileStore, ZoneTable, u64) {
        let mut z = ZoneTable::new("alice");
        for f in ["bob", "carol", "dave"] {
            z.set_friend(f, FriendStatus::Active);
        }
        z.set_friend("eve", FriendStatus::PendingReceived);
        z.add_member("family", "bob");
        let mut s = ProfileStore::with_default_pages("alice");
        let post = s.create(1, EntryKind::WallPost, "alice", "family", b"p", None).unwrap();
        (s, z, post)
    }

    #[test]
    fn zone_membership() {
        let (s, z, post) = fixture();
        let e = s.get(post).unwrap();
        assert!(visible_to(&s, &z, e, "bob"));
        assert!(!visible_to(&s, &z, e, "carol"));
        assert!(visible_to(&s, &z, e, "alice"));
    }

    #[test]
    fn comments_inherit_parent_zone() {
        let (mut s, z, post) = fixture();
        let c = s.create(2, EntryKind::Comment, "bob", "All", b"c", Some(post)).unwrap();
        let like = s.create(3, EntryKind::Like, "bob", "All", b"", Some(c)).unwrap();
        for id in [c, like] {
            let e = s.get(id).unwrap();
            assert!(visible_to(&s, &z, e, "bob"));
            assert!(!visible_to(&s, &z, e, "carol"));
        }
    }

    #[test]
    fn all_zone_means_active_friends() {
        let (mut s, mut z, _) = fixture();
        let id = s.create(5, EntryKind::Status, "alice", ALL_ZONE, b"", None).unwrap();
        let e = s.get(id).unwrap().clone();
        assert!(visible_to(&s, &z, &e, "carol"));
        assert!(!visible_to(&s, &z, &e, "eve"));
        assert!(!visible_to(&s, &z, &e, "stranger"));
        z.set_friend("carol", FriendStatus::Revoked);
        assert!(!visible_to(&s, &z, &e, "carol"));
    }

    #[test]
    fn unknown_zone_is_owner_only() {
        let (mut s, z, _) = fixture();
        let id = s.create(5, EntryKind::Status, "alice", "nosuchzone", b"", None).unwrap();
        let e = s.get(id).unwrap();
        assert!(!visible_to(&s, &z, e, "bob"));
        assert!(visible_to(&s, &z, e, "alice"));
    }

    #[test]
    fn write_checks() {
        let (s, z, post) = fixture();
        let mk = |kind, author: &str, zone: &str, parent| ProfileEntry {
            id: 100,
            kind,
            author: author.into(),
            shared_with: zone.into(),
            body: vec![],
            parent_id: parent,
        };
        assert!(check_write(&s, &z, &mk(EntryKind::WallPost, "bob", "family", None), "bob").is_ok());
        assert_eq!(
            check_write(&s, &z, &mk(EntryKind::WallPost, "carol", "family", None), "carol"),
            Err(ReplicationError::PermissionDenied)
        );
        assert_eq!(
            check_write(&s, &z, &mk(EntryKind::Comment, "carol", "All", Some(post)), "carol"),
            Err(ReplicationError::PermissionDenied)
        );
        assert!(check_write(&s, &z, &mk(EntryKind::Comment, "bob", "All", Some(post)), "bob").is_ok());
        assert_eq!(
            check_write(&s, &z, &mk(EntryKind::WallPost, "bob", "All", None), "carol"),
            Err(ReplicationError::PermissionDenied)
        );
        assert_eq!(
            check_write(&s, &z, &mk(EntryKind::WallPost, "eve", "All", None), "eve"),
            Err(ReplicationError::PermissionDenied)
        );
    }
}
