//! Paged profile store.
//!
//! Entries are kept in id order and split into pages of `entries_per_page`.
//! The history log has one row per page with its first and last id. Deleting
//! appends a tombstone; the original stays in its page but is no longer read.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EntryId, EntryKind, ProfileEntry, ReplicationError, DEFAULT_ENTRIES_PER_PAGE, MAX_ENTRIES_PER_PAGE, MIN_ENTRIES_PER_PAGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub page: usize,
    pub first_id: EntryId,
    pub last_id: EntryId,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeOutcome {
    Inserted,
    Unchanged,
    /// A tombstone replaced different content at the same id.
    Replaced,
    /// Different content already held the id; the entry was stored at the
    /// next free id.
    Relocated(EntryId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileStore {
    pub owner: String,
    entries_per_page: usize,
    entries: BTreeMap<EntryId, ProfileEntry>,
    deleted: BTreeSet<EntryId>,
    version: u64,
}

impl ProfileStore {
    pub fn new(owner: &str, entries_per_page: usize) -> Result<Self, ReplicationError> {
        if !(MIN_ENTRIES_PER_PAGE..=MAX_ENTRIES_PER_PAGE).contains(&entries_per_page) {
            return Err(ReplicationError::BadPageSize);
        }
        Ok(ProfileStore {
            owner: owner.to_string(),
            entries_per_page,
            entries: BTreeMap::new(),
            deleted: BTreeSet::new(),
            version: 0,
        })
    }

    pub fn with_default_pages(owner: &str) -> Self {
        Self::new(owner, DEFAULT_ENTRIES_PER_PAGE).expect("default page size is valid")
    }

    pub fn entries_per_page(&self) -> usize {
        self.entries_per_page
    }

    /// Bumped on every change.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_id(&self) -> Option<EntryId> {
        self.entries.keys().next_back().copied()
    }

    /// The id a new entry created at `now` receives.
    pub fn next_id(&self, now: EntryId) -> EntryId {
        match self.last_id() {
            Some(last) if last >= now => last + 1,
            _ => now,
        }
    }

    pub fn append(&mut self, entry: ProfileEntry) -> Result<EntryId, ReplicationError> {
        if self.last_id().is_some_and(|last| entry.id <= last) {
            return Err(ReplicationError::OutOfOrder(entry.id));
        }
        if entry.is_tombstone() {
            let target = entry.parent_id.ok_or(ReplicationError::UnknownId(entry.id))?;
            if !self.entries.contains_key(&target) {
                return Err(ReplicationError::UnknownId(target));
            }
            self.deleted.insert(target);
        }
        let id = entry.id;
        self.entries.insert(id, entry);
        self.version += 1;
        Ok(id)
    }

    /// Creates and appends an entry at the next free id.
    pub fn create(
        &mut self,
        now: EntryId,
        kind: EntryKind,
        author: &str,
        shared_with: &str,
        body: &[u8],
        parent_id: Option<EntryId>,
    ) -> Result<EntryId, ReplicationError> {
        let entry = ProfileEntry {
            id: self.next_id(now),
            kind,
            author: author.to_string(),
            shared_with: shared_with.to_string(),
            body: body.to_vec(),
            parent_id,
        };
        self.append(entry)
    }

    /// Deletes `id` on behalf of `by`, who must be the owner or the author.
    pub fn delete(&mut self, id: EntryId, by: &str, now: EntryId) -> Result<EntryId, ReplicationError> {
        let target = self.read(id).ok_or(ReplicationError::UnknownId(id))?;
        if by != self.owner && by != target.author {
            return Err(ReplicationError::PermissionDenied);
        }
        let zone = target.shared_with.clone();
        self.create(now, EntryKind::DeletedEntry, by, &zone, &[], Some(id))
    }

    pub fn get(&self, id: EntryId) -> Option<&ProfileEntry> {
        self.entries.get(&id)
    }

    /// A readable entry: not a tombstone and not deleted.
    pub fn read(&self, id: EntryId) -> Option<&ProfileEntry> {
        self.entries
            .get(&id)
            .filter(|e| !e.is_tombstone() && !self.deleted.contains(&id))
    }

    pub fn is_deleted(&self, id: EntryId) -> bool {
        self.deleted.contains(&id)
    }

    /// Every stored entry, tombstones and deleted originals included.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &ProfileEntry> {
        self.entries.values()
    }

    pub fn entries_after(&self, since: EntryId) -> impl Iterator<Item = &ProfileEntry> {
        self.entries.range(since.saturating_add(1)..).map(|(_, e)| e)
    }

    pub fn live_entries(&self) -> impl Iterator<Item = &ProfileEntry> {
        self.entries
            .values()
            .filter(|e| !e.is_tombstone() && !self.deleted.contains(&e.id))
    }

    pub fn ids(&self) -> BTreeSet<EntryId> {
        self.entries.keys().copied().collect()
    }

    pub fn pages(&self) -> Vec<Vec<&ProfileEntry>> {
        let all: Vec<&ProfileEntry> = self.entries.values().collect();
        all.chunks(self.entries_per_page).map(<[_]>::to_vec).collect()
    }

    pub fn history(&self) -> Vec<HistoryRow> {
        self.pages()
            .iter()
            .enumerate()
            .map(|(page, entries)| HistoryRow {
                page,
                first_id: entries[0].id,
                last_id: entries[entries.len() - 1].id,
                count: entries.len(),
            })
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(ProfileEntry::size).sum()
    }

    /// Folds in an entry from another replica of the same profile.
    pub fn merge(&mut self, entry: ProfileEntry) -> MergeOutcome {
        match self.entries.get(&entry.id) {
            None => {
                if let (true, Some(p)) = (entry.is_tombstone(), entry.parent_id) {
                    self.deleted.insert(p);
                }
                self.entries.insert(entry.id, entry);
                self.version += 1;
                MergeOutcome::Inserted
            }
            Some(existing) if *existing == entry => MergeOutcome::Unchanged,
            Some(existing) if existing.is_tombstone() => MergeOutcome::Unchanged,
            Some(_) if entry.is_tombstone() => {
                if let Some(p) = entry.parent_id {
                    self.deleted.insert(p);
                }
                self.entries.insert(entry.id, entry);
                self.version += 1;
                MergeOutcome::Replaced
            }
            Some(_) => {
                let mut id = entry.id + 1;
                while self.entries.contains_key(&id) {
                    id += 1;
                }
                let moved = ProfileEntry { id, ..entry };
                self.entries.insert(id, moved);
                self.version += 1;
                MergeOutcome::Relocated(id)
            }
        }
    }

    /// Replaces the contents with `entries`, as when adopting the owner's
    /// image on a mirror.
    pub fn replace_all(&mut self, entries: impl IntoIterator<Item = ProfileEntry>) {
        let before = self.ids();
        self.entries.clear();
        self.deleted.clear();
        for e in entries {
            if let (true, Some(p)) = (e.is_tombstone(), e.parent_id) {
                self.deleted.insert(p);
            }
            self.entries.insert(e.id, e);
        }
        if self.ids() != before || before.is_empty() {
            self.version += 1;
        }
    }

    /// The longest id-ordered suffix whose total size fits in `capacity`.
    pub fn newest_within(&self, capacity: u64) -> Vec<ProfileEntry> {
        let mut used = 0u64;
        let mut out: Vec<ProfileEntry> = Vec::new();
        for e in self.entries.values().rev() {
            used += e.size();
            if used > capacity {
                break;
            }
            out.push(e.clone());
        }
        out.reverse();
        out
    }

    /// Drops every entry with id `<= upto`. Used for cache eviction.
    pub fn evict_through(&mut self, upto: EntryId) -> usize {
        let keep = self.entries.split_off(&(upto + 1));
        let dropped = std::mem::replace(&mut self.entries, keep).len();
        if dropped > 0 {
            self.deleted = self
                .entries
                .values()
                .filter(|e| e.is_tombstone())
                .filter_map(|e| e.parent_id)
                .collect();
            self.version += 1;
        }
        dropped
    }
}
