//! Delta bundles and the friend-side cache they are applied to.

use serde::{Deserialize, Serialize};

use super::zones::{visible_to, ZoneTable};
use super::{EntryId, ProfileEntry, ProfileStore};
use crate::Millis;

/// Fixed per-bundle framing overhead counted on the wire.
pub const BUNDLE_OVERHEAD: u64 = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaBundle {
    pub owner: String,
    pub for_friend: String,
    pub since: EntryId,
    pub entries: Vec<ProfileEntry>,
    pub produced_at: Millis,
    /// Highest id the serving store held when the bundle was produced. The
    /// friend's watermark advances to this value on success.
    pub high_water: EntryId,
}

impl DeltaBundle {
    pub fn wire_bytes(&self) -> u64 {
        BUNDLE_OVERHEAD + self.entries.iter().map(ProfileEntry::size).sum::<u64>()
    }
}

fn deliverable(store: &ProfileStore, zones: &ZoneTable, e: &ProfileEntry, friend: &str) -> bool {
    !store.is_deleted(e.id) && visible_to(store, zones, e, friend)
}

/// Every entry newer than `since` that `friend` may see, tombstones
/// included and deleted originals excluded, in id order.
pub fn compute_delta(store: &ProfileStore, zones: &ZoneTable, friend: &str, since: EntryId, now: Millis) -> DeltaBundle {
    DeltaBundle {
        owner: store.owner.clone(),
        for_friend: friend.to_string(),
        since,
        entries: store
            .entries_after(since)
            .filter(|e| deliverable(store, zones, e, friend))
            .cloned()
            .collect(),
        produced_at: now,
        high_water: store.last_id().unwrap_or(0).max(since),
    }
}

/// Entries with ids in `(after, upto]`, for re-fetching evicted pages.
pub fn compute_range(
    store: &ProfileStore,
    zones: &ZoneTable,
    friend: &str,
    after: EntryId,
    upto: EntryId,
    now: Millis,
) -> DeltaBundle {
    let mut b = compute_delta(store, zones, friend, after, now);
    b.entries.retain(|e| e.id <= upto);
    b.high_water = upto;
    b
}

/// True iff every entry in `bundle` is visible to its recipient and newer
/// than `since`.
pub fn audit(store: &ProfileStore, zones: &ZoneTable, bundle: &DeltaBundle) -> bool {
    bundle
        .entries
        .iter()
        .all(|e| e.id > bundle.since && visible_to(store, zones, e, &bundle.for_friend))
}

/// A friend's locally cached copy of someone else's profile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FriendCache {
    pub store: ProfileStore,
    pub watermark: EntryId,
    /// Id ranges dropped by the cleaner, as `(after, upto]`.
    pub evicted: Vec<(EntryId, EntryId)>,
}

impl FriendCache {
    pub fn new(owner: &str) -> Self {
        FriendCache {
            store: ProfileStore::with_default_pages(owner),
            watermark: 0,
            evicted: Vec::new(),
        }
    }

    /// Applies a bundle atomically and returns how many entries were new.
    pub fn apply(&mut self, bundle: &DeltaBundle) -> usize {
        let before = self.store.len();
        for e in &bundle.entries {
            self.store.merge(e.clone());
        }
        if bundle.since <= self.watermark {
            self.watermark = self.watermark.max(bundle.high_water);
        }
        self.store.len() - before
    }

    /// Applies a re-fetched range and forgets it as evicted.
    pub fn apply_range(&mut self, bundle: &DeltaBundle) -> usize {
        let before = self.store.len();
        for e in &bundle.entries {
            self.store.merge(e.clone());
        }
        self.evicted.retain(|r| *r != (bundle.since, bundle.high_water));
        self.store.len() - before
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replication::zones::FriendStatus;
    use crate::replication::EntryKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_profile(seed: u64, n: usize) -> (ProfileStore, ZoneTable, Vec<String>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let friends: Vec<String> = (0..20).map(|i| format!("f{i}")).collect();
        let mut zones = ZoneTable::new("owner");
        for f in &friends {
            zones.set_friend(f, FriendStatus::Active);
        }
        let names = ["z0", "z1", "z2", "z3", "All"];
        for z in &names[..4] {
            for f in &friends {
                if rng.gen_bool(0.4) {
                    zones.add_member(z, f);
                }
            }
        }
        let mut store = ProfileStore::with_default_pages("owner");
        let mut t = 0;
        for _ in 0..n {
            t += rng.gen_range(1..5);
            let live: Vec<u64> = store.live_entries().map(|e| e.id).collect();
            let roll = rng.gen_range(0..10);
            if roll < 2 && !live.is_empty() {
                let p = live[rng.gen_range(0..live.len())];
                store.create(t, EntryKind::Comment, "f1", "All", b"c", Some(p)).unwrap();
            } else if roll < 3 && !live.is_empty() {
                let p = live[rng.gen_range(0..live.len())];
                store.delete(p, "owner", t).unwrap();
            } else {
                let z = names[rng.gen_range(0..names.len())];
                store.create(t, EntryKind::WallPost, "owner", z, &[roll as u8], None).unwrap();
            }
        }
        (store, zones, friends)
    }

    #[test]
    fn delta_edges() {
        let (store, zones, _) = random_profile(1, 50);
        let last = store.last_id().unwrap();
        assert!(compute_delta(&store, &zones, "f3", last, 0).entries.is_empty());
        let all = compute_delta(&store, &zones, "owner", 0, 0);
        assert_eq!(all.entries.len(), store.entries().filter(|e| !store.is_deleted(e.id)).count());
    }

    #[test]
    fn two_pulls_second_is_empty() {
        let (store, zones, _) = random_profile(2, 80);
        let mut cache = FriendCache::new("owner");
        let b1 = compute_delta(&store, &zones, "f4", cache.watermark, 1);
        assert!(audit(&store, &zones, &b1));
        assert!(cache.apply(&b1) > 0);
        let b2 = compute_delta(&store, &zones, "f4", cache.watermark, 2);
        assert_eq!(cache.apply(&b2), 0);
        assert!(b2.entries.is_empty());
    }

    #[test]
    fn range_refetch_restores_evicted_entries() {
        let (store, zones, _) = random_profile(3, 300);
        let mut cache = FriendCache::new("owner");
        cache.apply(&compute_delta(&store, &zones, "owner", 0, 1));
        let full = cache.store.ids();
        let cut = cache.store.history()[0].last_id;
        cache.store.evict_through(cut);
        cache.evicted.push((0, cut));
        let b = compute_range(&store, &zones, "owner", 0, cut, 2);
        cache.apply_range(&b);
        assert_eq!(cache.store.ids(), full);
        assert!(cache.evicted.is_empty());
    }
}
