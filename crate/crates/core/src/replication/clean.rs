//! Storage cleaning.
//!
//! The correct image is the set of files the device should hold; the
//! existing image is what is on disk. Files only in the existing image are
//! deleted. If the friends cache is over its limit, whole pages are evicted
//! from friends' caches, oldest last id first, until it fits. The owner's
//! profile and mirrored profiles are never evicted.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::disk::correct_image;
use super::engine::Device;
use super::EntryId;

pub type FileImage = BTreeSet<(String, u64)>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageImages {
    pub correct: FileImage,
    pub existing: FileImage,
    pub cache_limit_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictedPage {
    pub friend: String,
    pub first_id: EntryId,
    pub last_id: EntryId,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub orphans_deleted: Vec<String>,
    pub pages_evicted: Vec<EvictedPage>,
    pub cache_bytes_before: u64,
    pub cache_bytes_after: u64,
}

pub fn cache_bytes(device: &Device) -> u64 {
    device.friends.values().map(|c| c.store.total_bytes()).sum()
}

/// Cleans `device` against `images.existing` and refreshes both images.
pub fn clean(device: &mut Device, images: &mut StorageImages) -> CleanReport {
    let mut report = CleanReport {
        cache_bytes_before: cache_bytes(device),
        ..Default::default()
    };
    let mut used = report.cache_bytes_before;
    while used > images.cache_limit_bytes {
        let oldest = device
            .friends
            .iter()
            .filter_map(|(f, c)| c.store.history().first().map(|row| (row.last_id, row.first_id, f.clone())))
            .min();
        let Some((last_id, first_id, friend)) = oldest else { break };
        let cache = device.friends.get_mut(&friend).expect("friend listed above");
        let before = cache.store.total_bytes();
        cache.store.evict_through(last_id);
        let freed = before - cache.store.total_bytes();
        cache.evicted.push((first_id.saturating_sub(1), last_id));
        used -= freed;
        report.pages_evicted.push(EvictedPage {
            friend,
            first_id,
            last_id,
            bytes: freed,
        });
    }
    report.cache_bytes_after = used;

    images.correct = correct_image(device);
    let correct_paths: BTreeSet<&String> = images.correct.iter().map(|(p, _)| p).collect();
    report.orphans_deleted = images
        .existing
        .iter()
        .filter(|(p, _)| !correct_paths.contains(p))
        .map(|(p, _)| p.clone())
        .collect();
    images.existing.retain(|(p, _)| correct_paths.contains(p));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replication::delta::compute_delta;
    use crate::replication::zones::{FriendStatus, ZoneTable};
    use crate::replication::{EntryKind, ProfileStore, ALL_ZONE};

    fn device_with_caches() -> Device {
        let mut d = Device::new("me", 0);
        for t in 0..150 {
            d.post_own(t, EntryKind::Status, ALL_ZONE, &[7; 40], None).unwrap();
        }
        d.host_mirror("m", 1, 1 << 30);
        for (i, f) in ["f1", "f2"].iter().enumerate() {
            let mut s = ProfileStore::with_default_pages(f);
            let mut z = ZoneTable::new(f);
            z.set_friend("me", FriendStatus::Active);
            for t in 0..250u64 {
                s.create(1_000 * (i as u64 + 1) + t, EntryKind::WallPost, f, ALL_ZONE, &[1; 40], None).unwrap();
            }
            let b = compute_delta(&s, &z, "me", 0, 0);
            d.friends.entry(f.to_string()).or_insert_with(|| crate::replication::delta::FriendCache::new(f)).apply(&b);
        }
        d
    }

    #[test]
    fn orphans_are_deleted() {
        let mut d = device_with_caches();
        let mut images = StorageImages {
            cache_limit_bytes: u64::MAX,
            ..Default::default()
        };
        images.existing = correct_image(&d);
        images.existing.insert(("me/friends/gone/page-0000.txt".into(), 10));
        images.existing.insert(("me/tmp.bin".into(), 3));
        let r = clean(&mut d, &mut images);
        assert_eq!(r.orphans_deleted.len(), 2);
        assert!(images.existing.iter().all(|f| images.correct.iter().any(|c| c.0 == f.0)));
        assert!(r.pages_evicted.is_empty());
    }

    #[test]
    fn over_limit_evicts_oldest_friend_pages_only() {
        let mut d = device_with_caches();
        let own_before = d.own.image.store.clone();
        let total = cache_bytes(&d);
        let limit = total * 10 / 11;
        let mut images = StorageImages {
            cache_limit_bytes: limit,
            ..Default::default()
        };
        let r = clean(&mut d, &mut images);
        assert!(r.cache_bytes_after <= limit);
        // f1's first page has the smallest last id.
        assert_eq!(r.pages_evicted[0].friend, "f1");
        assert_eq!(r.pages_evicted[0].first_id, 1_000);
        assert_eq!(d.own.image.store, own_before);
        assert!(d.mirrored.contains_key("m"));
        assert_eq!(d.friends["f1"].evicted, vec![(999, 1_099)]);
    }
}
