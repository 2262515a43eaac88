//! On-disk layout of a device.
//!
//! ```text
//! <root>/<user>/
//!   settings.json
//!   state.json                  priority, id counter
//!   profile/page-NNNN.txt       own profile, one entry line per row
//!   profile/history.txt         page first_id last_id count
//!   profile/replica.json        zones, friends, outbox, dedup keys
//!   inbox.json
//!   pendingChanges.txt          target TAB attempts TAB entry line
//!   originals.txt               users whose profiles this device mirrors
//!   mirrored/<owner>/page-NNNN.txt, history.txt, replica.json
//!   friends/<friend>/page-NNNN.txt, history.txt, cache.json
//! ```
//!
//! Entry lines use [`ProfileEntry::encode_line`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::clean::FileImage;
use super::delta::FriendCache;
use super::engine::{Device, PendingPost, ProfileImage, Replica, Settings};
use super::message::SealedMessage;
use super::zones::ZoneTable;
use super::{EntryId, ProfileEntry, ProfileStore, ReplicationError};

#[derive(Serialize, Deserialize)]
struct ReplicaMeta {
    entries_per_page: usize,
    zones: ZoneTable,
    outbox: Vec<SealedMessage>,
    capacity_bytes: Option<u64>,
    order: u32,
    absorbed: Vec<ProfileEntry>,
    seen_posts: Vec<(String, EntryId)>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    watermark: EntryId,
    evicted: Vec<(EntryId, EntryId)>,
}

#[derive(Serialize, Deserialize)]
struct DeviceState {
    priority: u8,
    last_post_id: EntryId,
}

fn page_files(store: &ProfileStore) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = store
        .pages()
        .iter()
        .enumerate()
        .map(|(i, page)| {
            let mut text = String::new();
            for e in page {
                text.push_str(&e.encode_line());
                text.push('\n');
            }
            (format!("page-{i:04}.txt"), text)
        })
        .collect();
    let mut history = String::new();
    for row in store.history() {
        history.push_str(&format!("{}\t{}\t{}\t{}\n", row.page, row.first_id, row.last_id, row.count));
    }
    out.push(("history.txt".into(), history));
    out
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("layout records serialize")
}

fn replica_files(dir: &str, r: &Replica) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = page_files(&r.image.store)
        .into_iter()
        .map(|(n, t)| (format!("{dir}/{n}"), t))
        .collect();
    let meta = ReplicaMeta {
        entries_per_page: r.image.store.entries_per_page(),
        zones: r.image.zones.clone(),
        outbox: r.image.outbox.clone(),
        capacity_bytes: r.capacity_bytes,
        order: r.order,
        absorbed: r.absorbed.clone(),
        seen_posts: r.seen_posts.iter().cloned().collect(),
    };
    out.push((format!("{dir}/replica.json"), json(&meta)));
    out
}

/// Every file of the device with its contents, relative to the root.
pub fn render(device: &Device) -> BTreeMap<String, String> {
    let u = &device.user;
    let mut files = BTreeMap::new();
    files.insert(format!("{u}/settings.json"), json(&device.settings));
    files.insert(
        format!("{u}/state.json"),
        json(&DeviceState {
            priority: device.priority,
            last_post_id: device.last_post_id(),
        }),
    );
    files.extend(replica_files(&format!("{u}/profile"), &device.own));
    files.insert(format!("{u}/inbox.json"), json(&device.inbox));
    let mut pending = String::new();
    for p in &device.pending {
        pending.push_str(&format!("{}\t{}\t{}\n", p.target, p.attempts, p.entry.encode_line()));
    }
    files.insert(format!("{u}/pendingChanges.txt"), pending);
    let originals: String = device.mirrored.keys().map(|k| format!("{k}\n")).collect();
    files.insert(format!("{u}/originals.txt"), originals);
    for (owner, r) in &device.mirrored {
        files.extend(replica_files(&format!("{u}/mirrored/{owner}"), r));
    }
    for (friend, c) in &device.friends {
        for (n, t) in page_files(&c.store) {
            files.insert(format!("{u}/friends/{friend}/{n}"), t);
        }
        files.insert(
            format!("{u}/friends/{friend}/cache.json"),
            json(&CacheMeta {
                watermark: c.watermark,
                evicted: c.evicted.clone(),
            }),
        );
    }
    files
}

/// The correct file image: every path the device should hold and its size.
pub fn correct_image(device: &Device) -> FileImage {
    render(device)
        .into_iter()
        .map(|(p, t)| (p, t.len() as u64))
        .collect()
}

/// Writes the device under `root` and returns the correct image.
pub fn write_device(root: &Path, device: &Device) -> Result<FileImage, ReplicationError> {
    let files = render(device);
    for (rel, text) in &files {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)?;
    }
    Ok(files.into_iter().map(|(p, t)| (p, t.len() as u64)).collect())
}

/// The existing file image under `root/<user>`.
pub fn existing_image(root: &Path, user: &str) -> Result<FileImage, ReplicationError> {
    let mut out = FileImage::new();
    let mut stack = vec![root.join(user)];
    while let Some(dir) = stack.pop() {
        if !dir.exists() {
            continue;
        }
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .map_err(|e| ReplicationError::Io(e.to_string()))?
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert((rel, entry.metadata()?.len()));
            }
        }
    }
    Ok(out)
}

/// Deletes the given relative paths under `root`.
pub fn delete_files(root: &Path, paths: &[String]) -> Result<(), ReplicationError> {
    for p in paths {
        let full: PathBuf = root.join(p);
        if full.exists() {
            fs::remove_file(full)?;
        }
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String, ReplicationError> {
    Ok(fs::read_to_string(path)?)
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReplicationError> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| ReplicationError::Malformed(format!("{}: {e}", path.display())))
}

fn read_pages(dir: &Path) -> Result<Vec<ProfileEntry>, ReplicationError> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("page-") && n.ends_with(".txt"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for n in names {
        for line in read_to_string(&dir.join(n))?.lines().filter(|l| !l.is_empty()) {
            out.push(ProfileEntry::decode_line(line)?);
        }
    }
    Ok(out)
}

fn read_replica(dir: &Path, owner: &str) -> Result<Replica, ReplicationError> {
    let meta: ReplicaMeta = parse_json(&dir.join("replica.json"))?;
    let mut store = ProfileStore::new(owner, meta.entries_per_page)?;
    store.replace_all(read_pages(dir)?);
    Ok(Replica {
        image: ProfileImage {
            store,
            zones: meta.zones,
            outbox: meta.outbox,
        },
        capacity_bytes: meta.capacity_bytes,
        order: meta.order,
        absorbed: meta.absorbed,
        seen_posts: meta.seen_posts.into_iter().collect(),
    })
}

fn subdirs(dir: &Path) -> Result<Vec<String>, ReplicationError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    Ok(out)
}

/// Loads a device written by [`write_device`].
pub fn read_device(root: &Path, user: &str) -> Result<Device, ReplicationError> {
    let base = root.join(user);
    let settings: Settings = parse_json(&base.join("settings.json"))?;
    let state: DeviceState = parse_json(&base.join("state.json"))?;
    let mut device = Device::new(user, state.priority);
    device.settings = settings;
    device.own = read_replica(&base.join("profile"), user)?;
    device.inbox = parse_json(&base.join("inbox.json"))?;
    for line in read_to_string(&base.join("pendingChanges.txt"))?.lines().filter(|l| !l.is_empty()) {
        let mut parts = line.splitn(3, '\t');
        let (Some(target), Some(attempts), Some(entry)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ReplicationError::Malformed(line.into()));
        };
        device.pending.push(PendingPost {
            target: target.into(),
            attempts: attempts.parse().map_err(|_| ReplicationError::Malformed(line.into()))?,
            entry: ProfileEntry::decode_line(entry)?,
        });
    }
    for owner in subdirs(&base.join("mirrored"))? {
        let r = read_replica(&base.join("mirrored").join(&owner), &owner)?;
        device.mirrored.insert(owner, r);
    }
    for friend in subdirs(&base.join("friends"))? {
        let dir = base.join("friends").join(&friend);
        let meta: CacheMeta = parse_json(&dir.join("cache.json"))?;
        let mut cache = FriendCache::new(&friend);
        cache.store.replace_all(read_pages(&dir)?);
        cache.watermark = meta.watermark;
        cache.evicted = meta.evicted;
        device.friends.insert(friend, cache);
    }
    device.set_last_post_id(state.last_post_id);
    Ok(device)
}
