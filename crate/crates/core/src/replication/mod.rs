//! Profile replication: paged stores, zones, delta pulls, posting queues,
//! ranked mirror synchronization and cache cleaning.
//!
//! Every profile entry is identified by its creation time in milliseconds,
//! unique within one profile. Friends pull everything newer than their last
//! successful update; writes by friends go to the profile's owner or to one
//! of its mirrors, and the owner merges what its mirrors absorbed.

pub mod clean;
pub mod delta;
pub mod disk;
pub mod engine;
pub mod message;
pub mod store;
pub mod zones;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use delta::{compute_delta, DeltaBundle};
pub use engine::{Device, PendingPost, SessionError};
pub use store::{HistoryRow, ProfileStore};
pub use zones::{FriendStatus, ZoneTable, ALL_ZONE};

pub type EntryId = u64;

pub const DEFAULT_ENTRIES_PER_PAGE: usize = 100;
pub const MIN_ENTRIES_PER_PAGE: usize = 100;
pub const MAX_ENTRIES_PER_PAGE: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    WallPost,
    Link,
    Photo,
    Audio,
    Video,
    Status,
    Comment,
    Like,
    Dislike,
    Event,
    Message,
    DeletedEntry,
}

impl EntryKind {
    pub const ALL: [EntryKind; 12] = [
        EntryKind::WallPost,
        EntryKind::Link,
        EntryKind::Photo,
        EntryKind::Audio,
        EntryKind::Video,
        EntryKind::Status,
        EntryKind::Comment,
        EntryKind::Like,
        EntryKind::Dislike,
        EntryKind::Event,
        EntryKind::Message,
        EntryKind::DeletedEntry,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EntryKind::WallPost => "wallPost",
            EntryKind::Link => "link",
            EntryKind::Photo => "photo",
            EntryKind::Audio => "audio",
            EntryKind::Video => "video",
            EntryKind::Status => "status",
            EntryKind::Comment => "comment",
            EntryKind::Like => "like",
            EntryKind::Dislike => "dislike",
            EntryKind::Event => "event",
            EntryKind::Message => "message",
            EntryKind::DeletedEntry => "deletedEntry",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Kinds that attach to a parent entry and take its zone.
    pub fn needs_parent(self) -> bool {
        matches!(
            self,
            EntryKind::Comment | EntryKind::Like | EntryKind::Dislike | EntryKind::DeletedEntry
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub id: EntryId,
    pub kind: EntryKind,
    pub author: String,
    pub shared_with: String,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub body: Vec<u8>,
    pub parent_id: Option<EntryId>,
}

impl ProfileEntry {
    pub fn is_tombstone(&self) -> bool {
        self.kind == EntryKind::DeletedEntry
    }

    /// Canonical text form: tab-separated `id kind author zone parent body`,
    /// with `-` for no parent and the body in hex.
    pub fn encode_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.kind.tag(),
            self.author,
            self.shared_with,
            self.parent_id.map_or_else(|| "-".to_string(), |p| p.to_string()),
            hex::encode(&self.body)
        )
    }

    pub fn decode_line(line: &str) -> Result<Self, ReplicationError> {
        let bad = || ReplicationError::Malformed(line.chars().take(80).collect());
        let parts: Vec<&str> = line.split('\t').collect();
        let [id, kind, author, zone, parent, body] = parts[..] else {
            return Err(bad());
        };
        Ok(ProfileEntry {
            id: id.parse().map_err(|_| bad())?,
            kind: EntryKind::from_tag(kind).ok_or_else(bad)?,
            author: author.to_string(),
            shared_with: zone.to_string(),
            body: hex::decode(body).map_err(|_| bad())?,
            parent_id: match parent {
                "-" => None,
                p => Some(p.parse().map_err(|_| bad())?),
            },
        })
    }

    /// Bytes this entry occupies on disk and on the wire.
    pub fn size(&self) -> u64 {
        self.encode_line().len() as u64 + 1
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicationError {
    #[error("permission denied")]
    PermissionDenied,
    #[error("unknown entry id {0}")]
    UnknownId(EntryId),
    #[error("entry id {0} does not follow the last stored id")]
    OutOfOrder(EntryId),
    #[error("entries per page must be between 100 and 1000")]
    BadPageSize,
    #[error("recipient is not a friend")]
    NotFriend,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for ReplicationError {
    fn from(e: std::io::Error) -> Self {
        ReplicationError::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind() -> impl Strategy<Value = EntryKind> {
        (0..EntryKind::ALL.len()).prop_map(|i| EntryKind::ALL[i])
    }

    proptest! {
        #[test]
        fn line_encoding_round_trips(
            id in any::<u64>(),
            k in kind(),
            author in "[a-z0-9_.]{1,12}",
            zone in "[A-Za-z0-9@]{1,10}",
            body in proptest::collection::vec(any::<u8>(), 0..64),
            parent in proptest::option::of(any::<u64>()),
        ) {
            let e = ProfileEntry { id, kind: k, author, shared_with: zone, body, parent_id: parent };
            prop_assert_eq!(ProfileEntry::decode_line(&e.encode_line()).unwrap(), e);
        }
    }

    #[test]
    fn truncated_line_is_malformed() {
        assert!(matches!(
            ProfileEntry::decode_line("12\twallPost\talice"),
            Err(ReplicationError::Malformed(_))
        ));
    }
}
