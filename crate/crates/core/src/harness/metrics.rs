//! Session log records and the availability metrics computed from them.
//!
//! Retry collapse: a failed session and the retries that follow it count as
//! one failure. Retries carry `retry = true`, so failures are counted only
//! on entries with `retry = false`; successful retries count as successes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scenario::Window;
use crate::rendezvous::MAX_DEVICE_PRIORITY;
use crate::{Millis, DAY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Posting,
    Update,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionStatus {
    /// Channel opened with nothing to transfer.
    ConnEstablished,
    ConnFailed,
    UpdateOk,
    UpdateFail,
    PostOk,
    PostFail,
}

impl SessionStatus {
    pub fn is_success(self) -> bool {
        matches!(
            self,
            SessionStatus::ConnEstablished | SessionStatus::UpdateOk | SessionStatus::PostOk
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLogEntry {
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub action: Action,
    pub requester: String,
    pub requester_device: u8,
    pub target: String,
    /// The user whose device served; empty when the session failed.
    pub serving: String,
    /// Locate priority that succeeded: 0..=2 for the target's devices,
    /// `2 + rank` for mirrors.
    pub priority: Option<u8>,
    /// Priority of the serving device within its own user.
    pub serving_device: Option<u8>,
    pub bytes: u64,
    pub status: SessionStatus,
    pub retry: bool,
}

impl SessionLogEntry {
    pub fn is_success(&self) -> bool {
        self.status.is_success()
    }

    pub fn mirror_rank(&self) -> Option<u32> {
        self.priority
            .filter(|p| *p > MAX_DEVICE_PRIORITY)
            .map(|p| (p - MAX_DEVICE_PRIORITY) as u32)
    }

    /// Zero-based day of the session start.
    pub fn day(&self) -> u64 {
        self.start_ms / DAY
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub successes: u64,
    /// Failures after retry collapse.
    pub failures: u64,
    /// Entries examined, retries included.
    pub entries: u64,
}

impl Tally {
    pub fn add(&mut self, e: &SessionLogEntry) {
        self.entries += 1;
        if e.is_success() {
            self.successes += 1;
        } else if !e.retry {
            self.failures += 1;
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        let total = self.successes + self.failures;
        (total > 0).then(|| self.successes as f64 / total as f64)
    }
}

pub fn tally<'a>(entries: impl IntoIterator<Item = &'a SessionLogEntry>) -> Tally {
    let mut t = Tally::default();
    for e in entries {
        t.add(e);
    }
    t
}

/// Successful sessions over collapsed sessions among entries starting in
/// `window` and matching `action`; `None` when nothing qualifies.
pub fn success_ratio(log: &[SessionLogEntry], window: Option<Window>, action: Option<Action>) -> Option<f64> {
    tally(
        log.iter()
            .filter(|e| window.is_none_or(|w| w.contains(e.start_ms)))
            .filter(|e| action.is_none_or(|a| e.action == a)),
    )
    .ratio()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grouping {
    /// Key: the target's mirror count. Served: by any mirror.
    MirrorCount,
    /// Key: mirror rank r. Sessions: toward targets with at least r mirrors.
    /// Served: by the rank-r mirror.
    Rank,
    /// Key: the target's device count. Served: by a non-primary device.
    DeviceCount,
}

/// What the metrics need to know about a target user.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub mirrors: u32,
    pub devices: u32,
    pub group: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImpactCell {
    /// Successful sessions in the group.
    pub sessions: u64,
    /// Of those, the ones served as the grouping describes.
    pub served: u64,
    pub ratio: Option<f64>,
}

/// Fraction of successful sessions handled by replicas, per group.
/// Targets missing from `meta` are ignored.
pub fn impact_ratio(
    log: &[SessionLogEntry],
    grouping: Grouping,
    meta: &BTreeMap<String, TargetMeta>,
) -> BTreeMap<u32, ImpactCell> {
    let mut out: BTreeMap<u32, ImpactCell> = BTreeMap::new();
    for e in log.iter().filter(|e| e.is_success()) {
        let Some(m) = meta.get(&e.target) else { continue };
        match grouping {
            Grouping::MirrorCount => {
                let cell = out.entry(m.mirrors).or_default();
                cell.sessions += 1;
                cell.served += u64::from(e.serving != e.target);
            }
            Grouping::DeviceCount => {
                let cell = out.entry(m.devices).or_default();
                cell.sessions += 1;
                cell.served += u64::from(e.serving == e.target && e.serving_device.is_some_and(|d| d >= 1));
            }
            Grouping::Rank => {
                for rank in 1..=m.mirrors {
                    let cell = out.entry(rank).or_default();
                    cell.sessions += 1;
                    cell.served += u64::from(e.serving != e.target && e.mirror_rank() == Some(rank));
                }
            }
        }
    }
    for cell in out.values_mut() {
        cell.ratio = (cell.sessions > 0).then(|| cell.served as f64 / cell.sessions as f64);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayPoint {
    /// One-based day number.
    pub day: u64,
    pub entries: u64,
    pub successes: u64,
    pub failures: u64,
    pub success_ratio: Option<f64>,
}

/// One point per day of a `days`-day run.
pub fn day_series(log: &[SessionLogEntry], days: u64) -> Vec<DayPoint> {
    let mut tallies = vec![Tally::default(); days as usize];
    for e in log {
        if let Some(t) = tallies.get_mut(e.day() as usize) {
            t.add(e);
        }
    }
    tallies
        .into_iter()
        .enumerate()
        .map(|(i, t)| DayPoint {
            day: i as u64 + 1,
            entries: t.entries,
            successes: t.successes,
            failures: t.failures,
            success_ratio: t.ratio(),
        })
        .collect()
}
