//! Scenario schema, version 1.
//!
//! ```json
//! {
//!   "version": 1,
//!   "seed": 7,
//!   "duration_ms": 86400000,
//!   "users": [
//!     {"name": "ann", "group": "a",
//!      "devices": [{"nat": "Symmetric", "schedule": {"intervals": [[0, 3600000]]}}],
//!      "mirrors": [{"user": "bob", "capacity_bytes": 1000000}],
//!      "zones": [{"name": "family", "members": ["bob"]}]},
//!     {"name": "bob", "devices": [{"nat": "Public", "schedule": "always"}]}
//!   ],
//!   "edges": [["ann", "bob"]],
//!   "relays": {"count": 2, "capacity": 20},
//!   "takedown": {"start_ms": 43200000, "end_ms": 86400000}
//! }
//! ```
//!
//! Schedules are step functions: `"always"`, `"never"` or a list of
//! half-open online intervals. Mirrors are listed in rank order. Omitted
//! sections take the defaults of [`Periods`], [`Activity`] and [`RelayFleet`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::netsim::NatType;
use crate::peer::MAX_DEVICES;
use crate::replication::ALL_ZONE;
use crate::{Millis, DAY, HOUR, MINUTE};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub seed: u64,
    pub duration_ms: Millis,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub relays: RelayFleet,
    #[serde(default)]
    pub takedown: Option<Window>,
    #[serde(default)]
    pub periods: Periods,
    #[serde(default)]
    pub activity: Activity,
    /// Guarded-registration statistics to attach to the report.
    #[serde(default)]
    pub guard: Option<GuardSpec>,
    /// Record the entry ids carried by every successful update session.
    #[serde(default)]
    pub trace: bool,
}

fn default_scheme() -> String {
    "standard".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub name: String,
    #[serde(default)]
    pub group: Option<String>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub mirrors: Vec<MirrorSpec>,
    #[serde(default)]
    pub zones: Vec<ZoneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub nat: NatType,
    pub schedule: Schedule,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Always,
    Never,
    /// Sorted, disjoint `[start, end)` online intervals.
    Intervals(Vec<(Millis, Millis)>),
}

impl Schedule {
    pub fn online_at(&self, t: Millis) -> bool {
        match self {
            Schedule::Always => true,
            Schedule::Never => false,
            Schedule::Intervals(v) => v.iter().any(|&(s, e)| s <= t && t < e),
        }
    }

    /// Online time within `[0, until)`.
    pub fn online_ms(&self, until: Millis) -> Millis {
        match self {
            Schedule::Always => until,
            Schedule::Never => 0,
            Schedule::Intervals(v) => v.iter().map(|&(s, e)| e.min(until).saturating_sub(s)).sum(),
        }
    }

    /// State changes after time zero, as `(at, online)`.
    pub fn transitions(&self) -> Vec<(Millis, bool)> {
        match self {
            Schedule::Always | Schedule::Never => Vec::new(),
            Schedule::Intervals(v) => v
                .iter()
                .flat_map(|&(s, e)| [(s, true), (e, false)])
                .filter(|&(t, _)| t > 0)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirrorSpec {
    pub user: String,
    pub capacity_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneSpec {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayFleet {
    pub count: usize,
    pub capacity: u32,
}

impl Default for RelayFleet {
    fn default() -> Self {
        RelayFleet { count: 2, capacity: 20 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start_ms: Millis,
    pub end_ms: Millis,
}

impl Window {
    pub fn contains(&self, t: Millis) -> bool {
        self.start_ms <= t && t < self.end_ms
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Periods {
    /// Registration refresh tick; only devices with stale records register.
    pub registration_ms: Millis,
    /// Pull round per user.
    pub update_ms: Millis,
    /// Primary-to-replica sync round.
    pub sync_ms: Millis,
    pub retry_ms: Millis,
    pub max_retries: u32,
}

impl Default for Periods {
    fn default() -> Self {
        Periods {
            registration_ms: 2 * MINUTE,
            update_ms: HOUR,
            sync_ms: 30 * MINUTE,
            retry_ms: 5 * MINUTE,
            max_retries: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Activity {
    /// Own-profile posts per user per day, made on the primary device.
    pub status_per_day: f64,
    /// Posts on friends' walls per user per day.
    pub wall_posts_per_day: f64,
    /// Fraction of wall posts that are comments on an entry already cached.
    pub comment_ratio: f64,
    /// Friends pulled per update round; all friends when larger.
    pub friends_per_update: usize,
    /// Probability that a status post goes to a named zone instead of `All`.
    pub zoned_fraction: f64,
    pub body_bytes: usize,
}

impl Default for Activity {
    fn default() -> Self {
        Activity {
            status_per_day: 2.0,
            wall_posts_per_day: 1.0,
            comment_ratio: 0.3,
            friends_per_update: 3,
            zoned_fraction: 0.3,
            body_bytes: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardSpec {
    pub r_total: usize,
    pub m: usize,
    pub p_on: f64,
    pub trials: usize,
    pub max_runs: usize,
}

/// One validation problem, located by a JSON-path-like field name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn user_index(&self) -> BTreeMap<&str, usize> {
        self.users.iter().enumerate().map(|(i, u)| (u.name.as_str(), i)).collect()
    }

    pub fn friends_of(&self, user: &str) -> BTreeSet<&str> {
        self.edges
            .iter()
            .filter_map(|(a, b)| {
                if a == user {
                    Some(b.as_str())
                } else if b == user {
                    Some(a.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    /// Every problem found, empty when the scenario is runnable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut bad = |field: String, message: &str| {
            out.push(Diagnostic {
                field,
                message: message.to_string(),
            })
        };
        if self.version != SCENARIO_VERSION {
            bad("version".into(), &format!("unsupported version, expected {SCENARIO_VERSION}"));
        }
        if self.duration_ms == 0 {
            bad("duration_ms".into(), "must be positive");
        }
        if crate::crypto::envelope_by_name(&self.scheme).is_none() {
            bad("scheme".into(), "unknown envelope scheme");
        }
        if self.users.is_empty() {
            bad("users".into(), "at least one user is required");
        }

        let mut names = BTreeSet::new();
        for (i, u) in self.users.iter().enumerate() {
            if u.name.is_empty() || u.name.contains(['\t', '\n', '/', '#']) {
                bad(format!("users[{i}].name"), "must be non-empty without tab, newline, '/' or '#'");
            }
            if !names.insert(u.name.as_str()) {
                bad(format!("users[{i}].name"), "duplicate user name");
            }
        }

        let mut edge_set = BTreeSet::new();
        for (i, (a, b)) in self.edges.iter().enumerate() {
            for (end, name) in [("0", a), ("1", b)] {
                if !names.contains(name.as_str()) {
                    bad(format!("edges[{i}][{end}]"), "unknown user");
                }
            }
            if a == b {
                bad(format!("edges[{i}]"), "self friendship");
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if !edge_set.insert(key) {
                bad(format!("edges[{i}]"), "duplicate edge");
            }
        }

        for (i, u) in self.users.iter().enumerate() {
            let at = |f: &str| format!("users[{i}].{f}");
            if u.devices.is_empty() || u.devices.len() > MAX_DEVICES {
                bad(at("devices"), &format!("between 1 and {MAX_DEVICES} devices"));
            }
            for (d, dev) in u.devices.iter().enumerate() {
                if let Schedule::Intervals(v) = &dev.schedule {
                    let mut prev_end = None;
                    for (k, &(s, e)) in v.iter().enumerate() {
                        let field = format!("users[{i}].devices[{d}].schedule.intervals[{k}]");
                        if s >= e {
                            bad(field.clone(), "start must be before end");
                        }
                        if e > self.duration_ms {
                            bad(field.clone(), "ends after duration_ms");
                        }
                        if prev_end.is_some_and(|p| s < p) {
                            bad(field, "intervals must be sorted and disjoint");
                        }
                        prev_end = Some(e);
                    }
                }
            }
            let friends = self.friends_of(&u.name);
            let mut seen = BTreeSet::new();
            for (m, mirror) in u.mirrors.iter().enumerate() {
                let field = format!("users[{i}].mirrors[{m}]");
                if mirror.user == u.name {
                    bad(field.clone(), "a user cannot mirror itself");
                } else if !friends.contains(mirror.user.as_str()) {
                    bad(field.clone(), "mirror must be a friend");
                }
                if !seen.insert(&mirror.user) {
                    bad(field.clone(), "duplicate mirror");
                }
                if mirror.capacity_bytes == 0 {
                    bad(field, "capacity must be positive");
                }
            }
            let mut zone_names = BTreeSet::new();
            for (z, zone) in u.zones.iter().enumerate() {
                let field = format!("users[{i}].zones[{z}]");
                if zone.name.is_empty() || zone.name == ALL_ZONE {
                    bad(field.clone(), "zone name must be non-empty and not the default zone");
                }
                if !zone_names.insert(&zone.name) {
                    bad(field.clone(), "duplicate zone");
                }
                if zone.members.iter().any(|f| !friends.contains(f.as_str())) {
                    bad(field, "zone members must be friends");
                }
            }
        }

        if self.relays.count > 0 && self.relays.capacity == 0 {
            bad("relays.capacity".into(), "must be positive");
        }
        if let Some(w) = self.takedown {
            if w.start_ms >= w.end_ms {
                bad("takedown".into(), "start must be before end");
            }
            if w.end_ms > self.duration_ms {
                bad("takedown.end_ms".into(), "ends after duration_ms");
            }
        }
        let p = &self.periods;
        for (field, v) in [
            ("periods.registration_ms", p.registration_ms),
            ("periods.update_ms", p.update_ms),
            ("periods.sync_ms", p.sync_ms),
            ("periods.retry_ms", p.retry_ms),
        ] {
            if v == 0 {
                bad(field.into(), "must be positive");
            }
        }
        let a = &self.activity;
        for (field, v) in [
            ("activity.status_per_day", a.status_per_day),
            ("activity.wall_posts_per_day", a.wall_posts_per_day),
        ] {
            if !v.is_finite() || !(0.0..=10_000.0).contains(&v) {
                bad(field.into(), "must be within [0, 10000]");
            }
        }
        for (field, v) in [
            ("activity.comment_ratio", a.comment_ratio),
            ("activity.zoned_fraction", a.zoned_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad(field.into(), "must be within [0, 1]");
            }
        }
        if a.friends_per_update == 0 {
            bad("activity.friends_per_update".into(), "must be positive");
        }
        if let Some(g) = &self.guard {
            let params = crate::chord::guard::GuardParams::new(g.r_total, g.m, g.p_on);
            if let Err(e) = params.validate() {
                bad("guard".into(), &e.to_string());
            }
            if g.trials == 0 || g.max_runs == 0 {
                bad("guard".into(), "trials and max_runs must be positive");
            }
        }
        out
    }

    /// Every named user on one always-online public device, all pairwise
    /// friends, default periods and activity.
    pub fn fully_connected(names: &[&str], duration_ms: Millis, seed: u64) -> Scenario {
        let edges = names
            .iter()
            .enumerate()
            .flat_map(|(i, a)| names[i + 1..].iter().map(move |b| (a.to_string(), b.to_string())))
            .collect();
        Scenario {
            version: SCENARIO_VERSION,
            seed,
            duration_ms,
            scheme: default_scheme(),
            users: names
                .iter()
                .map(|n| UserSpec {
                    name: n.to_string(),
                    group: None,
                    devices: vec![DeviceSpec {
                        nat: NatType::Public,
                        schedule: Schedule::Always,
                    }],
                    mirrors: vec![],
                    zones: vec![],
                })
                .collect(),
            edges,
            relays: RelayFleet::default(),
            takedown: None,
            periods: Periods::default(),
            activity: Activity::default(),
            guard: None,
            trace: false,
        }
    }

    /// Days covered by the run, the last one possibly partial.
    pub fn days(&self) -> u64 {
        self.duration_ms.div_ceil(DAY)
    }
}
