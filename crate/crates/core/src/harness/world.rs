//! The simulation driver: builds an [`Overlay`] from a scenario and runs
//! its schedules, activity and periodic tasks on one event queue.
//!
//! Setup happens at time zero with every device online: bootstrap,
//! friendships, zones, mirrors and a first sync. Devices whose schedule is
//! off at time zero then go offline and the queue starts.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::metrics::{Action, SessionLogEntry, SessionStatus, TargetMeta};
use super::scenario::Scenario;
use super::HarnessError;
use crate::netsim::EventQueue;
use crate::peer::{Overlay, OverlayConfig, PeerError, SessionOutcome};
use crate::replication::{EntryId, EntryKind, ALL_ZONE};
use crate::{Millis, DAY};

/// Entry ids carried by one successful update session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transmission {
    /// Index into the session log.
    pub session: usize,
    pub requester: String,
    pub target: String,
    pub entries: Vec<EntryId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub events: u64,
    pub status_posts: u64,
    /// Status posts dropped because the primary device was offline.
    pub status_skipped: u64,
    pub wall_posts: u64,
    pub comments: u64,
    pub sync_rounds: u64,
    pub registrations: u64,
    pub registration_failures: u64,
    pub no_relay_events: u64,
    pub detections: u64,
    pub relay_bytes: Vec<u64>,
}

pub struct RunResult {
    pub log: Vec<SessionLogEntry>,
    pub transmissions: Vec<Transmission>,
    pub stats: RunStats,
    pub meta: BTreeMap<String, TargetMeta>,
    /// The world as the run left it.
    pub world: Overlay,
}

#[derive(Clone, Debug)]
enum Ev {
    Toggle { user: usize, device: u8, online: bool },
    Takedown { up: bool },
    Register,
    Update { user: usize },
    Wall { user: usize },
    Status { user: usize },
    Sync { user: usize },
    Retry { user: usize, device: u8, target: String, action: Action, attempt: u32 },
}

struct World<'a> {
    sc: &'a Scenario,
    o: Overlay,
    names: Vec<String>,
    rng: ChaCha8Rng,
    q: EventQueue<Ev>,
    log: Vec<SessionLogEntry>,
    transmissions: Vec<Transmission>,
    stats: RunStats,
}

/// Runs `scenario` to completion. The same scenario always yields the same
/// log.
pub fn run(scenario: &Scenario) -> Result<RunResult, HarnessError> {
    let problems = scenario.validate();
    if !problems.is_empty() {
        return Err(HarnessError::Invalid(problems));
    }
    let mut w = World::setup(scenario)?;
    w.schedule_initial();
    let last = scenario.duration_ms - 1;
    while let Some((t, ev)) = w.q.pop_due(last) {
        w.o.advance_to(t);
        w.stats.events += 1;
        w.handle(t, ev);
    }
    w.o.advance_to(scenario.duration_ms);
    Ok(w.finish())
}

impl<'a> World<'a> {
    fn setup(sc: &'a Scenario) -> Result<Self, HarnessError> {
        let config = OverlayConfig {
            seed: sc.seed,
            scheme: sc.scheme.clone(),
            relays: sc.relays.count,
            relay_capacity: sc.relays.capacity,
            ..OverlayConfig::default()
        };
        let mut o = Overlay::new(&config)?;
        for u in &sc.users {
            let nats: Vec<_> = u.devices.iter().map(|d| d.nat).collect();
            o.add_peer(&u.name, &nats)?;
        }
        for u in &sc.users {
            o.bootstrap(&u.name)?;
        }
        o.establish_friendships(&sc.edges)?;
        for u in &sc.users {
            let peer = o.peer_mut(&u.name)?;
            for d in peer.devices.values_mut() {
                for z in &u.zones {
                    d.data.own.image.zones.define_zone(&z.name);
                    for m in &z.members {
                        d.data.own.image.zones.add_member(&z.name, m);
                    }
                }
            }
        }
        for u in &sc.users {
            for m in &u.mirrors {
                o.add_mirror(&u.name, &m.user, m.capacity_bytes)?;
            }
        }
        for u in &sc.users {
            if u.devices.len() > 1 || !u.mirrors.is_empty() {
                o.sync_replicas(&u.name)?;
            }
        }
        for u in &sc.users {
            for (p, d) in u.devices.iter().enumerate() {
                if !d.schedule.online_at(0) {
                    o.set_device_online(&u.name, p as u8, false)?;
                }
            }
        }
        Ok(World {
            sc,
            o,
            names: sc.users.iter().map(|u| u.name.clone()).collect(),
            rng: ChaCha8Rng::seed_from_u64(sc.seed ^ 0x0068_6172_6e65_7373),
            q: EventQueue::new(),
            log: Vec::new(),
            transmissions: Vec::new(),
            stats: RunStats::default(),
        })
    }

    fn schedule_initial(&mut self) {
        let sc = self.sc;
        for (i, u) in sc.users.iter().enumerate() {
            for (p, d) in u.devices.iter().enumerate() {
                for (at, online) in d.schedule.transitions() {
                    if at < sc.duration_ms {
                        self.q.schedule(at, Ev::Toggle { user: i, device: p as u8, online });
                    }
                }
            }
        }
        if let Some(w) = sc.takedown {
            self.q.schedule(w.start_ms, Ev::Takedown { up: false });
            self.q.schedule(w.end_ms, Ev::Takedown { up: true });
        }
        self.q.schedule(sc.periods.registration_ms, Ev::Register);
        for (i, u) in sc.users.iter().enumerate() {
            let at = self.rng.gen_range(0..sc.periods.update_ms);
            self.q.schedule(at, Ev::Update { user: i });
            if u.devices.len() > 1 || !u.mirrors.is_empty() {
                let at = self.rng.gen_range(0..sc.periods.sync_ms);
                self.q.schedule(at, Ev::Sync { user: i });
            }
            if let Some(at) = self.next_arrival(0, sc.activity.wall_posts_per_day) {
                self.q.schedule(at, Ev::Wall { user: i });
            }
            if let Some(at) = self.next_arrival(0, sc.activity.status_per_day) {
                self.q.schedule(at, Ev::Status { user: i });
            }
        }
    }

    /// Next arrival of a Poisson process with `per_day` events per day.
    fn next_arrival(&mut self, now: Millis, per_day: f64) -> Option<Millis> {
        if per_day <= 0.0 {
            return None;
        }
        let gap = Exp::new(per_day).expect("positive rate").sample(&mut self.rng);
        Some(now + ((gap * DAY as f64) as Millis).max(1))
    }

    fn current_device(&self, user: usize) -> Option<u8> {
        let name = &self.names[user];
        (0..self.sc.users[user].devices.len() as u8).find(|&p| self.o.device_online(name, p))
    }

    fn body(&mut self) -> Vec<u8> {
        let mut b = vec![0u8; self.sc.activity.body_bytes];
        self.rng.fill_bytes(&mut b);
        b
    }

    fn handle(&mut self, t: Millis, ev: Ev) {
        match ev {
            Ev::Toggle { user, device, online } => {
                let name = self.names[user].clone();
                let before = self.o.events.len();
                let _ = self.o.set_device_online(&name, device, online);
                self.count_events(before);
            }
            Ev::Takedown { up } => self.o.set_rendezvous_up(up),
            Ev::Register => {
                let before = self.o.events.len();
                self.stats.registrations += self.o.refresh_pending_registrations() as u64;
                self.count_events(before);
                self.q.schedule(t + self.sc.periods.registration_ms, Ev::Register);
            }
            Ev::Update { user } => {
                self.q.schedule(t + self.sc.periods.update_ms, Ev::Update { user });
                let Some(device) = self.current_device(user) else { return };
                let friends: Vec<String> = self
                    .o
                    .peer(&self.names[user])
                    .map(|p| p.active_friends().map(String::from).collect())
                    .unwrap_or_default();
                let k = self.sc.activity.friends_per_update.min(friends.len());
                let mut picked = sample(&mut self.rng, friends.len(), k).into_vec();
                picked.sort_unstable();
                for i in picked {
                    self.update(user, device, &friends[i], 0);
                }
            }
            Ev::Wall { user } => {
                if let Some(at) = self.next_arrival(t, self.sc.activity.wall_posts_per_day) {
                    self.q.schedule(at, Ev::Wall { user });
                }
                self.wall_post(user, t);
            }
            Ev::Status { user } => {
                if let Some(at) = self.next_arrival(t, self.sc.activity.status_per_day) {
                    self.q.schedule(at, Ev::Status { user });
                }
                self.status_post(user, t);
            }
            Ev::Sync { user } => {
                self.q.schedule(t + self.sc.periods.sync_ms, Ev::Sync { user });
                if self.o.sync_replicas(&self.names[user]).is_ok() {
                    self.stats.sync_rounds += 1;
                }
            }
            Ev::Retry { user, device, target, action, attempt } => match action {
                Action::Update => {
                    if let Some(d) = self.current_device(user) {
                        self.update(user, d, &target, attempt);
                    }
                }
                Action::Posting => {
                    let name = &self.names[user];
                    let pending = self
                        .o
                        .peer(name)
                        .and_then(|p| p.device(device))
                        .map_or(0, |d| d.data.pending_for(&target));
                    if pending > 0 && self.o.device_online(name, device) {
                        self.post(user, device, &target, attempt);
                    }
                }
            },
        }
    }

    fn count_events(&mut self, before: usize) {
        use crate::peer::EventKind;
        for e in &self.o.events[before..] {
            match e.kind {
                EventKind::NoRelayAvailable => self.stats.no_relay_events += 1,
                EventKind::RegistrationFailed(_) => self.stats.registration_failures += 1,
                EventKind::Detection { .. } => {}
            }
        }
    }

    fn status_post(&mut self, user: usize, t: Millis) {
        let name = self.names[user].clone();
        if !self.o.device_online(&name, 0) {
            self.stats.status_skipped += 1;
            return;
        }
        let zones = &self.sc.users[user].zones;
        let zone = if !zones.is_empty() && self.rng.gen_bool(self.sc.activity.zoned_fraction) {
            zones[self.rng.gen_range(0..zones.len())].name.clone()
        } else {
            ALL_ZONE.to_string()
        };
        let body = self.body();
        if let Ok(peer) = self.o.peer_mut(&name) {
            if let Ok(d) = peer.device_mut(0) {
                if d.data.post_own(t, EntryKind::Status, &zone, &body, None).is_ok() {
                    self.stats.status_posts += 1;
                }
            }
        }
    }

    fn wall_post(&mut self, user: usize, t: Millis) {
        let Some(device) = self.current_device(user) else { return };
        let name = self.names[user].clone();
        let friends: Vec<String> = match self.o.peer(&name) {
            Ok(p) => p.active_friends().map(String::from).collect(),
            Err(_) => return,
        };
        if friends.is_empty() {
            return;
        }
        let target = friends[self.rng.gen_range(0..friends.len())].clone();
        let parent = if self.rng.gen_bool(self.sc.activity.comment_ratio) {
            let cached: Vec<(EntryId, String)> = self
                .o
                .peer(&name)
                .ok()
                .and_then(|p| p.device(device).ok())
                .and_then(|d| d.data.friends.get(&target))
                .map(|c| {
                    c.store
                        .live_entries()
                        .filter(|e| !e.kind.needs_parent())
                        .map(|e| (e.id, e.shared_with.clone()))
                        .collect()
                })
                .unwrap_or_default();
            (!cached.is_empty()).then(|| cached[self.rng.gen_range(0..cached.len())].clone())
        } else {
            None
        };
        let body = self.body();
        let (kind, zone, parent_id) = match parent {
            Some((id, zone)) => {
                self.stats.comments += 1;
                (EntryKind::Comment, zone, Some(id))
            }
            None => {
                self.stats.wall_posts += 1;
                (EntryKind::WallPost, ALL_ZONE.to_string(), None)
            }
        };
        if let Ok(d) = self.o.peer_mut(&name).and_then(|p| p.device_mut(device)) {
            d.data.queue_post(&target, t, kind, &zone, &body, parent_id);
        }
        self.post(user, device, &target, 0);
    }

    fn update(&mut self, user: usize, device: u8, target: &str, attempt: u32) {
        let name = self.names[user].clone();
        let result = self.o.update_session(&name, device, target);
        let entries = result.as_ref().ok().map(|r| r.entries.clone());
        let idx = self.record(user, device, target, Action::Update, attempt, result);
        if let (Some(entries), true) = (entries, self.sc.trace) {
            self.transmissions.push(Transmission {
                session: idx,
                requester: name,
                target: target.to_string(),
                entries,
            });
        }
    }

    fn post(&mut self, user: usize, device: u8, target: &str, attempt: u32) {
        let name = self.names[user].clone();
        let result = self.o.post_session(&name, device, target);
        if result.is_err() {
            let _ = self.o.note_failed_post(&name, device, target);
        }
        self.record(user, device, target, Action::Posting, attempt, result);
    }

    /// Appends the log entry for one session and schedules its retry.
    fn record(
        &mut self,
        user: usize,
        device: u8,
        target: &str,
        action: Action,
        attempt: u32,
        result: Result<SessionOutcome, PeerError>,
    ) -> usize {
        let start = self.o.now();
        let entry = match result {
            Ok(out) => SessionLogEntry {
                start_ms: start,
                end_ms: start + out.elapsed_ms,
                action,
                requester: self.names[user].clone(),
                requester_device: device,
                target: target.to_string(),
                serving: out.serving,
                priority: Some(out.priority),
                serving_device: Some(out.device),
                bytes: out.bytes,
                status: match action {
                    Action::Update => SessionStatus::UpdateOk,
                    Action::Posting => SessionStatus::PostOk,
                },
                retry: attempt > 0,
            },
            Err(e) => {
                let status = match (&e, action) {
                    (PeerError::Session(_) | PeerError::AuthFailure, Action::Update) => SessionStatus::UpdateFail,
                    (PeerError::Session(_) | PeerError::AuthFailure, Action::Posting) => SessionStatus::PostFail,
                    _ => SessionStatus::ConnFailed,
                };
                if attempt < self.sc.periods.max_retries {
                    self.q.schedule(
                        start + self.sc.periods.retry_ms,
                        Ev::Retry {
                            user,
                            device,
                            target: target.to_string(),
                            action,
                            attempt: attempt + 1,
                        },
                    );
                }
                SessionLogEntry {
                    start_ms: start,
                    end_ms: start,
                    action,
                    requester: self.names[user].clone(),
                    requester_device: device,
                    target: target.to_string(),
                    serving: String::new(),
                    priority: None,
                    serving_device: None,
                    bytes: 0,
                    status,
                    retry: attempt > 0,
                }
            }
        };
        self.log.push(entry);
        self.log.len() - 1
    }

    fn finish(mut self) -> RunResult {
        self.stats.detections = self.o.detections.len() as u64;
        self.stats.relay_bytes = self.o.relays.iter().map(|r| r.bytes_forwarded).collect();
        let meta = self
            .sc
            .users
            .iter()
            .map(|u| {
                (
                    u.name.clone(),
                    TargetMeta {
                        mirrors: u.mirrors.len() as u32,
                        devices: u.devices.len() as u32,
                        group: u.group.clone(),
                    },
                )
            })
            .collect();
        RunResult {
            log: self.log,
            transmissions: self.transmissions,
            stats: self.stats,
            meta,
            world: self.o,
        }
    }
}
