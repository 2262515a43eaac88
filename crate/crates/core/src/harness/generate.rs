//! Scenario generators: random friendship graphs, exponential on/off churn
//! and the grouped takedown layout.
//!
//! Users of a generated scenario fall into four groups:
//!
//! * `mirror-host`: one always-online user that mirrors the `hub` group.
//! * `hub`: one device each, mirrored only by the host.
//! * `replicated`: extra devices or friend mirrors, all with churn.
//! * `no-replica`: one device and no mirrors.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::scenario::{
    Activity, DeviceSpec, MirrorSpec, Periods, RelayFleet, Scenario, Schedule, UserSpec, Window, ZoneSpec,
    SCENARIO_VERSION,
};
use crate::netsim::NatType;
use crate::peer::MAX_DEVICES;
use crate::{Millis, DAY, HOUR, MINUTE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Churn {
    pub mean_on_ms: Millis,
    pub mean_off_ms: Millis,
}

impl Default for Churn {
    fn default() -> Self {
        Churn {
            mean_on_ms: 10 * HOUR,
            mean_off_ms: 8 * HOUR,
        }
    }
}

impl Churn {
    pub fn availability(&self) -> f64 {
        self.mean_on_ms as f64 / (self.mean_on_ms + self.mean_off_ms) as f64
    }
}

/// Alternating on/off periods with exponential lengths; the initial state
/// is drawn from the stationary availability.
pub fn exponential_schedule<R: Rng>(rng: &mut R, churn: &Churn, duration_ms: Millis) -> Schedule {
    let on = Exp::new(1.0 / churn.mean_on_ms.max(1) as f64).expect("positive mean");
    let off = Exp::new(1.0 / churn.mean_off_ms.max(1) as f64).expect("positive mean");
    let mut online = rng.gen_bool(churn.availability());
    let mut t = 0;
    let mut intervals = Vec::new();
    while t < duration_ms {
        let len = (if online { on.sample(rng) } else { off.sample(rng) }) as Millis;
        let end = (t + len.max(MINUTE)).min(duration_ms);
        if online {
            intervals.push((t, end));
        }
        t = end;
        online = !online;
    }
    Schedule::Intervals(intervals)
}

/// `m` distinct edges of the complete graph on `n` vertices, including
/// every pair in `required`, in sorted order.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, m: usize, required: &BTreeSet<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut rest: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|e| !required.contains(e))
        .collect();
    rest.shuffle(rng);
    let mut edges: Vec<_> = required.iter().copied().collect();
    edges.extend(rest.into_iter().take(m.saturating_sub(required.len())));
    edges.sort_unstable();
    edges
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub seed: u64,
    pub users: usize,
    pub edges: usize,
    pub days: u64,
    /// First day (one-based) without the rendezvous server; none keeps it up.
    pub takedown_day: Option<u64>,
    pub symmetric_fraction: f64,
    pub hub_users: usize,
    pub replicated_users: usize,
    pub zones_per_user: usize,
    pub zone_membership: f64,
    pub churn: Churn,
    pub relays: RelayFleet,
    pub periods: Periods,
    pub activity: Activity,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            seed: 1,
            users: 104,
            edges: 5117,
            days: 40,
            takedown_day: Some(36),
            symmetric_fraction: 0.93,
            hub_users: 12,
            replicated_users: 30,
            zones_per_user: 2,
            zone_membership: 0.3,
            churn: Churn::default(),
            relays: RelayFleet { count: 20, capacity: 20 },
            periods: Periods {
                update_ms: 2 * HOUR,
                sync_ms: HOUR,
                retry_ms: 10 * MINUTE,
                ..Periods::default()
            },
            activity: Activity::default(),
        }
    }
}

pub const MIRROR_HOST: &str = "mirror-host";
pub const HUB: &str = "hub";
pub const REPLICATED: &str = "replicated";
pub const NO_REPLICA: &str = "no-replica";

const MIRROR_CAPACITY: u64 = 1 << 30;

/// Builds a scenario from `p`. User `u000` is the mirror host, the next
/// `hub_users` form the hub group, then `replicated_users`, then the rest.
pub fn generate(p: &GeneratorParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.users.max(1);
    let names: Vec<String> = (0..n).map(|i| format!("u{i:03}")).collect();
    let hub_end = (1 + p.hub_users).min(n);
    let repl_end = (hub_end + p.replicated_users).min(n);
    let group_of = |i: usize| match i {
        0 => MIRROR_HOST,
        i if i < hub_end => HUB,
        i if i < repl_end => REPLICATED,
        _ => NO_REPLICA,
    };

    let required: BTreeSet<(usize, usize)> = (1..hub_end).map(|i| (0, i)).collect();
    let max_edges = n * (n - 1) / 2;
    let edges = random_graph(&mut rng, n, p.edges.min(max_edges).max(required.len()), &required);
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &edges {
        adj[a].push(b);
        adj[b].push(a);
    }

    let duration_ms = p.days * DAY;
    let mut users: Vec<UserSpec> = Vec::with_capacity(n);
    for i in 0..n {
        let group = group_of(i);
        let (device_count, mirrors) = match group {
            MIRROR_HOST | NO_REPLICA => (1, Vec::new()),
            HUB => (1, vec![0]),
            _ => {
                let devices = rng.gen_range(1..=MAX_DEVICES);
                let lo = usize::from(devices == 1);
                let k = rng.gen_range(lo..=2).min(adj[i].len());
                let candidates: Vec<usize> = adj[i].iter().copied().filter(|&f| f != 0).collect();
                let picked: Vec<usize> = candidates.choose_multiple(&mut rng, k).copied().collect();
                (devices, picked)
            }
        };
        let devices = (0..device_count)
            .map(|_| DeviceSpec {
                nat: NatType::Symmetric,
                schedule: if group == MIRROR_HOST {
                    Schedule::Always
                } else {
                    exponential_schedule(&mut rng, &p.churn, duration_ms)
                },
            })
            .collect();
        let zones = (0..p.zones_per_user)
            .map(|z| ZoneSpec {
                name: format!("zone{z}"),
                members: adj[i]
                    .iter()
                    .filter(|_| rng.gen_bool(p.zone_membership))
                    .map(|&f| names[f].clone())
                    .collect(),
            })
            .collect();
        users.push(UserSpec {
            name: names[i].clone(),
            group: Some(group.to_string()),
            devices,
            mirrors: mirrors
                .into_iter()
                .map(|m| MirrorSpec {
                    user: names[m].clone(),
                    capacity_bytes: MIRROR_CAPACITY,
                })
                .collect(),
            zones,
        });
    }

    // NAT mix over all devices: the symmetric share exactly, the rest cone
    // types in rotation.
    let mut slots: Vec<(usize, usize)> = users
        .iter()
        .enumerate()
        .flat_map(|(u, spec)| (0..spec.devices.len()).map(move |d| (u, d)))
        .collect();
    slots.shuffle(&mut rng);
    let symmetric = (slots.len() as f64 * p.symmetric_fraction).round() as usize;
    let cones = [NatType::FullCone, NatType::AddressRestricted, NatType::PortRestricted];
    for (k, &(u, d)) in slots.iter().enumerate().skip(symmetric) {
        users[u].devices[d].nat = cones[(k - symmetric) % cones.len()];
    }

    for zone in users.iter_mut().flat_map(|u| u.zones.iter_mut()) {
        zone.members.sort();
    }

    Scenario {
        version: SCENARIO_VERSION,
        seed: p.seed,
        duration_ms,
        scheme: "standard".into(),
        users,
        edges: edges.into_iter().map(|(a, b)| (names[a].clone(), names[b].clone())).collect(),
        relays: p.relays,
        takedown: p
            .takedown_day
            .filter(|d| *d >= 1 && *d <= p.days)
            .map(|d| Window {
                start_ms: (d - 1) * DAY,
                end_ms: duration_ms,
            }),
        periods: p.periods,
        activity: p.activity,
        guard: None,
        trace: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_matches_the_parameters() {
        let s = generate(&GeneratorParams::default());
        assert!(s.validate().is_empty(), "{:?}", s.validate());
        assert_eq!(s.users.len(), 104);
        assert_eq!(s.edges.len(), 5117);
        assert_eq!(s.duration_ms, 40 * DAY);
        assert_eq!(s.takedown.unwrap().start_ms, 35 * DAY);
        let devices: Vec<_> = s.users.iter().flat_map(|u| &u.devices).collect();
        let sym = devices.iter().filter(|d| d.nat == NatType::Symmetric).count();
        assert_eq!(sym, (devices.len() as f64 * 0.93).round() as usize);
        let hub: Vec<_> = s.users.iter().filter(|u| u.group.as_deref() == Some(HUB)).collect();
        assert_eq!(hub.len(), 12);
        assert!(hub.iter().all(|u| u.mirrors.len() == 1 && u.mirrors[0].user == "u000"));
        assert!(s
            .users
            .iter()
            .filter(|u| u.group.as_deref() == Some(REPLICATED))
            .all(|u| u.devices.len() > 1 || !u.mirrors.is_empty()));
        assert!(s
            .users
            .iter()
            .filter(|u| u.group.as_deref() == Some(NO_REPLICA))
            .all(|u| u.devices.len() == 1 && u.mirrors.is_empty()));
        assert_eq!(s.users[0].devices[0].schedule, Schedule::Always);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = GeneratorParams {
            users: 20,
            edges: 60,
            ..GeneratorParams::default()
        };
        assert_eq!(generate(&p), generate(&p));
        let q = GeneratorParams { seed: 2, ..p.clone() };
        assert_ne!(generate(&p), generate(&q));
    }

    #[test]
    fn churn_matches_its_availability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let churn = Churn::default();
        let horizon = 2_000 * DAY;
        let s = exponential_schedule(&mut rng, &churn, horizon);
        let frac = s.online_ms(horizon) as f64 / horizon as f64;
        assert!((frac - churn.availability()).abs() < 0.03, "{frac}");
    }
}
