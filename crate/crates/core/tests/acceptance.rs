//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 10`.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use myzone_core::ca::{obtain_certificate, CaServer};
use myzone_core::chord::complaint::{Complaint, ComplaintBoard, ComplaintError, Notification, Verdict};
use myzone_core::chord::guard::{expected_runs, guarded_register, monte_carlo, success_probability, FriendContact, GuardParams};
use myzone_core::chord::{Behavior, Ring};
use myzone_core::crypto::{SharedEnvelope, ToyScheme};
use myzone_core::harness::generate::{generate, GeneratorParams, HUB, NO_REPLICA, REPLICATED};
use myzone_core::harness::metrics::{day_series, impact_ratio, success_ratio, Action, Grouping, SessionLogEntry, SessionStatus, TargetMeta};
use myzone_core::harness::scenario::{Activity, Periods, Scenario, Window, ZoneSpec};
use myzone_core::harness::{run, summarize, write_report};
use myzone_core::netsim::{can_reach, NatProfile, NatType, Reachability};
use myzone_core::peer::{Overlay, OverlayConfig, Path};
use myzone_core::relay::{answer_challenge, RelayConfig, RelayError, RelayServer, Side};
use myzone_core::replication::delta::compute_delta;
use myzone_core::replication::{EntryId, EntryKind, FriendStatus, ProfileEntry, ProfileStore, ZoneTable, ALL_ZONE};
use myzone_core::ring_id::{dual_hash, RingId};
use myzone_core::{DAY, HOUR, MINUTE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and thresholds.
const GUARD_TRIALS: usize = 100_000;
const GUARD_RUN_INDEX_MAX: usize = 10;
const GUARD_FREQ_TOL: f64 = 0.02;
const GUARD_MEAN_REL_TOL: f64 = 0.02;
const TAKEDOWN_NEAR_ZERO: f64 = 0.10;
const METRIC_EPS: f64 = 1e-12;

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        (1, "guarded registration model", c1_guard_model),
        (2, "NAT traversal matrix", c2_nat_matrix),
        (3, "exactly-once delta transport", c3_exactly_once),
        (4, "delta oracle equivalence", c4_delta_oracle),
        (5, "mirror convergence", c5_mirror_convergence),
        (6, "takedown resilience", c6_takedown),
        (7, "chord correctness", c7_chord),
        (8, "complaint exactness", c8_complaints),
        (9, "relay lifecycle", c9_relay),
        (10, "metric oracles", c10_metrics),
        (11, "determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let o = f();
        let secs = started.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2} {:<4} {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// 1. Runs-to-success distribution of the guarded registration.

fn c1_guard_model() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (r, m, p_on) in [(20, 6, 0.8), (10, 2, 0.5), (50, 10, 1.0)] {
        let params = GuardParams::new(r, m, p_on);
        let mc = monte_carlo(&params, GUARD_TRIALS, 0x5eed + r as u64, 1_000).expect("valid params");
        let worst = (1..=GUARD_RUN_INDEX_MAX)
            .map(|n| (mc.frequency(n) - success_probability(&params, n).unwrap()).abs())
            .fold(0.0, f64::max);
        let expected = expected_runs(&params).unwrap();
        let rel = (mc.mean_runs - expected).abs() / expected;
        let ok = worst <= GUARD_FREQ_TOL && rel <= GUARD_MEAN_REL_TOL;
        pass &= ok;
        parts.push(format!(
            "(r={r},m={m},p={p_on}) max|dP|={worst:.4} mean {:.4} vs {expected:.4} ({:.2}%) {}",
            mc.mean_runs,
            rel * 100.0,
            if ok { "ok" } else { "out of tolerance" }
        ));
    }
    outcome(pass, parts.join("; "))
}

// 2. Feasibility table derived from the four NAT definitions.

fn profile(nat: NatType, host: u8) -> NatProfile {
    let mut p = NatProfile::new(
        nat,
        std::net::SocketAddrV4::new(std::net::Ipv4Addr::new(10, 0, 0, host), 5000),
        std::net::Ipv4Addr::new(100, 0, 0, host),
    );
    // The mapping a STUN exchange leaves behind.
    p.send_to(std::net::SocketAddrV4::new(std::net::Ipv4Addr::new(1, 1, 1, 1), 3478), 0);
    p
}

fn c2_nat_matrix() -> Outcome {
    use NatType::*;
    use Reachability::*;
    // Rows: responder; columns: initiator Full, Address, Port, Symmetric.
    // Without a punch only a full cone accepts strangers. A punch opens an
    // address-restricted NAT to the initiator's IP and a port-restricted
    // NAT to its advertised port, which a symmetric initiator does not use.
    let types = [FullCone, AddressRestricted, PortRestricted, Symmetric];
    let golden_plain = [
        [Direct, Direct, Direct, Direct],
        [RelayRequired; 4],
        [RelayRequired; 4],
        [RelayRequired; 4],
    ];
    let golden_punched = [
        [Direct, Direct, Direct, Direct],
        [AfterHolePunch; 4],
        [AfterHolePunch, AfterHolePunch, AfterHolePunch, RelayRequired],
        [RelayRequired; 4],
    ];
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for (ri, &resp) in types.iter().enumerate() {
        for (ii, &init) in types.iter().enumerate() {
            for (punch, golden) in [(false, &golden_plain), (true, &golden_punched)] {
                cases += 1;
                let got = can_reach(&profile(init, 1), &profile(resp, 2), punch, 0);
                if got != golden[ri][ii] {
                    mismatches.push(format!("{init:?}->{resp:?} punch={punch}: {got:?}"));
                }
            }
        }
    }
    let symmetric_always_relay = types.iter().all(|&i| {
        [false, true]
            .iter()
            .all(|&p| can_reach(&profile(i, 1), &profile(Symmetric, 2), p, 0) == RelayRequired)
    });
    outcome(
        mismatches.is_empty() && symmetric_always_relay && cases == 32,
        if mismatches.is_empty() {
            format!("{cases} cases match, symmetric responder always RelayRequired")
        } else {
            format!("mismatches: {}", mismatches.join(", "))
        },
    )
}

// Visibility oracle shared by criteria 3 and 4, written from the zone
// rules: the owner sees everything; others must be active friends, and an
// entry's zone is that of its root ancestor; `All` admits every friend, a
// named zone its members, an unknown zone nobody.
struct VisibilityOracle<'a> {
    owner: &'a str,
    friends: &'a BTreeSet<String>,
    zones: &'a BTreeMap<String, BTreeSet<String>>,
    entries: BTreeMap<EntryId, &'a ProfileEntry>,
}

impl VisibilityOracle<'_> {
    fn visible(&self, e: &ProfileEntry, user: &str) -> bool {
        if user == self.owner {
            return true;
        }
        if !self.friends.contains(user) {
            return false;
        }
        let mut cur = e;
        for _ in 0..64 {
            let attached = matches!(
                cur.kind,
                EntryKind::Comment | EntryKind::Like | EntryKind::Dislike | EntryKind::DeletedEntry
            );
            if !attached {
                return cur.shared_with == ALL_ZONE || self.zones.get(&cur.shared_with).is_some_and(|m| m.contains(user));
            }
            match cur.parent_id.and_then(|p| self.entries.get(&p)) {
                Some(parent) => cur = parent,
                None => return false,
            }
        }
        false
    }
}

// 3. Every authorized (entry, friend) pair crosses exactly once.

fn c3_exactly_once() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let names: Vec<String> = (0..20).map(|i| format!("p{i:02}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut s = Scenario::fully_connected(&refs, 7 * DAY, 33);
    s.edges.retain(|_| rng.gen_bool(0.6));
    for u in &mut s.users {
        let friends: Vec<String> = s
            .edges
            .iter()
            .filter_map(|(a, b)| (a == &u.name).then(|| b.clone()).or_else(|| (b == &u.name).then(|| a.clone())))
            .collect();
        u.zones = (0..5)
            .map(|z| ZoneSpec {
                name: format!("z{z}"),
                members: friends.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect(),
            })
            .collect();
    }
    s.periods = Periods {
        update_ms: 3 * HOUR,
        max_retries: 0,
        ..Periods::default()
    };
    s.activity = Activity {
        status_per_day: 6.0,
        wall_posts_per_day: 3.0,
        comment_ratio: 0.3,
        friends_per_update: usize::MAX,
        zoned_fraction: 0.5,
        body_bytes: 24,
    };
    s.trace = true;
    let mut result = match run(&s) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let failures = result.log.iter().filter(|e| !e.is_success()).count();

    // Final round so every entry has had a chance to travel.
    let mut carried: BTreeMap<(String, String), Vec<EntryId>> = BTreeMap::new();
    for t in &result.transmissions {
        carried.entry((t.requester.clone(), t.target.clone())).or_default().extend(&t.entries);
    }
    let mut bundles = result.transmissions.len();
    let mut drain_failures = 0;
    for (a, b) in s.edges.clone() {
        for (req, tgt) in [(&a, &b), (&b, &a)] {
            match result.world.update_session(req, 0, tgt) {
                Ok(out) => {
                    bundles += 1;
                    carried.entry((req.clone(), tgt.clone())).or_default().extend(out.entries);
                }
                Err(_) => drain_failures += 1,
            }
        }
    }

    let mut pairs = 0u64;
    let mut missing = 0u64;
    let mut duplicated = 0u64;
    let mut violations = 0u64;
    for u in &s.users {
        let friends: BTreeSet<String> = s.friends_of(&u.name).into_iter().map(String::from).collect();
        let zones: BTreeMap<String, BTreeSet<String>> =
            u.zones.iter().map(|z| (z.name.clone(), z.members.iter().cloned().collect())).collect();
        let store = &result.world.peer(&u.name).unwrap().device(0).unwrap().data.own.image.store;
        let oracle = VisibilityOracle {
            owner: &u.name,
            friends: &friends,
            zones: &zones,
            entries: store.entries().map(|e| (e.id, e)).collect(),
        };
        for f in &friends {
            let sent = carried.get(&(f.clone(), u.name.clone())).cloned().unwrap_or_default();
            let mut counts: BTreeMap<EntryId, u32> = BTreeMap::new();
            for id in sent {
                *counts.entry(id).or_default() += 1;
            }
            for e in store.entries() {
                let c = counts.remove(&e.id).unwrap_or(0);
                if oracle.visible(e, f) {
                    pairs += 1;
                    missing += u64::from(c == 0);
                    duplicated += u64::from(c > 1);
                } else if c > 0 {
                    violations += 1;
                }
            }
            // Ids the owner's store does not hold at all.
            violations += counts.len() as u64;
        }
    }
    let pass = failures == 0 && drain_failures == 0 && missing == 0 && duplicated == 0 && violations == 0 && pairs > 0;
    outcome(
        pass,
        format!(
            "{bundles} bundles, {pairs} authorized pairs, missing {missing}, duplicated {duplicated}, violations {violations}, failed sessions {}",
            failures + drain_failures
        ),
    )
}

// 4. compute_delta against brute-force filtering.

fn c4_delta_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let owner = "own";
    let friends: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();
    let mut store = ProfileStore::with_default_pages(owner);
    let mut zones = ZoneTable::new(owner);
    let mut active = BTreeSet::new();
    for (i, f) in friends.iter().enumerate() {
        let status = if i == 9 { FriendStatus::Revoked } else { FriendStatus::Active };
        zones.set_friend(f, status);
        if status == FriendStatus::Active {
            active.insert(f.clone());
        }
    }
    let mut members: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for z in ["family", "work", "club"] {
        zones.define_zone(z);
        let set = members.entry(z.to_string()).or_default();
        for f in &friends {
            if rng.gen_bool(0.4) {
                zones.add_member(z, f);
                set.insert(f.clone());
            }
        }
    }
    let zone_choices = [ALL_ZONE, "family", "work", "club", "undefined"];
    let mut t = 1_000;
    while store.len() < 1_000 {
        t += rng.gen_range(1..50);
        let author = if rng.gen_bool(0.5) { owner.to_string() } else { friends[rng.gen_range(0..9)].clone() };
        let ids: Vec<EntryId> = store.entries().filter(|e| !e.is_tombstone()).map(|e| e.id).collect();
        let roll = rng.gen_range(0..10);
        if roll < 2 && !ids.is_empty() {
            let parent = ids[rng.gen_range(0..ids.len())];
            let kind = [EntryKind::Comment, EntryKind::Like, EntryKind::Dislike][rng.gen_range(0..3)];
            let _ = store.create(t, kind, &author, ALL_ZONE, b"re", Some(parent));
        } else if roll == 2 && !ids.is_empty() {
            let _ = store.delete(ids[rng.gen_range(0..ids.len())], owner, t);
        } else {
            let kind = [EntryKind::WallPost, EntryKind::Status, EntryKind::Link, EntryKind::Photo][rng.gen_range(0..4)];
            let zone = zone_choices[rng.gen_range(0..zone_choices.len())];
            let body: Vec<u8> = (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect();
            let _ = store.create(t, kind, &author, zone, &body, None);
        }
    }
    let deleted: BTreeSet<EntryId> = store
        .entries()
        .filter(|e| e.kind == EntryKind::DeletedEntry)
        .filter_map(|e| e.parent_id)
        .collect();
    let oracle = VisibilityOracle {
        owner,
        friends: &active,
        zones: &members,
        entries: store.entries().map(|e| (e.id, e)).collect(),
    };
    let max_id = store.last_id().unwrap();
    let mut askers = friends.clone();
    askers.push("stranger".into());
    let mut mismatches = 0;
    let mut delivered = 0;
    for _ in 0..100 {
        let who = &askers[rng.gen_range(0..askers.len())];
        let since = rng.gen_range(0..=max_id);
        let got = compute_delta(&store, &zones, who, since, 0);
        let want: Vec<&ProfileEntry> = store
            .entries()
            .filter(|e| e.id > since && !deleted.contains(&e.id) && oracle.visible(e, who))
            .collect();
        delivered += want.len();
        if serde_json::to_vec(&got.entries).unwrap() != serde_json::to_vec(&want).unwrap() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && delivered > 0,
        format!("100 queries over {} entries, {delivered} entries expected, {mismatches} mismatched", store.len()),
    )
}

// 5. One owner, two mirrors, disjoint absorption, one sync round.

fn c5_mirror_convergence() -> Outcome {
    let config = OverlayConfig {
        seed: 5,
        ..OverlayConfig::default()
    };
    let mut o = Overlay::new(&config).unwrap();
    for u in ["own", "m1", "m2", "f1", "f2"] {
        o.add_peer(u, &[NatType::Public]).unwrap();
        o.bootstrap(u).unwrap();
    }
    let pairs: Vec<(String, String)> = ["m1", "m2", "f1", "f2"].iter().map(|f| ("own".to_string(), f.to_string())).collect();
    o.establish_friendships(&pairs).unwrap();
    o.add_mirror("own", "m1", 1 << 30).unwrap();
    o.add_mirror("own", "m2", 1 << 30).unwrap();
    let mut t = MINUTE;
    for i in 0..12u8 {
        t += MINUTE;
        o.advance_to(t);
        let d = &mut o.peer_mut("own").unwrap().device_mut(0).unwrap().data;
        d.post_own(t, EntryKind::Status, ALL_ZONE, &[i; 50], None).unwrap();
    }
    o.sync_replicas("own").unwrap();
    o.set_device_online("own", 0, false).unwrap();

    let mut served = Vec::new();
    for (poster, down) in [("f1", "m2"), ("f2", "m1")] {
        o.set_device_online(down, 0, false).unwrap();
        for i in 0..3u8 {
            t += MINUTE;
            o.advance_to(t);
            let d = &mut o.peer_mut(poster).unwrap().device_mut(0).unwrap().data;
            d.queue_post("own", t, EntryKind::WallPost, ALL_ZONE, &[i; 30], None);
        }
        match o.post_session(poster, 0, "own") {
            Ok(out) => served.push((out.serving, out.entries.len())),
            Err(e) => return outcome(false, format!("{poster} could not post: {e}")),
        }
        o.set_device_online(down, 0, true).unwrap();
    }
    let disjoint = served == vec![("m1".to_string(), 3), ("m2".to_string(), 3)];
    t += MINUTE;
    o.advance_to(t);
    o.set_device_online("own", 0, true).unwrap();
    if let Err(e) = o.sync_replicas("own") {
        return outcome(false, format!("sync failed: {e}"));
    }
    let ids = |o: &Overlay, who: &str| -> BTreeSet<EntryId> {
        let d = &o.peer(who).unwrap().device(0).unwrap().data;
        d.replica("own").unwrap().image.store.ids()
    };
    let (a, b, c) = (ids(&o, "own"), ids(&o, "m1"), ids(&o, "m2"));
    let converged = a == b && b == c && a.len() == 18;

    // Constrained mirror: 60% of the profile, newest suffix only.
    let own_store = o.peer("own").unwrap().device(0).unwrap().data.own.image.store.clone();
    let cap = own_store.total_bytes() * 6 / 10;
    o.peer_mut("m2").unwrap().device_mut(0).unwrap().data.mirrored.get_mut("own").unwrap().capacity_bytes = Some(cap);
    o.sync_replicas("own").unwrap();
    let mut suffix = BTreeSet::new();
    let mut used = 0;
    for e in own_store.entries().rev() {
        if used + e.size() > cap {
            break;
        }
        used += e.size();
        suffix.insert(e.id);
    }
    let constrained = ids(&o, "m2");
    let suffix_ok = constrained == suffix && !suffix.is_empty() && suffix.len() < a.len() && ids(&o, "m1") == a;
    outcome(
        disjoint && converged && suffix_ok,
        format!(
            "absorbed by {served:?}; id sets {}/{}/{} equal={}; 60% mirror holds {} of {} (newest suffix {})",
            a.len(),
            b.len(),
            c.len(),
            a == b && b == c,
            constrained.len(),
            a.len(),
            constrained == suffix
        ),
    )
}

// 6. Takedown at the start of day 36 of 40.

fn c6_takedown() -> Outcome {
    let scenario = generate(&GeneratorParams::default());
    let result = match run(&scenario) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let summary = summarize(&scenario, &result).unwrap();
    let days = day_series(&result.log, scenario.days());
    let before: Vec<f64> = days[..35].iter().filter_map(|d| d.success_ratio).collect();
    let after: Vec<f64> = days[35..].iter().filter_map(|d| d.success_ratio).collect();
    let min_before = before.iter().copied().fold(f64::INFINITY, f64::min);
    let max_after = after.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ordering = before.len() == 35 && after.len() == 5 && min_before > max_after;

    let during = |label: &str| summary.groups.get(label).and_then(|g| g.during_takedown);
    let some = summary.replica_classes["some"].during_takedown.unwrap_or(0.0);
    let none = summary.replica_classes["none"].during_takedown.unwrap_or(1.0);
    let replicas_ok = some > 0.0 && none <= TAKEDOWN_NEAR_ZERO;
    let (hub, repl, bare) = (during(HUB), during(REPLICATED), during(NO_REPLICA));
    let hub_highest = match (hub, repl, bare) {
        (Some(h), Some(r), Some(b)) => h > r && h > b,
        _ => false,
    };
    let fmt = |r: Option<f64>| r.map_or("-".into(), |v| format!("{v:.3}"));
    outcome(
        ordering && replicas_ok && hub_highest,
        format!(
            "daily min days 1-35 {min_before:.3} > max days 36-40 {max_after:.3}: {ordering}; during takedown: with replicas {some:.3}, zero-replica {none:.3} (<= {TAKEDOWN_NEAR_ZERO}); hub {} vs replicated {} vs no-replica {}",
            fmt(hub),
            fmt(repl),
            fmt(bare)
        ),
    )
}

// 7. Lookups on correct rings against a sorted-list successor.

fn c7_chord() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [8usize, 32, 128] {
        let addrs: Vec<(String, Behavior)> = (0..n).map(|i| (format!("10.7.{}.{}:7000", i / 256, i % 256), Behavior::Correct)).collect();
        let ring = Ring::build(&addrs);
        let mut sorted: Vec<RingId> = addrs.iter().map(|(a, _)| RingId::of_address(a)).collect();
        sorted.sort();
        let brute = |key: &RingId| *sorted.iter().find(|id| *id >= key).unwrap_or(&sorted[0]);
        let mut wrong = 0;
        let mut hops = 0usize;
        for _ in 0..1_000 {
            let mut b = [0u8; 20];
            rng.fill(&mut b);
            let key = RingId(b);
            let start = sorted[rng.gen_range(0..n)];
            match ring.find_successor(&start, &key) {
                Ok((got, h)) => {
                    wrong += usize::from(got != brute(&key));
                    hops += h;
                }
                Err(_) => wrong += 1,
            }
        }
        let mean = hops as f64 / 1_000.0;
        let bound = 2.0 * (n as f64).log2();
        let ok = wrong == 0 && mean <= bound;
        pass &= ok;
        parts.push(format!("N={n}: {wrong} wrong, mean hops {mean:.2} <= {bound:.1}"));
    }
    outcome(pass, parts.join("; "))
}

// 8. Complaints with a threshold of three.

fn c8_complaints() -> Outcome {
    let env: SharedEnvelope = Arc::new(ToyScheme);
    let mut ca = CaServer::new(env.clone(), "ca", 1);
    let mut keys = BTreeMap::new();
    for (i, p) in ["p1", "p2", "p3", "outsider", "w1", "w2"].iter().enumerate() {
        let k = env.generate_keypair(200 + i as u64);
        obtain_certificate(&mut ca, &env, &k, p).unwrap();
        keys.insert(p.to_string(), k);
    }
    let addrs: Vec<(String, Behavior)> = (0..12).map(|i| (format!("c{i}"), Behavior::Correct)).collect();
    let mut ring = Ring::build(&addrs);
    let accused = ring.live_ids()[5];
    for p in ["p1", "p2", "p3"] {
        ring.store_record(&accused, p, "ci");
    }
    let complaint = |who: &str, at| {
        let evidence = ["w1", "w2"]
            .iter()
            .map(|w| Notification::signed(env.as_ref(), &keys[*w].private_key, w, who, accused, at))
            .collect();
        Complaint::signed(env.as_ref(), &keys[who].private_key, who, accused, at, evidence)
    };
    let mut board = ComplaintBoard::new(3, 2 * MINUTE);
    let mut checks = Vec::new();
    for p in ["p1", "p2"] {
        checks.push(("registered complaint accepted", board.file_complaint(&ring, env.as_ref(), &ca, &complaint(p, 10), 20).is_ok()));
    }
    checks.push((
        "duplicate rejected",
        board.file_complaint(&ring, env.as_ref(), &ca, &complaint("p1", 15), 20) == Err(ComplaintError::DuplicateComplaint),
    ));
    checks.push((
        "unregistered rejected",
        board.file_complaint(&ring, env.as_ref(), &ca, &complaint("outsider", 15), 20) == Err(ComplaintError::NotRegisteredWithServer),
    ));
    checks.push(("two complaints retain", board.ring_judge(&mut ring, &accused) == Verdict::Retained && ring.is_live(&accused)));
    checks.push(("third accepted", board.file_complaint(&ring, env.as_ref(), &ca, &complaint("p3", 30), 40).is_ok()));
    checks.push(("three complaints isolate", board.ring_judge(&mut ring, &accused) == Verdict::Isolated && !ring.is_live(&accused)));

    // The isolated node is never a candidate afterwards.
    let friend = FriendContact {
        username: "w1".into(),
        conn_info: "ci:w1".into(),
    };
    let (a, b) = dual_hash("w1");
    for key in [a, b] {
        let home = ring.oracle_successor(&key).unwrap();
        ring.store_record(&home, "w1", &friend.conn_info);
    }
    let mut touched = false;
    for seed in 0..200 {
        let mut r = ring.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = guarded_register(&mut r, "p9", "ci:p9", std::slice::from_ref(&friend), &mut |_, _| true, &mut BTreeSet::new(), &mut rng, 20);
        if let Ok(out) = out {
            touched |= out.registered_with.0 == accused
                || out.registered_with.1 == accused
                || out.trace.iter().any(|t| [t.x, t.y, t.z, t.d].contains(&Some(accused)));
        } else {
            touched = true;
        }
    }
    checks.push(("isolated node absent from 200 guarded registrations", !touched));
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks hold", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

// 9. Relay capacity, expiry, verbatim frames and ciphertext-only state.

fn c9_relay() -> Outcome {
    let env: SharedEnvelope = Arc::new(ToyScheme);
    let mut ca = CaServer::new(env.clone(), "ca", 1);
    let ping = 1_000;
    let mut relay = RelayServer::new(
        env.clone(),
        "100.9.0.1:9000".parse().unwrap(),
        RelayConfig {
            rendezvous: "100.0.0.1:7000".parse().unwrap(),
            port: 9000,
            max_connections: 20,
            ping_interval_ms: ping,
        },
        ca.public_key().clone(),
        5,
    );
    let mut register = |relay: &mut RelayServer, name: &str, seed: u64, now| {
        let keys = env.generate_keypair(seed);
        let cert = obtain_certificate(&mut ca, &env, &keys, name).unwrap();
        let ch = relay.challenge(&cert, now)?;
        let resp = answer_challenge(&env, &keys, &relay.public_key().clone(), &ch)?;
        relay.accept_server_peer(&cert, &resp, now).map(|(s, _)| s)
    };
    let slots: Vec<_> = (0..20).map(|i| register(&mut relay, &format!("s{i}"), i, 0)).collect();
    let capacity_ok = slots.iter().all(Result::is_ok) && register(&mut relay, "s20", 20, 0) == Err(RelayError::CapacityExhausted);

    let slot = slots[0].clone().unwrap();
    let mut alive_ok = true;
    for t in (ping..=5 * ping).step_by(ping as usize) {
        alive_ok &= relay.keep_alive(slot, t).is_ok();
    }
    let last = 5 * ping;
    // The other nineteen slots went silent at 0 and lapse here.
    relay.expire_slots(last + 2 * ping);
    let keep_alive_ok = alive_ok && relay.has_slot(slot);
    let expiry_ok = relay.expire_slots(last + 2 * ping + 1) == 1 && !relay.has_slot(slot);

    // End to end through the overlay's relay.
    let mut o = Overlay::new(&OverlayConfig {
        seed: 9,
        ..OverlayConfig::default()
    })
    .unwrap();
    for u in ["alice", "bob"] {
        o.add_peer(u, &[NatType::Symmetric]).unwrap();
        o.bootstrap(u).unwrap();
    }
    o.establish_friendships(&[("bob".to_string(), "alice".to_string())]).unwrap();
    let mut located = o.locate_and_connect("bob", 0, "alice").unwrap();
    let Path::Relayed { relay: r, conn } = located.channel.path else {
        return outcome(false, "expected a relayed path between symmetric peers");
    };
    let conversation: [&[u8]; 3] = [b"meet by the old mill at seven", b"bring the blue folder", b"the code word is lantern"];
    let mut dump = Vec::new();
    let mut verbatim = true;
    for (i, msg) in conversation.iter().enumerate() {
        let frame = o.env.session_encrypt(located.channel.session_key(), 1_000 + i as u64, msg);
        o.relays[r].forward(conn, Side::Client, frame.clone()).unwrap();
        dump.extend(o.relays[r].state_dump());
        verbatim &= o.relays[r].deliver(conn, Side::Server) == vec![frame];
        verbatim &= o.transmit(&mut located.channel, Side::Client, msg).map(|p| p == *msg).unwrap_or(false);
        dump.extend(o.relays[r].state_dump());
    }
    let leaked = conversation.iter().any(|m| dump.windows(m.len()).any(|w| w == *m));
    let pass = capacity_ok && keep_alive_ok && expiry_ok && verbatim && !leaked;
    outcome(
        pass,
        format!(
            "21st registration rejected: {capacity_ok}; slot kept through 2x ping: {keep_alive_ok}; expired after: {expiry_ok}; frames verbatim: {verbatim}; plaintext in dumps: {leaked}"
        ),
    )
}

// 10. Hand-computed metric values.

#[allow(clippy::too_many_arguments)]
fn le(start: u64, action: Action, target: &str, serving: &str, priority: Option<u8>, device: Option<u8>, status: SessionStatus, retry: bool) -> SessionLogEntry {
    SessionLogEntry {
        start_ms: start,
        end_ms: start + 5,
        action,
        requester: "req".into(),
        requester_device: 0,
        target: target.into(),
        serving: serving.into(),
        priority,
        serving_device: device,
        bytes: 10,
        status,
        retry,
    }
}

fn c10_metrics() -> Outcome {
    use Action::*;
    use SessionStatus::*;
    let mut checks: Vec<(&str, Option<f64>, Option<f64>)> = Vec::new();

    // Log A: nine successes, one failure and its five retries.
    let mut a: Vec<_> = (0..9).map(|i| le(i, Update, "t", "t", Some(0), Some(0), UpdateOk, false)).collect();
    a.push(le(9, Update, "t", "", None, None, ConnFailed, false));
    a.extend((10..15).map(|i| le(i, Update, "t", "", None, None, ConnFailed, true)));
    checks.push(("A success", success_ratio(&a, None, None), Some(0.9)));

    // Log B: twelve entries over targets x (2 mirrors, 2 devices) and
    // y (no mirrors, 1 device).
    let b = vec![
        le(0, Update, "x", "x", Some(0), Some(0), UpdateOk, false),
        le(1, Update, "x", "x", Some(1), Some(1), UpdateOk, false),
        le(2, Update, "x", "mA", Some(3), Some(0), UpdateOk, false),
        le(3, Update, "x", "mB", Some(4), Some(0), UpdateOk, false),
        le(4, Posting, "x", "mA", Some(3), Some(0), PostOk, false),
        le(5, Posting, "x", "", None, None, PostFail, false),
        le(6, Posting, "x", "", None, None, ConnFailed, true),
        le(7, Update, "y", "y", Some(0), Some(0), UpdateOk, false),
        le(8, Update, "y", "", None, None, ConnFailed, false),
        le(9, Update, "y", "", None, None, ConnFailed, true),
        le(10, Update, "y", "y", Some(0), Some(0), UpdateOk, true),
        le(11, Posting, "y", "y", Some(0), Some(0), PostOk, false),
    ];
    // Successes 0-4, 7, 10, 11 = 8; collapsed failures 5 and 8 = 2.
    checks.push(("B success", success_ratio(&b, None, None), Some(8.0 / 10.0)));
    // Updates: successes 0-3, 7, 10 = 6; failure 8 = 1.
    checks.push(("B update", success_ratio(&b, None, Some(Update)), Some(6.0 / 7.0)));
    // Posting: successes 4, 11; failure 5.
    checks.push(("B posting", success_ratio(&b, None, Some(Posting)), Some(2.0 / 3.0)));
    // Window [4, 9): entries 4-8: successes 4, 7; failures 5, 8.
    checks.push(("B window", success_ratio(&b, Some(Window { start_ms: 4, end_ms: 9 }), None), Some(0.5)));
    checks.push(("B empty window", success_ratio(&b, Some(Window { start_ms: 100, end_ms: 200 }), None), None));
    let meta = BTreeMap::from([
        (
            "x".to_string(),
            TargetMeta {
                mirrors: 2,
                devices: 2,
                group: None,
            },
        ),
        (
            "y".to_string(),
            TargetMeta {
                mirrors: 0,
                devices: 1,
                group: None,
            },
        ),
    ]);
    let by_count = impact_ratio(&b, Grouping::MirrorCount, &meta);
    // x: 5 successes (0-4), 3 served by mirrors. y: 3 successes, none.
    checks.push(("B impact mirrors=2", by_count.get(&2).and_then(|c| c.ratio), Some(3.0 / 5.0)));
    checks.push(("B impact mirrors=0", by_count.get(&0).and_then(|c| c.ratio), Some(0.0)));
    let by_rank = impact_ratio(&b, Grouping::Rank, &meta);
    // Rank 1 served entries 2 and 4; rank 2 served entry 3; of x's 5.
    checks.push(("B impact rank 1", by_rank.get(&1).and_then(|c| c.ratio), Some(2.0 / 5.0)));
    checks.push(("B impact rank 2", by_rank.get(&2).and_then(|c| c.ratio), Some(1.0 / 5.0)));
    let by_dev = impact_ratio(&b, Grouping::DeviceCount, &meta);
    // x's secondary device served entry 1.
    checks.push(("B impact devices=2", by_dev.get(&2).and_then(|c| c.ratio), Some(1.0 / 5.0)));
    checks.push(("B impact devices=1", by_dev.get(&1).and_then(|c| c.ratio), Some(0.0)));

    // Log C: retries toward two targets interleaved, a retry that succeeds
    // and a fresh failure after a success.
    let c = vec![
        le(0, Update, "p", "", None, None, ConnFailed, false),
        le(1, Update, "q", "q", Some(0), Some(0), UpdateOk, false),
        le(2, Update, "p", "", None, None, ConnFailed, true),
        le(3, Update, "q", "", None, None, UpdateFail, false),
        le(4, Update, "p", "p", Some(0), Some(0), UpdateOk, true),
        le(5, Update, "q", "", None, None, ConnFailed, true),
        le(6, Update, "q", "", None, None, ConnFailed, true),
        le(7, Update, "p", "", None, None, ConnFailed, false),
        le(8, Posting, "p", "p", Some(0), Some(0), ConnEstablished, false),
        le(9, Update, "q", "q", Some(0), Some(0), UpdateOk, false),
    ];
    // Successes 1, 4, 8, 9 = 4; collapsed failures 0, 3, 7 = 3.
    checks.push(("C success", success_ratio(&c, None, None), Some(4.0 / 7.0)));
    checks.push(("C all-success subset", success_ratio(&c[8..], None, None), Some(1.0)));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| match (got, want) {
            (Some(g), Some(w)) => (g - w).abs() > METRIC_EPS,
            (None, None) => false,
            _ => true,
        })
        .map(|(n, got, want)| format!("{n}: {got:?} != {want:?}"))
        .collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} values match, including 9 successes + 1 failure with 5 retries = 0.9", checks.len())
        } else {
            bad.join("; ")
        },
    )
}

// 11. Byte-identical reports.

fn c11_determinism() -> Outcome {
    let p = GeneratorParams {
        seed: 11,
        users: 24,
        edges: 150,
        days: 4,
        takedown_day: Some(4),
        hub_users: 4,
        replicated_users: 8,
        ..GeneratorParams::default()
    };
    let scenario = generate(&p);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let result = run(&scenario).unwrap();
        write_report(d.path(), &scenario, &result).unwrap();
    }
    let mut differing = Vec::new();
    let mut bytes = 0;
    for f in ["sessions.jsonl", "summary.json", "per_day.csv", "groups.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        bytes += a.len();
        if a != b {
            differing.push(f);
        }
    }
    outcome(
        differing.is_empty() && bytes > 0,
        if differing.is_empty() {
            format!("4 report files, {bytes} bytes, identical across two runs")
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}
