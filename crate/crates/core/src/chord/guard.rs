//! Guarded registration on the rendezvous ring.
//!
//! Before registering, a peer picks a random server `X`, asks it for the
//! servers `Y` and `Z` responsible for its two identifiers, and cross-checks
//! the answer through a friend: it asks `Y` and `Z` for the servers of the
//! friend, fetches the friend's connection information from each, and once
//! one of them (`D`) yields information that actually connects, asks `D`
//! for its own servers again. A mismatch marks `X` and the offending server
//! and restarts; marked servers are never picked again.
//!
//! The analytic model gives the probability that the `n`-th run is the first
//! successful one:
//!
//! ```text
//! s_n = p_on * (1 - max(0, m - 2(n-1)) / r)
//! P_n = s_n * prod_{k<n} (1 - s_k)
//! ```
//!
//! i.e. run `n` succeeds with conditional probability `s_n` given that the
//! earlier runs failed, with two malicious servers assumed removed per
//! earlier run.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Behavior, MaliciousPolicy, Ring, RingError};
use crate::ring_id::{dual_hash, RingId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardParams {
    /// Friends of the registering peer.
    pub n: usize,
    /// Malicious servers.
    pub m: usize,
    /// Total servers.
    pub r_total: usize,
    /// Probability that a friend is online during one run.
    pub p_on: f64,
    /// Distinct complaints needed to isolate a server.
    pub r_threshold: usize,
}

impl GuardParams {
    pub fn new(r_total: usize, m: usize, p_on: f64) -> Self {
        GuardParams {
            n: 1,
            m,
            r_total,
            p_on,
            r_threshold: 3,
        }
    }

    pub fn validate(&self) -> Result<(), GuardError> {
        let ok = self.m <= self.r_total
            && self.r_total > 0
            && (0.0..=1.0).contains(&self.p_on)
            && self.r_threshold >= 1;
        if ok {
            Ok(())
        } else {
            Err(GuardError::InvalidParams)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardError {
    #[error("invalid parameters")]
    InvalidParams,
    #[error("the peer has no friends")]
    NoFriends,
    #[error("no candidate servers remain")]
    NoServers,
    #[error("gave up after {runs} runs, last failure {last:?}")]
    Timeout { runs: usize, last: RunFailure },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunFailure {
    /// Line 25: no friend could be reached through any candidate.
    NoFriendOnline,
    /// Lines 15 / 21: the cross-check exposed `X` and `Y` or `Z`.
    Detected,
    /// Every candidate entry server refused to answer.
    Unreachable,
}

/// What happened in one run, for inspection against the algorithm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub x: Option<RingId>,
    pub y: Option<RingId>,
    pub z: Option<RingId>,
    pub d: Option<RingId>,
    pub marked: Vec<RingId>,
    pub failure: Option<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardOutcome {
    pub registered_with: (RingId, RingId),
    pub runs: usize,
    pub marked_malicious: BTreeSet<RingId>,
    pub trace: Vec<RunRecord>,
}

/// A friend as seen by the registering peer: username and the connection
/// information that actually reaches it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FriendContact {
    pub username: String,
    pub conn_info: String,
}

/// Runs the guarded registration for `registrant`.
///
/// `online(friend, run)` says whether a friend is reachable during a run.
/// `marked` persists across calls for the same peer and only grows.
#[allow(clippy::too_many_arguments)]
pub fn guarded_register<R: Rng>(
    ring: &mut Ring,
    registrant: &str,
    conn_info: &str,
    friends: &[FriendContact],
    online: &mut dyn FnMut(&str, usize) -> bool,
    marked: &mut BTreeSet<RingId>,
    rng: &mut R,
    max_runs: usize,
) -> Result<GuardOutcome, GuardError> {
    if friends.is_empty() {
        return Err(GuardError::NoFriends);
    }
    let mut trace = Vec::new();
    let mut last = RunFailure::NoFriendOnline;
    for run in 1..=max_runs {
        let mut record = RunRecord {
            x: None,
            y: None,
            z: None,
            d: None,
            marked: Vec::new(),
            failure: None,
        };
        let outcome = one_run(ring, registrant, friends, online, marked, rng, run, &mut record);
        match outcome {
            Ok((y, z)) => {
                ring.store_record(&y, registrant, conn_info);
                ring.store_record(&z, registrant, conn_info);
                trace.push(record);
                return Ok(GuardOutcome {
                    registered_with: (y, z),
                    runs: run,
                    marked_malicious: marked.clone(),
                    trace,
                });
            }
            Err(RunError::Fatal(e)) => return Err(e),
            Err(RunError::Failed(f)) => {
                record.failure = Some(f);
                last = f;
                trace.push(record);
            }
        }
    }
    Err(GuardError::Timeout {
        runs: max_runs,
        last,
    })
}

enum RunError {
    Fatal(GuardError),
    Failed(RunFailure),
}

#[allow(clippy::too_many_arguments)]
fn one_run<R: Rng>(
    ring: &Ring,
    registrant: &str,
    friends: &[FriendContact],
    online: &mut dyn FnMut(&str, usize) -> bool,
    marked: &mut BTreeSet<RingId>,
    rng: &mut R,
    run: usize,
    record: &mut RunRecord,
) -> Result<(RingId, RingId), RunError> {
    // Line 1, with refusals handled by trying another server.
    let mut pool: Vec<RingId> = ring
        .live_ids()
        .into_iter()
        .filter(|id| !marked.contains(id))
        .collect();
    if pool.is_empty() {
        return Err(RunError::Fatal(GuardError::NoServers));
    }
    let (x, y, z) = loop {
        if pool.is_empty() {
            return Err(RunError::Failed(RunFailure::Unreachable));
        }
        let x = pool.swap_remove(rng.gen_range(0..pool.len()));
        // Line 2.
        match ring.locate_rendezvous_servers(&x, registrant, Some(marked)) {
            Ok((y, z)) => break (x, y, z),
            Err(RingError::Unreachable) => continue,
            Err(_) => continue,
        }
    };
    record.x = Some(x);
    record.y = Some(y);
    record.z = Some(z);

    // Lines 3 to 24.
    let up: Vec<bool> = friends.iter().map(|f| online(&f.username, run)).collect();
    for (friend, friend_up) in friends.iter().zip(up) {
        let rs = ring.locate_rendezvous_servers(&y, &friend.username, Some(marked));
        let tu = ring.locate_rendezvous_servers(&z, &friend.username, Some(marked));
        let candidates: Vec<RingId> = [rs, tu]
            .into_iter()
            .flat_map(|r| r.map(|(a, b)| vec![a, b]).unwrap_or_default())
            .collect();
        let d = candidates.into_iter().find(|server| {
            friend_up
                && ring
                    .locate_peer(server, &friend.username)
                    .is_ok_and(|ci| ci == friend.conn_info)
        });
        let Some(d) = d else { continue };
        record.d = Some(d);
        let (a, b) = match ring.locate_rendezvous_servers(&d, registrant, Some(marked)) {
            Ok(ab) => ab,
            Err(_) => continue,
        };
        if a != y {
            for s in [y, x] {
                if marked.insert(s) {
                    record.marked.push(s);
                }
            }
            return Err(RunError::Failed(RunFailure::Detected));
        }
        if b == z {
            return Ok((y, z));
        }
        for s in [z, x] {
            if marked.insert(s) {
                record.marked.push(s);
            }
        }
        return Err(RunError::Failed(RunFailure::Detected));
    }
    // Line 25.
    Err(RunError::Failed(RunFailure::NoFriendOnline))
}

/// Conditional success probability of run `n` given earlier failures.
pub fn conditional_success(params: &GuardParams, run_n: usize) -> f64 {
    let remaining = params.m.saturating_sub(2 * (run_n - 1)) as f64;
    params.p_on * (1.0 - remaining / params.r_total as f64)
}

/// Probability that run `run_n` is the first successful run.
pub fn success_probability(params: &GuardParams, run_n: usize) -> Result<f64, GuardError> {
    params.validate()?;
    if run_n == 0 {
        return Err(GuardError::InvalidParams);
    }
    let mut failed_so_far = 1.0;
    for k in 1..run_n {
        failed_so_far *= 1.0 - conditional_success(params, k);
    }
    Ok(failed_so_far * conditional_success(params, run_n))
}

/// `P_1 .. P_max` in one pass.
pub fn run_distribution(params: &GuardParams, max_n: usize) -> Result<Vec<f64>, GuardError> {
    params.validate()?;
    let mut out = Vec::with_capacity(max_n);
    let mut failed_so_far = 1.0;
    for k in 1..=max_n {
        let s = conditional_success(params, k);
        out.push(failed_so_far * s);
        failed_so_far *= 1.0 - s;
    }
    Ok(out)
}

/// `sum n * P_n`, stopped once the remaining tail mass is below 1e-12.
pub fn expected_runs(params: &GuardParams) -> Result<f64, GuardError> {
    params.validate()?;
    if params.p_on <= 0.0 || params.r_total <= params.m {
        return Err(GuardError::InvalidParams);
    }
    let mut tail = 1.0;
    let mut mean = 0.0;
    let mut n = 1usize;
    while tail >= 1e-12 {
        let s = conditional_success(params, n);
        mean += n as f64 * tail * s;
        tail *= 1.0 - s;
        n += 1;
        if n > 10_000_000 {
            break;
        }
    }
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub trials: usize,
    /// `counts[n-1]` = trials that succeeded on run `n`.
    pub counts: Vec<u64>,
    pub timeouts: u64,
    pub mean_runs: f64,
}

impl MonteCarloResult {
    pub fn frequency(&self, run_n: usize) -> f64 {
        self.counts.get(run_n - 1).copied().unwrap_or(0) as f64 / self.trials as f64
    }
}

/// Builds the ring used by [`monte_carlo`]: `r_total` servers of which `m`,
/// chosen by `seed`, collude by misrouting and claiming keys.
pub fn adversarial_ring(params: &GuardParams, seed: u64) -> Ring {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..params.r_total).collect();
    indices.shuffle(&mut rng);
    let bad: BTreeSet<usize> = indices.into_iter().take(params.m).collect();
    let addrs: Vec<(String, Behavior)> = (0..params.r_total)
        .map(|i| {
            let behavior = if bad.contains(&i) {
                Behavior::Malicious(MaliciousPolicy {
                    misroute: true,
                    claim_key: true,
                    ..Default::default()
                })
            } else {
                Behavior::Correct
            };
            (format!("rdv-{seed}-{i}:7000"), behavior)
        })
        .collect();
    Ring::build(&addrs)
}

fn set_victim(ring: &mut Ring, victim: &str) {
    for id in ring.malicious_ids() {
        if let Some(Behavior::Malicious(p)) = ring.node_mut(&id).map(|n| &mut n.behavior) {
            p.victims = [victim.to_string()].into_iter().collect();
        }
    }
}

/// First `base`, `base.1`, `base.2`, ... whose two home servers are both
/// correct. Keeps the friend cross-check itself out of the adversary's hands.
fn honest_homed_name(ring: &Ring, base: &str) -> String {
    let honest = |name: &str| {
        let (a, b) = dual_hash(name);
        [a, b].iter().all(|k| {
            ring.oracle_successor(k)
                .and_then(|id| ring.node(&id))
                .is_some_and(|n| !n.behavior.is_malicious())
        })
    };
    if honest(base) || ring.malicious_ids().len() >= ring.len() {
        return base.to_string();
    }
    (1..)
        .map(|i| format!("{base}.{i}"))
        .find(|n| honest(n))
        .expect("unbounded search")
}

/// Runs `trials` independent guarded registrations on one adversarial ring.
/// Each trial uses a fresh registrant and `params.n` fresh friends that are
/// online with probability `p_on` in every run; malicious servers target
/// only the registrant of the current trial, and friends are homed on
/// correct servers.
pub fn monte_carlo(params: &GuardParams, trials: usize, seed: u64, max_runs: usize) -> Result<MonteCarloResult, GuardError> {
    params.validate()?;
    if params.n == 0 {
        return Err(GuardError::NoFriends);
    }
    let mut ring = adversarial_ring(params, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d63);
    let mut counts = vec![0u64; max_runs];
    let mut timeouts = 0u64;
    let mut total_runs = 0u64;
    for t in 0..trials {
        let user = format!("mc{seed}-{t}");
        set_victim(&mut ring, &user);
        let friends: Vec<FriendContact> = (0..params.n)
            .map(|k| FriendContact {
                username: honest_homed_name(&ring, &format!("mc{seed}-{t}-f{k}")),
                conn_info: format!("ci:{t}:{k}"),
            })
            .collect();
        let mut homes = Vec::new();
        for f in &friends {
            let (a, b) = dual_hash(&f.username);
            for key in [a, b] {
                let home = ring.oracle_successor(&key).expect("ring is not empty");
                ring.store_record(&home, &f.username, &f.conn_info);
                homes.push((home, f.username.clone()));
            }
        }
        let mut marked = BTreeSet::new();
        let p_on = params.p_on;
        let mut coin = ChaCha20Rng::seed_from_u64(rng.gen());
        let mut online = |_: &str, _: usize| coin.gen::<f64>() < p_on;
        match guarded_register(&mut ring, &user, "ci:self", &friends, &mut online, &mut marked, &mut rng, max_runs) {
            Ok(out) => {
                counts[out.runs - 1] += 1;
                total_runs += out.runs as u64;
                let (y, z) = out.registered_with;
                ring.remove_record(&y, &user);
                ring.remove_record(&z, &user);
            }
            Err(GuardError::Timeout { .. }) => timeouts += 1,
            Err(e) => return Err(e),
        }
        for (home, name) in homes {
            ring.remove_record(&home, &name);
        }
    }
    let successes = trials as u64 - timeouts;
    Ok(MonteCarloResult {
        trials,
        counts,
        timeouts,
        mean_runs: if successes == 0 {
            f64::NAN
        } else {
            total_runs as f64 / successes as f64
        },
    })
}

/// Analytic model next to a Monte Carlo estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProbe {
    pub params: GuardParams,
    pub trials: usize,
    pub analytic: Vec<f64>,
    pub empirical: Vec<f64>,
    pub analytic_mean: f64,
    pub empirical_mean: f64,
    pub max_abs_diff: f64,
    pub mean_rel_err: f64,
}

pub fn probe_model(params: &GuardParams, trials: usize, seed: u64, max_n: usize) -> Result<ModelProbe, GuardError> {
    let analytic = run_distribution(params, max_n)?;
    let analytic_mean = expected_runs(params)?;
    let mc = monte_carlo(params, trials, seed, 1_000)?;
    let empirical: Vec<f64> = (1..=max_n).map(|n| mc.frequency(n)).collect();
    let max_abs_diff = analytic
        .iter()
        .zip(&empirical)
        .map(|(a, e)| (a - e).abs())
        .fold(0.0, f64::max);
    Ok(ModelProbe {
        params: params.clone(),
        trials,
        mean_rel_err: (mc.mean_runs - analytic_mean).abs() / analytic_mean,
        analytic,
        empirical,
        analytic_mean,
        empirical_mean: mc.mean_runs,
        max_abs_diff,
    })
}
