//! Chord-style ring of rendezvous servers.
//!
//! Nodes sit at the SHA-1 of their address. Each keeps a successor list, a
//! predecessor and a 160-entry finger table maintained by the usual
//! stabilize / notify / fix-fingers rounds. Lookups are iterative and
//! report the hop count.
//!
//! Nodes may be malicious. A malicious node follows its [`MaliciousPolicy`]
//! only toward the victims listed there (everyone if the list is empty), and
//! only when it is the entry point of a request unless the policy scope is
//! [`Scope::Always`].

pub mod complaint;
pub mod guard;
pub mod sybil;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ring_id::{dual_hash, RingId, RING_BITS};

pub const DEFAULT_SUCCESSORS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// Misbehave only when answering a request directly.
    #[default]
    EntryOnly,
    /// Also misbehave while forwarding other nodes' lookups.
    Always,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaliciousPolicy {
    /// Refuse to answer or forward lookups.
    pub drop_lookup: bool,
    /// Answer with other colluding nodes instead of the responsible ones.
    pub misroute: bool,
    /// Claim to be responsible for the key.
    pub claim_key: bool,
    /// Return altered connection information from `locate_peer`.
    pub bad_peer_info: bool,
    /// Spawn virtual nodes (see [`sybil`]).
    pub sybil_spawn: bool,
    /// Usernames targeted. Empty targets everyone.
    pub victims: BTreeSet<String>,
    pub scope: Scope,
}

impl MaliciousPolicy {
    pub fn is_inert(&self) -> bool {
        !(self.drop_lookup || self.misroute || self.claim_key || self.bad_peer_info || self.sybil_spawn)
    }

    pub fn targets(&self, user: Option<&str>) -> bool {
        match user {
            Some(u) => self.victims.is_empty() || self.victims.contains(u),
            None => self.victims.is_empty(),
        }
    }

    fn routing_attack(&self) -> bool {
        self.drop_lookup || self.misroute || self.claim_key
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behavior {
    #[default]
    Correct,
    Malicious(MaliciousPolicy),
}

impl Behavior {
    pub fn policy(&self) -> Option<&MaliciousPolicy> {
        match self {
            Behavior::Malicious(p) if !p.is_inert() => Some(p),
            _ => None,
        }
    }

    pub fn is_malicious(&self) -> bool {
        self.policy().is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingNode {
    pub addr: String,
    pub id: RingId,
    pub successors: Vec<RingId>,
    pub predecessor: Option<RingId>,
    pub fingers: Vec<RingId>,
    pub behavior: Behavior,
    pub alive: bool,
    /// Connection information of peers registered here.
    pub records: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("node did not answer")]
    Unreachable,
    #[error("lookup exceeded the hop limit")]
    HopLimit,
    #[error("no such node")]
    UnknownNode,
    #[error("no record for that user")]
    NotFound,
}

/// Who is asking, and which nodes the asker has already caught misbehaving.
#[derive(Clone, Copy, Debug, Default)]
pub struct LookupContext<'a> {
    pub user: Option<&'a str>,
    pub exposed: Option<&'a BTreeSet<RingId>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ring {
    nodes: BTreeMap<RingId, RingNode>,
    pub successor_list_len: usize,
    /// Nodes removed by the complaint judge.
    pub isolated: BTreeSet<RingId>,
}

impl Default for Ring {
    fn default() -> Self {
        Self::new(DEFAULT_SUCCESSORS)
    }
}

impl Ring {
    pub fn new(successor_list_len: usize) -> Self {
        Ring {
            nodes: BTreeMap::new(),
            successor_list_len: successor_list_len.max(1),
            isolated: BTreeSet::new(),
        }
    }

    /// Builds a converged ring with fully repaired fingers.
    pub fn build(addrs: &[(String, Behavior)]) -> Self {
        let mut ring = Ring::default();
        for (addr, behavior) in addrs {
            ring.join(addr, behavior.clone());
            ring.stabilize_round();
        }
        ring.converge(4 * addrs.len() + 8);
        ring.fix_all_fingers();
        ring
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &RingId) -> Option<&RingNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &RingId) -> Option<&mut RingNode> {
        self.nodes.get_mut(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &RingId> {
        self.nodes.keys()
    }

    /// Nodes that are alive and not isolated.
    pub fn live_ids(&self) -> Vec<RingId> {
        self.nodes
            .values()
            .filter(|n| self.is_live(&n.id))
            .map(|n| n.id)
            .collect()
    }

    pub fn is_live(&self, id: &RingId) -> bool {
        self.nodes.get(id).is_some_and(|n| n.alive) && !self.isolated.contains(id)
    }

    pub fn malicious_ids(&self) -> Vec<RingId> {
        self.nodes
            .values()
            .filter(|n| n.behavior.is_malicious())
            .map(|n| n.id)
            .collect()
    }

    /// Brute-force successor over live nodes: the first id `>= key`, with
    /// wraparound.
    pub fn oracle_successor(&self, key: &RingId) -> Option<RingId> {
        let live = |id: &&RingId| self.is_live(id);
        self.nodes
            .range(*key..)
            .map(|(id, _)| id)
            .find(live)
            .or_else(|| self.nodes.keys().find(live))
            .copied()
    }

    fn first_live_successor(&self, node: &RingNode) -> RingId {
        node.successors
            .iter()
            .find(|s| self.is_live(s))
            .copied()
            .unwrap_or(node.id)
    }

    pub fn successor_of(&self, id: &RingId) -> Option<RingId> {
        self.nodes.get(id).map(|n| self.first_live_successor(n))
    }

    pub fn join(&mut self, addr: &str, behavior: Behavior) -> RingId {
        let id = RingId::of_address(addr);
        let successor = match self.live_ids().first() {
            None => id,
            Some(entry) => self
                .find_successor(entry, &id)
                .map(|(s, _)| s)
                .unwrap_or(*entry),
        };
        self.nodes.insert(
            id,
            RingNode {
                addr: addr.to_string(),
                id,
                successors: vec![successor],
                predecessor: None,
                fingers: vec![successor; RING_BITS],
                behavior,
                alive: true,
                records: BTreeMap::new(),
            },
        );
        id
    }

    /// Marks a node failed. Its neighbours repair on the next rounds.
    pub fn fail(&mut self, id: &RingId) {
        if let Some(n) = self.nodes.get_mut(id) {
            n.alive = false;
        }
    }

    /// Removes a node from routing after an isolation verdict.
    pub fn isolate(&mut self, id: &RingId) {
        self.isolated.insert(*id);
        self.converge(4 * self.nodes.len() + 8);
        self.fix_all_fingers();
    }

    pub fn stabilize(&mut self, id: &RingId) {
        let Some(node) = self.nodes.get(id) else { return };
        if !self.is_live(id) {
            return;
        }
        let mut succ = self.first_live_successor(node);
        if let Some(x) = self.nodes.get(&succ).and_then(|s| s.predecessor) {
            if self.is_live(&x) && x.in_open(id, &succ) {
                succ = x;
            }
        }
        if succ == *id {
            // Alone, or our successor pointer pointed back at us. Adopt our
            // predecessor so a two-node ring closes.
            if let Some(p) = self.nodes[id].predecessor.filter(|p| self.is_live(p)) {
                succ = p;
            }
        }
        let mut list = vec![succ];
        if let Some(s) = self.nodes.get(&succ) {
            for next in &s.successors {
                if list.len() >= self.successor_list_len {
                    break;
                }
                if *next != *id && self.is_live(next) && !list.contains(next) {
                    list.push(*next);
                }
            }
        }
        self.nodes.get_mut(id).unwrap().successors = list;
        self.notify(&succ, id);
    }

    pub fn notify(&mut self, target: &RingId, candidate: &RingId) {
        if target == candidate {
            return;
        }
        let live_pred = self
            .nodes
            .get(target)
            .and_then(|n| n.predecessor)
            .filter(|p| self.is_live(p));
        if let Some(n) = self.nodes.get_mut(target) {
            match live_pred {
                Some(p) if !candidate.in_open(&p, target) => {}
                _ => n.predecessor = Some(*candidate),
            }
        }
    }

    pub fn stabilize_round(&mut self) {
        for id in self.live_ids() {
            self.stabilize(&id);
        }
    }

    /// Runs stabilize rounds until successor pointers match the oracle or
    /// the round budget is spent. Returns whether it converged.
    pub fn converge(&mut self, max_rounds: usize) -> bool {
        for _ in 0..max_rounds {
            if self.successors_correct() {
                return true;
            }
            self.stabilize_round();
        }
        self.successors_correct()
    }

    pub fn successors_correct(&self) -> bool {
        self.live_ids().iter().all(|id| {
            let next = id.add_pow2(0);
            self.successor_of(id) == self.oracle_successor(&next)
        })
    }

    pub fn fix_fingers(&mut self, id: &RingId) {
        let mut fingers = Vec::with_capacity(RING_BITS);
        for k in 0..RING_BITS {
            let start = id.add_pow2(k);
            let f = self.find_successor(id, &start).map(|(s, _)| s).unwrap_or(*id);
            fingers.push(f);
        }
        if let Some(n) = self.nodes.get_mut(id) {
            n.fingers = fingers;
        }
    }

    pub fn fix_all_fingers(&mut self) {
        for id in self.live_ids() {
            self.fix_fingers(&id);
        }
    }

    fn closest_preceding(&self, node: &RingNode, key: &RingId) -> RingId {
        for f in node.fingers.iter().rev() {
            if self.is_live(f) && f.in_open(&node.id, key) {
                return *f;
            }
        }
        for s in node.successors.iter().rev() {
            if self.is_live(s) && s.in_open(&node.id, key) {
                return *s;
            }
        }
        node.id
    }

    /// Correct iterative lookup, ignoring node behaviour.
    pub fn find_successor(&self, start: &RingId, key: &RingId) -> Result<(RingId, usize), RingError> {
        self.lookup(start, key, LookupContext::default(), false)
    }

    /// Lookup that lets malicious nodes act on it. `start` is treated as the
    /// entry point.
    pub fn lookup_as(&self, start: &RingId, key: &RingId, ctx: LookupContext<'_>) -> Result<(RingId, usize), RingError> {
        self.lookup(start, key, ctx, true)
    }

    fn lookup(
        &self,
        start: &RingId,
        key: &RingId,
        ctx: LookupContext<'_>,
        adversarial: bool,
    ) -> Result<(RingId, usize), RingError> {
        let mut current = *start;
        let mut hops = 0usize;
        let limit = 4 * RING_BITS + self.nodes.len();
        loop {
            let node = self.nodes.get(&current).ok_or(RingError::UnknownNode)?;
            if !self.is_live(&current) {
                return Err(RingError::Unreachable);
            }
            if adversarial {
                if let Some(policy) = node.behavior.policy() {
                    let in_scope = hops == 0 || policy.scope == Scope::Always;
                    if in_scope && policy.targets(ctx.user) {
                        if policy.drop_lookup {
                            return Err(RingError::Unreachable);
                        }
                        let truth = self.oracle_successor(key);
                        if policy.misroute {
                            if let Some(c) = self.colluder(&current, truth.as_ref(), ctx.exposed, 0) {
                                return Ok((c, hops));
                            }
                        }
                        if policy.claim_key || policy.misroute {
                            return Ok((current, hops));
                        }
                    }
                }
            }
            let succ = self.first_live_successor(node);
            if key.in_open_closed(&current, &succ) {
                return Ok((succ, hops));
            }
            let next = self.closest_preceding(node, key);
            if next == current {
                return Ok((succ, hops));
            }
            current = next;
            hops += 1;
            if hops > limit {
                return Err(RingError::HopLimit);
            }
        }
    }

    /// A live malicious node other than `me` and `avoid` that the asker has
    /// not exposed. `skip` selects among several candidates.
    fn colluder(
        &self,
        me: &RingId,
        avoid: Option<&RingId>,
        exposed: Option<&BTreeSet<RingId>>,
        skip: usize,
    ) -> Option<RingId> {
        self.nodes
            .values()
            .filter(|n| {
                n.id != *me
                    && Some(&n.id) != avoid
                    && self.is_live(&n.id)
                    && n.behavior.policy().is_some_and(|p| p.routing_attack())
                    && !exposed.is_some_and(|e| e.contains(&n.id))
            })
            .map(|n| n.id)
            .nth(skip)
    }

    /// `LocateRendezvousServers(MD5(user), SHA-1(user))` sent to `via`.
    pub fn locate_rendezvous_servers(
        &self,
        via: &RingId,
        user: &str,
        exposed: Option<&BTreeSet<RingId>>,
    ) -> Result<(RingId, RingId), RingError> {
        let (a, b) = dual_hash(user);
        let ctx = LookupContext {
            user: Some(user),
            exposed,
        };
        let (y, _) = self.lookup_as(via, &a, ctx)?;
        let (z, _) = self.lookup_as(via, &b, ctx)?;
        Ok((y, z))
    }

    pub fn store_record(&mut self, server: &RingId, user: &str, info: &str) {
        if let Some(n) = self.nodes.get_mut(server) {
            n.records.insert(user.to_string(), info.to_string());
        }
    }

    pub fn remove_record(&mut self, server: &RingId, user: &str) {
        if let Some(n) = self.nodes.get_mut(server) {
            n.records.remove(user);
        }
    }

    pub fn registered_with(&self, server: &RingId, user: &str) -> bool {
        self.nodes.get(server).is_some_and(|n| n.records.contains_key(user))
    }

    /// `LocatePeer(user)` answered by `server`.
    pub fn locate_peer(&self, server: &RingId, user: &str) -> Result<String, RingError> {
        let node = self.nodes.get(server).ok_or(RingError::UnknownNode)?;
        if !self.is_live(server) {
            return Err(RingError::Unreachable);
        }
        let info = node.records.get(user).ok_or(RingError::NotFound)?;
        match node.behavior.policy() {
            Some(p) if p.bad_peer_info && p.targets(Some(user)) => Ok(format!("{info}#forged")),
            _ => Ok(info.clone()),
        }
    }

    /// Nodes that hold `target` in their successor list or finger table.
    pub fn holders_of(&self, target: &RingId) -> Vec<RingId> {
        self.nodes
            .values()
            .filter(|n| n.id != *target && (n.successors.contains(target) || n.fingers.contains(target)))
            .map(|n| n.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn correct_ring(n: usize) -> Ring {
        let addrs: Vec<(String, Behavior)> = (0..n)
            .map(|i| (format!("10.1.{}.{}:7000", i / 256, i % 256), Behavior::Correct))
            .collect();
        Ring::build(&addrs)
    }

    fn random_key(rng: &mut ChaCha20Rng) -> RingId {
        let mut b = [0u8; 20];
        rng.fill(&mut b);
        RingId(b)
    }

    #[test]
    fn small_rings_converge() {
        for n in [1, 2, 3, 8] {
            let ring = correct_ring(n);
            assert!(ring.successors_correct(), "n={n}");
        }
    }

    #[test]
    fn lookups_match_oracle_on_eight_nodes() {
        let ring = correct_ring(8);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ids = ring.live_ids();
        for _ in 0..500 {
            let key = random_key(&mut rng);
            let start = ids[rng.gen_range(0..ids.len())];
            let (got, _) = ring.find_successor(&start, &key).unwrap();
            assert_eq!(Some(got), ring.oracle_successor(&key));
        }
        // Exact node ids map to themselves.
        for id in &ids {
            assert_eq!(ring.find_successor(&ids[0], id).unwrap().0, *id);
        }
    }

    #[test]
    fn ring_repairs_after_failure() {
        let mut ring = correct_ring(16);
        let victim = ring.live_ids()[5];
        ring.fail(&victim);
        assert!(ring.converge(64));
        ring.fix_all_fingers();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let start = ring.live_ids()[0];
        for _ in 0..200 {
            let key = random_key(&mut rng);
            assert_eq!(Some(ring.find_successor(&start, &key).unwrap().0), ring.oracle_successor(&key));
        }
    }

    #[test]
    fn claim_key_node_returns_itself_for_victim_only() {
        let mut addrs: Vec<(String, Behavior)> = (0..8)
            .map(|i| (format!("10.2.0.{i}:7000"), Behavior::Correct))
            .collect();
        addrs[3].1 = Behavior::Malicious(MaliciousPolicy {
            claim_key: true,
            victims: ["alice".to_string()].into_iter().collect(),
            ..Default::default()
        });
        let ring = Ring::build(&addrs);
        let bad = RingId::of_address("10.2.0.3:7000");
        let (y, z) = ring.locate_rendezvous_servers(&bad, "alice", None).unwrap();
        assert_eq!((y, z), (bad, bad));
        let (a, b) = dual_hash("bob");
        let (y, z) = ring.locate_rendezvous_servers(&bad, "bob", None).unwrap();
        assert_eq!(Some(y), ring.oracle_successor(&a));
        assert_eq!(Some(z), ring.oracle_successor(&b));
    }

    #[test]
    fn drop_lookup_node_is_unreachable() {
        let mut addrs: Vec<(String, Behavior)> = (0..8)
            .map(|i| (format!("10.3.0.{i}:7000"), Behavior::Correct))
            .collect();
        addrs[0].1 = Behavior::Malicious(MaliciousPolicy {
            drop_lookup: true,
            ..Default::default()
        });
        let ring = Ring::build(&addrs);
        let bad = RingId::of_address("10.3.0.0:7000");
        assert_eq!(
            ring.locate_rendezvous_servers(&bad, "alice", None),
            Err(RingError::Unreachable)
        );
    }

    #[test]
    fn inert_policy_behaves_correctly() {
        let mut addrs: Vec<(String, Behavior)> = (0..8)
            .map(|i| (format!("10.4.0.{i}:7000"), Behavior::Correct))
            .collect();
        addrs[2].1 = Behavior::Malicious(MaliciousPolicy::default());
        let ring = Ring::build(&addrs);
        let via = RingId::of_address("10.4.0.2:7000");
        let (a, b) = dual_hash("carol");
        let (y, z) = ring.locate_rendezvous_servers(&via, "carol", None).unwrap();
        assert_eq!((Some(y), Some(z)), (ring.oracle_successor(&a), ring.oracle_successor(&b)));
    }
}
