//! Probe for virtual-server takeover.
//!
//! An attacker that spawns `v` virtual servers next to `h` honest ones wins
//! a victim's identifier when one of its servers becomes that identifier's
//! successor. Node ids come from hashing addresses, so the attacker cannot
//! place them; each trial draws fresh addresses for both sides.

use serde::{Deserialize, Serialize};

use crate::ring_id::{dual_hash, RingId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SybilProbe {
    pub attacker_nodes: usize,
    pub honest_nodes: usize,
    pub trials: usize,
    /// Frequency with which the attacker owns the victim's MD5 identifier.
    pub single: f64,
    /// Frequency with which it owns both identifiers.
    pub dual: f64,
}

fn successor_is_attacker(nodes: &[(RingId, bool)], key: &RingId) -> bool {
    let idx = nodes.partition_point(|(id, _)| id < key);
    nodes[idx % nodes.len()].1
}

pub fn sybil_takeover_probe(attacker_nodes: usize, honest_nodes: usize, victim: &str, trials: usize, seed: u64) -> SybilProbe {
    let (a, b) = dual_hash(victim);
    let mut single = 0usize;
    let mut dual = 0usize;
    let mut nodes = Vec::with_capacity(attacker_nodes + honest_nodes);
    for t in 0..trials {
        nodes.clear();
        for k in 0..honest_nodes {
            nodes.push((RingId::of_address(&format!("honest-{seed}-{t}-{k}")), false));
        }
        for k in 0..attacker_nodes {
            nodes.push((RingId::of_address(&format!("sybil-{seed}-{t}-{k}")), true));
        }
        if nodes.is_empty() {
            continue;
        }
        nodes.sort();
        let wa = successor_is_attacker(&nodes, &a);
        let wb = successor_is_attacker(&nodes, &b);
        single += wa as usize;
        dual += (wa && wb) as usize;
    }
    let n = trials.max(1) as f64;
    SybilProbe {
        attacker_nodes,
        honest_nodes,
        trials,
        single: single as f64 / n,
        dual: dual as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_attackers_never_win() {
        let p = sybil_takeover_probe(0, 16, "alice", 500, 1);
        assert_eq!((p.single, p.dual), (0.0, 0.0));
    }

    #[test]
    fn dual_never_exceeds_single() {
        for v in [1, 4, 16] {
            let p = sybil_takeover_probe(v, 16, "bob", 1_000, 2);
            assert!(p.dual <= p.single);
        }
    }
}
