//! Deterministic discrete-event network.
//!
//! [`EventQueue`] is a generic virtual-time scheduler. [`Network`] builds on
//! it to deliver messages between endpoints that sit behind NATs, with
//! per-link latency, random loss and time-windowed partitions. Every
//! delivery is folded into a SHA-256 trace hash so two runs can be compared
//! with a single value.

pub mod nat;
pub mod scenario;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use nat::{can_reach, NatProfile, NatType, Reachability, StunServer};

use crate::Millis;

struct Scheduled<E> {
    at: Millis,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Virtual-time event queue. Events run in `(at, insertion order)` order and
/// the clock never moves backwards.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now: Millis,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: 0,
            seq: 0,
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `event` at `at`. Times in the past are clamped to now.
    pub fn schedule(&mut self, at: Millis, event: E) {
        let at = at.max(self.now);
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.heap.peek().map(|s| s.at)
    }

    /// Pops the next event due at or before `until`, advancing the clock.
    pub fn pop_due(&mut self, until: Millis) -> Option<(Millis, E)> {
        if self.heap.peek()?.at > until {
            return None;
        }
        let next = self.heap.pop()?;
        self.now = next.at;
        Some((next.at, next.event))
    }

    /// Runs every event due at or before `until` through `handler`, which
    /// may schedule further events. Returns the number executed and leaves
    /// the clock at `until`.
    pub fn step(&mut self, until: Millis, mut handler: impl FnMut(&mut Self, Millis, E)) -> usize {
        assert!(until >= self.now, "step target {until} is before now {}", self.now);
        let mut count = 0;
        while let Some((at, event)) = self.pop_due(until) {
            handler(self, at, event);
            count += 1;
        }
        self.now = until;
        count
    }
}

pub type EndpointId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Datagram,
    Stream,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetEvent {
    pub deliver_at: Millis,
    pub src: EndpointId,
    pub dst: EndpointId,
    #[serde(with = "crate::crypto::hex_bytes")]
    pub payload: Vec<u8>,
    pub channel: Channel,
}

/// During `[start, end)` members can only talk to other members.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub start: Millis,
    pub end: Millis,
    pub members: BTreeSet<EndpointId>,
}

impl Partition {
    pub fn separates(&self, a: EndpointId, b: EndpointId, at: Millis) -> bool {
        at >= self.start && at < self.end && self.members.contains(&a) != self.members.contains(&b)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SendError {
    #[error("source endpoint is offline")]
    SourceOffline,
    #[error("destination endpoint is offline")]
    DestinationOffline,
    #[error("endpoints are partitioned")]
    Partitioned,
    #[error("destination NAT filters the packet")]
    Filtered,
    #[error("datagram lost")]
    Lost,
    #[error("unknown endpoint")]
    UnknownEndpoint,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StunError {
    #[error("both STUN addresses are unreachable")]
    StunUnreachable,
}

#[derive(Clone, Debug)]
pub struct Endpoint {
    pub name: String,
    pub nat: NatProfile,
    pub online: bool,
    rebinds: u16,
}

/// Simulated network of endpoints.
pub struct Network {
    endpoints: Vec<Endpoint>,
    by_name: BTreeMap<String, EndpointId>,
    queue: EventQueue<NetEvent>,
    inboxes: Vec<VecDeque<NetEvent>>,
    pub default_latency: Millis,
    link_latency: BTreeMap<(EndpointId, EndpointId), Millis>,
    loss: f64,
    rng: ChaCha20Rng,
    partitions: Vec<Partition>,
    hole_ttl: Option<Millis>,
    trace: Sha256,
    delivered: u64,
}

pub const DEFAULT_LATENCY: Millis = 10;

impl Network {
    pub fn new(seed: u64) -> Self {
        Network {
            endpoints: Vec::new(),
            by_name: BTreeMap::new(),
            queue: EventQueue::new(),
            inboxes: Vec::new(),
            default_latency: DEFAULT_LATENCY,
            link_latency: BTreeMap::new(),
            loss: 0.0,
            rng: ChaCha20Rng::seed_from_u64(seed),
            partitions: Vec::new(),
            hole_ttl: None,
            trace: Sha256::new(),
            delivered: 0,
        }
    }

    pub fn now(&self) -> Millis {
        self.queue.now()
    }

    pub fn set_loss(&mut self, p: f64) {
        assert!((0.0..=1.0).contains(&p));
        self.loss = p;
    }

    pub fn set_hole_ttl(&mut self, ttl: Option<Millis>) {
        self.hole_ttl = ttl;
        for ep in &mut self.endpoints {
            ep.nat.hole_ttl = ttl;
        }
    }

    pub fn set_link_latency(&mut self, a: EndpointId, b: EndpointId, latency: Millis) {
        self.link_latency.insert((a.min(b), a.max(b)), latency);
    }

    pub fn add_partition(&mut self, partition: Partition) {
        self.partitions.push(partition);
    }

    /// Adds an endpoint behind `nat`. Addresses are derived from the index:
    /// internal `10.x.y.z:5000`, external `100.x.y.z`.
    pub fn add_endpoint(&mut self, name: &str, nat: NatType) -> EndpointId {
        let id = self.endpoints.len();
        let [_, b, c, d] = (id as u32 + 1).to_be_bytes();
        let internal = if nat == NatType::Public {
            SocketAddrV4::new(Ipv4Addr::new(100, b, c, d), 5000)
        } else {
            SocketAddrV4::new(Ipv4Addr::new(10, b, c, d), 5000)
        };
        let mut profile = NatProfile::new(nat, internal, Ipv4Addr::new(100, b, c, d));
        profile.hole_ttl = self.hole_ttl;
        self.endpoints.push(Endpoint {
            name: name.to_string(),
            nat: profile,
            online: true,
            rebinds: 0,
        });
        self.inboxes.push(VecDeque::new());
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn endpoint(&self, id: EndpointId) -> &Endpoint {
        &self.endpoints[id]
    }

    pub fn endpoint_mut(&mut self, id: EndpointId) -> &mut Endpoint {
        &mut self.endpoints[id]
    }

    pub fn lookup(&self, name: &str) -> Option<EndpointId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endpoints.is_empty()
    }

    pub fn set_online(&mut self, id: EndpointId, online: bool) {
        self.endpoints[id].online = online;
    }

    /// Brings an endpoint back with fresh NAT bindings, as after a reconnect
    /// to a different network. Its advertised address changes.
    pub fn reconnect(&mut self, id: EndpointId) {
        let ep = &mut self.endpoints[id];
        ep.rebinds = ep.rebinds.wrapping_add(1);
        let base = 40_000u16.wrapping_add(ep.rebinds.wrapping_mul(97));
        ep.nat.rebind(base);
        ep.online = true;
    }

    pub fn advertised(&self, id: EndpointId) -> Option<SocketAddrV4> {
        self.endpoints[id].nat.advertised()
    }

    pub fn partitioned(&self, a: EndpointId, b: EndpointId, at: Millis) -> bool {
        self.partitions.iter().any(|p| p.separates(a, b, at))
    }

    pub fn latency(&self, a: EndpointId, b: EndpointId) -> Millis {
        self.link_latency
            .get(&(a.min(b), a.max(b)))
            .copied()
            .unwrap_or(self.default_latency)
    }

    pub fn rtt(&self, a: EndpointId, b: EndpointId) -> Millis {
        2 * self.latency(a, b)
    }

    /// Both ends online and not partitioned at the current time.
    pub fn connected(&self, a: EndpointId, b: EndpointId) -> bool {
        self.endpoints[a].online && self.endpoints[b].online && !self.partitioned(a, b, self.now())
    }

    /// NAT feasibility of `initiator` opening a connection to `responder`.
    pub fn reachability(&self, initiator: EndpointId, responder: EndpointId, prior_outbound: bool) -> Reachability {
        can_reach(
            &self.endpoints[initiator].nat,
            &self.endpoints[responder].nat,
            prior_outbound,
            self.now(),
        )
    }

    /// Performs the punching step: `responder` sends toward `initiator`'s
    /// advertised address.
    pub fn punch(&mut self, responder: EndpointId, toward: EndpointId) {
        let now = self.now();
        if let Some(target) = self.endpoints[toward].nat.advertised() {
            self.endpoints[responder].nat.send_to(target, now);
        }
    }

    /// Records an outbound packet from `src` to `dst`'s advertised address in
    /// `src`'s NAT. Establishes `src`'s mapping if it had none.
    pub fn touch(&mut self, src: EndpointId, dst: EndpointId) {
        let now = self.now();
        let target = self.endpoints[dst]
            .nat
            .advertised()
            .unwrap_or(self.endpoints[dst].nat.internal);
        self.endpoints[src].nat.send_to(target, now);
    }

    /// Sends a message. Datagrams may be lost; both channels are subject to
    /// the destination NAT filter evaluated at send time.
    pub fn send(
        &mut self,
        src: EndpointId,
        dst: EndpointId,
        payload: Vec<u8>,
        channel: Channel,
    ) -> Result<Millis, SendError> {
        if src >= self.endpoints.len() || dst >= self.endpoints.len() {
            return Err(SendError::UnknownEndpoint);
        }
        let now = self.now();
        if !self.endpoints[src].online {
            return Err(SendError::SourceOffline);
        }
        if !self.endpoints[dst].online {
            return Err(SendError::DestinationOffline);
        }
        if self.partitioned(src, dst, now) {
            return Err(SendError::Partitioned);
        }
        let dst_nat = &self.endpoints[dst].nat;
        let target = dst_nat.advertised().unwrap_or(dst_nat.internal);
        let source = self.endpoints[src].nat.send_to(target, now);
        if !self.endpoints[dst].nat.accepts(source, target, now) {
            return Err(SendError::Filtered);
        }
        if channel == Channel::Datagram && self.loss > 0.0 && self.rng.gen::<f64>() < self.loss {
            return Err(SendError::Lost);
        }
        let deliver_at = now + self.latency(src, dst);
        self.queue.schedule(
            deliver_at,
            NetEvent {
                deliver_at,
                src,
                dst,
                payload,
                channel,
            },
        );
        Ok(deliver_at)
    }

    /// Delivers every message due by `until` into the destination inboxes.
    pub fn step(&mut self, until: Millis) -> usize {
        let Network {
            queue,
            inboxes,
            trace,
            delivered,
            ..
        } = self;
        queue.step(until, |_, at, ev| {
            trace.update(at.to_be_bytes());
            trace.update((ev.src as u64).to_be_bytes());
            trace.update((ev.dst as u64).to_be_bytes());
            trace.update([ev.channel as u8]);
            trace.update((ev.payload.len() as u64).to_be_bytes());
            trace.update(&ev.payload);
            *delivered += 1;
            inboxes[ev.dst].push_back(ev);
        })
    }

    pub fn recv(&mut self, id: EndpointId) -> Option<NetEvent> {
        self.inboxes[id].pop_front()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn trace_hash(&self) -> String {
        hex::encode(self.trace.clone().finalize())
    }

    /// Classifies the NAT of `id` by replaying the STUN probes. `stun_a` and
    /// `stun_b` are the endpoints hosting the two STUN addresses.
    pub fn classify_nat(
        &mut self,
        id: EndpointId,
        stun: &StunServer,
        stun_a: EndpointId,
        stun_b: EndpointId,
    ) -> Result<NatType, StunError> {
        let now = self.now();
        let reach_a = self.connected(id, stun_a);
        let reach_b = self.connected(id, stun_b);
        let server = match (reach_a, reach_b) {
            (false, false) => return Err(StunError::StunUnreachable),
            (true, true) => *stun,
            // With one half partitioned away the probe still runs, with the
            // roles of the two addresses swapped if needed.
            (false, true) => StunServer {
                primary: stun.secondary,
                secondary: stun.primary,
            },
            (true, false) => *stun,
        };
        Ok(server.probe(&mut self.endpoints[id].nat, now))
    }
}
