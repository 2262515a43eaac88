//! NAT behaviour model and traversal feasibility.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};

use crate::Millis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NatType {
    Public,
    FullCone,
    AddressRestricted,
    PortRestricted,
    Symmetric,
}

impl NatType {
    pub const ALL: [NatType; 5] = [
        NatType::Public,
        NatType::FullCone,
        NatType::AddressRestricted,
        NatType::PortRestricted,
        NatType::Symmetric,
    ];

    /// Whether unsolicited inbound connections work once the endpoint has
    /// contacted any external host.
    pub fn accepts_unsolicited(self) -> bool {
        matches!(self, NatType::Public | NatType::FullCone)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reachability {
    Direct,
    AfterHolePunch,
    RelayRequired,
}

/// Filter key of a punched hole: external mapping, remote address, and the
/// remote port (`None` means any port).
type HoleKey = (SocketAddrV4, Option<Ipv4Addr>, Option<u16>);

/// NAT state of one endpoint with a single internal socket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatProfile {
    pub nat: NatType,
    pub internal: SocketAddrV4,
    pub public_ip: Ipv4Addr,
    /// Destination-independent mapping (cone types) or `None` for symmetric.
    cone_mapping: Option<SocketAddrV4>,
    /// Destination-specific mappings of a symmetric NAT.
    symmetric_mappings: BTreeMap<SocketAddrV4, SocketAddrV4>,
    /// Holes with the virtual time they were last refreshed.
    holes: BTreeMap<HoleKey, Millis>,
    next_port: u16,
    /// Holes older than this are ignored. `None` keeps them forever.
    pub hole_ttl: Option<Millis>,
}

impl NatProfile {
    pub fn new(nat: NatType, internal: SocketAddrV4, public_ip: Ipv4Addr) -> Self {
        let public_ip = if nat == NatType::Public {
            *internal.ip()
        } else {
            public_ip
        };
        NatProfile {
            nat,
            internal,
            public_ip,
            cone_mapping: None,
            symmetric_mappings: BTreeMap::new(),
            holes: BTreeMap::new(),
            next_port: 40_000,
            hole_ttl: None,
        }
    }

    fn fresh_port(&mut self) -> u16 {
        let port = self.next_port;
        self.next_port = self.next_port.wrapping_add(1).max(1024);
        port
    }

    /// Drops every mapping and hole and moves future mappings to a new port
    /// range. Models a device reconnecting behind a new binding.
    pub fn rebind(&mut self, port_base: u16) {
        self.cone_mapping = None;
        self.symmetric_mappings.clear();
        self.holes.clear();
        self.next_port = port_base.max(1024);
    }

    /// The external endpoint other hosts learn about (via STUN or the
    /// rendezvous server). Symmetric NATs advertise the binding used to
    /// reach the first contacted host, which is useless to anyone else.
    pub fn advertised(&self) -> Option<SocketAddrV4> {
        match self.nat {
            NatType::Public => Some(self.internal),
            NatType::Symmetric => self.symmetric_mappings.values().next().copied(),
            _ => self.cone_mapping,
        }
    }

    pub fn has_live_mapping(&self, now: Millis) -> bool {
        match self.nat {
            NatType::Public => true,
            _ => self
                .holes
                .iter()
                .any(|(key, at)| Some(key.0) == self.advertised() && self.live(*at, now)),
        }
    }

    fn live(&self, opened_at: Millis, now: Millis) -> bool {
        match self.hole_ttl {
            None => true,
            Some(ttl) => now.saturating_sub(opened_at) <= ttl,
        }
    }

    /// External source address used when sending to `dest`, without
    /// creating any state. A symmetric NAT with no binding for `dest`
    /// would allocate a fresh port, so a placeholder port is reported.
    pub fn source_toward(&self, dest: SocketAddrV4) -> SocketAddrV4 {
        match self.nat {
            NatType::Public => self.internal,
            NatType::Symmetric => self
                .symmetric_mappings
                .get(&dest)
                .copied()
                .unwrap_or_else(|| SocketAddrV4::new(self.public_ip, self.next_port)),
            _ => self
                .cone_mapping
                .unwrap_or_else(|| SocketAddrV4::new(self.public_ip, self.next_port)),
        }
    }

    /// Records an outbound packet to `dest` and returns the external source
    /// address it leaves from.
    pub fn send_to(&mut self, dest: SocketAddrV4, now: Millis) -> SocketAddrV4 {
        let external = match self.nat {
            NatType::Public => return self.internal,
            NatType::Symmetric => match self.symmetric_mappings.get(&dest) {
                Some(mapping) => *mapping,
                None => {
                    let mapping = SocketAddrV4::new(self.public_ip, self.fresh_port());
                    self.symmetric_mappings.insert(dest, mapping);
                    mapping
                }
            },
            _ => match self.cone_mapping {
                Some(mapping) => mapping,
                None => {
                    let mapping = SocketAddrV4::new(self.public_ip, self.fresh_port());
                    self.cone_mapping = Some(mapping);
                    mapping
                }
            },
        };
        let key = match self.nat {
            NatType::FullCone => (external, None, None),
            NatType::AddressRestricted => (external, Some(*dest.ip()), None),
            _ => (external, Some(*dest.ip()), Some(dest.port())),
        };
        self.holes.insert(key, now);
        external
    }

    /// Whether a packet from `from` addressed to the external endpoint `to`
    /// passes this NAT.
    pub fn accepts(&self, from: SocketAddrV4, to: SocketAddrV4, now: Millis) -> bool {
        if self.nat == NatType::Public {
            return to == self.internal;
        }
        let candidates: [HoleKey; 3] = [
            (to, None, None),
            (to, Some(*from.ip()), None),
            (to, Some(*from.ip()), Some(from.port())),
        ];
        candidates.iter().any(|key| {
            self.holes
                .get(key)
                .is_some_and(|opened| self.live(*opened, now))
        })
    }

    pub fn hole_count(&self) -> usize {
        self.holes.len()
    }
}

/// Whether `initiator` can open a connection to `responder`'s advertised
/// endpoint.
///
/// `prior_outbound` means the responder is told (through a rendezvous
/// server) to send a packet toward the initiator's advertised endpoint before
/// the initiator connects, which is the hole-punching step.
pub fn can_reach(
    initiator: &NatProfile,
    responder: &NatProfile,
    prior_outbound: bool,
    now: Millis,
) -> Reachability {
    if responder.nat == NatType::Public {
        return Reachability::Direct;
    }
    let Some(target) = responder.advertised() else {
        return Reachability::RelayRequired;
    };
    let source = initiator.source_toward(target);
    if responder.accepts(source, target, now) {
        return Reachability::Direct;
    }
    if !prior_outbound {
        return Reachability::RelayRequired;
    }
    match responder.nat {
        NatType::Public => Reachability::Direct,
        NatType::Symmetric => Reachability::RelayRequired,
        _ => {
            // The responder punches toward the initiator's advertised address.
            let Some(advertised) = initiator.advertised() else {
                return Reachability::RelayRequired;
            };
            let mut punched = responder.clone();
            punched.send_to(advertised, now);
            if punched.accepts(source, target, now) {
                Reachability::AfterHolePunch
            } else {
                Reachability::RelayRequired
            }
        }
    }
}

/// A dual-homed STUN server: two public addresses on different IPs, each
/// listening on two ports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StunServer {
    pub primary: SocketAddrV4,
    pub secondary: SocketAddrV4,
}

impl StunServer {
    pub fn new(primary: SocketAddrV4, secondary: SocketAddrV4) -> Self {
        assert_ne!(primary.ip(), secondary.ip(), "STUN must be dual homed");
        StunServer { primary, secondary }
    }

    fn alt_port(addr: SocketAddrV4) -> SocketAddrV4 {
        SocketAddrV4::new(*addr.ip(), addr.port().wrapping_add(1))
    }

    /// Replays the classic probe sequence against `nat`:
    ///
    /// 1. Test I to `primary`: the response reveals the mapped address. If it
    ///    equals the local address there is no NAT.
    /// 2. Test II asks for a response from the other IP and port. If it
    ///    arrives the NAT is full cone.
    /// 3. Test I repeated against `secondary`. A different mapped address
    ///    means the NAT allocates per destination: symmetric.
    /// 4. Test III asks for a response from the same IP on the other port.
    ///    Arriving means address restricted, else port restricted.
    pub fn probe(&self, nat: &mut NatProfile, now: Millis) -> NatType {
        let mapped = nat.send_to(self.primary, now);
        if mapped == nat.internal {
            return NatType::Public;
        }
        let changed = Self::alt_port(self.secondary);
        if nat.accepts(changed, mapped, now) {
            return NatType::FullCone;
        }
        let mapped_again = nat.send_to(self.secondary, now);
        if mapped_again != mapped {
            return NatType::Symmetric;
        }
        let port_changed = Self::alt_port(self.primary);
        if nat.accepts(port_changed, mapped, now) {
            NatType::AddressRestricted
        } else {
            NatType::PortRestricted
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(nat: NatType, host: u8) -> NatProfile {
        let mut p = NatProfile::new(
            nat,
            SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, host), 5000),
            Ipv4Addr::new(100, 0, 0, host),
        );
        // Contact a public server so cone types hold a mapping.
        p.send_to(SocketAddrV4::new(Ipv4Addr::new(1, 1, 1, 1), 3478), 0);
        p
    }

    #[test]
    fn stun_probe_recovers_each_type() {
        let stun = StunServer::new(
            SocketAddrV4::new(Ipv4Addr::new(1, 1, 1, 1), 3478),
            SocketAddrV4::new(Ipv4Addr::new(1, 1, 1, 2), 3478),
        );
        for (i, nat) in NatType::ALL.into_iter().enumerate() {
            let mut p = NatProfile::new(
                nat,
                SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, i as u8 + 1), 5000),
                Ipv4Addr::new(100, 0, 0, i as u8 + 1),
            );
            assert_eq!(stun.probe(&mut p, 0), nat);
        }
    }

    #[test]
    fn symmetric_never_shares_mappings() {
        let mut p = profile(NatType::Symmetric, 3);
        let a = p.send_to(SocketAddrV4::new(Ipv4Addr::new(8, 8, 8, 8), 1), 0);
        let b = p.send_to(SocketAddrV4::new(Ipv4Addr::new(8, 8, 8, 8), 2), 0);
        let c = p.send_to(SocketAddrV4::new(Ipv4Addr::new(8, 8, 8, 8), 1), 0);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn port_restricted_needs_exact_port() {
        let initiator = profile(NatType::FullCone, 1);
        let mut responder = profile(NatType::PortRestricted, 2);
        let adv = initiator.advertised().unwrap();
        let wrong = SocketAddrV4::new(*adv.ip(), adv.port() + 1);
        responder.send_to(wrong, 0);
        assert_eq!(can_reach(&initiator, &responder, false, 0), Reachability::RelayRequired);
        responder.send_to(adv, 0);
        assert_eq!(can_reach(&initiator, &responder, false, 0), Reachability::Direct);
    }

    #[test]
    fn holes_expire_with_ttl() {
        let initiator = profile(NatType::FullCone, 1);
        let mut responder = profile(NatType::AddressRestricted, 2);
        responder.hole_ttl = Some(1_000);
        responder.send_to(initiator.advertised().unwrap(), 0);
        assert_eq!(can_reach(&initiator, &responder, false, 500), Reachability::Direct);
        assert_eq!(can_reach(&initiator, &responder, false, 2_000), Reachability::RelayRequired);
    }
}
