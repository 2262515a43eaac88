//! Protocol kernel and deterministic simulator for a peer-to-peer private
//! social network.
//!
//! The crate is organised bottom-up:
//!
//! * [`crypto`] and [`ring_id`]: pluggable envelope primitives and the
//!   160-bit identifier space.
//! * [`netsim`]: virtual clock, NAT model and the traversal feasibility rules.
//! * [`ca`], [`rendezvous`], [`relay`]: the service-layer servers.
//! * [`peer`]: a world of peers that bootstrap, befriend, locate and connect.
//! * [`chord`]: the rendezvous ring, guarded registration and complaints.
//! * [`replication`]: paged profiles, zones, delta pulls and mirroring.
//! * [`harness`]: scenarios, churn simulation, metrics and reports.

pub mod ca;
pub mod chord;
pub mod replication;
pub mod crypto;
pub mod harness;
pub mod netsim;
pub mod peer;
pub mod relay;
pub mod rendezvous;
pub mod ring_id;

/// Virtual time in milliseconds.
pub type Millis = u64;

pub const SECOND: Millis = 1_000;
pub const MINUTE: Millis = 60 * SECOND;
pub const HOUR: Millis = 60 * MINUTE;
pub const DAY: Millis = 24 * HOUR;
