//! JSON description of a network experiment.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "default_latency_ms": 10,
//!   "loss": 0.0,
//!   "hole_ttl_ms": null,
//!   "endpoints": [{"name": "a", "nat": "Public"}, {"name": "b", "nat": "FullCone"}],
//!   "links": [{"a": "a", "b": "b", "latency_ms": 25}],
//!   "partitions": [{"start_ms": 100, "end_ms": 200, "members": ["b"]}],
//!   "sends": [{"at_ms": 0, "src": "b", "dst": "a", "payload": "hi", "channel": "Datagram"}],
//!   "until_ms": 1000
//! }
//! ```
//!
//! Sends are executed in `at_ms` order (file order for ties). The result
//! reports how many messages were delivered and the trace hash.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Channel, EventQueue, NatType, Network, Partition};
use crate::Millis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetScenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_latency")]
    pub default_latency_ms: Millis,
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub hole_ttl_ms: Option<Millis>,
    pub endpoints: Vec<EndpointSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub partitions: Vec<PartitionSpec>,
    #[serde(default)]
    pub sends: Vec<SendSpec>,
    pub until_ms: Millis,
}

fn default_latency() -> Millis {
    super::DEFAULT_LATENCY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub name: String,
    pub nat: NatType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_ms: Millis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SendSpec {
    pub at_ms: Millis,
    pub src: String,
    pub dst: String,
    pub payload: String,
    #[serde(default = "default_channel")]
    pub channel: Channel,
}

fn default_channel() -> Channel {
    Channel::Datagram
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("duplicate endpoint `{0}`")]
    DuplicateEndpoint(String),
    #[error("loss must lie in [0, 1]")]
    BadLoss,
    #[error("partition ends before it starts")]
    BadPartition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetRunResult {
    pub sent: usize,
    pub dropped: usize,
    pub delivered: u64,
    pub trace_hash: String,
}

impl NetScenario {
    pub fn build(&self) -> Result<Network, ScenarioError> {
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(ScenarioError::BadLoss);
        }
        let mut net = Network::new(self.seed);
        net.default_latency = self.default_latency_ms;
        net.set_hole_ttl(self.hole_ttl_ms);
        net.set_loss(self.loss);
        for ep in &self.endpoints {
            if net.lookup(&ep.name).is_some() {
                return Err(ScenarioError::DuplicateEndpoint(ep.name.clone()));
            }
            net.add_endpoint(&ep.name, ep.nat);
        }
        let id = |net: &Network, name: &str| {
            net.lookup(name)
                .ok_or_else(|| ScenarioError::UnknownEndpoint(name.to_string()))
        };
        for link in &self.links {
            let (a, b) = (id(&net, &link.a)?, id(&net, &link.b)?);
            net.set_link_latency(a, b, link.latency_ms);
        }
        for p in &self.partitions {
            if p.end_ms < p.start_ms {
                return Err(ScenarioError::BadPartition);
            }
            let members = p
                .members
                .iter()
                .map(|m| id(&net, m))
                .collect::<Result<_, _>>()?;
            net.add_partition(Partition {
                start: p.start_ms,
                end: p.end_ms,
                members,
            });
        }
        for s in &self.sends {
            id(&net, &s.src)?;
            id(&net, &s.dst)?;
        }
        Ok(net)
    }

    pub fn run(&self) -> Result<NetRunResult, ScenarioError> {
        let mut net = self.build()?;
        let mut sends: EventQueue<&SendSpec> = EventQueue::new();
        for s in &self.sends {
            sends.schedule(s.at_ms, s);
        }
        let (mut sent, mut dropped) = (0, 0);
        while let Some((at, s)) = sends.pop_due(self.until_ms) {
            net.step(at);
            let (src, dst) = (net.lookup(&s.src).unwrap(), net.lookup(&s.dst).unwrap());
            sent += 1;
            if net.send(src, dst, s.payload.as_bytes().to_vec(), s.channel).is_err() {
                dropped += 1;
            }
        }
        net.step(self.until_ms.max(net.now()));
        Ok(NetRunResult {
            sent,
            dropped,
            delivered: net.delivered(),
            trace_hash: net.trace_hash(),
        })
    }
}
