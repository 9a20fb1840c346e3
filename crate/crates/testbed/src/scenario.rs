//! Scenario files: the nodes, links and addresses of one emulated testbed.
//!
//! The format is TOML:
//!
//! ```toml
//! [controller]
//! southbound = "127.0.0.1:6653"   # agents dial this address
//! northbound = "127.0.0.1:8181"   # operator HTTP API
//! response_timeout_ms = 5000      # optional, per node configuration
//! agent_latency_ms = 20           # optional, emulated per-message processing time
//!
//! [[node]]
//! id = 6
//! kind = "trusted-relay"          # qkd-node | trusted-relay | untrusted-relay
//! addr = "127.0.0.1"              # local address the agent binds before dialing
//!
//! [[link]]
//! id = 1
//! ends = [2, 6]
//! length_km = 78.0
//! protocol = "BB84"               # BB84 | TF
//! key_rate_kbps = 28.1
//! ```
//!
//! Lengths must be whole decimetres and rates whole bits per second, since
//! that is how node reports carry them on the wire.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use qkdchain_core::model::{
    validate_topology, LinkId, NodeId, NodeKind, PhysicalTopology, ProtocolKind, QkdLink,
    TopologyError, Violation,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESPONSE_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_AGENT_LATENCY: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("topology violates {} invariant(s): {}", .0.len(), join(.0))]
    Invalid(Vec<Violation>),
    #[error("link {link}: {what} is not representable on the wire")]
    Unrepresentable { link: u32, what: &'static str },
    #[error("node {0} is not in the scenario")]
    UnknownNode(u32),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKindSpec {
    QkdNode,
    TrustedRelay,
    UntrustedRelay,
}

impl From<NodeKindSpec> for NodeKind {
    fn from(k: NodeKindSpec) -> Self {
        match k {
            NodeKindSpec::QkdNode => NodeKind::QkdNode,
            NodeKindSpec::TrustedRelay => NodeKind::TrustedRelay,
            NodeKindSpec::UntrustedRelay => NodeKind::UntrustedRelay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolSpec {
    #[serde(rename = "BB84")]
    Bb84,
    #[serde(rename = "TF")]
    Tf,
}

impl From<ProtocolSpec> for ProtocolKind {
    fn from(p: ProtocolSpec) -> Self {
        match p {
            ProtocolSpec::Bb84 => ProtocolKind::Bb84,
            ProtocolSpec::Tf => ProtocolKind::Tf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub southbound: SocketAddr,
    pub northbound: SocketAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: NodeKindSpec,
    pub addr: IpAddr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: u32,
    pub ends: [u32; 2],
    pub length_km: f64,
    pub protocol: ProtocolSpec,
    pub key_rate_kbps: f64,
}

impl LinkSpec {
    pub fn length_dm(&self) -> Option<u32> {
        to_wire_units(self.length_km, 10.0)
    }

    pub fn key_rate_bps(&self) -> Option<u32> {
        to_wire_units(self.key_rate_kbps, 1000.0)
    }
}

fn to_wire_units(value: f64, scale: f64) -> Option<u32> {
    let scaled = value * scale;
    let rounded = scaled.round();
    if !scaled.is_finite() || rounded < 0.0 || rounded > u32::MAX as f64 || (scaled - rounded).abs() > 1e-6 {
        None
    } else {
        Some(rounded as u32)
    }
}

/// One port of an agent, derived from the scenario links.
#[derive(Debug, Clone, PartialEq)]
pub struct PortSpec {
    /// 1-based; 0 is reserved for "no port".
    pub port_no: u32,
    pub peer: NodeId,
    pub link: LinkId,
    pub length_dm: u32,
    pub protocol: ProtocolKind,
    pub key_rate_bps: u32,
    /// For a TF segment, the other segment at the same untrusted relay.
    pub tf_partner: Option<LinkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub controller: ControllerSection,
    #[serde(rename = "node", default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(rename = "link", default)]
    pub links: Vec<LinkSpec>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    /// Parses and checks the topology invariants and wire representability.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        for l in &self.links {
            if l.length_dm().is_none() {
                return Err(ScenarioError::Unrepresentable { link: l.id, what: "length" });
            }
            if l.key_rate_bps().is_none() {
                return Err(ScenarioError::Unrepresentable { link: l.id, what: "key rate" });
            }
        }
        let topo = self.build_topology()?;
        let violations = validate_topology(&topo);
        if !violations.is_empty() {
            return Err(ScenarioError::Invalid(violations));
        }
        Ok(())
    }

    fn build_topology(&self) -> Result<PhysicalTopology, ScenarioError> {
        let mut t = PhysicalTopology::new();
        for n in &self.nodes {
            t.add_node(NodeId(n.id), n.kind.into())?;
        }
        for l in &self.links {
            t.add_link(QkdLink::new(
                LinkId(l.id),
                NodeId(l.ends[0]),
                NodeId(l.ends[1]),
                l.length_km,
                l.protocol.into(),
                l.key_rate_kbps,
            ))?;
        }
        Ok(t)
    }

    /// The topology as declared. Infallible for a scenario that passed
    /// [`Scenario::check`].
    pub fn topology(&self) -> Result<PhysicalTopology, ScenarioError> {
        let t = self.build_topology()?;
        let violations = validate_topology(&t);
        if violations.is_empty() {
            Ok(t)
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }

    pub fn node(&self, id: u32) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| NodeId(n.id)).collect()
    }

    pub fn link_between(&self, a: u32, b: u32) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.ends == [a, b] || l.ends == [b, a])
    }

    /// Ports of `node`, numbered from 1 in link-id order.
    pub fn ports_of(&self, node: u32) -> Result<Vec<PortSpec>, ScenarioError> {
        if self.node(node).is_none() {
            return Err(ScenarioError::UnknownNode(node));
        }
        let mut incident: Vec<&LinkSpec> = self.links.iter().filter(|l| l.ends.contains(&node)).collect();
        incident.sort_by_key(|l| l.id);
        incident
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let peer = if l.ends[0] == node { l.ends[1] } else { l.ends[0] };
                let tf_partner = self
                    .node(peer)
                    .filter(|p| p.kind == NodeKindSpec::UntrustedRelay)
                    .and_then(|_| self.links.iter().find(|o| o.id != l.id && o.ends.contains(&peer)))
                    .map(|o| LinkId(o.id));
                Ok(PortSpec {
                    port_no: i as u32 + 1,
                    peer: NodeId(peer),
                    link: LinkId(l.id),
                    length_dm: l.length_dm().ok_or(ScenarioError::Unrepresentable { link: l.id, what: "length" })?,
                    protocol: l.protocol.into(),
                    key_rate_bps: l
                        .key_rate_bps()
                        .ok_or(ScenarioError::Unrepresentable { link: l.id, what: "key rate" })?,
                    tf_partner,
                })
            })
            .collect()
    }

    pub fn response_timeout(&self) -> Duration {
        self.controller
            .response_timeout_ms
            .map(Duration::from_millis)
            .unwrap_or(DEFAULT_RESPONSE_TIMEOUT)
    }

    pub fn agent_latency(&self) -> Duration {
        self.controller
            .agent_latency_ms
            .map(Duration::from_millis)
            .unwrap_or(DEFAULT_AGENT_LATENCY)
    }
}

/// Path of the testbed scenario shipped with this crate.
pub fn default_scenario_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/testbed.toml")
}

/// The shipped testbed scenario, embedded at compile time.
pub fn default_scenario() -> Scenario {
    Scenario::parse(include_str!("../scenarios/testbed.toml")).expect("shipped scenario is valid")
}
