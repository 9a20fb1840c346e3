//! Operator requests and the controller's record of each chain.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{LinkId, NodeId, NodeKind, PhysicalTopology};

pub type ChainId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolRequirement {
    /// BB84 links only; every intermediate node is a trusted relay.
    Conventional,
    /// BB84 links and TF pairs through untrusted relays.
    Heterogeneous,
}

impl ProtocolRequirement {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolRequirement::Conventional => "BB84",
            ProtocolRequirement::Heterogeneous => "BB84+TF",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "BB84" => Some(ProtocolRequirement::Conventional),
            "BB84+TF" => Some(ProtocolRequirement::Heterogeneous),
            _ => None,
        }
    }

    pub fn permits_untrusted_relays(self) -> bool {
        matches!(self, ProtocolRequirement::Heterogeneous)
    }
}

impl fmt::Display for ProtocolRequirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRequest {
    pub request_id: u32,
    pub source: NodeId,
    pub destination: NodeId,
    pub required_rate_kbps: f64,
    pub protocol: ProtocolRequirement,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestError {
    SameEndpoints(NodeId),
    UnknownNode(NodeId),
    NotQkdNode { node: NodeId, kind: NodeKind },
    InvalidRate,
}

impl fmt::Display for RequestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestError::SameEndpoints(n) => write!(f, "source and destination are both node {n}"),
            RequestError::UnknownNode(n) => write!(f, "node {n} is not part of the topology"),
            RequestError::NotQkdNode { node, kind } => {
                write!(f, "node {node} is a {kind} and cannot terminate a chain")
            }
            RequestError::InvalidRate => f.write_str("required rate must be a non-negative number"),
        }
    }
}

impl core::error::Error for RequestError {}

impl ChainRequest {
    pub fn validate(&self, topo: &PhysicalTopology) -> Result<(), RequestError> {
        if self.source == self.destination {
            return Err(RequestError::SameEndpoints(self.source));
        }
        if !(self.required_rate_kbps.is_finite() && self.required_rate_kbps >= 0.0) {
            return Err(RequestError::InvalidRate);
        }
        for node in [self.source, self.destination] {
            match topo.kind(node) {
                None => return Err(RequestError::UnknownNode(node)),
                Some(NodeKind::QkdNode) => {}
                Some(kind) => return Err(RequestError::NotQkdNode { node, kind }),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainStatus {
    Pending,
    Established,
    Failed(String),
}

/// One resource unit held by a chain on one physical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Allocation {
    pub link: LinkId,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub chain_id: ChainId,
    pub request_id: u32,
    pub protocol: ProtocolRequirement,
    pub physical_path: Vec<NodeId>,
    pub trusted_relays: Vec<NodeId>,
    pub untrusted_relays: Vec<NodeId>,
    /// In path order, one per traversed physical link.
    pub allocations: Vec<Allocation>,
    pub status: ChainStatus,
}

impl ChainRecord {
    pub fn source(&self) -> Option<NodeId> {
        self.physical_path.first().copied()
    }

    pub fn destination(&self) -> Option<NodeId> {
        self.physical_path.last().copied()
    }

    pub fn slot_on(&self, link: LinkId) -> Option<usize> {
        self.allocations.iter().find(|a| a.link == link).map(|a| a.slot)
    }
}
