//! Nodes, links and the physical topology of an emulated QKD network.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

/// Number of resource units carried on every QKD link.
pub const RESOURCE_SLOTS: usize = 128;

/// Identifier of an SDN-enabled QKD or relay node. 32 bits on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a physical QKD link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    /// A QKD node; the only kind allowed as a chain endpoint.
    QkdNode,
    /// Decrypts and re-encrypts the global key, so it must be trusted.
    TrustedRelay,
    /// The TF receiver sitting between two TF transmitters. Never holds keys.
    UntrustedRelay,
}

impl NodeKind {
    pub fn wire_code(self) -> u8 {
        match self {
            NodeKind::QkdNode => 0,
            NodeKind::TrustedRelay => 1,
            NodeKind::UntrustedRelay => 2,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NodeKind::QkdNode),
            1 => Some(NodeKind::TrustedRelay),
            2 => Some(NodeKind::UntrustedRelay),
            _ => None,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::QkdNode => "qkd-node",
            NodeKind::TrustedRelay => "trusted-relay",
            NodeKind::UntrustedRelay => "untrusted-relay",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProtocolKind {
    Bb84,
    /// Twin-field. A TF link is one segment of a transmitter pair that meets
    /// at an untrusted relay.
    Tf,
}

impl ProtocolKind {
    pub fn wire_code(self) -> u8 {
        match self {
            ProtocolKind::Bb84 => 0,
            ProtocolKind::Tf => 1,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ProtocolKind::Bb84),
            1 => Some(ProtocolKind::Tf),
            _ => None,
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::Bb84 => "BB84",
            ProtocolKind::Tf => "TF",
        })
    }
}

/// Occupancy of the 128 resource units of one link.
///
/// Slot 0 is the most significant bit of the big-endian 128-bit value, which
/// is also the most significant bit of the first byte on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ResourceMap(u128);

impl ResourceMap {
    pub const EMPTY: ResourceMap = ResourceMap(0);

    fn mask(slot: usize) -> u128 {
        assert!(slot < RESOURCE_SLOTS, "resource slot {slot} out of range");
        1u128 << (RESOURCE_SLOTS - 1 - slot)
    }

    pub fn from_bits(bits: u128) -> Self {
        ResourceMap(bits)
    }

    pub fn bits(self) -> u128 {
        self.0
    }

    /// A map with only `slot` occupied.
    pub fn single(slot: usize) -> Self {
        ResourceMap(Self::mask(slot))
    }

    pub fn is_occupied(self, slot: usize) -> bool {
        self.0 & Self::mask(slot) != 0
    }

    pub fn occupy(&mut self, slot: usize) {
        self.0 |= Self::mask(slot);
    }

    pub fn free(&mut self, slot: usize) {
        self.0 &= !Self::mask(slot);
    }

    /// Lowest-numbered free slot.
    pub fn first_free(self) -> Option<usize> {
        let free = !self.0;
        if free == 0 {
            None
        } else {
            Some(free.leading_zeros() as usize)
        }
    }

    pub fn occupied(self) -> impl Iterator<Item = usize> {
        (0..RESOURCE_SLOTS).filter(move |&s| self.is_occupied(s))
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn to_wire(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_wire(bytes: [u8; 16]) -> Self {
        ResourceMap(u128::from_be_bytes(bytes))
    }
}

impl fmt::Debug for ResourceMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ResourceMap({:#034x})", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkdLink {
    pub id: LinkId,
    pub endpoints: (NodeId, NodeId),
    pub length_km: f64,
    pub protocol: ProtocolKind,
    pub key_rate_kbps: f64,
    pub resources: ResourceMap,
}

impl QkdLink {
    pub fn new(
        id: LinkId,
        a: NodeId,
        b: NodeId,
        length_km: f64,
        protocol: ProtocolKind,
        key_rate_kbps: f64,
    ) -> Self {
        QkdLink {
            id,
            endpoints: (a, b),
            length_km,
            protocol,
            key_rate_kbps,
            resources: ResourceMap::EMPTY,
        }
    }

    pub fn touches(&self, node: NodeId) -> bool {
        self.endpoints.0 == node || self.endpoints.1 == node
    }

    /// The endpoint opposite `node`, if `node` is an endpoint at all.
    pub fn peer_of(&self, node: NodeId) -> Option<NodeId> {
        if self.endpoints.0 == node {
            Some(self.endpoints.1)
        } else if self.endpoints.1 == node {
            Some(self.endpoints.0)
        } else {
            None
        }
    }

    pub fn connects(&self, a: NodeId, b: NodeId) -> bool {
        self.endpoints == (a, b) || self.endpoints == (b, a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyError {
    DuplicateNode(NodeId),
    DuplicateLink(LinkId),
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyError::DuplicateNode(n) => write!(f, "node {n} declared twice"),
            TopologyError::DuplicateLink(l) => write!(f, "link {l} declared twice"),
        }
    }
}

impl core::error::Error for TopologyError {}

/// Nodes and QKD links as deployed. Immutable once handed to the controller.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhysicalTopology {
    nodes: BTreeMap<NodeId, NodeKind>,
    links: BTreeMap<LinkId, QkdLink>,
}

impl PhysicalTopology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId, kind: NodeKind) -> Result<(), TopologyError> {
        if self.nodes.insert(id, kind).is_some() {
            return Err(TopologyError::DuplicateNode(id));
        }
        Ok(())
    }

    /// Links are accepted as-is; endpoint problems surface in [`validate_topology`].
    pub fn add_link(&mut self, link: QkdLink) -> Result<(), TopologyError> {
        let id = link.id;
        if self.links.insert(id, link).is_some() {
            return Err(TopologyError::DuplicateLink(id));
        }
        Ok(())
    }

    pub fn kind(&self, node: NodeId) -> Option<NodeKind> {
        self.nodes.get(&node).copied()
    }

    pub fn link(&self, id: LinkId) -> Option<&QkdLink> {
        self.links.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.nodes.iter().map(|(&n, &k)| (n, k))
    }

    pub fn links(&self) -> impl Iterator<Item = &QkdLink> + '_ {
        self.links.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Links incident to `node`, in link-id order.
    pub fn incident(&self, node: NodeId) -> impl Iterator<Item = &QkdLink> + '_ {
        self.links.values().filter(move |l| l.touches(node))
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.incident(node).count()
    }

    /// The link joining `a` and `b`, lowest id first if several exist.
    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<&QkdLink> {
        self.links.values().find(|l| l.connects(a, b))
    }
}

/// One broken topology invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SelfLoop { link: LinkId },
    UnknownEndpoint { link: LinkId, node: NodeId },
    ParallelLinks { first: LinkId, second: LinkId },
    InvalidLength { link: LinkId },
    InvalidRate { link: LinkId },
    UntrustedRelayDegree { node: NodeId, degree: usize },
    NonTfAtUntrustedRelay { link: LinkId, node: NodeId },
    TfWithoutUntrustedRelay { link: LinkId },
    TfBetweenUntrustedRelays { link: LinkId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop { link } => write!(f, "link {link} is a self-loop"),
            Violation::UnknownEndpoint { link, node } => {
                write!(f, "link {link} references unknown node {node}")
            }
            Violation::ParallelLinks { first, second } => {
                write!(f, "links {first} and {second} join the same pair of nodes")
            }
            Violation::InvalidLength { link } => {
                write!(f, "link {link} has a negative or non-finite length")
            }
            Violation::InvalidRate { link } => {
                write!(f, "link {link} has a negative or non-finite key rate")
            }
            Violation::UntrustedRelayDegree { node, degree } => {
                write!(f, "untrusted relay {node} has degree {degree}, expected 2")
            }
            Violation::NonTfAtUntrustedRelay { link, node } => {
                write!(f, "non-TF link {link} is incident to untrusted relay {node}")
            }
            Violation::TfWithoutUntrustedRelay { link } => {
                write!(f, "TF link {link} has no untrusted relay endpoint")
            }
            Violation::TfBetweenUntrustedRelays { link } => {
                write!(f, "TF link {link} joins two untrusted relays")
            }
        }
    }
}

/// Checks every structural invariant and reports each breach. An empty result
/// means the topology is usable.
pub fn validate_topology(topo: &PhysicalTopology) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen_pairs: BTreeMap<(NodeId, NodeId), LinkId> = BTreeMap::new();

    for link in topo.links() {
        let (a, b) = link.endpoints;
        if a == b {
            out.push(Violation::SelfLoop { link: link.id });
        }
        for n in [a, b] {
            if topo.kind(n).is_none() {
                out.push(Violation::UnknownEndpoint { link: link.id, node: n });
            }
        }
        if a != b {
            let key = if a < b { (a, b) } else { (b, a) };
            if let Some(&first) = seen_pairs.get(&key) {
                out.push(Violation::ParallelLinks { first, second: link.id });
            } else {
                seen_pairs.insert(key, link.id);
            }
        }
        if !(link.length_km.is_finite() && link.length_km >= 0.0) {
            out.push(Violation::InvalidLength { link: link.id });
        }
        if !(link.key_rate_kbps.is_finite() && link.key_rate_kbps >= 0.0) {
            out.push(Violation::InvalidRate { link: link.id });
        }

        let ur_ends = [a, b]
            .iter()
            .filter(|&&n| topo.kind(n) == Some(NodeKind::UntrustedRelay))
            .count();
        match link.protocol {
            ProtocolKind::Bb84 => {
                for n in [a, b] {
                    if topo.kind(n) == Some(NodeKind::UntrustedRelay) {
                        out.push(Violation::NonTfAtUntrustedRelay { link: link.id, node: n });
                    }
                }
            }
            ProtocolKind::Tf if a != b => match ur_ends {
                0 => out.push(Violation::TfWithoutUntrustedRelay { link: link.id }),
                2 => out.push(Violation::TfBetweenUntrustedRelays { link: link.id }),
                _ => {}
            },
            ProtocolKind::Tf => {}
        }
    }

    for (node, kind) in topo.nodes() {
        if kind == NodeKind::UntrustedRelay {
            let degree = topo.degree(node);
            if degree != 2 {
                out.push(Violation::UntrustedRelayDegree { node, degree });
            }
        }
    }
    out
}
