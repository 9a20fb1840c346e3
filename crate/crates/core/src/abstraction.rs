//! Collapsing untrusted relays out of the routable graph.
//!
//! The two TF segments meeting at an untrusted relay are always used
//! together, so the controller routes over a graph where each such pair is a
//! single edge between the two transmitters and the relay itself is gone.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::model::{
    validate_topology, LinkId, NodeId, NodeKind, PhysicalTopology, ProtocolKind, Violation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub u32);

/// What physical links an abstract edge stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Underlying {
    Direct(LinkId),
    /// `first` touches the edge's first endpoint, `second` its second one.
    ViaUntrusted { first: LinkId, relay: NodeId, second: LinkId },
}

impl Underlying {
    pub fn links(&self) -> impl Iterator<Item = LinkId> {
        let (a, b) = match *self {
            Underlying::Direct(l) => (l, None),
            Underlying::ViaUntrusted { first, second, .. } => (first, Some(second)),
        };
        core::iter::once(a).chain(b)
    }

    pub fn relay(&self) -> Option<NodeId> {
        match *self {
            Underlying::Direct(_) => None,
            Underlying::ViaUntrusted { relay, .. } => Some(relay),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractEdge {
    pub id: EdgeId,
    pub endpoints: (NodeId, NodeId),
    pub length_km: f64,
    pub min_rate_kbps: f64,
    pub protocol: ProtocolKind,
    pub underlying: Underlying,
}

impl AbstractEdge {
    pub fn peer_of(&self, node: NodeId) -> Option<NodeId> {
        if self.endpoints.0 == node {
            Some(self.endpoints.1)
        } else if self.endpoints.1 == node {
            Some(self.endpoints.0)
        } else {
            None
        }
    }

    pub fn is_untrusted_pair(&self) -> bool {
        matches!(self.underlying, Underlying::ViaUntrusted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AbstractedTopology {
    nodes: BTreeMap<NodeId, NodeKind>,
    edges: Vec<AbstractEdge>,
}

impl AbstractedTopology {
    pub fn kind(&self, node: NodeId) -> Option<NodeKind> {
        self.nodes.get(&node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.nodes.iter().map(|(&n, &k)| (n, k))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Edges in id order.
    pub fn edges(&self) -> &[AbstractEdge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> Option<&AbstractEdge> {
        self.edges.get(id.0 as usize).filter(|e| e.id == id)
    }

    pub fn edges_between(&self, a: NodeId, b: NodeId) -> impl Iterator<Item = &AbstractEdge> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.endpoints == (a, b) || e.endpoints == (b, a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalformedTopology(pub Vec<Violation>);

impl fmt::Display for MalformedTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed topology:")?;
        for v in &self.0 {
            write!(f, " {v};")?;
        }
        Ok(())
    }
}

impl core::error::Error for MalformedTopology {}

/// Builds the routable view of `topo`. Each untrusted relay and its two TF
/// segments become one edge whose length is the segment sum and whose rate is
/// the segment minimum; every other link maps to its own edge.
pub fn abstract_topology(topo: &PhysicalTopology) -> Result<AbstractedTopology, MalformedTopology> {
    let violations = validate_topology(topo);
    if !violations.is_empty() {
        return Err(MalformedTopology(violations));
    }

    let nodes: BTreeMap<NodeId, NodeKind> = topo
        .nodes()
        .filter(|&(_, k)| k != NodeKind::UntrustedRelay)
        .collect();

    let mut edges = Vec::new();
    let mut collapsed: BTreeSet<NodeId> = BTreeSet::new();

    for link in topo.links() {
        let (a, b) = link.endpoints;
        let relay = [a, b]
            .into_iter()
            .find(|&n| topo.kind(n) == Some(NodeKind::UntrustedRelay));
        let id = EdgeId(edges.len() as u32);
        match relay {
            None => edges.push(AbstractEdge {
                id,
                endpoints: (a, b),
                length_km: link.length_km,
                min_rate_kbps: link.key_rate_kbps,
                protocol: link.protocol,
                underlying: Underlying::Direct(link.id),
            }),
            Some(relay) => {
                if !collapsed.insert(relay) {
                    continue;
                }
                // Validation guarantees exactly two TF links at the relay.
                let second = topo
                    .incident(relay)
                    .find(|l| l.id != link.id)
                    .expect("untrusted relay has degree 2");
                let near = link.peer_of(relay).expect("incident link");
                let far = second.peer_of(relay).expect("incident link");
                edges.push(AbstractEdge {
                    id,
                    endpoints: (near, far),
                    length_km: link.length_km + second.length_km,
                    min_rate_kbps: link.key_rate_kbps.min(second.key_rate_kbps),
                    protocol: ProtocolKind::Tf,
                    underlying: Underlying::ViaUntrusted {
                        first: link.id,
                        relay,
                        second: second.id,
                    },
                });
            }
        }
    }

    Ok(AbstractedTopology { nodes, edges })
}
