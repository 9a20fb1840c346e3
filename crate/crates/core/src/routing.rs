//! Minimum-hop routing over the abstracted topology and expansion of the
//! chosen route back onto physical nodes and links.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use crate::abstraction::{AbstractEdge, AbstractedTopology, Underlying};
use crate::model::{LinkId, NodeId, NodeKind};

/// One abstract edge walked in a given direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub from: NodeId,
    pub to: NodeId,
    pub edge: AbstractEdge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingError {
    UnknownNode(NodeId),
    NoPath { source: NodeId, destination: NodeId },
}

impl fmt::Display for RoutingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingError::UnknownNode(n) => write!(f, "node {n} is not routable"),
            RoutingError::NoPath { source, destination } => {
                write!(f, "no path from {source} to {destination}")
            }
        }
    }
}

impl core::error::Error for RoutingError {}

/// Minimum-hop path from `source` to `destination`, every abstract edge
/// counting as one hop.
///
/// Only relay nodes are transited; other QKD nodes are never used as
/// intermediate hops. Among equal-hop paths the one with the
/// lexicographically smallest node-id sequence wins, and among parallel edges
/// the smallest edge id.
pub fn compute_path(
    source: NodeId,
    destination: NodeId,
    topo: &AbstractedTopology,
) -> Result<Vec<Traversal>, RoutingError> {
    compute_path_with(source, destination, topo, |_| true)
}

/// [`compute_path`] restricted to edges accepted by `admit`.
pub fn compute_path_with<F>(
    source: NodeId,
    destination: NodeId,
    topo: &AbstractedTopology,
    admit: F,
) -> Result<Vec<Traversal>, RoutingError>
where
    F: Fn(&AbstractEdge) -> bool,
{
    for n in [source, destination] {
        if topo.kind(n).is_none() {
            return Err(RoutingError::UnknownNode(n));
        }
    }
    if source == destination {
        return Ok(Vec::new());
    }

    // Adjacency with the cheapest (lowest id) admitted edge per neighbour.
    let mut adjacency: BTreeMap<NodeId, BTreeMap<NodeId, &AbstractEdge>> = BTreeMap::new();
    for e in topo.edges().iter().filter(|e| admit(e)) {
        let (a, b) = e.endpoints;
        for (x, y) in [(a, b), (b, a)] {
            adjacency.entry(x).or_default().entry(y).or_insert(e);
        }
    }

    // Labels are (hops, node sequence); both orderings extend consistently
    // along a path, so the usual label-setting argument still holds.
    let mut settled: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0usize, vec![source])));

    while let Some(Reverse((hops, path))) = heap.pop() {
        let here = *path.last().expect("non-empty label");
        if settled.contains_key(&here) {
            continue;
        }
        settled.insert(here, path.clone());
        if here == destination {
            break;
        }
        let transit_ok = here == source || topo.kind(here) != Some(NodeKind::QkdNode);
        if !transit_ok {
            continue;
        }
        if let Some(next) = adjacency.get(&here) {
            for &peer in next.keys() {
                if settled.contains_key(&peer) {
                    continue;
                }
                let mut extended = path.clone();
                extended.push(peer);
                heap.push(Reverse((hops + 1, extended)));
            }
        }
    }

    let nodes = settled.remove(&destination).ok_or(RoutingError::NoPath { source, destination })?;
    Ok(nodes
        .windows(2)
        .map(|w| Traversal {
            from: w[0],
            to: w[1],
            edge: adjacency[&w[0]][&w[1]].clone(),
        })
        .collect())
}

/// The physical layout of an abstract route.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelayLayout {
    pub physical_path: Vec<NodeId>,
    /// Physical links in path order; `links[i]` joins `physical_path[i]` and
    /// `physical_path[i + 1]`.
    pub links: Vec<LinkId>,
    pub trusted: Vec<NodeId>,
    pub untrusted: Vec<NodeId>,
}

/// Reinserts the untrusted relay behind every collapsed edge and picks out
/// the relays along the route.
pub fn locate_relays(path: &[Traversal], topo: &AbstractedTopology) -> RelayLayout {
    let mut layout = RelayLayout::default();
    let Some(first) = path.first() else {
        return layout;
    };
    layout.physical_path.push(first.from);
    for hop in path {
        let forward = hop.edge.endpoints.0 == hop.from;
        match hop.edge.underlying {
            Underlying::Direct(link) => layout.links.push(link),
            Underlying::ViaUntrusted { first, relay, second } => {
                let (l1, l2) = if forward { (first, second) } else { (second, first) };
                layout.links.push(l1);
                layout.links.push(l2);
                layout.physical_path.push(relay);
                layout.untrusted.push(relay);
            }
        }
        layout.physical_path.push(hop.to);
    }
    let interior = &layout.physical_path[1..layout.physical_path.len() - 1];
    layout.trusted = interior
        .iter()
        .copied()
        .filter(|&n| topo.kind(n) == Some(NodeKind::TrustedRelay))
        .collect();
    layout
}
