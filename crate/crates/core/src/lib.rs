//! Core building blocks for orchestrating heterogeneous QKD chains from an SDN
//! controller.
//!
//! Everything in this crate is pure computation over owned data and only needs
//! `alloc`: the network model and its untrusted-relay abstraction, hop-count
//! routing, first-fit resource assignment, the extended OpenFlow 1.3 wire
//! codec, XOR key relaying with a custody audit, and the chain metrics.
//! Sockets, files and processes live in the `qkdchain` crate.

#![cfg_attr(not(test), no_std)]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod abstraction;
pub mod chain;
pub mod codec;
pub mod keyrelay;
pub mod metrics;
pub mod model;
pub mod resource;
pub mod routing;

pub use abstraction::{abstract_topology, AbstractEdge, AbstractedTopology, EdgeId, Underlying};
pub use chain::{ChainId, ChainRecord, ChainRequest, ChainStatus, ProtocolRequirement, RequestError};
pub use model::{
    validate_topology, LinkId, NodeId, NodeKind, PhysicalTopology, ProtocolKind, QkdLink,
    ResourceMap, TopologyError, Violation, RESOURCE_SLOTS,
};
