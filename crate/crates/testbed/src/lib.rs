//! Desk-scale emulation of an SDN-orchestrated QKD network: scenario files,
//! southbound transport, node agents, the controller, the northbound HTTP
//! API and the experiment harness.

pub mod agent;
pub mod controller;
pub mod harness;
pub mod northbound;
pub mod scenario;
pub mod southbound;
pub mod trace;
pub mod wire;
