//! Emulated SDN agent for one QKD or relay node.
//!
//! The agent dials the controller, exchanges HELLO, reports the node's
//! pre-stored port information, then answers chain configuration requests
//! after an emulated processing latency. Configuring a port deposits the
//! hop's link key in that port's key store, except on untrusted relays,
//! which never hold key material.

use std::collections::{BTreeMap, VecDeque};
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use qkdchain_core::chain::ChainId;
use qkdchain_core::codec::{
    self, ChainConfigRequest, ChainConfigResponse, ConfigStatus, DecodeError, ErrorMsg, Message, NodeInfoReport,
    PortInfo, ERR_HELLO_FAILED, ERR_HELLO_INCOMPATIBLE,
};
use qkdchain_core::keyrelay::{derive_link_key, SecretKey, DEFAULT_KEY_BYTES};
use qkdchain_core::model::{NodeId, NodeKind};
use thiserror::Error;
use tokio::net::{TcpSocket, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::scenario::{PortSpec, Scenario, ScenarioError};
use crate::wire::{self, WireError};

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub ports: Vec<PortSpec>,
    pub controller: SocketAddr,
    /// Local address to bind before dialing; `None` lets the OS choose.
    pub bind_ip: Option<IpAddr>,
    pub latency: Duration,
    pub key_seed: u64,
}

impl AgentConfig {
    pub fn from_scenario(
        scenario: &Scenario,
        node: u32,
        controller: SocketAddr,
        latency: Duration,
        key_seed: u64,
    ) -> Result<Self, ScenarioError> {
        let spec = scenario.node(node).ok_or(ScenarioError::UnknownNode(node))?;
        Ok(AgentConfig {
            node_id: NodeId(node),
            kind: spec.kind.into(),
            ports: scenario.ports_of(node)?,
            controller,
            bind_ip: Some(spec.addr),
            latency,
            key_seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortState {
    pub port_no: u32,
    pub chain: Option<ChainId>,
    pub slot: Option<usize>,
    pub keys: VecDeque<SecretKey>,
}

/// Configuration state of one node, independent of any connection.
#[derive(Debug, Clone)]
pub struct NodeAgent {
    node_id: NodeId,
    kind: NodeKind,
    specs: Vec<PortSpec>,
    key_seed: u64,
    ports: BTreeMap<u32, PortState>,
}

impl NodeAgent {
    pub fn new(config: &AgentConfig) -> Self {
        let ports = config
            .ports
            .iter()
            .map(|p| (p.port_no, PortState { port_no: p.port_no, chain: None, slot: None, keys: VecDeque::new() }))
            .collect();
        NodeAgent {
            node_id: config.node_id,
            kind: config.kind,
            specs: config.ports.clone(),
            key_seed: config.key_seed,
            ports,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn ports(&self) -> &BTreeMap<u32, PortState> {
        &self.ports
    }

    pub fn report(&self, xid: u32) -> NodeInfoReport {
        NodeInfoReport {
            xid,
            node_id: self.node_id,
            kind: self.kind,
            ports: self
                .specs
                .iter()
                .map(|p| PortInfo {
                    port_no: p.port_no,
                    peer: p.peer,
                    length_dm: p.length_dm,
                    protocol: p.protocol,
                    key_rate_bps: p.key_rate_bps,
                })
                .collect(),
        }
    }

    /// Applies one configuration or teardown request. Port 0 stands for "no
    /// port" on the side of a chain endpoint.
    pub fn handle_config(&mut self, req: &ChainConfigRequest) -> ChainConfigResponse {
        let status = self.apply(req);
        ChainConfigResponse { xid: req.xid, chain_id: req.chain_id, node_id: self.node_id, status }
    }

    fn apply(&mut self, req: &ChainConfigRequest) -> ConfigStatus {
        if req.node_id != self.node_id {
            return ConfigStatus::Internal;
        }
        let named: Vec<u32> = [req.input_port, req.output_port].into_iter().filter(|&p| p != 0).collect();
        if named.iter().any(|p| !self.ports.contains_key(p)) {
            return ConfigStatus::UnknownPort;
        }

        if req.is_teardown() {
            for p in &named {
                let port = self.ports.get_mut(p).expect("checked above");
                if port.chain == Some(req.chain_id) {
                    port.chain = None;
                    port.slot = None;
                    port.keys.clear();
                }
            }
            return ConfigStatus::Success;
        }

        if named.iter().any(|p| matches!(self.ports[p].chain, Some(c) if c != req.chain_id)) {
            return ConfigStatus::NodeBusy;
        }
        let slot = req.resource_units.occupied().next();
        // The bitmap describes the outgoing link, or the incoming one at the
        // chain's far end.
        let slotted = if req.output_port != 0 { req.output_port } else { req.input_port };
        for &p in &named {
            let spec = self.specs.iter().find(|s| s.port_no == p).expect("port exists").clone();
            let port = self.ports.get_mut(&p).expect("checked above");
            let fresh = port.chain.is_none();
            port.chain = Some(req.chain_id);
            if p == slotted {
                port.slot = slot;
            }
            if fresh && self.kind != NodeKind::UntrustedRelay {
                let key_id = spec.tf_partner.map_or(spec.link, |o| o.min(spec.link));
                port.keys.push_back(derive_link_key(self.key_seed, key_id, DEFAULT_KEY_BYTES));
            }
        }
        ConfigStatus::Success
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("controller speaks wire version {0:#04x}")]
    VersionMismatch(u8),
    #[error("unexpected message during handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

enum SessionEnd {
    Shutdown,
    ControllerClosed,
}

/// A running in-process agent.
#[derive(Debug)]
pub struct AgentHandle {
    pub node_id: NodeId,
    pub state: Arc<Mutex<NodeAgent>>,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<Result<(), AgentError>>,
}

impl AgentHandle {
    pub async fn stop(self) -> Result<(), AgentError> {
        let _ = self.shutdown.send(true);
        self.task.await.unwrap_or(Ok(()))
    }

    pub fn abort(self) {
        self.task.abort();
    }
}

pub fn spawn_agent(config: AgentConfig) -> AgentHandle {
    let state = Arc::new(Mutex::new(NodeAgent::new(&config)));
    let (tx, rx) = watch::channel(false);
    let node_id = config.node_id;
    let task = tokio::spawn(run_agent(config, state.clone(), rx));
    AgentHandle { node_id, state, shutdown: tx, task }
}

/// Serves until `shutdown` flips to true, reconnecting with backoff whenever
/// the controller connection drops. A version mismatch is fatal.
pub async fn run_agent(
    config: AgentConfig,
    state: Arc<Mutex<NodeAgent>>,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), AgentError> {
    let mut backoff = Duration::from_millis(25);
    loop {
        if *shutdown.borrow() {
            return Ok(());
        }
        match session(&config, &state, &mut shutdown).await {
            Ok(SessionEnd::Shutdown) => return Ok(()),
            Ok(SessionEnd::ControllerClosed) => {
                info!(node = %config.node_id, "controller closed the session");
                backoff = Duration::from_millis(25);
            }
            Err(AgentError::VersionMismatch(v)) => return Err(AgentError::VersionMismatch(v)),
            Err(e) => debug!(node = %config.node_id, "session failed: {e}"),
        }
        tokio::select! {
            _ = tokio::time::sleep(backoff) => {}
            _ = shutdown.changed() => return Ok(()),
        }
        backoff = (backoff * 2).min(Duration::from_secs(1));
    }
}

async fn connect(config: &AgentConfig) -> std::io::Result<TcpStream> {
    let socket = if config.controller.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
    if let Some(ip) = config.bind_ip.filter(|ip| ip.is_ipv4() == config.controller.is_ipv4()) {
        socket.bind(SocketAddr::new(ip, 0))?;
    }
    let stream = socket.connect(config.controller).await?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

async fn send(stream: &mut TcpStream, node: NodeId, msg: &Message) -> Result<(), WireError> {
    let bytes = wire::write_message(stream, msg).await?;
    info!(node = %node, "sent {msg}\n{}", codec::hex_dump(&bytes));
    Ok(())
}

async fn session(
    config: &AgentConfig,
    state: &Arc<Mutex<NodeAgent>>,
    shutdown: &mut watch::Receiver<bool>,
) -> Result<SessionEnd, AgentError> {
    let node = config.node_id;
    let mut stream = connect(config).await.map_err(WireError::from)?;
    send(&mut stream, node, &Message::Hello { xid: 0 }).await?;

    let frame = wire::read_frame(&mut stream).await?;
    match codec::decode(&frame) {
        Ok(Message::Hello { .. }) => info!(node = %node, "received HELLO\n{}", codec::hex_dump(&frame)),
        Err(DecodeError::BadVersion(v)) => {
            warn!(node = %node, "controller HELLO has version {v:#04x}, closing");
            let err = Message::Error(ErrorMsg {
                xid: u32::from_be_bytes(frame[4..8].try_into().expect("header")),
                err_type: ERR_HELLO_FAILED,
                code: ERR_HELLO_INCOMPATIBLE,
                data: frame.iter().copied().take(64).collect(),
            });
            let _ = send(&mut stream, node, &err).await;
            return Err(AgentError::VersionMismatch(v));
        }
        Ok(other) => return Err(AgentError::Handshake(other.to_string())),
        Err(e) => return Err(WireError::Decode(e).into()),
    }

    let report = state.lock().expect("agent state").report(1);
    send(&mut stream, node, &Message::NodeInfoReport(report)).await?;

    loop {
        let frame = tokio::select! {
            r = wire::read_frame(&mut stream) => match r {
                Ok(f) => f,
                Err(WireError::Closed) => return Ok(SessionEnd::ControllerClosed),
                Err(e) => return Err(e.into()),
            },
            _ = shutdown.changed() => return Ok(SessionEnd::Shutdown),
        };
        match codec::decode(&frame) {
            Ok(Message::ChainConfigRequest(req)) => {
                info!(node = %node, "received {}\n{}", Message::ChainConfigRequest(req.clone()), codec::hex_dump(&frame));
                tokio::time::sleep(config.latency).await;
                let resp = state.lock().expect("agent state").handle_config(&req);
                send(&mut stream, node, &Message::ChainConfigResponse(resp)).await?;
            }
            Ok(other) => info!(node = %node, "ignoring {other}"),
            Err(e) => warn!(node = %node, "undecodable frame: {e}\n{}", codec::hex_dump(&frame)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::default_scenario;
    use qkdchain_core::model::ResourceMap;

    fn agent(node: u32) -> NodeAgent {
        let cfg = AgentConfig::from_scenario(&default_scenario(), node, "127.0.0.1:1".parse().unwrap(), Duration::ZERO, 7)
            .unwrap();
        NodeAgent::new(&cfg)
    }

    fn req(node: u32, chain: u32, input: u32, output: u32, slot: Option<usize>) -> ChainConfigRequest {
        ChainConfigRequest {
            xid: 9,
            chain_id: chain,
            node_id: NodeId(node),
            input_port: input,
            resource_units: slot.map_or(ResourceMap::EMPTY, ResourceMap::single),
            output_port: output,
        }
    }

    #[test]
    fn relay_6_accepts_heterogeneous_config() {
        let mut a = agent(6);
        // Port 1 faces node 2, port 3 faces untrusted relay 8.
        let r = a.handle_config(&req(6, 1, 1, 3, Some(0)));
        assert_eq!(r.status, ConfigStatus::Success);
        assert_eq!((r.xid, r.chain_id, r.node_id), (9, 1, NodeId(6)));
        assert_eq!(a.ports()[&3].slot, Some(0));
        assert_eq!(a.ports()[&3].chain, Some(1));
        assert_eq!(a.ports()[&1].chain, Some(1));
        assert_eq!(a.ports()[&3].keys.len(), 1);
    }

    #[test]
    fn unknown_port_and_busy_port() {
        let mut a = agent(6);
        assert_eq!(a.handle_config(&req(6, 1, 9, 0, Some(0))).status, ConfigStatus::UnknownPort);
        assert_eq!(a.handle_config(&req(6, 1, 1, 2, Some(0))).status, ConfigStatus::Success);
        assert_eq!(a.handle_config(&req(6, 2, 2, 4, Some(1))).status, ConfigStatus::NodeBusy);
        // The same chain may be configured again.
        assert_eq!(a.handle_config(&req(6, 1, 1, 2, Some(0))).status, ConfigStatus::Success);
        assert_eq!(a.handle_config(&req(5, 1, 1, 2, Some(0))).status, ConfigStatus::Internal);
    }

    #[test]
    fn configure_then_teardown_restores_state() {
        let mut a = agent(6);
        let initial = a.ports().clone();
        assert_eq!(a.handle_config(&req(6, 4, 1, 3, Some(5))).status, ConfigStatus::Success);
        assert_ne!(a.ports(), &initial);
        assert_eq!(a.handle_config(&req(6, 4, 1, 3, None)).status, ConfigStatus::Success);
        assert_eq!(a.ports(), &initial);
    }

    #[test]
    fn untrusted_relay_never_holds_keys() {
        let mut a = agent(8);
        assert_eq!(a.handle_config(&req(8, 1, 1, 2, Some(0))).status, ConfigStatus::Success);
        assert!(a.ports().values().all(|p| p.keys.is_empty()));
        assert!(a.ports().values().all(|p| p.chain == Some(1)));
    }

    #[test]
    fn tf_pair_ends_hold_the_same_key() {
        let mut six = agent(6);
        let mut three = agent(3);
        six.handle_config(&req(6, 1, 1, 3, Some(0)));
        three.handle_config(&req(3, 1, 1, 0, Some(0)));
        let k6 = six.ports()[&3].keys[0].clone();
        let k3 = three.ports()[&1].keys[0].clone();
        assert_eq!(k6, k3);
    }

    #[test]
    fn report_mirrors_ports() {
        let a = agent(6);
        let r = a.report(1);
        assert_eq!(r.kind, NodeKind::TrustedRelay);
        assert_eq!(r.ports.len(), 4);
        assert_eq!(r.ports[2].peer, NodeId(8));
        assert_eq!(r.ports[2].length_dm, 765);
    }
}
