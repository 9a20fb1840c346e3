//! Chain orchestration: topology assembly from agent reports, routing over
//! the abstracted topology, relay location, first-fit allocation and node
//! configuration.
//!
//! All state changes happen on one task that drains a command queue, so
//! orchestrations never interleave. Heterogeneous chains are configured in a
//! single batch; conventional chains link by link, each link's two end nodes
//! answering before the next link is configured.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use qkdchain_core::chain::Allocation;
use qkdchain_core::codec::{ChainConfigRequest, ConfigStatus};
use qkdchain_core::metrics::ChainMetrics;
use qkdchain_core::model::{LinkId, NodeId, NodeKind, PhysicalTopology, ProtocolKind, QkdLink, ResourceMap};
use qkdchain_core::resource::{allocate_resources, AllocationError, ResourceView};
use qkdchain_core::routing::{compute_path_with, locate_relays, RoutingError};
use qkdchain_core::abstraction::MalformedTopology;
use qkdchain_core::{
    abstract_topology, AbstractedTopology, ChainId, ChainRecord, ChainRequest, ChainStatus, ProtocolRequirement,
    RequestError,
};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tracing::{info, warn};

use crate::scenario::Scenario;
use crate::southbound::{ControllerEvent, EventLog, PendingReply, Registry, ReplyError, SessionState};

#[derive(Debug, Error)]
pub enum InitError {
    #[error("agent for node {0} did not report")]
    AgentUnreachable(NodeId),
    #[error("inconsistent report from node {node}: {detail}")]
    InconsistentReport { node: NodeId, detail: String },
    #[error("reported topology is malformed: {0:?}")]
    Malformed(MalformedTopology),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestrationError {
    #[error("{0}")]
    InvalidRequest(RequestError),
    #[error("{0}")]
    NoPath(RoutingError),
    #[error("link {link} offers {available_kbps} kbps, {required_kbps} kbps required")]
    InsufficientRate { link: LinkId, available_kbps: f64, required_kbps: f64 },
    #[error("link {0} has no free resource unit")]
    NoFreeSlot(LinkId),
    #[error("node {node} answered status {status}")]
    NodeConfigFailed { node: NodeId, status: ConfigStatus },
    #[error("node {0} did not answer in time")]
    Timeout(NodeId),
    #[error("node {0} has no live session")]
    SessionLost(NodeId),
    #[error("no established chain {0}")]
    UnknownChain(ChainId),
    #[error("{0}")]
    Internal(String),
}

impl OrchestrationError {
    /// Stable machine-readable class.
    pub fn code(&self) -> &'static str {
        match self {
            OrchestrationError::InvalidRequest(_) => "invalid-request",
            OrchestrationError::NoPath(_) => "no-path",
            OrchestrationError::InsufficientRate { .. } => "insufficient-rate",
            OrchestrationError::NoFreeSlot(_) => "no-free-slot",
            OrchestrationError::NodeConfigFailed { .. } => "node-config-failed",
            OrchestrationError::Timeout(_) => "timeout",
            OrchestrationError::SessionLost(_) => "session-lost",
            OrchestrationError::UnknownChain(_) => "unknown-chain",
            OrchestrationError::Internal(_) => "internal-error",
        }
    }
}

impl From<ReplyError> for OrchestrationError {
    fn from(e: ReplyError) -> Self {
        match e {
            ReplyError::Timeout(n) => OrchestrationError::Timeout(n),
            ReplyError::SessionLost(n) => OrchestrationError::SessionLost(n),
        }
    }
}

impl From<AllocationError> for OrchestrationError {
    fn from(e: AllocationError) -> Self {
        match e {
            AllocationError::InsufficientRate { link, available_kbps, required_kbps } => {
                OrchestrationError::InsufficientRate { link, available_kbps, required_kbps }
            }
            AllocationError::NoFreeSlot(l) => OrchestrationError::NoFreeSlot(l),
            AllocationError::UnknownLink(l) => OrchestrationError::Internal(format!("link {l} has no resource map")),
        }
    }
}

/// An established chain and its metrics. The delay field holds the
/// controller-side orchestration time; operators measure their own.
#[derive(Debug, Clone, PartialEq)]
pub struct Established {
    pub record: ChainRecord,
    pub metrics: ChainMetrics,
}

/// One node's share of a chain configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeConfig {
    pub node: NodeId,
    pub input_port: u32,
    pub output_port: u32,
    pub resources: ResourceMap,
}

#[derive(Debug, Clone)]
pub struct ControllerSnapshot {
    pub physical: PhysicalTopology,
    pub abstracted: AbstractedTopology,
    pub resources: ResourceView,
    pub chains: Vec<ChainRecord>,
    pub sessions: Vec<(NodeId, SessionState)>,
}

#[derive(Debug)]
pub struct Controller {
    registry: Arc<Registry>,
    physical: PhysicalTopology,
    abstracted: AbstractedTopology,
    resources: ResourceView,
    /// Port number of each node on each incident link.
    ports: BTreeMap<(NodeId, LinkId), u32>,
    chains: BTreeMap<ChainId, ChainRecord>,
    next_chain_id: ChainId,
    next_request_id: u32,
    response_timeout: Duration,
}

impl Controller {
    /// Waits for every scenario node to report, then assembles the physical
    /// topology from the reports. Link ids come from the scenario; every
    /// reported attribute must match it exactly.
    pub async fn initialize(
        registry: Arc<Registry>,
        scenario: &Scenario,
        wait: Duration,
        response_timeout: Duration,
    ) -> Result<Controller, InitError> {
        let expected = scenario.node_ids();
        let deadline = tokio::time::Instant::now() + wait;
        if let Err(missing) = registry.wait_for(&expected, deadline).await {
            return Err(InitError::AgentUnreachable(missing[0]));
        }

        let mut physical = PhysicalTopology::new();
        let mut ports = BTreeMap::new();
        let mut seen: BTreeMap<LinkId, QkdLink> = BTreeMap::new();
        for node in &expected {
            let session = registry.session(*node).ok_or(InitError::AgentUnreachable(*node))?;
            let report = &session.report;
            let inconsistent = |detail: String| InitError::InconsistentReport { node: *node, detail };
            let declared = scenario.node(node.0).map(|n| NodeKind::from(n.kind));
            if declared != Some(report.kind) {
                return Err(inconsistent(format!("kind {} differs from the scenario", report.kind)));
            }
            physical.add_node(*node, report.kind).map_err(|e| inconsistent(format!("{e:?}")))?;
            for p in &report.ports {
                let spec = scenario
                    .link_between(node.0, p.peer.0)
                    .ok_or_else(|| inconsistent(format!("port {} faces unknown neighbour {}", p.port_no, p.peer)))?;
                let link = QkdLink::new(
                    LinkId(spec.id),
                    NodeId(spec.ends[0]),
                    NodeId(spec.ends[1]),
                    f64::from(p.length_dm) / 10.0,
                    p.protocol,
                    f64::from(p.key_rate_bps) / 1000.0,
                );
                if spec.length_dm() != Some(p.length_dm)
                    || spec.key_rate_bps() != Some(p.key_rate_bps)
                    || ProtocolKind::from(spec.protocol) != p.protocol
                {
                    return Err(inconsistent(format!("port {} disagrees with link {}", p.port_no, link.id)));
                }
                if let Some(other) = seen.get(&link.id) {
                    if other.length_km != link.length_km
                        || other.key_rate_kbps != link.key_rate_kbps
                        || other.protocol != link.protocol
                    {
                        return Err(inconsistent(format!("link {} differs from the peer's report", link.id)));
                    }
                }
                if ports.insert((*node, link.id), p.port_no).is_some() {
                    return Err(inconsistent(format!("link {} reported twice", link.id)));
                }
                seen.entry(link.id).or_insert(link);
            }
        }
        for spec in &scenario.links {
            let id = LinkId(spec.id);
            for end in spec.ends {
                if !ports.contains_key(&(NodeId(end), id)) {
                    return Err(InitError::InconsistentReport {
                        node: NodeId(end),
                        detail: format!("link {id} missing from the report"),
                    });
                }
            }
        }
        for (_, link) in seen {
            physical
                .add_link(link)
                .map_err(|e| InitError::InconsistentReport { node: NodeId(0), detail: format!("{e:?}") })?;
        }
        let abstracted = abstract_topology(&physical).map_err(InitError::Malformed)?;
        info!(
            "topology assembled: {} nodes, {} links; abstracted {} nodes, {} edges",
            physical.node_count(),
            physical.link_count(),
            abstracted.node_count(),
            abstracted.edges().len()
        );
        Ok(Controller {
            registry,
            resources: ResourceView::from_topology(&physical),
            physical,
            abstracted,
            ports,
            chains: BTreeMap::new(),
            next_chain_id: 1,
            next_request_id: 1,
            response_timeout,
        })
    }

    pub fn physical(&self) -> &PhysicalTopology {
        &self.physical
    }

    pub fn abstracted(&self) -> &AbstractedTopology {
        &self.abstracted
    }

    pub fn resources(&self) -> &ResourceView {
        &self.resources
    }

    pub fn chains(&self) -> impl Iterator<Item = &ChainRecord> {
        self.chains.values()
    }

    pub fn port(&self, node: NodeId, link: LinkId) -> Option<u32> {
        self.ports.get(&(node, link)).copied()
    }

    pub fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot {
            physical: self.physical.clone(),
            abstracted: self.abstracted.clone(),
            resources: self.resources.clone(),
            chains: self.chains.values().cloned().collect(),
            sessions: self.registry.sessions().iter().map(|s| (s.node, s.state())).collect(),
        }
    }

    /// Request ids are assigned here, in arrival order.
    pub async fn orchestrate(&mut self, mut req: ChainRequest) -> Result<Established, OrchestrationError> {
        req.request_id = self.next_request_id;
        self.next_request_id += 1;
        self.registry.events.push(ControllerEvent::OrchestrationStarted { request_id: req.request_id });
        let started = Instant::now();
        let result = self.orchestrate_inner(&req, started).await;
        self.registry.events.push(ControllerEvent::OrchestrationFinished {
            request_id: req.request_id,
            established: result.is_ok(),
        });
        result
    }

    async fn orchestrate_inner(&mut self, req: &ChainRequest, started: Instant) -> Result<Established, OrchestrationError> {
        req.validate(&self.physical).map_err(OrchestrationError::InvalidRequest)?;
        let admit_tf = req.protocol.permits_untrusted_relays();
        let route = compute_path_with(req.source, req.destination, &self.abstracted, |e| {
            admit_tf || (e.protocol == ProtocolKind::Bb84 && !e.is_untrusted_pair())
        })
        .map_err(OrchestrationError::NoPath)?;
        let layout = locate_relays(&route, &self.abstracted);
        let allocations = allocate_resources(&layout.links, req.required_rate_kbps, &self.physical, &mut self.resources)?;

        let chain_id = self.next_chain_id;
        self.next_chain_id += 1;
        let mut record = ChainRecord {
            chain_id,
            request_id: req.request_id,
            protocol: req.protocol,
            physical_path: layout.physical_path,
            trusted_relays: layout.trusted,
            untrusted_relays: layout.untrusted,
            allocations,
            status: ChainStatus::Pending,
        };

        let plan = self.configuration_plan(&record)?;
        let mut contacted: Vec<NodeId> = Vec::new();
        let mut outcome = Ok(());
        for round in &plan {
            for c in round {
                if !contacted.contains(&c.node) {
                    contacted.push(c.node);
                }
            }
            if let Err(e) = self.configure_round(chain_id, round).await {
                outcome = Err(e);
                break;
            }
        }

        if let Err(e) = outcome {
            warn!(chain_id, "orchestration failed: {e}; rolling back");
            self.teardown(&record, &contacted).await;
            self.resources.release(&record.allocations);
            record.allocations.clear();
            record.status = ChainStatus::Failed(format!("{}: {e}", e.code()));
            self.chains.insert(chain_id, record);
            return Err(e);
        }

        record.status = ChainStatus::Established;
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        let metrics = ChainMetrics::for_chain(&record, &self.physical, elapsed_ms)
            .map_err(|e| OrchestrationError::Internal(format!("{e:?}")))?;
        info!(chain_id, path = ?record.physical_path, "chain established in {elapsed_ms:.2} ms");
        self.chains.insert(chain_id, record.clone());
        Ok(Established { record, metrics })
    }

    /// Configuration rounds for `record`: one round for a heterogeneous
    /// chain, one per link for a conventional one.
    pub fn configuration_plan(&self, record: &ChainRecord) -> Result<Vec<Vec<NodeConfig>>, OrchestrationError> {
        let path = &record.physical_path;
        let allocs = &record.allocations;
        let port = |node: NodeId, a: &Allocation| {
            self.port(node, a.link)
                .ok_or_else(|| OrchestrationError::Internal(format!("node {node} has no port on link {}", a.link)))
        };
        match record.protocol {
            ProtocolRequirement::Heterogeneous => {
                let mut round = Vec::with_capacity(path.len());
                for (i, &node) in path.iter().enumerate() {
                    let incoming = i.checked_sub(1).map(|j| &allocs[j]);
                    let outgoing = allocs.get(i);
                    let slot = outgoing.or(incoming).map(|a| a.slot).expect("path has at least one link");
                    round.push(NodeConfig {
                        node,
                        input_port: incoming.map(|a| port(node, a)).transpose()?.unwrap_or(0),
                        output_port: outgoing.map(|a| port(node, a)).transpose()?.unwrap_or(0),
                        resources: ResourceMap::single(slot),
                    });
                }
                Ok(vec![round])
            }
            ProtocolRequirement::Conventional => allocs
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let near = path[j];
                    let far = path[j + 1];
                    Ok(vec![
                        NodeConfig {
                            node: near,
                            input_port: 0,
                            output_port: port(near, a)?,
                            resources: ResourceMap::single(a.slot),
                        },
                        NodeConfig {
                            node: far,
                            input_port: port(far, a)?,
                            output_port: 0,
                            resources: ResourceMap::single(a.slot),
                        },
                    ])
                })
                .collect(),
        }
    }

    /// Sends every config in `round` before awaiting any reply.
    async fn configure_round(&self, chain_id: ChainId, round: &[NodeConfig]) -> Result<(), OrchestrationError> {
        let deadline = tokio::time::Instant::now() + self.response_timeout;
        let mut pending: Vec<PendingReply> = Vec::with_capacity(round.len());
        let mut first_error = None;
        for cfg in round {
            match self.send_config(chain_id, cfg).await {
                Ok(p) => pending.push(p),
                Err(e) => {
                    first_error = Some(e);
                    break;
                }
            }
        }
        for p in pending {
            let node = p.node;
            let r = p.wait(deadline).await.map_err(OrchestrationError::from).and_then(|resp| {
                if resp.status == ConfigStatus::Success {
                    Ok(())
                } else {
                    Err(OrchestrationError::NodeConfigFailed { node, status: resp.status })
                }
            });
            if let Err(e) = r {
                first_error.get_or_insert(e);
            }
        }
        first_error.map_or(Ok(()), Err)
    }

    async fn send_config(&self, chain_id: ChainId, cfg: &NodeConfig) -> Result<PendingReply, OrchestrationError> {
        let session = self.registry.session(cfg.node).ok_or(OrchestrationError::SessionLost(cfg.node))?;
        let req = ChainConfigRequest {
            xid: 0,
            chain_id,
            node_id: cfg.node,
            input_port: cfg.input_port,
            resource_units: cfg.resources,
            output_port: cfg.output_port,
        };
        Ok(session.request(&session, req).await?)
    }

    /// Best-effort teardown of `record` on `nodes`, batched.
    async fn teardown(&self, record: &ChainRecord, nodes: &[NodeId]) {
        let path = &record.physical_path;
        let round: Vec<NodeConfig> = path
            .iter()
            .enumerate()
            .filter(|(_, n)| nodes.contains(n))
            .map(|(i, &node)| {
                let incoming = i.checked_sub(1).and_then(|j| record.allocations.get(j));
                let outgoing = record.allocations.get(i);
                NodeConfig {
                    node,
                    input_port: incoming.and_then(|a| self.port(node, a.link)).unwrap_or(0),
                    output_port: outgoing.and_then(|a| self.port(node, a.link)).unwrap_or(0),
                    resources: ResourceMap::EMPTY,
                }
            })
            .collect();
        if let Err(e) = self.configure_round(record.chain_id, &round).await {
            warn!(chain_id = record.chain_id, "teardown incomplete: {e}");
        }
    }

    /// Tears the chain down on every node and frees its resource units.
    pub async fn release_chain(&mut self, chain_id: ChainId) -> Result<ChainRecord, OrchestrationError> {
        match self.chains.get(&chain_id) {
            Some(r) if r.status == ChainStatus::Established => {}
            _ => return Err(OrchestrationError::UnknownChain(chain_id)),
        }
        let record = self.chains.remove(&chain_id).expect("checked above");
        self.teardown(&record, &record.physical_path).await;
        self.resources.release(&record.allocations);
        self.registry.events.push(ControllerEvent::ChainReleased { chain_id });
        info!(chain_id, "chain released");
        Ok(record)
    }

    /// Moves the controller onto its own task, serving commands in order
    /// until every handle is dropped.
    pub fn spawn(self) -> (ControllerHandle, JoinHandle<Controller>) {
        let (tx, rx) = mpsc::channel(64);
        let handle = ControllerHandle { tx, events: self.registry.events.clone() };
        (handle, tokio::spawn(self.run(rx)))
    }

    async fn run(mut self, mut rx: mpsc::Receiver<Command>) -> Controller {
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Command::Orchestrate(req, reply) => {
                    let r = self.orchestrate(req).await;
                    let _ = reply.send(r);
                }
                Command::Release(id, reply) => {
                    let r = self.release_chain(id).await;
                    let _ = reply.send(r);
                }
                Command::Snapshot(reply) => {
                    let _ = reply.send(self.snapshot());
                }
            }
        }
        self
    }
}

#[derive(Debug)]
enum Command {
    Orchestrate(ChainRequest, oneshot::Sender<Result<Established, OrchestrationError>>),
    Release(ChainId, oneshot::Sender<Result<ChainRecord, OrchestrationError>>),
    Snapshot(oneshot::Sender<ControllerSnapshot>),
}

/// Cloneable access to a running controller.
#[derive(Debug, Clone)]
pub struct ControllerHandle {
    tx: mpsc::Sender<Command>,
    pub events: EventLog,
}

fn stopped() -> OrchestrationError {
    OrchestrationError::Internal("controller stopped".into())
}

impl ControllerHandle {
    pub async fn orchestrate(&self, req: ChainRequest) -> Result<Established, OrchestrationError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Command::Orchestrate(req, tx)).await.map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())?
    }

    pub async fn release(&self, chain_id: ChainId) -> Result<ChainRecord, OrchestrationError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Command::Release(chain_id, tx)).await.map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())?
    }

    pub async fn snapshot(&self) -> Result<ControllerSnapshot, OrchestrationError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Command::Snapshot(tx)).await.map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())
    }
}
