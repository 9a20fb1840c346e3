//! Experiment harness: boots a controller, its agents and the northbound API
//! from one scenario, replays the two demonstration requests and checks the
//! invariants that must hold around them.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use qkdchain_core::keyrelay::{CustodyLog, KeyOrigin, KeyPlane, SecretKey, DEFAULT_KEY_BYTES};
use qkdchain_core::metrics::{render_table, ChainMetrics, TableRow};
use qkdchain_core::model::{NodeId, NodeKind, PhysicalTopology};
use qkdchain_core::resource::ResourceView;
use qkdchain_core::ChainRecord;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;
use tokio::process::{Child, Command};
use tokio::task::JoinHandle;
use tracing::{info, warn};

use crate::agent::{spawn_agent, AgentConfig, AgentHandle, NodeAgent};
use crate::controller::{Controller, ControllerHandle, InitError};
use crate::northbound::{serve_northbound, NorthboundRequestDoc, NorthboundResponseDoc, OperatorClient, ResponseStatus};
use crate::scenario::{Scenario, ScenarioError};
use crate::southbound::{EventLog, Southbound, SouthboundOptions};
use crate::trace::TraceSink;

#[derive(Debug, Clone)]
pub enum AgentMode {
    InProcess,
    /// Each agent runs as `program agent ...` in its own process.
    Subprocess { program: PathBuf, scenario_path: PathBuf, verbose: bool },
}

#[derive(Debug, Clone)]
pub struct TestbedOptions {
    pub scenario: Scenario,
    pub agent_mode: AgentMode,
    pub agent_latency: Duration,
    pub seed: u64,
    pub southbound_addr: SocketAddr,
    pub northbound_addr: SocketAddr,
    pub response_timeout: Duration,
    /// How long initialization waits for every agent to report.
    pub boot_timeout: Duration,
    /// Nodes whose agents are deliberately not started.
    pub absent_agents: Vec<u32>,
    pub southbound: SouthboundOptions,
}

impl TestbedOptions {
    /// In-process agents on ephemeral loopback ports.
    pub fn in_process(scenario: Scenario) -> Self {
        TestbedOptions {
            agent_latency: scenario.agent_latency(),
            response_timeout: scenario.response_timeout(),
            scenario,
            agent_mode: AgentMode::InProcess,
            seed: 1,
            southbound_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            northbound_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            boot_timeout: Duration::from_secs(10),
            absent_agents: Vec::new(),
            southbound: SouthboundOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("cannot start agent for node {node}: {source}")]
    AgentSpawn { node: u32, source: std::io::Error },
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("request failed: {0}")]
    Submit(#[from] crate::northbound::SubmitError),
    #[error("orchestration failed: {0}")]
    Orchestration(String),
    #[error("controller: {0}")]
    Controller(#[from] crate::controller::OrchestrationError),
    #[error("key relay: {0:?}")]
    KeyRelay(qkdchain_core::keyrelay::KeyError),
}

#[derive(Debug)]
enum AgentProc {
    Task(AgentHandle),
    Child { node: u32, child: Child },
}

/// A booted controller, its agents and the northbound server.
#[derive(Debug)]
pub struct Testbed {
    pub southbound: Southbound,
    pub controller: ControllerHandle,
    controller_task: JoinHandle<Controller>,
    northbound: crate::northbound::Northbound,
    agents: Vec<AgentProc>,
    options: TestbedOptions,
    pub topology: Arc<PhysicalTopology>,
    pub events: EventLog,
    pub trace: TraceSink,
}

impl Testbed {
    pub async fn boot(options: TestbedOptions) -> Result<Testbed, BootError> {
        let events = EventLog::default();
        let trace = TraceSink::default();
        let southbound =
            Southbound::bind(options.southbound_addr, options.southbound.clone(), events.clone(), trace.clone())
                .await
                .map_err(|source| BootError::Bind { addr: options.southbound_addr, source })?;
        let controller_addr = southbound.local_addr();

        let mut agents = Vec::new();
        for node in options.scenario.node_ids() {
            if options.absent_agents.contains(&node.0) {
                continue;
            }
            match start_agent(&options, node.0, controller_addr) {
                Ok(a) => agents.push(a),
                Err(e) => {
                    stop_agents(agents).await;
                    return Err(e);
                }
            }
        }

        let controller = match Controller::initialize(
            southbound.registry.clone(),
            &options.scenario,
            options.boot_timeout,
            options.response_timeout,
        )
        .await
        {
            Ok(c) => c,
            Err(e) => {
                southbound.shutdown();
                stop_agents(agents).await;
                return Err(e.into());
            }
        };
        let topology = Arc::new(controller.physical().clone());
        let (handle, controller_task) = controller.spawn();
        let northbound = match serve_northbound(handle.clone(), topology.clone(), options.northbound_addr).await {
            Ok(n) => n,
            Err(source) => {
                southbound.shutdown();
                stop_agents(agents).await;
                return Err(BootError::Bind { addr: options.northbound_addr, source });
            }
        };
        info!("testbed up: southbound {controller_addr}, northbound {}", northbound.base_url());
        Ok(Testbed { southbound, controller: handle, controller_task, northbound, agents, options, topology, events, trace })
    }

    pub fn base_url(&self) -> String {
        self.northbound.base_url()
    }

    pub fn client(&self) -> OperatorClient {
        OperatorClient::new(&self.base_url()).expect("http client")
    }

    pub fn seed(&self) -> u64 {
        self.options.seed
    }

    pub fn scenario(&self) -> &Scenario {
        &self.options.scenario
    }

    /// State of an in-process agent.
    pub fn agent_state(&self, node: u32) -> Option<Arc<Mutex<NodeAgent>>> {
        self.agents.iter().find_map(|a| match a {
            AgentProc::Task(h) if h.node_id == NodeId(node) => Some(h.state.clone()),
            _ => None,
        })
    }

    /// Stops one agent, closing its session.
    pub async fn stop_agent(&mut self, node: u32) {
        if let Some(i) = self.agents.iter().position(|a| agent_node(a) == node) {
            stop_agents(vec![self.agents.remove(i)]).await;
        }
    }

    /// Starts a fresh agent for `node`.
    pub fn start_agent(&mut self, node: u32) -> Result<(), BootError> {
        let a = start_agent(&self.options, node, self.southbound.local_addr())?;
        self.agents.push(a);
        Ok(())
    }

    /// Ordered shutdown: northbound, controller, agents.
    pub async fn shutdown(self) {
        self.northbound.shutdown().await;
        drop(self.controller);
        let _ = self.controller_task.await;
        self.southbound.shutdown();
        stop_agents(self.agents).await;
    }
}

fn agent_node(a: &AgentProc) -> u32 {
    match a {
        AgentProc::Task(h) => h.node_id.0,
        AgentProc::Child { node, .. } => *node,
    }
}

fn start_agent(options: &TestbedOptions, node: u32, controller: SocketAddr) -> Result<AgentProc, BootError> {
    match &options.agent_mode {
        AgentMode::InProcess => {
            let cfg = AgentConfig::from_scenario(&options.scenario, node, controller, options.agent_latency, options.seed)?;
            Ok(AgentProc::Task(spawn_agent(cfg)))
        }
        AgentMode::Subprocess { program, scenario_path, verbose } => {
            let mut cmd = Command::new(program);
            cmd.arg("agent")
                .arg("--scenario")
                .arg(scenario_path)
                .arg("--node")
                .arg(node.to_string())
                .arg("--controller")
                .arg(controller.to_string())
                .arg("--agent-latency-ms")
                .arg(options.agent_latency.as_millis().to_string())
                .arg("--seed")
                .arg(options.seed.to_string())
                .stdin(Stdio::null())
                .kill_on_drop(true);
            if !verbose {
                cmd.stdout(Stdio::null()).stderr(Stdio::null());
            }
            let child = cmd.spawn().map_err(|source| BootError::AgentSpawn { node, source })?;
            Ok(AgentProc::Child { node, child })
        }
    }
}

async fn stop_agents(agents: Vec<AgentProc>) {
    for a in agents {
        match a {
            AgentProc::Task(h) => {
                if let Err(e) = h.stop().await {
                    warn!("agent stopped with error: {e}");
                }
            }
            AgentProc::Child { node, mut child } => {
                if let Err(e) = child.kill().await {
                    warn!(node, "cannot stop agent process: {e}");
                }
            }
        }
    }
}

pub fn conventional_request() -> NorthboundRequestDoc {
    NorthboundRequestDoc { source: 2, destination: 1, required_rate_kbps: 10.0, protocol: "BB84".into() }
}

pub fn heterogeneous_request() -> NorthboundRequestDoc {
    NorthboundRequestDoc { source: 2, destination: 3, required_rate_kbps: 10.0, protocol: "BB84+TF".into() }
}

/// Global key for one chain, deterministic in `(seed, chain_id)`.
pub fn global_key(seed: u64, chain_id: u32) -> SecretKey {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (u64::from(chain_id) << 32));
    let mut bytes = vec![0u8; DEFAULT_KEY_BYTES];
    rng.fill_bytes(&mut bytes);
    SecretKey::new(bytes, KeyOrigin::Global)
}

/// One established, measured, key-relayed and released chain.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub label: String,
    pub request: NorthboundRequestDoc,
    pub response: NorthboundResponseDoc,
    /// Operator-side request/response interval.
    pub delay_ms: f64,
    pub record: ChainRecord,
    pub metrics: ChainMetrics,
    pub custody: CustodyLog,
    pub violations: Vec<String>,
}

/// Establishes one chain, relays a global key over it, releases it, and
/// checks that the resource view is back where it started.
pub async fn run_chain(tb: &Testbed, label: &str, request: NorthboundRequestDoc) -> Result<ChainRun, HarnessError> {
    let before = tb.controller.snapshot().await?.resources;
    let (response, delay_ms) = tb.client().submit(&request).await?;
    if response.status != ResponseStatus::Established {
        return Err(HarnessError::Orchestration(response.reason.clone().unwrap_or_default()));
    }
    let chain_id = response.chain_id.ok_or_else(|| HarnessError::Orchestration("no chain id".into()))?;
    let snap = tb.controller.snapshot().await?;
    let record = snap
        .chains
        .iter()
        .find(|c| c.chain_id == chain_id)
        .cloned()
        .ok_or_else(|| HarnessError::Orchestration(format!("chain {chain_id} not recorded")))?;

    let mut violations = Vec::new();
    let metrics = ChainMetrics::for_chain(&record, &tb.topology, delay_ms)
        .map_err(|e| HarnessError::Orchestration(format!("{e:?}")))?;
    match &response.metrics {
        Some(m) if m.total_length_km == metrics.total_length_km
            && m.skc_kbps == metrics.skc_kbps
            && m.security_level == metrics.security.value => {}
        other => violations.push(format!("{label}: response metrics {other:?} disagree with the chain record")),
    }
    if response.path != record.physical_path.iter().map(|n| n.0).collect::<Vec<_>>() {
        violations.push(format!("{label}: response path differs from the chain record"));
    }

    let custody = relay_key(tb, &record, &mut violations)?;

    tb.controller.release(chain_id).await?;
    let after = tb.controller.snapshot().await?.resources;
    if !same_view(&before, &after) {
        violations.push(format!("{label}: resource view not restored after release"));
    }
    Ok(ChainRun { label: label.into(), request, response, delay_ms, record, metrics, custody, violations })
}

fn same_view(a: &ResourceView, b: &ResourceView) -> bool {
    a.iter().eq(b.iter())
}

/// Relays one global key along `record` with link keys derived the same way
/// the agents derive them, and audits custody.
fn relay_key(tb: &Testbed, record: &ChainRecord, violations: &mut Vec<String>) -> Result<CustodyLog, HarnessError> {
    let topo = &*tb.topology;
    let seed = tb.seed();
    let mut plane = KeyPlane::new(topo);
    plane.configure_chain(record);
    let path = &record.physical_path;
    for (i, a) in record.allocations.iter().enumerate() {
        // The second segment of a TF pair shares the first one's key.
        if topo.kind(path[i]) == Some(NodeKind::UntrustedRelay) {
            continue;
        }
        let (key, _) = plane.generate_link_key(a.link, seed).map_err(HarnessError::KeyRelay)?;
        check_agent_keys(tb, record, i, &key, violations);
    }
    let global = global_key(seed, record.chain_id);
    let outcome = plane.relay_global_key(record, &global).map_err(HarnessError::KeyRelay)?;
    let label = record.protocol;
    if !outcome.delivered.same_bits(&global) {
        violations.push(format!("{label}: destination did not recover the global key"));
    }
    let log = plane.log().clone();
    for ur in &record.untrusted_relays {
        if log.mentions(*ur) {
            violations.push(format!("{label}: untrusted relay {ur} appears in the custody log"));
        }
    }
    let holders: BTreeSet<NodeId> = log.global_key_holders().into_iter().collect();
    let expected: BTreeSet<NodeId> =
        path.iter().copied().filter(|n| !record.untrusted_relays.contains(n)).collect();
    if holders != expected {
        violations.push(format!("{label}: global key holders {holders:?}, expected {expected:?}"));
    }
    Ok(log)
}

/// With in-process agents, the keys the agents deposited while being
/// configured must be the ones the relay uses.
fn check_agent_keys(tb: &Testbed, record: &ChainRecord, i: usize, key: &SecretKey, violations: &mut Vec<String>) {
    let path = &record.physical_path;
    let link = record.allocations[i].link;
    let mut ends = vec![(path[i], link)];
    match tb.topology.kind(path[i + 1]) {
        Some(NodeKind::UntrustedRelay) => {
            ends.push((path[i + 1], link));
            ends.push((path[i + 2], record.allocations[i + 1].link));
        }
        _ => ends.push((path[i + 1], link)),
    }
    for (node, link) in ends {
        let Some(state) = tb.agent_state(node.0) else { continue };
        let Ok(ports) = tb.scenario().ports_of(node.0) else { continue };
        let Some(port_no) = ports.iter().find(|p| p.link == link).map(|p| p.port_no) else { continue };
        let agent = state.lock().expect("agent state");
        let held = agent.ports().get(&port_no).and_then(|p| p.keys.back().cloned());
        let is_ur = tb.topology.kind(node) == Some(NodeKind::UntrustedRelay);
        match (is_ur, held) {
            (true, None) => {}
            (true, Some(_)) => violations.push(format!("untrusted relay {node} holds a key on port {port_no}")),
            (false, Some(k)) if k.same_bits(key) => {}
            (false, other) => violations.push(format!(
                "node {node} port {port_no} holds {:?}, relay used {key:?}",
                other.map(|k| format!("{k:?}"))
            )),
        }
    }
}

/// Outcome of one demonstration run.
#[derive(Debug, Clone)]
pub struct DemoReport {
    pub conventional: ChainRun,
    pub heterogeneous: ChainRun,
}

impl DemoReport {
    pub fn violations(&self) -> Vec<String> {
        self.conventional.violations.iter().chain(&self.heterogeneous.violations).cloned().collect()
    }

    pub fn table(&self) -> String {
        render_table(&[
            TableRow { label: "Conventional (BB84)".into(), metrics: self.conventional.metrics },
            TableRow { label: "Heterogeneous (BB84+TF)".into(), metrics: self.heterogeneous.metrics },
        ])
    }
}

/// Runs the conventional chain 2 -> 1, then the heterogeneous chain 2 -> 3.
/// Both leave node 2 on the same port, so each is released before the next.
pub async fn run_demo(tb: &Testbed) -> Result<DemoReport, HarnessError> {
    let conventional = run_chain(tb, "conventional", conventional_request()).await?;
    let heterogeneous = run_chain(tb, "heterogeneous", heterogeneous_request()).await?;
    Ok(DemoReport { conventional, heterogeneous })
}

#[derive(Debug, Clone, Default)]
pub struct SoakReport {
    pub cycles: usize,
    pub violations: Vec<String>,
}

/// `cycles` establish/release cycles alternating between the two demo
/// requests; the resource view must equal its initial state after each.
pub async fn run_soak(tb: &Testbed, cycles: usize) -> Result<SoakReport, HarnessError> {
    let initial = tb.controller.snapshot().await?.resources;
    let mut report = SoakReport::default();
    for i in 0..cycles {
        let (label, req) = if i % 2 == 0 {
            ("conventional", conventional_request())
        } else {
            ("heterogeneous", heterogeneous_request())
        };
        let run = run_chain(tb, label, req).await?;
        report.violations.extend(run.violations.into_iter().map(|v| format!("cycle {i}: {v}")));
        let now = tb.controller.snapshot().await?.resources;
        if !same_view(&initial, &now) {
            report.violations.push(format!("cycle {i}: resource view differs from the initial state"));
        }
        report.cycles += 1;
    }
    Ok(report)
}
