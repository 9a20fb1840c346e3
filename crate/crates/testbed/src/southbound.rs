//! Controller side of the southbound channel: the listener, the handshake,
//! and one session per connected agent.
//!
//! Sessions are registered once the agent's node information report has
//! arrived. A reconnecting agent replaces its earlier session. Replies are
//! matched to outstanding requests by xid, so requests to one agent may be
//! in flight concurrently with requests to others.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use qkdchain_core::codec::{
    self, ChainConfigRequest, ChainConfigResponse, DecodeError, ErrorMsg, Message, NodeInfoReport, ERR_HELLO_FAILED,
    ERR_HELLO_INCOMPATIBLE, OFP_VERSION,
};
use qkdchain_core::model::NodeId;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{oneshot, watch};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::trace::{Direction, TraceSink};
use crate::wire::{self, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Connected,
    HandshakeDone,
    InfoReceived,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerEvent {
    SessionUp { node: NodeId, generation: u64 },
    SessionDown { node: NodeId, generation: u64 },
    /// The agent answered our HELLO with an error.
    HandshakeRejected { peer: SocketAddr, err_type: u16, code: u16 },
    OrchestrationStarted { request_id: u32 },
    OrchestrationFinished { request_id: u32, established: bool },
    ChainReleased { chain_id: u32 },
}

/// Append-only record of controller activity, shared with observers.
#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<ControllerEvent>>>);

impl EventLog {
    pub fn push(&self, event: ControllerEvent) {
        self.0.lock().expect("event log").push(event);
    }

    pub fn snapshot(&self) -> Vec<ControllerEvent> {
        self.0.lock().expect("event log").clone()
    }
}

#[derive(Debug, Clone)]
pub struct SouthboundOptions {
    /// Version byte placed in our HELLO. Anything but the wire version is
    /// only useful to exercise the agent's mismatch handling.
    pub hello_version: u8,
    pub handshake_timeout: Duration,
}

impl Default for SouthboundOptions {
    fn default() -> Self {
        SouthboundOptions { hello_version: OFP_VERSION, handshake_timeout: Duration::from_secs(5) }
    }
}

/// An established agent session.
#[derive(Debug)]
pub struct Session {
    pub node: NodeId,
    pub generation: u64,
    pub report: NodeInfoReport,
    state: Mutex<SessionState>,
    next_xid: AtomicU32,
    writer: tokio::sync::Mutex<OwnedWriteHalf>,
    pending: Mutex<HashMap<u32, oneshot::Sender<ChainConfigResponse>>>,
    trace: TraceSink,
}

/// A configuration request awaiting its reply.
#[derive(Debug)]
pub struct PendingReply {
    pub node: NodeId,
    pub xid: u32,
    rx: oneshot::Receiver<ChainConfigResponse>,
    session: Arc<Session>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyError {
    Timeout(NodeId),
    SessionLost(NodeId),
}

impl PendingReply {
    /// Waits for the reply until `deadline`.
    pub async fn wait(self, deadline: tokio::time::Instant) -> Result<ChainConfigResponse, ReplyError> {
        match tokio::time::timeout_at(deadline, self.rx).await {
            Ok(Ok(resp)) => Ok(resp),
            Ok(Err(_)) => Err(ReplyError::SessionLost(self.node)),
            Err(_) => {
                self.session.pending.lock().expect("pending").remove(&self.xid);
                Err(ReplyError::Timeout(self.node))
            }
        }
    }
}

impl Session {
    pub fn state(&self) -> SessionState {
        *self.state.lock().expect("session state")
    }

    /// Strictly increasing per session.
    fn take_xid(&self) -> u32 {
        self.next_xid.fetch_add(1, Ordering::Relaxed)
    }

    async fn send(&self, msg: &Message) -> Result<(), WireError> {
        let bytes = msg.encode()?;
        let mut w = self.writer.lock().await;
        tokio::io::AsyncWriteExt::write_all(&mut *w, &bytes).await?;
        self.trace.record(Direction::ToAgent, self.node, &bytes);
        debug!(node = %self.node, "sent {msg}\n{}", codec::hex_dump(&bytes));
        Ok(())
    }

    /// Sends one configuration request, filling in the xid, and returns a
    /// handle on its reply.
    pub async fn request(&self, self_arc: &Arc<Session>, mut req: ChainConfigRequest) -> Result<PendingReply, ReplyError> {
        if self.state() != SessionState::InfoReceived {
            return Err(ReplyError::SessionLost(self.node));
        }
        req.xid = self.take_xid();
        let (tx, rx) = oneshot::channel();
        self.pending.lock().expect("pending").insert(req.xid, tx);
        if let Err(e) = self.send(&Message::ChainConfigRequest(req.clone())).await {
            warn!(node = %self.node, "send failed: {e}");
            self.pending.lock().expect("pending").remove(&req.xid);
            return Err(ReplyError::SessionLost(self.node));
        }
        Ok(PendingReply { node: self.node, xid: req.xid, rx, session: self_arc.clone() })
    }

    fn deliver(&self, resp: ChainConfigResponse) {
        match self.pending.lock().expect("pending").remove(&resp.xid) {
            Some(tx) => {
                let _ = tx.send(resp);
            }
            None => warn!(node = %self.node, xid = resp.xid, "reply matches no outstanding request"),
        }
    }

    fn close(&self) {
        *self.state.lock().expect("session state") = SessionState::Connected;
        self.pending.lock().expect("pending").clear();
    }
}

/// Sessions by node, plus the shared event log and capture.
#[derive(Debug)]
pub struct Registry {
    sessions: Mutex<BTreeMap<NodeId, Arc<Session>>>,
    generation: watch::Sender<u64>,
    handshakes: AtomicU64,
    pub events: EventLog,
    pub trace: TraceSink,
}

impl Registry {
    pub fn new(events: EventLog, trace: TraceSink) -> Self {
        Registry { sessions: Mutex::default(), generation: watch::Sender::new(0), handshakes: AtomicU64::new(0), events, trace }
    }

    pub fn session(&self, node: NodeId) -> Option<Arc<Session>> {
        self.sessions.lock().expect("registry").get(&node).cloned()
    }

    pub fn sessions(&self) -> Vec<Arc<Session>> {
        self.sessions.lock().expect("registry").values().cloned().collect()
    }

    /// Number of handshakes completed so far, across all nodes.
    pub fn generation(&self) -> u64 {
        *self.generation.borrow()
    }

    /// Waits until every node in `nodes` has a session, returning the ones
    /// still missing at `deadline`.
    pub async fn wait_for(&self, nodes: &[NodeId], deadline: tokio::time::Instant) -> Result<(), Vec<NodeId>> {
        let mut rx = self.generation.subscribe();
        loop {
            let missing: Vec<NodeId> = {
                let s = self.sessions.lock().expect("registry");
                nodes.iter().copied().filter(|n| !s.contains_key(n)).collect()
            };
            if missing.is_empty() {
                return Ok(());
            }
            if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
                return Err(missing);
            }
        }
    }

    fn register(&self, session: Arc<Session>) {
        let node = session.node;
        let old = self.sessions.lock().expect("registry").insert(node, session.clone());
        if let Some(old) = old {
            old.close();
        }
        self.events.push(ControllerEvent::SessionUp { node, generation: session.generation });
        info!(node = %node, "session established");
    }

    fn deregister(&self, session: &Arc<Session>) {
        session.close();
        let mut s = self.sessions.lock().expect("registry");
        if s.get(&session.node).is_some_and(|cur| Arc::ptr_eq(cur, session)) {
            s.remove(&session.node);
            drop(s);
            self.events.push(ControllerEvent::SessionDown { node: session.node, generation: session.generation });
            info!(node = %session.node, "session closed");
        }
    }
}

/// The listening side of the southbound channel.
#[derive(Debug)]
pub struct Southbound {
    pub registry: Arc<Registry>,
    local_addr: SocketAddr,
    accept: JoinHandle<()>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Southbound {
    pub async fn bind(
        addr: SocketAddr,
        options: SouthboundOptions,
        events: EventLog,
        trace: TraceSink,
    ) -> std::io::Result<Southbound> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let registry = Arc::new(Registry::new(events, trace));
        let connections: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let accept = {
            let registry = registry.clone();
            let connections = connections.clone();
            tokio::spawn(async move {
                loop {
                    let (stream, peer) = match listener.accept().await {
                        Ok(x) => x,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let task = tokio::spawn(serve_connection(stream, peer, registry.clone(), options.clone()));
                    let mut c = connections.lock().expect("connections");
                    c.retain(|t| !t.is_finished());
                    c.push(task);
                }
            })
        };
        info!("southbound listening on {local_addr}");
        Ok(Southbound { registry, local_addr, accept, connections })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting and drops every agent connection.
    pub fn shutdown(&self) {
        self.accept.abort();
        for t in self.connections.lock().expect("connections").drain(..) {
            t.abort();
        }
        for s in self.registry.sessions() {
            self.registry.deregister(&s);
        }
    }
}

impl Drop for Southbound {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn serve_connection(stream: TcpStream, peer: SocketAddr, registry: Arc<Registry>, options: SouthboundOptions) {
    match run_connection(stream, peer, &registry, &options).await {
        Ok(()) | Err(WireError::Closed) => {}
        Err(e) => debug!("connection from {peer} ended: {e}"),
    }
}

async fn read_with_timeout(reader: &mut OwnedReadHalf, timeout: Duration) -> Result<Vec<u8>, WireError> {
    tokio::time::timeout(timeout, wire::read_frame(reader))
        .await
        .unwrap_or_else(|_| Err(std::io::Error::from(std::io::ErrorKind::TimedOut).into()))
}

async fn run_connection(
    stream: TcpStream,
    peer: SocketAddr,
    registry: &Arc<Registry>,
    options: &SouthboundOptions,
) -> Result<(), WireError> {
    let (mut reader, mut writer) = stream.into_split();
    // Frames seen before the node id is known; recorded once it is.
    let mut early: Vec<(Direction, Vec<u8>)> = Vec::new();
    let timeout = options.handshake_timeout;

    let frame = read_with_timeout(&mut reader, timeout).await?;
    early.push((Direction::FromAgent, frame.clone()));
    match codec::decode(&frame) {
        Ok(Message::Hello { .. }) => {}
        Err(DecodeError::BadVersion(v)) => {
            warn!("{peer} sent HELLO with version {v:#04x}");
            let err = Message::Error(ErrorMsg {
                xid: u32::from_be_bytes(frame[4..8].try_into().expect("header")),
                err_type: ERR_HELLO_FAILED,
                code: ERR_HELLO_INCOMPATIBLE,
                data: frame.iter().copied().take(64).collect(),
            });
            wire::write_message(&mut writer, &err).await?;
            return Ok(());
        }
        Ok(other) => {
            warn!("{peer} opened with {other}, expected HELLO");
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    }

    let next_xid = AtomicU32::new(1);
    let mut hello = Message::Hello { xid: next_xid.fetch_add(1, Ordering::Relaxed) }.encode()?;
    hello[0] = options.hello_version;
    tokio::io::AsyncWriteExt::write_all(&mut writer, &hello).await?;
    early.push((Direction::ToAgent, hello));

    let frame = read_with_timeout(&mut reader, timeout).await?;
    early.push((Direction::FromAgent, frame.clone()));
    let report = match codec::decode(&frame) {
        Ok(Message::NodeInfoReport(r)) => r,
        Ok(Message::Error(e)) => {
            warn!("{peer} rejected the handshake: type {} code {}", e.err_type, e.code);
            registry.events.push(ControllerEvent::HandshakeRejected { peer, err_type: e.err_type, code: e.code });
            return Ok(());
        }
        Ok(other) => {
            warn!("{peer} sent {other}, expected a node information report");
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };

    let generation = registry.handshakes.fetch_add(1, Ordering::Relaxed) + 1;
    let session = Arc::new(Session {
        node: report.node_id,
        generation,
        report,
        state: Mutex::new(SessionState::InfoReceived),
        next_xid,
        writer: tokio::sync::Mutex::new(writer),
        pending: Mutex::default(),
        trace: registry.trace.clone(),
    });
    for (dir, f) in &early {
        registry.trace.record(*dir, session.node, f);
    }
    registry.register(session.clone());
    registry.generation.send_modify(|g| *g += 1);

    let result = loop {
        let frame = match wire::read_frame(&mut reader).await {
            Ok(f) => f,
            Err(e) => break Err(e),
        };
        registry.trace.record(Direction::FromAgent, session.node, &frame);
        match codec::decode(&frame) {
            Ok(Message::ChainConfigResponse(resp)) => {
                debug!(node = %session.node, "received {}", Message::ChainConfigResponse(resp.clone()));
                session.deliver(resp);
            }
            Ok(Message::Error(e)) => warn!(node = %session.node, "agent error: type {} code {}", e.err_type, e.code),
            Ok(other) => debug!(node = %session.node, "ignoring {other}"),
            Err(e) => warn!(node = %session.node, "undecodable frame: {e}"),
        }
    };
    registry.deregister(&session);
    result
}
