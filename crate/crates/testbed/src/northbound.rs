//! Operator-facing HTTP interface.
//!
//! `POST /qkd-chains` takes a JSON chain request and answers once the
//! orchestration has finished. `GET /qkd-chains` lists the controller's
//! chain records. Malformed documents are refused with a 4xx status and an
//! [`ErrorDoc`]; a well-formed request whose orchestration fails is answered
//! with status `"failed"` and a reason of the form `"<class>: <detail>"`.

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use qkdchain_core::metrics::{control_delay, ChainMetrics};
use qkdchain_core::model::{NodeId, NodeKind, PhysicalTopology};
use qkdchain_core::{ChainRequest, ChainStatus, ProtocolRequirement};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tracing::info;

use crate::controller::ControllerHandle;

pub const CHAINS_PATH: &str = "/qkd-chains";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NorthboundRequestDoc {
    pub source: u32,
    pub destination: u32,
    pub required_rate_kbps: f64,
    /// `"BB84"` or `"BB84+TF"`.
    pub protocol: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseStatus {
    Established,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDoc {
    pub total_length_km: f64,
    pub skc_kbps: f64,
    /// Controller-side orchestration time.
    pub control_delay_ms: f64,
    pub security_level: f64,
    pub no_trusted_relay: bool,
}

impl From<&ChainMetrics> for MetricsDoc {
    fn from(m: &ChainMetrics) -> Self {
        MetricsDoc {
            total_length_km: m.total_length_km,
            skc_kbps: m.skc_kbps,
            control_delay_ms: m.control_delay_ms,
            security_level: m.security.value,
            no_trusted_relay: m.security.no_trusted_relay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NorthboundResponseDoc {
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub path: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsDoc>,
}

/// Body of every 4xx/5xx answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDoc {
    /// `malformed-document`, `unknown-node` or `internal-error`.
    pub error: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummaryDoc {
    pub chain_id: u32,
    pub protocol: String,
    pub status: String,
    pub path: Vec<u32>,
    pub slots: Vec<(u32, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub status: StatusCode,
    pub doc: ErrorDoc,
}

impl Rejection {
    fn new(status: StatusCode, error: &str, reason: impl Into<String>) -> Self {
        Rejection { status, doc: ErrorDoc { error: error.into(), reason: reason.into() } }
    }
}

impl IntoResponse for Rejection {
    fn into_response(self) -> Response {
        (self.status, Json(self.doc)).into_response()
    }
}

/// Turns a request body into a chain request, classifying every problem.
pub fn parse_request(
    content_type: Option<&str>,
    body: &[u8],
    topo: &PhysicalTopology,
) -> Result<ChainRequest, Rejection> {
    let json = content_type
        .and_then(|c| c.split(';').next())
        .is_some_and(|c| c.trim().eq_ignore_ascii_case("application/json"));
    if !json {
        return Err(Rejection::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "malformed-document",
            "content-type must be application/json",
        ));
    }
    let doc: NorthboundRequestDoc = serde_json::from_slice(body)
        .map_err(|e| Rejection::new(StatusCode::BAD_REQUEST, "malformed-document", e.to_string()))?;
    let protocol = ProtocolRequirement::parse(&doc.protocol).ok_or_else(|| {
        Rejection::new(
            StatusCode::BAD_REQUEST,
            "malformed-document",
            format!("unsupported protocol {:?}; expected \"BB84\" or \"BB84+TF\"", doc.protocol),
        )
    })?;
    if doc.source == doc.destination {
        return Err(Rejection::new(
            StatusCode::BAD_REQUEST,
            "malformed-document",
            format!("source and destination are both node {}", doc.source),
        ));
    }
    if !(doc.required_rate_kbps.is_finite() && doc.required_rate_kbps >= 0.0) {
        return Err(Rejection::new(
            StatusCode::BAD_REQUEST,
            "malformed-document",
            "required_rate_kbps must be a non-negative number",
        ));
    }
    for id in [doc.source, doc.destination] {
        match topo.kind(NodeId(id)) {
            None => {
                return Err(Rejection::new(StatusCode::NOT_FOUND, "unknown-node", format!("no node {id}")))
            }
            Some(NodeKind::QkdNode) => {}
            Some(kind) => {
                return Err(Rejection::new(
                    StatusCode::BAD_REQUEST,
                    "malformed-document",
                    format!("node {id} is a {kind}, not a QKD node"),
                ))
            }
        }
    }
    Ok(ChainRequest {
        request_id: 0,
        source: NodeId(doc.source),
        destination: NodeId(doc.destination),
        required_rate_kbps: doc.required_rate_kbps,
        protocol,
    })
}

#[derive(Debug, Clone)]
struct AppState {
    controller: ControllerHandle,
    topology: Arc<PhysicalTopology>,
}

async fn post_chain(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let content_type = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok());
    let req = match parse_request(content_type, &body, &app.topology) {
        Ok(r) => r,
        Err(rej) => return rej.into_response(),
    };
    let doc = match app.controller.orchestrate(req).await {
        Ok(est) => NorthboundResponseDoc {
            status: ResponseStatus::Established,
            chain_id: Some(est.record.chain_id),
            reason: None,
            path: est.record.physical_path.iter().map(|n| n.0).collect(),
            metrics: Some(MetricsDoc::from(&est.metrics)),
        },
        Err(e) if e.code() == "internal-error" => {
            return Rejection::new(StatusCode::INTERNAL_SERVER_ERROR, "internal-error", e.to_string()).into_response()
        }
        Err(e) => NorthboundResponseDoc {
            status: ResponseStatus::Failed,
            chain_id: None,
            reason: Some(format!("{}: {e}", e.code())),
            path: Vec::new(),
            metrics: None,
        },
    };
    Json(doc).into_response()
}

async fn list_chains(State(app): State<AppState>) -> Response {
    match app.controller.snapshot().await {
        Ok(snap) => Json(
            snap.chains
                .iter()
                .map(|c| ChainSummaryDoc {
                    chain_id: c.chain_id,
                    protocol: c.protocol.as_str().into(),
                    status: match &c.status {
                        ChainStatus::Pending => "pending".into(),
                        ChainStatus::Established => "established".into(),
                        ChainStatus::Failed(r) => format!("failed: {r}"),
                    },
                    path: c.physical_path.iter().map(|n| n.0).collect(),
                    slots: c.allocations.iter().map(|a| (a.link.0, a.slot)).collect(),
                })
                .collect::<Vec<_>>(),
        )
        .into_response(),
        Err(e) => Rejection::new(StatusCode::INTERNAL_SERVER_ERROR, "internal-error", e.to_string()).into_response(),
    }
}

pub fn router(controller: ControllerHandle, topology: Arc<PhysicalTopology>) -> Router {
    Router::new()
        .route(CHAINS_PATH, post(post_chain).get(list_chains))
        .with_state(AppState { controller, topology })
}

/// A running northbound server.
#[derive(Debug)]
pub struct Northbound {
    local_addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl Northbound {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.local_addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.task).await;
    }
}

pub async fn serve_northbound(
    controller: ControllerHandle,
    topology: Arc<PhysicalTopology>,
    addr: SocketAddr,
) -> std::io::Result<Northbound> {
    let listener = TcpListener::bind(addr).await?;
    let local_addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(controller, topology);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    info!("northbound listening on http://{local_addr}{CHAINS_PATH}");
    Ok(Northbound { local_addr, stop: Some(stop), task })
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("transport failure: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String, doc: Option<ErrorDoc> },
    #[error("unreadable response: {0}")]
    Decode(#[from] serde_json::Error),
}

impl SubmitError {
    pub fn error_doc(&self) -> Option<&ErrorDoc> {
        match self {
            SubmitError::Status { doc, .. } => doc.as_ref(),
            _ => None,
        }
    }
}

/// Operator side of the API.
#[derive(Debug, Clone)]
pub struct OperatorClient {
    client: reqwest::Client,
    url: String,
}

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

impl OperatorClient {
    /// `base` is `http://host:port`.
    pub fn new(base: &str) -> Result<Self, SubmitError> {
        let client = reqwest::Client::builder().no_proxy().timeout(Duration::from_secs(60)).build()?;
        Ok(OperatorClient { client, url: format!("{}{CHAINS_PATH}", base.trim_end_matches('/')) })
    }

    /// Posts `doc` and returns the response with the control delay in ms,
    /// stamped on a monotonic clock around the exchange.
    pub async fn submit(&self, doc: &NorthboundRequestDoc) -> Result<(NorthboundResponseDoc, f64), SubmitError> {
        self.submit_raw("application/json", serde_json::to_vec(doc)?).await
    }

    /// Posts an arbitrary body.
    pub async fn submit_raw(
        &self,
        content_type: &str,
        body: Vec<u8>,
    ) -> Result<(NorthboundResponseDoc, f64), SubmitError> {
        let sent = epoch().elapsed();
        let resp = self.client.post(&self.url).header(header::CONTENT_TYPE, content_type).body(body).send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        let received = epoch().elapsed();
        if !status.is_success() {
            return Err(SubmitError::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
                doc: serde_json::from_slice(&bytes).ok(),
            });
        }
        let doc = serde_json::from_slice(&bytes)?;
        let delay = control_delay(sent, received).expect("monotonic clock");
        Ok((doc, delay))
    }

    pub async fn list(&self) -> Result<Vec<ChainSummaryDoc>, SubmitError> {
        let resp = self.client.get(&self.url).send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if !status.is_success() {
            return Err(SubmitError::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
                doc: serde_json::from_slice(&bytes).ok(),
            });
        }
        Ok(serde_json::from_slice(&bytes)?)
    }
}
