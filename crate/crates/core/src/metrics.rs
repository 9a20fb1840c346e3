//! The four chain performance figures and their tabular rendering.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};
use core::time::Duration;

use crate::chain::ChainRecord;
use crate::model::{LinkId, NodeId, PhysicalTopology};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    /// Two consecutive path nodes share no link.
    NotAdjacent(NodeId, NodeId),
    EmptyPath,
    ClockMisorder,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::NotAdjacent(a, b) => write!(f, "nodes {a} and {b} are not adjacent"),
            MetricsError::EmptyPath => f.write_str("path has fewer than two nodes"),
            MetricsError::ClockMisorder => f.write_str("response timestamp precedes request timestamp"),
        }
    }
}

impl core::error::Error for MetricsError {}

fn path_links(path: &[NodeId], topo: &PhysicalTopology) -> Result<Vec<LinkId>, MetricsError> {
    if path.len() < 2 {
        return Err(MetricsError::EmptyPath);
    }
    path.windows(2)
        .map(|w| {
            topo.link_between(w[0], w[1])
                .map(|l| l.id)
                .ok_or(MetricsError::NotAdjacent(w[0], w[1]))
        })
        .collect()
}

/// Sum of the fiber lengths along `path`, in km.
pub fn total_length(path: &[NodeId], topo: &PhysicalTopology) -> Result<f64, MetricsError> {
    Ok(path_links(path, topo)?
        .iter()
        .map(|&l| topo.link(l).expect("link from topology").length_km)
        .sum())
}

/// Secure key capacity: the smallest key rate along `path`, in kbps. Both
/// segments of a TF pair carry the pair rate, so the pair counts once.
pub fn skc(path: &[NodeId], topo: &PhysicalTopology) -> Result<f64, MetricsError> {
    Ok(path_links(path, topo)?
        .iter()
        .map(|&l| topo.link(l).expect("link from topology").key_rate_kbps)
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityLevel {
    pub value: f64,
    /// Set when the chain has no trusted relay and `value` is clamped to 1.
    pub no_trusted_relay: bool,
}

/// `1 / n_trusted`; a chain without trusted relays is clamped to 1.0 and
/// flagged.
pub fn security_level(n_trusted: usize) -> SecurityLevel {
    if n_trusted == 0 {
        SecurityLevel { value: 1.0, no_trusted_relay: true }
    } else {
        SecurityLevel { value: 1.0 / n_trusted as f64, no_trusted_relay: false }
    }
}

/// Interval between two readings of the operator's monotonic clock, in ms.
pub fn control_delay(request_sent_at: Duration, response_received_at: Duration) -> Result<f64, MetricsError> {
    response_received_at
        .checked_sub(request_sent_at)
        .map(|d| d.as_secs_f64() * 1000.0)
        .ok_or(MetricsError::ClockMisorder)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainMetrics {
    pub total_length_km: f64,
    pub skc_kbps: f64,
    pub control_delay_ms: f64,
    pub security: SecurityLevel,
}

impl ChainMetrics {
    pub fn for_chain(chain: &ChainRecord, topo: &PhysicalTopology, control_delay_ms: f64) -> Result<Self, MetricsError> {
        Ok(ChainMetrics {
            total_length_km: total_length(&chain.physical_path, topo)?,
            skc_kbps: skc(&chain.physical_path, topo)?,
            control_delay_ms,
            security: security_level(chain.trusted_relays.len()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub metrics: ChainMetrics,
}

/// Aligned text table: chain, total length, SKC, control delay, security level.
pub fn render_table(rows: &[TableRow]) -> String {
    let header = ["QKD Chain", "Total Length", "SKC", "Control Delay", "Security Level"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            let mut sec = String::new();
            let _ = write!(sec, "{:?}", m.security.value);
            if m.security.no_trusted_relay {
                sec.push_str(" (no trusted relay)");
            }
            let mut cols: [String; 5] = Default::default();
            cols[0] = r.label.clone();
            let _ = write!(cols[1], "{} km", m.total_length_km);
            let _ = write!(cols[2], "{} kbps", m.skc_kbps);
            let _ = write!(cols[3], "{:.2} ms", m.control_delay_ms);
            cols[4] = sec;
            cols
        })
        .collect();

    let mut widths = header.map(|h| h.len());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }

    let mut out = String::new();
    let mut line = |cols: &[&str]| {
        let mut s = String::new();
        for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
            if i + 1 == cols.len() {
                s.push_str(c);
            } else {
                let _ = write!(s, "{c:<w$}  ");
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&header);
    for row in &cells {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&refs);
    }
    out
}
