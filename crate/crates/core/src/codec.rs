//! Extended OpenFlow 1.3 southbound messages.
//!
//! Every message starts with the standard 8-byte header (version, type,
//! length, xid) in network byte order. Chain configuration uses two new
//! message types, 32 for the request and 33 for the response, both carrying
//! the fixed message-function word `0x0000FFFF`. Node information reports
//! (type 34) are sent by an agent right after the HELLO exchange.
//!
//! Layouts, all big-endian:
//!
//! ```text
//! request  (44 B): hdr | chain_id u32 | node_id u32 | function u32 | in_port u32
//!                  | resource_units u128 | out_port u32
//! response (24 B): hdr | chain_id u32 | node_id u32 | function u32 | status u32
//! report   (14 + 17n B): hdr | node_id u32 | kind u8 | port_count u8
//!                  | n x (port_no u32 | peer u32 | length_dm u32 | protocol u8 | rate_bps u32)
//! error    (12 + d B): hdr | type u16 | code u16 | data
//! ```
//!
//! Resource unit slot 0 is the most significant bit of the first byte.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use crate::chain::ChainId;
use crate::model::{NodeId, NodeKind, ProtocolKind, ResourceMap};

/// Wire version byte; OpenFlow 1.3.
pub const OFP_VERSION: u8 = 0x04;
pub const HEADER_LEN: usize = 8;
pub const MESSAGE_FUNCTION: u32 = 0x0000_FFFF;
pub const REQUEST_LEN: usize = 44;
pub const RESPONSE_LEN: usize = 24;
const REPORT_FIXED_LEN: usize = HEADER_LEN + 6;
const PORT_ENTRY_LEN: usize = 17;
const ERROR_FIXED_LEN: usize = HEADER_LEN + 4;

pub mod msg_type {
    pub const HELLO: u8 = 0;
    pub const ERROR: u8 = 1;
    pub const CHAIN_CONFIG_REQUEST: u8 = 32;
    pub const CHAIN_CONFIG_RESPONSE: u8 = 33;
    pub const NODE_INFO_REPORT: u8 = 34;
}

/// `OFPET_HELLO_FAILED` / `OFPHFC_INCOMPATIBLE`.
pub const ERR_HELLO_FAILED: u16 = 0;
pub const ERR_HELLO_INCOMPATIBLE: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfHeader {
    pub version: u8,
    pub msg_type: u8,
    pub length: u16,
    pub xid: u32,
}

impl OfHeader {
    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Self {
        OfHeader {
            version: bytes[0],
            msg_type: bytes[1],
            length: u16::from_be_bytes([bytes[2], bytes[3]]),
            xid: u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        }
    }

    pub fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = self.version;
        out[1] = self.msg_type;
        out[2..4].copy_from_slice(&self.length.to_be_bytes());
        out[4..8].copy_from_slice(&self.xid.to_be_bytes());
        out
    }
}

/// Orchestration status carried in a chain configuration response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigStatus {
    Success,
    InsufficientResources,
    UnknownPort,
    NodeBusy,
    Internal,
}

impl ConfigStatus {
    pub fn code(self) -> u32 {
        match self {
            ConfigStatus::Success => 0,
            ConfigStatus::InsufficientResources => 1,
            ConfigStatus::UnknownPort => 2,
            ConfigStatus::NodeBusy => 3,
            ConfigStatus::Internal => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => ConfigStatus::Success,
            1 => ConfigStatus::InsufficientResources,
            2 => ConfigStatus::UnknownPort,
            3 => ConfigStatus::NodeBusy,
            4 => ConfigStatus::Internal,
            _ => return None,
        })
    }
}

impl fmt::Display for ConfigStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfigStatus::Success => "success",
            ConfigStatus::InsufficientResources => "insufficient-resources",
            ConfigStatus::UnknownPort => "unknown-port",
            ConfigStatus::NodeBusy => "node-busy",
            ConfigStatus::Internal => "internal-error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainConfigRequest {
    pub xid: u32,
    pub chain_id: ChainId,
    pub node_id: NodeId,
    /// 0 means no port: the chain starts at this node.
    pub input_port: u32,
    pub resource_units: ResourceMap,
    /// 0 means no port: the chain ends at this node.
    pub output_port: u32,
}

impl ChainConfigRequest {
    /// An all-zero resource bitmap asks the node to tear the chain down.
    pub fn is_teardown(&self) -> bool {
        self.resource_units.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainConfigResponse {
    pub xid: u32,
    pub chain_id: ChainId,
    pub node_id: NodeId,
    pub status: ConfigStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortInfo {
    pub port_no: u32,
    pub peer: NodeId,
    pub length_dm: u32,
    pub protocol: ProtocolKind,
    pub key_rate_bps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfoReport {
    pub xid: u32,
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub ports: Vec<PortInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMsg {
    pub xid: u32,
    pub err_type: u16,
    pub code: u16,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { xid: u32 },
    Error(ErrorMsg),
    ChainConfigRequest(ChainConfigRequest),
    ChainConfigResponse(ChainConfigResponse),
    NodeInfoReport(NodeInfoReport),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodeError {
    TooManyPorts(usize),
    TooLong(usize),
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodeError::TooManyPorts(n) => write!(f, "{n} ports do not fit an 8-bit count"),
            EncodeError::TooLong(n) => write!(f, "{n} bytes exceed the 16-bit length field"),
        }
    }
}

impl core::error::Error for EncodeError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// Fewer bytes than the header or the declared length require.
    Truncated { needed: usize, available: usize },
    /// More bytes than the header declares.
    LengthMismatch { declared: usize, available: usize },
    BadVersion(u8),
    UnknownType(u8),
    /// Declared length impossible for this message type.
    BadLength { msg_type: u8, declared: usize },
    BadConstant(u32),
    UnknownStatus(u32),
    UnknownNodeKind(u8),
    UnknownProtocol(u8),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::Truncated { needed, available } => {
                write!(f, "truncated input: need {needed} bytes, have {available}")
            }
            DecodeError::LengthMismatch { declared, available } => {
                write!(f, "length mismatch: header says {declared} bytes, have {available}")
            }
            DecodeError::BadVersion(v) => write!(f, "unsupported version {v:#04x}"),
            DecodeError::UnknownType(t) => write!(f, "unknown message type {t}"),
            DecodeError::BadLength { msg_type, declared } => {
                write!(f, "length {declared} is invalid for message type {msg_type}")
            }
            DecodeError::BadConstant(c) => write!(f, "message function {c:#010x} != 0x0000ffff"),
            DecodeError::UnknownStatus(s) => write!(f, "unknown status code {s}"),
            DecodeError::UnknownNodeKind(k) => write!(f, "unknown node kind {k}"),
            DecodeError::UnknownProtocol(p) => write!(f, "unknown protocol {p}"),
        }
    }
}

impl core::error::Error for DecodeError {}

impl Message {
    pub fn xid(&self) -> u32 {
        match self {
            Message::Hello { xid } => *xid,
            Message::Error(m) => m.xid,
            Message::ChainConfigRequest(m) => m.xid,
            Message::ChainConfigResponse(m) => m.xid,
            Message::NodeInfoReport(m) => m.xid,
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => msg_type::HELLO,
            Message::Error(_) => msg_type::ERROR,
            Message::ChainConfigRequest(_) => msg_type::CHAIN_CONFIG_REQUEST,
            Message::ChainConfigResponse(_) => msg_type::CHAIN_CONFIG_RESPONSE,
            Message::NodeInfoReport(_) => msg_type::NODE_INFO_REPORT,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Message::Hello { .. } => HEADER_LEN,
            Message::Error(m) => ERROR_FIXED_LEN + m.data.len(),
            Message::ChainConfigRequest(_) => REQUEST_LEN,
            Message::ChainConfigResponse(_) => RESPONSE_LEN,
            Message::NodeInfoReport(m) => REPORT_FIXED_LEN + PORT_ENTRY_LEN * m.ports.len(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), EncodeError> {
        let len = self.encoded_len();
        if len > u16::MAX as usize {
            return Err(EncodeError::TooLong(len));
        }
        if let Message::NodeInfoReport(m) = self {
            if m.ports.len() > u8::MAX as usize {
                return Err(EncodeError::TooManyPorts(m.ports.len()));
            }
        }
        let header = OfHeader {
            version: OFP_VERSION,
            msg_type: self.msg_type(),
            length: len as u16,
            xid: self.xid(),
        };
        out.extend_from_slice(&header.to_bytes());
        match self {
            Message::Hello { .. } => {}
            Message::Error(m) => {
                out.extend_from_slice(&m.err_type.to_be_bytes());
                out.extend_from_slice(&m.code.to_be_bytes());
                out.extend_from_slice(&m.data);
            }
            Message::ChainConfigRequest(m) => {
                out.extend_from_slice(&m.chain_id.to_be_bytes());
                out.extend_from_slice(&m.node_id.0.to_be_bytes());
                out.extend_from_slice(&MESSAGE_FUNCTION.to_be_bytes());
                out.extend_from_slice(&m.input_port.to_be_bytes());
                out.extend_from_slice(&m.resource_units.to_wire());
                out.extend_from_slice(&m.output_port.to_be_bytes());
            }
            Message::ChainConfigResponse(m) => {
                out.extend_from_slice(&m.chain_id.to_be_bytes());
                out.extend_from_slice(&m.node_id.0.to_be_bytes());
                out.extend_from_slice(&MESSAGE_FUNCTION.to_be_bytes());
                out.extend_from_slice(&m.status.code().to_be_bytes());
            }
            Message::NodeInfoReport(m) => {
                out.extend_from_slice(&m.node_id.0.to_be_bytes());
                out.push(m.kind.wire_code());
                out.push(m.ports.len() as u8);
                for p in &m.ports {
                    out.extend_from_slice(&p.port_no.to_be_bytes());
                    out.extend_from_slice(&p.peer.0.to_be_bytes());
                    out.extend_from_slice(&p.length_dm.to_be_bytes());
                    out.push(p.protocol.wire_code());
                    out.extend_from_slice(&p.key_rate_bps.to_be_bytes());
                }
            }
        }
        Ok(())
    }
}

/// Number of bytes the frame starting with `header` occupies, or an error if
/// the declared length is below the header size.
pub fn frame_len(header: &[u8; HEADER_LEN]) -> Result<usize, DecodeError> {
    let h = OfHeader::parse(header);
    let declared = h.length as usize;
    if declared < HEADER_LEN {
        return Err(DecodeError::BadLength { msg_type: h.msg_type, declared });
    }
    Ok(declared)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        // Callers check the overall length up front.
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_be_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_be_bytes(self.take())
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }
}

/// Decodes exactly one message occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    let header = OfHeader::parse(bytes[..HEADER_LEN].try_into().expect("8 bytes"));
    if header.version != OFP_VERSION {
        return Err(DecodeError::BadVersion(header.version));
    }
    let declared = header.length as usize;
    if declared < HEADER_LEN {
        return Err(DecodeError::BadLength { msg_type: header.msg_type, declared });
    }
    if declared > bytes.len() {
        return Err(DecodeError::Truncated { needed: declared, available: bytes.len() });
    }
    if declared < bytes.len() {
        return Err(DecodeError::LengthMismatch { declared, available: bytes.len() });
    }

    let bad_length = DecodeError::BadLength { msg_type: header.msg_type, declared };
    let mut r = Reader { buf: bytes, pos: HEADER_LEN };
    let xid = header.xid;
    match header.msg_type {
        msg_type::HELLO => {
            // HELLO elements are neither sent nor accepted.
            if declared != HEADER_LEN {
                return Err(bad_length);
            }
            Ok(Message::Hello { xid })
        }
        msg_type::ERROR => {
            if declared < ERROR_FIXED_LEN {
                return Err(bad_length);
            }
            let err_type = r.u16();
            let code = r.u16();
            Ok(Message::Error(ErrorMsg { xid, err_type, code, data: r.rest().to_vec() }))
        }
        msg_type::CHAIN_CONFIG_REQUEST => {
            if declared != REQUEST_LEN {
                return Err(bad_length);
            }
            let chain_id = r.u32();
            let node_id = NodeId(r.u32());
            let function = r.u32();
            if function != MESSAGE_FUNCTION {
                return Err(DecodeError::BadConstant(function));
            }
            let input_port = r.u32();
            let resource_units = ResourceMap::from_wire(r.take());
            let output_port = r.u32();
            Ok(Message::ChainConfigRequest(ChainConfigRequest {
                xid,
                chain_id,
                node_id,
                input_port,
                resource_units,
                output_port,
            }))
        }
        msg_type::CHAIN_CONFIG_RESPONSE => {
            if declared != RESPONSE_LEN {
                return Err(bad_length);
            }
            let chain_id = r.u32();
            let node_id = NodeId(r.u32());
            let function = r.u32();
            if function != MESSAGE_FUNCTION {
                return Err(DecodeError::BadConstant(function));
            }
            let code = r.u32();
            let status = ConfigStatus::from_code(code).ok_or(DecodeError::UnknownStatus(code))?;
            Ok(Message::ChainConfigResponse(ChainConfigResponse { xid, chain_id, node_id, status }))
        }
        msg_type::NODE_INFO_REPORT => {
            if declared < REPORT_FIXED_LEN {
                return Err(bad_length);
            }
            let node_id = NodeId(r.u32());
            let kind_code = r.u8();
            let kind = NodeKind::from_wire_code(kind_code).ok_or(DecodeError::UnknownNodeKind(kind_code))?;
            let count = r.u8() as usize;
            if declared != REPORT_FIXED_LEN + count * PORT_ENTRY_LEN {
                return Err(bad_length);
            }
            let mut ports = Vec::with_capacity(count);
            for _ in 0..count {
                let port_no = r.u32();
                let peer = NodeId(r.u32());
                let length_dm = r.u32();
                let proto_code = r.u8();
                let protocol = ProtocolKind::from_wire_code(proto_code)
                    .ok_or(DecodeError::UnknownProtocol(proto_code))?;
                let key_rate_bps = r.u32();
                ports.push(PortInfo { port_no, peer, length_dm, protocol, key_rate_bps });
            }
            Ok(Message::NodeInfoReport(NodeInfoReport { xid, node_id, kind, ports }))
        }
        other => Err(DecodeError::UnknownType(other)),
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Hello { xid } => write!(f, "HELLO xid={xid}"),
            Message::Error(m) => write!(
                f,
                "ERROR xid={} type={} code={} data_len={}",
                m.xid,
                m.err_type,
                m.code,
                m.data.len()
            ),
            Message::ChainConfigRequest(m) => {
                write!(
                    f,
                    "CHAIN_CONFIG_REQUEST(32) xid={} chain_id={} node_id={} function={:#010x} in_port={} out_port={} resource_units={:#034x}",
                    m.xid,
                    m.chain_id,
                    m.node_id,
                    MESSAGE_FUNCTION,
                    m.input_port,
                    m.output_port,
                    m.resource_units.bits()
                )?;
                let mut slots = m.resource_units.occupied().peekable();
                if slots.peek().is_none() {
                    f.write_str(" (teardown)")
                } else {
                    f.write_str(" slots=[")?;
                    for (i, s) in slots.enumerate() {
                        if i > 0 {
                            f.write_str(",")?;
                        }
                        write!(f, "{s}")?;
                    }
                    f.write_str("]")
                }
            }
            Message::ChainConfigResponse(m) => write!(
                f,
                "CHAIN_CONFIG_RESPONSE(33) xid={} chain_id={} node_id={} function={:#010x} status={}({})",
                m.xid,
                m.chain_id,
                m.node_id,
                MESSAGE_FUNCTION,
                m.status.code(),
                m.status
            ),
            Message::NodeInfoReport(m) => {
                write!(f, "NODE_INFO_REPORT(34) xid={} node_id={} kind={} ports={}", m.xid, m.node_id, m.kind, m.ports.len())?;
                for p in &m.ports {
                    write!(
                        f,
                        " [port={} peer={} length_dm={} protocol={} rate_bps={}]",
                        p.port_no, p.peer, p.length_dm, p.protocol, p.key_rate_bps
                    )?;
                }
                Ok(())
            }
        }
    }
}

/// Classic 16-bytes-per-line hex dump with an ASCII gutter.
pub fn hex_dump(bytes: &[u8]) -> String {
    let mut out = String::new();
    for (line, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(out, "{:04x}  ", line * 16);
        for i in 0..16 {
            match chunk.get(i) {
                Some(b) => {
                    let _ = write!(out, "{b:02x} ");
                }
                None => out.push_str("   "),
            }
            if i == 7 {
                out.push(' ');
            }
        }
        out.push_str(" |");
        for &b in chunk {
            out.push(if b.is_ascii_graphic() || b == b' ' { b as char } else { '.' });
        }
        out.push_str("|\n");
    }
    out
}
