//! Emulated key plane: per-hop link keys and hop-by-hop XOR relaying of a
//! global key, with a custody log of which node ever held what.
//!
//! A BB84 link yields a key shared by its two endpoints. A TF pair yields one
//! key shared by the two transmitters on either side of the untrusted relay;
//! the relay itself never receives anything, so it never appears in the log.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::chain::{ChainRecord, ChainStatus};
use crate::model::{LinkId, NodeId, NodeKind, PhysicalTopology};

/// 256-bit keys unless stated otherwise.
pub const DEFAULT_KEY_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOrigin {
    Link(LinkId),
    Global,
    Derived,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    bytes: Vec<u8>,
    origin: KeyOrigin,
}

impl SecretKey {
    pub fn new(bytes: Vec<u8>, origin: KeyOrigin) -> Self {
        SecretKey { bytes, origin }
    }

    pub fn zero(len_bytes: usize, origin: KeyOrigin) -> Self {
        SecretKey { bytes: vec![0; len_bytes], origin }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn origin(&self) -> KeyOrigin {
        self.origin
    }

    pub fn len_bits(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn is_zero(&self) -> bool {
        self.bytes.iter().all(|&b| b == 0)
    }

    /// Same key material regardless of origin.
    pub fn same_bits(&self, other: &SecretKey) -> bool {
        self.bytes == other.bytes
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey({:?}, ", self.origin)?;
        for b in &self.bytes {
            write!(f, "{b:02x}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyError {
    LengthMismatch { left: usize, right: usize },
    LinkNotConfigured(LinkId),
    UnknownLink(LinkId),
    MissingLinkKey(LinkId),
    ChainNotEstablished(u32),
    MalformedChain(u32),
}

impl fmt::Display for KeyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyError::LengthMismatch { left, right } => {
                write!(f, "key lengths differ: {left} vs {right} bits")
            }
            KeyError::LinkNotConfigured(l) => write!(f, "link {l} is not configured for any chain"),
            KeyError::UnknownLink(l) => write!(f, "link {l} does not exist"),
            KeyError::MissingLinkKey(l) => write!(f, "no key has been generated for link {l}"),
            KeyError::ChainNotEstablished(c) => write!(f, "chain {c} is not established"),
            KeyError::MalformedChain(c) => write!(f, "chain {c} has an inconsistent path"),
        }
    }
}

impl core::error::Error for KeyError {}

/// Bitwise exclusive-or of two equally long keys.
pub fn xor_combine(a: &SecretKey, b: &SecretKey) -> Result<SecretKey, KeyError> {
    if a.bytes.len() != b.bytes.len() {
        return Err(KeyError::LengthMismatch { left: a.len_bits(), right: b.len_bits() });
    }
    let bytes = a.bytes.iter().zip(&b.bytes).map(|(x, y)| x ^ y).collect();
    Ok(SecretKey { bytes, origin: KeyOrigin::Derived })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CustodyItem {
    LinkKey(LinkId),
    Ciphertext,
    GlobalKey,
}

impl fmt::Display for CustodyItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CustodyItem::LinkKey(l) => write!(f, "link-key {l}"),
            CustodyItem::Ciphertext => f.write_str("ciphertext"),
            CustodyItem::GlobalKey => f.write_str("global-key"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CustodyEntry {
    /// Logical timestamp, strictly increasing.
    pub seq: u64,
    pub node: NodeId,
    pub item: CustodyItem,
}

/// Append-only record of key material custody.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CustodyLog {
    entries: Vec<CustodyEntry>,
}

impl CustodyLog {
    fn record(&mut self, node: NodeId, item: CustodyItem) {
        let seq = self.entries.len() as u64;
        self.entries.push(CustodyEntry { seq, node, item });
    }

    pub fn entries(&self) -> &[CustodyEntry] {
        &self.entries
    }

    pub fn mentions(&self, node: NodeId) -> bool {
        self.entries.iter().any(|e| e.node == node)
    }

    /// Nodes that held the global key in plaintext, in first-custody order.
    pub fn global_key_holders(&self) -> Vec<NodeId> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| e.item == CustodyItem::GlobalKey && seen.insert(e.node))
            .map(|e| e.node)
            .collect()
    }

    /// One `seq node item` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.seq, e.node, e.item);
        }
        out
    }
}

/// A ciphertext handed from one key manager to the next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub from: NodeId,
    pub to: NodeId,
    pub ciphertext: SecretKey,
}

#[derive(Debug, Clone)]
pub struct RelayOutcome {
    pub delivered: SecretKey,
    pub transmissions: Vec<Transmission>,
}

/// One key-bearing hop: a BB84 link, or a TF pair across an untrusted relay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct KeyHop {
    key_id: LinkId,
    near: NodeId,
    far: NodeId,
}

#[derive(Debug, Clone)]
struct SharedKey {
    near: NodeId,
    at_near: SecretKey,
    at_far: SecretKey,
}

/// Link keys and custody for one relay run over a physical topology.
#[derive(Debug)]
pub struct KeyPlane<'a> {
    topo: &'a PhysicalTopology,
    key_bytes: usize,
    configured: BTreeSet<LinkId>,
    keys: BTreeMap<LinkId, SharedKey>,
    log: CustodyLog,
}

impl<'a> KeyPlane<'a> {
    pub fn new(topo: &'a PhysicalTopology) -> Self {
        Self::with_key_len(topo, DEFAULT_KEY_BYTES)
    }

    pub fn with_key_len(topo: &'a PhysicalTopology, key_bytes: usize) -> Self {
        KeyPlane { topo, key_bytes, configured: BTreeSet::new(), keys: BTreeMap::new(), log: CustodyLog::default() }
    }

    pub fn key_bytes(&self) -> usize {
        self.key_bytes
    }

    pub fn log(&self) -> &CustodyLog {
        &self.log
    }

    pub fn configure_link(&mut self, link: LinkId) {
        self.configured.insert(link);
    }

    /// Marks every link a chain holds a resource unit on.
    pub fn configure_chain(&mut self, chain: &ChainRecord) {
        for a in &chain.allocations {
            self.configured.insert(a.link);
        }
    }

    /// Resolves `link` to its key-bearing hop. A TF segment resolves to its
    /// whole pair, keyed by the lower of the two link ids.
    fn hop_for(&self, link: LinkId) -> Result<KeyHop, KeyError> {
        let l = self.topo.link(link).ok_or(KeyError::UnknownLink(link))?;
        let (a, b) = l.endpoints;
        let relay = [a, b]
            .into_iter()
            .find(|&n| self.topo.kind(n) == Some(NodeKind::UntrustedRelay));
        match relay {
            None => Ok(KeyHop { key_id: link, near: a, far: b }),
            Some(relay) => {
                let other = self
                    .topo
                    .incident(relay)
                    .find(|o| o.id != link)
                    .ok_or(KeyError::UnknownLink(link))?;
                let near = l.peer_of(relay).expect("incident");
                let far = other.peer_of(relay).expect("incident");
                let (key_id, near, far) = if link < other.id { (link, near, far) } else { (other.id, far, near) };
                Ok(KeyHop { key_id, near, far })
            }
        }
    }

    /// Derives the key shared across the hop containing `link` from
    /// `(seed, hop)`. Both returned copies are identical.
    pub fn generate_link_key(&mut self, link: LinkId, seed: u64) -> Result<(SecretKey, SecretKey), KeyError> {
        if !self.configured.contains(&link) {
            return Err(KeyError::LinkNotConfigured(link));
        }
        let hop = self.hop_for(link)?;
        let key = derive_link_key(seed, hop.key_id, self.key_bytes);
        self.deposit(hop, key.clone(), key.clone());
        Ok((key.clone(), key))
    }

    /// Installs externally supplied key copies for the hop containing `link`.
    pub fn install_link_key(&mut self, link: LinkId, at_near: SecretKey, at_far: SecretKey) -> Result<(), KeyError> {
        if !self.configured.contains(&link) {
            return Err(KeyError::LinkNotConfigured(link));
        }
        let hop = self.hop_for(link)?;
        self.deposit(hop, at_near, at_far);
        Ok(())
    }

    fn deposit(&mut self, hop: KeyHop, at_near: SecretKey, at_far: SecretKey) {
        self.log.record(hop.near, CustodyItem::LinkKey(hop.key_id));
        self.log.record(hop.far, CustodyItem::LinkKey(hop.key_id));
        self.keys.insert(hop.key_id, SharedKey { near: hop.near, at_near, at_far });
    }

    fn key_at(&self, hop: KeyHop, holder: NodeId) -> Result<&SecretKey, KeyError> {
        let shared = self.keys.get(&hop.key_id).ok_or(KeyError::MissingLinkKey(hop.key_id))?;
        Ok(if holder == shared.near { &shared.at_near } else { &shared.at_far })
    }

    /// Carries `global` from the chain's source to its destination. The
    /// source encrypts with the first hop key, every trusted relay decrypts
    /// with its inbound key and re-encrypts with its outbound key, and the
    /// destination decrypts. Returns what the destination recovered.
    pub fn relay_global_key(&mut self, chain: &ChainRecord, global: &SecretKey) -> Result<RelayOutcome, KeyError> {
        if chain.status != ChainStatus::Established {
            return Err(KeyError::ChainNotEstablished(chain.chain_id));
        }
        let path = &chain.physical_path;
        if path.len() < 2 || chain.allocations.len() + 1 != path.len() {
            return Err(KeyError::MalformedChain(chain.chain_id));
        }

        // Group physical links into key hops; a TF pair spans two links.
        let mut hops: Vec<(NodeId, NodeId, KeyHop)> = Vec::new();
        let mut i = 0;
        while i + 1 < path.len() {
            let link = chain.allocations[i].link;
            let hop = self.hop_for(link)?;
            let step = if self.topo.kind(path[i + 1]) == Some(NodeKind::UntrustedRelay) { 2 } else { 1 };
            if i + step >= path.len() {
                return Err(KeyError::MalformedChain(chain.chain_id));
            }
            hops.push((path[i], path[i + step], hop));
            i += step;
        }

        let mut transmissions = Vec::with_capacity(hops.len());
        let mut plain = global.clone();
        self.log.record(path[0], CustodyItem::GlobalKey);
        for (from, to, hop) in hops {
            let sealed = xor_combine(self.key_at(hop, from)?, &plain)?;
            self.log.record(to, CustodyItem::Ciphertext);
            let opened = xor_combine(self.key_at(hop, to)?, &sealed)?;
            self.log.record(to, CustodyItem::GlobalKey);
            transmissions.push(Transmission { from, to, ciphertext: sealed });
            plain = opened;
        }
        Ok(RelayOutcome { delivered: SecretKey::new(plain.bytes, KeyOrigin::Global), transmissions })
    }
}

/// Deterministic stand-in for the key a QKD link distils, keyed by the link
/// (or, for a TF pair, the lower segment id).
pub fn derive_link_key(seed: u64, key_id: LinkId, len: usize) -> SecretKey {
    let mut material = [0u8; 32];
    material[..8].copy_from_slice(&seed.to_le_bytes());
    material[8..12].copy_from_slice(&key_id.0.to_le_bytes());
    material[12..16].copy_from_slice(b"qkdl");
    let mut rng = ChaCha20Rng::from_seed(material);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    SecretKey::new(out, KeyOrigin::Link(key_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::abstract_topology;
    use crate::chain::{Allocation, ProtocolRequirement};
    use crate::model::fixtures::{n, testbed};
    use crate::model::{ProtocolKind, QkdLink};
    use crate::routing::{compute_path, locate_relays};
    use proptest::prelude::*;

    fn toy(b: u8, origin: KeyOrigin) -> SecretKey {
        SecretKey::new(vec![b], origin)
    }

    fn established(topo: &PhysicalTopology, src: u32, dst: u32) -> ChainRecord {
        let abs = abstract_topology(topo).unwrap();
        let layout = locate_relays(&compute_path(n(src), n(dst), &abs).unwrap(), &abs);
        ChainRecord {
            chain_id: 1,
            request_id: 1,
            protocol: ProtocolRequirement::Heterogeneous,
            physical_path: layout.physical_path,
            trusted_relays: layout.trusted,
            untrusted_relays: layout.untrusted,
            allocations: layout.links.iter().map(|&link| Allocation { link, slot: 0 }).collect(),
            status: ChainStatus::Established,
        }
    }

    #[test]
    fn xor_toy_values() {
        let a = toy(0xFF, KeyOrigin::Link(LinkId(1)));
        let g = toy(0xA5, KeyOrigin::Global);
        let c = xor_combine(&a, &g).unwrap();
        assert_eq!(c.as_bytes(), &[0x5A]);
        assert_eq!(xor_combine(&c, &a).unwrap().as_bytes(), &[0xA5]);
        assert!(xor_combine(&a, &a).unwrap().is_zero());
        let z = SecretKey::zero(1, KeyOrigin::Derived);
        assert!(xor_combine(&a, &z).unwrap().same_bits(&a));
        let long = SecretKey::zero(2, KeyOrigin::Derived);
        assert_eq!(xor_combine(&a, &long), Err(KeyError::LengthMismatch { left: 8, right: 16 }));
    }

    #[test]
    fn derivation_is_deterministic_and_link_specific() {
        let t = testbed();
        let mut kp = KeyPlane::new(&t);
        for l in 1..=8 {
            kp.configure_link(LinkId(l));
        }
        let (a1, b1) = kp.generate_link_key(LinkId(1), 42).unwrap();
        let (a2, _) = kp.generate_link_key(LinkId(1), 42).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(a1, a2);
        assert_eq!(a1.len_bits(), 256);
        let mut all: Vec<Vec<u8>> = Vec::new();
        for l in [1, 2, 3, 4, 6, 7, 8] {
            all.push(kp.generate_link_key(LinkId(l), 42).unwrap().0.as_bytes().to_vec());
        }
        let distinct: BTreeSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), all.len());
        // Either TF segment names the same pair key.
        let (tf4, _) = kp.generate_link_key(LinkId(4), 42).unwrap();
        let (tf5, _) = kp.generate_link_key(LinkId(5), 42).unwrap();
        assert_eq!(tf4, tf5);
    }

    #[test]
    fn unconfigured_link_is_refused() {
        let t = testbed();
        let mut kp = KeyPlane::new(&t);
        assert_eq!(kp.generate_link_key(LinkId(1), 0), Err(KeyError::LinkNotConfigured(LinkId(1))));
    }

    #[test]
    fn tf_pair_key_never_reaches_relay() {
        let t = testbed();
        let mut kp = KeyPlane::new(&t);
        kp.configure_link(LinkId(4));
        kp.generate_link_key(LinkId(4), 7).unwrap();
        assert!(!kp.log().mentions(n(8)));
        let holders: Vec<NodeId> = kp.log().entries().iter().map(|e| e.node).collect();
        assert_eq!(holders, vec![n(6), n(3)]);
    }

    #[test]
    fn heterogeneous_relay() {
        let t = testbed();
        let chain = established(&t, 2, 3);
        let mut kp = KeyPlane::new(&t);
        kp.configure_chain(&chain);
        for a in &chain.allocations {
            kp.generate_link_key(a.link, 99).unwrap();
        }
        let kg = SecretKey::new((0..32).collect(), KeyOrigin::Global);
        let out = kp.relay_global_key(&chain, &kg).unwrap();
        assert!(out.delivered.same_bits(&kg));
        assert_eq!(kp.log().global_key_holders(), vec![n(2), n(6), n(3)]);
        assert!(!kp.log().mentions(n(8)));
        assert_eq!(out.transmissions.len(), 2);
        assert_eq!((out.transmissions[1].from, out.transmissions[1].to), (n(6), n(3)));
    }

    #[test]
    fn conventional_relay() {
        let t = testbed();
        let chain = established(&t, 2, 1);
        let mut kp = KeyPlane::new(&t);
        kp.configure_chain(&chain);
        for a in &chain.allocations {
            kp.generate_link_key(a.link, 5).unwrap();
        }
        let kg = SecretKey::new(vec![0x3C; 32], KeyOrigin::Global);
        let out = kp.relay_global_key(&chain, &kg).unwrap();
        assert!(out.delivered.same_bits(&kg));
        assert_eq!(kp.log().global_key_holders(), vec![n(2), n(6), n(5), n(1)]);
        assert_eq!(out.transmissions.len(), 3);
    }

    #[test]
    fn one_hop_ciphertext_differs_from_global() {
        let mut t = PhysicalTopology::new();
        t.add_node(n(1), NodeKind::QkdNode).unwrap();
        t.add_node(n(2), NodeKind::QkdNode).unwrap();
        t.add_link(QkdLink::new(LinkId(1), n(1), n(2), 78.0, ProtocolKind::Bb84, 28.1)).unwrap();
        let chain = established(&t, 1, 2);
        let mut kp = KeyPlane::with_key_len(&t, 1);
        kp.configure_chain(&chain);
        kp.install_link_key(LinkId(1), toy(0xFF, KeyOrigin::Link(LinkId(1))), toy(0xFF, KeyOrigin::Link(LinkId(1))))
            .unwrap();
        let kg = toy(0xA5, KeyOrigin::Global);
        let out = kp.relay_global_key(&chain, &kg).unwrap();
        assert_eq!(out.transmissions[0].ciphertext.as_bytes(), &[0x5A]);
        assert!(out.delivered.same_bits(&kg));
        assert_eq!(kp.log().global_key_holders(), vec![n(1), n(2)]);
    }

    #[test]
    fn missing_key_and_unestablished_chain() {
        let t = testbed();
        let mut chain = established(&t, 2, 1);
        let mut kp = KeyPlane::new(&t);
        kp.configure_chain(&chain);
        kp.generate_link_key(LinkId(1), 1).unwrap();
        let kg = SecretKey::zero(32, KeyOrigin::Global);
        assert_eq!(kp.relay_global_key(&chain, &kg).unwrap_err(), KeyError::MissingLinkKey(LinkId(2)));
        chain.status = ChainStatus::Pending;
        assert_eq!(kp.relay_global_key(&chain, &kg).unwrap_err(), KeyError::ChainNotEstablished(1));
    }

    #[test]
    fn audit_text() {
        let t = testbed();
        let mut kp = KeyPlane::new(&t);
        kp.configure_link(LinkId(1));
        kp.generate_link_key(LinkId(1), 1).unwrap();
        assert_eq!(kp.log().to_text(), "0 2 link-key l1\n1 6 link-key l1\n");
    }

    proptest! {
        #[test]
        fn xor_algebra(a in proptest::collection::vec(any::<u8>(), 32),
                       b in proptest::collection::vec(any::<u8>(), 32),
                       c in proptest::collection::vec(any::<u8>(), 32)) {
            let (a, b, c) = (
                SecretKey::new(a, KeyOrigin::Derived),
                SecretKey::new(b, KeyOrigin::Derived),
                SecretKey::new(c, KeyOrigin::Derived),
            );
            let ab = xor_combine(&a, &b).unwrap();
            prop_assert!(ab.same_bits(&xor_combine(&b, &a).unwrap()));
            let l = xor_combine(&ab, &c).unwrap();
            let r = xor_combine(&a, &xor_combine(&b, &c).unwrap()).unwrap();
            prop_assert!(l.same_bits(&r));
            prop_assert!(xor_combine(&ab, &b).unwrap().same_bits(&a));
        }

        #[test]
        fn end_to_end_with_random_keys(kg in proptest::collection::vec(any::<u8>(), 32),
                                      hops in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 32), 3),
                                      heterogeneous in any::<bool>()) {
            let t = testbed();
            let chain = if heterogeneous { established(&t, 2, 3) } else { established(&t, 2, 1) };
            let mut kp = KeyPlane::new(&t);
            kp.configure_chain(&chain);
            for (a, k) in chain.allocations.iter().zip(&hops) {
                let key = SecretKey::new(k.clone(), KeyOrigin::Link(a.link));
                kp.install_link_key(a.link, key.clone(), key).unwrap();
            }
            let kg = SecretKey::new(kg, KeyOrigin::Global);
            let out = kp.relay_global_key(&chain, &kg).unwrap();
            prop_assert!(out.delivered.same_bits(&kg));
            prop_assert!(!kp.log().mentions(n(8)));
            for tx in &out.transmissions {
                prop_assert!(tx.to != n(8) && tx.from != n(8));
            }
        }
    }
}
