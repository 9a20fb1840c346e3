//! First-fit assignment of resource units along a chain.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::chain::Allocation;
use crate::model::{LinkId, PhysicalTopology, ResourceMap};

/// Authoritative per-link occupancy held by the controller.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResourceView {
    maps: BTreeMap<LinkId, ResourceMap>,
}

impl ResourceView {
    /// Starts from the occupancy recorded on each physical link.
    pub fn from_topology(topo: &PhysicalTopology) -> Self {
        ResourceView {
            maps: topo.links().map(|l| (l.id, l.resources)).collect(),
        }
    }

    pub fn get(&self, link: LinkId) -> Option<ResourceMap> {
        self.maps.get(&link).copied()
    }

    pub fn set(&mut self, link: LinkId, map: ResourceMap) {
        self.maps.insert(link, map);
    }

    pub fn iter(&self) -> impl Iterator<Item = (LinkId, ResourceMap)> + '_ {
        self.maps.iter().map(|(&l, &m)| (l, m))
    }

    /// Frees every slot in `allocations`. Unknown links are ignored.
    pub fn release(&mut self, allocations: &[Allocation]) {
        for a in allocations {
            if let Some(m) = self.maps.get_mut(&a.link) {
                m.free(a.slot);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AllocationError {
    UnknownLink(LinkId),
    InsufficientRate { link: LinkId, available_kbps: f64, required_kbps: f64 },
    NoFreeSlot(LinkId),
}

impl fmt::Display for AllocationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocationError::UnknownLink(l) => write!(f, "link {l} has no resource map"),
            AllocationError::InsufficientRate { link, available_kbps, required_kbps } => write!(
                f,
                "link {link} offers {available_kbps} kbps, {required_kbps} kbps required"
            ),
            AllocationError::NoFreeSlot(l) => write!(f, "link {l} has no free resource unit"),
        }
    }
}

impl core::error::Error for AllocationError {}

/// Assigns one resource unit on each of `links`, always the lowest-numbered
/// free one. A link whose key rate is below `required_rate_kbps` fails the
/// request. Nothing is committed to `view` unless every link succeeds.
pub fn allocate_resources(
    links: &[LinkId],
    required_rate_kbps: f64,
    topo: &PhysicalTopology,
    view: &mut ResourceView,
) -> Result<Vec<Allocation>, AllocationError> {
    let mut staged: BTreeMap<LinkId, ResourceMap> = BTreeMap::new();
    let mut out = Vec::with_capacity(links.len());
    for &link in links {
        let phys = topo.link(link).ok_or(AllocationError::UnknownLink(link))?;
        if phys.key_rate_kbps < required_rate_kbps {
            return Err(AllocationError::InsufficientRate {
                link,
                available_kbps: phys.key_rate_kbps,
                required_kbps: required_rate_kbps,
            });
        }
        let map = match staged.get(&link) {
            Some(m) => *m,
            None => view.get(link).ok_or(AllocationError::UnknownLink(link))?,
        };
        let slot = map.first_free().ok_or(AllocationError::NoFreeSlot(link))?;
        let mut next = map;
        next.occupy(slot);
        staged.insert(link, next);
        out.push(Allocation { link, slot });
    }
    for (link, map) in staged {
        view.set(link, map);
    }
    Ok(out)
}
