use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::{ms_to_us, us_to_ms, DomainId, Micros, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Edge,
    Cloud,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    #[default]
    Up,
    Down,
}

pub type LinkState = NodeState;

fn is_up(s: &NodeState) -> bool {
    *s == NodeState::Up
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    #[serde(rename = "id")]
    pub node_id: NodeId,
    pub tier: Tier,
    /// Compute units per millisecond.
    pub cpu_capacity: u64,
    pub mem_mb: u64,
    #[serde(default)]
    pub has_accelerator: bool,
    pub domain: DomainId,
    #[serde(default, skip_serializing_if = "is_up")]
    pub state: NodeState,
}

impl NodeDescriptor {
    pub fn is_up(&self) -> bool {
        self.state == NodeState::Up
    }
}

mod ms_fixed {
    use super::*;

    pub fn serialize<S: Serializer>(us: &Micros, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(us_to_ms(*us))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Micros, D::Error> {
        let ms = f64::deserialize(d)?;
        if !ms.is_finite() || ms < 0.0 {
            return Err(serde::de::Error::custom("latency_ms must be a non-negative number"));
        }
        Ok(ms_to_us(ms))
    }
}

mod kb_fixed {
    use super::*;

    pub fn serialize<S: Serializer>(bytes_per_ms: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(*bytes_per_ms as f64 / 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let kb = f64::deserialize(d)?;
        let bytes = (kb * 1000.0).round();
        if !kb.is_finite() || bytes < 1.0 {
            return Err(serde::de::Error::custom("bandwidth_kb_per_ms must be positive"));
        }
        Ok(bytes as u64)
    }
}

/// Undirected link. Latency is held in microseconds and bandwidth in bytes
/// per millisecond (1 KB = 1000 bytes), so transfer time in microseconds is
/// `latency + ceil(bytes * 1000 / bandwidth)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDescriptor {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(rename = "latency_ms", with = "ms_fixed")]
    pub latency_us: Micros,
    #[serde(rename = "bandwidth_kb_per_ms", with = "kb_fixed")]
    pub bandwidth_bytes_per_ms: u64,
    #[serde(default, skip_serializing_if = "is_up")]
    pub state: LinkState,
}

impl LinkDescriptor {
    pub fn new(a: &str, b: &str, latency_ms: f64, bandwidth_kb_per_ms: f64) -> Self {
        Self {
            a: NodeId::new(a),
            b: NodeId::new(b),
            latency_us: ms_to_us(latency_ms),
            bandwidth_bytes_per_ms: ((bandwidth_kb_per_ms * 1000.0).round() as u64).max(1),
            state: NodeState::Up,
        }
    }

    pub fn connects(&self, x: &NodeId, y: &NodeId) -> bool {
        (&self.a == x && &self.b == y) || (&self.a == y && &self.b == x)
    }

    pub fn other(&self, x: &NodeId) -> Option<&NodeId> {
        if &self.a == x {
            Some(&self.b)
        } else if &self.b == x {
            Some(&self.a)
        } else {
            None
        }
    }

    pub fn key(&self) -> (NodeId, NodeId) {
        if self.a <= self.b {
            (self.a.clone(), self.b.clone())
        } else {
            (self.b.clone(), self.a.clone())
        }
    }

    pub fn is_up(&self) -> bool {
        self.state == NodeState::Up
    }

    pub fn transfer_us(&self, bytes: u64) -> Micros {
        let serialization = (bytes as u128 * 1000).div_ceil(self.bandwidth_bytes_per_ms as u128);
        self.latency_us + serialization as Micros
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {0} has zero cpu capacity")]
    ZeroCapacity(NodeId),
    #[error("link {0}-{1} references an unknown node")]
    UnknownEndpoint(NodeId, NodeId),
    #[error("link {0}-{0} is a self-loop")]
    SelfLoop(NodeId),
    #[error("more than one link between {0} and {1}")]
    DuplicateLink(NodeId, NodeId),
    #[error("domain {0} is not connected over up links")]
    DomainDisconnected(DomainId),
    #[error("broker node {1} of domain {0} is unknown or outside the domain")]
    BadBroker(DomainId, NodeId),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<NodeDescriptor>,
    pub links: Vec<LinkDescriptor>,
    /// Node hosting each domain's broker.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub brokers: BTreeMap<DomainId, NodeId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no route from {0} to {1} over up links")]
    NoRoute(NodeId, NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteInfo {
    pub path: Vec<NodeId>,
    pub latency_us: Micros,
}

impl RouteInfo {
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }
}

impl Topology {
    pub fn node(&self, id: &NodeId) -> Option<&NodeDescriptor> {
        self.nodes.iter().find(|n| &n.node_id == id)
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut NodeDescriptor> {
        self.nodes.iter_mut().find(|n| &n.node_id == id)
    }

    pub fn link(&self, x: &NodeId, y: &NodeId) -> Option<&LinkDescriptor> {
        self.links.iter().find(|l| l.connects(x, y))
    }

    pub fn link_mut(&mut self, x: &NodeId, y: &NodeId) -> Option<&mut LinkDescriptor> {
        self.links.iter_mut().find(|l| l.connects(x, y))
    }

    pub fn is_up(&self, id: &NodeId) -> bool {
        self.node(id).is_some_and(NodeDescriptor::is_up)
    }

    pub fn up_nodes(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> =
            self.nodes.iter().filter(|n| n.is_up()).map(|n| n.node_id.clone()).collect();
        ids.sort();
        ids
    }

    pub fn domains(&self) -> BTreeSet<DomainId> {
        self.nodes.iter().map(|n| n.domain.clone()).collect()
    }

    pub fn domain_of(&self, id: &NodeId) -> Option<&DomainId> {
        self.node(id).map(|n| &n.domain)
    }

    /// Broker host for `domain`: the declared one, else the first cloud node,
    /// else the lexicographically smallest node of the domain.
    pub fn broker_node(&self, domain: &DomainId) -> Option<NodeId> {
        if let Some(n) = self.brokers.get(domain) {
            return Some(n.clone());
        }
        let mut members: Vec<&NodeDescriptor> =
            self.nodes.iter().filter(|n| &n.domain == domain).collect();
        members.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        members
            .iter()
            .find(|n| n.tier == Tier::Cloud)
            .or_else(|| members.first())
            .map(|n| n.node_id.clone())
    }

    /// Up neighbours of `id` over up links.
    pub fn neighbors(&self, id: &NodeId) -> Vec<(&NodeId, &LinkDescriptor)> {
        self.links
            .iter()
            .filter(|l| l.is_up())
            .filter_map(|l| l.other(id).map(|o| (o, l)))
            .filter(|(o, _)| self.is_up(o))
            .collect()
    }

    /// Sub-topology induced by the given domains (links kept only when both
    /// endpoints survive).
    pub fn restricted_to(&self, domains: &BTreeSet<DomainId>) -> Topology {
        let nodes: Vec<NodeDescriptor> =
            self.nodes.iter().filter(|n| domains.contains(&n.domain)).cloned().collect();
        let ids: BTreeSet<&NodeId> = nodes.iter().map(|n| &n.node_id).collect();
        let links = self
            .links
            .iter()
            .filter(|l| ids.contains(&l.a) && ids.contains(&l.b))
            .cloned()
            .collect();
        let brokers = self
            .brokers
            .iter()
            .filter(|(d, _)| domains.contains(*d))
            .map(|(d, n)| (d.clone(), n.clone()))
            .collect();
        Topology { nodes, links, brokers }
    }

    pub fn set_node_state(&mut self, id: &NodeId, state: NodeState) -> bool {
        match self.node_mut(id) {
            Some(n) => {
                n.state = state;
                true
            }
            None => false,
        }
    }

    pub fn set_link_state(&mut self, x: &NodeId, y: &NodeId, state: LinkState) -> bool {
        match self.link_mut(x, y) {
            Some(l) => {
                l.state = state;
                true
            }
            None => false,
        }
    }

    /// Transfer time along `path` for a message of `bytes`, store-and-forward.
    pub fn path_transfer_us(&self, path: &[NodeId], bytes: u64) -> Micros {
        path.windows(2)
            .map(|w| self.link(&w[0], &w[1]).map_or(0, |l| l.transfer_us(bytes)))
            .sum()
    }

    pub fn validate(&self) -> Vec<TopologyError> {
        let mut errs = Vec::new();
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(&n.node_id) {
                errs.push(TopologyError::DuplicateNode(n.node_id.clone()));
            }
            if n.cpu_capacity == 0 {
                errs.push(TopologyError::ZeroCapacity(n.node_id.clone()));
            }
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            if l.a == l.b {
                errs.push(TopologyError::SelfLoop(l.a.clone()));
                continue;
            }
            if !ids.contains(&l.a) || !ids.contains(&l.b) {
                errs.push(TopologyError::UnknownEndpoint(l.a.clone(), l.b.clone()));
                continue;
            }
            if !pairs.insert(l.key()) {
                let (x, y) = l.key();
                errs.push(TopologyError::DuplicateLink(x, y));
            }
        }
        for (d, n) in &self.brokers {
            if self.domain_of(n) != Some(d) {
                errs.push(TopologyError::BadBroker(d.clone(), n.clone()));
            }
        }
        if errs.is_empty() {
            for d in self.domains() {
                let sub = self.restricted_to(&BTreeSet::from([d.clone()]));
                let members = sub.up_nodes();
                if let Some(first) = members.first() {
                    let reach = sub.reachable_from(first);
                    if reach.len() != members.len() {
                        errs.push(TopologyError::DomainDisconnected(d));
                    }
                }
            }
        }
        errs
    }

    fn reachable_from(&self, start: &NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([start.clone()]);
        let mut stack = vec![start.clone()];
        while let Some(n) = stack.pop() {
            for (o, _) in self.neighbors(&n) {
                if seen.insert(o.clone()) {
                    stack.push(o.clone());
                }
            }
        }
        seen
    }
}

/// Minimum-latency path over up links, ties broken by fewer hops, then by the
/// lexicographically smallest node sequence.
pub fn route(t: &Topology, a: &NodeId, b: &NodeId) -> Result<Vec<NodeId>, RouteError> {
    route_info(t, a, b).map(|r| r.path)
}

pub fn route_info(t: &Topology, a: &NodeId, b: &NodeId) -> Result<RouteInfo, RouteError> {
    for n in [a, b] {
        if t.node(n).is_none() {
            return Err(RouteError::UnknownNode(n.clone()));
        }
    }
    // Searching from the smaller endpoint keeps the tie-break symmetric, so a
    // route and its reverse always coincide.
    if b < a {
        let mut r = route_info(t, b, a)?;
        r.path.reverse();
        return Ok(r);
    }
    if !t.is_up(a) || !t.is_up(b) {
        return Err(RouteError::NoRoute(a.clone(), b.clone()));
    }
    if a == b {
        return Ok(RouteInfo { path: vec![a.clone()], latency_us: 0 });
    }

    let mut settled: BTreeSet<NodeId> = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0 as Micros, 0usize, vec![a.clone()])));
    while let Some(Reverse((lat, hops, path))) = heap.pop() {
        let here = path.last().expect("non-empty path").clone();
        if !settled.insert(here.clone()) {
            continue;
        }
        if &here == b {
            return Ok(RouteInfo { path, latency_us: lat });
        }
        for (next, link) in t.neighbors(&here) {
            if settled.contains(next) {
                continue;
            }
            let mut p = path.clone();
            p.push(next.clone());
            heap.push(Reverse((lat + link.latency_us, hops + 1, p)));
        }
    }
    Err(RouteError::NoRoute(a.clone(), b.clone()))
}
