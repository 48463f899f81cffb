use std::collections::BTreeMap;

use serde::Serialize;

use super::id::CliqueId;
use super::NodeId;

/// One routing-table slot: the clique chosen for a (row, digit) block plus
/// up to `k` addresses of its members, stable nodes listed first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingEntry {
    pub target: u64,
    pub nodes: Vec<NodeId>,
}

/// Prefix-routing table shared by a clique's stable nodes. Row `ℓ` holds
/// the cliques that share exactly `ℓ` leading digits with the owner.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingTable {
    pub entries: BTreeMap<(u32, u64), RoutingEntry>,
}

impl RoutingTable {
    pub fn get(&self, row: u32, digit: u64) -> Option<&RoutingEntry> {
        self.entries.get(&(row, digit))
    }

    pub fn rows(&self) -> u32 {
        self.entries.keys().map(|(r, _)| r + 1).max().unwrap_or(0)
    }

    pub fn targets(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.values().map(|e| e.target)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which node a hop lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HopKind {
    Origin,
    /// Forwarded to another member of the same clique.
    Intra,
    /// Forwarded to a different clique.
    Inter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hop<T> {
    pub node: NodeId,
    pub clique: CliqueId,
    pub kind: HopKind,
    /// Length of the link from the previous hop (zero for the origin).
    pub length: T,
}

/// An overlay route, origin first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Path<T> {
    pub hops: Vec<Hop<T>>,
}

impl<T: crate::scalar::Scalar> Path<T> {
    pub fn origin(&self) -> NodeId {
        self.hops[0].node
    }

    pub fn last(&self) -> NodeId {
        self.hops.last().expect("path has an origin").node
    }

    pub fn length(&self) -> T {
        self.hops.iter().map(|h| h.length).sum()
    }

    pub fn inter_clique_hops(&self) -> usize {
        self.hops.iter().filter(|h| h.kind == HopKind::Inter).count()
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.hops.iter().map(|h| h.node).collect()
    }
}

/// How a route picks nodes inside each routing entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutePolicy {
    /// Prefer a listed stable node and hand messages arriving at non-stable
    /// nodes to a stable node of the same clique.
    #[default]
    PreferStable,
    /// Plain clustered-DHT routing: a random listed node per hop and no
    /// detour through stable nodes.
    AnyNode,
}

/// One routing decision taken at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Arrived,
    Intra(NodeId),
    Inter(NodeId),
}
