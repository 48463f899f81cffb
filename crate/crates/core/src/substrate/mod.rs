//! The clustered DHT the streaming layer runs on.
//!
//! Nodes are grouped into cliques of mutually close nodes. Each clique owns a
//! contiguous segment of the 64-bit id space starting at its identifier;
//! splitting a clique hands the upper half of its prefix block to the
//! offspring, so ids that share long prefixes sit close together in the
//! plane. Routing is prefix matching over `b`-bit digits with one table per
//! clique, kept by the clique's stable nodes.

pub mod id;
pub mod routing;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{centroid, distance, median_split, Point};
use crate::rng::{substream, SimRng};
use crate::scalar::Scalar;

pub use id::CliqueId;
pub use routing::{Hop, HopKind, Path, RoutePolicy, RoutingEntry, RoutingTable, Step};

use id::{common_digits, digit, digit_block, digit_count, ID_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SubstrateError {
    #[error("invalid substrate config: {0}")]
    InvalidConfig(String),
    #[error("bootstrap needs at least one placement")]
    EmptyPlacement,
    #[error("substrate has no cliques")]
    Empty,
    #[error("position ({0}, {1}) is not finite")]
    MalformedPosition(f64, f64),
    #[error("clique {0} is at maximum depth and cannot split")]
    MaxDepth(CliqueId),
    #[error("clique {0} has {1} members, too few to split")]
    TooSmallToSplit(CliqueId, usize),
    #[error("only one clique exists; nothing to merge with")]
    SingleClique,
    #[error("no live clique with id key {0:#x}")]
    NoSuchClique(u64),
    #[error("unknown node {0}")]
    NoSuchNode(NodeId),
    #[error("node {0} is not alive")]
    NotAlive(NodeId),
    #[error("destination clique {0} is not a live clique id")]
    MalformedDestination(CliqueId),
    #[error("destination unreachable: no live node listed for clique {target:#x} in the table of {at}")]
    Unreachable { at: CliqueId, target: u64 },
    #[error("routing entry target clique {0:#x} vanished")]
    TargetVanished(u64),
    #[error("route exceeded {0} inter-clique hops")]
    HopLimit(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubstrateConfig {
    pub id_length: u32,
    /// Bits matched per routing hop.
    pub b: u32,
    /// Node addresses kept per routing entry.
    pub k: usize,
    /// Stable nodes each clique tries to keep.
    pub t: usize,
    /// Age after which a node may be elected stable.
    pub stability_age: f64,
    pub clique_min: usize,
    pub clique_max: usize,
}

impl Default for SubstrateConfig {
    fn default() -> Self {
        SubstrateConfig { id_length: 64, b: 2, k: 4, t: 2, stability_age: 50.0, clique_min: 32, clique_max: 128 }
    }
}

impl SubstrateConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.id_length != ID_BITS {
            v.push(format!("id_length must be {ID_BITS}, got {}", self.id_length));
        }
        if !(1..=8).contains(&self.b) {
            v.push(format!("b must be within 1..=8, got {}", self.b));
        }
        if self.k < 1 {
            v.push("k must be at least 1".into());
        }
        if self.t < 2 {
            v.push(format!("t must be at least 2, got {}", self.t));
        }
        if !(self.stability_age.is_finite() && self.stability_age >= 0.0) {
            v.push(format!("stability_age must be a non-negative number, got {}", self.stability_age));
        }
        if self.clique_min >= self.clique_max {
            v.push(format!("clique_min ({}) must be below clique_max ({})", self.clique_min, self.clique_max));
        }
        if self.clique_max < 2 * self.clique_min {
            v.push(format!(
                "clique_max ({}) must be at least 2 x clique_min ({}) so splits yield legal cliques",
                self.clique_max, self.clique_min
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SubstrateError::InvalidConfig(v.join("; ")))
        }
    }

    /// Maximum fan-out of a clique in a dissemination tree.
    pub fn fanout(&self) -> usize {
        1usize << self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord<T> {
    pub id: NodeId,
    pub position: Point<T>,
    pub join_time: f64,
    pub uplink: f64,
    pub stable: bool,
    /// Key (id bits) of the containing clique.
    pub clique: u64,
    pub alive: bool,
    /// Still listed in its clique. A crashed node stays listed, though
    /// unreachable, until the membership timeout removes it.
    pub member: bool,
    /// The very first node of the network is stable without waiting.
    pub bootstrap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clique<T> {
    pub id: CliqueId,
    pub members: BTreeSet<NodeId>,
    pub stable: BTreeSet<NodeId>,
    pub centroid: Point<T>,
    pub table: RoutingTable,
}

impl<T> Clique<T> {
    pub fn key(&self) -> u64 {
        self.id.bits()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Structural changes the streaming layer has to react to.
#[derive(Debug, Clone, PartialEq)]
pub enum Notice {
    Split { parent: CliqueId, primary: CliqueId, offspring: CliqueId },
    /// `absorbed` lists the members that moved over from `merged`.
    Merge { merging: CliqueId, merged: CliqueId, absorbed: Vec<NodeId> },
    StableChanged { clique: u64 },
    NodeGone { node: NodeId, clique: u64, crashed: bool },
}

#[derive(Clone)]
pub struct Substrate<T> {
    cfg: SubstrateConfig,
    nodes: Vec<NodeRecord<T>>,
    cliques: BTreeMap<u64, Clique<T>>,
    now: f64,
    route_rng: SimRng,
    entry_rng: SimRng,
    bandwidth_rng: SimRng,
    tables_dirty: bool,
    notices: Vec<Notice>,
}

impl<T: Scalar> Substrate<T> {
    pub fn new(cfg: SubstrateConfig, seed: u64) -> Result<Self, SubstrateError> {
        cfg.validate()?;
        Ok(Substrate {
            cfg,
            nodes: Vec::new(),
            cliques: BTreeMap::new(),
            now: 0.0,
            route_rng: substream(seed, "routing"),
            entry_rng: substream(seed, "routing-entries"),
            bandwidth_rng: substream(seed, "bandwidth"),
            tables_dirty: true,
            notices: Vec::new(),
        })
    }

    /// Joins every placement in order at time 0, then lets the network age
    /// past the stability threshold so each clique has elected its stable
    /// nodes, and builds the routing tables.
    pub fn bootstrap(cfg: SubstrateConfig, placements: &[Point<T>], seed: u64) -> Result<Self, SubstrateError> {
        if placements.is_empty() {
            return Err(SubstrateError::EmptyPlacement);
        }
        let mut s = Substrate::new(cfg, seed)?;
        for &p in placements {
            let uplink = s.sample_uplink();
            s.join_node(p, 0.0, uplink)?;
        }
        let age = s.cfg.stability_age;
        s.advance_clock(age);
        s.rebuild_routing_tables();
        s.notices.clear();
        Ok(s)
    }

    /// Builds a perfectly balanced substrate by recursive median cuts down to
    /// `depth` bits, so every clique id has the same length. Every node is
    /// treated as old enough to be stable.
    pub fn balanced(cfg: SubstrateConfig, placements: &[Point<T>], depth: u8, seed: u64) -> Result<Self, SubstrateError> {
        if placements.is_empty() {
            return Err(SubstrateError::EmptyPlacement);
        }
        let mut s = Substrate::new(cfg, seed)?;
        for (i, &p) in placements.iter().enumerate() {
            let uplink = s.sample_uplink();
            s.nodes.push(NodeRecord {
                id: NodeId(i as u32),
                position: p,
                join_time: 0.0,
                uplink,
                stable: false,
                clique: 0,
                alive: true,
                member: true,
                bootstrap: false,
            });
        }
        let all: Vec<(NodeId, Point<T>)> = s.nodes.iter().map(|n| (n.id, n.position)).collect();
        let mut stack = vec![(CliqueId::ROOT, all)];
        while let Some((id, pts)) = stack.pop() {
            if id.depth() >= u32::from(depth) || pts.len() < 2 {
                let key = id.bits();
                for (n, _) in &pts {
                    s.nodes[n.0 as usize].clique = key;
                }
                let cen = centroid(pts.iter().map(|p| p.1)).unwrap_or(Point::new(T::zero(), T::zero()));
                s.cliques.insert(
                    key,
                    Clique { id, members: pts.iter().map(|p| p.0).collect(), stable: BTreeSet::new(), centroid: cen, table: RoutingTable::default() },
                );
                continue;
            }
            let (a, b) = median_split(&pts).expect("at least two points");
            let ca = centroid(a.iter().map(|p| p.1)).expect("non-empty");
            let cb = centroid(b.iter().map(|p| p.1)).expect("non-empty");
            let parent = centroid(pts.iter().map(|p| p.1)).expect("non-empty");
            let a_primary = distance(ca, parent) <= distance(cb, parent);
            let (p0, p1) = if a_primary { (a, b) } else { (b, a) };
            stack.push((id.child(false).ok_or(SubstrateError::MaxDepth(id))?, p0));
            stack.push((id.child(true).ok_or(SubstrateError::MaxDepth(id))?, p1));
        }
        let age = s.cfg.stability_age;
        s.advance_clock(age);
        s.rebuild_routing_tables();
        s.notices.clear();
        Ok(s)
    }

    /// Uplink capacities are drawn uniformly from [1, 100) units.
    pub fn sample_uplink(&mut self) -> f64 {
        self.bandwidth_rng.gen_range(1.0..100.0)
    }

    pub fn config(&self) -> &SubstrateConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord<T> {
        &self.nodes[id.0 as usize]
    }

    pub fn try_node(&self, id: NodeId) -> Result<&NodeRecord<T>, SubstrateError> {
        self.nodes.get(id.0 as usize).ok_or(SubstrateError::NoSuchNode(id))
    }

    pub fn nodes(&self) -> &[NodeRecord<T>] {
        &self.nodes
    }

    pub fn alive_nodes(&self) -> impl Iterator<Item = &NodeRecord<T>> {
        self.nodes.iter().filter(|n| n.alive)
    }

    pub fn position(&self, id: NodeId) -> Point<T> {
        self.node(id).position
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.nodes.get(id.0 as usize).is_some_and(|n| n.alive)
    }

    pub fn is_stable(&self, id: NodeId) -> bool {
        self.nodes.get(id.0 as usize).is_some_and(|n| n.alive && n.stable)
    }

    pub fn cliques(&self) -> impl Iterator<Item = &Clique<T>> {
        self.cliques.values()
    }

    pub fn clique_count(&self) -> usize {
        self.cliques.len()
    }

    pub fn clique(&self, key: u64) -> Option<&Clique<T>> {
        self.cliques.get(&key)
    }

    pub fn clique_of(&self, node: NodeId) -> &Clique<T> {
        &self.cliques[&self.node(node).clique]
    }

    pub fn clique_id_of(&self, node: NodeId) -> CliqueId {
        self.clique_of(node).id
    }

    /// The clique whose segment contains `key`.
    pub fn owner_of_key(&self, key: u64) -> u64 {
        *self.cliques.range(..=key).next_back().expect("clique with key 0 always exists").0
    }

    pub fn successor(&self, key: u64) -> Option<u64> {
        self.cliques.range(key.saturating_add(1)..).next().map(|(k, _)| *k).filter(|&k| k != key)
    }

    pub fn predecessor(&self, key: u64) -> Option<u64> {
        self.cliques.range(..key).next_back().map(|(k, _)| *k)
    }

    /// Segment `[start, end)` owned by the clique keyed `key`.
    pub fn segment(&self, key: u64) -> (u64, u128) {
        let end = self.successor(key).map(u128::from).unwrap_or(1u128 << ID_BITS);
        (key, end)
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    fn eligible(&self, n: &NodeRecord<T>, now: f64) -> bool {
        n.alive && (n.bootstrap || now - n.join_time >= self.cfg.stability_age)
    }

    /// Adds a node to the clique with the nearest centroid, splitting that
    /// clique if it grows past `clique_max`. Returns the node and the id of
    /// the clique it finally sits in.
    pub fn join_node(&mut self, position: Point<T>, join_time: f64, uplink: f64) -> Result<(NodeId, CliqueId), SubstrateError> {
        if !(position.x.is_finite() && position.y.is_finite()) {
            return Err(SubstrateError::MalformedPosition(position.x.as_f64(), position.y.as_f64()));
        }
        let id = NodeId(self.nodes.len() as u32);
        if self.cliques.is_empty() {
            self.nodes.push(NodeRecord {
                id,
                position,
                join_time,
                uplink,
                stable: true,
                clique: 0,
                alive: true,
                member: true,
                bootstrap: true,
            });
            let clique = Clique {
                id: CliqueId::ROOT,
                members: BTreeSet::from([id]),
                stable: BTreeSet::from([id]),
                centroid: position,
                table: RoutingTable::default(),
            };
            self.cliques.insert(0, clique);
            self.tables_dirty = true;
            return Ok((id, CliqueId::ROOT));
        }
        let key = self.nearest_clique(position);
        self.nodes.push(NodeRecord {
            id,
            position,
            join_time,
            uplink,
            stable: false,
            clique: key,
            alive: true,
            member: true,
            bootstrap: false,
        });
        let c = self.cliques.get_mut(&key).expect("nearest clique exists");
        c.members.insert(id);
        self.refresh_centroid(key);
        if self.eligible(self.node(id), self.now) {
            self.run_election(key);
        }
        if self.cliques[&key].len() > self.cfg.clique_max {
            self.split_clique(key)?;
        }
        Ok((id, self.clique_id_of(id)))
    }

    /// Key of the clique whose centroid is nearest to `p`, ties by key.
    pub fn nearest_clique(&self, p: Point<T>) -> u64 {
        let mut best: Option<(T, u64)> = None;
        for (k, c) in &self.cliques {
            let d = distance(c.centroid, p);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, *k));
            }
        }
        best.expect("substrate non-empty").1
    }

    fn refresh_centroid(&mut self, key: u64) {
        let c = &self.cliques[&key];
        let cen = centroid(c.members.iter().map(|m| self.nodes[m.0 as usize].position));
        let c = self.cliques.get_mut(&key).expect("clique exists");
        if let Some(cen) = cen {
            c.centroid = cen;
        }
    }

    /// The `t` eligible members with the highest uplink, ties by node id.
    pub fn elect_stable_nodes(&self, key: u64, now: f64) -> Vec<NodeId> {
        let c = &self.cliques[&key];
        let mut eligible: Vec<&NodeRecord<T>> =
            c.members.iter().map(|m| &self.nodes[m.0 as usize]).filter(|n| self.eligible(n, now)).collect();
        eligible.sort_by(|a, b| b.uplink.partial_cmp(&a.uplink).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id)));
        eligible.into_iter().take(self.cfg.t).map(|n| n.id).collect()
    }

    pub fn eligible_count(&self, key: u64) -> usize {
        let c = &self.cliques[&key];
        c.members.iter().filter(|m| self.eligible(&self.nodes[m.0 as usize], self.now)).count()
    }

    /// Tops the stable set up to `t` from the election result. Existing
    /// stable members keep their status.
    fn run_election(&mut self, key: u64) {
        let elected = self.elect_stable_nodes(key, self.now);
        let c = self.cliques.get_mut(&key).expect("clique exists");
        let mut changed = false;
        for n in elected {
            if c.stable.len() >= self.cfg.t {
                break;
            }
            if c.stable.insert(n) {
                self.nodes[n.0 as usize].stable = true;
                changed = true;
            }
        }
        if changed {
            self.refresh_entries_targeting(key);
            self.notices.push(Notice::StableChanged { clique: key });
        }
    }

    /// Adds one more stable node to a clique whose relays are overloaded.
    /// Prefers eligible members, falls back to any member, highest uplink first.
    pub fn recruit_stable(&mut self, key: u64) -> Option<NodeId> {
        let c = self.cliques.get(&key)?;
        let pick = c
            .members
            .iter()
            .map(|m| &self.nodes[m.0 as usize])
            .filter(|n| !n.stable && n.alive)
            .max_by(|a, b| {
                self.eligible(a, self.now)
                    .cmp(&self.eligible(b, self.now))
                    .then(a.uplink.partial_cmp(&b.uplink).unwrap_or(std::cmp::Ordering::Equal))
                    .then(b.id.cmp(&a.id))
            })
            .map(|n| n.id)?;
        self.nodes[pick.0 as usize].stable = true;
        self.cliques.get_mut(&key).expect("clique exists").stable.insert(pick);
        self.refresh_entries_targeting(key);
        self.notices.push(Notice::StableChanged { clique: key });
        Some(pick)
    }

    /// Moves the clock forward and runs elections in every clique that has
    /// fewer stable nodes than it could.
    pub fn advance_clock(&mut self, now: f64) {
        if now > self.now {
            self.now = now;
        }
        let keys: Vec<u64> = self.cliques.keys().copied().collect();
        for k in keys {
            let c = &self.cliques[&k];
            if c.stable.len() < self.cfg.t && self.eligible_count(k) > c.stable.len() {
                self.run_election(k);
            }
        }
    }

    /// Moves the clock without running elections.
    pub fn set_now(&mut self, now: f64) {
        if now > self.now {
            self.now = now;
        }
    }

    /// Election trigger for one node crossing the eligibility age.
    pub fn node_became_eligible(&mut self, node: NodeId, now: f64) {
        if now > self.now {
            self.now = now;
        }
        if !self.is_alive(node) {
            return;
        }
        let key = self.node(node).clique;
        if self.cliques[&key].stable.len() < self.cfg.t {
            self.run_election(key);
        }
    }

    /// Splits an overfull clique along a median cut. The half whose centroid
    /// is nearer the old centroid keeps the id (one more significant zero
    /// bit); the other half becomes the offspring with the bit set.
    pub fn split_clique(&mut self, key: u64) -> Result<(CliqueId, CliqueId), SubstrateError> {
        let c = self.cliques.get(&key).ok_or(SubstrateError::NoSuchClique(key))?;
        if c.len() < 2 {
            return Err(SubstrateError::TooSmallToSplit(c.id, c.len()));
        }
        let parent = c.id;
        let (Some(primary_id), Some(offspring_id)) = (parent.child(false), parent.child(true)) else {
            return Err(SubstrateError::MaxDepth(parent));
        };
        let old_centroid = c.centroid;
        let points: Vec<(NodeId, Point<T>)> = c.members.iter().map(|m| (*m, self.nodes[m.0 as usize].position)).collect();
        let (a, b) = median_split(&points).expect("at least two members");
        let ca = centroid(a.iter().map(|x| x.1)).expect("non-empty half");
        let cb = centroid(b.iter().map(|x| x.1)).expect("non-empty half");
        let da = distance(ca, old_centroid);
        let db = distance(cb, old_centroid);
        let a_primary = match da.partial_cmp(&db) {
            Some(std::cmp::Ordering::Less) => true,
            Some(std::cmp::Ordering::Greater) => false,
            _ => (ca.x, ca.y) <= (cb.x, cb.y),
        };
        let (prim, offs, pc, oc) = if a_primary { (a, b, ca, cb) } else { (b, a, cb, ca) };

        let old = self.cliques.remove(&key).expect("checked above");
        let mk = |members: &[(NodeId, Point<T>)], id: CliqueId, cen: Point<T>| Clique {
            id,
            members: members.iter().map(|m| m.0).collect(),
            stable: members.iter().map(|m| m.0).filter(|m| old.stable.contains(m)).collect(),
            centroid: cen,
            table: RoutingTable::default(),
        };
        let primary = mk(&prim, primary_id, pc);
        let offspring = mk(&offs, offspring_id, oc);
        for m in &offspring.members {
            self.nodes[m.0 as usize].clique = offspring_id.bits();
        }
        self.cliques.insert(primary_id.bits(), primary);
        self.cliques.insert(offspring_id.bits(), offspring);
        self.tables_dirty = true;
        self.notices.push(Notice::Split { parent, primary: primary_id, offspring: offspring_id });
        self.run_election(primary_id.bits());
        self.run_election(offspring_id.bits());
        Ok((primary_id, offspring_id))
    }

    /// Merges an underfull clique with its successor. The merging clique's id
    /// survives and its segment absorbs the successor's; the last clique in
    /// id order has no successor and is absorbed by its predecessor instead.
    /// A merged clique that ends up over `clique_max` is split again.
    pub fn merge_clique(&mut self, key: u64) -> Result<CliqueId, SubstrateError> {
        if !self.cliques.contains_key(&key) {
            return Err(SubstrateError::NoSuchClique(key));
        }
        if self.cliques.len() < 2 {
            return Err(SubstrateError::SingleClique);
        }
        let (merging, merged) = match self.successor(key) {
            Some(s) => (key, s),
            None => (self.predecessor(key).expect("two cliques exist"), key),
        };
        let gone = self.cliques.remove(&merged).expect("successor exists");
        let survivor = self.cliques.get_mut(&merging).expect("merging clique exists");
        let survivor_id = survivor.id;
        survivor.members.extend(gone.members.iter().copied());
        survivor.stable.extend(gone.stable.iter().copied());
        for m in &gone.members {
            self.nodes[m.0 as usize].clique = merging;
        }
        self.refresh_centroid(merging);
        self.tables_dirty = true;
        self.notices.push(Notice::Merge { merging: survivor_id, merged: gone.id, absorbed: gone.members.iter().copied().collect() });
        self.run_election(merging);
        if self.cliques[&merging].len() > self.cfg.clique_max {
            self.split_clique(merging)?;
        }
        Ok(survivor_id)
    }

    /// Makes a node unreachable at once while leaving it listed in its
    /// clique until `remove_node` runs.
    pub fn crash_node(&mut self, node: NodeId) -> Result<(), SubstrateError> {
        let n = self.nodes.get_mut(node.0 as usize).ok_or(SubstrateError::NoSuchNode(node))?;
        if !n.alive {
            return Err(SubstrateError::NotAlive(node));
        }
        n.alive = false;
        Ok(())
    }

    /// Removes a departed or crashed node. Stable departures trigger an
    /// election; an underfull clique merges with its successor.
    pub fn remove_node(&mut self, node: NodeId, crashed: bool) -> Result<(), SubstrateError> {
        let rec = self.try_node(node)?;
        if !rec.member {
            return Err(SubstrateError::NotAlive(node));
        }
        let key = rec.clique;
        let was_stable = rec.stable;
        {
            let n = &mut self.nodes[node.0 as usize];
            n.alive = false;
            n.member = false;
            n.stable = false;
        }
        let c = self.cliques.get_mut(&key).expect("node's clique exists");
        c.members.remove(&node);
        c.stable.remove(&node);
        self.notices.push(Notice::NodeGone { node, clique: key, crashed });
        if self.cliques[&key].members.is_empty() {
            // Only possible for the last clique standing or a degenerate config.
            if self.cliques.len() > 1 {
                let c = self.cliques.remove(&key).expect("exists");
                if key == 0 {
                    // Key 0 must stay live: the successor takes it over.
                    let s = *self.cliques.keys().next().expect("another clique");
                    let mut moved = self.cliques.remove(&s).expect("exists");
                    let old_id = moved.id;
                    moved.id = c.id;
                    for m in &moved.members {
                        self.nodes[m.0 as usize].clique = 0;
                    }
                    let absorbed = moved.members.iter().copied().collect();
                    self.cliques.insert(0, moved);
                    self.notices.push(Notice::Merge { merging: c.id, merged: old_id, absorbed });
                }
                self.tables_dirty = true;
            }
            return Ok(());
        }
        self.refresh_centroid(key);
        if was_stable {
            self.notices.push(Notice::StableChanged { clique: key });
            self.run_election(key);
        }
        self.scrub_entries(node);
        if self.cliques[&key].len() < self.cfg.clique_min && self.cliques.len() > 1 {
            self.merge_clique(key)?;
        }
        Ok(())
    }

    /// Live segments exactly tile the id space and each clique's prefix
    /// block lies inside its own segment.
    pub fn check_tiling(&self) -> Result<(), String> {
        let keys: Vec<u64> = self.cliques.keys().copied().collect();
        if keys.first() != Some(&0) {
            return Err("no clique owns id 0".into());
        }
        for (i, k) in keys.iter().enumerate() {
            let c = &self.cliques[k];
            if c.id.bits() != *k {
                return Err(format!("clique {} stored under key {k:#x}", c.id));
            }
            let end = keys.get(i + 1).map(|&n| u128::from(n)).unwrap_or(1u128 << ID_BITS);
            let (ps, pe) = c.id.prefix_block();
            if ps != *k || pe > end {
                return Err(format!("prefix block of {} escapes its segment", c.id));
            }
            if let Some(next) = keys.get(i + 1) {
                let nid = self.cliques[next].id;
                if c.id.is_prefix_of(&nid) || nid.is_prefix_of(&c.id) {
                    return Err(format!("ids {} and {} are prefix-related", c.id, nid));
                }
            }
        }
        Ok(())
    }

    /// Mean round-trip (twice the one-way distance) between the centroids of
    /// cliques that are neighbours in id order.
    pub fn mean_adjacent_rtt(&self) -> f64 {
        let cs: Vec<&Clique<T>> = self.cliques.values().collect();
        if cs.len() < 2 {
            return 0.0;
        }
        let total: f64 = cs.windows(2).map(|w| 2.0 * distance(w[0].centroid, w[1].centroid).as_f64()).sum();
        total / (cs.len() - 1) as f64
    }

    // ---------------------------------------------------------------- routing

    pub fn routing_tables_dirty(&self) -> bool {
        self.tables_dirty
    }

    pub fn ensure_routing_tables(&mut self) {
        if self.tables_dirty {
            self.rebuild_routing_tables();
        }
    }

    /// Recomputes every clique's table. Each (row, digit) block picks the
    /// clique with an id inside the block whose centroid is nearest to the
    /// owner; a block holding no id is covered by whichever clique owns its
    /// first id.
    pub fn rebuild_routing_tables(&mut self) {
        let b = self.cfg.b;
        let keys: Vec<u64> = self.cliques.keys().copied().collect();
        let mut tables = Vec::with_capacity(keys.len());
        for &x in &keys {
            let owner_centroid = self.cliques[&x].centroid;
            let mut table = RoutingTable::default();
            for row in 0..digit_count(b) {
                let own = digit(x, row, b);
                let width = b.min(ID_BITS - row * b);
                for d in 0..(1u64 << width) {
                    if d == own {
                        continue;
                    }
                    let (s, e) = digit_block(x, row + 1, d, b);
                    let target = self
                        .cliques
                        .range(s..=e)
                        .map(|(k, c)| (distance(c.centroid, owner_centroid), *k))
                        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)))
                        .map(|(_, k)| k)
                        .unwrap_or_else(|| self.owner_of_key(s));
                    if target == x {
                        continue;
                    }
                    let nodes = self.fill_entry_nodes(target);
                    table.entries.insert((row, d), RoutingEntry { target, nodes });
                }
                let (s, e) = digit_block(x, row + 1, own, b);
                let lone = s == x && self.cliques.range(s..=e).nth(1).is_none();
                if lone {
                    break;
                }
            }
            tables.push(table);
        }
        for (k, t) in keys.into_iter().zip(tables) {
            self.cliques.get_mut(&k).expect("exists").table = t;
        }
        self.tables_dirty = false;
    }

    fn fill_entry_nodes(&mut self, target: u64) -> Vec<NodeId> {
        let k = self.cfg.k;
        let c = &self.cliques[&target];
        let up = |m: &NodeId| self.nodes[m.0 as usize].alive;
        let mut nodes: Vec<NodeId> = c.stable.iter().copied().filter(up).take(k).collect();
        if nodes.len() < k {
            let mut rest: Vec<NodeId> = c.members.iter().copied().filter(|m| !c.stable.contains(m) && up(m)).collect();
            rest.shuffle(&mut self.entry_rng);
            nodes.extend(rest.into_iter().take(k - nodes.len()));
        }
        nodes
    }

    /// Re-populates one routing entry from the target clique's current
    /// membership: at most `k` live addresses, stable ones first.
    pub fn refresh_routing_entry(&mut self, clique: u64, row: u32, digit: u64) -> Result<RoutingEntry, SubstrateError> {
        let target = self
            .cliques
            .get(&clique)
            .ok_or(SubstrateError::NoSuchClique(clique))?
            .table
            .get(row, digit)
            .map(|e| e.target)
            .ok_or(SubstrateError::NoSuchClique(clique))?;
        if !self.cliques.contains_key(&target) {
            self.tables_dirty = true;
            return Err(SubstrateError::TargetVanished(target));
        }
        let nodes = self.fill_entry_nodes(target);
        let entry = RoutingEntry { target, nodes };
        self.cliques
            .get_mut(&clique)
            .expect("exists")
            .table
            .entries
            .insert((row, digit), entry.clone());
        Ok(entry)
    }

    fn refresh_entries_targeting(&mut self, target: u64) {
        if self.tables_dirty {
            return;
        }
        let slots: Vec<(u64, u32, u64)> = self
            .cliques
            .iter()
            .flat_map(|(k, c)| c.table.entries.iter().filter(|(_, e)| e.target == target).map(move |((r, d), _)| (*k, *r, *d)))
            .collect();
        for (k, r, d) in slots {
            let _ = self.refresh_routing_entry(k, r, d);
        }
    }

    fn scrub_entries(&mut self, node: NodeId) {
        if self.tables_dirty {
            return;
        }
        let slots: Vec<(u64, u32, u64)> = self
            .cliques
            .iter()
            .flat_map(|(k, c)| {
                c.table.entries.iter().filter(|(_, e)| e.nodes.contains(&node)).map(move |((r, d), _)| (*k, *r, *d))
            })
            .collect();
        for (k, r, d) in slots {
            let _ = self.refresh_routing_entry(k, r, d);
        }
    }

    fn nearest_stable(&self, key: u64, from: NodeId) -> Option<NodeId> {
        let c = &self.cliques[&key];
        let p = self.position(from);
        c.stable
            .iter()
            .copied()
            .filter(|s| self.is_alive(*s))
            .min_by(|a, b| {
                distance(self.position(*a), p)
                    .partial_cmp(&distance(self.position(*b), p))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(b))
            })
    }

    /// One forwarding decision at `at` for a message addressed to the clique
    /// owning `key` and optionally a specific node there.
    pub fn next_hop(&mut self, at: NodeId, key: u64, dest_node: Option<NodeId>, policy: RoutePolicy) -> Result<Step, SubstrateError> {
        if !self.is_alive(at) {
            return Err(SubstrateError::NotAlive(at));
        }
        self.ensure_routing_tables();
        let here = self.node(at).clique;
        let stable_here = self.node(at).stable;
        if self.owner_of_key(key) == here {
            return Ok(match dest_node {
                Some(n) if n != at => {
                    if self.is_alive(n) && self.node(n).clique == here {
                        Step::Intra(n)
                    } else {
                        return Err(SubstrateError::NoSuchNode(n));
                    }
                }
                Some(_) => Step::Arrived,
                None if stable_here || policy == RoutePolicy::AnyNode => Step::Arrived,
                None => match self.nearest_stable(here, at) {
                    Some(s) => Step::Intra(s),
                    None => Step::Arrived,
                },
            });
        }
        if policy == RoutePolicy::PreferStable && !stable_here {
            if let Some(s) = self.nearest_stable(here, at) {
                return Ok(Step::Intra(s));
            }
        }
        let b = self.cfg.b;
        let row = common_digits(here, key, b);
        let d = digit(key, row, b);
        let here_id = self.cliques[&here].id;
        let mut entry = match self.cliques[&here].table.get(row, d) {
            Some(e) => e.clone(),
            None => {
                self.rebuild_routing_tables();
                self.cliques[&here].table.get(row, d).cloned().ok_or(SubstrateError::Unreachable { at: here_id, target: key })?
            }
        };
        for attempt in 0..2 {
            let live: Vec<NodeId> = entry
                .nodes
                .iter()
                .copied()
                .filter(|n| self.is_alive(*n) && self.node(*n).clique == entry.target)
                .collect();
            let pick = match policy {
                RoutePolicy::PreferStable => live.iter().copied().find(|n| self.node(*n).stable).or_else(|| live.choose(&mut self.route_rng).copied()),
                RoutePolicy::AnyNode => live.choose(&mut self.route_rng).copied(),
            };
            if let Some(n) = pick {
                return Ok(Step::Inter(n));
            }
            if attempt == 0 {
                entry = match self.refresh_routing_entry(here, row, d) {
                    Ok(e) => e,
                    Err(SubstrateError::TargetVanished(_)) => {
                        self.rebuild_routing_tables();
                        self.cliques[&here].table.get(row, d).cloned().ok_or(SubstrateError::Unreachable { at: here_id, target: key })?
                    }
                    Err(e) => return Err(e),
                };
            }
        }
        Err(SubstrateError::Unreachable { at: here_id, target: entry.target })
    }

    /// Full route from `origin` to the clique `dest` (and to `dest_node`
    /// within it when given; otherwise to a stable node of it).
    pub fn route(&mut self, origin: NodeId, dest: CliqueId, dest_node: Option<NodeId>, policy: RoutePolicy) -> Result<Path<T>, SubstrateError> {
        if !self.cliques.get(&dest.bits()).is_some_and(|c| c.id == dest) {
            return Err(SubstrateError::MalformedDestination(dest));
        }
        self.route_to_key(origin, dest.bits(), dest_node, policy)
    }

    pub fn route_to_key(&mut self, origin: NodeId, key: u64, dest_node: Option<NodeId>, policy: RoutePolicy) -> Result<Path<T>, SubstrateError> {
        if !self.is_alive(origin) {
            return Err(SubstrateError::NotAlive(origin));
        }
        let mut hops = vec![Hop { node: origin, clique: self.clique_id_of(origin), kind: HopKind::Origin, length: T::zero() }];
        let limit = digit_count(self.cfg.b) as usize;
        let mut inter = 0usize;
        let mut at = origin;
        // Intra hops never repeat back-to-back more than twice per clique.
        for _ in 0..(3 * limit + 4) {
            let step = self.next_hop(at, key, dest_node, policy)?;
            let (next, kind) = match step {
                Step::Arrived => return Ok(Path { hops }),
                Step::Intra(n) => (n, HopKind::Intra),
                Step::Inter(n) => {
                    inter += 1;
                    if inter > limit {
                        return Err(SubstrateError::HopLimit(limit));
                    }
                    (n, HopKind::Inter)
                }
            };
            let length = distance(self.position(at), self.position(next));
            hops.push(Hop { node: next, clique: self.clique_id_of(next), kind, length });
            at = next;
        }
        Err(SubstrateError::HopLimit(limit))
    }
}

#[cfg(test)]
mod tests;
