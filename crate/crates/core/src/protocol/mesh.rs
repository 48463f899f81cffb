//! Intra-clique pull mesh: recipients swap buffer maps with partners and
//! request the segments they miss.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::{IteratorRandom, SliceRandom};

use crate::rng::{substream, SimRng};
use crate::substrate::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub partner_min: usize,
    /// Size of the random recipient subset handed to a joiner.
    pub join_subset: usize,
    pub exchange_interval: f64,
    /// Playback window length in segments.
    pub window: u64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { partner_min: 4, join_subset: 8, exchange_interval: 1.0, window: 16 }
    }
}

/// Buffer of one node for one channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamState {
    pub buffer: BTreeSet<u64>,
    pub partners: BTreeSet<NodeId>,
    /// First segment of the playback window.
    pub window_start: u64,
}

impl StreamState {
    /// Bitmap over the window: bit `i` set iff segment `window_start + i` is held.
    pub fn buffer_map(&self, window: u64) -> Vec<bool> {
        (0..window).map(|i| self.buffer.contains(&(self.window_start + i))).collect()
    }

    pub fn has(&self, seg: u64) -> bool {
        self.buffer.contains(&seg)
    }
}

/// One pull round: every segment of the window this node lacks is requested
/// from a partner picked uniformly among those advertising it. Segments no
/// partner holds are skipped until a later round.
pub fn pull_round(
    me: &StreamState,
    partner_maps: &BTreeMap<NodeId, &StreamState>,
    window: u64,
    newest: u64,
    rng: &mut SimRng,
) -> Vec<(u64, NodeId)> {
    let mut out = Vec::new();
    let hi = newest.min(me.window_start + window - 1);
    for seg in me.window_start..=hi {
        if me.has(seg) {
            continue;
        }
        let holders = partner_maps.iter().filter(|(p, s)| me.partners.contains(p) && s.has(seg)).map(|(p, _)| *p);
        if let Some(p) = holders.choose(rng) {
            out.push((seg, p));
        }
    }
    out
}

/// Single-clique mesh simulation in synchronous rounds. The relay receives
/// one new segment per round; requests issued in a round are served at the
/// start of the next.
pub struct MeshSim {
    pub cfg: MeshConfig,
    pub relay: NodeId,
    pub states: BTreeMap<NodeId, StreamState>,
    rng: SimRng,
    round: u64,
    /// Round at which each node first held each segment.
    arrivals: BTreeMap<(NodeId, u64), u64>,
}

impl MeshSim {
    pub fn new(cfg: MeshConfig, relay: NodeId, seed: u64) -> Self {
        let mut states = BTreeMap::new();
        states.insert(relay, StreamState::default());
        MeshSim { cfg, relay, states, rng: substream(seed, "partners"), round: 0, arrivals: BTreeMap::new() }
    }

    /// Adds a recipient, partnering it with a random subset of the current
    /// recipients (the relay included). Partnerships are symmetric.
    pub fn join(&mut self, node: NodeId) {
        let existing: Vec<NodeId> = self.states.keys().copied().collect();
        let subset: Vec<NodeId> = existing.choose_multiple(&mut self.rng, self.cfg.join_subset).copied().collect();
        let mut st = StreamState { window_start: self.round.saturating_sub(self.cfg.window - 1), ..Default::default() };
        for p in &subset {
            st.partners.insert(*p);
            self.states.get_mut(p).expect("existing").partners.insert(node);
        }
        self.states.insert(node, st);
    }

    /// Removes a recipient; partners that fall below the minimum ask the
    /// relay for fresh candidates.
    pub fn leave(&mut self, node: NodeId) {
        let Some(st) = self.states.remove(&node) else { return };
        for p in st.partners {
            if let Some(s) = self.states.get_mut(&p) {
                s.partners.remove(&node);
            }
        }
        let low: Vec<NodeId> =
            self.states.iter().filter(|(_, s)| s.partners.len() < self.cfg.partner_min).map(|(n, _)| *n).collect();
        for n in low {
            let candidates: Vec<NodeId> =
                self.states.keys().copied().filter(|c| *c != n && !self.states[&n].partners.contains(c)).collect();
            let need = self.cfg.partner_min - self.states[&n].partners.len();
            let fresh: Vec<NodeId> = candidates.choose_multiple(&mut self.rng, need).copied().collect();
            for f in fresh {
                self.states.get_mut(&n).expect("present").partners.insert(f);
                self.states.get_mut(&f).expect("present").partners.insert(n);
            }
        }
    }

    pub fn step(&mut self) {
        let seg = self.round;
        let window = self.cfg.window;
        let relay = self.relay;
        self.states.get_mut(&relay).expect("relay").buffer.insert(seg);
        self.arrivals.entry((relay, seg)).or_insert(self.round);
        let snapshot = self.states.clone();
        let refs: BTreeMap<NodeId, &StreamState> = snapshot.iter().map(|(n, s)| (*n, s)).collect();
        let mut deliveries = Vec::new();
        for (n, st) in &snapshot {
            if *n == relay {
                continue;
            }
            for (s, _) in pull_round(st, &refs, window, seg, &mut self.rng) {
                deliveries.push((*n, s));
            }
        }
        self.round += 1;
        for (n, s) in deliveries {
            self.states.get_mut(&n).expect("present").buffer.insert(s);
            self.arrivals.entry((n, s)).or_insert(self.round);
        }
        let start = self.round.saturating_sub(window - 1);
        for st in self.states.values_mut() {
            st.window_start = start;
            st.buffer.retain(|s| *s >= start);
        }
    }

    pub fn run(&mut self, rounds: u64) {
        for _ in 0..rounds {
            self.step();
        }
    }

    /// Worst delay, in time units, between a segment reaching the relay and
    /// reaching `node`, over segments `from..to`.
    pub fn max_lag(&self, node: NodeId, from: u64, to: u64) -> Option<f64> {
        let mut worst = 0u64;
        for s in from..to {
            let at = self.arrivals.get(&(node, s))?;
            let base = self.arrivals.get(&(self.relay, s))?;
            worst = worst.max(at - base);
        }
        Some(worst as f64 * self.cfg.exchange_interval)
    }

    /// Partnership-graph eccentricity of the relay, by BFS.
    pub fn relay_eccentricity(&self) -> usize {
        let mut dist: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut q = VecDeque::from([self.relay]);
        dist.insert(self.relay, 0);
        while let Some(n) = q.pop_front() {
            for p in &self.states[&n].partners {
                if !dist.contains_key(p) {
                    dist.insert(*p, dist[&n] + 1);
                    q.push_back(*p);
                }
            }
        }
        if dist.len() < self.states.len() {
            return usize::MAX;
        }
        dist.values().copied().max().unwrap_or(0)
    }

    /// Diameter of the partnership graph, by BFS from every node.
    pub fn diameter(&self) -> usize {
        let mut worst = 0;
        for &src in self.states.keys() {
            let mut dist: BTreeMap<NodeId, usize> = BTreeMap::from([(src, 0)]);
            let mut q = VecDeque::from([src]);
            while let Some(n) = q.pop_front() {
                for p in &self.states[&n].partners {
                    if !dist.contains_key(p) {
                        dist.insert(*p, dist[&n] + 1);
                        q.push_back(*p);
                    }
                }
            }
            if dist.len() < self.states.len() {
                return usize::MAX;
            }
            worst = worst.max(dist.values().copied().max().unwrap_or(0));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_recipient_requests_all_missing() {
        let relay = StreamState { buffer: (1..=10).collect(), partners: BTreeSet::new(), window_start: 1 };
        let me = StreamState { buffer: BTreeSet::new(), partners: BTreeSet::from([NodeId(0)]), window_start: 1 };
        let maps = BTreeMap::from([(NodeId(0), &relay)]);
        let mut r = substream(1, "t");
        let reqs = pull_round(&me, &maps, 4, 10, &mut r);
        assert_eq!(reqs.len(), 4);
        assert!(reqs.iter().all(|(_, p)| *p == NodeId(0)));
    }

    #[test]
    fn unavailable_segment_not_requested() {
        let a = StreamState { buffer: BTreeSet::from([1, 3]), ..Default::default() };
        let me = StreamState { partners: BTreeSet::from([NodeId(5)]), window_start: 1, ..Default::default() };
        let maps = BTreeMap::from([(NodeId(5), &a)]);
        let mut r = substream(1, "t");
        let segs: Vec<u64> = pull_round(&me, &maps, 4, 4, &mut r).into_iter().map(|x| x.0).collect();
        assert_eq!(segs, vec![1, 3]);
    }

    #[test]
    fn buffer_map_bits() {
        let s = StreamState { buffer: BTreeSet::from([5, 7]), window_start: 5, ..Default::default() };
        assert_eq!(s.buffer_map(4), vec![true, false, true, false]);
    }

    #[test]
    fn steady_state_lag_bounded_by_mesh_diameter() {
        let mut m = MeshSim::new(MeshConfig::default(), NodeId(0), 7);
        for i in 1..64 {
            m.join(NodeId(i));
        }
        let diam = m.diameter();
        assert!(diam < 16, "diameter {diam}");
        m.run(100);
        for i in 1..64 {
            let lag = m.max_lag(NodeId(i), 40, 90).unwrap();
            assert!(lag <= diam as f64 * m.cfg.exchange_interval, "node {i} lag {lag} diameter {diam}");
        }
    }

    #[test]
    fn leave_refreshes_partners() {
        let mut m = MeshSim::new(MeshConfig::default(), NodeId(0), 3);
        for i in 1..20 {
            m.join(NodeId(i));
        }
        for i in 1..10 {
            m.leave(NodeId(i));
        }
        for (n, s) in &m.states {
            assert!(s.partners.len() >= 4, "{n} has {}", s.partners.len());
            assert!(s.partners.iter().all(|p| m.states.contains_key(p)));
        }
    }
}
