//! Comparison trees built over the same member list and join order as a
//! streaming run: a random tree, a fan-out-capped minimum-depth tree and an
//! online nearest-neighbour tree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{distance, Point};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tree::SpanningTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Random,
    OptimalStretch,
    OptimalLoad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpec<T> {
    pub kind: TreeKind,
    pub fanout_cap: Option<usize>,
    /// Join order; the first entry is the source and becomes the root.
    pub members: Vec<(u32, Point<T>)>,
}

impl<T: Scalar> TreeSpec<T> {
    pub fn build(&self, seed: u64) -> SpanningTree<T> {
        match self.kind {
            TreeKind::Random => match self.fanout_cap {
                Some(cap) => build_random_tree_capped(&self.members, seed, cap),
                None => build_random_tree(&self.members, seed),
            },
            TreeKind::OptimalStretch => build_optimal_stretch_tree(&self.members, self.fanout_cap.unwrap_or(usize::MAX)),
            TreeKind::OptimalLoad => build_optimal_load_tree(&self.members),
        }
    }
}

fn root_of<T: Scalar>(members: &[(u32, Point<T>)]) -> SpanningTree<T> {
    let (id, pos) = members.first().copied().expect("tree needs at least one member");
    SpanningTree::with_root(id, pos)
}

/// Each joiner picks a uniformly random parent among the nodes already in the tree.
pub fn build_random_tree<T: Scalar>(members: &[(u32, Point<T>)], seed: u64) -> SpanningTree<T> {
    let mut rng = substream(seed, "random-tree");
    let mut tree = root_of(members);
    for (i, &(id, pos)) in members.iter().enumerate().skip(1) {
        let parent = rng.gen_range(0..i);
        tree.push(id, pos, parent);
    }
    tree
}

/// Random-parent tree restricted to parents with spare fan-out.
pub fn build_random_tree_capped<T: Scalar>(members: &[(u32, Point<T>)], seed: u64, cap: usize) -> SpanningTree<T> {
    assert!(cap >= 1, "fan-out cap must be at least 1");
    let mut rng = substream(seed, "random-tree-capped");
    let mut tree = root_of(members);
    let mut open: Vec<usize> = vec![0];
    let mut children = vec![0usize];
    for &(id, pos) in members.iter().skip(1) {
        let slot = rng.gen_range(0..open.len());
        let parent = open[slot];
        let me = tree.push(id, pos, parent);
        children[parent] += 1;
        children.push(0);
        if children[parent] >= cap {
            open.swap_remove(slot);
        }
        open.push(me);
    }
    tree
}

/// Attaches every joiner as close to the root (in hops) as the fan-out cap
/// allows; among open nodes at that depth the geometrically nearest wins,
/// then the smaller identifier.
pub fn build_optimal_stretch_tree<T: Scalar>(members: &[(u32, Point<T>)], fanout_cap: usize) -> SpanningTree<T> {
    assert!(fanout_cap >= 1, "fan-out cap must be at least 1");
    let mut tree = root_of(members);
    let mut depth = vec![0usize];
    let mut children = vec![0usize];
    for &(id, pos) in members.iter().skip(1) {
        let parent = (0..tree.len())
            .filter(|&i| children[i] < fanout_cap)
            .min_by(|&a, &b| {
                depth[a]
                    .cmp(&depth[b])
                    .then_with(|| {
                        distance(tree.positions[a], pos)
                            .partial_cmp(&distance(tree.positions[b], pos))
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .then(tree.ids[a].cmp(&tree.ids[b]))
            })
            .expect("an open slot always exists in a growing capped tree");
        tree.push(id, pos, parent);
        children[parent] += 1;
        children.push(0);
        depth.push(depth[parent] + 1);
    }
    tree
}

/// Online nearest-neighbour attachment: each joiner connects to the closest
/// node already in the tree, ties by identifier. No later re-parenting.
pub fn build_optimal_load_tree<T: Scalar>(members: &[(u32, Point<T>)]) -> SpanningTree<T> {
    let mut tree = root_of(members);
    for &(id, pos) in members.iter().skip(1) {
        let parent = (0..tree.len())
            .min_by(|&a, &b| {
                distance(tree.positions[a], pos)
                    .partial_cmp(&distance(tree.positions[b], pos))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(tree.ids[a].cmp(&tree.ids[b]))
            })
            .expect("tree is never empty");
        tree.push(id, pos, parent);
    }
    tree
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{place_nodes, PlaneConfig};

    fn members(n: usize, seed: u64) -> Vec<(u32, Point<f64>)> {
        let cfg = PlaneConfig { plane_side: 3500.0, node_count: n, rng_seed: seed };
        place_nodes(&cfg).unwrap().into_iter().enumerate().map(|(i, p)| (i as u32, p)).collect()
    }

    #[test]
    fn random_tree_basics() {
        let two = members(2, 1);
        let t = build_random_tree(&two, 9);
        assert_eq!(t.parent, vec![None, Some(0)]);

        let m = members(300, 2);
        let t = build_random_tree(&m, 4);
        assert!(t.is_spanning_tree());
        assert_eq!(t.edges().len(), 299);
        assert_eq!(t, build_random_tree(&m, 4));
        assert_ne!(t, build_random_tree(&m, 5));
    }

    #[test]
    fn capped_random_respects_cap() {
        let m = members(500, 3);
        let t = build_random_tree_capped(&m, 1, 4);
        assert!(t.is_spanning_tree());
        assert!(t.max_fanout() <= 4);
    }

    #[test]
    fn optimal_stretch_fills_by_level() {
        let m = members(6, 4);
        let t = build_optimal_stretch_tree(&m, 4);
        let depths: Vec<usize> = (0..6).map(|i| t.depth(i)).collect();
        assert_eq!(depths.iter().filter(|&&d| d == 1).count(), 4);
        assert_eq!(depths.iter().filter(|&&d| d == 2).count(), 1);
    }

    #[test]
    fn optimal_stretch_depth_bound_and_cap() {
        let m = members(1000, 5);
        let t = build_optimal_stretch_tree(&m, 4);
        assert!(t.is_spanning_tree());
        assert!(t.max_fanout() <= 4);
        for i in 1..t.len() {
            let bound = ((i as f64).ln() / 4f64.ln()).ceil() as usize + 1;
            assert!(t.depth(i) <= bound, "node {i} depth {} > {bound}", t.depth(i));
        }
    }

    #[test]
    fn co_located_members_have_zero_length_edges() {
        let m: Vec<(u32, Point<f64>)> = (0..20).map(|i| (i, Point::new(7.0, 7.0))).collect();
        let t = build_optimal_stretch_tree(&m, 4);
        assert_eq!(t.total_length(), 0.0);
    }

    #[test]
    fn nearest_chain_on_a_line() {
        let m = vec![(0, Point::new(0.0, 0.0)), (1, Point::new(10.0, 0.0)), (2, Point::new(20.0, 0.0))];
        let t = build_optimal_load_tree(&m);
        assert_eq!(t.parent, vec![None, Some(0), Some(1)]);
        assert_eq!(t.total_length(), 20.0);
    }

    #[test]
    fn optimal_load_matches_brute_force_nearest() {
        let m = members(1000, 6);
        let t = build_optimal_load_tree(&m);
        for i in 1..m.len() {
            let mut best = 0;
            for j in 0..i {
                let dj = distance(m[j].1, m[i].1);
                let db = distance(m[best].1, m[i].1);
                if dj < db || (dj == db && m[j].0 < m[best].0) {
                    best = j;
                }
            }
            assert_eq!(t.parent[i], Some(best));
        }
    }

    #[test]
    fn optimal_load_is_shorter_than_random() {
        for seed in 0..5 {
            let m = members(400, 10 + seed);
            let opt = build_optimal_load_tree(&m).total_length();
            let rnd = build_random_tree(&m, seed).total_length();
            assert!(opt <= rnd);
        }
    }

    #[test]
    fn spec_dispatch_and_f32() {
        let m: Vec<(u32, Point<f32>)> = members(50, 8).into_iter().map(|(i, p)| (i, p.cast())).collect();
        for kind in [TreeKind::Random, TreeKind::OptimalStretch, TreeKind::OptimalLoad] {
            let spec = TreeSpec { kind, fanout_cap: Some(4), members: m.clone() };
            assert!(spec.build(1).is_spanning_tree());
        }
    }
}
