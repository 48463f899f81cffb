use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{pick_nodes, settle, ExperimentError, Setup};
use crate::baselines::{build_optimal_load_tree, build_optimal_stretch_tree, build_random_tree};
use crate::geometry::Point;
use crate::metrics::{mean, stretch, MetricKind, MetricSample};
use crate::rng::substream;
use crate::substrate::{NodeId, RoutePolicy};
use crate::tree::SpanningTree;
use crate::Overlay;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub group_sizes: Vec<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { group_sizes: vec![100, 500, 1000, 2000] }
    }
}

/// Everything measured for one group size on one overlay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeRun {
    pub group_size: usize,
    pub stretch_cliquestream: f64,
    pub stretch_random: f64,
    pub stretch_optimal: f64,
    pub load_cliquestream: f64,
    pub load_random: f64,
    pub load_optimal: f64,
    /// Per-recipient routes without stable relays.
    pub load_no_stable: f64,
    pub relay_count: usize,
    pub relay_cliques: usize,
    pub inter_clique_edges: usize,
    /// Most inter-clique links on any source-to-member path.
    pub max_path_hops: usize,
    pub unreached: usize,
    #[serde(skip)]
    pub tree: SpanningTree<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeResult {
    pub runs: Vec<TreeRun>,
    pub digest: String,
}

impl TreeRun {
    pub fn clique_links_form_tree(&self) -> bool {
        self.relay_cliques >= 1 && self.inter_clique_edges == self.relay_cliques - 1
    }
}

impl TreeResult {
    pub fn stretch_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        self.samples(tag, seed, MetricKind::Stretch, |r| {
            vec![("cliquestream", r.stretch_cliquestream), ("random", r.stretch_random), ("optimal_stretch", r.stretch_optimal)]
        })
    }

    pub fn load_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        let mut v = self.samples(tag, seed, MetricKind::NetworkLoadPerMember, |r| {
            vec![("cliquestream", r.load_cliquestream), ("random", r.load_random), ("optimal_load", r.load_optimal)]
        });
        v.extend(self.samples(tag, seed, MetricKind::RelayCount, |r| vec![("cliquestream", r.relay_count as f64)]));
        v
    }

    pub fn stable_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        self.samples(tag, seed, MetricKind::NetworkLoadPerMember, |r| {
            vec![("stable", r.load_cliquestream), ("no_stable", r.load_no_stable)]
        })
    }

    fn samples(&self, tag: &str, seed: u64, metric: MetricKind, f: impl Fn(&TreeRun) -> Vec<(&'static str, f64)>) -> Vec<MetricSample> {
        let mut out = Vec::new();
        for r in &self.runs {
            for (variant, value) in f(r) {
                out.push(MetricSample { scenario_tag: format!("{tag}:{variant}"), metric, group_size: r.group_size, value, seed });
            }
        }
        out
    }
}

fn mean_stretch(t: &SpanningTree<f64>, members: &BTreeSet<u32>) -> f64 {
    let root = t.positions[0];
    let xs: Vec<f64> = (1..t.len())
        .filter(|&i| members.contains(&t.ids[i]))
        .filter_map(|i| stretch(t.root_path_length(i), root, t.positions[i]))
        .collect();
    mean(&xs)
}

/// Builds one channel per group size on a copy of `sub`, lets the joins
/// settle and compares the delivery tree against the baselines on the same
/// members and join order.
pub fn run_trees(setup: &Setup, sub: &Overlay, p: &TreeParams, seed: u64) -> Result<TreeResult, ExperimentError> {
    let mut runs = Vec::new();
    let mut digests = Vec::new();
    for &g in &p.group_sizes {
        let tag = format!("trees/{g}");
        let mut rng = substream(seed, &tag);
        let src = pick_nodes(sub, 1, &[], &mut rng)[0];
        let members = pick_nodes(sub, g, &[src], &mut rng);
        let mut w = setup.world(sub.clone(), seed)?;
        let ch = w.register_channel("trees", src)?;
        for &m in &members {
            match w.join_channel(m, ch) {
                Ok(()) | Err(crate::protocol::ProtocolError::NoStableNode(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if !settle(&mut w, &tag)? {
            return Err(ExperimentError::Setup(format!("{tag}: joins did not settle")));
        }
        digests.push(w.digest());

        let tree = w.delivery_tree(ch);
        let member_ids: BTreeSet<u32> = members.iter().map(|m| m.0).collect();
        let reached = tree.ids.iter().filter(|i| member_ids.contains(i)).count();
        let key_of: BTreeMap<u32, u64> = tree.ids.iter().map(|&i| (i, w.clique_key(NodeId(i)))).collect();
        let cross = |c: usize| tree.parent[c].is_some_and(|p| key_of[&tree.ids[p]] != key_of[&tree.ids[c]]);
        let inter_clique_edges = (1..tree.len()).filter(|&c| cross(c)).count();
        let heads = w.heads(ch);
        let relay_cliques: BTreeSet<u64> = heads.iter().map(|h| w.clique_key(*h)).collect();
        let mut max_path_hops = 0;
        for i in 1..tree.len() {
            let (mut c, mut hops) = (i, 0);
            while let Some(p) = tree.parent[c] {
                hops += usize::from(cross(c));
                c = p;
            }
            max_path_hops = max_path_hops.max(hops);
        }

        let order: Vec<(u32, Point<f64>)> = std::iter::once(src).chain(members.iter().copied()).map(|n| (n.0, w.pos(n))).collect();
        let cap = w.sub.config().fanout();
        let random = build_random_tree(&order, seed);
        let optimal_stretch = build_optimal_stretch_tree(&order, cap);
        let optimal_load = build_optimal_load_tree(&order);

        let mut plain = sub.clone();
        let mut no_stable = 0.0;
        for &m in &members {
            no_stable += plain.route(src, plain.clique_id_of(m), Some(m), RoutePolicy::AnyNode)?.length();
        }

        let n = g as f64;
        runs.push(TreeRun {
            group_size: g,
            stretch_cliquestream: mean_stretch(&tree, &member_ids),
            stretch_random: mean_stretch(&random, &member_ids),
            stretch_optimal: mean_stretch(&optimal_stretch, &member_ids),
            load_cliquestream: tree.total_length() / n,
            load_random: random.total_length() / n,
            load_optimal: optimal_load.total_length() / n,
            load_no_stable: no_stable / n,
            relay_count: heads.len(),
            relay_cliques: relay_cliques.len(),
            inter_clique_edges,
            max_path_hops,
            unreached: members.len() - reached,
            tree,
        });
    }
    Ok(TreeResult { runs, digest: super::combine_digests(&digests) })
}
