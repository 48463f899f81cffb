use super::*;
use crate::geometry::{place_nodes, PlaneConfig};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn pts(n: usize, seed: u64) -> Vec<Point<f64>> {
    place_nodes(&PlaneConfig { plane_side: 3500.0, node_count: n, rng_seed: seed }).unwrap()
}

fn small_cfg() -> SubstrateConfig {
    SubstrateConfig { clique_min: 4, clique_max: 8, ..SubstrateConfig::default() }
}

#[test]
fn single_node_bootstrap() {
    let s = Substrate::bootstrap(SubstrateConfig::default(), &[Point::new(1.0, 1.0)], 1).unwrap();
    assert_eq!(s.clique_count(), 1);
    let c = s.cliques().next().unwrap();
    assert_eq!(c.id, CliqueId::ROOT);
    assert!(s.is_stable(NodeId(0)));
    s.check_tiling().unwrap();
}

#[test]
fn empty_bootstrap_rejected() {
    let r = Substrate::<f64>::bootstrap(SubstrateConfig::default(), &[], 1);
    assert_eq!(r.err(), Some(SubstrateError::EmptyPlacement));
}

#[test]
fn bad_configs_rejected() {
    for cfg in [
        SubstrateConfig { b: 0, ..Default::default() },
        SubstrateConfig { b: 9, ..Default::default() },
        SubstrateConfig { k: 0, ..Default::default() },
        SubstrateConfig { t: 1, ..Default::default() },
        SubstrateConfig { clique_min: 64, clique_max: 64, ..Default::default() },
        SubstrateConfig { clique_min: 40, clique_max: 70, ..Default::default() },
    ] {
        assert!(matches!(Substrate::<f64>::new(cfg, 1), Err(SubstrateError::InvalidConfig(_))));
    }
}

#[test]
fn colocated_overflow_splits_once() {
    let p = vec![Point::new(5.0, 5.0); 129];
    let s = Substrate::bootstrap(SubstrateConfig::default(), &p, 2).unwrap();
    assert_eq!(s.clique_count(), 2);
    for c in s.cliques() {
        assert!((32..=128).contains(&c.len()), "size {}", c.len());
    }
    s.check_tiling().unwrap();
}

#[test]
fn fifty_thousand_nodes_sizes_in_bounds() {
    let s = Substrate::bootstrap(SubstrateConfig::default(), &pts(50_000, 3), 3).unwrap();
    for c in s.cliques() {
        assert!((32..=128).contains(&c.len()), "clique {} has {}", c.id, c.len());
    }
    s.check_tiling().unwrap();
    let total: usize = s.cliques().map(|c| c.len()).sum();
    assert_eq!(total, 50_000);
}

#[test]
fn join_at_centroid_lands_there() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(2000, 4), 4).unwrap();
    let (key, cen) = s.cliques().nth(3).map(|c| (c.key(), c.centroid)).unwrap();
    let size = s.clique(key).unwrap().len();
    let (_, cid) = s.join_node(cen, 60.0, 10.0).unwrap();
    if size < 128 {
        assert_eq!(cid.bits(), key);
    }
}

#[test]
fn join_rejects_nan() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(10, 4), 4).unwrap();
    assert!(matches!(s.join_node(Point::new(f64::NAN, 0.0), 1.0, 1.0), Err(SubstrateError::MalformedPosition(..))));
}

#[test]
fn sequential_joins_match_brute_force_nearest() {
    let p = pts(10_000, 5);
    let mut s = Substrate::<f64>::new(SubstrateConfig::default(), 5).unwrap();
    for (i, &q) in p.iter().enumerate() {
        let expected = if s.clique_count() == 0 {
            None
        } else {
            // Independent scan: smallest (distance, key) pair.
            let mut best = (f64::INFINITY, u64::MAX);
            for c in s.cliques() {
                let d: f64 = ((c.centroid.x - q.x).powi(2) + (c.centroid.y - q.y).powi(2)).sqrt();
                if d < best.0 || (d == best.0 && c.key() < best.1) {
                    best = (d, c.key());
                }
            }
            Some(best.1)
        };
        let before = s.clique_count();
        let offspring = expected.and_then(|k| s.clique(k).unwrap().id.child(true)).map(|c| c.bits());
        let (id, _) = s.join_node(q, 0.0, 1.0).unwrap();
        assert_eq!(id.0 as usize, i);
        if let Some(k) = expected {
            let now_in = s.node(id).clique;
            if s.clique_count() == before {
                assert_eq!(now_in, k);
            } else {
                assert!(now_in == k || Some(now_in) == offspring);
            }
        }
    }
    s.check_tiling().unwrap();
}

#[test]
fn split_children_and_segments() {
    let p = pts(16, 6);
    let mut s = Substrate::new(small_cfg(), 6).unwrap();
    for &q in &p[..8] {
        s.join_node(q, 0.0, 1.0).unwrap();
    }
    assert_eq!(s.clique_count(), 1);
    let (a, b) = s.split_clique(0).unwrap();
    assert_eq!(a.to_string(), "0");
    assert_eq!(b.to_string(), "1");
    assert_eq!(s.clique(a.bits()).unwrap().len(), 4);
    assert_eq!(s.clique(b.bits()).unwrap().len(), 4);
    let (s0, e0) = s.segment(a.bits());
    let (s1, e1) = s.segment(b.bits());
    assert_eq!(s0, 0);
    assert_eq!(e0, u128::from(s1));
    assert_eq!(e1, 1u128 << 64);
    s.check_tiling().unwrap();
    let notices = s.take_notices();
    assert!(notices.iter().any(|n| matches!(n, Notice::Split { .. })));
}

#[test]
fn split_keeps_stable_status() {
    let p = pts(8, 7);
    let mut s = Substrate::new(small_cfg(), 7).unwrap();
    for &q in &p {
        s.join_node(q, 0.0, 1.0).unwrap();
    }
    s.advance_clock(100.0);
    let before: BTreeSet<NodeId> = s.clique(0).unwrap().stable.clone();
    assert_eq!(before.len(), 2);
    s.split_clique(0).unwrap();
    for n in &before {
        assert!(s.is_stable(*n));
    }
    for c in s.cliques() {
        assert!(c.stable.len() >= 2);
    }
}

#[test]
fn merge_two_cliques() {
    let p = pts(8, 8);
    let mut s = Substrate::new(small_cfg(), 8).unwrap();
    for &q in &p {
        s.join_node(q, 0.0, 1.0).unwrap();
    }
    let (a, b) = s.split_clique(0).unwrap();
    let survivor = s.merge_clique(b.bits()).unwrap();
    // The offspring is last in id order, so its predecessor absorbs it.
    assert_eq!(survivor, a);
    assert_eq!(s.clique_count(), 1);
    assert_eq!(s.clique(a.bits()).unwrap().len(), 8);
    s.check_tiling().unwrap();

    let (a, b) = s.split_clique(0).unwrap();
    let survivor = s.merge_clique(a.bits()).unwrap();
    assert_eq!(survivor, a);
    assert!(s.take_notices().iter().any(|n| matches!(n, Notice::Merge { merging, merged, .. } if *merging == a && *merged == b)));
}

#[test]
fn merge_overflow_resplits() {
    let p = pts(2000, 9);
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &p, 9).unwrap();
    let key = s.cliques().nth(2).unwrap().key();
    s.merge_clique(key).unwrap();
    for c in s.cliques() {
        assert!(c.len() <= 128);
    }
    s.check_tiling().unwrap();
}

#[test]
fn merge_single_clique_rejected() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(3, 1), 1).unwrap();
    assert_eq!(s.merge_clique(0), Err(SubstrateError::SingleClique));
}

#[test]
fn removals_trigger_merge_and_keep_tiling() {
    let p = pts(3000, 10);
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &p, 10).unwrap();
    for i in (0..3000).step_by(2) {
        s.remove_node(NodeId(i), i % 4 == 0).unwrap();
        s.check_tiling().unwrap();
    }
    for c in s.cliques() {
        assert!(c.len() <= 128);
        if s.clique_count() > 1 {
            assert!(c.len() >= 32, "clique {} has {}", c.id, c.len());
        }
    }
    assert_eq!(s.remove_node(NodeId(0), false), Err(SubstrateError::NotAlive(NodeId(0))));
}

#[test]
fn election_top_by_bandwidth() {
    let mut s = Substrate::new(SubstrateConfig::default(), 1).unwrap();
    for bw in [0.0, 10.0, 20.0, 30.0, 40.0, 50.0] {
        s.join_node(Point::new(1.0, 1.0), 0.0, bw).unwrap();
    }
    let got = s.elect_stable_nodes(0, 100.0);
    assert_eq!(got.len(), 2);
    assert_eq!(s.node(got[0]).uplink, 50.0);
    assert_eq!(s.node(got[1]).uplink, 40.0);
}

#[test]
fn election_gated_by_age() {
    let mut s = Substrate::new(SubstrateConfig::default(), 1).unwrap();
    s.join_node(Point::new(0.0, 0.0), 0.0, 1.0).unwrap();
    for _ in 0..4 {
        s.join_node(Point::new(0.0, 0.0), 10.0, 5.0).unwrap();
    }
    // Only the bootstrap node qualifies before age 50.
    assert_eq!(s.elect_stable_nodes(0, 20.0), vec![NodeId(0)]);
    assert_eq!(s.clique(0).unwrap().stable.len(), 1);
}

#[test]
fn election_ties_by_id() {
    let mut s = Substrate::new(SubstrateConfig { t: 3, ..Default::default() }, 1).unwrap();
    for _ in 0..6 {
        s.join_node(Point::new(0.0, 0.0), 0.0, 7.0).unwrap();
    }
    let mut oracle: Vec<NodeId> = (0..6).map(NodeId).collect();
    oracle.sort();
    assert_eq!(s.elect_stable_nodes(0, 100.0), oracle[..3].to_vec());
}

#[test]
fn stable_count_after_elections() {
    let s = Substrate::bootstrap(SubstrateConfig::default(), &pts(5000, 11), 11).unwrap();
    for c in s.cliques() {
        assert_eq!(c.stable.len(), 2.min(c.len()));
    }
}

#[test]
fn route_to_own_clique_has_no_inter_hops() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(3000, 12), 12).unwrap();
    let n = NodeId(17);
    let c = s.clique_id_of(n);
    let path = s.route(n, c, None, RoutePolicy::PreferStable).unwrap();
    assert_eq!(path.inter_clique_hops(), 0);
    assert!(s.is_stable(path.last()));
}

#[test]
fn balanced_1024_cliques_within_five_hops() {
    let p = pts(1024 * 40, 13);
    let mut s = Substrate::balanced(SubstrateConfig::default(), &p, 10, 13).unwrap();
    assert_eq!(s.clique_count(), 1024);
    s.check_tiling().unwrap();
    let ids: Vec<CliqueId> = s.cliques().map(|c| c.id).collect();
    let mut r = substream(13, "test-pairs");
    for _ in 0..2000 {
        let src = NodeId(r.gen_range(0..p.len() as u32));
        let dst = ids[r.gen_range(0..ids.len())];
        let path = s.route(src, dst, None, RoutePolicy::PreferStable).unwrap();
        assert!(path.inter_clique_hops() <= 5, "{} hops", path.inter_clique_hops());
        assert_eq!(s.node(path.last()).clique, dst.bits());
    }
}

#[test]
fn prefix_match_strictly_grows_per_hop() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(8000, 14), 14).unwrap();
    let ids: Vec<CliqueId> = s.cliques().map(|c| c.id).collect();
    let mut r = substream(14, "test-pairs");
    for _ in 0..100 {
        let src = NodeId(r.gen_range(0..8000));
        let dst = ids[r.gen_range(0..ids.len())];
        let path = s.route(src, dst, None, RoutePolicy::PreferStable).unwrap();
        let mut last = None;
        for h in &path.hops {
            if h.kind == HopKind::Inter || h.kind == HopKind::Origin {
                let m = (h.clique.bits() ^ dst.bits()).leading_zeros() / 2;
                if let Some(prev) = last {
                    assert!(m > prev || h.clique == dst, "{m} after {prev}");
                }
                last = Some(m);
            }
        }
        assert!(path.inter_clique_hops() <= 32);
        assert_eq!(path.hops.last().unwrap().clique, dst);
    }
}

#[test]
fn route_to_specific_node() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(4000, 15), 15).unwrap();
    let target = NodeId(3999);
    let path = s.route(NodeId(5), s.clique_id_of(target), Some(target), RoutePolicy::PreferStable).unwrap();
    assert_eq!(path.last(), target);
}

#[test]
fn malformed_destination_distinct_from_unreachable() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(1000, 16), 16).unwrap();
    let bogus = CliqueId::new(0, 40);
    assert!(matches!(s.route(NodeId(1), bogus, None, RoutePolicy::PreferStable), Err(SubstrateError::MalformedDestination(_))));
}

#[test]
fn route_prefers_stable_targets() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(6000, 17), 17).unwrap();
    let ids: Vec<CliqueId> = s.cliques().map(|c| c.id).collect();
    for (i, d) in ids.iter().enumerate().take(50) {
        let path = s.route(NodeId(i as u32 * 7), *d, None, RoutePolicy::PreferStable).unwrap();
        for h in path.hops.iter().filter(|h| h.kind == HopKind::Inter) {
            assert!(s.is_stable(h.node));
        }
    }
}

#[test]
fn routes_deterministic() {
    let run = || {
        let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(3000, 18), 18).unwrap();
        let ids: Vec<CliqueId> = s.cliques().map(|c| c.id).collect();
        (0..40)
            .map(|i| s.route(NodeId(i * 13), ids[i as usize % ids.len()], None, RoutePolicy::AnyNode).unwrap().nodes())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn table_entries_share_prefix_and_list_target_members() {
    let s = Substrate::bootstrap(SubstrateConfig::default(), &pts(6000, 19), 19).unwrap();
    for c in s.cliques() {
        for ((row, d), e) in &c.table.entries {
            let t = s.clique(e.target).unwrap();
            // Either the target's id lies in the entry's block, or the block
            // holds no id and the target's segment covers it.
            let (lo, hi) = id::digit_block(c.key(), row + 1, *d, 2);
            if (lo..=hi).contains(&t.key()) {
                assert_eq!(id::common_digits(c.key(), t.key(), 2), *row);
                assert_eq!(id::digit(t.key(), *row, 2), *d);
            } else {
                assert!(s.cliques().all(|x| !(lo..=hi).contains(&x.key())));
                let (ss, se) = s.segment(t.key());
                assert!(ss <= lo && u128::from(hi) < se);
            }
            assert!(e.nodes.len() <= 4);
            for n in &e.nodes {
                assert_eq!(s.node(*n).clique, e.target);
            }
            if !t.stable.is_empty() {
                assert!(e.nodes.iter().any(|n| s.is_stable(*n)));
            }
        }
    }
}

#[test]
fn refresh_after_killing_listed_nodes() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(4000, 20), 20).unwrap();
    let (key, (row, d), entry) = {
        let c = s.cliques().next().unwrap();
        let (slot, e) = c.table.entries.iter().next().unwrap();
        (c.key(), *slot, e.clone())
    };
    // Mark the listed nodes dead without the usual scrubbing.
    for n in &entry.nodes {
        s.nodes[n.0 as usize].alive = false;
        let t = s.cliques.get_mut(&entry.target).unwrap();
        t.members.remove(n);
        t.stable.remove(n);
    }
    let fresh = s.refresh_routing_entry(key, row, d).unwrap();
    assert!(!fresh.nodes.is_empty());
    for n in &fresh.nodes {
        assert!(s.is_alive(*n));
        assert!(!entry.nodes.contains(n));
    }
}

#[test]
fn refresh_without_stable_nodes_lists_k_members() {
    let mut s = Substrate::bootstrap(SubstrateConfig::default(), &pts(4000, 21), 21).unwrap();
    let (key, (row, d), target) = {
        let c = s.cliques().next().unwrap();
        let (slot, e) = c.table.entries.iter().next().unwrap();
        (c.key(), *slot, e.target)
    };
    let stable: Vec<NodeId> = s.clique(target).unwrap().stable.iter().copied().collect();
    for n in stable {
        s.nodes[n.0 as usize].stable = false;
    }
    s.cliques.get_mut(&target).unwrap().stable.clear();
    let e = s.refresh_routing_entry(key, row, d).unwrap();
    assert_eq!(e.nodes.len(), 4);
}

#[test]
fn id_locality_holds() {
    let s = Substrate::bootstrap(SubstrateConfig::default(), &pts(20_000, 22), 22).unwrap();
    let cs: Vec<&Clique<f64>> = s.cliques().collect();
    // Mean centroid distance by shared prefix length, over all pairs.
    let mut sums = [0.0f64; 8];
    let mut counts = [0usize; 8];
    for i in 0..cs.len() {
        for j in (i + 1)..cs.len() {
            let p = id::common_prefix_bits(cs[i].key(), cs[j].key()).min(cs[i].id.depth()).min(cs[j].id.depth()) as usize;
            if p < 8 {
                sums[p] += distance(cs[i].centroid, cs[j].centroid);
                counts[p] += 1;
            }
        }
    }
    let means: Vec<f64> = (0..8).filter(|&p| counts[p] >= 20).map(|p| sums[p] / counts[p] as f64).collect();
    assert!(means.len() >= 4);
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
}

#[test]
fn mean_adjacent_rtt_positive() {
    let s = Substrate::bootstrap(SubstrateConfig::default(), &pts(2000, 23), 23).unwrap();
    assert!(s.mean_adjacent_rtt() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn churn_keeps_tiling(seed in 0u64..1000, n in 40usize..400, kills in 0usize..300) {
        let p = pts(n, seed);
        let mut s = Substrate::bootstrap(small_cfg(), &p, seed).unwrap();
        let mut r = substream(seed, "prop");
        for _ in 0..kills.min(n - 1) {
            let alive: Vec<NodeId> = s.alive_nodes().map(|x| x.id).collect();
            let v = alive[r.gen_range(0..alive.len())];
            s.remove_node(v, r.gen_bool(0.5)).unwrap();
            prop_assert!(s.check_tiling().is_ok());
        }
        let t = s.config().t;
        for c in s.cliques() {
            let eligible = s.eligible_count(c.key());
            prop_assert!(c.stable.len() >= t.min(eligible));
            prop_assert!(c.len() <= 8);
        }
        let ids: Vec<CliqueId> = s.cliques().map(|c| c.id).collect();
        let alive: Vec<NodeId> = s.alive_nodes().map(|x| x.id).collect();
        for d in ids.iter().take(10) {
            let src = alive[r.gen_range(0..alive.len())];
            let path = s.route(src, *d, None, RoutePolicy::PreferStable).unwrap();
            prop_assert!(path.inter_clique_hops() <= 32);
            prop_assert_eq!(s.node(path.last()).clique, d.bits());
        }
    }
}
