//! Structural checks over the global state, meant for quiescent moments.

use std::collections::{BTreeMap, BTreeSet};

use super::types::ChannelId;
use super::world::World;
use crate::substrate::NodeId;

impl World {
    /// Every violated structural property, one line each. Empty when sound.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.sub.check_tiling() {
            v.push(format!("tiling: {e}"));
        }
        for ch in self.channel_ids() {
            self.channel_violations(ch, &mut v);
        }
        v
    }

    fn channel_violations(&self, ch: ChannelId, v: &mut Vec<String>) {
        let cap = self.sub.config().fanout();
        let src = self.source_of(ch);
        let src_key = self.clique_key(src);
        let heads: Vec<NodeId> = self.heads(ch);
        let mut by_clique: BTreeMap<u64, Vec<NodeId>> = BTreeMap::new();
        for &h in &heads {
            if !self.alive(h) {
                v.push(format!("ch{ch}: head {h} is down"));
                continue;
            }
            by_clique.entry(self.clique_key(h)).or_default().push(h);
        }
        for (k, hs) in &by_clique {
            if hs.len() > 1 {
                v.push(format!("ch{ch}: clique {k:#x} has {} relays {hs:?}", hs.len()));
            }
        }
        let Some(root) = by_clique.get(&src_key).and_then(|h| h.first().copied()) else {
            v.push(format!("ch{ch}: source clique has no relay"));
            return;
        };
        let live: BTreeSet<NodeId> = by_clique.values().flatten().copied().collect();
        let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
        let mut pairs: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        for &h in &live {
            let info = self.info(h, ch).expect("head has a replica");
            if info.backup == Some(h) {
                v.push(format!("ch{ch}: relay {h} is its own backup"));
            }
            for n in info.chain() {
                let out = info.out_links(n).len();
                if out > cap {
                    v.push(format!("ch{ch}: node {n} pushes to {out} > {cap} links"));
                }
                if !self.alive(n) || self.clique_key(n) != self.clique_key(h) {
                    v.push(format!("ch{ch}: chain node {n} of {h} is down or outside the clique"));
                }
            }
            match info.parent {
                None if h != root => v.push(format!("ch{ch}: non-root relay {h} has no parent")),
                Some(_) if h == root => v.push(format!("ch{ch}: root relay {h} has a parent")),
                _ => {}
            }
            for (&c, &s) in &info.children {
                if !live.contains(&c) {
                    v.push(format!("ch{ch}: relay {h} lists {c}, which is not a relay"));
                    continue;
                }
                edges.push((h, c));
                let (a, b) = (self.clique_key(h), self.clique_key(c));
                *pairs.entry((a.min(b), a.max(b))).or_default() += 1;
                let cp = self.info(c, ch).and_then(|i| i.parent);
                if !cp.is_some_and(|p| info.is_relay_node(p)) {
                    v.push(format!("ch{ch}: child {c} of {h} names parent {cp:?}, served by {s}"));
                }
            }
        }
        for ((a, b), n) in pairs {
            if n > 1 {
                v.push(format!("ch{ch}: {n} links between cliques {a:#x} and {b:#x}"));
            }
        }
        if edges.len() + 1 != live.len() {
            v.push(format!("ch{ch}: {} relays but {} tree links", live.len(), edges.len()));
        }
        let mut seen = BTreeSet::from([root]);
        let mut stack = vec![root];
        while let Some(h) = stack.pop() {
            for (a, b) in &edges {
                if *a == h && seen.insert(*b) {
                    stack.push(*b);
                }
            }
        }
        if seen.len() != live.len() {
            v.push(format!("ch{ch}: {} of {} relays reachable from the root", seen.len(), live.len()));
        }
        self.replica_violations(ch, &live, v);
    }

    fn replica_violations(&self, ch: ChannelId, live: &BTreeSet<NodeId>, v: &mut Vec<String>) {
        for &h in live {
            let info = self.info(h, ch).expect("head has a replica");
            let key = self.clique_key(h);
            for x in self.holders(key, ch, info) {
                if self.info(x, ch) != Some(info) {
                    v.push(format!("ch{ch}: holder {x} disagrees with relay {h}"));
                }
            }
        }
        for (n, m) in &self.replicas {
            if !self.alive(*n) {
                continue;
            }
            if let Some(i) = m.get(&ch) {
                if !self.sub.node(i.relay).member || self.clique_key(i.relay) != self.clique_key(*n) {
                    v.push(format!("ch{ch}: node {n} holds a replica of relay {} in another clique", i.relay));
                }
            }
        }
        for ((c, m), mb) in &self.members {
            if *c == ch && !live.contains(&mb.relay) {
                v.push(format!("ch{ch}: member {m} follows {}, which is not a relay", mb.relay));
            }
        }
    }
}
