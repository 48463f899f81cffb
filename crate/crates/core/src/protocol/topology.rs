//! The delivery topology of a channel as a rooted tree at its source.

use std::collections::{BTreeMap, BTreeSet};

use super::types::ChannelId;
use super::world::World;
use crate::substrate::NodeId;
use crate::tree::SpanningTree;

impl World {
    /// Upstream node of every node that currently receives `ch`: relay
    /// chains, tree links between cliques, and members under their relay.
    pub fn upstream_map(&self, ch: ChannelId) -> BTreeMap<NodeId, NodeId> {
        let src = self.source_of(ch);
        let mut up: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for h in self.heads(ch) {
            let Some(info) = self.info(h, ch) else { continue };
            match info.parent {
                None if h != src => {
                    up.insert(h, src);
                }
                None => {}
                Some(p) => {
                    let server = self
                        .info(p, ch)
                        .map(|pi| pi.relay)
                        .and_then(|ph| self.info(ph, ch))
                        .and_then(|pi| pi.children.get(&h).copied())
                        .unwrap_or(p);
                    up.insert(h, server);
                }
            }
            let chain: Vec<NodeId> = info.chain().collect();
            for w in chain.windows(2) {
                up.insert(w[1], w[0]);
            }
        }
        for ((c, m), mb) in &self.members {
            if *c == ch && *m != src && !up.contains_key(m) && *m != mb.relay {
                up.insert(*m, mb.relay);
            }
        }
        up
    }

    /// The tree reachable from the source. Nodes cut off from it are left out.
    pub fn delivery_tree(&self, ch: ChannelId) -> SpanningTree<f64> {
        let src = self.source_of(ch);
        let up = self.upstream_map(ch);
        let mut kids: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (c, p) in &up {
            kids.entry(*p).or_default().push(*c);
        }
        let mut t = SpanningTree::with_root(src.0, self.pos(src));
        let mut seen = BTreeSet::from([src]);
        let mut stack = vec![(src, 0usize)];
        while let Some((n, i)) = stack.pop() {
            for &c in kids.get(&n).map(|v| v.as_slice()).unwrap_or(&[]) {
                if seen.insert(c) {
                    let j = t.push(c.0, self.pos(c), i);
                    stack.push((c, j));
                }
            }
        }
        t
    }
}
