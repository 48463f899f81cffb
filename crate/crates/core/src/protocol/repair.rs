//! Keeping trees and replicas consistent with clique splits, merges,
//! stable-set changes and departed nodes.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::types::*;
use super::world::{Departure, Timer, World};
use crate::substrate::NodeId;

impl World {
    fn heads_in(&self, ch: ChannelId, key: u64) -> Vec<NodeId> {
        self.heads
            .get(&ch)
            .map(|h| h.iter().copied().filter(|n| self.sub.node(*n).member && self.clique_key(*n) == key).collect())
            .unwrap_or_default()
    }

    fn backup_ok(&self, head: NodeId, b: Option<NodeId>) -> bool {
        b.is_some_and(|b| b != head && self.sub.is_stable(b) && self.clique_key(b) == self.clique_key(head) && !self.leaving.contains_key(&b))
    }

    /// Re-publishes a head's replica to the current holders, fixing its
    /// backup and dropping chain nodes that left the clique.
    fn refresh_head(&mut self, h: NodeId, ch: ChannelId) {
        let key = self.clique_key(h);
        self.update_info(h, ch, |w, i| {
            let strays: Vec<NodeId> = i.helpers.iter().copied().filter(|x| !w.alive(*x) || w.clique_key(*x) != key).collect();
            for s in strays {
                w.remove_from_chain(i, s);
            }
            if !w.backup_ok(h, i.backup) {
                i.backup = w.pick_backup(h, &[]);
            }
            i.degraded = i.backup.is_none();
        });
    }

    pub(crate) fn on_stable_changed(&mut self, key: u64) {
        for ch in self.channel_ids().collect::<Vec<_>>() {
            for h in self.heads_in(ch, key) {
                if self.alive(h) {
                    self.refresh_head(h, ch);
                }
            }
        }
        // Joiners that found no stable node can try again right away.
        let stuck: Vec<(ChannelId, NodeId)> = self
            .waits
            .iter()
            .filter(|((_, j), w)| !w.contacted && self.alive(*j) && self.clique_key(*j) == key)
            .map(|(k, _)| *k)
            .collect();
        for (ch, j) in stuck {
            if let Some(w) = self.waits.remove(&(ch, j)) {
                self.begin_join(j, ch, w.rejoin, w.start);
            }
        }
    }

    pub(crate) fn on_node_gone(&mut self, node: NodeId, key: u64, _crashed: bool) {
        let chans: Vec<ChannelId> = self.channel_ids().collect();
        for &ch in &chans {
            if self.heads.get(&ch).is_some_and(|h| h.contains(&node)) {
                self.replace_lost_head(node, ch, key);
            }
        }
        if let Some(m) = self.replicas.get(&node).map(|m| m.keys().copied().collect::<Vec<_>>()) {
            for ch in m {
                self.drop_replica(node, ch);
            }
        }
        // Members served by the vanished node notice through the mesh and rejoin.
        let stranded: Vec<(ChannelId, NodeId)> =
            self.members.iter().filter(|(_, m)| m.relay == node).map(|(k, _)| *k).collect();
        let now = self.now();
        for (ch, m) in stranded {
            if self.alive(m) && !self.waits.contains_key(&(ch, m)) {
                self.begin_join(m, ch, true, now);
            }
        }
        self.heartbeats.retain(|(_, n), _| *n != node);
        for set in self.recipients.values_mut() {
            set.remove(&node);
        }
        self.recipients.retain(|(_, n), _| *n != node);
        self.members.retain(|(_, n), _| *n != node);
        self.waits.retain(|(_, n), _| *n != node);
        self.pending.retain(|(n, _), _| *n != node);
        self.forget_joiner(node);
        self.claims.retain(|_, n| *n != node);
        self.awaiting.retain(|(_, n), _| *n != node);
        self.relays.retain(|(_, n), _| *n != node);
        self.feeding.retain(|(_, c), f| *c != node && *f != node);
        for &ch in &chans {
            let heads: Vec<NodeId> = self.heads(ch);
            for h in heads {
                let Some(info) = self.info(h, ch) else { continue };
                let child = info.children.contains_key(&node);
                let helper = info.helpers.contains(&node);
                let backup = info.backup == Some(node);
                if !(child || helper || backup) {
                    continue;
                }
                self.update_info(h, ch, |w, i| {
                    i.children.remove(&node);
                    if helper {
                        w.remove_from_chain(i, node);
                    }
                    if backup {
                        i.backup = w.pick_backup(h, &[node]);
                        i.degraded = i.backup.is_none();
                    }
                });
                if child {
                    self.maybe_prune(h, ch);
                }
            }
            self.forget_waiting(ch, node);
            if self.recoveries.contains_key(&(ch, node)) {
                let ok = self.recoveries[&(ch, node)].any_recovered;
                self.finish_recovery((ch, node), ok);
            }
        }
    }

    /// A head vanished without anyone taking over.
    fn replace_lost_head(&mut self, node: NodeId, ch: ChannelId, key: u64) {
        let Some(info) = self.info(node, ch).cloned() else { return };
        let root = info.parent.is_none();
        let mut succ = info.backup.filter(|b| *b != node && self.sub.is_stable(*b) && self.clique_key(*b) == key);
        if succ.is_none() {
            succ = self.pick_backup(node, &[]);
        }
        if succ.is_none() && root {
            succ = self.sub.recruit_stable(key).filter(|s| *s != node);
        }
        match succ {
            Some(s) => {
                if self.info(s, ch).is_none_or(|i| i.relay != node) {
                    self.install(s, ch, info);
                }
                self.takeover(s, ch);
            }
            None => {
                let recs = self.recipients_of(ch, node);
                let now = self.now();
                for r in recs {
                    if self.alive(r) && !self.waits.contains_key(&(ch, r)) {
                        self.begin_join(r, ch, true, now);
                    }
                }
            }
        }
    }

    pub(crate) fn on_split(&mut self, primary: u64, offspring: u64) {
        for ch in self.channel_ids().collect::<Vec<_>>() {
            self.claims.remove(&(ch, primary));
            self.claims.remove(&(ch, offspring));
            let src_key = self.clique_key(self.source_of(ch));
            let mut hs = self.heads_in(ch, primary);
            hs.extend(self.heads_in(ch, offspring));
            for h in hs {
                let Some(info) = self.info(h, ch).cloned() else { continue };
                let home = if info.parent.is_none() && (src_key == primary || src_key == offspring) { src_key } else { primary };
                let other = if home == primary { offspring } else { primary };
                // Recipients on the far side find a relay of their own.
                let recs: Vec<NodeId> = self.recipients_of(ch, h).into_iter().filter(|r| self.clique_key(*r) == other).collect();
                for r in recs {
                    if let Some(set) = self.recipients.get_mut(&(ch, h)) {
                        set.remove(&r);
                    }
                    if self.alive(r) && self.alive(h) {
                        self.send(h, r, ch, Body::Rejoin);
                    }
                }
                if self.clique_key(h) == other {
                    self.move_head(h, ch, home);
                } else {
                    self.refresh_head(h, ch);
                }
                self.drop_replicas_in(ch, other);
            }
        }
    }

    /// Ships the head role across the split line without the old head
    /// leaving the platform.
    fn move_head(&mut self, h: NodeId, ch: ChannelId, home: u64) {
        if !self.alive(h) {
            return;
        }
        match self.hand_over_head(h, ch, home) {
            Some(s) => {
                let d = self.leaving.entry(h).or_insert_with(|| Departure { depart: false, ..Default::default() });
                d.awaiting.insert(ch);
                d.forward.insert(ch, s);
                self.recipients.remove(&(ch, h));
                self.drop_replica(h, ch);
                let t = self.long_timeout();
                self.timer(h, t, Timer::LeaveTimeout);
            }
            None => {
                // Nothing stable on the home side: give the channel up there.
                let info = self.info(h, ch).cloned();
                if let Some(p) = info.and_then(|i| i.parent) {
                    if self.alive(p) {
                        self.send(h, p, ch, Body::Leave { prune: true });
                    }
                }
                self.drop_replica(h, ch);
                self.recipients.remove(&(ch, h));
            }
        }
    }

    /// Holders in clique `key` drop replicas that describe another clique.
    fn drop_replicas_in(&mut self, ch: ChannelId, key: u64) {
        let Some(c) = self.sub.clique(key) else { return };
        let members: Vec<NodeId> = c.members.iter().copied().collect();
        for n in members {
            let stale = self.info(n, ch).is_some_and(|i| !self.sub.node(i.relay).member || self.clique_key(i.relay) != key);
            if stale && !self.leaving.get(&n).is_some_and(|d| d.forward.contains_key(&ch)) {
                self.drop_replica(n, ch);
            }
        }
    }

    pub(crate) fn on_merge(&mut self, merging: u64, merged: u64, absorbed: &[NodeId]) {
        let absorbed: BTreeSet<NodeId> = absorbed.iter().copied().collect();
        for ch in self.channel_ids().collect::<Vec<_>>() {
            self.claims.remove(&(ch, merging));
            self.claims.remove(&(ch, merged));
            let hs = self.heads_in(ch, merging);
            let hm = hs.iter().copied().find(|h| !absorbed.contains(h));
            let hd = hs.iter().copied().find(|h| absorbed.contains(h));
            match (hm, hd) {
                (Some(m), Some(d)) => self.fuse_heads(ch, m, d),
                (Some(h), None) | (None, Some(h)) => {
                    if self.alive(h) {
                        self.refresh_head(h, ch);
                    }
                }
                (None, None) => {}
            }
            self.drop_replicas_in(ch, merging);
        }
    }

    /// Two heads ended up in one clique; `m` keeps the role and takes over
    /// whatever `d` was serving.
    fn fuse_heads(&mut self, ch: ChannelId, m: NodeId, d: NodeId) {
        let (Some(im), Some(id)) = (self.info(m, ch).cloned(), self.info(d, ch).cloned()) else { return };
        let chain_m: BTreeSet<NodeId> = im.chain().collect();
        let chain_d: BTreeSet<NodeId> = id.chain().collect();
        let path_m = self.path_of(ch, m);
        let path_d = self.path_of(ch, d);
        let d_above = id.parent.is_none() || path_m.contains(&d) || im.parent.is_some_and(|p| chain_d.contains(&p));
        let key = self.clique_key(m);
        let mut before = self.holders(key, ch, &im);
        before.extend(self.holders(key, ch, &id));

        let mut new = im.clone();
        new.children.retain(|c, _| !chain_d.contains(c));
        let moved: Vec<NodeId> = id.children.keys().copied().filter(|c| !chain_m.contains(c) && !new.children.contains_key(c)).collect();
        if d_above {
            if let Some(op) = im.parent {
                if !chain_d.contains(&op) && Some(op) != id.parent && self.alive(op) {
                    self.send(m, op, ch, Body::Leave { prune: true });
                }
            }
            new.parent = id.parent;
            new.backup_parent = id.backup_parent;
        } else if let Some(dp) = id.parent {
            if !chain_m.contains(&dp) && self.alive(dp) && self.alive(d) {
                self.send(d, dp, ch, Body::Leave { prune: true });
            }
        }
        for c in &moved {
            self.place_child(&mut new, *c);
        }
        if !self.backup_ok(m, new.backup) {
            new.backup = self.pick_backup(m, &[d]);
        }
        new.degraded = new.backup.is_none();

        if let Some(recs) = self.recipients.remove(&(ch, d)) {
            self.recipients.entry((ch, m)).or_default().extend(recs.into_iter().filter(|r| *r != m));
        }
        for mb in self.members.iter_mut().filter(|((c, _), x)| *c == ch && x.relay == d).map(|(_, x)| x) {
            mb.relay = m;
        }
        for f in self.feeding.iter_mut().filter(|((c, _), f)| *c == ch && chain_d.contains(f)).map(|(_, f)| f) {
            *f = m;
        }
        for n in &chain_d {
            if !chain_m.contains(n) {
                self.drop_replica(*n, ch);
                self.forget_waiting(ch, *n);
            }
        }
        self.install(m, ch, new.clone());
        if d_above {
            if let Some(st) = self.relays.get_mut(&(ch, m)) {
                let mut p: Vec<NodeId> = path_d.iter().copied().filter(|x| *x != d).collect();
                p.push(m);
                st.root_path = Arc::new(p);
            }
        }
        self.publish(m, ch, &before);
        if d_above {
            if let Some(p) = new.parent {
                if self.alive(p) {
                    self.send(m, p, ch, Body::HandOver { old: d, new: m, backup: new.backup });
                }
            }
        }
        for c in moved {
            if let Some(s) = self.info(m, ch).and_then(|i| i.children.get(&c).copied()) {
                self.push_latest(s, ch, c);
            }
        }
    }

    /// After a split or merge a child clique may no longer be the next
    /// routing hop from its parent. Such children are fed by their old
    /// server while they look for the new attachment point.
    pub(crate) fn revalidate_children(&mut self) {
        self.sub.ensure_routing_tables();
        for ch in self.channel_ids().collect::<Vec<_>>() {
            for h in self.heads(ch) {
                if !self.alive(h) {
                    continue;
                }
                let Some(info) = self.info(h, ch).cloned() else { continue };
                let key = self.clique_key(h);
                let Some(c) = self.sub.clique(key) else { continue };
                let targets: BTreeSet<u64> = c.table.targets().collect();
                let invalid: Vec<(NodeId, NodeId)> = info
                    .children
                    .iter()
                    .filter(|(c, _)| self.sub.node(**c).member)
                    .filter(|(c, _)| {
                        let ck = self.clique_key(**c);
                        ck == key || !targets.contains(&ck)
                    })
                    .map(|(c, s)| (*c, *s))
                    .collect();
                if invalid.is_empty() {
                    continue;
                }
                self.update_info(h, ch, |_, i| {
                    for (c, _) in &invalid {
                        i.children.remove(c);
                    }
                });
                for (c, s) in invalid {
                    if !self.alive(c) || self.clique_key(c) == key || self.feeding.contains_key(&(ch, c)) {
                        continue;
                    }
                    let s = if self.alive(s) { s } else { h };
                    self.feeding.insert((ch, c), s);
                    self.send(s, c, ch, Body::Rejoin);
                    let t = self.long_timeout();
                    self.timer(s, t, Timer::FeedTimeout(ch, c));
                }
                self.maybe_prune(h, ch);
            }
        }
    }
}
