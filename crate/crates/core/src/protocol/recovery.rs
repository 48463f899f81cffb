//! Failure handling, backup takeover, and graceful departure.

use std::collections::{BTreeMap, BTreeSet};

use super::types::*;
use super::world::{ActiveRecovery, Departure, Event, Mode, Timer, World};
use super::ProtocolError;
use crate::substrate::NodeId;

impl World {
    /// Fails a node silently. Its clique notices only through missing
    /// heartbeats and the membership timeout.
    pub fn crash(&mut self, n: NodeId) -> Result<(), ProtocolError> {
        self.sub.try_node(n)?;
        if !self.alive(n) {
            return Err(ProtocolError::NodeDown(n));
        }
        let now = self.now();
        let chans: Vec<ChannelId> = self.replicas.get(&n).map(|m| m.keys().copied().collect()).unwrap_or_default();
        for ch in chans {
            if self.is_head(ch, n) {
                self.open_recovery(n, ch, now);
            }
        }
        self.sub.crash_node(n)?;
        self.crashed.insert(n, now);
        let t = self.member_timeout();
        self.eng.schedule_in(t, Event::RemoveCrashed(n));
        self.leaving.remove(&n);
        Ok(())
    }

    fn open_recovery(&mut self, f: NodeId, ch: ChannelId, now: f64) {
        let Some(info) = self.info(f, ch).cloned() else { return };
        let children: Vec<NodeId> = info.children.keys().copied().filter(|c| self.alive(*c)).collect();
        let mut waiting: BTreeMap<NodeId, Option<u64>> = BTreeMap::new();
        for c in &children {
            waiting.insert(*c, self.relays.get(&(ch, *c)).and_then(|s| s.highest));
        }
        if waiting.is_empty() {
            match info.backup.filter(|b| self.alive(*b)) {
                Some(b) => {
                    waiting.insert(b, None);
                }
                None => return,
            }
        }
        let mut rtt: f64 = 0.0;
        for c in &children {
            rtt = rtt.max(self.rtt_est(*c, f));
            if let Some(b) = info.backup {
                rtt = rtt.max(self.rtt_est(*c, b));
            }
        }
        if let (Some(b), Some(p)) = (info.backup, info.parent) {
            rtt = rtt.max(self.rtt_est(b, p));
        }
        let report = RecoveryReport {
            failed_node: f,
            channel: ch,
            failure_time: now,
            detect_time: f64::INFINITY,
            recovered_time: None,
            control_messages: 0,
            segments_lost: 0,
            rtt,
            downstream_relays: self.subtree_size(ch, f) as u32,
            immediate_children: children.len() as u32,
        };
        let seq_at_failure = self.channels[ch as usize].next_seq;
        let mut scope: BTreeSet<NodeId> = self.subtree_nodes(ch, f);
        scope.extend(info.backup);
        self.recoveries.insert((ch, f), ActiveRecovery { report, waiting, any_recovered: false, seq_at_failure, scope });
    }

    /// Relay heads below `head`, itself excluded.
    pub fn subtree_size(&self, ch: ChannelId, head: NodeId) -> usize {
        self.heads_below(ch, head).len()
    }

    pub fn heads_below(&self, ch: ChannelId, head: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![head];
        while let Some(h) = stack.pop() {
            let Some(info) = self.info(h, ch) else { continue };
            for c in info.children.keys() {
                if seen.insert(*c) {
                    stack.push(*c);
                }
            }
        }
        seen
    }

    /// `head`, the heads below it and their relay chains.
    fn subtree_nodes(&self, ch: ChannelId, head: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        for h in std::iter::once(head).chain(self.heads_below(ch, head)) {
            out.insert(h);
            if let Some(i) = self.info(h, ch) {
                out.extend(i.chain());
            }
        }
        out
    }

    // heartbeats between a relay and its backup

    pub(crate) fn start_heartbeat(&mut self, ch: ChannelId, b: NodeId) {
        let hb = self.heartbeats.entry((ch, b)).or_default();
        if hb.running {
            return;
        }
        hb.running = true;
        let d = self.heartbeat_interval();
        self.timer(b, d, Timer::Heartbeat(ch));
    }

    pub(crate) fn on_heartbeat_tick(&mut self, b: NodeId, ch: ChannelId) {
        let relay = self.info(b, ch).filter(|i| i.backup == Some(b) && i.relay != b).map(|i| i.relay);
        let Some(r) = relay else {
            self.heartbeats.remove(&(ch, b));
            return;
        };
        let hb = self.heartbeats.entry((ch, b)).or_default();
        hb.gen += 1;
        let gen = hb.gen;
        self.send(b, r, ch, Body::Heartbeat { ack: false });
        let wait = self.cfg.probe_timeout_rtts * self.rtt_est(b, r);
        self.timer(b, wait, Timer::HeartbeatTimeout(ch, gen));
        let d = self.heartbeat_interval();
        self.timer(b, d, Timer::Heartbeat(ch));
    }

    pub(crate) fn on_heartbeat(&mut self, to: NodeId, from: NodeId, ch: ChannelId, ack: bool) {
        if !ack {
            self.send(to, from, ch, Body::Heartbeat { ack: true });
        } else if let Some(hb) = self.heartbeats.get_mut(&(ch, to)) {
            hb.gen += 1;
        }
    }

    pub(crate) fn on_heartbeat_timeout(&mut self, b: NodeId, ch: ChannelId, gen: u64) {
        if self.heartbeats.get(&(ch, b)).is_none_or(|hb| hb.gen != gen) {
            return;
        }
        if self.info(b, ch).is_some_and(|i| i.backup == Some(b) && i.relay != b) {
            self.takeover(b, ch);
        }
    }

    /// `b` replaces the failed head of its clique for `ch`.
    pub(crate) fn takeover(&mut self, b: NodeId, ch: ChannelId) {
        let Some(info) = self.info(b, ch).cloned() else { return };
        let f = info.relay;
        if f == b {
            return;
        }
        self.note_detection_of(ch, f);
        let key = self.clique_key(b);
        let before = self.holders(key, ch, &info);
        if let Some(recs) = self.recipients.remove(&(ch, f)) {
            self.recipients.entry((ch, b)).or_default().extend(recs);
        }
        for m in self.members.iter_mut().filter(|((c, _), m)| *c == ch && m.relay == f).map(|(_, m)| m) {
            m.relay = b;
        }
        let mut new = info.clone();
        new.relay = b;
        new.helpers.retain(|h| *h != b && *h != f);
        let orphans: Vec<NodeId> = new.children.iter().filter(|(_, s)| !new.is_relay_node(**s)).map(|(c, _)| *c).collect();
        for c in orphans {
            self.place_child(&mut new, c);
        }
        new.backup = self.pick_backup(b, &[f]);
        new.degraded = new.backup.is_none();
        let path = self.path_of(ch, f);
        if !self.alive(f) {
            self.drop_replica(f, ch);
        }
        self.install(b, ch, new.clone());
        let now = self.now();
        if let Some(st) = self.relays.get_mut(&(ch, b)) {
            let mut p: Vec<NodeId> = path.iter().copied().filter(|x| *x != f).collect();
            p.push(b);
            st.root_path = std::sync::Arc::new(p);
            st.last_rx = now;
            st.mode = Mode::Normal;
            st.gen += 1;
        }
        self.arm_watchdog(b, ch);
        self.publish(b, ch, &before);
        if let Some(nb) = new.backup {
            self.count_recovery_message(ch, b, nb);
        }
        if let Some(p) = new.parent {
            if self.alive(p) {
                self.send(b, p, ch, Body::HandOver { old: f, new: b, backup: new.backup });
            }
        }
    }

    fn note_detection_of(&mut self, ch: ChannelId, f: NodeId) {
        let now = self.now();
        if let Some(r) = self.recoveries.get_mut(&(ch, f)) {
            r.report.detect_time = r.report.detect_time.min(now);
        }
    }

    pub(crate) fn on_recover_tree(&mut self, x: NodeId, from: NodeId, ch: ChannelId, failed: NodeId) {
        let Some(info) = self.info(x, ch).cloned() else { return };
        if info.relay == failed {
            let backup_ok = info.backup.is_some_and(|b| b != x && self.alive(b) && !self.leaving.contains_key(&b));
            if backup_ok {
                self.send(x, info.backup.unwrap(), ch, Body::RecoverTree { failed });
                return;
            }
            self.takeover(x, ch);
            self.attach_after_repair(x, ch, from);
            return;
        }
        if info.relay != x {
            if self.alive(info.relay) {
                self.send(x, info.relay, ch, Body::RecoverTree { failed });
            }
            return;
        }
        if info.helpers.contains(&failed) {
            let orphans: Vec<NodeId> = info.children.iter().filter(|(_, s)| **s == failed).map(|(c, _)| *c).collect();
            self.update_info(x, ch, |w, i| w.remove_from_chain(i, failed));
            for c in orphans {
                if let Some(s) = self.info(x, ch).and_then(|i| i.children.get(&c).copied()) {
                    self.push_latest(s, ch, c);
                }
            }
        }
        self.attach_after_repair(x, ch, from);
    }

    fn attach_after_repair(&mut self, head: NodeId, ch: ChannelId, child: NodeId) {
        if !self.is_head(ch, head) || !self.is_head(ch, child) {
            return;
        }
        if self.info(head, ch).is_some_and(|i| !i.children.contains_key(&child)) {
            self.update_info(head, ch, |w, i| w.place_child(i, child));
        }
        if let Some(s) = self.info(head, ch).and_then(|i| i.children.get(&child).copied()) {
            self.push_latest(s, ch, child);
        }
    }

    pub(crate) fn on_hand_over(&mut self, p: NodeId, ch: ChannelId, old: NodeId, new: NodeId, _backup: Option<NodeId>) {
        let Some(info) = self.info(p, ch).cloned() else { return };
        if info.relay != p {
            if self.alive(info.relay) {
                let b = _backup;
                self.send(p, info.relay, ch, Body::HandOver { old, new, backup: b });
            }
            return;
        }
        if old != new {
            if let Some(s) = info.children.get(&old).copied() {
                self.update_info(p, ch, |_, i| {
                    i.children.remove(&old);
                    i.children.insert(new, s);
                });
            } else if !info.children.contains_key(&new) {
                self.update_info(p, ch, |w, i| w.place_child(i, new));
            }
        }
        if let Some(s) = self.info(p, ch).and_then(|i| i.children.get(&new).copied()) {
            self.push_latest(s, ch, new);
        }
        if old != new && self.alive(old) {
            self.send(p, old, ch, Body::Release);
        }
    }

    pub(crate) fn on_release(&mut self, x: NodeId, ch: ChannelId) {
        let Some(d) = self.leaving.get_mut(&x) else { return };
        d.awaiting.remove(&ch);
        d.forward.remove(&ch);
        if d.awaiting.is_empty() {
            self.finish_departure(x);
        }
    }

    // graceful departure

    /// Announced departure: roles are handed over before the node goes.
    pub fn leave_platform(&mut self, n: NodeId) {
        if !self.alive(n) || self.leaving.contains_key(&n) || !self.sub.node(n).member {
            return;
        }
        let memberships: Vec<(ChannelId, NodeId)> =
            self.members.iter().filter(|((_, m), _)| *m == n).map(|((c, _), m)| (*c, m.relay)).collect();
        for (ch, relay) in memberships {
            if relay != n && self.alive(relay) {
                self.send(n, relay, ch, Body::Leave { prune: false });
            }
            self.members.remove(&(ch, n));
        }
        self.waits.retain(|(_, j), _| *j != n);
        self.pending.retain(|(s, _), _| *s != n);
        self.forget_joiner(n);
        let mut d = Departure { depart: true, ..Default::default() };
        let roles: Vec<(ChannelId, ChannelInfo)> = self
            .replicas
            .get(&n)
            .map(|m| m.iter().filter(|(_, i)| i.is_relay_node(n)).map(|(c, i)| (*c, i.clone())).collect())
            .unwrap_or_default();
        for (ch, info) in roles {
            if info.relay == n {
                let key = self.clique_key(n);
                if let Some(s) = self.hand_over_head(n, ch, key) {
                    d.awaiting.insert(ch);
                    d.forward.insert(ch, s);
                } else {
                    self.abandon_head(n, ch);
                }
            } else if self.alive(info.relay) {
                self.send(n, info.relay, ch, Body::Leave { prune: false });
                d.awaiting.insert(ch);
            }
        }
        self.leaving.insert(n, d);
        if self.leaving[&n].awaiting.is_empty() {
            self.finish_departure(n);
            return;
        }
        let t = self.long_timeout();
        self.timer(n, t, Timer::LeaveTimeout);
    }

    /// Picks a successor in clique `key` and ships it the head role.
    pub(crate) fn hand_over_head(&mut self, n: NodeId, ch: ChannelId, key: u64) -> Option<NodeId> {
        let info = self.info(n, ch)?.clone();
        let usable = |w: &World, s: NodeId| s != n && w.sub.is_stable(s) && w.clique_key(s) == key && !w.leaving.contains_key(&s);
        let mut succ = info.backup.filter(|b| usable(self, *b));
        if succ.is_none() {
            let cands: Vec<NodeId> = self.stable_of(key).into_iter().filter(|s| usable(self, *s)).collect();
            succ = self.rank_by_bandwidth(cands).first().copied();
        }
        if succ.is_none() {
            succ = self.sub.recruit_stable(key).filter(|s| *s != n);
        }
        let s = succ?;
        let mut next = info.clone();
        next.relay = s;
        next.helpers.retain(|h| *h != s && *h != n && self.clique_key(*h) == key);
        let orphans: Vec<NodeId> = next.children.iter().filter(|(_, x)| !next.is_relay_node(**x)).map(|(c, _)| *c).collect();
        for c in orphans {
            self.place_child(&mut next, c);
        }
        let cands: Vec<NodeId> =
            self.stable_of(key).into_iter().filter(|b| *b != s && *b != n && !self.leaving.contains_key(b)).collect();
        next.backup = self.rank_by_bandwidth(cands).first().copied();
        next.degraded = next.backup.is_none();
        let recipients = self.recipients_of(ch, n);
        self.send(n, s, ch, Body::HandOverRole { info: next, recipients });
        Some(s)
    }

    /// No node can take over: the head stops and everything below it
    /// finds its own way back.
    fn abandon_head(&mut self, n: NodeId, ch: ChannelId) {
        let Some(info) = self.info(n, ch).cloned() else { return };
        if let Some(p) = info.parent {
            if self.alive(p) {
                self.send(n, p, ch, Body::Leave { prune: true });
            }
        }
        for r in self.recipients_of(ch, n) {
            if self.alive(r) {
                self.send(n, r, ch, Body::Rejoin);
            }
        }
        self.retire(n, ch);
    }

    /// Drops a joiner from every parked list; empty lists go away.
    pub(crate) fn forget_joiner(&mut self, n: NodeId) {
        for p in self.pending.values_mut() {
            p.joiners.retain(|(j, _)| *j != n);
        }
        self.pending.retain(|_, p| !p.joiners.is_empty());
    }

    pub(crate) fn finish_departure(&mut self, n: NodeId) {
        let Some(d) = self.leaving.remove(&n) else { return };
        if d.depart && self.sub.node(n).member {
            let _ = self.sub.remove_node(n, false);
        }
    }

    pub(crate) fn on_hand_over_role(&mut self, s: NodeId, from: NodeId, ch: ChannelId, info: ChannelInfo, recipients: Vec<NodeId>) {
        if info.relay != s || !self.sub.node(s).member {
            return;
        }
        let key = self.clique_key(s);
        let mut before = self.holders(key, ch, &info);
        if let Some(cur) = self.info(s, ch) {
            before.extend(self.holders(key, ch, &cur.clone()));
        }
        let state = self.relays.get(&(ch, from)).cloned();
        self.install(s, ch, info.clone());
        if let (Some(mut st), Some(slot)) = (state, self.relays.get_mut(&(ch, s))) {
            st.watchdog_armed = false;
            let mut p: Vec<NodeId> = st.root_path.iter().copied().filter(|x| *x != from).collect();
            p.push(s);
            st.root_path = std::sync::Arc::new(p);
            *slot = st;
        }
        let set = self.recipients.entry((ch, s)).or_default();
        set.extend(recipients.iter().copied().filter(|r| *r != s));
        for m in self.members.iter_mut().filter(|((c, _), m)| *c == ch && m.relay == from).map(|(_, m)| m) {
            m.relay = s;
        }
        self.arm_watchdog(s, ch);
        self.publish(s, ch, &before);
        match info.parent {
            Some(p) if self.alive(p) => self.send(s, p, ch, Body::HandOver { old: from, new: s, backup: info.backup }),
            Some(_) => {}
            None => {
                if self.source_of(ch) == s && self.alive(from) {
                    self.send(s, from, ch, Body::Release);
                }
            }
        }
    }

    pub(crate) fn on_leave(&mut self, x: NodeId, from: NodeId, ch: ChannelId, prune: bool) {
        let Some(info) = self.info(x, ch).cloned() else { return };
        if info.relay != x {
            if info.relay != from && self.alive(info.relay) && self.info(info.relay, ch).is_some_and(|i| i.relay == info.relay) {
                self.on_leave(info.relay, from, ch, prune);
            }
            return;
        }
        if info.helpers.contains(&from) {
            self.update_info(x, ch, |w, i| w.remove_from_chain(i, from));
            if self.alive(from) {
                self.send(x, from, ch, Body::Release);
            }
            return;
        }
        let mut changed = false;
        if info.children.contains_key(&from) {
            self.update_info(x, ch, |_, i| {
                i.children.remove(&from);
            });
            changed = true;
        }
        if self.recipients.get_mut(&(ch, x)).is_some_and(|r| r.remove(&from)) {
            changed = true;
        }
        if self.feeding.get(&(ch, from)).is_some_and(|f| info.is_relay_node(*f)) {
            self.feeding.remove(&(ch, from));
            changed = true;
        }
        if changed {
            self.maybe_prune(x, ch);
        }
    }
}
