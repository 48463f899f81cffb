//! Segment push along the trees, stall detection and independent rejoin.

use std::sync::Arc;

use super::types::*;
use super::world::{Event, Mode, Timer, World};
use super::ProtocolError;
use crate::substrate::NodeId;

impl World {
    /// Starts periodic segment generation at the channel's source.
    pub fn start_streaming(&mut self, ch: ChannelId) -> Result<(), ProtocolError> {
        if (ch as usize) >= self.channels.len() {
            return Err(ProtocolError::UnknownChannel(ch.to_string()));
        }
        if self.channels[ch as usize].streaming {
            return Ok(());
        }
        self.channels[ch as usize].streaming = true;
        let now = self.now();
        let heads: Vec<NodeId> = self.heads(ch);
        for h in heads {
            if let Some(st) = self.relays.get_mut(&(ch, h)) {
                st.last_rx = now;
            }
            self.arm_watchdog(h, ch);
        }
        let dt = self.cfg.segment_interval();
        self.eng.schedule_in(dt, Event::SourceTick(ch));
        Ok(())
    }

    pub fn stop_streaming(&mut self, ch: ChannelId) {
        if let Some(c) = self.channels.get_mut(ch as usize) {
            c.streaming = false;
        }
    }

    /// Highest segment generated so far, if any.
    pub fn latest_seq(&self, ch: ChannelId) -> Option<u64> {
        self.channels[ch as usize].next_seq.checked_sub(1)
    }

    pub(crate) fn source_tick(&mut self, ch: ChannelId) {
        let c = &mut self.channels[ch as usize];
        if !c.streaming {
            return;
        }
        let (src, seq) = (c.source, c.next_seq);
        c.next_seq += 1;
        let dt = self.cfg.segment_interval();
        self.eng.schedule_in(dt, Event::SourceTick(ch));
        if !self.alive(src) {
            return;
        }
        let Some(relay) = self.info(src, ch).map(|i| i.relay) else { return };
        let path = Arc::new(Vec::new());
        if relay == src {
            self.on_segment(src, src, ch, seq, path, None);
        } else {
            self.send(src, relay, ch, Body::Segment { seq, path, backup: None });
        }
    }

    pub(crate) fn on_segment(&mut self, n: NodeId, from: NodeId, ch: ChannelId, seq: u64, path: Arc<Vec<NodeId>>, backup: Option<NodeId>) {
        if let Some(f) = self.leaving.get(&n).and_then(|d| d.forward.get(&ch)).copied() {
            if self.alive(f) && f != from {
                self.send(n, f, ch, Body::Segment { seq, path, backup });
            }
            return;
        }
        let src = self.source_of(ch);
        let Some(info) = self.info(n, ch).filter(|i| i.is_relay_node(n)).cloned() else {
            if from != src && self.alive(from) && self.clique_key(from) != self.clique_key(n) {
                self.send(n, from, ch, Body::Leave { prune: true });
            }
            return;
        };
        if path.contains(&n) {
            return;
        }
        let Some(st) = self.relays.get(&(ch, n)) else { return };
        let fresh = st.highest.is_none_or(|h| seq > h);
        let fill = st.missing.contains(&seq);
        let (rejoining, pruned_from) = (st.rejoining, st.pruned.contains(&from));
        let is_head = info.relay == n;
        if is_head && self.clique_key(from) != self.clique_key(n) && fresh {
            match info.parent {
                Some(p) if p != from => {
                    let same_clique = self.sub.node(p).member && self.clique_key(p) == self.clique_key(from);
                    if same_clique {
                        // The parent clique moved us to another node of its chain.
                        self.update_info(n, ch, |_, i| i.parent = Some(from));
                    } else if !rejoining && !pruned_from {
                        if self.alive(p) {
                            self.send(n, p, ch, Body::Leave { prune: true });
                        }
                        if let Some(st) = self.relays.get_mut(&(ch, n)) {
                            st.pruned.insert(p);
                        }
                        self.update_info(n, ch, |_, i| {
                            i.parent = Some(from);
                            i.backup_parent = backup;
                        });
                    }
                }
                Some(_) if backup.is_some() && backup != info.backup_parent => {
                    self.update_info(n, ch, |_, i| i.backup_parent = backup);
                }
                _ => {}
            }
        }
        if !fresh && !fill {
            return;
        }
        let now = self.now();
        let window = self.cfg.mesh.window;
        let mut my_path = (*path).clone();
        my_path.push(n);
        let my_path = Arc::new(my_path);
        let st = self.relays.get_mut(&(ch, n)).expect("checked above");
        if fresh {
            if let Some(h) = st.highest {
                st.missing.extend(h + 1..seq);
            }
            st.highest = Some(seq);
            let floor = seq.saturating_sub(window);
            st.missing.retain(|s| *s >= floor);
            st.last_rx = now;
            st.root_path = my_path.clone();
            if st.mode != Mode::Normal {
                st.mode = Mode::Normal;
                st.gen += 1;
            }
        } else {
            st.missing.remove(&seq);
        }
        if fresh {
            self.note_fresh_segment(ch, n, seq, &my_path);
            if is_head {
                self.arm_watchdog(n, ch);
            }
        }
        let mut targets = info.out_links(n);
        targets.extend(self.feeding.iter().filter(|((c, _), f)| *c == ch && **f == n).map(|((_, child), _)| *child));
        let b = info.backup;
        for t in targets {
            if t != from && self.alive(t) {
                self.send(n, t, ch, Body::Segment { seq, path: my_path.clone(), backup: b });
            }
        }
    }

    /// Resends the latest segment so a new or re-attached child picks up the
    /// stream without waiting for the next one.
    pub(crate) fn push_latest(&mut self, server: NodeId, ch: ChannelId, child: NodeId) {
        if !self.alive(server) || !self.alive(child) || server == child {
            return;
        }
        let Some(st) = self.relays.get(&(ch, server)) else { return };
        let Some(seq) = st.highest else { return };
        let path = st.root_path.clone();
        let backup = self.info(server, ch).and_then(|i| i.backup);
        self.send(server, child, ch, Body::Segment { seq, path, backup });
    }

    // stall detection

    fn watchdog_deadline(&self, n: NodeId, ch: ChannelId) -> Option<f64> {
        let st = self.relays.get(&(ch, n))?;
        let parent = self.info(n, ch)?.parent?;
        let slack = self.cfg.stoppage_rtts * self.rtt_est(n, parent);
        Some(st.last_rx + self.cfg.segment_interval() + slack)
    }

    /// At most one watchdog timer per relay; it re-arms itself lazily.
    pub(crate) fn arm_watchdog(&mut self, n: NodeId, ch: ChannelId) {
        if !self.channels[ch as usize].streaming {
            return;
        }
        let Some(deadline) = self.watchdog_deadline(n, ch) else { return };
        let now = self.now();
        let st = self.relays.get_mut(&(ch, n)).expect("deadline implies state");
        if st.watchdog_armed {
            return;
        }
        st.watchdog_armed = true;
        self.timer(n, (deadline - now).max(0.0), Timer::Watchdog(ch));
    }

    pub(crate) fn on_watchdog(&mut self, n: NodeId, ch: ChannelId) {
        let Some(st) = self.relays.get_mut(&(ch, n)) else { return };
        st.watchdog_armed = false;
        if !self.is_head(ch, n) || !self.channels[ch as usize].streaming {
            return;
        }
        let Some(deadline) = self.watchdog_deadline(n, ch) else { return };
        let now = self.now();
        if now + 1e-9 < deadline {
            self.arm_watchdog(n, ch);
            return;
        }
        let st = self.relays.get_mut(&(ch, n)).expect("checked");
        if st.mode != Mode::Normal {
            return;
        }
        st.mode = Mode::Probing;
        st.gen += 1;
        let gen = st.gen;
        let parent = self.info(n, ch).and_then(|i| i.parent).expect("deadline implies parent");
        self.send(n, parent, ch, Body::IsAlive);
        let wait = self.cfg.probe_timeout_rtts * self.rtt_est(n, parent);
        self.timer(n, wait, Timer::ProbeTimeout(ch, gen));
        self.note_detection(ch, n);
    }

    /// Largest round trip along the recorded root path, including the link
    /// to the current parent.
    pub(crate) fn path_max_rtt(&self, ch: ChannelId, n: NodeId) -> f64 {
        let mut m = self.rtt_ref;
        if let Some(st) = self.relays.get(&(ch, n)) {
            for w in st.root_path.windows(2) {
                m = m.max(self.rtt_est(w[0], w[1]));
            }
        }
        if let Some(p) = self.info(n, ch).and_then(|i| i.parent) {
            m = m.max(self.rtt_est(n, p));
        }
        m
    }

    pub(crate) fn rejoin_delay(&self, n: NodeId, ch: ChannelId) -> f64 {
        self.cfg.rejoin_rtts * self.path_max_rtt(ch, n)
    }

    fn await_stream(&mut self, n: NodeId, ch: ChannelId) -> u64 {
        let delay = self.rejoin_delay(n, ch);
        let st = self.relays.get_mut(&(ch, n)).expect("caller checked");
        st.mode = Mode::AwaitStream;
        st.gen += 1;
        let gen = st.gen;
        self.timer(n, delay, Timer::RejoinTimeout(ch, gen));
        gen
    }

    pub(crate) fn on_alive(&mut self, n: NodeId, from: NodeId, ch: ChannelId) {
        let Some(st) = self.relays.get(&(ch, n)) else { return };
        if st.mode != Mode::Probing || self.info(n, ch).and_then(|i| i.parent) != Some(from) {
            return;
        }
        // The parent lives; its own upstream is being repaired.
        self.await_stream(n, ch);
    }

    pub(crate) fn on_probe_timeout(&mut self, n: NodeId, ch: ChannelId, gen: u64) {
        let Some(st) = self.relays.get(&(ch, n)) else { return };
        if st.gen != gen || st.mode != Mode::Probing {
            return;
        }
        let Some(info) = self.info(n, ch).cloned() else { return };
        self.await_stream(n, ch);
        match (info.backup_parent, info.parent) {
            (Some(b), Some(p)) if self.alive(b) && b != p => {
                self.send(n, b, ch, Body::RecoverTree { failed: p });
            }
            _ => self.independent_rejoin(n, ch),
        }
    }

    pub(crate) fn on_rejoin_timeout(&mut self, n: NodeId, ch: ChannelId, gen: u64) {
        let Some(st) = self.relays.get(&(ch, n)) else { return };
        if st.gen != gen || st.mode == Mode::Normal || !self.is_head(ch, n) {
            return;
        }
        self.independent_rejoin(n, ch);
        let d = self.long_timeout();
        self.timer(n, d, Timer::RejoinTimeout(ch, gen));
    }

    /// A relay asks the source for a fresh attachment of its own clique.
    pub(crate) fn independent_rejoin(&mut self, n: NodeId, ch: ChannelId) {
        let flow = self.new_flow();
        self.send_join_remote(n, ch, flow);
    }

    // recovery bookkeeping

    pub(crate) fn note_detection(&mut self, ch: ChannelId, n: NodeId) {
        let now = self.now();
        for ((c, _), r) in self.recoveries.iter_mut() {
            if *c == ch && r.waiting.contains_key(&n) {
                r.report.detect_time = r.report.detect_time.min(now);
            }
        }
    }

    /// Segments that travelled through the failed node were in flight before
    /// the crash and do not count as recovery.
    pub(crate) fn note_fresh_segment(&mut self, ch: ChannelId, n: NodeId, seq: u64, path: &[NodeId]) {
        let mut done = Vec::new();
        for (k, r) in self.recoveries.iter_mut() {
            if k.0 != ch || path.contains(&k.1) {
                continue;
            }
            if let Some(held) = r.waiting.get(&n) {
                if held.is_none_or(|h| seq > h) {
                    r.waiting.remove(&n);
                    r.any_recovered = true;
                    if r.waiting.is_empty() {
                        done.push(*k);
                    }
                }
            }
        }
        for k in done {
            self.finish_recovery(k, true);
        }
    }

    /// A node stopped relaying or vanished; it no longer gates any recovery.
    pub(crate) fn forget_waiting(&mut self, ch: ChannelId, n: NodeId) {
        let mut done = Vec::new();
        for (k, r) in self.recoveries.iter_mut() {
            if k.0 == ch && r.waiting.remove(&n).is_some() && r.waiting.is_empty() {
                done.push(*k);
            }
        }
        for k in done {
            let ok = self.recoveries[&k].any_recovered;
            self.finish_recovery(k, ok);
        }
    }

    pub(crate) fn finish_recovery(&mut self, k: (ChannelId, NodeId), recovered: bool) {
        let Some(mut r) = self.recoveries.remove(&k) else { return };
        let now = self.now();
        if recovered {
            r.report.recovered_time = Some(now);
        }
        if !r.report.detect_time.is_finite() {
            r.report.detect_time = now;
        }
        let next = self.channels[k.0 as usize].next_seq;
        r.report.segments_lost = next.saturating_sub(r.seq_at_failure);
        self.reports.push(r.report);
    }

    // rejoin after split or merge

    pub(crate) fn on_rejoin(&mut self, n: NodeId, from: NodeId, ch: ChannelId) {
        let mut handled = false;
        if self.feeding.get(&(ch, n)) == Some(&from) {
            handled = true;
            if self.is_head(ch, n) {
                if let Some(st) = self.relays.get_mut(&(ch, n)) {
                    st.rejoining = true;
                }
                self.independent_rejoin(n, ch);
            } else {
                self.send(n, from, ch, Body::RejoinConfirm);
            }
        }
        let misplaced = self.members.get(&(ch, n)).is_some_and(|m| {
            m.relay == from || !self.sub.node(m.relay).member || self.clique_key(m.relay) != self.clique_key(n)
        });
        if misplaced && !self.waits.contains_key(&(ch, n)) {
            handled = true;
            let now = self.now();
            self.begin_join(n, ch, true, now);
        }
        if !handled && self.feeding.contains_key(&(ch, n)) {
            return;
        }
        if !handled && self.alive(from) {
            self.send(n, from, ch, Body::RejoinConfirm);
        }
    }

    pub(crate) fn on_rejoin_confirm(&mut self, f: NodeId, from: NodeId, ch: ChannelId) {
        if self.feeding.get(&(ch, from)) == Some(&f) {
            self.feeding.remove(&(ch, from));
        }
        if let Some(h) = self.info(f, ch).map(|i| i.relay) {
            if h == f || self.alive(h) {
                self.maybe_prune(h, ch);
            }
        }
    }

    pub(crate) fn on_feed_timeout(&mut self, f: NodeId, ch: ChannelId, child: NodeId) {
        if self.feeding.get(&(ch, child)) == Some(&f) {
            self.feeding.remove(&(ch, child));
            if let Some(h) = self.info(f, ch).map(|i| i.relay) {
                self.maybe_prune(h, ch);
            }
        }
    }
}
