//! Channel registration, joins, and tree extension through addNode.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::types::*;
use super::world::{JoinWait, Mode, Pending, Timer, World};
use super::ProtocolError;
use crate::substrate::{CliqueId, NodeId, RoutePolicy, Step};

impl World {
    /// Registers a channel in the directory and makes the relay of the
    /// source's clique the root of its tree.
    pub fn register_channel(&mut self, name: &str, source: NodeId) -> Result<ChannelId, ProtocolError> {
        let name = ChannelName::new(name).ok_or(ProtocolError::EmptyChannelName)?;
        if self.by_name.contains_key(&name) {
            return Err(ProtocolError::DuplicateChannel(name.to_string()));
        }
        self.sub.try_node(source)?;
        if !self.alive(source) {
            return Err(ProtocolError::NodeDown(source));
        }
        let key = self.clique_key(source);
        let (relay, backup) = self.relay_election(key, source, &[]);
        let relay = relay.ok_or(ProtocolError::NoStableNode(source))?;
        let ch = self.channels.len() as ChannelId;
        self.channels.push(super::world::Channel { name: name.clone(), source, next_seq: 0, streaming: false });
        self.by_name.insert(name, ch);
        let info = ChannelInfo::new(relay, backup);
        for h in self.holders(key, ch, &info) {
            self.install(h, ch, info.clone());
        }
        if let Some(st) = self.relays.get_mut(&(ch, relay)) {
            st.root_path = Arc::new(vec![relay]);
        }
        Ok(ch)
    }

    pub fn channel_name(&self, ch: ChannelId) -> &str {
        self.channels[ch as usize].name.as_str()
    }

    fn check_channel(&self, ch: ChannelId) -> Result<(), ProtocolError> {
        if (ch as usize) < self.channels.len() {
            Ok(())
        } else {
            Err(ProtocolError::UnknownChannel(ch.to_string()))
        }
    }

    /// Starts a join. Completion shows up in `outcomes` once the reply lands.
    /// A clique without stable nodes yet keeps retrying after elections.
    pub fn join_channel(&mut self, node: NodeId, ch: ChannelId) -> Result<(), ProtocolError> {
        self.check_channel(ch)?;
        self.sub.try_node(node)?;
        if !self.alive(node) {
            return Err(ProtocolError::NodeDown(node));
        }
        if self.members.contains_key(&(ch, node)) || self.waits.contains_key(&(ch, node)) {
            return Ok(());
        }
        let now = self.now();
        self.begin_join(node, ch, false, now);
        if self.stable_of(self.clique_key(node)).is_empty() {
            return Err(ProtocolError::NoStableNode(node));
        }
        Ok(())
    }

    pub fn join_channel_by_name(&mut self, node: NodeId, name: &str) -> Result<(), ProtocolError> {
        let ch = self.channel_id(name).ok_or_else(|| ProtocolError::UnknownChannel(name.to_string()))?;
        self.join_channel(node, ch)
    }

    pub(crate) fn begin_join(&mut self, j: NodeId, ch: ChannelId, rejoin: bool, start: f64) {
        let flow = self.new_flow();
        self.waits.insert((ch, j), JoinWait { flow, start, rejoin, contacted: false });
        let delay = self.long_timeout();
        self.timer(j, delay, Timer::JoinRetry(ch, flow));
        let key = self.clique_key(j);
        let me = self.pos(j);
        let nearest = self
            .stable_of(key)
            .into_iter()
            .filter(|s| !self.leaving.contains_key(s))
            .min_by(|a, b| crate::geometry::distance(self.pos(*a), me).total_cmp(&crate::geometry::distance(self.pos(*b), me)).then(a.cmp(b)));
        if let Some(s) = nearest {
            self.send(j, s, ch, Body::Join { joiner: j, join_id: flow });
            if let Some(w) = self.waits.get_mut(&(ch, j)) {
                w.contacted = true;
            }
        }
    }

    pub(crate) fn on_join_retry(&mut self, j: NodeId, ch: ChannelId, flow: u64) {
        let Some(w) = self.waits.get(&(ch, j)) else { return };
        if w.flow != flow {
            return;
        }
        let (start, rejoin) = (w.start, w.rejoin);
        self.waits.remove(&(ch, j));
        self.begin_join(j, ch, rejoin, start);
    }

    pub(crate) fn on_join(&mut self, x: NodeId, from: NodeId, ch: ChannelId, joiner: NodeId, join_id: u64) {
        if from != joiner && self.info(x, ch).is_none() {
            // Notification for a relay role this node no longer has.
            if self.alive(joiner) {
                self.send(x, joiner, ch, Body::Rejoin);
            }
            return;
        }
        if let Some(info) = self.info(x, ch) {
            let relay = info.relay;
            if from != joiner {
                // Notification from a stable node that already answered.
                if relay == x {
                    self.recipients.entry((ch, x)).or_default().insert(joiner);
                } else if self.alive(relay) {
                    self.send(x, relay, ch, Body::Join { joiner, join_id });
                }
                return;
            }
            self.serve_local(x, ch, joiner, join_id);
            return;
        }
        let now = self.now();
        let stale = self.long_timeout();
        match self.pending.get_mut(&(x, ch)) {
            Some(p) => {
                let waits = &self.waits;
                p.joiners.retain(|(n, _)| waits.contains_key(&(ch, *n)));
                if !p.joiners.iter().any(|(n, _)| *n == joiner) {
                    p.joiners.push((joiner, join_id));
                }
                if now - p.sent_at > stale {
                    p.sent_at = now;
                    let flow = p.flow;
                    self.send_join_remote(x, ch, flow);
                }
            }
            None => {
                let flow = self.new_flow();
                self.pending.insert((x, ch), Pending { joiners: vec![(joiner, join_id)], flow, sent_at: now });
                self.send_join_remote(x, ch, flow);
            }
        }
    }

    pub(crate) fn send_join_remote(&mut self, requester: NodeId, ch: ChannelId, flow: u64) {
        self.count_flow(flow);
        let target = self.clique_id(requester);
        let src = self.source_of(ch);
        self.send(requester, src, ch, Body::JoinRemote { requester, target, join_id: flow });
    }

    /// Answers a joiner from a node holding the channel's replica and lets
    /// the relay know about its new recipient.
    pub(crate) fn serve_local(&mut self, x: NodeId, ch: ChannelId, joiner: NodeId, join_id: u64) {
        let Some(relay) = self.info(x, ch).map(|i| i.relay) else { return };
        let partners = self.partner_sample(ch, relay, joiner);
        if relay == x {
            self.recipients.entry((ch, x)).or_default().insert(joiner);
        } else {
            self.send(x, relay, ch, Body::Join { joiner, join_id });
        }
        self.send(x, joiner, ch, Body::JoinReply { relay, partners, join_id });
    }

    pub(crate) fn flush_pending(&mut self, x: NodeId, ch: ChannelId) {
        if self.info(x, ch).is_none() {
            return;
        }
        if let Some(p) = self.pending.remove(&(x, ch)) {
            for (j, _) in p.joiners {
                if self.alive(j) {
                    self.serve_local(x, ch, j, p.flow);
                }
            }
        }
    }

    pub(crate) fn on_join_reply(&mut self, j: NodeId, ch: ChannelId, relay: NodeId, partners: Vec<NodeId>, join_id: u64) {
        let now = self.now();
        let old = self.members.get(&(ch, j)).map(|m| m.relay);
        if let Some(w) = self.waits.remove(&(ch, j)) {
            let spent = self.flows.get(&join_id).copied().unwrap_or(0);
            let local = spent == 0;
            if !w.rejoin {
                self.outcomes.push(JoinOutcome {
                    node: j,
                    channel: ch,
                    messages_used: if local { 1 } else { spent },
                    startup_delay: now - w.start,
                    partners: partners.clone(),
                    local,
                });
            }
        } else if old.is_none() {
            // Left while the reply was in flight.
            if self.alive(relay) && relay != j {
                self.send(j, relay, ch, Body::Leave { prune: false });
            }
            return;
        }
        if let Some(o) = old {
            if o != relay && self.alive(o) {
                self.send(j, o, ch, Body::Leave { prune: false });
            }
        }
        let joined_at = self.members.get(&(ch, j)).map(|m| m.joined_at).unwrap_or(now);
        self.members.insert((ch, j), super::world::Membership { relay, partners, joined_at });
        if !self.sub.node(relay).member {
            self.begin_join(j, ch, true, now);
        }
    }

    pub(crate) fn on_join_remote(&mut self, src: NodeId, ch: ChannelId, requester: NodeId, target: CliqueId, join_id: u64) {
        if self.source_of(ch) != src {
            return;
        }
        let Some(info) = self.info(src, ch).cloned() else { return };
        let head = info.relay;
        if self.sub.owner_of_key(target.bits()) == self.clique_key(src) {
            if requester != src {
                self.send(src, requester, ch, Body::ChannelInfoUpdate { info: Some(info) });
            }
            return;
        }
        let path = self.path_of(ch, head);
        let req = AddNodeReq {
            join_id,
            requester,
            target,
            upstream: head,
            upstream_backup: info.backup,
            upstream_path: path,
            inter_hops: 0,
            hook_clique: 0,
        };
        self.forward_add_node(src, ch, req);
    }

    /// Root path of a relay node, never empty.
    pub(crate) fn path_of(&self, ch: ChannelId, n: NodeId) -> Arc<Vec<NodeId>> {
        match self.relays.get(&(ch, n)) {
            Some(st) if !st.root_path.is_empty() => st.root_path.clone(),
            _ => Arc::new(vec![n]),
        }
    }

    pub(crate) fn on_add_node(&mut self, at: NodeId, ch: ChannelId, req: AddNodeReq) {
        self.forward_add_node(at, ch, req);
    }

    /// One forwarding step of a routed addNode held by `at`. The forward hook
    /// runs at the first stable node of every clique after the upstream's.
    pub(crate) fn forward_add_node(&mut self, at: NodeId, ch: ChannelId, mut req: AddNodeReq) {
        let key = self.clique_key(at);
        if self.sub.is_stable(at) && key != self.clique_key(req.upstream) {
            self.run_hook(at, ch, req);
            return;
        }
        let target = req.target.bits();
        let step = match self.sub.next_hop(at, target, None, RoutePolicy::PreferStable) {
            Ok(s) => s,
            Err(_) => return,
        };
        let next = match step {
            Step::Arrived => return,
            Step::Intra(n) => n,
            Step::Inter(n) => {
                self.count_flow(req.join_id);
                req.inter_hops += 1;
                n
            }
        };
        let dst = Address { clique: Some(req.target), node: Some(req.requester) };
        let header = Header { src: Address { clique: Some(self.clique_id(at)), node: Some(at) }, dst, msg_type: MsgType::AddNode };
        self.send_msg(at, next, Message { header, channel: ch, body: Body::AddNode(req) });
    }

    /// Hands the request to this clique's relay for the channel, electing one
    /// if the clique does not carry it yet. The routed original stops here.
    fn run_hook(&mut self, at: NodeId, ch: ChannelId, mut req: AddNodeReq) {
        let key = self.clique_key(at);
        let claimed = self.claims.get(&(ch, key)).copied().filter(|r| self.sub.node(*r).member && self.clique_key(*r) == key);
        let relay = match self.head_in_clique(ch, key).or(claimed) {
            Some(r) => r,
            None => {
                let Some(r) = self.relay_election(key, at, &[]).0 else { return };
                self.claims.insert((ch, key), r);
                r
            }
        };
        req.hook_clique = key;
        self.send(at, relay, ch, Body::AddNodeFwd(req));
    }

    pub(crate) fn on_add_node_fwd(&mut self, r: NodeId, ch: ChannelId, req: AddNodeReq) {
        let key = self.clique_key(r);
        if key != req.hook_clique || !self.sub.is_stable(r) {
            self.forward_add_node(r, ch, req);
            return;
        }
        if let Some(h) = self.head_in_clique(ch, key) {
            if h != r {
                self.send(r, h, ch, Body::AddNodeFwd(req));
                return;
            }
        }
        let accepted = if self.is_head(ch, r) { self.extend_existing(r, ch, &req) } else { self.create_relay(r, ch, &req) };
        if self.alive(req.upstream) {
            let backup = self.info(r, ch).and_then(|i| i.backup);
            self.send(r, req.upstream, ch, Body::AddNodeAck { join_id: req.join_id, accepted, backup });
        }
        if accepted {
            self.finish_rejoin(r, ch);
        }
        if self.sub.owner_of_key(req.target.bits()) == key {
            if req.requester == r {
                self.flush_pending(r, ch);
            } else if self.alive(req.requester) {
                let info = self.info(r, ch).cloned();
                self.send(r, req.requester, ch, Body::ChannelInfoUpdate { info });
            }
            return;
        }
        let info = self.info(r, ch).cloned().expect("relay holds its replica");
        let next = AddNodeReq {
            join_id: req.join_id,
            requester: req.requester,
            target: req.target,
            upstream: r,
            upstream_backup: info.backup,
            upstream_path: self.path_of(ch, r),
            inter_hops: req.inter_hops,
            hook_clique: 0,
        };
        self.awaiting.entry((ch, r)).or_default().insert(req.join_id);
        let d = self.long_timeout();
        self.timer(r, d, Timer::AckTimeout(ch, req.join_id));
        self.forward_add_node(r, ch, next);
    }

    fn create_relay(&mut self, r: NodeId, ch: ChannelId, req: &AddNodeReq) -> bool {
        let backup = self.pick_backup(r, &[]);
        let mut info = ChannelInfo::new(r, backup);
        info.parent = Some(req.upstream);
        info.backup_parent = req.upstream_backup;
        self.install(r, ch, info);
        let now = self.now();
        let streaming = self.channels[ch as usize].streaming;
        if let Some(st) = self.relays.get_mut(&(ch, r)) {
            let mut p = (*req.upstream_path).clone();
            p.push(r);
            st.root_path = Arc::new(p);
            st.last_rx = now;
        }
        if streaming {
            self.arm_watchdog(r, ch);
        }
        self.publish(r, ch, &BTreeSet::new());
        true
    }

    /// The clique already relays the channel. A relay that lost its stream
    /// or was told to rejoin moves under the new upstream unless that would
    /// close a cycle; otherwise the existing attachment stands.
    fn extend_existing(&mut self, r: NodeId, ch: ChannelId, req: &AddNodeReq) -> bool {
        let info = self.info(r, ch).cloned().expect("head has a replica");
        if info.parent == Some(req.upstream) {
            return true;
        }
        if info.parent.is_none() || req.upstream == r || req.upstream_path.contains(&r) || info.is_relay_node(req.upstream) {
            return false;
        }
        let Some(st) = self.relays.get(&(ch, r)) else { return false };
        if st.mode == Mode::Normal && !st.rejoining {
            return false;
        }
        let old = info.parent;
        let feeder = self.feeding.get(&(ch, r)).copied();
        if let Some(o) = old {
            if o != req.upstream && self.alive(o) && Some(o) != feeder {
                self.send(r, o, ch, Body::Leave { prune: true });
            }
        }
        let (up, upb) = (req.upstream, req.upstream_backup);
        self.update_info(r, ch, |_, i| {
            i.parent = Some(up);
            i.backup_parent = upb;
        });
        let now = self.now();
        let delay = self.rejoin_delay(r, ch);
        if let Some(st) = self.relays.get_mut(&(ch, r)) {
            if let Some(o) = old {
                st.pruned.insert(o);
            }
            st.pruned.remove(&up);
            let mut p = (*req.upstream_path).clone();
            p.push(r);
            st.root_path = Arc::new(p);
            st.last_rx = now;
            if st.mode != Mode::Normal {
                st.mode = Mode::AwaitStream;
                st.gen += 1;
                let gen = st.gen;
                self.timer(r, delay, Timer::RejoinTimeout(ch, gen));
            }
        }
        true
    }

    /// A rejoining relay found its place; the node feeding it may stop.
    fn finish_rejoin(&mut self, r: NodeId, ch: ChannelId) {
        if let Some(st) = self.relays.get_mut(&(ch, r)) {
            st.rejoining = false;
        }
        if let Some(f) = self.feeding.get(&(ch, r)).copied() {
            if self.alive(f) {
                self.send(r, f, ch, Body::RejoinConfirm);
            } else {
                self.feeding.remove(&(ch, r));
            }
        }
    }

    pub(crate) fn on_ack(&mut self, u: NodeId, from: NodeId, ch: ChannelId, join_id: u64, accepted: bool) {
        if let Some(a) = self.awaiting.get_mut(&(ch, u)) {
            a.remove(&join_id);
        }
        if accepted && self.is_head(ch, u) {
            let known = self.info(u, ch).is_some_and(|i| i.children.contains_key(&from));
            if !known {
                self.update_info(u, ch, |w, i| w.place_child(i, from));
            }
            let server = self.info(u, ch).and_then(|i| i.children.get(&from).copied());
            if let Some(s) = server {
                self.push_latest(s, ch, from);
            }
        }
        self.maybe_prune(u, ch);
    }

    pub(crate) fn on_ack_timeout(&mut self, u: NodeId, ch: ChannelId, join_id: u64) {
        let removed = self.awaiting.get_mut(&(ch, u)).is_some_and(|a| a.remove(&join_id));
        if removed {
            self.maybe_prune(u, ch);
        }
    }

    pub(crate) fn on_info_update(&mut self, x: NodeId, from: NodeId, ch: ChannelId, info: Option<ChannelInfo>) {
        let my_key = self.clique_key(x);
        match info {
            None => {
                let follows = self.info(x, ch).map(|i| i.relay);
                if follows == Some(from) || follows.is_some_and(|r| !self.alive(r) || self.clique_key(r) != my_key) {
                    self.drop_replica(x, ch);
                }
            }
            Some(info) => {
                if self.clique_key(info.relay) != my_key || !self.alive(info.relay) {
                    if self.info(x, ch).is_some_and(|i| self.clique_key(i.relay) != my_key) {
                        self.drop_replica(x, ch);
                    }
                    return;
                }
                let old_relay = self.info(x, ch).map(|i| i.relay);
                let is_src = self.source_of(ch) == x;
                self.install(x, ch, info.clone());
                if is_src {
                    if let Some(o) = old_relay {
                        if o != info.relay && self.leaving.contains_key(&o) && self.alive(o) {
                            self.send(x, o, ch, Body::Release);
                        }
                    }
                }
                self.flush_pending(x, ch);
            }
        }
    }
}
