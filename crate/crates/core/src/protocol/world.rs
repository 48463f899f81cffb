use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::types::*;
use super::{ProtocolConfig, ProtocolError};
use crate::geometry::{distance, Point};
use crate::rng::{substream, SimRng};
use crate::sim::{ChurnEvent, Engine, MessageStats, SimConfig};
use crate::substrate::{CliqueId, NodeId, Substrate};

#[derive(Debug, Clone, PartialEq)]
pub enum Timer {
    Watchdog(ChannelId),
    ProbeTimeout(ChannelId, u64),
    RejoinTimeout(ChannelId, u64),
    Heartbeat(ChannelId),
    HeartbeatTimeout(ChannelId, u64),
    JoinRetry(ChannelId, u64),
    AckTimeout(ChannelId, u64),
    FeedTimeout(ChannelId, NodeId),
    LeaveTimeout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Deliver { from: NodeId, to: NodeId, msg: Message },
    Timer { node: NodeId, timer: Timer },
    SourceTick(ChannelId),
    Churn(ChurnEvent),
    RemoveCrashed(NodeId),
    Eligible(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Normal,
    /// Stream stalled; `isAlive` sent to the parent.
    Probing,
    /// Waiting for the stream to come back through someone else's repair.
    AwaitStream,
}

/// Data-plane state of one relay node for one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayState {
    pub highest: Option<u64>,
    pub missing: BTreeSet<u64>,
    pub last_rx: f64,
    /// Relay nodes from the root down to this one, as carried by the last segment.
    pub root_path: Arc<Vec<NodeId>>,
    pub mode: Mode,
    pub gen: u64,
    pub watchdog_armed: bool,
    /// Told to rejoin after a split or merge; parent switching is frozen.
    pub rejoining: bool,
    /// Former parents this node asked to stop pushing.
    pub pruned: BTreeSet<NodeId>,
}

impl RelayState {
    pub fn new(now: f64) -> Self {
        RelayState {
            highest: None,
            missing: BTreeSet::new(),
            last_rx: now,
            root_path: Arc::new(Vec::new()),
            mode: Mode::Normal,
            gen: 0,
            watchdog_armed: false,
            rejoining: false,
            pruned: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub relay: NodeId,
    pub partners: Vec<NodeId>,
    pub joined_at: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Channel {
    pub name: ChannelName,
    pub source: NodeId,
    pub next_seq: u64,
    pub streaming: bool,
}

/// Joiners parked at a stable node while its joinRemote is outstanding.
#[derive(Debug, Clone)]
pub(crate) struct Pending {
    pub joiners: Vec<(NodeId, u64)>,
    pub flow: u64,
    pub sent_at: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct JoinWait {
    pub flow: u64,
    pub start: f64,
    pub rejoin: bool,
    /// A stable node of the joiner's clique was asked.
    pub contacted: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct ActiveRecovery {
    pub report: RecoveryReport,
    /// Nodes that must see a fresh segment, with what they held at the failure.
    pub waiting: BTreeMap<NodeId, Option<u64>>,
    pub any_recovered: bool,
    pub seq_at_failure: u64,
    /// The failed node, its backup and every relay below it at failure time.
    /// Only messages touching these nodes count toward the report.
    pub scope: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Departure {
    /// False when only handing roles over, as after a split.
    pub depart: bool,
    pub awaiting: BTreeSet<ChannelId>,
    /// Successor to forward segments to until released.
    pub forward: BTreeMap<ChannelId, NodeId>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Heartbeat {
    pub gen: u64,
    pub running: bool,
}

pub struct World {
    pub sub: Substrate<f64>,
    pub(crate) eng: Engine<Event>,
    pub cfg: ProtocolConfig,
    pub(crate) channels: Vec<Channel>,
    pub(crate) by_name: BTreeMap<ChannelName, ChannelId>,
    pub(crate) replicas: BTreeMap<NodeId, BTreeMap<ChannelId, ChannelInfo>>,
    pub(crate) heads: BTreeMap<ChannelId, BTreeSet<NodeId>>,
    pub(crate) relays: BTreeMap<(ChannelId, NodeId), RelayState>,
    pub(crate) recipients: BTreeMap<(ChannelId, NodeId), BTreeSet<NodeId>>,
    pub(crate) members: BTreeMap<(ChannelId, NodeId), Membership>,
    pub(crate) pending: BTreeMap<(NodeId, ChannelId), Pending>,
    /// Inter-clique messages spent per join flow.
    pub(crate) flows: BTreeMap<u64, u32>,
    pub(crate) waits: BTreeMap<(ChannelId, NodeId), JoinWait>,
    /// Relay elections decided but not yet installed, per (channel, clique key).
    pub(crate) claims: BTreeMap<(ChannelId, u64), NodeId>,
    /// Reissued addNode requests a relay still expects an ack for.
    pub(crate) awaiting: BTreeMap<(ChannelId, NodeId), BTreeSet<u64>>,
    pub(crate) heartbeats: BTreeMap<(ChannelId, NodeId), Heartbeat>,
    pub(crate) outcomes: Vec<JoinOutcome>,
    pub(crate) recoveries: BTreeMap<(ChannelId, NodeId), ActiveRecovery>,
    pub(crate) reports: Vec<RecoveryReport>,
    pub(crate) leaving: BTreeMap<NodeId, Departure>,
    /// Displaced child -> former parent still pushing to it.
    pub(crate) feeding: BTreeMap<(ChannelId, NodeId), NodeId>,
    pub(crate) crashed: BTreeMap<NodeId, f64>,
    pub(crate) rng: SimRng,
    pub(crate) churn_rng: SimRng,
    pub(crate) next_flow: u64,
    pub(crate) rtt_ref: f64,
    pub(crate) control_in_flight: i64,
    pub(crate) sent_by_type: BTreeMap<MsgType, u64>,
    pub(crate) plane_side: f64,
    pub(crate) churn_join_prob: f64,
}

impl World {
    pub fn new(sub: Substrate<f64>, cfg: ProtocolConfig, sim: SimConfig, seed: u64) -> Result<Self, ProtocolError> {
        let mut v = cfg.violations();
        v.extend(sim.violations());
        if !v.is_empty() {
            return Err(ProtocolError::InvalidConfig(v.join("; ")));
        }
        let rtt_ref = (sub.mean_adjacent_rtt() * sim.latency_scale).max(1e-3);
        let plane_side = sub.nodes().iter().map(|n| n.position.x.max(n.position.y)).fold(1.0, f64::max);
        let mut sub = sub;
        sub.take_notices();
        Ok(World {
            sub,
            eng: Engine::new(sim),
            cfg,
            channels: Vec::new(),
            by_name: BTreeMap::new(),
            replicas: BTreeMap::new(),
            heads: BTreeMap::new(),
            relays: BTreeMap::new(),
            recipients: BTreeMap::new(),
            members: BTreeMap::new(),
            pending: BTreeMap::new(),
            flows: BTreeMap::new(),
            waits: BTreeMap::new(),
            claims: BTreeMap::new(),
            awaiting: BTreeMap::new(),
            heartbeats: BTreeMap::new(),
            outcomes: Vec::new(),
            recoveries: BTreeMap::new(),
            reports: Vec::new(),
            leaving: BTreeMap::new(),
            feeding: BTreeMap::new(),
            crashed: BTreeMap::new(),
            rng: substream(seed, "partners"),
            churn_rng: substream(seed, "churn-targets"),
            next_flow: 0,
            rtt_ref,
            control_in_flight: 0,
            sent_by_type: BTreeMap::new(),
            plane_side,
            churn_join_prob: 0.0,
        })
    }

    pub fn now(&self) -> f64 {
        self.eng.now()
    }

    pub fn engine(&self) -> &Engine<Event> {
        &self.eng
    }

    pub fn stats(&self) -> MessageStats {
        self.eng.stats
    }

    pub fn digest(&self) -> String {
        self.eng.digest()
    }

    /// Mean round trip between adjacent cliques.
    pub fn rtt_ref(&self) -> f64 {
        self.rtt_ref
    }

    pub fn heartbeat_interval(&self) -> f64 {
        self.cfg.heartbeat_rtts * self.rtt_ref
    }

    /// How long the membership layer takes to notice a crash.
    pub fn member_timeout(&self) -> f64 {
        self.heartbeat_interval() + 4.0 * self.rtt_ref
    }

    /// Patience for anything that crosses the whole overlay.
    pub(crate) fn long_timeout(&self) -> f64 {
        self.cfg.join_retry_rtts * self.rtt_ref + 16.0 * self.eng.latency(self.plane_side * std::f64::consts::SQRT_2)
    }

    pub fn set_plane_side(&mut self, side: f64) {
        self.plane_side = side;
    }

    /// Chance that a node arriving through churn joins a random channel.
    pub fn set_churn_join_prob(&mut self, p: f64) {
        self.churn_join_prob = p.clamp(0.0, 1.0);
    }

    pub fn sent_by_type(&self) -> &BTreeMap<MsgType, u64> {
        &self.sent_by_type
    }

    pub fn outcomes(&self) -> &[JoinOutcome] {
        &self.outcomes
    }

    pub fn reports(&self) -> &[RecoveryReport] {
        &self.reports
    }

    pub fn channel_id(&self, name: &str) -> Option<ChannelId> {
        self.by_name.get(&ChannelName::new(name)?).copied()
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = ChannelId> {
        0..self.channels.len() as ChannelId
    }

    pub fn source_of(&self, ch: ChannelId) -> NodeId {
        self.channels[ch as usize].source
    }

    pub fn info(&self, node: NodeId, ch: ChannelId) -> Option<&ChannelInfo> {
        self.replicas.get(&node)?.get(&ch)
    }

    pub fn relay_state(&self, ch: ChannelId, node: NodeId) -> Option<&RelayState> {
        self.relays.get(&(ch, node))
    }

    pub fn heads(&self, ch: ChannelId) -> Vec<NodeId> {
        self.heads.get(&ch).map(|h| h.iter().copied().collect()).unwrap_or_default()
    }

    /// The head relay of the source's clique.
    pub fn root_head(&self, ch: ChannelId) -> Option<NodeId> {
        let src = self.source_of(ch);
        let key = self.clique_key(src);
        self.head_in_clique(ch, key)
    }

    pub fn membership(&self, ch: ChannelId, node: NodeId) -> Option<&Membership> {
        self.members.get(&(ch, node))
    }

    pub fn recipients_of(&self, ch: ChannelId, relay: NodeId) -> Vec<NodeId> {
        self.recipients.get(&(ch, relay)).map(|r| r.iter().copied().collect()).unwrap_or_default()
    }

    pub fn members_of(&self, ch: ChannelId) -> Vec<NodeId> {
        self.members.keys().filter(|(c, _)| *c == ch).map(|(_, n)| *n).collect()
    }

    pub fn pos(&self, n: NodeId) -> Point<f64> {
        self.sub.position(n)
    }

    pub fn dist(&self, a: NodeId, b: NodeId) -> f64 {
        distance(self.pos(a), self.pos(b))
    }

    /// Round-trip estimate of a link: twice its one-way latency.
    pub fn rtt_est(&self, a: NodeId, b: NodeId) -> f64 {
        2.0 * self.eng.latency(self.dist(a, b))
    }

    pub fn alive(&self, n: NodeId) -> bool {
        self.sub.is_alive(n)
    }

    pub fn clique_key(&self, n: NodeId) -> u64 {
        self.sub.node(n).clique
    }

    pub fn clique_id(&self, n: NodeId) -> CliqueId {
        self.sub.clique_id_of(n)
    }

    /// The head relay of `ch` in a clique, dead or alive, as long as it is
    /// still listed there. Stands in for the clique's agreement on who relays.
    pub fn head_in_clique(&self, ch: ChannelId, key: u64) -> Option<NodeId> {
        self.heads.get(&ch)?.iter().copied().find(|h| self.sub.node(*h).member && self.clique_key(*h) == key)
    }

    pub(crate) fn is_head(&self, ch: ChannelId, n: NodeId) -> bool {
        self.info(n, ch).is_some_and(|i| i.relay == n)
    }

    pub(crate) fn new_flow(&mut self) -> u64 {
        self.next_flow += 1;
        self.flows.insert(self.next_flow, 0);
        self.next_flow
    }

    pub(crate) fn count_flow(&mut self, flow: u64) {
        *self.flows.entry(flow).or_insert(0) += 1;
    }

    // messaging

    pub(crate) fn header(&self, from: NodeId, to: NodeId, t: MsgType) -> Header {
        Header {
            src: Address { clique: Some(self.clique_id(from)), node: Some(from) },
            dst: Address { clique: Some(self.clique_id(to)), node: Some(to) },
            msg_type: t,
        }
    }

    pub(crate) fn send(&mut self, from: NodeId, to: NodeId, ch: ChannelId, body: Body) {
        let header = self.header(from, to, body.msg_type());
        self.send_msg(from, to, Message { header, channel: ch, body });
    }

    pub(crate) fn send_msg(&mut self, from: NodeId, to: NodeId, msg: Message) {
        let t = msg.header.msg_type;
        *self.sent_by_type.entry(t).or_insert(0) += 1;
        if quiescence_relevant(t) {
            self.control_in_flight += 1;
        }
        if matches!(t, MsgType::IsAlive | MsgType::Alive | MsgType::RecoverTree | MsgType::HandOver) {
            self.count_recovery_message(msg.channel, from, to);
        }
        let d = self.dist(from, to);
        self.eng.send(d, Event::Deliver { from, to, msg });
    }

    pub(crate) fn count_recovery_message(&mut self, ch: ChannelId, from: NodeId, to: NodeId) {
        for ((c, _), r) in self.recoveries.iter_mut() {
            if *c == ch && (r.scope.contains(&from) || r.scope.contains(&to)) {
                r.report.control_messages += 1;
            }
        }
    }

    pub(crate) fn timer(&mut self, node: NodeId, delay: f64, timer: Timer) {
        self.eng.schedule_in(delay, Event::Timer { node, timer });
    }

    // replicas

    /// Live stable members of a clique.
    pub(crate) fn stable_of(&self, key: u64) -> Vec<NodeId> {
        self.sub.clique(key).map(|c| c.stable.iter().copied().filter(|n| self.alive(*n)).collect()).unwrap_or_default()
    }

    /// Nodes that hold a clique's replica: its live stable nodes, the relay
    /// chain, and the channel's source when it lives there.
    pub(crate) fn holders(&self, key: u64, ch: ChannelId, info: &ChannelInfo) -> BTreeSet<NodeId> {
        let mut h: BTreeSet<NodeId> = self.stable_of(key).into_iter().collect();
        h.extend(info.chain().filter(|n| self.alive(*n) && self.clique_key(*n) == key));
        let src = self.source_of(ch);
        if self.alive(src) && self.clique_key(src) == key {
            h.insert(src);
        }
        h
    }

    /// Local write of a replica; keeps the head index and relay states in step.
    pub(crate) fn install(&mut self, node: NodeId, ch: ChannelId, info: ChannelInfo) {
        let is_head = info.relay == node;
        let in_chain = info.is_relay_node(node);
        let backup_here = info.backup == Some(node);
        self.replicas.entry(node).or_default().insert(ch, info);
        let heads = self.heads.entry(ch).or_default();
        if is_head {
            heads.insert(node);
            let key = self.clique_key(node);
            self.claims.remove(&(ch, key));
        } else {
            heads.remove(&node);
        }
        if in_chain {
            let now = self.now();
            self.relays.entry((ch, node)).or_insert_with(|| RelayState::new(now));
        } else {
            self.relays.remove(&(ch, node));
        }
        if backup_here {
            self.start_heartbeat(ch, node);
        }
        if self.pending.contains_key(&(node, ch)) {
            self.flush_pending(node, ch);
        }
    }

    pub(crate) fn drop_replica(&mut self, node: NodeId, ch: ChannelId) {
        if let Some(m) = self.replicas.get_mut(&node) {
            m.remove(&ch);
            if m.is_empty() {
                self.replicas.remove(&node);
            }
        }
        if let Some(h) = self.heads.get_mut(&ch) {
            h.remove(&node);
        }
        self.relays.remove(&(ch, node));
        self.awaiting.remove(&(ch, node));
    }

    /// The head bumps the version and pushes its replica to every other
    /// holder; former holders that no longer qualify are told to drop it.
    pub(crate) fn publish(&mut self, head: NodeId, ch: ChannelId, previous: &BTreeSet<NodeId>) {
        let Some(mut info) = self.info(head, ch).cloned() else { return };
        info.version += 1;
        let key = self.clique_key(head);
        self.install(head, ch, info.clone());
        let holders = self.holders(key, ch, &info);
        for &h in &holders {
            if h != head {
                self.send(head, h, ch, Body::ChannelInfoUpdate { info: Some(info.clone()) });
            }
        }
        for &p in previous {
            if !holders.contains(&p) && p != head && self.alive(p) && self.info(p, ch).is_some() {
                self.send(head, p, ch, Body::ChannelInfoUpdate { info: None });
            }
        }
    }

    /// Applies a change at the head and replicates it.
    pub(crate) fn update_info(&mut self, head: NodeId, ch: ChannelId, f: impl FnOnce(&mut Self, &mut ChannelInfo)) {
        let Some(mut info) = self.info(head, ch).cloned() else { return };
        let key = self.clique_key(head);
        let before = self.holders(key, ch, &info);
        f(self, &mut info);
        self.install(head, ch, info);
        self.publish(head, ch, &before);
    }

    /// Stops relaying `ch` at a head: every holder drops the replica.
    pub(crate) fn retire(&mut self, head: NodeId, ch: ChannelId) {
        let Some(info) = self.info(head, ch).cloned() else { return };
        let key = self.clique_key(head);
        for h in self.holders(key, ch, &info) {
            if h != head {
                self.send(head, h, ch, Body::ChannelInfoUpdate { info: None });
            }
        }
        for n in info.chain().collect::<Vec<_>>() {
            if n != head {
                self.drop_replica(n, ch);
            }
        }
        self.drop_replica(head, ch);
        self.recipients.remove(&(ch, head));
        self.forget_waiting(ch, head);
        let orphans: Vec<NodeId> = self.members.iter().filter(|((c, _), m)| *c == ch && m.relay == head).map(|((_, n), _)| *n).collect();
        for m in orphans {
            if self.alive(m) && self.alive(head) {
                self.send(head, m, ch, Body::Rejoin);
            }
        }
    }

    pub(crate) fn relay_roles(&self, n: NodeId) -> usize {
        self.replicas.get(&n).map(|m| m.values().filter(|i| i.is_relay_node(n)).count()).unwrap_or(0)
    }

    /// Spare uplink after the relay roles a node already carries.
    pub fn residual(&self, n: NodeId) -> f64 {
        self.sub.node(n).uplink / (1 + self.relay_roles(n)) as f64
    }

    /// Ranks candidates by spare uplink, ties by id.
    pub(crate) fn rank_by_bandwidth(&self, mut c: Vec<NodeId>) -> Vec<NodeId> {
        c.sort_by(|a, b| self.residual(*b).total_cmp(&self.residual(*a)).then(a.cmp(b)));
        c
    }

    /// Relay and backup for a clique newly carrying a channel.
    pub fn relay_election(&self, key: u64, receiving: NodeId, exclude: &[NodeId]) -> (Option<NodeId>, Option<NodeId>) {
        let cands: Vec<NodeId> = self.stable_of(key).into_iter().filter(|n| !exclude.contains(n) && !self.leaving.contains_key(n)).collect();
        let ranked = self.rank_by_bandwidth(cands);
        let relay = match self.cfg.relay_policy {
            RelayPolicy::ReceivingNode if ranked.contains(&receiving) => Some(receiving),
            _ => ranked.first().copied(),
        };
        let backup = ranked.iter().copied().find(|n| Some(*n) != relay);
        (relay, backup)
    }

    /// Best backup for a head, excluding the head and anything in `exclude`.
    pub(crate) fn pick_backup(&self, head: NodeId, exclude: &[NodeId]) -> Option<NodeId> {
        let key = self.clique_key(head);
        let cands: Vec<NodeId> =
            self.stable_of(key).into_iter().filter(|n| *n != head && !exclude.contains(n) && !self.leaving.contains_key(n)).collect();
        self.rank_by_bandwidth(cands).first().copied()
    }

    // relay chain

    /// Finds a chain node with a free slot for `child`, recruiting a helper
    /// when every node is at full fan-out.
    pub(crate) fn place_child(&mut self, info: &mut ChannelInfo, child: NodeId) {
        let cap = self.sub.config().fanout();
        info.children.remove(&child);
        let chain: Vec<NodeId> = info.chain().collect();
        if let Some(&s) = chain.iter().find(|n| info.out_links(**n).len() < cap) {
            info.children.insert(child, s);
            return;
        }
        let last = *chain.last().expect("chain has a head");
        let Some(h) = self.recruit_helper(info) else {
            // No node to spread the load over; overload the head.
            info.children.insert(child, info.relay);
            return;
        };
        // The last node gives one child slot to the link that feeds the helper.
        if let Some(moved) = info.children.iter().rev().find(|(_, s)| **s == last).map(|(c, _)| *c) {
            info.children.insert(moved, h);
        }
        info.helpers.push(h);
        info.children.insert(child, h);
    }

    fn recruit_helper(&mut self, info: &ChannelInfo) -> Option<NodeId> {
        let key = self.clique_key(info.relay);
        let cands: Vec<NodeId> = self
            .stable_of(key)
            .into_iter()
            .filter(|n| !info.is_relay_node(*n) && Some(*n) != info.backup && !self.leaving.contains_key(n))
            .collect();
        if let Some(&h) = self.rank_by_bandwidth(cands).first() {
            return Some(h);
        }
        if let Some(h) = self.sub.recruit_stable(key) {
            return Some(h);
        }
        info.backup.filter(|b| self.alive(*b) && !info.is_relay_node(*b))
    }

    /// Drops a node from the chain and finds new servers for what it fed.
    pub(crate) fn remove_from_chain(&mut self, info: &mut ChannelInfo, n: NodeId) {
        info.helpers.retain(|h| *h != n);
        let orphans: Vec<NodeId> = info.children.iter().filter(|(_, s)| !info.is_relay_node(**s)).map(|(c, _)| *c).collect();
        for c in orphans {
            self.place_child(info, c);
        }
    }

    // pruning

    /// A head with nothing downstream and nothing in flight stops relaying
    /// and tells its parent.
    pub(crate) fn maybe_prune(&mut self, head: NodeId, ch: ChannelId) {
        let Some(info) = self.info(head, ch).cloned() else { return };
        if info.relay != head || info.parent.is_none() || !info.children.is_empty() {
            return;
        }
        let parent = info.parent;
        if self.recipients.get(&(ch, head)).is_some_and(|r| !r.is_empty())
            || self.awaiting.get(&(ch, head)).is_some_and(|a| !a.is_empty())
            || self.feeding.iter().any(|((c, _), f)| *c == ch && info.is_relay_node(*f))
            || self.leaving.contains_key(&head)
        {
            return;
        }
        let key = self.clique_key(head);
        if self.pending.iter().any(|((s, c), _)| *c == ch && self.sub.node(*s).member && self.clique_key(*s) == key) {
            return;
        }
        if let Some(p) = parent {
            if self.alive(p) {
                self.send(head, p, ch, Body::Leave { prune: true });
            }
        }
        self.retire(head, ch);
    }

    /// Nothing is in flight that could still change the trees.
    pub fn is_quiescent(&self) -> bool {
        self.control_in_flight == 0
            && self.waits.is_empty()
            && self.pending.is_empty()
            && self.recoveries.is_empty()
            && self.leaving.is_empty()
            && self.feeding.is_empty()
            && self.crashed.is_empty()
            && self.awaiting.values().all(|a| a.is_empty())
            && self.relays.iter().all(|((c, n), r)| r.mode == Mode::Normal || !self.is_head(*c, *n))
    }

    /// What keeps the world from being quiescent, for diagnostics.
    pub fn quiescence_blockers(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.control_in_flight != 0 {
            v.push(format!("{} control messages in flight", self.control_in_flight));
        }
        for ((c, n), w) in &self.waits {
            v.push(format!("ch{c}: {n} waiting to join since {:.0} (contacted {})", w.start, w.contacted));
        }
        for ((n, c), p) in &self.pending {
            v.push(format!("ch{c}: {n} holds {} pending joiners", p.joiners.len()));
        }
        for ((c, f), r) in &self.recoveries {
            v.push(format!("ch{c}: recovery of {f} waits on {:?}", r.waiting.keys().collect::<Vec<_>>()));
        }
        for (n, d) in &self.leaving {
            v.push(format!("{n} leaving, awaiting {:?}", d.awaiting));
        }
        for ((c, ch), f) in &self.feeding {
            v.push(format!("ch{c}: {f} feeding {ch}"));
        }
        for n in self.crashed.keys() {
            v.push(format!("{n} crashed, not yet removed"));
        }
        for ((c, n), a) in &self.awaiting {
            if !a.is_empty() {
                v.push(format!("ch{c}: {n} awaiting {} acks", a.len()));
            }
        }
        for ((c, n), r) in &self.relays {
            if r.mode != Mode::Normal && self.is_head(*c, *n) {
                v.push(format!("ch{c}: head {n} in {:?}", r.mode));
            }
        }
        v
    }

    pub(crate) fn random_position(&mut self) -> Point<f64> {
        let s = self.plane_side;
        Point::new(self.churn_rng.gen_range(0.0..=s), self.churn_rng.gen_range(0.0..=s))
    }

    /// Up to `join_subset` random recipients of a relay, the relay included.
    pub(crate) fn partner_sample(&mut self, ch: ChannelId, relay: NodeId, joiner: NodeId) -> Vec<NodeId> {
        let mut pool: Vec<NodeId> = self.recipients_of(ch, relay).into_iter().filter(|n| *n != joiner).collect();
        if relay != joiner {
            pool.push(relay);
        }
        let k = self.cfg.mesh.join_subset;
        let mut out: Vec<NodeId> = pool.choose_multiple(&mut self.rng, k).copied().collect();
        out.sort();
        out
    }
}

fn quiescence_relevant(t: MsgType) -> bool {
    t.is_control() && t != MsgType::Heartbeat
}
