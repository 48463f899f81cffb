//! Event loop and message dispatch.

use super::types::*;
use super::world::{Event, Timer, World};
use super::ProtocolError;
use crate::sim::{ChurnEvent, TargetSelector};
use crate::substrate::{Notice, NodeId};

impl World {
    /// Processes events up to and including time `until`, calling `on_idle`
    /// whenever the world is quiescent after an event.
    pub fn run_until_with(&mut self, until: f64, mut on_idle: impl FnMut(&mut World)) -> Result<(), ProtocolError> {
        while let Some((t, ev)) = self.eng.next_until(until)? {
            self.sub.set_now(t);
            self.dispatch(ev);
            self.drain_notices();
            if self.is_quiescent() {
                on_idle(self);
            }
        }
        Ok(())
    }

    pub fn run_until(&mut self, until: f64) -> Result<(), ProtocolError> {
        self.run_until_with(until, |_| {})
    }

    /// Runs until nothing that could change the trees is in flight, or
    /// until `limit`. Returns whether quiescence was reached.
    pub fn settle(&mut self, limit: f64) -> Result<bool, ProtocolError> {
        if self.is_quiescent() {
            return Ok(true);
        }
        while let Some((t, ev)) = self.eng.next_until(limit)? {
            self.sub.set_now(t);
            self.dispatch(ev);
            self.drain_notices();
            if self.is_quiescent() {
                return Ok(true);
            }
        }
        Ok(self.is_quiescent())
    }

    pub fn schedule_churn(&mut self, timeline: Vec<(f64, ChurnEvent)>) -> Result<(), ProtocolError> {
        for (t, e) in timeline {
            self.eng.schedule_at(t, Event::Churn(e))?;
        }
        Ok(())
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Deliver { from, to, msg } => {
                let t = msg.header.msg_type;
                if t.is_control() && t != MsgType::Heartbeat {
                    self.control_in_flight -= 1;
                }
                if !self.alive(to) {
                    self.eng.stats.dropped += 1;
                    return;
                }
                self.eng.stats.delivered += 1;
                self.eng.trace(&[1, from.0 as u64, to.0 as u64, t.code(), msg.channel as u64]);
                self.deliver(from, to, msg);
            }
            Event::Timer { node, timer } => {
                if self.alive(node) {
                    self.on_timer(node, timer);
                }
            }
            Event::SourceTick(ch) => self.source_tick(ch),
            Event::Churn(e) => self.on_churn(e),
            Event::RemoveCrashed(n) => {
                self.crashed.remove(&n);
                if self.sub.node(n).member {
                    let _ = self.sub.remove_node(n, true);
                }
            }
            Event::Eligible(n) => {
                let now = self.now();
                self.sub.node_became_eligible(n, now);
            }
        }
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, msg: Message) {
        let ch = msg.channel;
        match msg.body {
            Body::Join { joiner, join_id } => self.on_join(to, from, ch, joiner, join_id),
            Body::JoinRemote { requester, target, join_id } => self.on_join_remote(to, ch, requester, target, join_id),
            Body::AddNode(req) => self.on_add_node(to, ch, req),
            Body::AddNodeFwd(req) => self.on_add_node_fwd(to, ch, req),
            Body::AddNodeAck { join_id, accepted, backup: _ } => self.on_ack(to, from, ch, join_id, accepted),
            Body::JoinReply { relay, partners, join_id } => self.on_join_reply(to, ch, relay, partners, join_id),
            Body::Leave { prune } => self.on_leave(to, from, ch, prune),
            Body::IsAlive => self.send(to, from, ch, Body::Alive),
            Body::Alive => self.on_alive(to, from, ch),
            Body::RecoverTree { failed } => self.on_recover_tree(to, from, ch, failed),
            Body::HandOver { old, new, backup } => self.on_hand_over(to, ch, old, new, backup),
            Body::HandOverRole { info, recipients } => self.on_hand_over_role(to, from, ch, info, recipients),
            Body::Heartbeat { ack } => self.on_heartbeat(to, from, ch, ack),
            Body::Segment { seq, path, backup } => self.on_segment(to, from, ch, seq, path, backup),
            Body::ChannelInfoUpdate { info } => self.on_info_update(to, from, ch, info),
            Body::Release => self.on_release(to, ch),
            Body::Rejoin => self.on_rejoin(to, from, ch),
            Body::RejoinConfirm => self.on_rejoin_confirm(to, from, ch),
        }
    }

    fn on_timer(&mut self, node: NodeId, timer: Timer) {
        match timer {
            Timer::Watchdog(ch) => self.on_watchdog(node, ch),
            Timer::ProbeTimeout(ch, gen) => self.on_probe_timeout(node, ch, gen),
            Timer::RejoinTimeout(ch, gen) => self.on_rejoin_timeout(node, ch, gen),
            Timer::Heartbeat(ch) => self.on_heartbeat_tick(node, ch),
            Timer::HeartbeatTimeout(ch, gen) => self.on_heartbeat_timeout(node, ch, gen),
            Timer::JoinRetry(ch, flow) => self.on_join_retry(node, ch, flow),
            Timer::AckTimeout(ch, join_id) => self.on_ack_timeout(node, ch, join_id),
            Timer::FeedTimeout(ch, child) => self.on_feed_timeout(node, ch, child),
            Timer::LeaveTimeout => self.finish_departure(node),
        }
    }

    pub(crate) fn drain_notices(&mut self) {
        loop {
            let notices = self.sub.take_notices();
            if notices.is_empty() {
                break;
            }
            let mut structural = false;
            for n in notices {
                match n {
                    Notice::Split { primary, offspring, .. } => {
                        structural = true;
                        self.on_split(primary.bits(), offspring.bits());
                    }
                    Notice::Merge { merging, merged, absorbed } => {
                        structural = true;
                        self.on_merge(merging.bits(), merged.bits(), &absorbed);
                    }
                    Notice::StableChanged { clique } => self.on_stable_changed(clique),
                    Notice::NodeGone { node, clique, crashed } => self.on_node_gone(node, clique, crashed),
                }
            }
            if structural {
                self.revalidate_children();
            }
        }
    }

    fn on_churn(&mut self, e: ChurnEvent) {
        match e {
            ChurnEvent::Join => {
                let pos = self.random_position();
                let uplink = self.sub.sample_uplink();
                let now = self.now();
                let Ok((n, _)) = self.sub.join_node(pos, now, uplink) else { return };
                let age = self.sub.config().stability_age;
                self.eng.schedule_in(age, Event::Eligible(n));
                if !self.channels.is_empty() && rand::Rng::gen_bool(&mut self.churn_rng, self.churn_join_prob) {
                    let ch = rand::Rng::gen_range(&mut self.churn_rng, 0..self.channels.len()) as ChannelId;
                    let _ = self.join_channel(n, ch);
                }
            }
            ChurnEvent::Leave(sel) => {
                if let Some(n) = self.pick_target(sel) {
                    self.leave_platform(n);
                }
            }
            ChurnEvent::Crash(sel) => {
                if let Some(n) = self.pick_target(sel) {
                    let _ = self.crash(n);
                }
            }
            ChurnEvent::CrashNode(n) => {
                if (n.0 as usize) < self.sub.nodes().len() && self.alive(n) && !self.is_source(n) {
                    let _ = self.crash(n);
                }
            }
        }
    }

    pub(crate) fn is_source(&self, n: NodeId) -> bool {
        self.channels.iter().any(|c| c.source == n)
    }

    /// A live node that may depart: not a source, not already on its way out.
    fn pick_target(&mut self, sel: TargetSelector) -> Option<NodeId> {
        let cands: Vec<NodeId> = self
            .sub
            .alive_nodes()
            .map(|n| n.id)
            .filter(|n| !self.is_source(*n) && !self.leaving.contains_key(n))
            .filter(|n| match sel {
                TargetSelector::Random => true,
                TargetSelector::RelayOnly => self.relay_roles(*n) > 0,
                TargetSelector::NonStableOnly => !self.sub.is_stable(*n),
            })
            .collect();
        if cands.is_empty() || self.sub.clique_count() == 0 {
            return None;
        }
        let i = rand::Rng::gen_range(&mut self.churn_rng, 0..cands.len());
        Some(cands[i])
    }
}
