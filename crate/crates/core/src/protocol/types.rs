use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::substrate::{CliqueId, NodeId};

pub type ChannelId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelName(String);

impl ChannelName {
    pub fn new(name: impl Into<String>) -> Option<Self> {
        let name = name.into();
        if name.is_empty() {
            None
        } else {
            Some(ChannelName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChannelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-clique tree state for one channel, replicated on the clique's stable
/// nodes. Only the relay changes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelInfo {
    pub relay: NodeId,
    pub backup: Option<NodeId>,
    /// Upstream relay node; `None` at the source's clique.
    pub parent: Option<NodeId>,
    pub backup_parent: Option<NodeId>,
    /// Extra relay nodes in this clique, chained after `relay`, that take
    /// children once a node's fan-out is full.
    pub helpers: Vec<NodeId>,
    /// Downstream relay node -> the relay node of this clique serving it.
    pub children: BTreeMap<NodeId, NodeId>,
    /// Set while the clique has a single stable node and no backup.
    pub degraded: bool,
    pub version: u64,
}

impl ChannelInfo {
    pub fn new(relay: NodeId, backup: Option<NodeId>) -> Self {
        ChannelInfo {
            relay,
            backup,
            parent: None,
            backup_parent: None,
            helpers: Vec::new(),
            children: BTreeMap::new(),
            degraded: backup.is_none(),
            version: 0,
        }
    }

    /// Relay nodes of this clique in chain order.
    pub fn chain(&self) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::once(self.relay).chain(self.helpers.iter().copied())
    }

    pub fn is_relay_node(&self, n: NodeId) -> bool {
        self.chain().any(|x| x == n)
    }

    /// The next relay in the chain after `n`.
    pub fn next_in_chain(&self, n: NodeId) -> Option<NodeId> {
        let chain: Vec<NodeId> = self.chain().collect();
        let i = chain.iter().position(|x| *x == n)?;
        chain.get(i + 1).copied()
    }

    /// Everything `n` pushes segments to: its assigned children, then the
    /// next helper.
    pub fn out_links(&self, n: NodeId) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.children.iter().filter(|(_, s)| **s == n).map(|(c, _)| *c).collect();
        if let Some(h) = self.next_in_chain(n) {
            v.push(h);
        }
        v
    }

    pub fn child_set(&self) -> BTreeSet<NodeId> {
        self.children.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum MsgType {
    Join,
    JoinRemote,
    AddNode,
    AddNodeFwd,
    AddNodeAck,
    JoinReply,
    Leave,
    IsAlive,
    Alive,
    RecoverTree,
    HandOver,
    Heartbeat,
    SegmentRequest,
    SegmentData,
    ChannelInfoUpdate,
    Release,
    Rejoin,
    RejoinConfirm,
}

impl MsgType {
    pub fn is_control(&self) -> bool {
        !matches!(self, MsgType::SegmentData | MsgType::SegmentRequest)
    }

    pub fn code(&self) -> u64 {
        *self as u64
    }
}

/// One endpoint of a header: clique id plus node address. `node = None` is
/// the all-zero ANY address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Address {
    pub clique: Option<CliqueId>,
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub src: Address,
    /// `dst.clique = None` is the NULL sentinel: forwarding stops there.
    pub dst: Address,
    pub msg_type: MsgType,
}

/// Where a routed addNode is heading and who asked for it.
#[derive(Debug, Clone, PartialEq)]
pub struct AddNodeReq {
    pub join_id: u64,
    /// Stable node in the joining clique that issued joinRemote.
    pub requester: NodeId,
    pub target: CliqueId,
    pub upstream: NodeId,
    pub upstream_backup: Option<NodeId>,
    /// Root path of `upstream`, for cycle checks.
    pub upstream_path: Arc<Vec<NodeId>>,
    pub inter_hops: u32,
    /// Clique whose stable node ran the forward hook; set on addNodeFwd.
    pub hook_clique: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Join { joiner: NodeId, join_id: u64 },
    JoinRemote { requester: NodeId, target: CliqueId, join_id: u64 },
    AddNode(AddNodeReq),
    AddNodeFwd(AddNodeReq),
    AddNodeAck { join_id: u64, accepted: bool, backup: Option<NodeId> },
    JoinReply { relay: NodeId, partners: Vec<NodeId>, join_id: u64 },
    /// A recipient leaving, or a relay pruning itself from its parent.
    Leave { prune: bool },
    IsAlive,
    Alive,
    RecoverTree { failed: NodeId },
    /// To a parent: replace `old` with `new` in the child list.
    HandOver { old: NodeId, new: NodeId, backup: Option<NodeId> },
    /// From a departing relay to its successor, carrying the role.
    HandOverRole { info: ChannelInfo, recipients: Vec<NodeId> },
    Heartbeat { ack: bool },
    Segment { seq: u64, path: Arc<Vec<NodeId>>, backup: Option<NodeId> },
    ChannelInfoUpdate { info: Option<ChannelInfo> },
    Release,
    Rejoin,
    RejoinConfirm,
}

impl Body {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Body::Join { .. } => MsgType::Join,
            Body::JoinRemote { .. } => MsgType::JoinRemote,
            Body::AddNode(_) => MsgType::AddNode,
            Body::AddNodeFwd(_) => MsgType::AddNodeFwd,
            Body::AddNodeAck { .. } => MsgType::AddNodeAck,
            Body::JoinReply { .. } => MsgType::JoinReply,
            Body::Leave { .. } => MsgType::Leave,
            Body::IsAlive => MsgType::IsAlive,
            Body::Alive => MsgType::Alive,
            Body::RecoverTree { .. } => MsgType::RecoverTree,
            Body::HandOver { .. } | Body::HandOverRole { .. } => MsgType::HandOver,
            Body::Heartbeat { .. } => MsgType::Heartbeat,
            Body::Segment { .. } => MsgType::SegmentData,
            Body::ChannelInfoUpdate { .. } => MsgType::ChannelInfoUpdate,
            Body::Release => MsgType::Release,
            Body::Rejoin => MsgType::Rejoin,
            Body::RejoinConfirm => MsgType::RejoinConfirm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Header,
    pub channel: ChannelId,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JoinOutcome {
    pub node: NodeId,
    pub channel: ChannelId,
    /// Inter-clique protocol messages: joinRemote plus every inter-clique
    /// addNode transmission. Zero-hop local joins count their single
    /// request/response exchange.
    pub messages_used: u32,
    pub startup_delay: f64,
    pub partners: Vec<NodeId>,
    pub local: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub failed_node: NodeId,
    pub channel: ChannelId,
    pub failure_time: f64,
    pub detect_time: f64,
    pub recovered_time: Option<f64>,
    pub control_messages: u32,
    pub segments_lost: u64,
    /// Largest round trip over the links the recovery used.
    pub rtt: f64,
    pub downstream_relays: u32,
    pub immediate_children: u32,
}

impl RecoveryReport {
    pub fn t_fr(&self) -> Option<f64> {
        self.recovered_time.map(|t| t - self.failure_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayPolicy {
    /// The stable node with the most spare uplink.
    #[default]
    HighestBandwidth,
    /// The stable node that received the addNode.
    ReceivingNode,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_channel_name_rejected() {
        assert!(ChannelName::new("").is_none());
        assert_eq!(ChannelName::new("tv1").unwrap().as_str(), "tv1");
    }

    #[test]
    fn out_links_follow_assignment_and_chain() {
        let mut info = ChannelInfo::new(NodeId(1), Some(NodeId(2)));
        info.helpers = vec![NodeId(3)];
        info.children.insert(NodeId(10), NodeId(1));
        info.children.insert(NodeId(11), NodeId(3));
        assert_eq!(info.out_links(NodeId(1)), vec![NodeId(10), NodeId(3)]);
        assert_eq!(info.out_links(NodeId(3)), vec![NodeId(11)]);
        assert!(info.is_relay_node(NodeId(3)));
        assert!(!info.is_relay_node(NodeId(2)));
    }

    #[test]
    fn data_messages_are_not_control() {
        assert!(!MsgType::SegmentData.is_control());
        assert!(MsgType::Heartbeat.is_control());
    }
}
