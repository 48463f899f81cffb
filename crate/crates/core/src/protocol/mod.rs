//! The streaming layer: per-channel relay trees over cliques, joins,
//! departures, failure recovery and repair after clique splits and merges.

mod handlers;
pub mod invariants;
mod join;
pub mod mesh;
mod recovery;
mod repair;
mod stream;
mod topology;
pub mod types;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::substrate::{NodeId, SubstrateError};

pub use mesh::{pull_round, MeshConfig, MeshSim, StreamState};
pub use types::{
    Address, AddNodeReq, Body, ChannelId, ChannelInfo, ChannelName, Header, JoinOutcome, Message, MsgType,
    RecoveryReport, RelayPolicy,
};
pub use world::{Event, Membership, Mode, RelayState, Timer, World};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("channel name {0:?} is already registered")]
    DuplicateChannel(String),
    #[error("channel name must be non-empty")]
    EmptyChannelName,
    #[error("node {0} is not alive")]
    NodeDown(NodeId),
    #[error("clique of node {0} has no stable node yet")]
    NoStableNode(NodeId),
    #[error("invalid protocol config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// Timeouts are in multiples of a link's round-trip estimate (twice its
/// one-way latency) unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub relay_policy: RelayPolicy,
    /// Stream silence tolerated beyond one segment interval before probing the parent.
    pub stoppage_rtts: f64,
    /// Wait for `alive` (and for heartbeat replies).
    pub probe_timeout_rtts: f64,
    /// Heartbeat period, in multiples of the mean adjacent-clique RTT.
    pub heartbeat_rtts: f64,
    /// Wait for the stream to come back after a recovery request before
    /// rejoining independently, in multiples of the largest RTT on the root path.
    pub rejoin_rtts: f64,
    /// Join retry period, in multiples of the mean adjacent-clique RTT.
    pub join_retry_rtts: f64,
    /// Segments generated per time unit at each source.
    pub segment_rate: f64,
    pub mesh: MeshSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshSettings {
    pub partner_min: usize,
    pub join_subset: usize,
    pub exchange_interval: f64,
    pub window: u64,
}

impl Default for MeshSettings {
    fn default() -> Self {
        let m = MeshConfig::default();
        MeshSettings { partner_min: m.partner_min, join_subset: m.join_subset, exchange_interval: m.exchange_interval, window: m.window }
    }
}

impl From<&MeshSettings> for MeshConfig {
    fn from(m: &MeshSettings) -> Self {
        MeshConfig { partner_min: m.partner_min, join_subset: m.join_subset, exchange_interval: m.exchange_interval, window: m.window }
    }
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            relay_policy: RelayPolicy::HighestBandwidth,
            stoppage_rtts: 1.0,
            probe_timeout_rtts: 2.0,
            heartbeat_rtts: 10.0,
            rejoin_rtts: 10.0,
            join_retry_rtts: 40.0,
            segment_rate: 1.0,
            mesh: MeshSettings::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("stoppage_rtts", self.stoppage_rtts),
            ("probe_timeout_rtts", self.probe_timeout_rtts),
            ("heartbeat_rtts", self.heartbeat_rtts),
            ("rejoin_rtts", self.rejoin_rtts),
            ("join_retry_rtts", self.join_retry_rtts),
            ("segment_rate", self.segment_rate),
            ("mesh.exchange_interval", self.mesh.exchange_interval),
        ] {
            if !(x.is_finite() && x > 0.0) {
                v.push(format!("protocol.{name} must be positive, got {x}"));
            }
        }
        if self.mesh.window == 0 {
            v.push("protocol.mesh.window must be at least 1".into());
        }
        if self.mesh.join_subset == 0 {
            v.push("protocol.mesh.join_subset must be at least 1".into());
        }
        v
    }

    pub fn segment_interval(&self) -> f64 {
        1.0 / self.segment_rate
    }
}

#[cfg(test)]
mod tests;
