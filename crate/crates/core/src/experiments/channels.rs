use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{pick_nodes, settle, ExperimentError};
use crate::protocol::{ChannelId, ProtocolError, World};
use crate::rng::SimRng;
use crate::substrate::NodeId;
use crate::Overlay;

/// `random` or `node:<id>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceSel {
    Random,
    Node(u32),
}

/// `random:<count>` or `nodes:<id>,<id>,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemberSel {
    Random(usize),
    Nodes(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinMode {
    /// Every member asks at once, then the world settles.
    #[default]
    Burst,
    /// Each join settles before the next one starts.
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    pub name: String,
    pub source: SourceSel,
    pub members: MemberSel,
    pub join: JoinMode,
}

impl FromStr for SourceSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "random" {
            return Ok(SourceSel::Random);
        }
        match s.strip_prefix("node:").map(|x| x.trim().parse::<u32>()) {
            Some(Ok(n)) => Ok(SourceSel::Node(n)),
            _ => Err(format!("source selector {s:?} must be \"random\" or \"node:<id>\"")),
        }
    }
}

impl FromStr for MemberSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(n) = s.strip_prefix("random:") {
            return n.trim().parse().map(MemberSel::Random).map_err(|_| format!("member count in {s:?} is not a number"));
        }
        if let Some(list) = s.strip_prefix("nodes:") {
            let ids: Result<Vec<u32>, _> = list.split(',').map(|x| x.trim().parse::<u32>()).collect();
            return ids.map(MemberSel::Nodes).map_err(|_| format!("node list in {s:?} must be comma-separated ids"));
        }
        Err(format!("member selector {s:?} must be \"random:<count>\" or \"nodes:<id>,...\""))
    }
}

impl fmt::Display for SourceSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSel::Random => f.write_str("random"),
            SourceSel::Node(n) => write!(f, "node:{n}"),
        }
    }
}

impl fmt::Display for MemberSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemberSel::Random(n) => write!(f, "random:{n}"),
            MemberSel::Nodes(v) => {
                let s: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "nodes:{}", s.join(","))
            }
        }
    }
}

impl ChannelPlan {
    pub fn random(name: String, members: usize) -> Self {
        ChannelPlan { name, source: SourceSel::Random, members: MemberSel::Random(members), join: JoinMode::Burst }
    }

    /// Problems that make the plan unusable on a network of `nodes` nodes.
    pub fn violations(&self, nodes: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.name.is_empty() {
            v.push("channel name must be non-empty".into());
        }
        if let SourceSel::Node(n) = self.source {
            if n as usize >= nodes {
                v.push(format!("source node {n} does not exist (network has {nodes} nodes)"));
            }
        }
        match &self.members {
            MemberSel::Random(k) if *k + 1 > nodes => v.push(format!("{k} random members do not fit in {nodes} nodes")),
            MemberSel::Nodes(ids) => {
                if ids.is_empty() {
                    v.push("member list is empty".into());
                }
                for n in ids.iter().filter(|n| **n as usize >= nodes) {
                    v.push(format!("member node {n} does not exist (network has {nodes} nodes)"));
                }
            }
            _ => {}
        }
        v
    }
}

fn join(w: &mut World, ch: ChannelId, m: NodeId) -> Result<(), ExperimentError> {
    match w.join_channel(m, ch) {
        Ok(()) | Err(ProtocolError::NoStableNode(_)) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

/// Registers every planned channel and joins its members. Random sources
/// avoid explicit ones and each other; random members avoid all sources.
pub fn open_channels(w: &mut World, sub: &Overlay, plans: &[ChannelPlan], rng: &mut SimRng, tag: &str) -> Result<Vec<ChannelId>, ExperimentError> {
    let mut sources: Vec<NodeId> = plans
        .iter()
        .filter_map(|p| match p.source {
            SourceSel::Node(n) => Some(NodeId(n)),
            SourceSel::Random => None,
        })
        .collect();
    let mut chosen = Vec::with_capacity(plans.len());
    for p in plans {
        let s = match p.source {
            SourceSel::Node(n) => NodeId(n),
            SourceSel::Random => {
                let s = pick_nodes(sub, 1, &sources, rng)
                    .first()
                    .copied()
                    .ok_or_else(|| ExperimentError::Setup("no node left to act as a source".into()))?;
                sources.push(s);
                s
            }
        };
        chosen.push(s);
    }
    let mut chans = Vec::with_capacity(plans.len());
    for (p, &s) in plans.iter().zip(&chosen) {
        let ch = w.register_channel(&p.name, s)?;
        let members: Vec<NodeId> = match &p.members {
            MemberSel::Random(k) => pick_nodes(sub, *k, &sources, rng),
            MemberSel::Nodes(ids) => ids.iter().map(|i| NodeId(*i)).filter(|n| *n != s).collect(),
        };
        for m in members {
            join(w, ch, m)?;
            if p.join == JoinMode::Sequential {
                settle(w, tag)?;
            }
        }
        chans.push(ch);
    }
    settle(w, tag)?;
    Ok(chans)
}
