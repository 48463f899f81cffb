//! Experiment drivers that regenerate the evaluation figures and checks.
//! Each returns plain results plus the metric rows written to CSV.

mod channels;
mod churn;
mod convergence;
mod recovery;
mod startup;
mod trees;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{place_nodes, GeometryError, PlaneConfig};
use crate::protocol::{ProtocolConfig, ProtocolError, World};
use crate::rng::SimRng;
use crate::sim::SimConfig;
use crate::substrate::{NodeId, Substrate, SubstrateConfig, SubstrateError};
use crate::Overlay;

pub use channels::{open_channels, ChannelPlan, JoinMode, MemberSel, SourceSel};
pub use churn::{run_churn, ChurnParams, ChurnResult};
pub use convergence::{run_convergence, ConvergenceParams, ConvergenceResult};
pub use recovery::{run_recovery, RecoveryParams, RecoveryResult};
pub use startup::{run_startup, StartupParams, StartupResult};
pub use trees::{run_trees, TreeParams, TreeResult, TreeRun};

/// One mean adjacent-clique round trip, in milliseconds, when results are
/// reported in wall-clock units.
pub const MS_PER_RTT: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("scenario {0} hit the event cap")]
    EventCap(String),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fig2Convergence,
    Fig3Stretch,
    Fig4Netload,
    Fig5StableVsNone,
    RecoveryTiming,
    StartupDelay,
    ChurnInvariants,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Fig2Convergence => "fig2_convergence",
            ExperimentKind::Fig3Stretch => "fig3_stretch",
            ExperimentKind::Fig4Netload => "fig4_netload",
            ExperimentKind::Fig5StableVsNone => "fig5_stable_vs_none",
            ExperimentKind::RecoveryTiming => "recovery_timing",
            ExperimentKind::StartupDelay => "startup_delay",
            ExperimentKind::ChurnInvariants => "churn_invariants",
        }
    }
}

/// Everything needed to build a substrate and a protocol world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Setup {
    pub plane: PlaneConfig,
    pub substrate: SubstrateConfig,
    pub protocol: ProtocolConfig,
    pub sim: SimConfig,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            plane: PlaneConfig::default(),
            substrate: SubstrateConfig::default(),
            protocol: ProtocolConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl Setup {
    /// A smaller network for quick checks.
    pub fn small(nodes: usize) -> Self {
        let mut s = Setup::default();
        s.plane.node_count = nodes;
        s
    }

    /// Places nodes and grows the substrate. The run seed replaces the
    /// plane's own seed so every seed sees a different placement.
    pub fn overlay(&self, seed: u64) -> Result<Overlay, ExperimentError> {
        let plane = PlaneConfig { rng_seed: seed, ..self.plane.clone() };
        let pts = place_nodes(&plane)?;
        Ok(Substrate::bootstrap(self.substrate.clone(), &pts, seed)?)
    }

    pub fn world(&self, sub: Overlay, seed: u64) -> Result<World, ExperimentError> {
        let mut w = World::new(sub, self.protocol.clone(), self.sim.clone(), seed)?;
        w.set_plane_side(self.plane.plane_side);
        Ok(w)
    }
}

/// Milliseconds per simulated time unit for a world.
pub fn ms_per_unit(w: &World) -> f64 {
    MS_PER_RTT / w.rtt_ref()
}

/// `k` distinct live nodes other than `exclude`, in random order.
pub(crate) fn pick_nodes(sub: &Overlay, k: usize, exclude: &[NodeId], rng: &mut SimRng) -> Vec<NodeId> {
    let pool: Vec<NodeId> = sub.alive_nodes().map(|n| n.id).filter(|n| !exclude.contains(n)).collect();
    let mut out: Vec<NodeId> = pool.choose_multiple(rng, k.min(pool.len())).copied().collect();
    out.shuffle(rng);
    out
}

/// `ceil(log_base(x))` for integer arguments, exact at powers.
pub fn ceil_log(x: usize, base: usize) -> u32 {
    let mut p = 1usize;
    let mut e = 0;
    while p < x {
        p = p.saturating_mul(base);
        e += 1;
    }
    e
}

/// One digest over several run digests, order-sensitive.
pub fn combine_digests<S: AsRef<str>>(parts: &[S]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Settles the world or reports that the event cap stopped it.
pub(crate) fn settle(w: &mut World, tag: &str) -> Result<bool, ExperimentError> {
    let limit = w.now() + 1e9;
    match w.settle(limit) {
        Ok(q) => Ok(q),
        Err(ProtocolError::Sim(_)) => Err(ExperimentError::EventCap(tag.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn run_to(w: &mut World, t: f64, tag: &str) -> Result<(), ExperimentError> {
    match w.run_until(t) {
        Ok(()) => Ok(()),
        Err(ProtocolError::Sim(_)) => Err(ExperimentError::EventCap(tag.to_string())),
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn run_for(w: &mut World, dt: f64, tag: &str) -> Result<(), ExperimentError> {
    let t = w.now() + dt;
    run_to(w, t, tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log_matches_float_formula() {
        for x in 1..5000usize {
            let want = (x as f64).log(4.0).ceil() as u32;
            // Floating point can land a hair above an exact power.
            let exact_power = (0..8).any(|e| 4usize.pow(e) == x);
            if !exact_power {
                assert_eq!(ceil_log(x, 4), want, "x={x}");
            }
        }
        assert_eq!(ceil_log(1, 4), 0);
        assert_eq!(ceil_log(4, 4), 1);
        assert_eq!(ceil_log(64, 4), 3);
        assert_eq!(ceil_log(65, 4), 4);
    }
}
