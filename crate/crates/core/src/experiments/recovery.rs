use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ms_per_unit, open_channels, run_for, run_to, ChannelPlan, ExperimentError, Setup};
use crate::metrics::{mean, MetricKind, MetricSample};
use crate::protocol::{ChannelId, World};
use crate::rng::substream;
use crate::substrate::NodeId;
use crate::Overlay;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryParams {
    pub channels: usize,
    pub members_per_channel: usize,
    pub crashes: usize,
    /// Crashes of a relay together with its backup.
    pub double_failures: usize,
    /// Segment interval in mean adjacent-clique round trips.
    pub segment_interval_rtts: f64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams {
            channels: 3,
            members_per_channel: 500,
            crashes: 100,
            double_failures: 10,
            segment_interval_rtts: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrashRecord {
    pub node: NodeId,
    pub t_fr: Option<f64>,
    pub t_fr_ms: Option<f64>,
    /// Largest adjacent-clique round trip on the links the recovery used.
    pub rtt: f64,
    pub control_messages: u32,
    pub downstream_relays: u32,
    pub immediate_children: u32,
    pub segments_lost: u64,
}

impl CrashRecord {
    pub fn within_rtt_bound(&self, k: f64) -> bool {
        self.t_fr.is_some_and(|t| t <= k * self.rtt)
    }

    pub fn control_bound(&self) -> u32 {
        2 * self.downstream_relays + self.immediate_children + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoubleFailure {
    pub relay: NodeId,
    pub backup: NodeId,
    pub downstream: usize,
    /// Downstream relays whose clique received a segment generated after the crash.
    pub restored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryResult {
    pub crashes: Vec<CrashRecord>,
    pub doubles: Vec<DoubleFailure>,
    pub ms_per_unit: f64,
    pub digest: String,
}

impl RecoveryResult {
    pub fn mean_t_fr_ms(&self) -> f64 {
        let xs: Vec<f64> = self.crashes.iter().filter_map(|c| c.t_fr_ms).collect();
        mean(&xs)
    }

    pub fn metric_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        let n = self.crashes.len();
        let mut out = Vec::new();
        for c in &self.crashes {
            out.push(MetricSample {
                scenario_tag: format!("{tag}:single"),
                metric: MetricKind::RecoveryTime,
                group_size: n,
                value: c.t_fr_ms.unwrap_or(f64::NAN),
                seed,
            });
            out.push(MetricSample {
                scenario_tag: format!("{tag}:single"),
                metric: MetricKind::ControlMessages,
                group_size: n,
                value: f64::from(c.control_messages),
                seed,
            });
        }
        out
    }
}

fn interior_relays(w: &World, chans: &[ChannelId]) -> Vec<(ChannelId, NodeId)> {
    let mut v = Vec::new();
    for &ch in chans {
        for h in w.heads(ch) {
            let interior = w.info(h, ch).is_some_and(|i| i.parent.is_some() && !i.children.is_empty());
            if interior && w.alive(h) && !w.is_source(h) {
                v.push((ch, h));
            }
        }
    }
    v
}

/// The clique's current relay holds a segment generated after `since`.
fn clique_fed(w: &World, ch: ChannelId, key: u64, since: u64) -> bool {
    w.head_in_clique(ch, key)
        .and_then(|h| w.relay_state(ch, h))
        .and_then(|s| s.highest)
        .is_some_and(|x| x > since)
}

/// Streams several channels and crashes interior relays one at a time,
/// letting the structure settle between crashes.
pub fn run_recovery(setup: &Setup, sub: &Overlay, p: &RecoveryParams, plans: &[ChannelPlan], seed: u64) -> Result<RecoveryResult, ExperimentError> {
    let tag = "recovery";
    let mut rng = substream(seed, tag);
    let mut w = setup.world(sub.clone(), seed)?;
    let defaults: Vec<ChannelPlan> = (0..p.channels).map(|i| ChannelPlan::random(format!("live{i}"), p.members_per_channel)).collect();
    let chans = open_channels(&mut w, sub, if plans.is_empty() { &defaults } else { plans }, &mut rng, tag)?;
    let rtt = w.rtt_ref();
    w.cfg.segment_rate = 1.0 / (p.segment_interval_rtts * rtt);
    for &ch in &chans {
        w.start_streaming(ch)?;
    }
    run_for(&mut w, 40.0 * rtt, tag)?;
    let scale = ms_per_unit(&w);
    let cool = w.member_timeout() + 20.0 * rtt;

    let mut crashes = Vec::new();
    for _ in 0..p.crashes {
        let cands = interior_relays(&w, &chans);
        let Some(&(ch, victim)) = cands.choose(&mut rng) else { break };
        let t0 = w.now();
        w.crash(victim)?;
        let deadline = t0 + 3.0 * w.member_timeout();
        loop {
            run_for(&mut w, 2.0 * rtt, tag)?;
            let done = w.reports().iter().any(|r| r.failed_node == victim && r.channel == ch);
            if done || w.now() >= deadline {
                break;
            }
        }
        run_to(&mut w, t0 + cool, tag)?;
        let r = w.reports().iter().find(|r| r.failed_node == victim && r.channel == ch);
        crashes.push(match r {
            Some(r) => CrashRecord {
                node: victim,
                t_fr: r.t_fr(),
                t_fr_ms: r.t_fr().map(|t| t * scale),
                rtt: r.rtt,
                control_messages: r.control_messages,
                downstream_relays: r.downstream_relays,
                immediate_children: r.immediate_children,
                segments_lost: r.segments_lost,
            },
            None => CrashRecord {
                node: victim,
                t_fr: None,
                t_fr_ms: None,
                rtt: 0.0,
                control_messages: 0,
                downstream_relays: 0,
                immediate_children: 0,
                segments_lost: 0,
            },
        });
    }

    let mut doubles = Vec::new();
    for _ in 0..p.double_failures {
        let cands: Vec<(ChannelId, NodeId, NodeId)> = interior_relays(&w, &chans)
            .into_iter()
            .filter_map(|(ch, h)| {
                let b = w.info(h, ch)?.backup?;
                (w.alive(b) && !w.is_source(b)).then_some((ch, h, b))
            })
            .collect();
        let Some(&(ch, relay, backup)) = cands.choose(&mut rng) else { break };
        let below: Vec<u64> = w.heads_below(ch, relay).into_iter().map(|h| w.clique_key(h)).collect();
        let t0 = w.now();
        let since = w.latest_seq(ch).unwrap_or(0);
        w.crash(relay)?;
        w.crash(backup)?;
        let horizon = t0 + 4.0 * w.member_timeout() + 4.0 * w.cfg.rejoin_rtts * rtt + w.long_timeout();
        run_to(&mut w, horizon, tag)?;
        let restored = below.iter().filter(|k| clique_fed(&w, ch, **k, since)).count();
        doubles.push(DoubleFailure { relay, backup, downstream: below.len(), restored });
    }
    Ok(RecoveryResult { crashes, doubles, ms_per_unit: scale, digest: w.digest() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crashes_recover_within_bounds() {
        let setup = Setup::small(2000);
        let sub = setup.overlay(8).unwrap();
        let p = RecoveryParams { channels: 1, members_per_channel: 300, crashes: 5, double_failures: 2, ..RecoveryParams::default() };
        let r = run_recovery(&setup, &sub, &p, &[], 8).unwrap();
        assert_eq!(r.crashes.len(), 5);
        for c in &r.crashes {
            assert!(c.t_fr.is_some(), "{c:?}");
            assert!(c.control_messages <= c.control_bound(), "{c:?}");
        }
        for d in &r.doubles {
            assert_eq!(d.restored, d.downstream, "{d:?}");
        }
    }
}
