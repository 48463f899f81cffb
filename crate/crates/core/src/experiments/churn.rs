use serde::{Deserialize, Serialize};

use super::{open_channels, settle, ChannelPlan, ExperimentError, Setup, MS_PER_RTT};
use crate::metrics::{MetricKind, MetricSample};
use crate::protocol::{ChannelId, ProtocolError};
use crate::rng::substream;
use crate::sim::{ChurnSchedule, TargetSelector};
use crate::Overlay;

/// Times here are in seconds of virtual time, with one mean adjacent-clique
/// round trip taken as 50 ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChurnParams {
    pub channels: usize,
    pub members_per_channel: usize,
    /// Set from the scenario horizon rather than the churn table.
    #[serde(skip)]
    pub duration_s: f64,
    pub joins_per_s: f64,
    pub leaves_per_s: f64,
    pub crash_fraction: f64,
    /// Chance that an arriving node tunes into a random channel.
    pub arrival_join_prob: f64,
    pub segment_interval_s: f64,
    pub checkpoint_s: f64,
}

impl Default for ChurnParams {
    fn default() -> Self {
        ChurnParams {
            channels: 2,
            members_per_channel: 300,
            duration_s: 7200.0,
            joins_per_s: 0.5,
            leaves_per_s: 0.5,
            crash_fraction: 0.1,
            arrival_join_prob: 0.3,
            segment_interval_s: 1.0,
            checkpoint_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub due_s: f64,
    pub taken_s: f64,
    pub violations: usize,
    pub relays: usize,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChurnResult {
    pub checkpoints: Vec<Checkpoint>,
    /// First few violation messages seen, with their time in seconds.
    pub examples: Vec<(f64, String)>,
    pub final_violations: Vec<String>,
    pub settled: bool,
    pub events: u64,
    pub digest: String,
}

impl ChurnResult {
    pub fn total_violations(&self) -> usize {
        self.checkpoints.iter().map(|c| c.violations).sum::<usize>() + self.final_violations.len()
    }

    pub fn metric_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        let mut out = Vec::with_capacity(2 * self.checkpoints.len());
        for c in &self.checkpoints {
            let scenario_tag = format!("{tag}:t{}", c.due_s);
            for (metric, value) in [(MetricKind::RelayCount, c.relays as f64), (MetricKind::InvariantViolations, c.violations as f64)] {
                out.push(MetricSample { scenario_tag: scenario_tag.clone(), metric, group_size: c.members, value, seed });
            }
        }
        out
    }
}

fn snapshot(w: &crate::protocol::World, chans: &[ChannelId]) -> (usize, usize) {
    let relays = chans.iter().map(|c| w.heads(*c).len()).sum();
    let members = chans.iter().map(|c| w.members_of(*c).len()).sum();
    (relays, members)
}

pub fn run_churn(setup: &Setup, sub: &Overlay, p: &ChurnParams, plans: &[ChannelPlan], seed: u64) -> Result<ChurnResult, ExperimentError> {
    let tag = "churn";
    let mut rng = substream(seed, tag);
    let mut w = setup.world(sub.clone(), seed)?;
    let unit_per_s = w.rtt_ref() * 1000.0 / MS_PER_RTT;
    let defaults: Vec<ChannelPlan> = (0..p.channels).map(|i| ChannelPlan::random(format!("tv{i}"), p.members_per_channel)).collect();
    let chans = open_channels(&mut w, sub, if plans.is_empty() { &defaults } else { plans }, &mut rng, tag)?;
    w.cfg.segment_rate = 1.0 / (p.segment_interval_s * unit_per_s);
    for &ch in &chans {
        w.start_streaming(ch)?;
    }
    w.set_churn_join_prob(p.arrival_join_prob);
    let start = w.now();
    let end = start + p.duration_s * unit_per_s;
    let sched = ChurnSchedule {
        join_rate: p.joins_per_s / unit_per_s,
        leave_rate: p.leaves_per_s / unit_per_s,
        crash_fraction: p.crash_fraction,
        crash_list: Vec::new(),
        target_selector: TargetSelector::Random,
        start,
        horizon: end,
    };
    w.schedule_churn(sched.timeline(seed))?;

    let step = p.checkpoint_s * unit_per_s;
    let mut k = 1u32;
    let mut due = start + step;
    let mut checkpoints = Vec::new();
    let mut examples = Vec::new();
    let to_s = |t: f64| (t - start) / unit_per_s;
    let res = w.run_until_with(end, |w| {
        if w.now() < due {
            return;
        }
        let v = w.violations();
        let (relays, members) = snapshot(w, &chans);
        for m in v.iter().take(5usize.saturating_sub(examples.len())) {
            examples.push((to_s(w.now()), m.clone()));
        }
        checkpoints.push(Checkpoint { due_s: f64::from(k) * p.checkpoint_s, taken_s: to_s(w.now()), violations: v.len(), relays, members });
        while due <= w.now() {
            k += 1;
            due = start + f64::from(k) * step;
        }
    });
    match res {
        Err(ProtocolError::Sim(_)) => return Err(ExperimentError::EventCap(tag.into())),
        r => r?,
    }
    let settled = settle(&mut w, tag)?;
    let final_violations = w.violations();
    let events = w.engine().processed();
    Ok(ChurnResult { checkpoints, examples, final_violations, settled, events, digest: w.digest() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_churn_run_has_no_violations() {
        let setup = Setup::small(1500);
        let sub = setup.overlay(10).unwrap();
        let p = ChurnParams { members_per_channel: 100, duration_s: 300.0, joins_per_s: 0.3, leaves_per_s: 0.3, checkpoint_s: 30.0, ..ChurnParams::default() };
        let r = run_churn(&setup, &sub, &p, &[], 10).unwrap();
        assert!(r.checkpoints.len() >= 5, "{r:?}");
        assert!(r.settled);
        assert_eq!(r.total_violations(), 0, "{:?} {:?}", r.examples, r.final_violations);
    }
}
