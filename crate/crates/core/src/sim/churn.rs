use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::substrate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    #[default]
    Random,
    RelayOnly,
    NonStableOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChurnSchedule {
    /// Poisson arrival rate of new nodes per time unit.
    pub join_rate: f64,
    /// Poisson rate of departures per time unit.
    pub leave_rate: f64,
    /// Share of departures that are crashes rather than graceful leaves.
    pub crash_fraction: f64,
    /// Explicit crashes on top of the Poisson process.
    pub crash_list: Vec<(u32, f64)>,
    pub target_selector: TargetSelector,
    pub start: f64,
    pub horizon: f64,
}

impl Default for ChurnSchedule {
    fn default() -> Self {
        ChurnSchedule {
            join_rate: 0.0,
            leave_rate: 0.0,
            crash_fraction: 0.1,
            crash_list: Vec::new(),
            target_selector: TargetSelector::Random,
            start: 0.0,
            horizon: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChurnEvent {
    Join,
    Leave(TargetSelector),
    Crash(TargetSelector),
    CrashNode(NodeId),
}

impl ChurnSchedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, r) in [("join_rate", self.join_rate), ("leave_rate", self.leave_rate)] {
            if !(r.is_finite() && r >= 0.0) {
                v.push(format!("churn.{name} must be a non-negative number, got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.crash_fraction) {
            v.push(format!("churn.crash_fraction must be within [0, 1], got {}", self.crash_fraction));
        }
        for (n, t) in &self.crash_list {
            if !(*t >= self.start && *t <= self.horizon) {
                v.push(format!("crash of node {n} at {t} lies outside [{}, {}]", self.start, self.horizon));
            }
        }
        v
    }

    /// Expands the processes into a time-ordered event list.
    pub fn timeline(&self, seed: u64) -> Vec<(f64, ChurnEvent)> {
        let mut r = substream(seed, "churn");
        let mut out = Vec::new();
        if self.join_rate > 0.0 {
            let exp = Exp::new(self.join_rate).expect("positive rate");
            let mut t = self.start;
            loop {
                t += exp.sample(&mut r);
                if t > self.horizon {
                    break;
                }
                out.push((t, ChurnEvent::Join));
            }
        }
        if self.leave_rate > 0.0 {
            let exp = Exp::new(self.leave_rate).expect("positive rate");
            let mut t = self.start;
            loop {
                t += exp.sample(&mut r);
                if t > self.horizon {
                    break;
                }
                let e = if r.gen_bool(self.crash_fraction) {
                    ChurnEvent::Crash(self.target_selector)
                } else {
                    ChurnEvent::Leave(self.target_selector)
                };
                out.push((t, e));
            }
        }
        for (n, t) in &self.crash_list {
            out.push((*t, ChurnEvent::CrashNode(NodeId(*n))));
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_counts_near_rate() {
        let s = ChurnSchedule { join_rate: 0.5, leave_rate: 0.25, horizon: 10_000.0, ..Default::default() };
        let tl = s.timeline(3);
        let joins = tl.iter().filter(|e| e.1 == ChurnEvent::Join).count() as f64;
        assert!((joins - 5000.0).abs() < 300.0, "{joins}");
        let departures = tl.len() as f64 - joins;
        assert!((departures - 2500.0).abs() < 200.0);
        assert!(tl.windows(2).all(|w| w[0].0 <= w[1].0));
        assert!(tl.iter().all(|e| e.0 <= 10_000.0));
    }

    #[test]
    fn crash_outside_horizon_flagged() {
        let s = ChurnSchedule { crash_list: vec![(1, 50.0)], horizon: 10.0, ..Default::default() };
        assert_eq!(s.violations().len(), 1);
    }

    #[test]
    fn timeline_deterministic() {
        let s = ChurnSchedule { join_rate: 0.1, leave_rate: 0.1, horizon: 1000.0, ..Default::default() };
        assert_eq!(s.timeline(9), s.timeline(9));
    }
}
