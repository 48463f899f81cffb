use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ceil_log, ms_per_unit, pick_nodes, settle, ExperimentError, Setup};
use crate::metrics::{MetricKind, MetricSample};
use crate::protocol::ProtocolError;
use crate::rng::substream;
use crate::Overlay;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StartupParams {
    pub channels: usize,
    pub joins: usize,
}

impl Default for StartupParams {
    fn default() -> Self {
        StartupParams { channels: 20, joins: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StartupJoin {
    pub messages: u32,
    pub local: bool,
    pub delay_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartupResult {
    pub joins: Vec<StartupJoin>,
    pub clique_count: usize,
    /// `1 + ceil(log_{2^b}(cliques))`.
    pub message_bound: u32,
    pub digest: String,
}

impl StartupResult {
    pub fn within_bound(&self) -> usize {
        self.joins.iter().filter(|j| j.messages <= self.message_bound).count()
    }

    pub fn metric_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        let n = self.joins.len();
        let mut out = Vec::with_capacity(2 * n);
        for j in &self.joins {
            let t = if j.local { "local" } else { "remote" };
            out.push(MetricSample { scenario_tag: format!("{tag}:{t}"), metric: MetricKind::StartupMessages, group_size: n, value: f64::from(j.messages), seed });
            out.push(MetricSample { scenario_tag: format!("{tag}:{t}"), metric: MetricKind::StartupDelay, group_size: n, value: j.delay_ms, seed });
        }
        out
    }
}

/// Joins random nodes one at a time to a handful of channels, letting each
/// join finish before the next starts.
pub fn run_startup(setup: &Setup, sub: &Overlay, p: &StartupParams, seed: u64) -> Result<StartupResult, ExperimentError> {
    if p.channels == 0 {
        return Err(ExperimentError::Setup("startup needs at least one channel".into()));
    }
    let mut rng = substream(seed, "startup");
    let mut w = setup.world(sub.clone(), seed)?;
    let sources = pick_nodes(sub, p.channels, &[], &mut rng);
    let mut channels = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        channels.push(w.register_channel(&format!("ch{i}"), *s)?);
    }
    let per = p.joins.div_ceil(p.channels);
    let mut plan = Vec::new();
    for (i, &ch) in channels.iter().enumerate() {
        for m in pick_nodes(sub, per, &[sources[i]], &mut rng) {
            plan.push((ch, m));
        }
    }
    // Interleave channels so local and remote joins mix over time.
    plan.shuffle(&mut rng);
    plan.truncate(p.joins);

    let scale = ms_per_unit(&w);
    let mut joins = Vec::with_capacity(plan.len());
    for (ch, m) in plan {
        let before = w.outcomes().len();
        match w.join_channel(m, ch) {
            Ok(()) | Err(ProtocolError::NoStableNode(_)) => {}
            Err(e) => return Err(e.into()),
        }
        if !settle(&mut w, "startup")? {
            return Err(ExperimentError::Setup("startup join did not settle".into()));
        }
        for o in &w.outcomes()[before..] {
            joins.push(StartupJoin { messages: o.messages_used, local: o.local, delay_ms: o.startup_delay * scale });
        }
    }
    let clique_count = w.sub.clique_count();
    let b = w.sub.config().fanout();
    Ok(StartupResult { joins, clique_count, message_bound: 1 + ceil_log(clique_count, b), digest: w.digest() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joins_respect_the_message_bound() {
        let setup = Setup::small(1500);
        let sub = setup.overlay(6).unwrap();
        let r = run_startup(&setup, &sub, &StartupParams { channels: 4, joins: 80 }, 6).unwrap();
        assert_eq!(r.joins.len(), 80);
        assert_eq!(r.within_bound(), 80, "{r:?}");
        assert!(r.joins.iter().filter(|j| j.local).all(|j| j.messages == 1));
        assert!(r.joins.iter().any(|j| j.local));
        assert!(r.joins.iter().any(|j| !j.local));
    }
}
