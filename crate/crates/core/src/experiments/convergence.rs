use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::geometry::distance;
use crate::metrics::{bin_means, convergence, Bin, MetricKind, MetricSample};
use crate::rng::substream;
use crate::substrate::{NodeId, RoutePolicy};
use crate::Overlay;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceParams {
    pub sources: usize,
    pub pairs_per_source: usize,
    pub bins: usize,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        ConvergenceParams { sources: 100, pairs_per_source: 100, bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceResult {
    /// `(distance between the two destinations, C)` per pair.
    pub samples: Vec<(f64, f64)>,
    pub bins: Vec<Bin>,
    pub max_inter_hops: usize,
}

pub const FIG2_HEADER: &str = "dest_distance_bin,mean_C,n";

impl ConvergenceResult {
    /// One row per bin, keyed by the bin's midpoint. Empty bins print an
    /// empty mean.
    pub fn fig2_csv(&self) -> String {
        let mut s = String::from(FIG2_HEADER);
        s.push('\n');
        for b in &self.bins {
            let mid = (b.lo + b.hi) / 2.0;
            if b.n == 0 {
                s.push_str(&format!("{mid},,0\n"));
            } else {
                s.push_str(&format!("{mid},{},{}\n", b.mean, b.n));
            }
        }
        s
    }

    pub fn metric_samples(&self, tag: &str, seed: u64) -> Vec<MetricSample> {
        let c: Vec<f64> = self.samples.iter().map(|s| s.1).collect();
        vec![MetricSample {
            scenario_tag: tag.to_string(),
            metric: MetricKind::Convergence,
            group_size: self.samples.len(),
            value: crate::metrics::mean(&c),
            seed,
        }]
    }
}

/// Routes from random sources to random pairs of destination nodes with
/// stable-node routing and records how much of the two paths is shared.
pub fn run_convergence(sub: &mut Overlay, p: &ConvergenceParams, seed: u64) -> Result<ConvergenceResult, ExperimentError> {
    let ids: Vec<NodeId> = sub.alive_nodes().map(|n| n.id).collect();
    if ids.len() < 3 {
        return Err(ExperimentError::Setup("convergence needs at least three nodes".into()));
    }
    let mut rng = substream(seed, "fig2");
    let mut samples = Vec::with_capacity(p.sources * p.pairs_per_source);
    let mut max_inter_hops = 0;
    for _ in 0..p.sources {
        let src = ids[rng.gen_range(0..ids.len())];
        for _ in 0..p.pairs_per_source {
            let (a, b) = loop {
                let a = ids[rng.gen_range(0..ids.len())];
                let b = ids[rng.gen_range(0..ids.len())];
                if a != b && a != src && b != src {
                    break (a, b);
                }
            };
            let pa = sub.route(src, sub.clique_id_of(a), Some(a), RoutePolicy::PreferStable)?;
            let pb = sub.route(src, sub.clique_id_of(b), Some(b), RoutePolicy::PreferStable)?;
            max_inter_hops = max_inter_hops.max(pa.inter_clique_hops()).max(pb.inter_clique_hops());
            let c = convergence(&pa, &pb).map_err(|e| ExperimentError::Setup(e.to_string()))?;
            samples.push((distance(sub.position(a), sub.position(b)), c.c));
        }
    }
    let bins = bin_means(&samples, p.bins);
    Ok(ConvergenceResult { samples, bins, max_inter_hops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::Setup;

    #[test]
    fn fig2_csv_has_one_row_per_bin() {
        let mut sub = Setup::small(1500).overlay(2).unwrap();
        let p = ConvergenceParams { sources: 5, pairs_per_source: 20, bins: 8 };
        let r = run_convergence(&mut sub, &p, 2).unwrap();
        assert_eq!(r.samples.len(), 100);
        let csv = r.fig2_csv();
        assert!(csv.starts_with("dest_distance_bin,mean_C,n\n"));
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(r.bins.iter().map(|b| b.n).sum::<usize>(), 100);
        assert!(r.samples.iter().all(|s| (0.0..=1.0).contains(&s.1)));
    }
}
