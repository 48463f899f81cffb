//! Path convergence, stretch, network load and friends.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{distance, Point};
use crate::scalar::Scalar;
use crate::substrate::Path;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("paths start at different nodes ({0} vs {1})")]
    DifferentSources(String, String),
    #[error("empty path")]
    EmptyPath,
    #[error("group size must be at least 1")]
    EmptyGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceSample<T> {
    pub d_c: T,
    pub d_1: T,
    pub d_2: T,
    pub c: T,
    pub dest_distance: T,
}

/// Convergence from the three path segments. A destination whose path has
/// no divergent part contributes 1.
pub fn convergence_value<T: Scalar>(d_c: T, d_1: T, d_2: T) -> T {
    let term = |d: T| if d_c + d == T::zero() { T::one() } else { d_c / (d_c + d) };
    (term(d_1) + term(d_2)) / T::of(2.0)
}

/// Splits two same-source paths at the end of their longest common hop
/// prefix (compared node by node) and evaluates the convergence metric.
pub fn convergence<T: Scalar>(a: &Path<T>, b: &Path<T>) -> Result<ConvergenceSample<T>, MetricsError> {
    let (Some(fa), Some(fb)) = (a.hops.first(), b.hops.first()) else {
        return Err(MetricsError::EmptyPath);
    };
    if fa.node != fb.node {
        return Err(MetricsError::DifferentSources(fa.node.to_string(), fb.node.to_string()));
    }
    let shared = a.hops.iter().zip(&b.hops).take_while(|(x, y)| x.node == y.node).count();
    let sum = |p: &Path<T>, r: std::ops::Range<usize>| p.hops[r].iter().fold(T::zero(), |a, h| a + h.length);
    // Hop i's length is the link that reaches it, so the shared links are hops 1..shared.
    let d_c = sum(a, 1..shared);
    let d_1 = sum(a, shared..a.hops.len());
    let d_2 = sum(b, shared..b.hops.len());
    Ok(ConvergenceSample { d_c, d_1, d_2, c: convergence_value(d_c, d_1, d_2), dest_distance: T::zero() })
}

/// Path length over direct distance; `None` for co-located endpoints.
pub fn stretch<T: Scalar>(path_length: T, src: Point<T>, dst: Point<T>) -> Option<T> {
    let d = distance(src, dst);
    if d <= T::zero() {
        None
    } else {
        Some(path_length / d)
    }
}

/// Total length of every link a message and its replicas crossed, per member.
pub fn network_load<T: Scalar>(links: impl IntoIterator<Item = T>, group_size: usize) -> Result<T, MetricsError> {
    if group_size == 0 {
        return Err(MetricsError::EmptyGroup);
    }
    Ok(links.into_iter().fold(T::zero(), |a, x| a + x) / T::of_usize(group_size))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub n: usize,
}

/// Equal-width bins over the observed range of `x`, with the mean `y` per bin.
/// Empty bins are kept with `n = 0` and a NaN mean.
pub fn bin_means(samples: &[(f64, f64)], bins: usize) -> Vec<Bin> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut sums = vec![(0.0, 0usize); bins];
    for &(x, y) in samples {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        sums[i].0 += y;
        sums[i].1 += 1;
    }
    sums.into_iter()
        .enumerate()
        .map(|(i, (s, n))| Bin {
            lo: lo + width * i as f64,
            hi: lo + width * (i + 1) as f64,
            mean: if n == 0 { f64::NAN } else { s / n as f64 },
            n,
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Convergence,
    Stretch,
    NetworkLoadPerMember,
    StartupMessages,
    StartupDelay,
    PlaybackLatency,
    RecoveryTime,
    ControlMessages,
    RelayCount,
    InvariantViolations,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Convergence => "convergence",
            MetricKind::Stretch => "stretch",
            MetricKind::NetworkLoadPerMember => "network_load_per_member",
            MetricKind::StartupMessages => "startup_messages",
            MetricKind::StartupDelay => "startup_delay",
            MetricKind::PlaybackLatency => "playback_latency",
            MetricKind::RecoveryTime => "recovery_time",
            MetricKind::ControlMessages => "control_messages",
            MetricKind::RelayCount => "relay_count",
            MetricKind::InvariantViolations => "invariant_violations",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub scenario_tag: String,
    pub metric: MetricKind,
    pub group_size: usize,
    pub value: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "scenario_tag,metric,group_size,value,seed";

impl MetricSample {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.scenario_tag, self.metric, self.group_size, self.value, self.seed)
    }
}

pub fn to_csv(samples: &[MetricSample]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for m in samples {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}
