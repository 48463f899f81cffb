//! The 2-D proximity plane nodes live in.
//!
//! Latency between two nodes is their euclidean distance (one plane unit is
//! one latency unit), so every length reported by the simulator is in plane
//! units.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("node_count must be at least 1")]
    NoNodes,
    #[error("plane_side must be positive and finite, got {0}")]
    BadPlaneSide(f64),
    #[error("median split needs at least 2 points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point<T>) -> T {
        distance(*self, *other)
    }

    pub fn cast<U: Scalar>(self) -> Point<U> {
        Point::new(U::of(self.x.as_f64()), U::of(self.y.as_f64()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneConfig {
    pub plane_side: f64,
    pub node_count: usize,
    pub rng_seed: u64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        PlaneConfig { plane_side: 3500.0, node_count: 10_000, rng_seed: 1 }
    }
}

impl PlaneConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.node_count == 0 {
            return Err(GeometryError::NoNodes);
        }
        if !(self.plane_side.is_finite() && self.plane_side > 0.0) {
            return Err(GeometryError::BadPlaneSide(self.plane_side));
        }
        Ok(())
    }
}

/// Places `node_count` nodes i.i.d. uniformly on the square `[0, plane_side]²`.
pub fn place_nodes<T: Scalar>(cfg: &PlaneConfig) -> Result<Vec<Point<T>>, GeometryError> {
    cfg.validate()?;
    let mut rng = substream(cfg.rng_seed, "placement");
    let side = cfg.plane_side;
    Ok((0..cfg.node_count)
        .map(|_| Point::new(T::of(rng.gen_range(0.0..=side)), T::of(rng.gen_range(0.0..=side))))
        .collect())
}

pub fn distance<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    (a.x - b.x).hypot(a.y - b.y)
}

pub fn centroid<T: Scalar>(points: impl IntoIterator<Item = Point<T>>) -> Option<Point<T>> {
    let mut n = 0usize;
    let (mut sx, mut sy) = (T::zero(), T::zero());
    for p in points {
        sx = sx + p.x;
        sy = sy + p.y;
        n += 1;
    }
    (n > 0).then(|| Point::new(sx / T::of_usize(n), sy / T::of_usize(n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

fn spread<T: Scalar>(coords: impl Iterator<Item = T>) -> T {
    let (lo, hi) = coords.fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Axis with the larger coordinate spread; `X` on ties.
pub fn split_axis<T: Scalar, I>(points: &[(I, Point<T>)]) -> Axis {
    let sx = spread(points.iter().map(|(_, p)| p.x));
    let sy = spread(points.iter().map(|(_, p)| p.y));
    if sy > sx {
        Axis::Y
    } else {
        Axis::X
    }
}

/// Median cut along the axis of greater spread.
///
/// The first group holds the `⌈n/2⌉` points with the smallest coordinate on
/// that axis, the second group the rest. Ties on the coordinate are ordered by
/// the point identifier, so the split is a pure function of its input set.
pub fn median_split<T: Scalar, I: Ord + Copy>(
    points: &[(I, Point<T>)],
) -> Result<(Vec<(I, Point<T>)>, Vec<(I, Point<T>)>), GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::TooFewPoints(points.len()));
    }
    let axis = split_axis(points);
    let key = |p: &Point<T>| match axis {
        Axis::X => p.x,
        Axis::Y => p.y,
    };
    let mut sorted = points.to_vec();
    sorted.sort_by(|(ia, pa), (ib, pb)| {
        key(pa).partial_cmp(&key(pb)).unwrap_or(std::cmp::Ordering::Equal).then(ia.cmp(ib))
    });
    let upper = sorted.split_off(points.len().div_ceil(2));
    Ok((sorted, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(xs: &[(u32, f64, f64)]) -> Vec<(u32, Point<f64>)> {
        xs.iter().map(|&(i, x, y)| (i, Point::new(x, y))).collect()
    }

    #[test]
    fn three_four_five() {
        assert_eq!(distance(Point::new(0.0, 0.0), Point::new(3.0, 4.0)), 5.0);
        let p = Point::new(1.5f32, -2.0);
        assert_eq!(distance(p, p), 0.0);
    }

    #[test]
    fn placement_stays_in_square_and_is_reproducible() {
        let cfg = PlaneConfig { plane_side: 3500.0, node_count: 100_000, rng_seed: 11 };
        let a: Vec<Point<f64>> = place_nodes(&cfg).unwrap();
        assert_eq!(a.len(), 100_000);
        assert!(a.iter().all(|p| (0.0..=3500.0).contains(&p.x) && (0.0..=3500.0).contains(&p.y)));
        let b: Vec<Point<f64>> = place_nodes(&cfg).unwrap();
        assert_eq!(a, b);

        let one: Vec<Point<f32>> = place_nodes(&PlaneConfig { plane_side: 1.0, node_count: 1, rng_seed: 3 }).unwrap();
        assert_eq!(one.len(), 1);
        assert!((0.0..=1.0).contains(&one[0].x) && (0.0..=1.0).contains(&one[0].y));
    }

    #[test]
    fn placement_rejects_empty_and_bad_side() {
        let cfg = PlaneConfig { plane_side: 10.0, node_count: 0, rng_seed: 1 };
        assert_eq!(place_nodes::<f64>(&cfg).unwrap_err(), GeometryError::NoNodes);
        let cfg = PlaneConfig { plane_side: 0.0, node_count: 3, rng_seed: 1 };
        assert!(matches!(place_nodes::<f64>(&cfg), Err(GeometryError::BadPlaneSide(_))));
    }

    #[test]
    fn triangle_inequality_on_sampled_triples() {
        let cfg = PlaneConfig { plane_side: 3500.0, node_count: 3000, rng_seed: 5 };
        let p: Vec<Point<f64>> = place_nodes(&cfg).unwrap();
        for t in p.chunks_exact(3) {
            let (a, b, c) = (t[0], t[1], t[2]);
            assert!(distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9);
            assert_eq!(distance(a, b), distance(b, a));
        }
    }

    #[test]
    fn collinear_median_cut() {
        let (a, b) = median_split(&pts(&[(3, 3.0, 0.0), (1, 1.0, 0.0), (4, 4.0, 0.0), (2, 2.0, 0.0)])).unwrap();
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(b.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn minimal_split_and_rejection() {
        let (a, b) = median_split(&pts(&[(1, 0.0, 0.0), (2, 0.0, 5.0)])).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(median_split(&pts(&[(1, 0.0, 0.0)])).unwrap_err(), GeometryError::TooFewPoints(1));
    }

    #[test]
    fn ties_broken_by_identifier() {
        let (a, b) = median_split(&pts(&[(9, 1.0, 0.0), (2, 1.0, 0.0), (5, 1.0, 0.0), (1, 0.0, 0.0)])).unwrap();
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(b.iter().map(|x| x.0).collect::<Vec<_>>(), vec![5, 9]);
    }

    #[test]
    fn split_groups_are_no_wider_than_the_whole() {
        let cfg = PlaneConfig { plane_side: 3500.0, node_count: 128, rng_seed: 21 };
        let p: Vec<(usize, Point<f64>)> = place_nodes(&cfg).unwrap().into_iter().enumerate().collect();
        let diam = |s: &[(usize, Point<f64>)]| {
            let mut m = 0.0f64;
            for (_, a) in s {
                for (_, b) in s {
                    m = m.max(distance(*a, *b));
                }
            }
            m
        };
        let (a, b) = median_split(&p).unwrap();
        assert!(diam(&a) <= diam(&p));
        assert!(diam(&b) <= diam(&p));
    }

    proptest! {
        #[test]
        fn median_split_is_a_balanced_partition(raw in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 2..200)) {
            let input: Vec<(usize, Point<f64>)> = raw.iter().enumerate().map(|(i, &(x, y))| (i, Point::new(x, y))).collect();
            let (a, b) = median_split(&input).unwrap();
            prop_assert_eq!(a.len(), input.len().div_ceil(2));
            prop_assert_eq!(b.len(), input.len() / 2);
            let mut ids: Vec<usize> = a.iter().chain(b.iter()).map(|x| x.0).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..input.len()).collect::<Vec<_>>());
            let axis = split_axis(&input);
            let c = |p: &Point<f64>| if axis == Axis::X { p.x } else { p.y };
            let amax = a.iter().map(|x| c(&x.1)).fold(f64::NEG_INFINITY, f64::max);
            let bmin = b.iter().map(|x| c(&x.1)).fold(f64::INFINITY, f64::min);
            prop_assert!(amax <= bmin);
        }

        #[test]
        fn distance_is_a_metric(ax in -1e3f64..1e3, ay in -1e3f64..1e3, bx in -1e3f64..1e3, by in -1e3f64..1e3, cx in -1e3f64..1e3, cy in -1e3f64..1e3) {
            let (a, b, c) = (Point::new(ax, ay), Point::new(bx, by), Point::new(cx, cy));
            prop_assert!(distance(a, b) >= 0.0);
            prop_assert_eq!(distance(a, b), distance(b, a));
            prop_assert!(distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9);
        }
    }
}
