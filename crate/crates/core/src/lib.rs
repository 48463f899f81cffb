//! Deterministic simulator for live streaming over a clustered DHT.

pub mod baselines;
pub mod geometry;
pub mod metrics;
pub mod experiments;
pub mod protocol;
pub mod scenario;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod substrate;
pub mod tree;

pub use scalar::Scalar;

pub type Position = geometry::Point<f64>;
pub type Overlay = substrate::Substrate<f64>;
