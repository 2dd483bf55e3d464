//! Chance-constrained proxy-based deep metric learning (CCP) at desk scale.
//!
//! The crate is split along the training pipeline:
//!
//! - [`net`]: a small feed-forward embedding network with hand-written
//!   backpropagation, the norm-clipping output transform and Adam.
//! - [`losses`]: pairwise and proxy-anchored losses with exact gradients.
//! - [`kcenter`]: greedy farthest-first k-Center selection and covering radii.
//! - [`metrics`]: exact P@1 / P@R / MAP@R retrieval metrics and violation rates.
//! - [`data`]: IDX loading, synthetic blobs, stratified splits and the
//!   M-per-class batch sampler.
//! - [`ccp`]: the projection loop that re-initializes proxies from selected
//!   samples and minimizes a regularized proxy objective.
//! - [`config`] and [`runner`]: the experiment runner behind the CLI.

pub mod ccp;
pub mod config;
pub mod data;
mod error;
pub mod kcenter;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod runner;
pub mod seeds;

pub use error::{Error, Result};

/// Squared Euclidean distance between two equally sized slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance between two equally sized slices.
#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
