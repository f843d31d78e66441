//! Online continual test-time adaptation.
//!
//! A small dense classifier pretrained on a labeled source domain is adapted,
//! one unlabeled batch at a time, to a stream of drifting target domains. The
//! adaptation combines:
//!
//! - a mean-teacher pair (student trained by Adam, teacher tracked by EMA),
//! - an entropy-gated sample buffer whose entries are replayed with their
//!   teacher pseudo-labels,
//! - a class relation graph loss that keeps the cosine topology of the class
//!   centroids close to the one observed on the source domain.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the `ctta` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adapter;
pub mod buffer;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod nn;
pub mod optim;
pub mod relation;
pub mod rng;
pub mod source;
pub mod stream;

pub use error::{Error, Result};
pub use math::Matrix;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln(max(p, PROB_FLOOR))`.
#[inline]
pub fn safe_ln(p: f64) -> f64 {
    libm::log(p.max(PROB_FLOOR))
}
