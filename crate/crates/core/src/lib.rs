//! Fair tabular data generation with a score-based diffusion model.
//!
//! The crate trains a variance-preserving diffusion model together with two
//! time-conditioned guidance classifiers (one for the label, one for the
//! sensitive attribute) under a first-order meta-learning regime over
//! multi-domain data. Sampling steers the reverse SDE with two gradient
//! terms: a label log-probability gradient that controls the class of each
//! generated row, and a sensitive-posterior entropy gradient that pushes
//! samples into regions where the sensitive attribute cannot be predicted.
//! Downstream classifiers trained on the synthetic output are evaluated for
//! accuracy and group fairness (demographic-parity and equalized-opportunity
//! ratios) on held-out domains.
//!
//! Everything here is pure computation over explicit RNG streams; file
//! formats, CSV ingestion and the command-line driver live in the companion
//! `fairdiff` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diffusion;
pub mod error;
pub mod fairness;
pub mod guidance;
pub mod meta;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tabular;
pub mod timefeat;

pub use error::{Error, Result};
