//! Detection and recovery for data poisoning attacks on locally
//! differentially private frequency oracles.
//!
//! The crate covers the full pipeline: perturbation and aggregation for
//! GRR, OUE, OLH and HST, fake-user attacks (MGA, adaptive MGA and the
//! adaptive pattern attack), support-histogram based fake-user detection,
//! attack detection from aggregated estimates, post-processing recovery and
//! the evaluation metrics used to compare them.

pub mod asd;
pub mod attacks;
pub mod bits;
pub mod domain;
pub mod data;
pub mod diffstats;
pub mod error;
pub mod harness;
pub mod hash;
pub mod io;
pub mod metrics;
pub mod oracles;
pub mod par;
pub mod postprocess;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
