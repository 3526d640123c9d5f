//! Simulator for over-the-air federated learning under Wiener phase noise.
//!
//! Devices send gradients as analog symbols that superpose on a Rayleigh
//! block-fading uplink; each device pre-inverts its block-start channel, and
//! oscillator phase noise then rotates later symbols more than early ones.
//! Gradient permutations ([`permute`]) choose which coordinates ride on the
//! early symbols. [`moments`] checks the estimator's closed-form moments by
//! Monte Carlo, and [`fedsim`] runs full FedSGD training on MNIST.

pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod model;
pub mod moments;
pub mod params;
pub mod permute;
pub mod rng;

pub use error::{Error, Result};
pub use params::{ComplexSample, Normalizer, SystemParams};
pub use permute::{PermutationKind, PermutationPlan};
pub use rng::{RngStream, Role, StreamId};
