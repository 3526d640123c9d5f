//! Deterministic random streams.
//!
//! Every random draw in the simulator comes from an [`RngStream`] whose seed is
//! a pure function of the run's base seed and a [`StreamId`]. Two streams with
//! the same identity produce the same sequence no matter which thread creates
//! them or in which order, so trials, devices and rounds can be simulated in
//! parallel without changing any output.

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// What a stream is used for. Each role gets its own seed space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Fading and phase-increment draws for one coherence block.
    Channel,
    /// Thermal noise at the base station.
    Noise,
    /// Per-device, per-epoch batch shuffle.
    Batches,
    /// Shard-to-device allocation.
    Shard,
    /// Model initialization.
    Init,
    /// Extra batch used to refresh the Sort permutation.
    SortBatch,
    /// Monte Carlo realizations of the moment verifier.
    MonteCarlo,
    /// Anything else (test fixtures, dumps).
    Aux,
}

impl Role {
    fn code(self) -> u64 {
        match self {
            Role::Channel => 1,
            Role::Noise => 2,
            Role::Batches => 3,
            Role::Shard => 4,
            Role::Init => 5,
            Role::SortBatch => 6,
            Role::MonteCarlo => 7,
            Role::Aux => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub trial: u64,
    pub role: Role,
    /// Device index, or 0 for station-wide streams.
    pub index: u64,
    /// Round, epoch or realization counter, depending on the role.
    pub round: u64,
}

impl StreamId {
    pub fn new(trial: u64, role: Role, index: u64, round: u64) -> Self {
        Self {
            trial,
            role,
            index,
            round,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base_seed: u64, id: &StreamId) -> [u8; 32] {
    let mut state = base_seed;
    for word in [id.trial, id.role.code(), id.index, id.round] {
        state = splitmix64(&mut state) ^ word;
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

#[derive(Debug, Clone)]
pub struct RngStream {
    id: StreamId,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(base_seed: u64, id: StreamId) -> Self {
        Self {
            id,
            rng: ChaCha12Rng::from_seed(derive_seed(base_seed, &id)),
        }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Normal variate with the given variance. A zero variance yields exactly 0.
    pub fn normal(&mut self, variance: f64) -> f64 {
        let z = self.standard_normal();
        if variance == 0.0 {
            0.0
        } else {
            z * variance.sqrt()
        }
    }

    /// Circularly-symmetric complex Gaussian with `E[|z|^2] = variance`.
    pub fn complex_gaussian(&mut self, variance: f64) -> Result<Complex64> {
        if variance.is_nan() || variance < 0.0 {
            return Err(Error::InvalidParam(format!(
                "complex Gaussian variance must be >= 0, got {variance}"
            )));
        }
        let half = variance / 2.0;
        let re = self.normal(half);
        let im = self.normal(half);
        Ok(Complex64::new(re, im))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
