//! Gradient permutations applied by every device before transmission and
//! undone by the base station after estimation.
//!
//! Position `p` of the permuted vector is sent in symbol `p / 2`, so a
//! permutation decides which coordinates get the early, low-drift symbols.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationKind {
    /// Input layers first, output layers last.
    Identity,
    /// Output layers first.
    Flip,
    /// Pair-aligned circular shift that advances every round.
    Roll,
    /// Largest average magnitude first.
    Sort,
}

impl PermutationKind {
    pub const ALL: [PermutationKind; 4] = [
        PermutationKind::Identity,
        PermutationKind::Flip,
        PermutationKind::Roll,
        PermutationKind::Sort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PermutationKind::Identity => "identity",
            PermutationKind::Flip => "flip",
            PermutationKind::Roll => "roll",
            PermutationKind::Sort => "sort",
        }
    }
}

impl fmt::Display for PermutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PermutationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PermutationKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidParam(format!(
                    "unknown permutation {s:?} (expected identity | flip | roll | sort)"
                ))
            })
    }
}

/// Per-coordinate magnitudes reported by one device for the Sort plan.
///
/// Built only from `|g|`; the side channel never carries signed gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitudes(Vec<f64>);

impl Magnitudes {
    pub fn from_gradient(g: &[f64]) -> Self {
        Self(g.iter().map(|v| v.abs()).collect())
    }

    pub fn from_abs(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::InvalidParam(format!(
                "magnitude must be >= 0, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Pair-aligned roll offset for round `n`: `2 * (n mod D/2)`.
pub fn roll_offset(round: u64, dim: usize) -> usize {
    let half = (dim / 2).max(1) as u64;
    2 * (round % half) as usize
}

/// Permutation in force for one round. Forward: `out[p] = g[source(p)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationPlan {
    kind: PermutationKind,
    dim: usize,
    round: u64,
    /// Sort only: `sorted[p]` is the coordinate sent at position `p`.
    sorted: Option<Vec<usize>>,
}

impl PermutationPlan {
    pub fn identity(dim: usize) -> Self {
        Self::simple(PermutationKind::Identity, dim)
    }

    pub fn flip(dim: usize) -> Self {
        Self::simple(PermutationKind::Flip, dim)
    }

    pub fn roll(dim: usize, round: u64) -> Self {
        Self {
            round,
            ..Self::simple(PermutationKind::Roll, dim)
        }
    }

    fn simple(kind: PermutationKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            round: 0,
            sorted: None,
        }
    }

    /// Plan for a kind that needs no side information. Sort starts as the
    /// identity order until [`PermutationPlan::from_magnitudes`] replaces it.
    pub fn new(kind: PermutationKind, dim: usize) -> Self {
        match kind {
            PermutationKind::Sort => Self {
                sorted: Some((0..dim).collect()),
                ..Self::simple(kind, dim)
            },
            k => Self::simple(k, dim),
        }
    }

    /// Sort plan from explicit indices; must be a permutation of `0..D`.
    pub fn sort(indices: Vec<usize>) -> Result<Self> {
        let dim = indices.len();
        let mut seen = vec![false; dim];
        for &i in &indices {
            if i >= dim || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidParam(format!(
                    "sort indices are not a permutation of 0..{dim}"
                )));
            }
        }
        Ok(Self {
            sorted: Some(indices),
            ..Self::simple(PermutationKind::Sort, dim)
        })
    }

    /// Averages magnitudes over devices and orders coordinates from largest
    /// to smallest average; ties keep the lower index first.
    pub fn from_magnitudes(per_device: &[Magnitudes]) -> Result<Self> {
        let first = per_device
            .first()
            .ok_or_else(|| Error::InvalidParam("no devices reported magnitudes".into()))?;
        let dim = first.0.len();
        let mut avg = vec![0.0; dim];
        for m in per_device {
            if m.0.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: m.0.len(),
                });
            }
            for (a, v) in avg.iter_mut().zip(&m.0) {
                *a += v;
            }
        }
        let k = per_device.len() as f64;
        avg.iter_mut().for_each(|a| *a /= k);
        let mut order: Vec<usize> = (0..dim).collect();
        // Stable: equal averages stay in index order.
        order.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]));
        Self::sort(order)
    }

    pub fn kind(&self) -> PermutationKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn sorted_indices(&self) -> Option<&[usize]> {
        self.sorted.as_deref()
    }

    /// Moves to round `n`. Only Roll depends on the round.
    pub fn at_round(&self, round: u64) -> Self {
        Self {
            round,
            ..self.clone()
        }
    }

    pub fn advance_round(&mut self) {
        self.round += 1;
    }

    /// Coordinate of the original vector sent at position `p`.
    pub fn source(&self, p: usize) -> usize {
        match self.kind {
            PermutationKind::Identity => p,
            PermutationKind::Flip => self.dim - 1 - p,
            PermutationKind::Roll => (p + roll_offset(self.round, self.dim)) % self.dim,
            PermutationKind::Sort => self.sorted.as_ref().map_or(p, |s| s[p]),
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn apply(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check(g.len())?;
        Ok((0..self.dim).map(|p| g[self.source(p)]).collect())
    }

    pub fn inverse(&self, permuted: &[f64]) -> Result<Vec<f64>> {
        self.check(permuted.len())?;
        let mut out = vec![0.0; self.dim];
        for (p, &v) in permuted.iter().enumerate() {
            out[self.source(p)] = v;
        }
        Ok(out)
    }
}
