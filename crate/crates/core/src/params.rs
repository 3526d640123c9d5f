use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Baseband symbol carried over the air.
pub type ComplexSample = num_complex::Complex64;

/// How the base station scales each estimated coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// Cancels truncation and phase-noise attenuation in expectation.
    Unbiased,
    /// Cancels truncation only; constant over coordinates.
    Practical,
}

impl FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unbiased" => Ok(Normalizer::Unbiased),
            "practical" => Ok(Normalizer::Practical),
            other => Err(Error::InvalidParam(format!(
                "unknown normalizer {other:?} (expected unbiased | practical)"
            ))),
        }
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalizer::Unbiased => "unbiased",
            Normalizer::Practical => "practical",
        })
    }
}

/// Channel and estimator constants shared by every round of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub num_devices: usize,
    /// Length of the gradient vector; two coordinates ride on each symbol.
    pub model_dim: usize,
    /// Fading variance: `h ~ CN(0, sigma_h2)`.
    pub sigma_h2: f64,
    /// Variance of each Wiener phase increment.
    pub sigma_e2: f64,
    /// Thermal noise variance at the base station.
    pub sigma_w2: f64,
    /// Truncation threshold on `|h|^2`.
    pub threshold: f64,
    /// Per-symbol transmit power limit (monitored, not enforced).
    pub power_limit: f64,
    pub normalizer: Normalizer,
    pub base_seed: u64,
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if self.num_devices == 0 {
            return bad("num_devices must be positive".into());
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return bad(format!(
                "model_dim must be positive and even, got {}",
                self.model_dim
            ));
        }
        if !(self.sigma_h2 > 0.0 && self.sigma_h2.is_finite()) {
            return bad(format!("sigma_h2 must be > 0, got {}", self.sigma_h2));
        }
        for (name, v) in [
            ("sigma_e2", self.sigma_e2),
            ("sigma_w2", self.sigma_w2),
            ("threshold", self.threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.power_limit.is_nan() || self.power_limit <= 0.0 {
            return bad(format!("power_limit must be > 0, got {}", self.power_limit));
        }
        Ok(())
    }

    /// Symbols per coherence block.
    pub fn symbols(&self) -> usize {
        self.model_dim / 2
    }

    /// Probability that a device passes the truncation test, `exp(-t / sigma_h2)`.
    pub fn active_probability(&self) -> f64 {
        (-self.threshold / self.sigma_h2).exp()
    }
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            num_devices: 10,
            model_dim: crate::model::PARAM_COUNT,
            sigma_h2: 1.0,
            sigma_e2: 0.0005,
            sigma_w2: 2e-8,
            threshold: 0.01,
            power_limit: 1.0,
            normalizer: Normalizer::Practical,
            base_seed: 1,
        }
    }
}
