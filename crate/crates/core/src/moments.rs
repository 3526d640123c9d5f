//! Closed-form first and second moments of the gradient estimate, and a Monte
//! Carlo harness that checks them against simulated rounds.
//!
//! For coordinate `d` let `m = d - d % 2` (the even member of its symbol pair).
//! Symbol `m / 2` has accumulated `m / 2` phase increments, so the rotation
//! angle `x ~ N(0, m * sigma_e2 / 2)` and
//!
//! ```text
//! E[cos x]   = exp(-m sigma_e2 / 4)          E[sin x]   = 0
//! E[cos^2 x] = (1 + exp(-m sigma_e2)) / 2    E[sin^2 x] = (1 - exp(-m sigma_e2)) / 2
//! ```
//!
//! Each device passes truncation with probability `q = exp(-t / sigma_h2)`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::channel;
use crate::error::{Error, Result};
use crate::params::{Normalizer, SystemParams};
use crate::rng::{RngStream, Role, StreamId};

/// Mean must sit within this many standard errors of the closed form.
pub const MEAN_SIGMAS: f64 = 4.0;
/// Relative tolerance on the variance.
pub const VAR_REL_TOL: f64 = 0.03;
/// Two-sided 99% normal quantile used for the variance confidence band.
pub const VAR_Z99: f64 = 2.575_829_303_548_901;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaRho {
    pub mean_alpha: f64,
    pub mean_rho: f64,
    pub mean_alpha_sq: f64,
    pub mean_rho_sq: f64,
}

fn even_part(d: usize) -> f64 {
    (d - d % 2) as f64
}

/// Moments of `cos x` and `sin x` for the rotation seen by coordinate `d`.
/// Odd `d` uses its even partner.
pub fn alpha_rho_moments(d: usize, sigma_e2: f64) -> AlphaRho {
    let m = even_part(d);
    let decay = (-m * sigma_e2).exp();
    AlphaRho {
        mean_alpha: (-m * sigma_e2 / 4.0).exp(),
        mean_rho: 0.0,
        mean_alpha_sq: 0.5 * (1.0 + decay),
        mean_rho_sq: 0.5 * (1.0 - decay),
    }
}

/// `E[g_hat_d]` given the devices' values of coordinate `d`, using the
/// normalizer selected in `params`.
pub fn closed_mean(own: &[f64], d: usize, params: &SystemParams) -> f64 {
    let k = params.num_devices as f64;
    let a = channel::normalizer(d, params);
    let attenuation =
        (-params.threshold / params.sigma_h2 - even_part(d) * params.sigma_e2 / 4.0).exp();
    a * attenuation / k * own.iter().sum::<f64>()
}

/// Thermal contribution `a_d^2 sigma_w2 / (2 K^2)` with the unbiased `a_d`.
pub fn thermal_term(d: usize, params: &SystemParams) -> f64 {
    let k = params.num_devices as f64;
    let a = unbiased_normalizer(d, params);
    a * a * params.sigma_w2 / (2.0 * k * k)
}

fn unbiased_normalizer(d: usize, params: &SystemParams) -> f64 {
    let p = SystemParams {
        normalizer: Normalizer::Unbiased,
        ..params.clone()
    };
    channel::normalizer(d, &p)
}

/// `Var[g_hat_d]` under the unbiased normalizer.
///
/// `pairs[k]` is device `k`'s symbol pair `(g[m], g[m + 1])`. The coordinate
/// being estimated takes the `(1 + e^{-m s2} - 2 e^{-t/h2 - m s2 / 2})`
/// coefficient and its partner the `(1 - e^{-m s2})` one; for odd `d` these
/// roles swap relative to the even case.
pub fn closed_var(pairs: &[[f64; 2]], d: usize, params: &SystemParams) -> f64 {
    let k = params.num_devices as f64;
    let m = even_part(d);
    let s2 = params.sigma_e2;
    let tr = params.threshold / params.sigma_h2;
    let own_coef = 1.0 + (-m * s2).exp() - 2.0 * (-tr - m * s2 / 2.0).exp();
    let partner_coef = 1.0 - (-m * s2).exp();
    let (own_idx, partner_idx) = if d.is_multiple_of(2) { (0, 1) } else { (1, 0) };
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            own_coef * p[own_idx] * p[own_idx] + partner_coef * p[partner_idx] * p[partner_idx]
        })
        .sum();
    (tr + m * s2 / 2.0).exp() / (2.0 * k * k) * sum + thermal_term(d, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub d: usize,
    pub closed_mean: f64,
    pub closed_var: f64,
    pub mc_mean: f64,
    pub mc_var: f64,
    pub mc_mean_stderr: f64,
    /// Standard error of `mc_var`, from the sample fourth central moment.
    pub mc_var_stderr: f64,
    pub realizations: usize,
}

impl MomentReport {
    pub fn mean_ok(&self) -> bool {
        (self.mc_mean - self.closed_mean).abs() <= MEAN_SIGMAS * self.mc_mean_stderr
    }

    pub fn var_ok(&self) -> bool {
        self.var_rel_err() <= VAR_REL_TOL
    }

    /// Variance inside the 99% sampling band, for runs too short for the
    /// relative tolerance to be meaningful.
    pub fn var_in_band(&self) -> bool {
        (self.mc_var - self.closed_var).abs() <= VAR_Z99 * self.mc_var_stderr
    }

    pub fn var_rel_err(&self) -> f64 {
        if self.closed_var == 0.0 {
            if self.mc_var == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mc_var - self.closed_var).abs() / self.closed_var.abs()
        }
    }

    pub fn pass(&self) -> bool {
        self.mean_ok() && self.var_ok()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Simulates `realizations` independent rounds of the fixed per-device
/// gradients `grads` (K vectors of length D) and compares every coordinate's
/// sample moments with the closed forms.
pub fn mc_moments(
    grads: &[Vec<f64>],
    params: &SystemParams,
    realizations: usize,
    trial: u64,
) -> Result<Vec<MomentReport>> {
    params.validate()?;
    if realizations < 2 {
        return Err(Error::InvalidParam("need at least 2 realizations".into()));
    }
    if grads.len() != params.num_devices {
        return Err(Error::DimensionMismatch {
            expected: params.num_devices,
            actual: grads.len(),
        });
    }
    let dim = params.model_dim;
    let samples: Vec<Vec<f64>> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let mut ch = RngStream::new(
                params.base_seed,
                StreamId::new(trial, Role::MonteCarlo, 0, r),
            );
            let mut noise = RngStream::new(
                params.base_seed,
                StreamId::new(trial, Role::MonteCarlo, 1, r),
            );
            let block = channel::ChannelBlock::sample(params, &mut ch)?;
            let y = channel::superpose(grads, &block, params, &mut noise)?;
            channel::estimate(&y, params)
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut acc = Welford::default();
        for s in &samples {
            acc.push(s[d]);
        }
        let mean = acc.mean;
        let var = acc.variance();
        let n = realizations as f64;
        let m4 = samples.iter().map(|s| (s[d] - mean).powi(4)).sum::<f64>() / n;
        let m2 = acc.m2 / n;
        let m = d - d % 2;
        let own: Vec<f64> = grads.iter().map(|g| g[d]).collect();
        let pairs: Vec<[f64; 2]> = grads.iter().map(|g| [g[m], g[m + 1]]).collect();
        reports.push(MomentReport {
            d,
            closed_mean: closed_mean(&own, d, params),
            closed_var: closed_var(&pairs, d, params),
            mc_mean: mean,
            mc_var: var,
            mc_mean_stderr: (var / n).sqrt(),
            mc_var_stderr: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
            realizations,
        });
    }
    Ok(reports)
}

/// Setup of a moment-verification run.
#[derive(Debug, Clone)]
pub struct MomentCheck {
    pub params: SystemParams,
    pub realizations: usize,
    /// Standard deviation of the fixed random gradient entries.
    pub gradient_scale: f64,
    pub trial: u64,
}

impl MomentCheck {
    /// K = 4, D = 8, t = 0.01, sigma_h2 = 1, sigma_e2 = 0.02, sigma_w2 = 2e-8,
    /// unbiased normalizer, 2e5 rounds. Gradient entries have the 1e-3 scale
    /// of a trained CNN so the thermal term is not negligible.
    pub fn acceptance(base_seed: u64) -> Self {
        Self {
            params: SystemParams {
                num_devices: 4,
                model_dim: 8,
                sigma_h2: 1.0,
                sigma_e2: 0.02,
                sigma_w2: 2e-8,
                threshold: 0.01,
                power_limit: 1.0,
                normalizer: Normalizer::Unbiased,
                base_seed,
            },
            realizations: 200_000,
            gradient_scale: 1e-3,
            trial: 0,
        }
    }

    pub fn fixed_gradients(&self) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(
            self.params.base_seed,
            StreamId::new(self.trial, Role::Aux, 0, 0),
        );
        (0..self.params.num_devices)
            .map(|_| {
                (0..self.params.model_dim)
                    .map(|_| self.gradient_scale * rng.standard_normal())
                    .collect()
            })
            .collect()
    }

    pub fn run(&self) -> Result<Vec<MomentReport>> {
        mc_moments(
            &self.fixed_gradients(),
            &self.params,
            self.realizations,
            self.trial,
        )
    }
}

#[derive(Debug, Serialize)]
struct MomentRow {
    d: usize,
    closed_mean: f64,
    mc_mean: f64,
    stderr: f64,
    closed_var: f64,
    mc_var: f64,
    #[serde(rename = "R")]
    realizations: usize,
    pass: bool,
}

/// CSV with columns `d,closed_mean,mc_mean,stderr,closed_var,mc_var,R,pass`.
pub fn write_reports_csv<W: Write>(out: W, reports: &[MomentReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(MomentRow {
            d: r.d,
            closed_mean: r.closed_mean,
            mc_mean: r.mc_mean,
            stderr: r.mc_mean_stderr,
            closed_var: r.closed_var,
            mc_var: r.mc_var,
            realizations: r.realizations,
            pass: r.pass(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<moments csv>", e))?;
    Ok(())
}
