//! One coherence block of the uplink: Rayleigh fading, Wiener phase drift,
//! truncated channel inversion at the devices, superposition at the base
//! station and the per-coordinate estimator.
//!
//! Coordinates `2s` and `2s + 1` of a gradient ride on symbol `s` as the real
//! and imaginary part. Devices invert the channel they measured at the start of
//! the block, so the phase that accumulates afterwards rotates every symbol by
//! the running sum of the increments drawn up to that symbol.

use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ComplexSample, Normalizer, SystemParams};
use crate::rng::RngStream;

/// Channel of one device over one block.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceChannel {
    /// Block-start channel coefficient, known perfectly at the device.
    pub h: Complex64,
    /// Fading power `|h|^2`.
    pub beta: f64,
    /// Block-start phase `arg h`.
    pub phi0: f64,
    /// Phase increment entering at each symbol; `increments[0] == 0`.
    pub increments: Vec<f64>,
    /// Whether the device passed the truncation test and transmits.
    pub active: bool,
}

impl DeviceChannel {
    pub fn new(h: Complex64, increments: Vec<f64>, threshold: f64) -> Self {
        let beta = h.norm_sqr();
        Self {
            h,
            beta,
            phi0: h.arg(),
            increments,
            // A zero draw cannot be inverted, so it never transmits even at t = 0.
            active: beta >= threshold && beta > 0.0,
        }
    }

    pub fn symbols(&self) -> usize {
        self.increments.len()
    }

    /// Absolute phase at symbol `s`.
    pub fn phase_at(&self, s: usize) -> Result<f64> {
        Ok(self.phi0 + self.drift_at(s)?)
    }

    /// Phase accumulated since block start at symbol `s`.
    pub fn drift_at(&self, s: usize) -> Result<f64> {
        if s >= self.increments.len() {
            return Err(Error::IndexOutOfRange {
                index: s,
                len: self.increments.len(),
            });
        }
        Ok(self.increments[..=s].iter().sum())
    }

    /// Running drift for every symbol of the block.
    pub fn drift_trajectory(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.increments
            .iter()
            .map(|e| {
                acc += e;
                acc
            })
            .collect()
    }

    /// Channel coefficient seen by symbol `s`.
    pub fn gain_at(&self, s: usize) -> Result<Complex64> {
        Ok(Complex64::from_polar(self.beta.sqrt(), self.phase_at(s)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBlock {
    pub devices: Vec<DeviceChannel>,
}

impl ChannelBlock {
    /// Draws one block: `h_k ~ CN(0, sigma_h2)` and `D/2 - 1` increments
    /// `~ N(0, sigma_e2)` per device, in device order.
    pub fn sample(params: &SystemParams, rng: &mut RngStream) -> Result<Self> {
        let symbols = params.symbols();
        let devices = (0..params.num_devices)
            .map(|_| {
                let h = rng.complex_gaussian(params.sigma_h2)?;
                let mut increments = Vec::with_capacity(symbols);
                if symbols > 0 {
                    increments.push(0.0);
                }
                for _ in 1..symbols {
                    increments.push(rng.normal(params.sigma_e2));
                }
                Ok(DeviceChannel::new(h, increments, params.threshold))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { devices })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, k: usize) -> Result<&DeviceChannel> {
        self.devices.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.devices.len(),
        })
    }

    pub fn phase_at(&self, k: usize, s: usize) -> Result<f64> {
        self.device(k)?.phase_at(s)
    }

    pub fn active_flags(&self) -> Vec<bool> {
        self.devices.iter().map(|d| d.active).collect()
    }
}

/// Symbols one device puts on the air in a block.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub symbols: Vec<ComplexSample>,
    /// Symbols whose power exceeds the limit. They are sent unclipped.
    pub power_violations: usize,
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Truncated channel inversion of device `k`'s gradient.
pub fn encode(
    gradient: &[f64],
    block: &ChannelBlock,
    k: usize,
    params: &SystemParams,
) -> Result<Encoded> {
    check_len(params.model_dim, gradient.len())?;
    let dev = block.device(k)?;
    let symbols = params.symbols();
    if !dev.active {
        return Ok(Encoded {
            symbols: vec![Complex64::new(0.0, 0.0); symbols],
            power_violations: 0,
        });
    }
    let mut power_violations = 0;
    let symbols = gradient
        .chunks_exact(2)
        .map(|pair| {
            let x = Complex64::new(pair[0], pair[1]) / dev.h;
            if x.norm_sqr() > params.power_limit {
                power_violations += 1;
            }
            x
        })
        .collect();
    Ok(Encoded {
        symbols,
        power_violations,
    })
}

fn add_noise(y: &mut [ComplexSample], params: &SystemParams, noise: &mut RngStream) -> Result<()> {
    for v in y.iter_mut() {
        *v += noise.complex_gaussian(params.sigma_w2)?;
    }
    Ok(())
}

/// Base-station reception of the transmitted symbols:
/// `y_s = sum_k h_k(s) x_k(s) + w_s`, with `h_k(s)` the drifted channel.
pub fn receive(
    streams: &[Vec<ComplexSample>],
    block: &ChannelBlock,
    params: &SystemParams,
    noise: &mut RngStream,
) -> Result<Vec<ComplexSample>> {
    check_len(block.num_devices(), streams.len())?;
    let symbols = params.symbols();
    let mut y = vec![Complex64::new(0.0, 0.0); symbols];
    for (dev, x) in block.devices.iter().zip(streams) {
        check_len(symbols, x.len())?;
        check_len(symbols, dev.symbols())?;
        let amp = dev.beta.sqrt();
        let mut phase = dev.phi0;
        for ((acc, xs), e) in y.iter_mut().zip(x).zip(&dev.increments) {
            phase += e;
            *acc += Complex64::from_polar(amp, phase) * xs;
        }
    }
    add_noise(&mut y, params, noise)?;
    Ok(y)
}

/// Received block computed from the gradients directly.
///
/// With channel inversion `h_k(s) * (pair / h_k) = exp(j * drift_k(s)) * pair`
/// for active devices, which is what this evaluates. It draws the same noise
/// as [`receive`] and agrees with it up to rounding, but is exact when the
/// drift is zero.
pub fn superpose<G: AsRef<[f64]>>(
    gradients: &[G],
    block: &ChannelBlock,
    params: &SystemParams,
    noise: &mut RngStream,
) -> Result<Vec<ComplexSample>> {
    check_len(block.num_devices(), gradients.len())?;
    let symbols = params.symbols();
    let mut y = vec![Complex64::new(0.0, 0.0); symbols];
    for (dev, g) in block.devices.iter().zip(gradients) {
        let g = g.as_ref();
        check_len(params.model_dim, g.len())?;
        check_len(symbols, dev.symbols())?;
        if !dev.active {
            continue;
        }
        let mut drift = 0.0;
        for ((acc, pair), e) in y.iter_mut().zip(g.chunks_exact(2)).zip(&dev.increments) {
            drift += e;
            *acc += Complex64::from_polar(1.0, drift) * Complex64::new(pair[0], pair[1]);
        }
    }
    add_noise(&mut y, params, noise)?;
    Ok(y)
}

/// Estimator scale for coordinate `d`.
pub fn normalizer(d: usize, params: &SystemParams) -> f64 {
    let truncation = params.threshold / params.sigma_h2;
    match params.normalizer {
        Normalizer::Practical => truncation.exp(),
        Normalizer::Unbiased => {
            let even = (d - d % 2) as f64;
            (truncation + even * params.sigma_e2 / 4.0).exp()
        }
    }
}

/// `g_hat[d] = a_d / K * Re(y[d/2])` for even `d`, `Im(y[(d-1)/2])` for odd `d`.
pub fn estimate(received: &[ComplexSample], params: &SystemParams) -> Result<Vec<f64>> {
    check_len(params.symbols(), received.len())?;
    let k = params.num_devices as f64;
    let mut out = Vec::with_capacity(params.model_dim);
    for (s, y) in received.iter().enumerate() {
        out.push(normalizer(2 * s, params) * y.re / k);
        out.push(normalizer(2 * s + 1, params) * y.im / k);
    }
    Ok(out)
}

/// Everything that happened on the uplink in one round.
#[derive(Debug, Clone)]
pub struct RoundTranscript {
    /// Per device.
    pub transmitted: Vec<Vec<ComplexSample>>,
    pub received: Vec<ComplexSample>,
    pub estimate: Vec<f64>,
    pub active: Vec<bool>,
    pub power_violations: usize,
}

/// Sends every device's (already permuted) gradient through one block.
pub fn transmit<G: AsRef<[f64]>>(
    gradients: &[G],
    block: &ChannelBlock,
    params: &SystemParams,
    noise: &mut RngStream,
) -> Result<RoundTranscript> {
    let mut transmitted = Vec::with_capacity(gradients.len());
    let mut power_violations = 0;
    for (k, g) in gradients.iter().enumerate() {
        let enc = encode(g.as_ref(), block, k, params)?;
        power_violations += enc.power_violations;
        transmitted.push(enc.symbols);
    }
    let received = superpose(gradients, block, params, noise)?;
    let estimate = estimate(&received, params)?;
    Ok(RoundTranscript {
        transmitted,
        received,
        estimate,
        active: block.active_flags(),
        power_violations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseRow {
    pub realization: usize,
    pub s: usize,
    pub phase_radians: f64,
}

/// Drift trajectories of `realizations` independent blocks (one device each).
pub fn phase_trajectories(
    sigma_e2: f64,
    symbols: usize,
    realizations: usize,
    mut stream_for: impl FnMut(usize) -> RngStream,
) -> Vec<Vec<f64>> {
    (0..realizations)
        .map(|r| {
            let mut rng = stream_for(r);
            let mut acc = 0.0;
            (0..symbols)
                .map(|s| {
                    if s > 0 {
                        acc += rng.normal(sigma_e2);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// CSV with columns `realization,s,phase_radians`.
pub fn write_phase_csv<W: Write>(out: W, trajectories: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (realization, traj) in trajectories.iter().enumerate() {
        for (s, &phase_radians) in traj.iter().enumerate() {
            w.serialize(PhaseRow {
                realization,
                s,
                phase_radians,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<phase csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Role, StreamId};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn params(k: usize, d: usize) -> SystemParams {
        SystemParams {
            num_devices: k,
            model_dim: d,
            sigma_h2: 1.0,
            sigma_e2: 0.0,
            sigma_w2: 0.0,
            threshold: 0.0,
            power_limit: 1e9,
            normalizer: Normalizer::Practical,
            base_seed: 3,
        }
    }

    fn rng(round: u64) -> RngStream {
        RngStream::new(9, StreamId::new(0, Role::Aux, 0, round))
    }

    fn unit_block(k: usize, symbols: usize) -> ChannelBlock {
        ChannelBlock {
            devices: (0..k)
                .map(|_| DeviceChannel::new(Complex64::new(1.0, 0.0), vec![0.0; symbols], 0.0))
                .collect(),
        }
    }

    #[test]
    fn zero_phase_variance_gives_constant_phase() {
        let p = params(3, 16);
        let block = ChannelBlock::sample(&p, &mut rng(0)).unwrap();
        for k in 0..3 {
            let dev = &block.devices[k];
            assert_eq!(dev.increments.len(), 8);
            assert!(dev.increments.iter().all(|&e| e == 0.0));
            for s in 0..8 {
                assert_eq!(block.phase_at(k, s).unwrap(), dev.phi0);
            }
        }
    }

    #[test]
    fn first_increment_is_zero() {
        let p = SystemParams {
            sigma_e2: 0.5,
            ..params(4, 10)
        };
        let block = ChannelBlock::sample(&p, &mut rng(1)).unwrap();
        for dev in &block.devices {
            assert_eq!(dev.increments[0], 0.0);
            assert_eq!(dev.phase_at(0).unwrap(), dev.phi0);
            assert!(dev.increments[1..].iter().all(|&e| e != 0.0));
        }
    }

    #[test]
    fn zero_threshold_activates_everyone() {
        let p = params(50, 4);
        let block = ChannelBlock::sample(&p, &mut rng(2)).unwrap();
        assert!(block.active_flags().iter().all(|&a| a));
    }

    #[test]
    fn indicator_follows_threshold() {
        let p = SystemParams {
            threshold: 1.0,
            ..params(200, 4)
        };
        let block = ChannelBlock::sample(&p, &mut rng(3)).unwrap();
        for dev in &block.devices {
            assert_eq!(dev.active, dev.beta >= 1.0);
        }
        assert!(block.devices.iter().any(|d| !d.active));
        let zero = DeviceChannel::new(Complex64::new(0.0, 0.0), vec![0.0], 0.0);
        assert!(!zero.active);
    }

    #[test]
    fn high_noise_drift_spans_radians() {
        let p = SystemParams {
            sigma_e2: 0.02,
            ..params(50, 1758)
        };
        let block = ChannelBlock::sample(&p, &mut rng(4)).unwrap();
        let ends: Vec<f64> = block
            .devices
            .iter()
            .map(|d| d.drift_at(878).unwrap().abs())
            .collect();
        let rms = (ends.iter().map(|e| e * e).sum::<f64>() / ends.len() as f64).sqrt();
        // sqrt(878 * 0.02) ~ 4.2 rad
        assert!(rms > 2.0, "rms drift {rms}");
    }

    #[test]
    fn phase_at_sums_increments() {
        let dev = DeviceChannel {
            h: Complex64::from_polar(1.0, 1.0),
            beta: 1.0,
            phi0: 1.0,
            increments: vec![0.0, 0.1, -0.05],
            active: true,
        };
        assert_eq!(dev.phase_at(0).unwrap(), 1.0);
        assert_relative_eq!(dev.phase_at(2).unwrap(), 1.05, epsilon = 1e-15);
        assert!(matches!(
            dev.phase_at(3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
        assert_eq!(dev.drift_trajectory().len(), 3);
    }

    #[test]
    fn encode_inactive_is_silent() {
        let p = params(1, 4);
        let block = ChannelBlock {
            devices: vec![DeviceChannel::new(
                Complex64::new(0.01, 0.0),
                vec![0.0; 2],
                0.5,
            )],
        };
        let enc = encode(&[1.0, 2.0, 3.0, 4.0], &block, 0, &p).unwrap();
        assert_eq!(enc.symbols, vec![Complex64::new(0.0, 0.0); 2]);
    }

    #[test]
    fn encode_unit_and_imaginary_channel() {
        let p = params(1, 2);
        let enc = encode(&[0.3, -0.4], &unit_block(1, 1), 0, &p).unwrap();
        assert_eq!(enc.symbols, vec![Complex64::new(0.3, -0.4)]);

        let block = ChannelBlock {
            devices: vec![DeviceChannel::new(Complex64::new(0.0, 1.0), vec![0.0], 0.0)],
        };
        let enc = encode(&[1.0, 0.0], &block, 0, &p).unwrap();
        assert_relative_eq!(enc.symbols[0].re, 0.0, epsilon = 1e-15);
        assert_relative_eq!(enc.symbols[0].im, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn encode_counts_power_violations() {
        let p = SystemParams {
            power_limit: 1.0,
            ..params(1, 4)
        };
        let enc = encode(&[2.0, 0.0, 0.5, 0.5], &unit_block(1, 2), 0, &p).unwrap();
        assert_eq!(enc.power_violations, 1);
        assert_eq!(enc.symbols[0], Complex64::new(2.0, 0.0));
        assert!(encode(&[1.0; 3], &unit_block(1, 2), 0, &p).is_err());
    }

    #[test]
    fn noise_free_reception_sums_pairs() {
        let p = params(3, 6);
        let block = ChannelBlock::sample(&p, &mut rng(5)).unwrap();
        let grads = [
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![-1.0, 0.5, 0.25, 0.0, 2.0, -3.0],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        ];
        let x: Vec<_> = (0..3)
            .map(|k| encode(&grads[k], &block, k, &p).unwrap().symbols)
            .collect();
        let y = receive(&x, &block, &p, &mut rng(6)).unwrap();
        for s in 0..3 {
            let re: f64 = grads.iter().map(|g| g[2 * s]).sum();
            let im: f64 = grads.iter().map(|g| g[2 * s + 1]).sum();
            assert_relative_eq!(y[s].re, re, epsilon = 1e-12);
            assert_relative_eq!(y[s].im, im, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_by_pi_negates() {
        let p = params(1, 6);
        let block = ChannelBlock {
            devices: vec![DeviceChannel::new(
                Complex64::new(0.6, -0.8),
                vec![0.0, PI / 2.0, PI / 2.0],
                0.0,
            )],
        };
        let g = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let x = encode(&g, &block, 0, &p).unwrap().symbols;
        let y = receive(&[x], &block, &p, &mut rng(7)).unwrap();
        assert_relative_eq!(y[2].re, -1.0, epsilon = 1e-12);
        assert!(y[2].im.abs() < 1e-12);
    }

    #[test]
    fn silent_devices_leave_only_noise() {
        let p = SystemParams {
            sigma_w2: 0.5,
            ..params(2, 4)
        };
        let block = unit_block(2, 2);
        let zeros = vec![vec![Complex64::new(0.0, 0.0); 2]; 2];
        let mut power = 0.0;
        let n = 20_000;
        for r in 0..n {
            let y = receive(&zeros, &block, &p, &mut rng(100 + r)).unwrap();
            power += y.iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        let per_symbol = power / (2 * n) as f64;
        assert!((per_symbol - 0.5).abs() < 0.02, "{per_symbol}");
    }

    #[test]
    fn receive_rejects_length_mismatch() {
        let p = params(2, 4);
        let block = unit_block(2, 2);
        let short = vec![vec![Complex64::new(0.0, 0.0); 1]; 2];
        assert!(receive(&short, &block, &p, &mut rng(8)).is_err());
        let one = vec![vec![Complex64::new(0.0, 0.0); 2]; 1];
        assert!(receive(&one, &block, &p, &mut rng(8)).is_err());
    }

    #[test]
    fn physical_and_effective_routes_agree() {
        let p = SystemParams {
            sigma_e2: 0.3,
            sigma_w2: 0.1,
            threshold: 0.2,
            ..params(5, 20)
        };
        let block = ChannelBlock::sample(&p, &mut rng(9)).unwrap();
        let mut g_rng = rng(10);
        let grads: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..20).map(|_| g_rng.standard_normal()).collect())
            .collect();
        let x: Vec<_> = (0..5)
            .map(|k| encode(&grads[k], &block, k, &p).unwrap().symbols)
            .collect();
        let physical = receive(&x, &block, &p, &mut rng(11)).unwrap();
        let effective = superpose(&grads, &block, &p, &mut rng(11)).unwrap();
        for (a, b) in physical.iter().zip(&effective) {
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
        // Rotation direction: each active pair turns by +drift.
        let single = SystemParams {
            sigma_w2: 0.0,
            ..p.clone()
        };
        let dev = block.devices.iter().position(|d| d.active).unwrap();
        let mut only = vec![vec![0.0; 20]; 5];
        only[dev] = grads[dev].clone();
        let y = superpose(&only, &block, &single, &mut rng(12)).unwrap();
        for s in 0..10 {
            let expect = Complex64::from_polar(1.0, block.devices[dev].drift_at(s).unwrap())
                * Complex64::new(grads[dev][2 * s], grads[dev][2 * s + 1]);
            assert!((y[s] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn truncated_devices_contribute_nothing() {
        let p = SystemParams {
            threshold: 1.5,
            ..params(30, 4)
        };
        let block = ChannelBlock::sample(&p, &mut rng(13)).unwrap();
        let grads: Vec<Vec<f64>> = block
            .devices
            .iter()
            .map(|d| if d.active { vec![0.0; 4] } else { vec![1.0; 4] })
            .collect();
        let y = superpose(&grads, &block, &p, &mut rng(14)).unwrap();
        assert!(y.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn normalizer_values() {
        let mut p = params(1, 20);
        assert_eq!(normalizer(7, &p), 1.0);
        p.normalizer = Normalizer::Unbiased;
        assert_eq!(normalizer(7, &p), 1.0);
        p.threshold = 0.01;
        p.sigma_e2 = 0.02;
        assert_relative_eq!(normalizer(10, &p), 1.061_836_546_545_359_6, epsilon = 1e-12);
        assert_relative_eq!(normalizer(11, &p), normalizer(10, &p), epsilon = 0.0);
        p.normalizer = Normalizer::Practical;
        for d in [0, 5, 19] {
            assert_relative_eq!(normalizer(d, &p), 1.010_050_167_084_168, epsilon = 1e-12);
        }
    }

    #[test]
    fn estimate_maps_re_im() {
        let p = params(1, 2);
        assert_eq!(
            estimate(&[Complex64::new(3.0, 4.0)], &p).unwrap(),
            vec![3.0, 4.0]
        );
        let p = params(2, 2);
        assert_eq!(
            estimate(&[Complex64::new(2.0, -6.0)], &p).unwrap(),
            vec![1.0, -3.0]
        );
        assert!(estimate(&[], &p).is_err());
    }

    #[test]
    fn estimate_is_linear() {
        let p = SystemParams {
            threshold: 0.3,
            sigma_e2: 0.1,
            normalizer: Normalizer::Unbiased,
            ..params(3, 6)
        };
        let a = [
            Complex64::new(1.0, -2.0),
            Complex64::new(0.5, 0.25),
            Complex64::new(-3.0, 1.0),
        ];
        let b = [
            Complex64::new(0.1, 0.2),
            Complex64::new(-1.0, 4.0),
            Complex64::new(2.0, 2.0),
        ];
        let sum: Vec<_> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + y).collect();
        let ea = estimate(&a, &p).unwrap();
        let eb = estimate(&b, &p).unwrap();
        let es = estimate(&sum, &p).unwrap();
        for d in 0..6 {
            assert_relative_eq!(es[d], 2.0 * ea[d] + eb[d], epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_free_estimate_is_average() {
        let p = params(4, 8);
        let block = ChannelBlock::sample(&p, &mut rng(15)).unwrap();
        let mut g_rng = rng(16);
        let grads: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| g_rng.standard_normal()).collect())
            .collect();
        let t = transmit(&grads, &block, &p, &mut rng(17)).unwrap();
        assert_eq!(t.received.len(), 4);
        assert_eq!(t.estimate.len(), 8);
        assert_eq!(t.active.len(), 4);
        for d in 0..8 {
            let mut acc = 0.0;
            for g in &grads {
                acc += g[d];
            }
            assert_eq!(t.estimate[d], acc / 4.0);
        }
    }

    #[test]
    fn wiener_variance_grows_linearly() {
        let sigma_e2 = 0.05;
        let blocks = 100_000;
        let trajectories = phase_trajectories(sigma_e2, 12, blocks, |r| rng(1_000 + r as u64));
        for s in [1usize, 5, 11] {
            let vals: Vec<f64> = trajectories.iter().map(|t| t[s]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let expect = s as f64 * sigma_e2;
            // Var of the sample variance of a Gaussian is 2 sigma^4 / (n - 1).
            let se = expect * (2.0 / (n - 1.0)).sqrt();
            assert!((var - expect).abs() <= 3.0 * se, "s={s}: {var} vs {expect}");
        }
    }

    #[test]
    fn phase_csv_layout() {
        let traj = phase_trajectories(0.0, 3, 2, |r| rng(r as u64));
        let mut buf = Vec::new();
        write_phase_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "realization,s,phase_radians");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[6], "1,2,0.0");
    }
}
