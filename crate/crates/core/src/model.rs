//! The small MNIST CNN with hand-written forward and backward passes.
//!
//! ```text
//! 1x28x28 -conv5-> 6x24x24 -relu-> -pool2-> 6x12x12 -conv5-> 2x8x8 -relu-> -pool2-> 2x4x4
//!         -flatten-> 32 -fc-> 30 -relu-> -fc-> 10 (softmax / cross-entropy)
//! ```
//!
//! The flat parameter vector (and therefore every gradient) is ordered
//! conv1 weights, conv1 biases, conv2 weights, conv2 biases, fc1 weights,
//! fc1 biases, fc2 weights, fc2 biases. Weights are row-major
//! `[out][in][ky][kx]` for convolutions and `[out][in]` for linear layers.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

const K: usize = 5;
const C1: usize = 6;
const H1: usize = IMAGE_SIDE - K + 1; // 24
const P1: usize = H1 / 2; // 12
const C2: usize = 2;
const H2: usize = P1 - K + 1; // 8
const P2: usize = H2 / 2; // 4
const FLAT: usize = C2 * P2 * P2; // 32
const HIDDEN: usize = 30;

const CONV1_W: usize = C1 * K * K;
const CONV2_W: usize = C2 * C1 * K * K;
const FC1_W: usize = HIDDEN * FLAT;
const FC2_W: usize = NUM_CLASSES * HIDDEN;

/// Number of trainable parameters.
pub const PARAM_COUNT: usize = CONV1_W + C1 + CONV2_W + C2 + FC1_W + HIDDEN + FC2_W + NUM_CLASSES;

/// Length of the transmitted gradient: the parameter count rounded up to even.
pub const MODEL_DIM: usize = PARAM_COUNT + PARAM_COUNT % 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros() -> Self {
        Self {
            conv1_w: vec![0.0; CONV1_W],
            conv1_b: vec![0.0; C1],
            conv2_w: vec![0.0; CONV2_W],
            conv2_b: vec![0.0; C2],
            fc1_w: vec![0.0; FC1_W],
            fc1_b: vec![0.0; HIDDEN],
            fc2_w: vec![0.0; FC2_W],
            fc2_b: vec![0.0; NUM_CLASSES],
        }
    }

    /// Weights uniform in `+-sqrt(1 / fan_in)`, biases zero.
    pub fn init(rng: &mut RngStream) -> Self {
        let mut p = Self::zeros();
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in w {
                *v = rng.random_range(-bound..=bound);
            }
        };
        fill(&mut p.conv1_w, K * K);
        fill(&mut p.conv2_w, C1 * K * K);
        fill(&mut p.fc1_w, FLAT);
        fill(&mut p.fc2_w, HIDDEN);
        p
    }

    fn parts(&self) -> [&Vec<f64>; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    /// Canonical flat vector of length [`MODEL_DIM`] (zero-padded if odd).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(MODEL_DIM);
        for p in self.parts() {
            out.extend_from_slice(p);
        }
        out.resize(MODEL_DIM, 0.0);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != MODEL_DIM {
            return Err(Error::DimensionMismatch {
                expected: MODEL_DIM,
                actual: flat.len(),
            });
        }
        let mut p = Self::zeros();
        let mut offset = 0;
        for part in p.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Writes a flat vector as a little-endian `u64` length followed by `f64`s.
pub fn write_snapshot<W: Write>(mut out: W, flat: &[f64]) -> std::io::Result<()> {
    out.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_snapshot<R: Read>(mut input: R) -> std::io::Result<Vec<f64>> {
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let len = u64::from_le_bytes(word) as usize;
    let mut out = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        input.read_exact(&mut word)?;
        out.push(f64::from_le_bytes(word));
    }
    Ok(out)
}

/// Valid cross-correlation, stride 1. `input` is `[in_c][side][side]`.
fn conv_forward(
    input: &[f64],
    in_c: usize,
    side: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
) -> Vec<f64> {
    let out_side = side - K + 1;
    let mut out = vec![0.0; out_c * out_side * out_side];
    for o in 0..out_c {
        let plane = &mut out[o * out_side * out_side..(o + 1) * out_side * out_side];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..in_c {
            let src = &input[c * side * side..(c + 1) * side * side];
            for ky in 0..K {
                for kx in 0..K {
                    let w = weights[((o * in_c + c) * K + ky) * K + kx];
                    for y in 0..out_side {
                        let row = &src[(y + ky) * side + kx..(y + ky) * side + kx + out_side];
                        let dst = &mut plane[y * out_side..(y + 1) * out_side];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient if asked.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_c: usize,
    side: usize,
    weights: &[f64],
    out_c: usize,
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let out_side = side - K + 1;
    let mut grad_in = want_input_grad.then(|| vec![0.0; in_c * side * side]);
    for o in 0..out_c {
        let go = &grad_out[o * out_side * out_side..(o + 1) * out_side * out_side];
        grad_b[o] += go.iter().sum::<f64>();
        for c in 0..in_c {
            let src = &input[c * side * side..(c + 1) * side * side];
            for ky in 0..K {
                for kx in 0..K {
                    let widx = ((o * in_c + c) * K + ky) * K + kx;
                    let mut acc = 0.0;
                    for y in 0..out_side {
                        let row = &src[(y + ky) * side + kx..(y + ky) * side + kx + out_side];
                        let g = &go[y * out_side..(y + 1) * out_side];
                        acc += g.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[widx] += acc;
                    if let Some(gi) = grad_in.as_mut() {
                        let w = weights[widx];
                        let plane = &mut gi[c * side * side..(c + 1) * side * side];
                        for y in 0..out_side {
                            let dst =
                                &mut plane[(y + ky) * side + kx..(y + ky) * side + kx + out_side];
                            let g = &go[y * out_side..(y + 1) * out_side];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 2x2 max-pool, stride 2. Returns the pooled map and the flat input index of
/// each maximum (first in scan order on ties).
fn pool_forward(input: &[f64], channels: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        for i in 0..half {
            for j in 0..half {
                let mut best = c * side * side + 2 * i * side + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * side * side + (2 * i + di) * side + 2 * j + dj;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

#[derive(Debug, Clone)]
struct SampleCache {
    input: Vec<f64>,
    /// After ReLU.
    conv1: Vec<f64>,
    pool1: Vec<f64>,
    pool1_arg: Vec<usize>,
    conv2: Vec<f64>,
    pool2_arg: Vec<usize>,
    flat: Vec<f64>,
    /// After ReLU.
    hidden: Vec<f64>,
    logits: [f64; NUM_CLASSES],
}

fn forward_one(p: &ModelParams, image: &[f64]) -> SampleCache {
    let mut conv1 = conv_forward(image, 1, IMAGE_SIDE, &p.conv1_w, &p.conv1_b, C1);
    relu_in_place(&mut conv1);
    let (pool1, pool1_arg) = pool_forward(&conv1, C1, H1);
    let mut conv2 = conv_forward(&pool1, C1, P1, &p.conv2_w, &p.conv2_b, C2);
    relu_in_place(&mut conv2);
    let (flat, pool2_arg) = pool_forward(&conv2, C2, H2);
    let mut hidden: Vec<f64> = (0..HIDDEN)
        .map(|j| {
            p.fc1_b[j]
                + p.fc1_w[j * FLAT..(j + 1) * FLAT]
                    .iter()
                    .zip(&flat)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect();
    relu_in_place(&mut hidden);
    let mut logits = [0.0; NUM_CLASSES];
    for (c, l) in logits.iter_mut().enumerate() {
        *l = p.fc2_b[c]
            + p.fc2_w[c * HIDDEN..(c + 1) * HIDDEN]
                .iter()
                .zip(&hidden)
                .map(|(w, x)| w * x)
                .sum::<f64>();
    }
    SampleCache {
        input: image.to_vec(),
        conv1,
        pool1,
        pool1_arg,
        conv2,
        pool2_arg,
        flat,
        hidden,
        logits,
    }
}

fn log_softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let mut out = [0.0; NUM_CLASSES];
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
    out
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let mut p = log_softmax(logits);
    p.iter_mut().for_each(|v| *v = v.exp());
    p
}

fn argmax(logits: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn check_image(image: &[f64]) -> Result<()> {
    if image.len() != IMAGE_PIXELS {
        return Err(Error::DimensionMismatch {
            expected: IMAGE_PIXELS,
            actual: image.len(),
        });
    }
    Ok(())
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward<'a> {
    params: &'a ModelParams,
    cache: Vec<SampleCache>,
}

pub fn forward<'a, I: AsRef<[f64]>>(params: &'a ModelParams, batch: &[I]) -> Result<Forward<'a>> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let cache = batch
        .iter()
        .map(|img| {
            let img = img.as_ref();
            check_image(img)?;
            Ok(forward_one(params, img))
        })
        .collect::<Result<_>>()?;
    Ok(Forward { params, cache })
}

impl Forward<'_> {
    pub fn logits(&self) -> Vec<[f64; NUM_CLASSES]> {
        self.cache.iter().map(|c| c.logits).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.cache.iter().map(|c| argmax(&c.logits)).collect()
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, labels: &[u8]) -> Result<f64> {
        self.check_labels(labels)?;
        let total: f64 = self
            .cache
            .iter()
            .zip(labels)
            .map(|(c, &y)| -log_softmax(&c.logits)[y as usize])
            .sum();
        Ok(total / self.cache.len() as f64)
    }

    fn check_labels(&self, labels: &[u8]) -> Result<()> {
        if labels.len() != self.cache.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cache.len(),
                actual: labels.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: y as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(())
    }

    /// Mean loss and its gradient with respect to the flat parameters.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
        let loss = self.loss(labels)?;
        let p = self.params;
        let mut g = ModelParams::zeros();
        let scale = 1.0 / self.cache.len() as f64;
        for (c, &y) in self.cache.iter().zip(labels) {
            let mut d_logits = softmax(&c.logits);
            d_logits[y as usize] -= 1.0;
            d_logits.iter_mut().for_each(|v| *v *= scale);

            // fc2
            let mut d_hidden = vec![0.0; HIDDEN];
            for (k, dl) in d_logits.iter().enumerate() {
                g.fc2_b[k] += dl;
                for j in 0..HIDDEN {
                    g.fc2_w[k * HIDDEN + j] += dl * c.hidden[j];
                    d_hidden[j] += dl * p.fc2_w[k * HIDDEN + j];
                }
            }
            // relu + fc1
            let mut d_flat = vec![0.0; FLAT];
            for j in 0..HIDDEN {
                if c.hidden[j] <= 0.0 {
                    continue;
                }
                let dh = d_hidden[j];
                g.fc1_b[j] += dh;
                for i in 0..FLAT {
                    g.fc1_w[j * FLAT + i] += dh * c.flat[i];
                    d_flat[i] += dh * p.fc1_w[j * FLAT + i];
                }
            }
            // pool2 + relu
            let mut d_conv2 = vec![0.0; C2 * H2 * H2];
            for (i, &src) in c.pool2_arg.iter().enumerate() {
                if c.conv2[src] > 0.0 {
                    d_conv2[src] += d_flat[i];
                }
            }
            let d_pool1 = conv_backward(
                &c.pool1,
                C1,
                P1,
                &p.conv2_w,
                C2,
                &d_conv2,
                &mut g.conv2_w,
                &mut g.conv2_b,
                true,
            )
            .expect("input gradient requested");
            // pool1 + relu
            let mut d_conv1 = vec![0.0; C1 * H1 * H1];
            for (i, &src) in c.pool1_arg.iter().enumerate() {
                if c.conv1[src] > 0.0 {
                    d_conv1[src] += d_pool1[i];
                }
            }
            conv_backward(
                &c.input,
                1,
                IMAGE_SIDE,
                &p.conv1_w,
                C1,
                &d_conv1,
                &mut g.conv1_w,
                &mut g.conv1_b,
                false,
            );
        }
        Ok((loss, g.flatten()))
    }
}

/// Loss and gradient of one batch in a single call.
pub fn loss_and_gradient<I: AsRef<[f64]>>(
    params: &ModelParams,
    batch: &[I],
    labels: &[u8],
) -> Result<(f64, Vec<f64>)> {
    forward(params, batch)?.backward(labels)
}

/// Most likely class of one image.
pub fn predict(params: &ModelParams, image: &[f64]) -> Result<usize> {
    check_image(image)?;
    Ok(argmax(&forward_one(params, image).logits))
}

/// Fraction of argmax-correct predictions.
pub fn evaluate<I: AsRef<[f64]> + Sync>(
    params: &ModelParams,
    images: &[I],
    labels: &[u8],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidParam("empty evaluation set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: images.len(),
            actual: labels.len(),
        });
    }
    let correct: usize = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &y)| {
            let img = img.as_ref();
            check_image(img)?;
            Ok(usize::from(
                argmax(&forward_one(params, img).logits) == y as usize,
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / images.len() as f64)
}
