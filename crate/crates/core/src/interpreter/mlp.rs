//! Three-layer per-pixel MLP: two rectified hidden layers and a linear head.
//!
//! Parameters live in one flat `f64` buffer laid out layer by layer as
//! `[W (in x out, row-major), b (out)]`. Training and gradient checks use the
//! 64-bit path; batched inference uses an `f32` copy of the weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InterpreterError;
use crate::feature_volume::PixelFeature;
use crate::linalg::{dgemm, sgemm};
use crate::uncertainty::ClassDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Softmax over label logits.
    Softmax,
    /// One unbounded heat value per keypoint.
    Heat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    widths: [usize; 4],
    head: Head,
    params: Vec<f64>,
}

/// Output of a single-pixel forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum MlpOutput {
    Distribution(ClassDistribution),
    Heat(Vec<f64>),
}

/// Per-row targets for a training batch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Labels(Vec<usize>),
    /// Row-major `rows x outputs` heat targets.
    Heat(Vec<f64>),
}

pub fn param_count(widths: [usize; 4]) -> usize {
    (0..3).map(|l| widths[l] * widths[l + 1] + widths[l + 1]).sum()
}

/// Offsets of `(W, b)` for layer `l`.
fn layer_offsets(widths: [usize; 4], l: usize) -> (usize, usize, usize) {
    let start: usize = (0..l).map(|i| widths[i] * widths[i + 1] + widths[i + 1]).sum();
    let w_len = widths[l] * widths[l + 1];
    (start, start + w_len, start + w_len + widths[l + 1])
}

impl MlpClassifier {
    pub fn zeros(widths: [usize; 4], head: Head) -> Self {
        Self {
            widths,
            head,
            params: vec![0.0; param_count(widths)],
        }
    }

    /// He-uniform weights on the rectified layers, Glorot-uniform on the head,
    /// zero biases.
    pub fn init(widths: [usize; 4], head: Head, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(widths, head);
        for l in 0..3 {
            let (w0, w1, _) = layer_offsets(widths, l);
            let (fan_in, fan_out) = (widths[l] as f64, widths[l + 1] as f64);
            let limit = if l < 2 {
                (6.0 / fan_in).sqrt()
            } else {
                (6.0 / (fan_in + fan_out)).sqrt()
            };
            for w in &mut mlp.params[w0..w1] {
                *w = rng.random_range(-limit..limit);
            }
        }
        mlp
    }

    pub fn from_params(widths: [usize; 4], head: Head, params: Vec<f64>) -> Result<Self, InterpreterError> {
        if widths.contains(&0) {
            return Err(InterpreterError::Config(format!("zero layer width in {widths:?}")));
        }
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(InterpreterError::Config(format!(
                "{} parameters for widths {widths:?}, expected {expected}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(InterpreterError::NonFinite);
        }
        Ok(Self { widths, head, params })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }
    pub fn head(&self) -> Head {
        self.head
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }
    pub fn output_dim(&self) -> usize {
        self.widths[3]
    }

    fn weights(&self, l: usize) -> (&[f64], &[f64]) {
        let (w0, b0, end) = layer_offsets(self.widths, l);
        (&self.params[w0..b0], &self.params[b0..end])
    }

    /// Forward pass of one pixel: softmax distribution or raw heat values.
    pub fn forward(&self, feature: &PixelFeature) -> Result<MlpOutput, InterpreterError> {
        if feature.values.len() != self.input_dim() {
            return Err(InterpreterError::Dimension {
                expected: self.input_dim(),
                got: feature.values.len(),
            });
        }
        if feature.values.iter().any(|v| !v.is_finite()) {
            return Err(InterpreterError::NonFinite);
        }
        let x: Vec<f64> = feature.values.iter().map(|&v| v as f64).collect();
        let out = self.forward_batch(&x, 1).logits;
        Ok(match self.head {
            Head::Softmax => MlpOutput::Distribution(
                ClassDistribution::new(softmax(&out)).expect("softmax yields a distribution"),
            ),
            Head::Heat => MlpOutput::Heat(out),
        })
    }

    fn affine(&self, l: usize, input: &[f64], rows: usize) -> Vec<f64> {
        let (weights, bias) = self.weights(l);
        let mut z = Vec::with_capacity(rows * bias.len());
        for _ in 0..rows {
            z.extend_from_slice(bias);
        }
        dgemm(rows, self.widths[l], self.widths[l + 1], input, false, weights, false, 1.0, &mut z);
        z
    }

    fn forward_batch(&self, x: &[f64], rows: usize) -> Activations {
        let relu = |z: &[f64]| z.iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
        let z1 = self.affine(0, x, rows);
        let a1 = relu(&z1);
        let z2 = self.affine(1, &a1, rows);
        let a2 = relu(&z2);
        let logits = self.affine(2, &a2, rows);
        Activations {
            hidden: [(z1, a1), (z2, a2)],
            logits,
        }
    }

    /// Mean loss over the batch and its gradient with respect to every
    /// parameter (same layout as [`Self::params`]).
    ///
    /// Softmax heads use cross-entropy against label indices; heat heads use
    /// the mean squared error over rows and outputs.
    pub fn loss_and_grad(&self, x: &[f64], rows: usize, targets: &BatchTargets) -> (f64, Vec<f64>) {
        let w = self.widths;
        assert_eq!(x.len(), rows * w[0]);
        let act = self.forward_batch(x, rows);
        let out = w[3];
        let mut d_out = vec![0.0; rows * out];
        let loss = match (self.head, targets) {
            (Head::Softmax, BatchTargets::Labels(labels)) => {
                assert_eq!(labels.len(), rows);
                let mut loss = 0.0;
                for (r, &label) in labels.iter().enumerate() {
                    let logits = &act.logits[r * out..(r + 1) * out];
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += lse - logits[label];
                    for (c, d) in d_out[r * out..(r + 1) * out].iter_mut().enumerate() {
                        let p = (logits[c] - lse).exp();
                        *d = (p - if c == label { 1.0 } else { 0.0 }) / rows as f64;
                    }
                }
                loss / rows as f64
            }
            (Head::Heat, BatchTargets::Heat(t)) => {
                assert_eq!(t.len(), rows * out);
                let n = (rows * out) as f64;
                let mut loss = 0.0;
                for ((d, &y), &target) in d_out.iter_mut().zip(&act.logits).zip(t) {
                    let e = y - target;
                    loss += e * e;
                    *d = 2.0 * e / n;
                }
                loss / n
            }
            (head, _) => panic!("targets do not match {head:?} head"),
        };

        let mut grad = vec![0.0; self.params.len()];
        let mut delta = d_out;
        for l in (0..3).rev() {
            let (w0, b0, end) = layer_offsets(w, l);
            let (fan_in, fan_out) = (w[l], w[l + 1]);
            let input: &[f64] = if l == 0 { x } else { &act.hidden[l - 1].1 };
            dgemm(fan_in, rows, fan_out, input, true, &delta, false, 0.0, &mut grad[w0..b0]);
            let gb = &mut grad[b0..end];
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l > 0 {
                let (weights, _) = self.weights(l);
                let mut prev = vec![0.0; rows * fan_in];
                dgemm(rows, fan_out, fan_in, &delta, false, weights, true, 0.0, &mut prev);
                let pre = &act.hidden[l - 1].0;
                for (p, z) in prev.iter_mut().zip(pre) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        (loss, grad)
    }

    /// Single-precision copy for batched inference.
    pub fn to_inference(&self) -> InferenceMlp {
        InferenceMlp {
            widths: self.widths,
            head: self.head,
            params: self.params.iter().map(|&p| p as f32).collect(),
        }
    }
}

struct Activations {
    /// `(pre-activation, post-activation)` of both hidden layers.
    hidden: [(Vec<f64>, Vec<f64>); 2],
    logits: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// `f32` weights for throughput; scratch buffers are reused across calls.
#[derive(Clone, Debug)]
pub struct InferenceMlp {
    widths: [usize; 4],
    head: Head,
    params: Vec<f32>,
}

#[derive(Default)]
pub struct InferenceScratch {
    h1: Vec<f32>,
    h2: Vec<f32>,
    out: Vec<f32>,
}

impl InferenceMlp {
    pub fn head(&self) -> Head {
        self.head
    }

    /// Raw head outputs for `rows` feature vectors (`rows x D`, row-major).
    /// The returned slice borrows `scratch`.
    pub fn forward_rows<'s>(&self, x: &[f32], rows: usize, scratch: &'s mut InferenceScratch) -> &'s [f32] {
        let w = self.widths;
        let layer = |l: usize| {
            let (w0, b0, end) = layer_offsets(w, l);
            (&self.params[w0..b0], &self.params[b0..end])
        };
        let fill_bias = |buf: &mut Vec<f32>, bias: &[f32]| {
            buf.clear();
            for _ in 0..rows {
                buf.extend_from_slice(bias);
            }
        };
        let (w1, b1) = layer(0);
        fill_bias(&mut scratch.h1, b1);
        sgemm(rows, w[0], w[1], x, w1, 1.0, &mut scratch.h1);
        scratch.h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let (w2, b2) = layer(1);
        fill_bias(&mut scratch.h2, b2);
        sgemm(rows, w[1], w[2], &scratch.h1, w2, 1.0, &mut scratch.h2);
        scratch.h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let (w3, b3) = layer(2);
        fill_bias(&mut scratch.out, b3);
        sgemm(rows, w[2], w[3], &scratch.h2, w3, 1.0, &mut scratch.out);
        &scratch.out
    }
}
