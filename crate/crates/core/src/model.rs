//! Classifiers behind a flat parameter vector.
//!
//! Softmax regression stores `W (I x d)` then `b (I)`. The optional MLP
//! stores `W1 (h x d)`, `b1 (h)`, `W2 (I x h)`, `b2 (I)` with a tanh hidden
//! layer.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Softmax,
    Mlp {
        hidden: usize,
    },
}

/// Architecture plus input/output sizes; interprets a flat parameter slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub arch: Architecture,
    pub dim: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn param_len(&self) -> usize {
        ModelParams::param_len(self.arch, self.dim, self.classes)
    }

    /// Class logits for one sample.
    pub fn logits(&self, params: &[f64], x: &[f32], out: &mut [f64]) {
        let (d, c) = (self.dim, self.classes);
        match self.arch {
            Architecture::Softmax => {
                let (w, b) = params.split_at(c * d);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            Architecture::Mlp { hidden } => {
                let mut h = vec![0.0; hidden];
                self.hidden_layer(params, x, &mut h);
                let (_, rest) = params.split_at(hidden * d + hidden);
                let (w2, b2) = rest.split_at(c * hidden);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = b2[k]
                        + w2[k * hidden..(k + 1) * hidden]
                            .iter()
                            .zip(&h)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
            }
        }
    }

    fn hidden_layer(&self, params: &[f64], x: &[f32], h: &mut [f64]) {
        let d = self.dim;
        let hidden = h.len();
        let (w1, rest) = params.split_at(hidden * d);
        let b1 = &rest[..hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            *hj = libm::tanh(b1[j] + dot(&w1[j * d..(j + 1) * d], x));
        }
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, params: &[f64], x: &[f32]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(params, x, &mut z);
        argmax_lowest(&z)
    }

    /// Cross-entropy of one sample plus `mu/2 ||theta||^2`; writes the
    /// gradient into `grad` (overwritten). Also returns the predicted class.
    pub fn sample_loss_grad(
        &self,
        params: &[f64],
        x: &[f32],
        y: usize,
        mu: f64,
        grad: &mut [f64],
    ) -> (f64, usize) {
        let (d, c) = (self.dim, self.classes);
        let mut z = vec![0.0; c];
        let pred;
        let ce = match self.arch {
            Architecture::Softmax => {
                self.logits(params, x, &mut z);
                pred = argmax_lowest(&z);
                let ce = softmax_in_place(&mut z, y);
                // z now holds softmax - onehot
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    let r = z[k];
                    for (g, &xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g = r * xi as f64;
                    }
                    gb[k] = r;
                }
                ce
            }
            Architecture::Mlp { hidden } => {
                let mut h = vec![0.0; hidden];
                self.hidden_layer(params, x, &mut h);
                let off2 = hidden * d + hidden;
                let (w2, b2) = params[off2..].split_at(c * hidden);
                for (k, o) in z.iter_mut().enumerate() {
                    *o = b2[k]
                        + w2[k * hidden..(k + 1) * hidden]
                            .iter()
                            .zip(&h)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
                pred = argmax_lowest(&z);
                let ce = softmax_in_place(&mut z, y);
                let mut dh = vec![0.0; hidden];
                {
                    let (g1, g2) = grad.split_at_mut(off2);
                    let (gw2, gb2) = g2.split_at_mut(c * hidden);
                    for k in 0..c {
                        let r = z[k];
                        for j in 0..hidden {
                            gw2[k * hidden + j] = r * h[j];
                            dh[j] += r * w2[k * hidden + j];
                        }
                        gb2[k] = r;
                    }
                    let (gw1, gb1) = g1.split_at_mut(hidden * d);
                    for j in 0..hidden {
                        let a = dh[j] * (1.0 - h[j] * h[j]);
                        for (g, &xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *g = a * xi as f64;
                        }
                        gb1[j] = a;
                    }
                }
                ce
            }
        };
        let mut reg = 0.0;
        if mu > 0.0 {
            for (g, p) in grad.iter_mut().zip(params) {
                *g += mu * p;
                reg += p * p;
            }
        }
        (ce + 0.5 * mu * reg, pred)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    dim: usize,
    classes: usize,
    params: Vec<f64>,
}

impl AsRef<[f64]> for ModelParams {
    fn as_ref(&self) -> &[f64] {
        &self.params
    }
}

impl ModelParams {
    /// All-zero parameters. An MLP needs [`ModelParams::random_init`] to
    /// break symmetry.
    pub fn zeros(arch: Architecture, dim: usize, classes: usize) -> Self {
        let len = Self::param_len(arch, dim, classes);
        ModelParams {
            arch,
            dim,
            classes,
            params: vec![0.0; len],
        }
    }

    /// Zero init for softmax regression; scaled Gaussian weights for the MLP.
    pub fn random_init(arch: Architecture, dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(arch, dim, classes);
        if let Architecture::Mlp { hidden } = arch {
            let s1 = 1.0 / libm::sqrt(dim as f64);
            let s2 = 1.0 / libm::sqrt(hidden as f64);
            let w1 = hidden * dim;
            let w2_start = w1 + hidden;
            for (i, p) in m.params.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                if i < w1 {
                    *p = s1 * z;
                } else if i >= w2_start && i < w2_start + classes * hidden {
                    *p = s2 * z;
                }
            }
        }
        m
    }

    pub fn from_flat(
        arch: Architecture,
        dim: usize,
        classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let len = Self::param_len(arch, dim, classes);
        if params.len() != len {
            return Err(Error::Dimension {
                expected: len,
                actual: params.len(),
            });
        }
        Ok(ModelParams {
            arch,
            dim,
            classes,
            params,
        })
    }

    pub fn param_len(arch: Architecture, dim: usize, classes: usize) -> usize {
        match arch {
            Architecture::Softmax => classes * dim + classes,
            Architecture::Mlp { hidden } => hidden * dim + hidden + classes * hidden + classes,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn flat(&self) -> &[f64] {
        &self.params
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn compatible(&self, other: &ModelParams) -> bool {
        self.arch == other.arch && self.dim == other.dim && self.classes == other.classes
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            arch: self.arch,
            dim: self.dim,
            classes: self.classes,
        }
    }

    pub fn logits(&self, x: &[f32], out: &mut [f64]) {
        self.shape().logits(&self.params, x, out)
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> usize {
        self.shape().predict(&self.params, x)
    }

    pub fn sample_loss_grad(&self, x: &[f32], y: usize, mu: f64, grad: &mut [f64]) -> (f64, usize) {
        self.shape().sample_loss_grad(&self.params, x, y, mu, grad)
    }

    /// Mean cross-entropy and top-1 accuracy over `data`.
    pub fn evaluate(&self, data: &LabeledDataset) -> (f64, f64) {
        evaluate(self, data)
    }
}

/// Mean cross-entropy (no regularizer) and top-1 accuracy.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset) -> (f64, f64) {
    let mut z = vec![0.0; model.classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        model.logits(data.row(i), &mut z);
        let y = data.label(i);
        if argmax_lowest(&z) == y {
            correct += 1;
        }
        loss += softmax_in_place(&mut z, y);
    }
    let n = data.len() as f64;
    (loss / n, correct as f64 / n)
}

fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * b as f64).sum()
}

fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Replaces logits with `softmax - onehot(y)` and returns `-log p_y`.
fn softmax_in_place(z: &mut [f64], y: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let zy = z[y];
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    z[y] -= 1.0;
    libm::log(sum) + max - zy
}
