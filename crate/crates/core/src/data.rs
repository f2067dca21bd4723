//! Labeled datasets and the synthetic Gaussian task.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::LabelDistribution;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Row-major `n x d` features with labels in `[0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f32>,
    labels: Vec<u16>,
    dim: usize,
    classes: usize,
    empirical: LabelDistribution,
}

impl LabeledDataset {
    pub fn new(features: Vec<f32>, labels: Vec<u16>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config(
                "labels",
                "dataset must hold at least one sample",
            ));
        }
        if dim == 0 {
            return Err(Error::config("dim", "feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some((i, y)) = labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y as usize >= classes)
        {
            return Err(Error::config(
                "labels",
                format!("label {y} at index {i} not below I = {classes}"),
            ));
        }
        let mut counts = vec![0usize; classes];
        for &y in &labels {
            counts[y as usize] += 1;
        }
        let empirical = LabelDistribution::from_counts(&counts)?;
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            classes,
            empirical,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn empirical_dist(&self) -> &LabelDistribution {
        &self.empirical
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y as usize].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(features, labels, self.dim, self.classes)
    }

    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("datasets", "nothing to concatenate"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.classes != first.classes {
                return Err(Error::Dimension {
                    expected: first.dim,
                    actual: p.dim,
                });
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        LabeledDataset::new(features, labels, first.dim, first.classes)
    }

    /// Fixed-size working set drawn without replacement (the whole dataset,
    /// reordered, when `n >= len`).
    pub fn resample(&self, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = n.min(self.len());
        let picked = index::sample(rng, self.len(), n).into_vec();
        self.subset(&picked)
    }
}

/// Class-conditional Gaussian generator. Class means sit on the vertices of
/// a scaled simplex (`margin * e_i`) when `dim >= I`, otherwise on a circle
/// of radius `margin` in the first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianTask {
    pub dim: usize,
    pub classes: usize,
    pub margin: f64,
    pub noise_std: f64,
}

impl Default for GaussianTask {
    fn default() -> Self {
        GaussianTask {
            dim: 32,
            classes: 10,
            margin: 3.0,
            noise_std: 1.0,
        }
    }
}

impl GaussianTask {
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        if self.dim >= self.classes {
            m[class] = self.margin;
        } else {
            let angle = 2.0 * core::f64::consts::PI * class as f64 / self.classes as f64;
            m[0] = self.margin * libm::cos(angle);
            if self.dim > 1 {
                m[1] = self.margin * libm::sin(angle);
            }
        }
        m
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::config("classes", "must lie in [2, 65535]"));
        }
        if !(self.noise_std >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("noise_std", "must be >= 0"));
        }
        Ok(())
    }
}

/// Draws `n` labels i.i.d. from `dist` and Gaussian features around the
/// class means.
pub fn sample_dataset(
    dist: &LabelDistribution,
    n: usize,
    task: &GaussianTask,
    stream: &RngStream,
) -> Result<LabeledDataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::config("n", "must be >= 1"));
    }
    if dist.len() != task.classes {
        return Err(Error::Dimension {
            expected: task.classes,
            actual: dist.len(),
        });
    }
    let mut rng = stream.rng();
    let picker =
        WeightedIndex::new(dist.probs()).map_err(|e| Error::config("dist", format!("{e}")))?;
    let means: Vec<Vec<f64>> = (0..task.classes).map(|c| task.class_mean(c)).collect();
    let mut features = Vec::with_capacity(n * task.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = picker.sample(&mut rng);
        labels.push(y as u16);
        for m in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((m + task.noise_std * z) as f32);
        }
    }
    LabeledDataset::new(features, labels, task.dim, task.classes)
}

/// Draws `n` samples from `pool` whose labels follow `dist`: each label is
/// drawn from `dist`, then a pool sample of that label uniformly with
/// replacement. Used to partition real datasets.
pub fn draw_from_pool(
    pool: &LabeledDataset,
    dist: &LabelDistribution,
    n: usize,
    stream: &RngStream,
) -> Result<LabeledDataset> {
    if dist.len() != pool.classes() {
        return Err(Error::Dimension {
            expected: pool.classes(),
            actual: dist.len(),
        });
    }
    let by_class = pool.indices_by_class();
    if let Some(i) = (0..pool.classes()).find(|&i| dist.probs()[i] > 0.0 && by_class[i].is_empty())
    {
        return Err(Error::config(
            "pool",
            format!("class {i} requested but absent from the pool"),
        ));
    }
    let mut rng = stream.rng();
    let picker =
        WeightedIndex::new(dist.probs()).map_err(|e| Error::config("dist", format!("{e}")))?;
    let picked: Vec<usize> = (0..n)
        .map(|_| {
            let members = &by_class[picker.sample(&mut rng)];
            members[rng.random_range(0..members.len())]
        })
        .collect();
    pool.subset(&picked)
}
