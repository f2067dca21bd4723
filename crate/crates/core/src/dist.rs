//! Label distributions, non-iid partition shapes, the Wasserstein non-iid
//! degree, and the effort-to-distance map.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) - 1` accepted at construction.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Largest drift tolerated before renormalizing a computed distribution.
pub const DRIFT_TOL: f64 = 1e-9;

/// Probability vector over `I >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::config("probs", "need at least two classes"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::config("probs", format!("entry {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::config(
                "probs",
                format!("entries sum to {sum}, not 1"),
            ));
        }
        Ok(LabelDistribution { probs })
    }

    /// Renormalizes the output of distribution arithmetic, rejecting it when
    /// the mass drifted by more than [`DRIFT_TOL`].
    pub fn renormalized(mut probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if !((sum - 1.0).abs() < DRIFT_TOL) {
            return Err(Error::config("probs", format!("mass drifted to {sum}")));
        }
        for p in probs.iter_mut() {
            *p = (*p / sum).clamp(0.0, 1.0);
        }
        LabelDistribution::new(probs)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("num_classes_I", "need at least two classes"));
        }
        LabelDistribution::renormalized(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Dimension {
                expected: classes,
                actual: class,
            });
        }
        let mut p = vec![0.0; classes];
        p[class] = 1.0;
        LabelDistribution::new(p)
    }

    /// Normalized label histogram.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::config("counts", "empty histogram"));
        }
        let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        LabelDistribution::renormalized(probs)
    }

    /// `sum_k w_k p^(k)`.
    pub fn mixture(dists: &[LabelDistribution], weights: &[f64]) -> Result<Self> {
        if dists.len() != weights.len() || dists.is_empty() {
            return Err(Error::Dimension {
                expected: dists.len(),
                actual: weights.len(),
            });
        }
        let classes = dists[0].len();
        let mut probs = vec![0.0; classes];
        for (d, &w) in dists.iter().zip(weights) {
            if d.len() != classes {
                return Err(Error::Dimension {
                    expected: classes,
                    actual: d.len(),
                });
            }
            for (acc, p) in probs.iter_mut().zip(d.probs()) {
                *acc += w * p;
            }
        }
        LabelDistribution::renormalized(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LabelDistribution::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.probs
    }
}

/// Non-iid degree of `p_k` against the reference `p_c`: half the L1
/// distance between the two label distributions.
pub fn wasserstein_delta(p_k: &LabelDistribution, p_c: &LabelDistribution) -> Result<f64> {
    if p_k.len() != p_c.len() {
        return Err(Error::Dimension {
            expected: p_c.len(),
            actual: p_k.len(),
        });
    }
    let l1: f64 = p_k
        .probs()
        .iter()
        .zip(p_c.probs())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// `delta_target` of the mass on the majority class, the rest spread
    /// over the other classes with geometric weights `longtail_ratio^j`.
    MajorityLongtail,
    /// `class_count_p` classes (majority plus the following ones) share the
    /// mass equally.
    ClassCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub delta_target: f64,
    pub longtail_ratio: f64,
    pub class_count_p: usize,
    pub majority_class: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            mode: PartitionMode::MajorityLongtail,
            delta_target: 0.5,
            longtail_ratio: 1.0,
            class_count_p: 1,
            majority_class: 0,
        }
    }
}

impl PartitionSpec {
    pub fn majority_longtail(
        delta_target: f64,
        longtail_ratio: f64,
        majority_class: usize,
    ) -> Self {
        PartitionSpec {
            mode: PartitionMode::MajorityLongtail,
            delta_target,
            longtail_ratio,
            majority_class,
            ..PartitionSpec::default()
        }
    }

    pub fn class_count(class_count_p: usize, majority_class: usize) -> Self {
        PartitionSpec {
            mode: PartitionMode::ClassCount,
            class_count_p,
            majority_class,
            ..PartitionSpec::default()
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.majority_class >= classes {
            return Err(Error::config(
                "majority_class",
                format!("{} not below I = {classes}", self.majority_class),
            ));
        }
        match self.mode {
            PartitionMode::MajorityLongtail => {
                if !(0.0..=1.0).contains(&self.delta_target) {
                    return Err(Error::config("delta_target", "must lie in [0, 1]"));
                }
                if !(self.longtail_ratio > 0.0 && self.longtail_ratio <= 1.0) {
                    return Err(Error::config("longtail_ratio", "must lie in (0, 1]"));
                }
            }
            PartitionMode::ClassCount => {
                if self.class_count_p == 0 || self.class_count_p > classes {
                    return Err(Error::config(
                        "class_count_p",
                        format!("must lie in [1, {classes}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn make_label_distribution(spec: &PartitionSpec, classes: usize) -> Result<LabelDistribution> {
    if classes < 2 {
        return Err(Error::config("num_classes_I", "need at least two classes"));
    }
    spec.validate(classes)?;
    let mut probs = vec![0.0; classes];
    let m = spec.majority_class;
    match spec.mode {
        PartitionMode::MajorityLongtail => {
            probs[m] = spec.delta_target;
            let minority = 1.0 - spec.delta_target;
            let weights: Vec<f64> = (0..classes - 1)
                .map(|j| libm::pow(spec.longtail_ratio, j as f64))
                .collect();
            let total: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                probs[(m + 1 + j) % classes] = minority * w / total;
            }
        }
        PartitionMode::ClassCount => {
            let share = 1.0 / spec.class_count_p as f64;
            for j in 0..spec.class_count_p {
                probs[(m + j) % classes] = share;
            }
        }
    }
    LabelDistribution::renormalized(probs)
}

/// Non-increasing effort-to-distance map `[0, 1] -> [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortMap {
    /// `delta(e) = exp(-e)`.
    #[default]
    Exponential,
}

impl EffortMap {
    /// The map without domain checks; used for derivatives near the edges.
    pub fn eval(&self, e: f64) -> f64 {
        match self {
            EffortMap::Exponential => libm::exp(-e),
        }
    }

    /// `d delta / d e`.
    pub fn derivative(&self, e: f64) -> f64 {
        match self {
            EffortMap::Exponential => -libm::exp(-e),
        }
    }

    /// `d^2 delta / d e^2`.
    pub fn second_derivative(&self, e: f64) -> f64 {
        match self {
            EffortMap::Exponential => libm::exp(-e),
        }
    }

    /// Unclamped inverse.
    pub fn inverse(&self, delta: f64) -> f64 {
        match self {
            EffortMap::Exponential => -libm::log(delta),
        }
    }
}

pub fn effort_to_delta(e: f64, map: EffortMap) -> Result<f64> {
    if !(0.0..=1.0).contains(&e) {
        return Err(Error::Domain {
            what: "effort",
            value: e,
            domain: "[0, 1]",
        });
    }
    Ok(map.eval(e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffortInverse {
    pub effort: f64,
    /// The exact inverse fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
}

pub fn delta_to_effort(delta: f64, map: EffortMap) -> Result<EffortInverse> {
    if !(delta > 0.0) {
        return Err(Error::Domain {
            what: "delta",
            value: delta,
            domain: "(0, 1]",
        });
    }
    let raw = map.inverse(delta);
    let effort = raw.clamp(0.0, 1.0);
    Ok(EffortInverse {
        effort,
        clamped: effort != raw,
    })
}
