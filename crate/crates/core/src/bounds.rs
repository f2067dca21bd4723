//! Closed-form bound calculators.
//!
//! Every calculator returns a [`BoundReport`] whose input snapshot is enough
//! to recompute the value bit-for-bit with [`BoundReport::recompute`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::{learning_rate, HyperParams, Schedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaId {
    Divergence,
    Convergence,
    Phi,
    Upsilon,
    Gap,
    GradVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoundFlags {
    /// The exact Upsilon came out `<= 0`; callers fall back to the simplified value.
    pub upsilon_nonpositive: bool,
    /// `E||w_1 - w*||^2` was replaced by the `4 G^2 / mu^2` surrogate.
    pub w_init_surrogate: bool,
}

impl BoundFlags {
    pub fn any(&self) -> bool {
        self.upsilon_nonpositive || self.w_init_surrogate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantMode {
    Exact,
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub formula_id: FormulaId,
    pub value: f64,
    pub inputs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
    /// Learning rates `eta_0 .. eta_{E-1}` for the Phi/Upsilon sums.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub etas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigmas: Vec<f64>,
    pub flags: BoundFlags,
}

impl BoundReport {
    fn new(formula_id: FormulaId, value: f64) -> Self {
        BoundReport {
            formula_id,
            value,
            inputs: BTreeMap::new(),
            deltas: Vec::new(),
            weights: Vec::new(),
            etas: Vec::new(),
            sigmas: Vec::new(),
            flags: BoundFlags::default(),
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.inputs.insert(key.to_string(), v);
        self
    }

    fn input(&self, key: &str) -> Result<f64> {
        self.inputs
            .get(key)
            .copied()
            .ok_or_else(|| Error::Precondition(alloc::format!("snapshot lacks `{key}`")))
    }

    /// Re-evaluates the formula from the snapshot alone.
    pub fn recompute(&self) -> Result<f64> {
        Ok(match self.formula_id {
            FormulaId::Divergence => divergence_value(
                self.input("E")? as usize,
                self.input("G")?,
                self.input("L")?,
                self.input("eta_t")?,
                weighted_sq(&self.deltas, &self.weights),
            ),
            FormulaId::Convergence => {
                let b = divergence_value(
                    self.input("E")? as usize,
                    self.input("G")?,
                    self.input("L")?,
                    self.input("eta_t")?,
                    weighted_sq(&self.deltas, &self.weights),
                ) + weighted_sq(
                    &self.sigmas,
                    &self.weights.iter().map(|p| p * p).collect::<Vec<_>>(),
                ) + 6.0 * self.input("L")? * self.input("gamma_het")?;
                convergence_value(
                    self.input("kappa")?,
                    self.input("gamma_sched")?,
                    self.input("T_elapsed")?,
                    self.input("mu")?,
                    b,
                    self.input("w_init_dist_sq")?,
                )
            }
            FormulaId::Phi => match self.input("mode_exact")? {
                m if m > 0.5 => phi_exact(self.input("L")?, self.input("G")?, &self.etas),
                _ => phi_simplified(self.input("E")? as usize, self.input("G")?),
            },
            FormulaId::Upsilon => match self.input("mode_exact")? {
                m if m > 0.5 => upsilon_exact(
                    self.input("L")?,
                    self.input("G")?,
                    self.input("mu")?,
                    &self.etas,
                ),
                _ => upsilon_simplified(self.input("G")?, self.input("mu")?),
            },
            FormulaId::Gap => gap_bound(
                self.input("delta_k")?,
                self.input("delta_kp")?,
                self.input("phi")?,
                self.input("upsilon")?,
            ),
            FormulaId::GradVariance => {
                grad_variance_bound(self.input("delta_k")?, self.input("G")?)
            }
        })
    }
}

fn weighted_sq(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| w * v * v).sum()
}

fn check_lengths(deltas: &[f64], weights: &[f64]) -> Result<()> {
    if deltas.len() != weights.len() {
        return Err(Error::Dimension {
            expected: weights.len(),
            actual: deltas.len(),
        });
    }
    Ok(())
}

/// `64 (E-1) G^2 eta^2 (1 + 2 eta L)^{2(E-1)} sum_k p_k delta_k^2`.
fn divergence_value(epochs: usize, g: f64, l: f64, eta: f64, weighted_delta_sq: f64) -> f64 {
    let e1 = epochs.saturating_sub(1) as f64;
    64.0 * e1 * g * g * eta * eta * libm::pow(1.0 + 2.0 * eta * l, 2.0 * e1) * weighted_delta_sq
}

fn convergence_value(kappa: f64, gamma: f64, t_elapsed: f64, mu: f64, b: f64, w_init: f64) -> f64 {
    kappa / (gamma + t_elapsed - 1.0) * (2.0 * b / mu + mu * gamma / 2.0 * w_init)
}

/// Upper bound on the weighted model divergence `sum_k p_k ||w_bar_t - w_t^k||^2`
/// at epoch `t`.
pub fn divergence_bound(
    hp: &HyperParams,
    deltas: &[f64],
    weights: &[f64],
    t: usize,
) -> Result<BoundReport> {
    check_lengths(deltas, weights)?;
    let eta = learning_rate(t, hp);
    let value = divergence_value(
        hp.local_epochs_E,
        hp.grad_bound_G,
        hp.lipschitz_L,
        eta,
        weighted_sq(deltas, weights),
    );
    let mut r = BoundReport::new(FormulaId::Divergence, value)
        .with("E", hp.local_epochs_E as f64)
        .with("G", hp.grad_bound_G)
        .with("L", hp.lipschitz_L)
        .with("eta_t", eta)
        .with("t", t as f64);
    r.deltas = deltas.to_vec();
    r.weights = weights.to_vec();
    Ok(r)
}

/// FedAvg optimality-gap bound after `t_elapsed` rounds under the decaying
/// schedule. The divergence term inside `B` is evaluated at `eta_0`, the
/// largest step of the schedule.
pub fn convergence_bound(
    hp: &HyperParams,
    deltas: &[f64],
    weights: &[f64],
    t_elapsed: usize,
    w_init_dist_sq: Option<f64>,
) -> Result<BoundReport> {
    check_lengths(deltas, weights)?;
    let gamma =
        match (hp.schedule, hp.gamma_sched()) {
            (Schedule::Decaying { .. }, Some(g)) => g,
            _ => return Err(Error::Precondition(
                "convergence bound requires `schedule = decaying`; constant schedule configured"
                    .into(),
            )),
        };
    let eta0 = learning_rate(0, hp);
    let sigmas: Vec<f64> = (0..weights.len()).map(|k| hp.sigma(k)).collect();
    let divergence = divergence_value(
        hp.local_epochs_E,
        hp.grad_bound_G,
        hp.lipschitz_L,
        eta0,
        weighted_sq(deltas, weights),
    );
    let variance: f64 = weights
        .iter()
        .zip(&sigmas)
        .map(|(p, s)| p * p * s * s)
        .sum();
    let b = divergence + variance + 6.0 * hp.lipschitz_L * hp.gamma_het;
    let surrogate = w_init_dist_sq.is_none();
    let w_init =
        w_init_dist_sq.unwrap_or(4.0 * hp.grad_bound_G * hp.grad_bound_G / (hp.mu * hp.mu));
    let value = convergence_value(hp.kappa(), gamma, t_elapsed as f64, hp.mu, b, w_init);
    let mut r = BoundReport::new(FormulaId::Convergence, value)
        .with("E", hp.local_epochs_E as f64)
        .with("G", hp.grad_bound_G)
        .with("L", hp.lipschitz_L)
        .with("mu", hp.mu)
        .with("kappa", hp.kappa())
        .with("gamma_sched", gamma)
        .with("gamma_het", hp.gamma_het)
        .with("eta_t", eta0)
        .with("T_elapsed", t_elapsed as f64)
        .with("w_init_dist_sq", w_init)
        .with("B", b);
    r.deltas = deltas.to_vec();
    r.weights = weights.to_vec();
    r.sigmas = sigmas;
    r.flags.w_init_surrogate = surrogate;
    Ok(r)
}

fn etas(hp: &HyperParams, epochs: usize) -> Vec<f64> {
    (0..epochs).map(|t| learning_rate(t, hp)).collect()
}

fn phi_exact(l: f64, g: f64, etas: &[f64]) -> f64 {
    let sum: f64 = etas
        .iter()
        .enumerate()
        .map(|(t, &eta)| libm::pow(eta * eta * (1.0 + 2.0 * eta * eta * l * l), t as f64))
        .sum();
    16.0 * l * l * g * g * sum
}

fn phi_simplified(epochs: usize, g: f64) -> f64 {
    6.0 * epochs as f64 * g * g
}

fn upsilon_exact(l: f64, g: f64, mu: f64, etas: &[f64]) -> f64 {
    let product: f64 = etas
        .iter()
        .enumerate()
        .map(|(t, &eta)| libm::pow(1.0 - 2.0 * eta * l, t as f64))
        .product();
    let sum: f64 = etas
        .iter()
        .enumerate()
        .map(|(t, &eta)| libm::pow(1.0 - 2.0 * eta * l, t as f64) * eta * eta)
        .sum();
    product * 2.0 * g * g * l / (mu * mu) + l * g * g / 2.0 * sum
}

fn upsilon_simplified(g: f64, mu: f64) -> f64 {
    2.0 * g * g / mu
}

/// Slope constant Phi of the generalization-gap bound over `hp.local_epochs_E` epochs.
pub fn compute_phi(hp: &HyperParams, mode: ConstantMode) -> f64 {
    phi_report(hp, mode, hp.local_epochs_E).value
}

/// Phi over an explicit number of local epochs.
pub fn phi_report(hp: &HyperParams, mode: ConstantMode, epochs: usize) -> BoundReport {
    let etas = etas(hp, epochs.max(1));
    let value = match mode {
        ConstantMode::Exact => phi_exact(hp.lipschitz_L, hp.grad_bound_G, &etas),
        ConstantMode::Simplified => phi_simplified(epochs, hp.grad_bound_G),
    };
    let mut r = BoundReport::new(FormulaId::Phi, value)
        .with("E", epochs as f64)
        .with("G", hp.grad_bound_G)
        .with("L", hp.lipschitz_L)
        .with(
            "mode_exact",
            if mode == ConstantMode::Exact {
                1.0
            } else {
                0.0
            },
        );
    r.etas = etas;
    r
}

/// Offset constant Upsilon over `hp.local_epochs_E` epochs. A non-positive
/// exact value is flagged, not clamped.
pub fn compute_upsilon(hp: &HyperParams, mode: ConstantMode) -> BoundReport {
    upsilon_report(hp, mode, hp.local_epochs_E)
}

pub fn upsilon_report(hp: &HyperParams, mode: ConstantMode, epochs: usize) -> BoundReport {
    let etas = etas(hp, epochs.max(1));
    let value = match mode {
        ConstantMode::Exact => upsilon_exact(hp.lipschitz_L, hp.grad_bound_G, hp.mu, &etas),
        ConstantMode::Simplified => upsilon_simplified(hp.grad_bound_G, hp.mu),
    };
    let mut r = BoundReport::new(FormulaId::Upsilon, value)
        .with("E", epochs as f64)
        .with("G", hp.grad_bound_G)
        .with("L", hp.lipschitz_L)
        .with("mu", hp.mu)
        .with(
            "mode_exact",
            if mode == ConstantMode::Exact {
                1.0
            } else {
                0.0
            },
        );
    r.etas = etas;
    r.flags.upsilon_nonpositive = !(value > 0.0);
    r
}

/// Exact Upsilon when positive, otherwise the simplified value. The returned
/// report keeps the flag raised when the fallback fired.
pub fn upsilon_with_fallback(hp: &HyperParams, epochs: usize) -> BoundReport {
    let exact = upsilon_report(hp, ConstantMode::Exact, epochs);
    if exact.flags.upsilon_nonpositive {
        let mut simple = upsilon_report(hp, ConstantMode::Simplified, epochs);
        simple.flags.upsilon_nonpositive = true;
        simple
    } else {
        exact
    }
}

/// `Phi delta_k^2 + Phi delta_k'^2 + Upsilon`.
pub fn gap_bound(delta_k: f64, delta_kp: f64, phi: f64, upsilon: f64) -> f64 {
    phi * delta_k * delta_k + phi * delta_kp * delta_kp + upsilon
}

pub fn gap_report(delta_k: f64, delta_kp: f64, phi: f64, upsilon: f64) -> BoundReport {
    BoundReport::new(FormulaId::Gap, gap_bound(delta_k, delta_kp, phi, upsilon))
        .with("delta_k", delta_k)
        .with("delta_kp", delta_kp)
        .with("phi", phi)
        .with("upsilon", upsilon)
}

/// `4 G^2 delta_k^2`, the bound on `||grad F_k - grad F||^2`.
pub fn grad_variance_bound(delta_k: f64, g: f64) -> f64 {
    4.0 * g * g * delta_k * delta_k
}

pub fn grad_variance_report(delta_k: f64, g: f64) -> BoundReport {
    BoundReport::new(FormulaId::GradVariance, grad_variance_bound(delta_k, g))
        .with("delta_k", delta_k)
        .with("G", g)
}
