//! Run-wide constants and learning-rate schedules.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `eta_t = eta0` for every epoch.
    #[default]
    Constant,
    /// `eta_t = 2 / (mu (gamma_sched + t))`. When `gamma_sched` is absent it
    /// resolves to `max(8 kappa, E)` with `kappa = L / mu`.
    Decaying {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_sched: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct HyperParams {
    pub eta0: f64,
    pub schedule: Schedule,
    pub lipschitz_L: f64,
    pub mu: f64,
    pub grad_bound_G: f64,
    pub local_epochs_E: usize,
    pub rounds_T: usize,
    pub num_agents_N: usize,
    pub num_classes_I: usize,
    /// Per-agent local-variance bounds. `None` means "estimate empirically".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_k: Option<Vec<f64>>,
    pub gamma_het: f64,
    pub omega: f64,
    pub bound_coeff: f64,
    pub payment_Q: f64,
    pub phi: f64,
    pub upsilon: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta0: 0.01,
            schedule: Schedule::Constant,
            lipschitz_L: 100.0,
            mu: 0.01,
            grad_bound_G: 10.0,
            local_epochs_E: 5,
            rounds_T: 50,
            num_agents_N: 10,
            num_classes_I: 10,
            sigma_k: None,
            gamma_het: 0.0,
            omega: 1.0,
            bound_coeff: 1.0,
            payment_Q: 10_000.0,
            phi: 3000.0,
            upsilon: 200.0,
        }
    }
}

impl HyperParams {
    /// Condition number `L / mu`.
    pub fn kappa(&self) -> f64 {
        self.lipschitz_L / self.mu
    }

    /// The schedule constant `gamma_sched`; `None` for the constant schedule.
    pub fn gamma_sched(&self) -> Option<f64> {
        match self.schedule {
            Schedule::Constant => None,
            Schedule::Decaying { gamma_sched } => Some(
                gamma_sched
                    .unwrap_or_else(|| f64::max(8.0 * self.kappa(), self.local_epochs_E as f64)),
            ),
        }
    }

    /// Sum-to-one agent weights used when none are configured.
    pub fn uniform_weights(&self) -> Vec<f64> {
        let n = self.num_agents_N.max(1);
        alloc::vec![1.0 / n as f64; n]
    }

    /// `sigma_k` for agent `k`, zero when unknown.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma_k
            .as_ref()
            .and_then(|s| s.get(k).copied())
            .unwrap_or(0.0)
    }
}

/// Learning rate at epoch `t` under the configured schedule.
pub fn learning_rate(t: usize, hp: &HyperParams) -> f64 {
    match hp.gamma_sched() {
        None => hp.eta0,
        Some(gamma) => 2.0 / (hp.mu * (gamma + t as f64)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
    pub severity: Severity,
}

impl Violation {
    fn error(field: &str, constraint: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            constraint: constraint.into(),
            severity: Severity::Error,
        }
    }
}

/// Lists every violated [`HyperParams`] invariant. An empty list means the
/// configuration is valid.
pub fn validate_config(hp: &HyperParams) -> Vec<Violation> {
    let mut out = Vec::new();
    let positive = [
        ("eta0", hp.eta0),
        ("lipschitz_L", hp.lipschitz_L),
        ("mu", hp.mu),
        ("grad_bound_G", hp.grad_bound_G),
        ("bound_coeff", hp.bound_coeff),
        ("payment_Q", hp.payment_Q),
        ("phi", hp.phi),
        ("upsilon", hp.upsilon),
    ];
    for (field, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            out.push(Violation::error(
                field,
                format!("must be finite and > 0 (got {v})"),
            ));
        }
    }
    for (field, v) in [("gamma_het", hp.gamma_het), ("omega", hp.omega)] {
        if !(v.is_finite() && v >= 0.0) {
            out.push(Violation::error(
                field,
                format!("must be finite and >= 0 (got {v})"),
            ));
        }
    }
    for (field, v) in [
        ("local_epochs_E", hp.local_epochs_E),
        ("rounds_T", hp.rounds_T),
        ("num_agents_N", hp.num_agents_N),
    ] {
        if v == 0 {
            out.push(Violation::error(field, "must be a positive integer"));
        }
    }
    if hp.num_classes_I < 2 {
        out.push(Violation::error("num_classes_I", "must be >= 2"));
    }
    if let Some(sigma) = &hp.sigma_k {
        if sigma.len() != hp.num_agents_N {
            out.push(Violation::error(
                "sigma_k",
                format!("expected {} entries, got {}", hp.num_agents_N, sigma.len()),
            ));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            out.push(Violation::error(
                "sigma_k",
                "entries must be finite and >= 0",
            ));
        }
    }
    if let Schedule::Decaying { gamma_sched } = hp.schedule {
        if let Some(g) = gamma_sched {
            if !(g.is_finite() && g > 0.0) {
                out.push(Violation::error(
                    "schedule.gamma_sched",
                    "must be finite and > 0",
                ));
            }
        }
        // eta_t <= 1/(4L) is only guaranteed when gamma_sched >= 8 kappa.
        if let Some(g) = hp.gamma_sched() {
            if hp.mu > 0.0 && hp.lipschitz_L > 0.0 && g < 8.0 * hp.kappa() {
                let eta0 = 2.0 / (hp.mu * g);
                if eta0 > 1.0 / (4.0 * hp.lipschitz_L) {
                    out.push(Violation {
                        field: "schedule.gamma_sched".into(),
                        constraint: format!(
                            "gamma_sched = {g} < 8 kappa = {}; eta_0 = {eta0} exceeds 1/(4L) = {}",
                            8.0 * hp.kappa(),
                            1.0 / (4.0 * hp.lipschitz_L)
                        ),
                        severity: Severity::Warning,
                    });
                }
            }
        }
    }
    out
}
