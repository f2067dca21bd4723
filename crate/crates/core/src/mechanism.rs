//! The two-stage incentive game.
//!
//! The learner pays agent `k` a reward that shrinks with the generalization
//! gap bound `D = Phi delta_k^2 + Phi delta_k'^2 + Upsilon` against a peer
//! `k'`, and agents pick efforts `e_k in [0, 1]` that lower their distance
//! `delta_k(e_k)` at a linear cost.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::dist::EffortMap;
use crate::error::{Error, Result};
use crate::roots;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PaymentForm {
    /// `ln(Q / D)`.
    Logarithmic,
    /// `slope * Q / D`.
    Linear { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct MechanismConfig {
    pub payment_form: PaymentForm,
    pub q: f64,
    pub phi: f64,
    pub upsilon: f64,
    /// Slope of the linear cost shaper `d(x) = cost_scale * x`.
    pub cost_scale: f64,
    /// Slope of the linear reward shaper `g(x) = reward_scale * x`.
    pub reward_scale: f64,
    pub omega: f64,
    pub bound_coeff: f64,
    pub rounds_T: usize,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        MechanismConfig::from_hyper(&HyperParams::default(), PaymentForm::Logarithmic)
    }
}

impl MechanismConfig {
    pub fn from_hyper(hp: &HyperParams, payment_form: PaymentForm) -> Self {
        MechanismConfig {
            payment_form,
            q: hp.payment_Q,
            phi: hp.phi,
            upsilon: hp.upsilon,
            cost_scale: 1.0,
            reward_scale: 1.0,
            omega: hp.omega,
            bound_coeff: hp.bound_coeff,
            rounds_T: hp.rounds_T,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q", self.q),
            ("phi", self.phi),
            ("upsilon", self.upsilon),
            ("cost_scale", self.cost_scale),
            ("reward_scale", self.reward_scale),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(
                    field,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if let PaymentForm::Linear { slope } = self.payment_form {
            if !(slope > 0.0 && slope.is_finite()) {
                return Err(Error::config(
                    "linear_slope",
                    format!("must be > 0, got {slope}"),
                ));
            }
        }
        if !(self.omega >= 0.0 && self.bound_coeff >= 0.0) {
            return Err(Error::config("omega", "omega and bound_coeff must be >= 0"));
        }
        if !(self.omega > 0.0 || self.bound_coeff > 0.0) {
            return Err(Error::config(
                "omega",
                "simplified bound must stay positive: omega or bound_coeff > 0",
            ));
        }
        Ok(())
    }

    fn gap(&self, dk: f64, dp: f64) -> f64 {
        self.phi * dk * dk + self.phi * dp * dp + self.upsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    pub id: usize,
    pub weight: f64,
    /// Marginal cost `c`.
    pub cost: f64,
    /// Current or initial effort.
    #[serde(default)]
    pub effort: f64,
    #[serde(default)]
    pub effort_map: EffortMap,
    /// `delta_k(0)`.
    #[serde(default = "one")]
    pub delta0: f64,
}

fn one() -> f64 {
    1.0
}

impl AgentProfile {
    pub fn new(id: usize, weight: f64, cost: f64) -> Self {
        AgentProfile {
            id,
            weight,
            cost,
            effort: 0.0,
            effort_map: EffortMap::Exponential,
            delta0: 1.0,
        }
    }

    /// `n` identical agents with weights `1/n`.
    pub fn symmetric(n: usize, cost: f64) -> Vec<AgentProfile> {
        (0..n)
            .map(|k| AgentProfile::new(k, 1.0 / n as f64, cost))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return Err(Error::config(
                "cost",
                format!("agent {}: must be > 0", self.id),
            ));
        }
        if !(0.0..=1.0).contains(&self.effort) {
            return Err(Error::config(
                "effort",
                format!("agent {}: must lie in [0, 1]", self.id),
            ));
        }
        if !(0.0..=1.0).contains(&self.delta0) {
            return Err(Error::config(
                "delta0",
                format!("agent {}: must lie in [0, 1]", self.id),
            ));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::config(
                "weight",
                format!("agent {}: must be >= 0", self.id),
            ));
        }
        Ok(())
    }

    /// `delta_k(e) = delta_k(0) * map(e)`.
    pub fn delta(&self, e: f64) -> f64 {
        self.delta0 * self.effort_map.eval(e)
    }

    pub fn delta_prime(&self, e: f64) -> f64 {
        self.delta0 * self.effort_map.derivative(e)
    }

    pub fn delta_second(&self, e: f64) -> f64 {
        self.delta0 * self.effort_map.second_derivative(e)
    }

    /// Distances reachable with efforts in `[0, 1]`, as `(delta(1), delta(0))`.
    pub fn delta_range(&self) -> (f64, f64) {
        (self.delta(1.0), self.delta(0.0))
    }

    /// Effort reaching distance `delta`, clamped to `[0, 1]`. The flag is set
    /// when clamping changed the value.
    pub fn effort_for(&self, delta: f64) -> (f64, bool) {
        if self.delta0 <= 0.0 {
            return (0.0, delta != 0.0);
        }
        if delta <= 0.0 {
            return (1.0, true);
        }
        let raw = self.effort_map.inverse(delta / self.delta0);
        let e = raw.clamp(0.0, 1.0);
        (e, e != raw)
    }
}

fn check_profiles(profiles: &[AgentProfile]) -> Result<()> {
    if profiles.len() < 2 {
        return Err(Error::config("agents", "the game needs N >= 2 agents"));
    }
    for p in profiles {
        p.validate()?;
    }
    let s: f64 = profiles.iter().map(|p| p.weight).sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "weights",
            format!("sum to {s}, expected 1 within 1e-9"),
        ));
    }
    Ok(())
}

/// Payment for distance `dk` against a peer at distance `dp`.
pub fn payment(dk: f64, dp: f64, cfg: &MechanismConfig) -> Result<f64> {
    let d = cfg.gap(dk, dp);
    if !(d > 0.0) {
        return Err(Error::config(
            "upsilon",
            format!("gap bound D = {d} must be > 0"),
        ));
    }
    Ok(match cfg.payment_form {
        PaymentForm::Logarithmic => libm::log(cfg.q / d),
        PaymentForm::Linear { slope } => slope * cfg.q / d,
    })
}

/// `d payment / d delta_k`.
pub fn payment_slope(dk: f64, dp: f64, cfg: &MechanismConfig) -> f64 {
    let d = cfg.gap(dk, dp);
    match cfg.payment_form {
        PaymentForm::Logarithmic => -2.0 * cfg.phi * dk / d,
        PaymentForm::Linear { slope } => -2.0 * slope * cfg.q * cfg.phi * dk / (d * d),
    }
}

/// `c * d(|delta_k(0) - delta_k(e)|)` with linear `d`.
pub fn cost(e: f64, profile: &AgentProfile, cfg: &MechanismConfig) -> f64 {
    profile.cost * cfg.cost_scale * (profile.delta0 - profile.delta(e)).abs()
}

/// Utility against a single peer at distance `peer_delta`.
pub fn utility(
    e: f64,
    peer_delta: f64,
    profile: &AgentProfile,
    cfg: &MechanismConfig,
) -> Result<f64> {
    Ok(payment(profile.delta(e), peer_delta, cfg)? - cost(e, profile, cfg))
}

fn mean_payment(dk: f64, peer_deltas: &[f64], cfg: &MechanismConfig) -> Result<f64> {
    if peer_deltas.is_empty() {
        return Err(Error::config(
            "agents",
            "expected utility needs at least one peer (N >= 2)",
        ));
    }
    let mut s = 0.0;
    for &dp in peer_deltas {
        s += payment(dk, dp, cfg)?;
    }
    Ok(s / peer_deltas.len() as f64)
}

/// Utility averaged over a uniformly chosen peer.
pub fn expected_utility(
    e: f64,
    peer_deltas: &[f64],
    profile: &AgentProfile,
    cfg: &MechanismConfig,
) -> Result<f64> {
    Ok(mean_payment(profile.delta(e), peer_deltas, cfg)? - cost(e, profile, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcavityPoint {
    pub effort: f64,
    pub delta: f64,
    /// Central-difference first and second derivatives of the payment in `e`.
    pub first: f64,
    pub second: f64,
    /// Closed-form second derivative (logarithmic form only).
    pub exact_second: Option<f64>,
    /// `(3 Phi d^2 - Phi d'^2 - U) delta'^2 - (Phi d'^2 + U + Phi d^2) delta delta''`,
    /// required to be negative (logarithmic form only).
    pub analytic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub points: Vec<ConcavityPoint>,
    /// Efforts where the analytic inequality fails.
    pub analytic_violations: Vec<f64>,
    /// Efforts where the finite differences show `f' <= 0` or `f'' >= 0`.
    pub numeric_violations: Vec<f64>,
}

impl ConcavityReport {
    pub fn is_clean(&self) -> bool {
        self.analytic_violations.is_empty() && self.numeric_violations.is_empty()
    }
}

/// Evaluates the payment's monotonicity and concavity in `e` on a grid of
/// `resolution` points, against a peer at distance `peer_delta`.
pub fn check_payment_concavity(
    cfg: &MechanismConfig,
    profile: &AgentProfile,
    peer_delta: f64,
    resolution: usize,
) -> Result<ConcavityReport> {
    if resolution < 11 {
        return Err(Error::config("resolution", "grid needs at least 11 points"));
    }
    cfg.validate()?;
    let f = |e: f64| payment(profile.delta(e), peer_delta, cfg);
    let h = 1e-4;
    let (phi, ups, dp2) = (cfg.phi, cfg.upsilon, peer_delta * peer_delta);
    let mut report = ConcavityReport {
        points: Vec::with_capacity(resolution),
        analytic_violations: Vec::new(),
        numeric_violations: Vec::new(),
    };
    for i in 0..resolution {
        let e = i as f64 / (resolution - 1) as f64;
        let (fm, f0, fp) = (f(e - h)?, f(e)?, f(e + h)?);
        let first = (fp - fm) / (2.0 * h);
        let second = (fp - 2.0 * f0 + fm) / (h * h);
        let (d, d1, d2) = (
            profile.delta(e),
            profile.delta_prime(e),
            profile.delta_second(e),
        );
        let (analytic, exact_second) = match cfg.payment_form {
            PaymentForm::Logarithmic => {
                let gap = cfg.gap(d, peer_delta);
                let a = (3.0 * phi * d * d - phi * dp2 - ups) * d1 * d1
                    - (phi * dp2 + ups + phi * d * d) * d * d2;
                let exact = -2.0 * phi * ((d1 * d1 + d * d2) * gap - 2.0 * phi * d * d * d1 * d1)
                    / (gap * gap);
                (Some(a), Some(exact))
            }
            PaymentForm::Linear { .. } => (None, None),
        };
        if analytic.is_some_and(|a| a >= 0.0) {
            report.analytic_violations.push(e);
        }
        // Curvature below the difference scheme's noise floor counts as flat.
        let noise = 1e-6 * (1.0 + f0.abs());
        if first <= 0.0 || second >= noise {
            report.numeric_violations.push(e);
        }
        report.points.push(ConcavityPoint {
            effort: e,
            delta: d,
            first,
            second,
            exact_second,
            analytic,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    ClosedForm,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortCase {
    /// No effort: either cost always dominates or `e = 0` is simply best.
    Zero,
    Interior,
    /// The best effort sits on the upper end `e = 1`.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffortChoice {
    pub effort: f64,
    pub case: EffortCase,
    /// Expected utility at `effort`.
    pub utility: f64,
}

/// Best effort against the given peer distances, with the non-participation
/// cutoff: when no effort yields positive expected utility the agent stays at 0.
pub fn optimal_effort(
    profile: &AgentProfile,
    peer_deltas: &[f64],
    cfg: &MechanismConfig,
    method: SolveMethod,
) -> Result<EffortChoice> {
    optimal_effort_with(profile, peer_deltas, cfg, method, true)
}

/// As [`optimal_effort`]; `cutoff = false` keeps the utility-maximizing
/// effort even when its utility is non-positive.
pub fn optimal_effort_with(
    profile: &AgentProfile,
    peer_deltas: &[f64],
    cfg: &MechanismConfig,
    method: SolveMethod,
    cutoff: bool,
) -> Result<EffortChoice> {
    profile.validate()?;
    if peer_deltas.is_empty() {
        return Err(Error::config(
            "agents",
            "optimal effort needs at least one peer (N >= 2)",
        ));
    }
    let u = |e: f64| expected_utility(e, peer_deltas, profile, cfg);
    let (effort, value) = match method {
        SolveMethod::ClosedForm => {
            let mut candidates = vec![0.0, 1.0];
            for d in stationary_deltas(profile, peer_deltas, cfg)? {
                candidates.push(profile.effort_for(d).0);
            }
            candidates.sort_by(f64::total_cmp);
            argmax(&candidates, &u)?
        }
        SolveMethod::Numeric => numeric_argmax(&u)?,
    };
    let effort = if effort <= 1e-12 {
        0.0
    } else if effort >= 1.0 - 1e-12 {
        1.0
    } else {
        effort
    };
    if cutoff && value <= 0.0 {
        return Ok(EffortChoice {
            effort: 0.0,
            case: EffortCase::Zero,
            utility: u(0.0)?,
        });
    }
    let case = if effort == 0.0 {
        EffortCase::Zero
    } else if effort == 1.0 {
        EffortCase::Clamped
    } else {
        EffortCase::Interior
    };
    Ok(EffortChoice {
        effort,
        case,
        utility: u(effort)?,
    })
}

fn argmax(candidates: &[f64], u: &impl Fn(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best = (candidates[0], u(candidates[0])?);
    for &e in &candidates[1..] {
        let v = u(e)?;
        if v > best.1 {
            best = (e, v);
        }
    }
    Ok(best)
}

/// Coefficients (lowest degree first) of the stationarity polynomial in
/// `delta` for a single peer distance.
pub fn stationarity_polynomial(peer_delta: f64, cs: f64, cfg: &MechanismConfig) -> Vec<f64> {
    let a = cfg.phi * peer_delta * peer_delta + cfg.upsilon;
    match cfg.payment_form {
        // delta^2 - (2/c) delta + delta'^2 + U/Phi
        PaymentForm::Logarithmic => vec![a / cfg.phi, -2.0 / cs, 1.0],
        // delta^4 + 2(A/Phi) delta^2 - (2 k Q / (c Phi)) delta + A^2 / Phi^2
        PaymentForm::Linear { slope } => vec![
            a * a / (cfg.phi * cfg.phi),
            -2.0 * slope * cfg.q / (cs * cfg.phi),
            2.0 * a / cfg.phi,
            0.0,
            1.0,
        ],
    }
}

/// Distances where the expected utility is stationary in `delta`.
fn stationary_deltas(
    profile: &AgentProfile,
    peer_deltas: &[f64],
    cfg: &MechanismConfig,
) -> Result<Vec<f64>> {
    let cs = profile.cost * cfg.cost_scale;
    let first = peer_deltas[0];
    if peer_deltas.iter().all(|&d| d == first) {
        let poly = stationarity_polynomial(first, cs, cfg);
        let hi = profile.delta0.max(1.0);
        return Ok(roots::real_roots(&poly, 0.0, hi)
            .into_iter()
            .filter(|&r| roots::eval(&poly, r).abs() < 1e-9)
            .collect());
    }
    // Distinct peers: bracket sign changes of the derivative on a grid.
    let slope = |d: f64| {
        peer_deltas
            .iter()
            .map(|&dp| payment_slope(d, dp, cfg))
            .sum::<f64>()
            / peer_deltas.len() as f64
            + cs
    };
    let (lo, hi) = profile.delta_range();
    let n = 400;
    let mut out = Vec::new();
    let mut prev = (lo, slope(lo));
    for i in 1..=n {
        let d = lo + (hi - lo) * i as f64 / n as f64;
        let cur = (d, slope(d));
        if cur.1 == 0.0 {
            out.push(d);
        } else if (prev.1 < 0.0) != (cur.1 < 0.0) && prev.1 != 0.0 {
            let (mut a, mut b, fa) = (prev.0, cur.0, prev.1);
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if (slope(m) < 0.0) == (fa < 0.0) {
                    a = m;
                } else {
                    b = m;
                }
            }
            out.push(0.5 * (a + b));
        }
        prev = cur;
    }
    Ok(out)
}

/// Golden-section refinement of the best point on a 101-point grid; the
/// endpoints are always compared.
fn numeric_argmax(u: &impl Fn(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let n = 100;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let values = grid.iter().map(|&e| u(e)).collect::<Result<Vec<_>>>()?;
    let mut i = 0;
    for j in 1..values.len() {
        if values[j] > values[i] {
            i = j;
        }
    }
    let a = grid[i.saturating_sub(1)];
    let b = grid[(i + 1).min(n)];
    let x = golden_section_max(u, a, b, 1e-8)?;
    let mut best = (grid[i], values[i]);
    for e in [x, 0.0, 1.0] {
        let v = u(e)?;
        if v > best.1 {
            best = (e, v);
        }
    }
    Ok(best)
}

/// Maximizer of a unimodal `f` on `[a, b]` to interval width `tol`.
pub fn golden_section_max(
    f: &impl Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<f64> {
    let r = 0.5 * (libm::sqrt(5.0) - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Move halfway towards the best response each sweep.
    pub damping: bool,
    pub method: SolveMethod,
    pub participation_cutoff: bool,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        DynamicsOptions {
            tol: 1e-6,
            max_iters: 1000,
            damping: false,
            method: SolveMethod::ClosedForm,
            participation_cutoff: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub efforts: Vec<f64>,
    pub deltas: Vec<f64>,
    pub utilities: Vec<f64>,
    pub cases: Vec<EffortCase>,
    pub iterations: usize,
    /// Largest effort change in the last sweep.
    pub residual: f64,
    pub converged: bool,
    /// Best utility gain per agent over a 101-point unilateral deviation grid.
    pub deviation_audit: Vec<f64>,
}

fn peers_of(deltas: &[f64], k: usize) -> Vec<f64> {
    deltas
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &d)| d)
        .collect()
}

/// Synchronous best-response sweeps from the profiles' current efforts.
pub fn best_response_dynamics(
    profiles: &[AgentProfile],
    cfg: &MechanismConfig,
    opts: &DynamicsOptions,
) -> Result<EquilibriumResult> {
    check_profiles(profiles)?;
    cfg.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::config("tol", "must be > 0"));
    }
    let n = profiles.len();
    let mut efforts: Vec<f64> = profiles.iter().map(|p| p.effort).collect();
    let mut cases = vec![EffortCase::Zero; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let deltas: Vec<f64> = profiles
            .iter()
            .zip(&efforts)
            .map(|(p, &e)| p.delta(e))
            .collect();
        let mut next = Vec::with_capacity(n);
        for (k, p) in profiles.iter().enumerate() {
            let c = optimal_effort_with(
                p,
                &peers_of(&deltas, k),
                cfg,
                opts.method,
                opts.participation_cutoff,
            )?;
            cases[k] = c.case;
            next.push(if opts.damping {
                0.5 * (efforts[k] + c.effort)
            } else {
                c.effort
            });
        }
        residual = efforts
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        efforts = next;
        if residual < opts.tol {
            break;
        }
    }
    let deltas: Vec<f64> = profiles
        .iter()
        .zip(&efforts)
        .map(|(p, &e)| p.delta(e))
        .collect();
    let mut utilities = Vec::with_capacity(n);
    let mut audit = Vec::with_capacity(n);
    // Opting out is worth zero when the cutoff is active.
    let floor = if opts.participation_cutoff {
        0.0
    } else {
        f64::NEG_INFINITY
    };
    for (k, p) in profiles.iter().enumerate() {
        let peers = peers_of(&deltas, k);
        let here = expected_utility(efforts[k], &peers, p, cfg)?;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=100 {
            best = best.max(expected_utility(i as f64 / 100.0, &peers, p, cfg)?);
        }
        utilities.push(here);
        audit.push(best.max(floor) - here.max(floor));
    }
    let converged = residual < opts.tol && audit.iter().all(|&g| g <= 10.0 * opts.tol);
    Ok(EquilibriumResult {
        efforts,
        deltas,
        utilities,
        cases,
        iterations,
        residual,
        converged,
        deviation_audit: audit,
    })
}

/// `Omega + bound_coeff * sum_k p_k delta_k(e_k)^2`.
pub fn simplified_bound(efforts: &[f64], profiles: &[AgentProfile], cfg: &MechanismConfig) -> f64 {
    cfg.omega
        + cfg.bound_coeff
            * profiles
                .iter()
                .zip(efforts)
                .map(|(p, &e)| p.weight * p.delta(e) * p.delta(e))
                .sum::<f64>()
}

/// Expected per-round payment to each agent at the given efforts.
pub fn expected_payments(
    efforts: &[f64],
    profiles: &[AgentProfile],
    cfg: &MechanismConfig,
) -> Result<Vec<f64>> {
    let deltas: Vec<f64> = profiles
        .iter()
        .zip(efforts)
        .map(|(p, &e)| p.delta(e))
        .collect();
    (0..profiles.len())
        .map(|k| mean_payment(deltas[k], &peers_of(&deltas, k), cfg))
        .collect()
}

/// `g(1 / Bound(e)) - T * sum_k E[payment_k]`.
pub fn learner_payoff(
    efforts: &[f64],
    profiles: &[AgentProfile],
    cfg: &MechanismConfig,
) -> Result<f64> {
    let bound = simplified_bound(efforts, profiles, cfg);
    if !(bound > 0.0) {
        return Err(Error::config(
            "omega",
            format!("simplified bound {bound} must be > 0"),
        ));
    }
    let paid: f64 = expected_payments(efforts, profiles, cfg)?.iter().sum();
    Ok(cfg.reward_scale / bound - cfg.rounds_T as f64 * paid)
}

/// Smallest `Q` with `ln Q >= m_k + cost_k` for all `k`, i.e.
/// `max_k exp(m_k + cost_k)`, where `m_k` is agent `k`'s mean `ln D`.
/// Returns the value and the binding index.
pub fn minimal_q(mean_log_gap: &[f64], costs: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, (m, c)) in mean_log_gap.iter().zip(costs).enumerate() {
        if m + c > best.0 {
            best = (m + c, k);
        }
    }
    (libm::exp(best.0), best.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QChoice {
    /// Bisection result.
    pub q: f64,
    pub closed_form_q: f64,
    pub binding_agent: usize,
    pub efforts: Vec<f64>,
    /// Expected utilities at `q`.
    pub utilities: Vec<f64>,
    pub equilibrium_converged: bool,
}

/// Minimal payment scale keeping every agent's expected utility
/// non-negative at the equilibrium efforts. Logarithmic form only: there the
/// efforts do not depend on `Q`, so they are computed once.
pub fn choose_q(profiles: &[AgentProfile], cfg: &MechanismConfig, tol: f64) -> Result<QChoice> {
    if cfg.payment_form != PaymentForm::Logarithmic {
        return Err(Error::Precondition(
            "choose_q requires the logarithmic payment form".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::config("tol", "must be > 0"));
    }
    let opts = DynamicsOptions {
        participation_cutoff: false,
        ..DynamicsOptions::default()
    };
    let eq = best_response_dynamics(profiles, cfg, &opts)?;
    let costs: Vec<f64> = profiles
        .iter()
        .zip(&eq.efforts)
        .map(|(p, &e)| cost(e, p, cfg))
        .collect();
    let mean_log_gap: Vec<f64> = (0..profiles.len())
        .map(|k| {
            let peers = peers_of(&eq.deltas, k);
            peers
                .iter()
                .map(|&dp| libm::log(cfg.gap(eq.deltas[k], dp)))
                .sum::<f64>()
                / peers.len() as f64
        })
        .collect();
    let (closed, binding) = minimal_q(&mean_log_gap, &costs);

    let min_u = |log_q: f64| {
        mean_log_gap
            .iter()
            .zip(&costs)
            .map(|(m, c)| log_q - m - c)
            .fold(f64::INFINITY, f64::min)
    };
    let (mut lo, mut hi) = (libm::log(cfg.q), libm::log(cfg.q));
    let mut expansions = 0;
    while min_u(hi) < 0.0 {
        hi += 1.0 + (hi - lo);
        expansions += 1;
        if expansions > 200 || !hi.is_finite() {
            return Err(Error::config(
                "payment_Q",
                "no feasible Q found while expanding the bracket",
            ));
        }
    }
    while min_u(lo) >= 0.0 {
        lo -= 1.0 + (hi - lo);
        expansions += 1;
        if expansions > 400 || !lo.is_finite() {
            return Err(Error::config(
                "payment_Q",
                "could not bracket the minimal Q from below",
            ));
        }
    }
    let rel = libm::log1p(tol);
    while hi - lo > rel {
        let mid = 0.5 * (lo + hi);
        if min_u(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let q = libm::exp(hi);
    let at_q = MechanismConfig { q, ..cfg.clone() };
    let utilities = (0..profiles.len())
        .map(|k| expected_utility(eq.efforts[k], &peers_of(&eq.deltas, k), &profiles[k], &at_q))
        .collect::<Result<Vec<_>>>()?;
    Ok(QChoice {
        q,
        closed_form_q: closed,
        binding_agent: profiles[binding].id,
        efforts: eq.efforts,
        utilities,
        equilibrium_converged: eq.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg(phi: f64, upsilon: f64, q: f64) -> MechanismConfig {
        MechanismConfig {
            phi,
            upsilon,
            q,
            ..MechanismConfig::default()
        }
    }

    fn agent(c: f64) -> AgentProfile {
        AgentProfile::new(0, 0.5, c)
    }

    #[test]
    fn payment_examples() {
        let c = cfg(1000.0, 200.0, 460.0);
        assert_relative_eq!(payment(0.5, 0.1, &c).unwrap(), 0.0, epsilon = 1e-12);
        let ce = cfg(1000.0, 200.0, 460.0 * core::f64::consts::E);
        assert_relative_eq!(payment(0.5, 0.1, &ce).unwrap(), 1.0, epsilon = 1e-12);
        let lin = MechanismConfig {
            payment_form: PaymentForm::Linear { slope: 1.0 },
            ..c.clone()
        };
        assert_relative_eq!(payment(0.5, 0.1, &lin).unwrap(), 1.0, epsilon = 1e-12);
        let bad = MechanismConfig { upsilon: -1e6, ..c };
        assert!(matches!(payment(0.5, 0.1, &bad), Err(Error::Config { .. })));
    }

    #[test]
    fn cost_and_utility_examples() {
        let c = cfg(1000.0, 200.0, 460.0 * core::f64::consts::E);
        let a = agent(2.0);
        assert_eq!(cost(0.0, &a, &c), 0.0);
        assert_relative_eq!(cost(1.0, &a, &c), 1.264241, epsilon = 1e-6);
        // Payment 1 from the D = 460 example minus that cost.
        let pay = payment(0.5, 0.1, &c).unwrap();
        assert_relative_eq!(pay - cost(1.0, &a, &c), -0.264241, epsilon = 1e-6);

        let d0 = c.gap(1.0, 0.3);
        let zero = cfg(1000.0, 200.0, d0);
        assert_relative_eq!(utility(0.0, 0.3, &a, &zero).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_utility_is_peer_mean() {
        let c = cfg(1000.0, 200.0, 1e4);
        let a = agent(1.0);
        let single = utility(0.4, 0.3, &a, &c).unwrap();
        assert_relative_eq!(
            expected_utility(0.4, &[0.3, 0.3, 0.3], &a, &c).unwrap(),
            single,
            epsilon = 1e-12
        );
        assert!(expected_utility(0.4, &[], &a, &c).is_err());
        let peers = [0.1, 0.9];
        let ua = utility(0.4, peers[0], &a, &c).unwrap();
        let ub = utility(0.4, peers[1], &a, &c).unwrap();
        let ex = expected_utility(0.4, &peers, &a, &c).unwrap();
        assert_relative_eq!(ex, 0.5 * (ua + ub), epsilon = 1e-12);
        assert!(ua.min(ub) <= ex && ex <= ua.max(ub));
    }

    #[test]
    fn default_configuration_is_concave() {
        let c = cfg(3000.0, 200.0, 1e4);
        let r = check_payment_concavity(&c, &agent(1.0), 1.0, 101).unwrap();
        assert!(
            r.is_clean(),
            "{:?} {:?}",
            r.analytic_violations,
            r.numeric_violations
        );
        assert!(r.points.iter().all(|p| p.first > 0.0));
    }

    #[test]
    fn analytic_inequality_flags_small_offset() {
        let c = cfg(1000.0, 1.0, 1e4);
        let r = check_payment_concavity(&c, &agent(1.0), libm::exp(-1.0), 101).unwrap();
        assert!(!r.analytic_violations.is_empty());
        assert_eq!(r.analytic_violations[0], 0.0);
        // The payment itself stays concave for the exponential map.
        assert!(r.numeric_violations.is_empty());
        assert!(r.points.iter().all(|p| p.exact_second.unwrap() < 0.0));
        assert!(check_payment_concavity(&c, &agent(1.0), 0.5, 10).is_err());
    }

    #[test]
    fn closed_form_quadratic_example() {
        // Phi = 1000, Upsilon = 150 gives Upsilon / Phi = 0.15.
        let c = cfg(1000.0, 150.0, 1e4);
        let a = agent(2.0);
        let poly = stationarity_polynomial(0.3, 2.0, &c);
        let r = roots::real_roots(&poly, 0.0, 1.0);
        assert_relative_eq!(r[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(r[1], 0.6, epsilon = 1e-12);
        assert_relative_eq!(a.effort_for(0.4).0, 0.916291, epsilon = 1e-6);
        assert_relative_eq!(a.effort_for(0.6).0, 0.510826, epsilon = 1e-6);
        let cf = optimal_effort(&a, &[0.3], &c, SolveMethod::ClosedForm).unwrap();
        let nu = optimal_effort(&a, &[0.3], &c, SolveMethod::Numeric).unwrap();
        assert!((cf.effort - nu.effort).abs() < 1e-4);
        // ln(1240 / 400) = 1.131 falls short of the extra cost 2 * 0.6, so
        // staying at e = 0 beats the interior root.
        assert_eq!((cf.effort, cf.case), (0.0, EffortCase::Zero));
        let interior = expected_utility(0.916291, &[0.3], &a, &c).unwrap();
        assert!(cf.utility > interior);
        // A cheaper agent takes the interior root of its own quadratic.
        let cheap = agent(10.0 / 9.0);
        let m = cfg(1000.0, 400.0, 1e4);
        let ce = optimal_effort(&cheap, &[0.4], &m, SolveMethod::ClosedForm).unwrap();
        assert_relative_eq!(ce.effort, -libm::log(0.4), epsilon = 1e-9);
        assert_eq!(ce.case, EffortCase::Interior);
    }

    #[test]
    fn huge_cost_gives_zero_effort() {
        let c = MechanismConfig::default();
        let e = optimal_effort(&agent(1e6), &[0.5], &c, SolveMethod::ClosedForm).unwrap();
        assert_eq!((e.effort, e.case), (0.0, EffortCase::Zero));
    }

    #[test]
    fn clamped_root_example() {
        let c = cfg(1000.0, 100.0, 1e4);
        let a = agent(2.0);
        let r = roots::real_roots(&stationarity_polynomial(0.1, 2.0, &c), 0.0, 1.0);
        assert_relative_eq!(r[0], 0.5 - libm::sqrt(0.14), epsilon = 1e-12);
        assert!(a.effort_for(r[0]).1);
        let cf = optimal_effort(&a, &[0.1], &c, SolveMethod::ClosedForm).unwrap();
        let nu = optimal_effort(&a, &[0.1], &c, SolveMethod::Numeric).unwrap();
        assert!((cf.effort - nu.effort).abs() < 1e-4);
        let beats = expected_utility(1.0, &[0.1], &a, &c).unwrap()
            > expected_utility(0.0, &[0.1], &a, &c).unwrap();
        assert_eq!(cf.case == EffortCase::Clamped, beats);
    }

    #[test]
    fn closed_form_matches_oracle_on_grid() {
        for &c in &[0.5, 1.0, 2.0, 5.0] {
            for i in 1..=9 {
                let dp = i as f64 / 10.0;
                for &ratio in &[0.01, 0.1, 0.2, 0.3] {
                    let m = cfg(1000.0, 1000.0 * ratio, 1e4);
                    let a = agent(c);
                    let cf = optimal_effort(&a, &[dp], &m, SolveMethod::ClosedForm).unwrap();
                    let nu = optimal_effort(&a, &[dp], &m, SolveMethod::Numeric).unwrap();
                    assert!(
                        (cf.effort - nu.effort).abs() < 1e-4,
                        "c={c} dp={dp} r={ratio}: {cf:?} {nu:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn linear_quartic_roots_and_oracle() {
        for &c in &[0.5, 1.0, 2.0, 5.0] {
            for i in 1..=9 {
                let dp = i as f64 / 10.0;
                let m = MechanismConfig {
                    payment_form: PaymentForm::Linear { slope: 0.01 },
                    ..cfg(1000.0, 200.0, 1e4)
                };
                let poly = stationarity_polynomial(dp, c, &m);
                for r in roots::real_roots(&poly, 0.0, 1.0) {
                    assert!(roots::eval(&poly, r).abs() < 1e-9);
                    assert!((0.0..=1.0).contains(&r));
                    // Roots are the stationary points of the utility in delta.
                    assert!((payment_slope(r, dp, &m) + c).abs() < 1e-8);
                }
                let a = agent(c);
                let cf = optimal_effort(&a, &[dp], &m, SolveMethod::ClosedForm).unwrap();
                let nu = optimal_effort(&a, &[dp], &m, SolveMethod::Numeric).unwrap();
                assert!(
                    (cf.effort - nu.effort).abs() < 1e-4,
                    "c={c} dp={dp}: {cf:?} {nu:?}"
                );
            }
        }
    }

    #[test]
    fn distinct_peers_match_oracle() {
        let m = cfg(1000.0, 300.0, 1e4);
        for &c in &[0.5, 1.0, 2.0] {
            let a = agent(c);
            let peers = [0.2, 0.5, 0.9];
            let cf = optimal_effort(&a, &peers, &m, SolveMethod::ClosedForm).unwrap();
            let nu = optimal_effort(&a, &peers, &m, SolveMethod::Numeric).unwrap();
            assert!((cf.effort - nu.effort).abs() < 1e-4, "c={c}: {cf:?} {nu:?}");
        }
    }

    fn symmetric_interior() -> (Vec<AgentProfile>, MechanismConfig) {
        let mut agents = AgentProfile::symmetric(3, 10.0 / 9.0);
        agents.iter_mut().for_each(|a| a.effort = 1.0);
        (agents, cfg(1000.0, 400.0, 1e4))
    }

    #[test]
    fn symmetric_equilibrium_matches_scalar_fixed_point() {
        let (agents, m) = symmetric_interior();
        let eq = best_response_dynamics(&agents, &m, &DynamicsOptions::default()).unwrap();
        assert!(eq.converged, "{eq:?}");
        // Oracle: bisection on br(d) - d for the interior branch.
        let cinv = 0.9;
        let br = |d: f64| cinv - libm::sqrt(cinv * cinv - d * d - 0.4);
        let (mut lo, mut hi) = (0.3, 0.45);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if (br(mid) - mid > 0.0) == (br(lo) - lo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let d_star = 0.5 * (lo + hi);
        assert_relative_eq!(d_star, 0.4, epsilon = 1e-9);
        for &e in &eq.efforts {
            assert!((e - (-libm::log(d_star))).abs() < 1e-5, "{e}");
        }
        let spread = eq.efforts.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - eq.efforts.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-6);
    }

    #[test]
    fn fixed_point_is_stable_under_one_sweep() {
        let (mut agents, m) = symmetric_interior();
        let eq = best_response_dynamics(&agents, &m, &DynamicsOptions::default()).unwrap();
        for (a, &e) in agents.iter_mut().zip(&eq.efforts) {
            a.effort = e;
        }
        let opts = DynamicsOptions {
            max_iters: 1,
            ..DynamicsOptions::default()
        };
        let again = best_response_dynamics(&agents, &m, &opts).unwrap();
        assert!(again.residual < 1e-6);
    }

    #[test]
    fn high_cost_agents_all_stay_out() {
        let agents = AgentProfile::symmetric(4, 1e6);
        let eq = best_response_dynamics(
            &agents,
            &MechanismConfig::default(),
            &DynamicsOptions::default(),
        )
        .unwrap();
        assert!(eq.efforts.iter().all(|&e| e == 0.0));
        assert_eq!(eq.iterations, 1);
        assert!(eq.converged);
    }

    #[test]
    fn default_symmetric_game_has_two_corners() {
        let mut agents = AgentProfile::symmetric(10, 1.0);
        let m = MechanismConfig::default();
        let low = best_response_dynamics(&agents, &m, &DynamicsOptions::default()).unwrap();
        assert!(low.converged);
        assert!(low.efforts.iter().all(|&e| e == 0.0));
        agents.iter_mut().for_each(|a| a.effort = 1.0);
        let high = best_response_dynamics(&agents, &m, &DynamicsOptions::default()).unwrap();
        assert!(high.converged);
        assert!(high.efforts.iter().all(|&e| e == 1.0));
        assert!(high.cases.iter().all(|&c| c == EffortCase::Clamped));
    }

    #[test]
    fn damping_reaches_the_same_point() {
        let (agents, m) = symmetric_interior();
        let plain = best_response_dynamics(&agents, &m, &DynamicsOptions::default()).unwrap();
        let damped = best_response_dynamics(
            &agents,
            &m,
            &DynamicsOptions {
                damping: true,
                ..DynamicsOptions::default()
            },
        )
        .unwrap();
        assert!(damped.converged);
        for (a, b) in plain.efforts.iter().zip(&damped.efforts) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn too_few_agents_rejected() {
        let one = vec![AgentProfile::new(0, 1.0, 1.0)];
        assert!(best_response_dynamics(
            &one,
            &MechanismConfig::default(),
            &DynamicsOptions::default()
        )
        .is_err());
    }

    #[test]
    fn simplified_bound_and_payoff_examples() {
        let m = MechanismConfig {
            omega: 0.5,
            bound_coeff: 2.0,
            ..MechanismConfig::default()
        };
        let solo = vec![AgentProfile {
            delta0: 0.5,
            ..AgentProfile::new(0, 1.0, 1.0)
        }];
        assert_relative_eq!(simplified_bound(&[0.0], &solo, &m), 1.0, epsilon = 1e-12);
        let gone = vec![AgentProfile {
            delta0: 0.0,
            ..AgentProfile::new(0, 1.0, 1.0)
        }];
        assert_eq!(simplified_bound(&[0.3], &gone, &m), 0.5);

        // Bound = 1 and every payment zero: Q equals each pair's D.
        let agents = vec![
            AgentProfile {
                delta0: 0.0,
                ..AgentProfile::new(0, 0.5, 1.0)
            },
            AgentProfile {
                delta0: 0.0,
                ..AgentProfile::new(1, 0.5, 1.0)
            },
        ];
        let m = MechanismConfig {
            omega: 1.0,
            bound_coeff: 1.0,
            q: 200.0,
            upsilon: 200.0,
            rounds_T: 10,
            ..MechanismConfig::default()
        };
        assert_relative_eq!(
            learner_payoff(&[0.0, 0.0], &agents, &m).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let m0 = MechanismConfig {
            rounds_T: 0,
            q: 5e4,
            ..m.clone()
        };
        assert_relative_eq!(
            learner_payoff(&[0.0, 0.0], &agents, &m0).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let bad = MechanismConfig { omega: 0.0, ..m };
        assert!(learner_payoff(&[0.0, 0.0], &agents, &bad).is_err());
    }

    #[test]
    fn payoff_falls_with_q() {
        let agents = AgentProfile::symmetric(3, 1.0);
        let e = [0.3, 0.6, 0.9];
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let m = MechanismConfig {
                q: 1e3 * (1.0 + i as f64),
                ..MechanismConfig::default()
            };
            let p = learner_payoff(&e, &agents, &m).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn minimal_q_examples() {
        let (q, k) = minimal_q(&[libm::log(460.0)], &[1.0]);
        assert_relative_eq!(q, 460.0 * core::f64::consts::E, epsilon = 1e-9);
        assert_relative_eq!(q, 1250.41, epsilon = 1e-2);
        assert_eq!(k, 0);
        let (q, k) = minimal_q(&[libm::log(300.0), libm::log(500.0)], &[0.0, 0.0]);
        assert_relative_eq!(q, 500.0, epsilon = 1e-9);
        assert_eq!(k, 1);
    }

    #[test]
    fn choose_q_makes_binding_agent_indifferent() {
        let agents = vec![
            AgentProfile::new(0, 0.25, 0.5),
            AgentProfile::new(1, 0.25, 1.0),
            AgentProfile::new(2, 0.25, 2.0),
            AgentProfile::new(3, 0.25, 4.0),
        ];
        let m = cfg(1000.0, 300.0, 1e4);
        let tol = 1e-9;
        let q = choose_q(&agents, &m, tol).unwrap();
        assert!((q.q - q.closed_form_q).abs() <= tol * q.closed_form_q * 2.0);
        assert!(q.utilities.iter().all(|&u| u >= -tol));
        let b = agents.iter().position(|a| a.id == q.binding_agent).unwrap();
        assert!(q.utilities[b].abs() < 1e-6);
        let lin = MechanismConfig {
            payment_form: PaymentForm::Linear { slope: 1.0 },
            ..m
        };
        assert!(matches!(
            choose_q(&agents, &lin, tol),
            Err(Error::Precondition(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn payment_is_symmetric(a in 0.0f64..1.0, b in 0.0f64..1.0, phi in 10.0f64..5000.0, ups in 1.0f64..1000.0) {
            let m = cfg(phi, ups, 1e4);
            prop_assert_eq!(payment(a, b, &m).unwrap(), payment(b, a, &m).unwrap());
        }

        #[test]
        fn cost_is_monotone(c in 0.01f64..10.0, e in 0.0f64..0.99) {
            let a = agent(c);
            let m = MechanismConfig::default();
            prop_assert!(cost(e + 0.01, &a, &m) >= cost(e, &a, &m));
        }

        #[test]
        fn bound_is_non_increasing(e in proptest::collection::vec(0.0f64..0.99, 3), k in 0usize..3) {
            let agents = AgentProfile::symmetric(3, 1.0);
            let m = MechanismConfig::default();
            let mut more = e.clone();
            more[k] += 0.01;
            prop_assert!(simplified_bound(&more, &agents, &m) <= simplified_bound(&e, &agents, &m));
        }

        #[test]
        fn choose_q_matches_closed_form(costs in proptest::collection::vec(0.2f64..5.0, 2..5), ratio in 0.01f64..0.3) {
            let n = costs.len();
            let agents: Vec<AgentProfile> = costs.iter().enumerate().map(|(k, &c)| AgentProfile::new(k, 1.0 / n as f64, c)).collect();
            let m = cfg(1000.0, 1000.0 * ratio, 1e4);
            let tol = 1e-8;
            let q = choose_q(&agents, &m, tol).unwrap();
            prop_assert!((q.q - q.closed_form_q).abs() <= 2.0 * tol * q.closed_form_q);
            prop_assert!(q.utilities.iter().all(|&u| u >= -1e-6));
        }
    }
}
