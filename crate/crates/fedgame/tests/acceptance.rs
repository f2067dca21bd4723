//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use fedgame::cli::{report_tables, run_experiment};
use fedgame::config::{load_config, RunConfig, SweepAxis};
use fedgame::exec::Rayon;
use fedgame::experiments::{
    deviation_summary, peer_gap_summary, run_plan, sweep_summary, PlanKind, SweepSummary,
};
use fedgame::formats::TraceFile;
use fedgame_core::mechanism::{
    best_response_dynamics, check_payment_concavity, choose_q, optimal_effort,
    stationarity_polynomial, AgentProfile, DynamicsOptions, MechanismConfig, SolveMethod,
};
use fedgame_core::{
    make_label_distribution, roots, wasserstein_delta, LabelDistribution, PartitionSpec, RngStream,
};
use rand::Rng;

// Tolerances, frozen.
const METRIC_TOL: f64 = 1e-12;
const AXIOM_TOL: f64 = 1e-12;
const AXIOM_SAMPLES: usize = 10_000;
const PEER_FRACTION: f64 = 0.8;
const EFFORT_TOL: f64 = 1e-4;
const ROOT_TOL: f64 = 1e-12;
const BRD_RESIDUAL: f64 = 1e-6;
const BRD_MAX_SWEEPS: usize = 200;
const AUDIT_TOL: f64 = 1e-5;
const Q_REL_TOL: f64 = 1e-6;
const Q_UTILITY_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default_config() -> RunConfig {
    load_config("default", std::iter::empty()).expect("default config")
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn traces(cfg: &RunConfig, kind: PlanKind) -> Vec<TraceFile> {
    run_plan(kind, cfg, &Rayon)
        .expect("plan runs")
        .traces
        .into_iter()
        .map(|t| t.file)
        .collect()
}

fn random_dist(rng: &mut impl Rng, classes: usize) -> LabelDistribution {
    let zeros = rng.random_range(0..classes);
    let w: Vec<f64> = (0..classes)
        .map(|i| {
            if i < zeros && rng.random_bool(0.5) {
                0.0
            } else {
                rng.random::<f64>() + 1e-9
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    LabelDistribution::renormalized(w.iter().map(|x| x / total).collect()).unwrap()
}

fn c1_metric() -> Outcome {
    let spec = PartitionSpec::majority_longtail(0.8, 1.0, 0);
    let p = make_label_distribution(&spec, 10).map_err(|e| e.to_string())?;
    let u = LabelDistribution::uniform(10).unwrap();
    let d = wasserstein_delta(&p, &u).unwrap();
    if (d - 0.7).abs() > METRIC_TOL {
        return Err(format!("delta = {d:.15}, expected 0.7"));
    }
    let mut rng = RngStream::new(2024, "acceptance/metric").rng();
    let mut worst_triangle = f64::NEG_INFINITY;
    for _ in 0..AXIOM_SAMPLES {
        let classes = rng.random_range(2..=20);
        let (a, b, c) = (
            random_dist(&mut rng, classes),
            random_dist(&mut rng, classes),
            random_dist(&mut rng, classes),
        );
        let ab = wasserstein_delta(&a, &b).unwrap();
        let ba = wasserstein_delta(&b, &a).unwrap();
        let bc = wasserstein_delta(&b, &c).unwrap();
        let ac = wasserstein_delta(&a, &c).unwrap();
        if (ab - ba).abs() > AXIOM_TOL {
            return Err(format!("symmetry fails: {ab} vs {ba}"));
        }
        if wasserstein_delta(&a, &a).unwrap() != 0.0 || (a != b && ab <= 0.0) {
            return Err(format!("identity fails at distance {ab}"));
        }
        if !(0.0..=1.0 + AXIOM_TOL).contains(&ab) {
            return Err(format!("distance {ab} outside [0, 1]"));
        }
        worst_triangle = worst_triangle.max(ac - ab - bc);
    }
    check(
        worst_triangle <= AXIOM_TOL,
        format!(
            "delta = {d:.15}; {AXIOM_SAMPLES} triples, max triangle excess {worst_triangle:.2e}"
        ),
    )
}

fn delta_sweep() -> (SweepSummary, f64) {
    let t = Instant::now();
    let mut cfg = default_config();
    cfg.experiment.axis = SweepAxis::Delta;
    cfg.experiment.deltas = vec![0.1, 0.5, 0.9];
    cfg.experiment.seeds = 3;
    let s = sweep_summary(&traces(&cfg, PlanKind::NoniidSweep)).expect("summary");
    (s, t.elapsed().as_secs_f64())
}

fn c2_divergence(sweep: &SweepSummary) -> Outcome {
    let checked: usize = sweep.compliance.iter().map(|r| r.divergence_checked).sum();
    let violations: usize = sweep
        .compliance
        .iter()
        .map(|r| r.divergence_violations)
        .sum();
    let worst = sweep
        .compliance
        .iter()
        .map(|r| r.max_divergence_ratio)
        .fold(0.0, f64::max);
    let epochs = {
        let hp = default_config().hyper;
        hp.rounds_T * hp.local_epochs_E + 1
    };
    let runs = sweep.compliance.len();
    check(
        runs == 9 && checked == runs * epochs && violations == 0,
        format!("{runs} runs, {checked} epochs checked, {violations} violations, max measured/bound {worst:.3e}"),
    )
}

fn c3_grad_variance() -> Outcome {
    let mut cfg = default_config();
    cfg.experiment.seeds = 1;
    cfg.experiment.deltas = vec![0.1, 0.5, 0.9];
    let files = traces(&cfg, PlanKind::BoundVerify);
    let s = sweep_summary(&files).map_err(|e| e.to_string())?;
    let clipped = files
        .iter()
        .flat_map(|f| f.metric("grad_norm").map(|r| r.value).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let checked: usize = s.compliance.iter().map(|r| r.grad_gap_checked).sum();
    let violations: usize = s.compliance.iter().map(|r| r.grad_gap_violations).sum();
    let worst = s
        .compliance
        .iter()
        .map(|r| r.max_grad_gap_ratio)
        .fold(0.0, f64::max);
    let raw = s
        .compliance
        .iter()
        .map(|r| r.max_sample_grad_norm)
        .fold(0.0, f64::max);
    let g = cfg.hyper.grad_bound_G;
    let expected = cfg.hyper.num_agents_N * cfg.hyper.rounds_T * 3;
    check(
        checked >= expected && violations == 0 && clipped <= g * (1.0 + 1e-12),
        format!(
            "{checked} agent-rounds checked, {violations} violations, max ratio {worst:.3}; clipped gradient norm {clipped:.4} <= G={g} (largest raw per-sample norm {raw:.4})"
        ),
    )
}

fn strictly_decreasing(rows: &[(f64, f64)]) -> bool {
    rows.windows(2).all(|w| w[1].1 < w[0].1)
}

fn c4_accuracy(sweep: &SweepSummary) -> Outcome {
    let delta: Vec<(f64, f64)> = sweep
        .rows
        .iter()
        .map(|r| (r.value, r.mean_final_accuracy))
        .collect();
    let mut cfg = default_config();
    cfg.experiment.axis = SweepAxis::ClassCount;
    cfg.experiment.class_counts = vec![10, 5, 1];
    cfg.experiment.seeds = 3;
    let cc = sweep_summary(&traces(&cfg, PlanKind::NoniidSweep)).map_err(|e| e.to_string())?;
    let mut classes: Vec<(f64, f64)> = cc
        .rows
        .iter()
        .map(|r| (r.value, r.mean_final_accuracy))
        .collect();
    // Fewer classes per agent is more heterogeneous.
    classes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let fmt = |v: &[(f64, f64)]| {
        v.iter()
            .map(|(x, a)| format!("{x}:{a:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let ordered = delta.windows(2).all(|w| w[0].0 < w[1].0);
    check(
        delta.len() == 3
            && classes.len() == 3
            && ordered
            && strictly_decreasing(&delta)
            && strictly_decreasing(&classes),
        format!("delta {}; class_count {}", fmt(&delta), fmt(&classes)),
    )
}

fn c5_peer_gap() -> Outcome {
    let cfg = default_config();
    let (s, _) = peer_gap_summary(&traces(&cfg, PlanKind::PeerGap)).map_err(|e| e.to_string())?;
    check(
        s.fraction_low_ahead >= PEER_FRACTION && s.exact_bound_checked > 0 && s.exact_bound_violations == 0,
        format!(
            "low ahead {}/{} rounds ({:.3} >= {PEER_FRACTION}); gap bound {} violations of {} rounds with positive exact Upsilon ({} fallback rounds)",
            s.rounds_low_ahead,
            s.rounds_compared,
            s.fraction_low_ahead,
            s.exact_bound_violations,
            s.exact_bound_checked,
            s.upsilon_fallback_rounds
        ),
    )
}

fn mech(phi: f64, upsilon: f64, q: f64) -> MechanismConfig {
    MechanismConfig {
        phi,
        upsilon,
        q,
        ..MechanismConfig::default()
    }
}

fn c6_closed_form() -> Outcome {
    let mut points = 0;
    let mut worst = 0.0f64;
    for c in [0.5, 1.0, 2.0, 5.0] {
        for i in 1..=9 {
            let dp = i as f64 / 10.0;
            for ratio in [0.01, 0.1, 0.2, 0.3] {
                let m = mech(1000.0, 1000.0 * ratio, 1e4);
                let a = AgentProfile::new(0, 0.5, c);
                let cf = optimal_effort(&a, &[dp], &m, SolveMethod::ClosedForm)
                    .map_err(|e| e.to_string())?;
                let nu = optimal_effort(&a, &[dp], &m, SolveMethod::Numeric)
                    .map_err(|e| e.to_string())?;
                worst = worst.max((cf.effort - nu.effort).abs());
                points += 1;
            }
        }
    }
    let poly = stationarity_polynomial(0.3, 2.0, &mech(1000.0, 150.0, 1e4));
    let r = roots::real_roots(&poly, 0.0, 1.0);
    let residual = r
        .iter()
        .map(|&x| roots::eval(&poly, x).abs())
        .fold(0.0, f64::max);
    let roots_ok = r.len() == 2 && (r[0] - 0.4).abs() < ROOT_TOL && (r[1] - 0.6).abs() < ROOT_TOL;
    check(
        points == 144 && worst <= EFFORT_TOL && roots_ok && residual < ROOT_TOL,
        format!("{points} grid points, max |closed - oracle| {worst:.2e}; worked roots {r:?}, residual {residual:.1e}"),
    )
}

fn c7_equilibrium() -> Outcome {
    let m = MechanismConfig::default();
    let opts = DynamicsOptions::default();
    let mut notes = Vec::new();
    for start in [0.0, 1.0] {
        let mut profiles = AgentProfile::symmetric(10, 1.0);
        profiles.iter_mut().for_each(|p| p.effort = start);
        let eq = best_response_dynamics(&profiles, &m, &opts).map_err(|e| e.to_string())?;
        let audit = eq
            .deviation_audit
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !(eq.converged
            && eq.residual < BRD_RESIDUAL
            && eq.iterations <= BRD_MAX_SWEEPS
            && audit <= AUDIT_TOL)
        {
            return Err(format!("start {start}: {eq:?}"));
        }
        notes.push(format!(
            "from e={start}: e*={:.4} in {} sweeps, audit {audit:.1e}",
            eq.efforts[0], eq.iterations
        ));
    }
    let high = AgentProfile::symmetric(10, 1e6);
    let eq = best_response_dynamics(&high, &m, &opts).map_err(|e| e.to_string())?;
    let zero = eq.efforts.iter().all(|&e| e == 0.0);
    notes.push(format!("c=1e6: all zero {zero} in {} sweep", eq.iterations));
    check(zero && eq.iterations == 1, notes.join("; "))
}

fn q_check(name: &str, profiles: &[AgentProfile], m: &MechanismConfig) -> Outcome {
    let qc = choose_q(profiles, m, 1e-12).map_err(|e| e.to_string())?;
    let rel = ((qc.q - qc.closed_form_q) / qc.closed_form_q).abs();
    let min = qc.utilities.iter().cloned().fold(f64::INFINITY, f64::min);
    let others_ok = qc
        .utilities
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != qc.binding_agent)
        .all(|(_, &u)| u >= 0.0 || (u - min).abs() <= 1e-12);
    let ok = rel <= Q_REL_TOL && min.abs() <= Q_UTILITY_TOL && others_ok;
    check(
        ok,
        format!(
            "{name}: Q*={:.6} closed {:.6} (rel {rel:.1e}), min u {min:.1e}",
            qc.q, qc.closed_form_q
        ),
    )
}

fn c8_choose_q() -> Outcome {
    let default = default_config();
    let a = q_check(
        "default",
        &default.agent_profiles(),
        &default.mechanism_config(),
    )?;
    let dev = load_config(
        configs_dir().join("deviation.toml").to_str().unwrap(),
        std::iter::empty(),
    )
    .map_err(|e| e.to_string())?;
    let b = q_check(
        "heterogeneous",
        &dev.agent_profiles(),
        &dev.mechanism_config(),
    )?;
    Ok(format!("{a}; {b}"))
}

fn c9_concavity() -> Outcome {
    let m = MechanismConfig::default();
    let a = AgentProfile::new(0, 0.1, 1.0);
    let mut numeric = 0;
    for i in 1..=10 {
        let r = check_payment_concavity(&m, &a, i as f64 / 10.0, 101).map_err(|e| e.to_string())?;
        numeric += r.numeric_violations.len();
    }
    let bad = mech(1000.0, 1.0, 1e4);
    let r = check_payment_concavity(&bad, &a, (-1.0f64).exp(), 101).map_err(|e| e.to_string())?;
    let flagged = r.analytic_violations.len();
    check(
        numeric == 0 && flagged > 0,
        format!("default: {numeric} numeric violations over 10 peers x 101 points; violating config: {flagged} points flagged"),
    )
}

fn c10_deviation() -> Outcome {
    let cfg = load_config(
        configs_dir().join("deviation.toml").to_str().unwrap(),
        std::iter::empty(),
    )
    .map_err(|e| e.to_string())?;
    let rows =
        deviation_summary(&traces(&cfg, PlanKind::DeviationStudy)).map_err(|e| e.to_string())?;
    let star = rows
        .iter()
        .find(|r| r.is_equilibrium)
        .ok_or("no equilibrium row")?;
    let others_below = rows
        .iter()
        .filter(|r| !r.is_equilibrium)
        .all(|r| r.mean_utility <= star.mean_utility);
    let detail = rows
        .iter()
        .map(|r| format!("{:.4}:{:.5}", r.effort, r.mean_utility))
        .collect::<Vec<_>>()
        .join(" ");
    check(
        star.best && others_below && star.seeds == 5 && rows.len() == 6,
        format!("e*={:.4}; mean utility by effort {detail}", star.effort),
    )
}

fn c11_reproducibility() -> Outcome {
    let cfg = default_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(PlanKind::NoniidSweep, &cfg, d.path()).map_err(|e| e.to_string())?;
    }
    let files = [
        "summary.csv",
        "curves.csv",
        "compliance.csv",
        "summary.json",
    ];
    for f in files {
        let a = fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    let rebuilt = report_tables(dirs[0].path()).map_err(|e| e.to_string())?;
    for t in &rebuilt {
        let on_disk = fs::read_to_string(dirs[0].path().join(format!("{}.csv", t.name)))
            .map_err(|e| e.to_string())?;
        if on_disk != t.csv {
            return Err(format!("{}.csv not reproduced from traces", t.name));
        }
    }
    let bytes = fs::metadata(dirs[0].path().join("summary.csv"))
        .map(|m| m.len())
        .unwrap_or(0);
    Ok(format!("{} files byte-identical across two runs; {} tables rebuilt from traces; summary.csv {bytes} bytes", files.len(), rebuilt.len()))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, budget: f64, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n:>2} [{name}] {} ({secs:.1} s / {budget:.0} s): {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    };
    let mut sweep = None;
    report(1, "metric", 1.0, &mut c1_metric);
    report(2, "divergence-dominance", 300.0, &mut || {
        let (s, _) = delta_sweep();
        let r = c2_divergence(&s);
        sweep = Some(s);
        r
    });
    report(3, "gradient-variance", 60.0, &mut c3_grad_variance);
    let (delta_secs, swept) = match sweep.take() {
        Some(s) => (0.0, s),
        None => {
            let (s, t) = delta_sweep();
            (t, s)
        }
    };
    // The delta-axis runs are shared with criterion 2; their time is not
    // charged again here.
    report(4, "heterogeneity-accuracy", 600.0 - delta_secs, &mut || {
        c4_accuracy(&swept)
    });
    report(5, "peer-gap", 300.0, &mut c5_peer_gap);
    report(6, "closed-form-optimum", 10.0, &mut c6_closed_form);
    report(7, "equilibrium", 10.0, &mut c7_equilibrium);
    report(8, "learner-q", 1.0, &mut c8_choose_q);
    report(9, "concavity", 1.0, &mut c9_concavity);
    report(10, "deviation-study", 900.0, &mut c10_deviation);
    report(11, "reproducibility", 300.0, &mut c11_reproducibility);
    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
