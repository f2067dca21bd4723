//! Experiment plans and their summaries.
//!
//! Each plan produces named traces; every summary table is computed from the
//! traces alone, so `report` can rebuild it from stored files.

use std::collections::BTreeMap;

use fedgame_core::bounds::{
    gap_bound, phi_report, upsilon_report, upsilon_with_fallback, ConstantMode,
};
use fedgame_core::data::draw_from_pool;
use fedgame_core::mechanism::{
    best_response_dynamics, choose_q, cost, expected_utility, payment, AgentProfile,
    EquilibriumResult, MechanismConfig, PaymentForm, QChoice,
};
use fedgame_core::train::{run_training, Executor, TrainingSetup, TrainingTrace};
use fedgame_core::{
    make_label_distribution, sample_dataset, LabelDistribution, LabeledDataset, PartitionSpec,
    RngStream,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig, SweepAxis};
use crate::error::{HarnessError, Result};
use crate::formats::{load_idx_dataset, summarize, TraceFile, TraceRow};
use crate::manifest::DatasetFingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PlanKind {
    NoniidSweep,
    PeerGap,
    BoundVerify,
    EquilibriumSim,
    DeviationStudy,
}

impl PlanKind {
    pub const ALL: [PlanKind; 5] = [
        PlanKind::NoniidSweep,
        PlanKind::PeerGap,
        PlanKind::BoundVerify,
        PlanKind::EquilibriumSim,
        PlanKind::DeviationStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlanKind::NoniidSweep => "noniid_sweep",
            PlanKind::PeerGap => "peer_gap",
            PlanKind::BoundVerify => "bound_verify",
            PlanKind::EquilibriumSim => "equilibrium_sim",
            PlanKind::DeviationStudy => "deviation_study",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        PlanKind::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Seeds of the repetitions: `seed, seed + 1, ..`.
pub fn seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.experiment.seeds as u64)
        .map(|s| cfg.seed.wrapping_add(s))
        .collect()
}

/// One spec per agent; the majority class shifts per agent when rotation is on.
pub fn agent_specs(cfg: &RunConfig, base: &PartitionSpec, n: usize) -> Vec<PartitionSpec> {
    let classes = cfg.hyper.num_classes_I;
    (0..n)
        .map(|k| {
            let mut s = base.clone();
            if cfg.data.rotate_majority {
                s.majority_class = (base.majority_class + k) % classes;
            }
            s
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DataBundle {
    pub dists: Vec<LabelDistribution>,
    pub partitions: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

impl DataBundle {
    pub fn fingerprints(&self, prefix: &str) -> Vec<DatasetFingerprint> {
        let mut out: Vec<DatasetFingerprint> = self
            .partitions
            .iter()
            .enumerate()
            .map(|(k, d)| DatasetFingerprint::of(format!("{prefix}/agent-{k}"), d))
            .collect();
        out.push(DatasetFingerprint::of(format!("{prefix}/test"), &self.test));
        out
    }
}

/// Partitions under streams `data/agent-k` and a test set under `test`,
/// either synthetic or drawn from an IDX pool.
pub fn build_data(cfg: &RunConfig, specs: &[PartitionSpec], seed: u64) -> Result<DataBundle> {
    let classes = cfg.hyper.num_classes_I;
    let dists = specs
        .iter()
        .map(|s| make_label_distribution(s, classes))
        .collect::<fedgame_core::Result<Vec<_>>>()?;
    let reference = cfg.reference()?;
    let n = cfg.data.samples_per_agent;
    let (partitions, test) = match cfg.data.source {
        DataSource::Synthetic => {
            let task = &cfg.data.task;
            let parts = dists
                .iter()
                .enumerate()
                .map(|(k, d)| sample_dataset(d, n, task, &RngStream::indexed(seed, "data", k)))
                .collect::<fedgame_core::Result<Vec<_>>>()?;
            let test = sample_dataset(
                &reference,
                cfg.data.test_samples,
                task,
                &RngStream::new(seed, "test"),
            )?;
            (parts, test)
        }
        DataSource::Idx => {
            let p = cfg.data.idx.as_ref().ok_or_else(|| {
                HarnessError::Config("data.source = idx needs a [data.idx] table".into())
            })?;
            let pool = load_idx_dataset(&p.train_images, &p.train_labels, classes)?;
            let test = load_idx_dataset(&p.test_images, &p.test_labels, classes)?;
            let parts = dists
                .iter()
                .enumerate()
                .map(|(k, d)| draw_from_pool(&pool, d, n, &RngStream::indexed(seed, "data", k)))
                .collect::<fedgame_core::Result<Vec<_>>>()?;
            (parts, test)
        }
    };
    Ok(DataBundle {
        dists,
        partitions,
        test,
    })
}

pub fn train_bundle(
    cfg: &RunConfig,
    bundle: &DataBundle,
    seed: u64,
    exec: &impl Executor,
) -> Result<TrainingTrace> {
    let mut tc = cfg.training_config();
    tc.hp.num_agents_N = bundle.partitions.len();
    let setup = TrainingSetup::new(
        bundle.partitions.clone(),
        bundle.test.clone(),
        cfg.reference()?,
        seed,
    );
    Ok(run_training(&tc, &setup, exec)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTrace {
    /// File stem below `traces/`.
    pub name: String,
    pub file: TraceFile,
}

#[derive(Debug, Clone)]
pub struct PlanRun {
    pub kind: PlanKind,
    pub traces: Vec<NamedTrace>,
    pub datasets: Vec<DatasetFingerprint>,
    /// Solved game for the mechanism plans.
    pub game: Option<GameSolution>,
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

pub fn run_plan(kind: PlanKind, cfg: &RunConfig, exec: &(impl Executor + Sync)) -> Result<PlanRun> {
    cfg.validate()?;
    match kind {
        PlanKind::NoniidSweep | PlanKind::BoundVerify => run_sweep(kind, cfg, exec),
        PlanKind::PeerGap => run_peer_gap(cfg, exec),
        PlanKind::EquilibriumSim => run_equilibrium_sim(cfg, exec),
        PlanKind::DeviationStudy => run_deviation_study(cfg, exec),
    }
}

fn axis_specs(cfg: &RunConfig) -> Vec<(f64, PartitionSpec)> {
    let base = &cfg.data.partition;
    match cfg.experiment.axis {
        SweepAxis::Delta => cfg
            .experiment
            .deltas
            .iter()
            .map(|&d| {
                (
                    d,
                    PartitionSpec::majority_longtail(d, base.longtail_ratio, base.majority_class),
                )
            })
            .collect(),
        SweepAxis::ClassCount => cfg
            .experiment
            .class_counts
            .iter()
            .map(|&p| (p as f64, PartitionSpec::class_count(p, base.majority_class)))
            .collect(),
    }
}

fn run_sweep(kind: PlanKind, cfg: &RunConfig, exec: &(impl Executor + Sync)) -> Result<PlanRun> {
    let mut cfg = cfg.clone();
    if kind == PlanKind::BoundVerify {
        cfg.training.gradient_gaps = true;
    }
    let axis = cfg.experiment.axis.name();
    let points: Vec<(usize, f64, PartitionSpec, u64)> = axis_specs(&cfg)
        .into_iter()
        .enumerate()
        .flat_map(|(i, (v, spec))| {
            seeds(&cfg)
                .into_iter()
                .map(move |s| (i, v, spec.clone(), s))
        })
        .collect();
    let n = cfg.hyper.num_agents_N;
    let results: Vec<(NamedTrace, Vec<DatasetFingerprint>)> = points
        .par_iter()
        .map(|(i, v, spec, seed)| {
            let bundle = build_data(&cfg, &agent_specs(&cfg, spec, n), *seed)?;
            let trace = train_bundle(&cfg, &bundle, *seed, exec)?;
            let name = format!("{axis}-{v}-seed{seed}");
            let m = meta(&[
                ("plan", kind.name().into()),
                ("kind", "training".into()),
                ("axis", axis.into()),
                ("value", v.to_string()),
                ("point", i.to_string()),
                ("seed", seed.to_string()),
            ]);
            Ok((
                NamedTrace {
                    file: TraceFile::from_trace(&trace, m),
                    name: name.clone(),
                },
                bundle.fingerprints(&name),
            ))
        })
        .collect::<Result<_>>()?;
    let (traces, datasets): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(PlanRun {
        kind,
        traces,
        datasets: datasets.into_iter().flatten().collect(),
        game: None,
    })
}

fn push(
    rows: &mut Vec<TraceRow>,
    round: usize,
    epoch: usize,
    agent: Option<usize>,
    metric: &str,
    value: f64,
) {
    rows.push(TraceRow {
        round,
        epoch,
        agent_id: agent,
        metric: metric.to_string(),
        value,
    });
}

fn run_peer_gap(cfg: &RunConfig, exec: &(impl Executor + Sync)) -> Result<PlanRun> {
    let mut cfg = cfg.clone();
    cfg.hyper.num_agents_N = 2;
    cfg.training.local_test_eval = true;
    let base = &cfg.data.partition;
    let (lo, hi) = (cfg.experiment.peer_deltas[0], cfg.experiment.peer_deltas[1]);
    let specs: Vec<PartitionSpec> = [lo, hi]
        .iter()
        .map(|&d| PartitionSpec::majority_longtail(d, base.longtail_ratio, base.majority_class))
        .collect();
    let e = cfg.hyper.local_epochs_E;
    let results: Vec<(NamedTrace, Vec<DatasetFingerprint>)> = seeds(&cfg)
        .par_iter()
        .map(|&seed| {
            let bundle = build_data(&cfg, &specs, seed)?;
            let trace = train_bundle(&cfg, &bundle, seed, exec)?;
            let name = format!("peer-seed{seed}");
            let m = meta(&[
                ("plan", PlanKind::PeerGap.name().into()),
                ("kind", "training".into()),
                ("delta_low", lo.to_string()),
                ("delta_high", hi.to_string()),
                ("burn_in", cfg.experiment.burn_in.to_string()),
                ("point", "0".into()),
                ("seed", seed.to_string()),
            ]);
            let mut file = TraceFile::from_trace(&trace, m);
            for rr in &trace.rounds {
                let epochs = (rr.round + 1) * e;
                let phi = phi_report(&cfg.hyper, ConstantMode::Exact, epochs).value;
                let exact_ups = upsilon_report(&cfg.hyper, ConstantMode::Exact, epochs);
                let ups = upsilon_with_fallback(&cfg.hyper, epochs);
                let bound = gap_bound(rr.deltas[0], rr.deltas[1], phi, ups.value);
                let gap = rr.local_test_loss[1] - rr.local_test_loss[0];
                let rows = &mut file.rows;
                push(rows, rr.round, epochs, None, "loss_gap", gap);
                push(rows, rr.round, epochs, None, "gap_bound", bound);
                push(rows, rr.round, epochs, None, "phi", phi);
                push(rows, rr.round, epochs, None, "upsilon", ups.value);
                push(
                    rows,
                    rr.round,
                    epochs,
                    None,
                    "upsilon_exact_positive",
                    if exact_ups.flags.upsilon_nonpositive {
                        0.0
                    } else {
                        1.0
                    },
                );
            }
            Ok((
                NamedTrace {
                    file,
                    name: name.clone(),
                },
                bundle.fingerprints(&name),
            ))
        })
        .collect::<Result<_>>()?;
    let (traces, datasets): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(PlanRun {
        kind: PlanKind::PeerGap,
        traces,
        datasets: datasets.into_iter().flatten().collect(),
        game: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSolution {
    pub profiles: Vec<AgentProfile>,
    /// Mechanism with `q` set to the learner's choice (log form) or as configured.
    pub mechanism: MechanismConfig,
    /// Dynamics as configured (participation cutoff on), at the configured `Q`.
    pub equilibrium: EquilibriumResult,
    pub q_choice: Option<QChoice>,
    /// Efforts used downstream: the `choose_q` equilibrium for the log form.
    pub efforts: Vec<f64>,
    pub deltas: Vec<f64>,
    pub expected_utilities: Vec<f64>,
}

pub fn solve_game(cfg: &RunConfig) -> Result<GameSolution> {
    let mut profiles = cfg.agent_profiles();
    let mut mech = cfg.mechanism_config();
    let equilibrium = best_response_dynamics(&profiles, &mech, &cfg.dynamics_options())?;
    let (q_choice, efforts) = match mech.payment_form {
        PaymentForm::Logarithmic => {
            let qc = choose_q(&profiles, &mech, cfg.mechanism.q_tol)?;
            mech.q = qc.q;
            let e = qc.efforts.clone();
            (Some(qc), e)
        }
        PaymentForm::Linear { .. } => (None, equilibrium.efforts.clone()),
    };
    for (p, &e) in profiles.iter_mut().zip(&efforts) {
        p.effort = e;
    }
    let deltas: Vec<f64> = profiles.iter().map(|p| p.delta(p.effort)).collect();
    let expected_utilities = (0..profiles.len())
        .map(|k| expected_utility(efforts[k], &peers(&deltas, k), &profiles[k], &mech))
        .collect::<fedgame_core::Result<Vec<_>>>()?;
    Ok(GameSolution {
        profiles,
        mechanism: mech,
        equilibrium,
        q_choice,
        efforts,
        deltas,
        expected_utilities,
    })
}

fn peers(deltas: &[f64], k: usize) -> Vec<f64> {
    deltas
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &d)| d)
        .collect()
}

/// Peer of every agent in every round, drawn uniformly among the others.
/// Depends only on the stream, so all effort profiles share the draws.
pub fn draw_peers(n: usize, rounds: usize, stream: &RngStream) -> Vec<Vec<usize>> {
    (0..rounds)
        .map(|r| {
            let mut rng = stream.child(&format!("round-{r}")).rng();
            (0..n)
                .map(|k| {
                    let j = rng.random_range(0..n - 1);
                    if j >= k {
                        j + 1
                    } else {
                        j
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-round single-peer payments and utilities as trace rows, preceded by
/// each agent's effort, distance, expected utility and the spread of its
/// payment over peer choice.
fn utility_rows(
    profiles: &[AgentProfile],
    efforts: &[f64],
    mech: &MechanismConfig,
    peer_draws: &[Vec<usize>],
    e: usize,
) -> Result<Vec<TraceRow>> {
    let n = profiles.len();
    let deltas: Vec<f64> = profiles
        .iter()
        .zip(efforts)
        .map(|(p, &x)| p.delta(x))
        .collect();
    let costs: Vec<f64> = profiles
        .iter()
        .zip(efforts)
        .map(|(p, &x)| cost(x, p, mech))
        .collect();
    let mut rows = Vec::new();
    for k in 0..n {
        let pays = (0..n)
            .filter(|&j| j != k)
            .map(|j| payment(deltas[k], deltas[j], mech))
            .collect::<fedgame_core::Result<Vec<_>>>()?;
        let (mean, sd) = mean_std_population(&pays);
        push(&mut rows, 0, 0, Some(k), "effort", efforts[k]);
        push(&mut rows, 0, 0, Some(k), "delta", deltas[k]);
        push(&mut rows, 0, 0, Some(k), "cost", costs[k]);
        push(
            &mut rows,
            0,
            0,
            Some(k),
            "expected_utility",
            mean - costs[k],
        );
        push(&mut rows, 0, 0, Some(k), "payment_sd", sd);
    }
    for (r, draw) in peer_draws.iter().enumerate() {
        for k in 0..n {
            let j = draw[k];
            let pay = payment(deltas[k], deltas[j], mech)?;
            let epoch = (r + 1) * e;
            push(&mut rows, r, epoch, Some(k), "peer", j as f64);
            push(&mut rows, r, epoch, Some(k), "payment", pay);
            push(&mut rows, r, epoch, Some(k), "utility", pay - costs[k]);
        }
    }
    Ok(rows)
}

/// Partitions whose distance to uniform matches each agent's `delta(e)`.
fn effort_specs(cfg: &RunConfig, deltas: &[f64]) -> Vec<PartitionSpec> {
    let base = &cfg.data.partition;
    let shift = 1.0 / cfg.hyper.num_classes_I as f64;
    deltas
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let mut s =
                PartitionSpec::majority_longtail((d + shift).min(1.0), 1.0, base.majority_class);
            if cfg.data.rotate_majority {
                s.majority_class = (base.majority_class + k) % cfg.hyper.num_classes_I;
            }
            s
        })
        .collect()
}

fn peer_stream(cfg: &RunConfig, rep: usize) -> RngStream {
    RngStream::new(
        cfg.experiment.peer_seed.wrapping_add(rep as u64),
        "peer-selection",
    )
}

struct SimJob {
    point: usize,
    prefix: String,
    efforts: Vec<f64>,
    seed: u64,
    rep: usize,
    extra: Vec<(&'static str, String)>,
}

fn run_sim_jobs(
    kind: PlanKind,
    cfg: &RunConfig,
    game: &GameSolution,
    jobs: Vec<SimJob>,
    exec: &(impl Executor + Sync),
) -> Result<(Vec<NamedTrace>, Vec<DatasetFingerprint>)> {
    let e = cfg.hyper.local_epochs_E;
    let n = game.profiles.len();
    let results: Vec<(Vec<NamedTrace>, Vec<DatasetFingerprint>)> = jobs
        .par_iter()
        .map(|job| {
            let mut base = vec![
                ("plan", kind.name().to_string()),
                ("point", job.point.to_string()),
                ("seed", job.seed.to_string()),
                ("window", cfg.experiment.window.to_string()),
                ("q", game.mechanism.q.to_string()),
            ];
            base.extend(job.extra.iter().cloned());
            let mut out = Vec::new();
            let mut fps = Vec::new();
            if cfg.experiment.train {
                let deltas: Vec<f64> = game
                    .profiles
                    .iter()
                    .zip(&job.efforts)
                    .map(|(p, &x)| p.delta(x))
                    .collect();
                let bundle = build_data(cfg, &effort_specs(cfg, &deltas), job.seed)?;
                let trace = train_bundle(cfg, &bundle, job.seed, exec)?;
                let name = format!("{}train-seed{}", job.prefix, job.seed);
                let mut m = base.clone();
                m.push(("kind", "training".into()));
                out.push(NamedTrace {
                    file: TraceFile::from_trace(&trace, meta(&m)),
                    name: name.clone(),
                });
                fps = bundle.fingerprints(&name);
            }
            let draws = draw_peers(n, cfg.hyper.rounds_T, &peer_stream(cfg, job.rep));
            let rows = utility_rows(&game.profiles, &job.efforts, &game.mechanism, &draws, e)?;
            let mut m = base;
            m.push(("kind", "utility".into()));
            out.push(NamedTrace {
                file: TraceFile {
                    meta: meta(&m),
                    rows,
                },
                name: format!("{}utility-seed{}", job.prefix, job.seed),
            });
            Ok((out, fps))
        })
        .collect::<Result<_>>()?;
    let (t, d): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((
        t.into_iter().flatten().collect(),
        d.into_iter().flatten().collect(),
    ))
}

fn run_equilibrium_sim(cfg: &RunConfig, exec: &(impl Executor + Sync)) -> Result<PlanRun> {
    let game = solve_game(cfg)?;
    let jobs = seeds(cfg)
        .into_iter()
        .enumerate()
        .map(|(rep, seed)| SimJob {
            point: 0,
            prefix: String::new(),
            efforts: game.efforts.clone(),
            seed,
            rep,
            extra: vec![],
        })
        .collect();
    let (traces, datasets) = run_sim_jobs(PlanKind::EquilibriumSim, cfg, &game, jobs, exec)?;
    Ok(PlanRun {
        kind: PlanKind::EquilibriumSim,
        traces,
        datasets,
        game: Some(game),
    })
}

/// The configured grid plus the equilibrium effort, in that order.
pub fn deviation_points(grid: &[f64], e_star: f64) -> Vec<(f64, bool)> {
    let mut pts: Vec<(f64, bool)> = grid.iter().map(|&g| (g, false)).collect();
    pts.push((e_star, true));
    pts
}

fn run_deviation_study(cfg: &RunConfig, exec: &(impl Executor + Sync)) -> Result<PlanRun> {
    let game = solve_game(cfg)?;
    let dev = cfg.experiment.deviator;
    let mut jobs = Vec::new();
    for (i, (effort, is_eq)) in deviation_points(&cfg.experiment.deviation_grid, game.efforts[dev])
        .into_iter()
        .enumerate()
    {
        for (rep, seed) in seeds(cfg).into_iter().enumerate() {
            let mut efforts = game.efforts.clone();
            efforts[dev] = effort;
            jobs.push(SimJob {
                point: i,
                prefix: format!("point{i}-"),
                efforts,
                seed,
                rep,
                extra: vec![
                    ("deviator", dev.to_string()),
                    ("effort", effort.to_string()),
                    ("equilibrium", (is_eq as u8).to_string()),
                ],
            });
        }
    }
    let (traces, datasets) = run_sim_jobs(PlanKind::DeviationStudy, cfg, &game, jobs, exec)?;
    Ok(PlanRun {
        kind: PlanKind::DeviationStudy,
        traces,
        datasets,
        game: Some(game),
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, v.sqrt())
}

fn mean_std_population(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Trailing `window`-round moving averages, one per round from `window - 1` on.
pub fn moving_averages(xs: &[f64], window: usize) -> Vec<f64> {
    xs.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Mean of the non-overlapping complete `window`-round block averages.
pub fn block_mean(xs: &[f64], window: usize) -> f64 {
    let blocks: Vec<f64> = xs
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    blocks.iter().sum::<f64>() / blocks.len() as f64
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den.abs()
    }
}

fn meta_value<T: std::str::FromStr>(t: &TraceFile, key: &str) -> Result<T> {
    let raw = t
        .meta
        .get(key)
        .ok_or_else(|| HarnessError::format("trace", format!("metadata lacks `{key}`")))?;
    raw.parse().map_err(|_| {
        HarnessError::format(
            "trace",
            format!("metadata `{key}` = {raw:?} does not parse"),
        )
    })
}

fn sorted_by_point(traces: &[TraceFile], kind: &str) -> Result<Vec<TraceFile>> {
    let mut keyed = traces
        .iter()
        .filter(|t| t.meta.get("kind").is_some_and(|k| k == kind))
        .map(|t| {
            Ok((
                (
                    meta_value::<usize>(t, "point")?,
                    meta_value::<u64>(t, "seed")?,
                ),
                t.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, t)| t).collect())
}

fn group_by_point(traces: Vec<TraceFile>) -> Result<Vec<Vec<TraceFile>>> {
    let mut groups: Vec<(usize, Vec<TraceFile>)> = Vec::new();
    for t in traces {
        let p: usize = meta_value(&t, "point")?;
        match groups.last_mut() {
            Some((q, g)) if *q == p => g.push(t),
            _ => groups.push((p, vec![t])),
        }
    }
    Ok(groups.into_iter().map(|(_, g)| g).collect())
}

/// Values of `metric` keyed by `(round, agent)`.
fn by_round_agent(t: &TraceFile, metric: &str) -> BTreeMap<(usize, Option<usize>), f64> {
    t.metric(metric)
        .map(|r| ((r.round, r.agent_id), r.value))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seeds: usize,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub axis: String,
    pub value: f64,
    pub epoch: usize,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub divergence_checked: usize,
    pub divergence_violations: usize,
    pub max_divergence_ratio: f64,
    pub grad_gap_checked: usize,
    pub grad_gap_violations: usize,
    pub max_grad_gap_ratio: f64,
    pub max_sample_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub curves: Vec<CurveRow>,
    pub compliance: Vec<ComplianceRow>,
}

pub fn sweep_summary(traces: &[TraceFile]) -> Result<SweepSummary> {
    let mut out = SweepSummary {
        rows: vec![],
        curves: vec![],
        compliance: vec![],
    };
    for group in group_by_point(sorted_by_point(traces, "training")?)? {
        let axis: String = meta_value(&group[0], "axis")?;
        let value: f64 = meta_value(&group[0], "value")?;
        let sums: Vec<_> = group.iter().map(summarize).collect();
        let acc: Vec<f64> = sums.iter().map(|s| s.final_test_accuracy).collect();
        let loss: Vec<f64> = sums.iter().map(|s| s.final_test_loss).collect();
        let (ma, sa) = mean_std(&acc);
        let (ml, sl) = mean_std(&loss);
        out.rows.push(SweepRow {
            axis: axis.clone(),
            value,
            seeds: group.len(),
            mean_final_accuracy: ma,
            std_final_accuracy: sa,
            mean_final_loss: ml,
            std_final_loss: sl,
        });
        let mut curves: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in &group {
            for r in t.metric("test_accuracy").filter(|r| r.agent_id.is_none()) {
                curves.entry(r.epoch).or_default().push(r.value);
            }
        }
        for (epoch, xs) in curves {
            let (m, s) = mean_std(&xs);
            out.curves.push(CurveRow {
                axis: axis.clone(),
                value,
                epoch,
                mean_test_accuracy: m,
                std_test_accuracy: s,
            });
        }
        for (t, s) in group.iter().zip(&sums) {
            out.compliance.push(ComplianceRow {
                axis: axis.clone(),
                value,
                seed: meta_value(t, "seed")?,
                divergence_checked: s.divergence_checked,
                divergence_violations: s.divergence_violations,
                max_divergence_ratio: s.max_divergence_ratio,
                grad_gap_checked: s.grad_gap_checked,
                grad_gap_violations: s.grad_gap_violations,
                max_grad_gap_ratio: s.max_grad_gap_ratio,
                max_sample_grad_norm: s.max_sample_grad_norm,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRoundRow {
    pub round: usize,
    pub mean_accuracy_low: f64,
    pub mean_accuracy_high: f64,
    pub mean_loss_gap: f64,
    pub max_abs_loss_gap: f64,
    pub min_gap_bound: f64,
    pub upsilon_exact_positive: bool,
    pub low_ahead: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerGapSummary {
    pub seeds: usize,
    pub delta_low: f64,
    pub delta_high: f64,
    pub burn_in: usize,
    pub rounds_compared: usize,
    pub rounds_low_ahead: usize,
    pub fraction_low_ahead: f64,
    pub bound_checked: usize,
    pub bound_violations: usize,
    /// Checks restricted to rounds whose exact Upsilon is positive.
    pub exact_bound_checked: usize,
    pub exact_bound_violations: usize,
    pub upsilon_fallback_rounds: usize,
}

pub fn peer_gap_summary(traces: &[TraceFile]) -> Result<(PeerGapSummary, Vec<PeerRoundRow>)> {
    let traces = sorted_by_point(traces, "training")?;
    let first = traces
        .first()
        .ok_or_else(|| HarnessError::format("trace", "peer_gap needs at least one trace"))?;
    let burn_in: usize = meta_value(first, "burn_in")?;
    let maps: Vec<_> = traces
        .iter()
        .map(|t| {
            (
                by_round_agent(t, "local_test_accuracy"),
                by_round_agent(t, "loss_gap"),
                by_round_agent(t, "gap_bound"),
                by_round_agent(t, "upsilon_exact_positive"),
            )
        })
        .collect();
    let rounds: usize = maps[0].1.len();
    let mut rows = Vec::with_capacity(rounds);
    let (mut checked, mut viol, mut ex_checked, mut ex_viol, mut fallback) = (0, 0, 0, 0, 0);
    for r in 0..rounds {
        let get = |m: &BTreeMap<(usize, Option<usize>), f64>, a: Option<usize>| {
            m.get(&(r, a)).copied().unwrap_or(f64::NAN)
        };
        let lo: Vec<f64> = maps.iter().map(|m| get(&m.0, Some(0))).collect();
        let hi: Vec<f64> = maps.iter().map(|m| get(&m.0, Some(1))).collect();
        let gaps: Vec<f64> = maps.iter().map(|m| get(&m.1, None)).collect();
        let bounds: Vec<f64> = maps.iter().map(|m| get(&m.2, None)).collect();
        let exact = maps.iter().all(|m| get(&m.3, None) == 1.0);
        for (g, b) in gaps.iter().zip(&bounds) {
            checked += 1;
            let bad = g.is_nan() || g.abs() > *b;
            viol += bad as usize;
            if exact {
                ex_checked += 1;
                ex_viol += bad as usize;
            }
        }
        fallback += (!exact) as usize;
        let (ml, mh) = (mean_std(&lo).0, mean_std(&hi).0);
        rows.push(PeerRoundRow {
            round: r,
            mean_accuracy_low: ml,
            mean_accuracy_high: mh,
            mean_loss_gap: mean_std(&gaps).0,
            max_abs_loss_gap: gaps.iter().map(|g| g.abs()).fold(0.0, f64::max),
            min_gap_bound: bounds.iter().copied().fold(f64::INFINITY, f64::min),
            upsilon_exact_positive: exact,
            low_ahead: ml > mh,
        });
    }
    let compared: Vec<&PeerRoundRow> = rows.iter().filter(|r| r.round >= burn_in).collect();
    let ahead = compared.iter().filter(|r| r.low_ahead).count();
    let summary = PeerGapSummary {
        seeds: traces.len(),
        delta_low: meta_value(first, "delta_low")?,
        delta_high: meta_value(first, "delta_high")?,
        burn_in,
        rounds_compared: compared.len(),
        rounds_low_ahead: ahead,
        fraction_low_ahead: ahead as f64 / compared.len().max(1) as f64,
        bound_checked: checked,
        bound_violations: viol,
        exact_bound_checked: ex_checked,
        exact_bound_violations: ex_viol,
        upsilon_fallback_rounds: fallback,
    };
    Ok((summary, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub point: usize,
    pub seed: u64,
    pub round: usize,
    pub agent: usize,
    pub utility: f64,
    /// Trailing window average; empty for the first `window - 1` rounds.
    pub moving_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentUtilitySummary {
    pub agent: usize,
    pub effort: f64,
    pub delta: f64,
    pub expected_utility: f64,
    pub mean_utility: f64,
    /// Stdev of the moving averages over all seeds and rounds.
    pub window_std: f64,
    pub window_cv: f64,
    /// Stdev of the single-peer payment over peer choice, relative to the
    /// expected utility.
    pub single_peer_cv: f64,
    pub below_spread: bool,
}

/// Per-seed utility series of every agent, plus the static per-agent rows.
struct UtilitySeries {
    point: usize,
    seed: u64,
    window: usize,
    utilities: Vec<Vec<f64>>,
    statics: BTreeMap<(&'static str, usize), f64>,
    meta: BTreeMap<String, String>,
}

fn utility_series(traces: &[TraceFile]) -> Result<Vec<UtilitySeries>> {
    sorted_by_point(traces, "utility")?
        .into_iter()
        .map(|t| {
            let n = t.metric("effort").count();
            let mut utilities = vec![Vec::new(); n];
            for r in t.metric("utility") {
                let k = r
                    .agent_id
                    .ok_or_else(|| HarnessError::format("trace", "utility row without agent"))?;
                utilities
                    .get_mut(k)
                    .ok_or_else(|| {
                        HarnessError::format("trace", format!("utility row for unknown agent {k}"))
                    })?
                    .push(r.value);
            }
            let mut statics = BTreeMap::new();
            for name in ["effort", "delta", "expected_utility", "payment_sd"] {
                for r in t.metric(name) {
                    if let Some(k) = r.agent_id {
                        statics.insert((name, k), r.value);
                    }
                }
            }
            Ok(UtilitySeries {
                point: meta_value(&t, "point")?,
                seed: meta_value(&t, "seed")?,
                window: meta_value(&t, "window")?,
                utilities,
                statics,
                meta: t.meta.clone(),
            })
        })
        .collect()
}

fn static_of(s: &UtilitySeries, name: &'static str, k: usize) -> f64 {
    s.statics.get(&(name, k)).copied().unwrap_or(f64::NAN)
}

pub fn utility_rows_table(traces: &[TraceFile]) -> Result<Vec<UtilityRow>> {
    let mut out = Vec::new();
    for s in utility_series(traces)? {
        for (k, series) in s.utilities.iter().enumerate() {
            let ma = moving_averages(series, s.window);
            for (r, &u) in series.iter().enumerate() {
                out.push(UtilityRow {
                    point: s.point,
                    seed: s.seed,
                    round: r,
                    agent: k,
                    utility: u,
                    moving_average: (r + 1 >= s.window).then(|| ma[r + 1 - s.window]),
                });
            }
        }
    }
    Ok(out)
}

pub fn equilibrium_summary(traces: &[TraceFile]) -> Result<Vec<AgentUtilitySummary>> {
    let series = utility_series(traces)?;
    let first = series.first().ok_or_else(|| {
        HarnessError::format("trace", "equilibrium_sim needs at least one utility trace")
    })?;
    let n = first.utilities.len();
    (0..n)
        .map(|k| {
            let all: Vec<f64> = series
                .iter()
                .flat_map(|s| s.utilities[k].iter().copied())
                .collect();
            let mas: Vec<f64> = series
                .iter()
                .flat_map(|s| moving_averages(&s.utilities[k], s.window))
                .collect();
            let mean = mean_std(&all).0;
            let window_std = mean_std(&mas).1;
            let expected = static_of(first, "expected_utility", k);
            let window_cv = ratio(window_std, mean);
            let single_peer_cv = ratio(static_of(first, "payment_sd", k), expected);
            Ok(AgentUtilitySummary {
                agent: k,
                effort: static_of(first, "effort", k),
                delta: static_of(first, "delta", k),
                expected_utility: expected,
                mean_utility: mean,
                window_std,
                window_cv,
                single_peer_cv,
                below_spread: window_cv <= single_peer_cv,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub point: usize,
    pub effort: f64,
    pub is_equilibrium: bool,
    pub seeds: usize,
    /// Seed mean of the deviator's window-averaged utility.
    pub mean_utility: f64,
    pub std_utility: f64,
    pub expected_utility: f64,
    pub best: bool,
}

pub fn deviation_summary(traces: &[TraceFile]) -> Result<Vec<DeviationRow>> {
    let series = utility_series(traces)?;
    let mut groups: Vec<Vec<&UtilitySeries>> = Vec::new();
    for s in &series {
        match groups.last_mut() {
            Some(g) if g[0].point == s.point => g.push(s),
            _ => groups.push(vec![s]),
        }
    }
    let mut rows = groups
        .iter()
        .map(|g| {
            let s0 = g[0];
            let dev: usize = s0
                .meta
                .get("deviator")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::format("trace", "metadata lacks `deviator`"))?;
            let per_seed: Vec<f64> = g
                .iter()
                .map(|s| block_mean(&s.utilities[dev], s.window))
                .collect();
            let (m, sd) = mean_std(&per_seed);
            Ok(DeviationRow {
                point: s0.point,
                effort: static_of(s0, "effort", dev),
                is_equilibrium: s0.meta.get("equilibrium").is_some_and(|v| v == "1"),
                seeds: g.len(),
                mean_utility: m,
                std_utility: sd,
                expected_utility: static_of(s0, "expected_utility", dev),
                best: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let top = rows
        .iter()
        .map(|r| r.mean_utility)
        .fold(f64::NEG_INFINITY, f64::max);
    for r in &mut rows {
        r.best = r.mean_utility >= top - 1e-12 * (1.0 + top.abs());
    }
    Ok(rows)
}

/// A rendered summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub csv: String,
    pub json: serde_json::Value,
}

pub fn table<T: Serialize>(name: &'static str, rows: &[T]) -> Result<Table> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| HarnessError::format(name, e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::format(name, e.to_string()))?;
    let csv = String::from_utf8(bytes).map_err(|e| HarnessError::format(name, e.to_string()))?;
    let json = serde_json::to_value(rows).map_err(|e| HarnessError::format(name, e.to_string()))?;
    Ok(Table { name, csv, json })
}

/// Summary tables of a plan; the first one is `summary`.
pub fn summarize_plan(kind: PlanKind, traces: &[TraceFile]) -> Result<Vec<Table>> {
    match kind {
        PlanKind::NoniidSweep => {
            let s = sweep_summary(traces)?;
            Ok(vec![
                table("summary", &s.rows)?,
                table("curves", &s.curves)?,
                table("compliance", &s.compliance)?,
            ])
        }
        PlanKind::BoundVerify => {
            let s = sweep_summary(traces)?;
            Ok(vec![
                table("summary", &s.compliance)?,
                table("accuracy", &s.rows)?,
            ])
        }
        PlanKind::PeerGap => {
            let (s, rows) = peer_gap_summary(traces)?;
            Ok(vec![table("summary", &[s])?, table("rounds", &rows)?])
        }
        PlanKind::EquilibriumSim => Ok(vec![
            table("summary", &equilibrium_summary(traces)?)?,
            table("utilities", &utility_rows_table(traces)?)?,
        ]),
        PlanKind::DeviationStudy => Ok(vec![
            table("summary", &deviation_summary(traces)?)?,
            table("utilities", &utility_rows_table(traces)?)?,
        ]),
    }
}

/// Infers the plan from the traces' metadata.
pub fn plan_of(traces: &[TraceFile]) -> Result<PlanKind> {
    let names: std::collections::BTreeSet<&str> = traces
        .iter()
        .filter_map(|t| t.meta.get("plan").map(String::as_str))
        .collect();
    match names.into_iter().collect::<Vec<_>>().as_slice() {
        [one] => PlanKind::from_name(one)
            .ok_or_else(|| HarnessError::format("trace", format!("unknown plan `{one}`"))),
        [] => Err(HarnessError::format("trace", "no trace names its plan")),
        many => Err(HarnessError::format(
            "trace",
            format!("traces mix plans {many:?}"),
        )),
    }
}
