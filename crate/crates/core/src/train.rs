//! FedAvg with per-sample clipped local SGD and per-epoch diagnostics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::bounds::{divergence_bound, grad_variance_bound};
use crate::config::{learning_rate, HyperParams};
use crate::data::LabeledDataset;
use crate::dist::{wasserstein_delta, LabelDistribution};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams, ModelShape};
use crate::rng::RngStream;

/// A per-sample differentiable loss over `len()` samples.
#[allow(clippy::len_without_is_empty)]
pub trait Objective {
    fn param_len(&self) -> usize;
    fn len(&self) -> usize;
    /// Number of label classes used by the class-conditional decomposition.
    fn classes(&self) -> usize {
        1
    }
    fn label(&self, _i: usize) -> usize {
        0
    }
    /// Loss of sample `i` at `params`; overwrites `grad`. The flag reports a
    /// correct prediction where that makes sense.
    fn sample(&self, params: &[f64], i: usize, grad: &mut [f64]) -> (f64, bool);
}

/// Regularized cross-entropy over a dataset, optionally restricted to a
/// subset of its rows.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy<'a> {
    pub shape: ModelShape,
    pub data: &'a LabeledDataset,
    pub mu: f64,
    pub rows: Option<&'a [usize]>,
}

impl<'a> CrossEntropy<'a> {
    pub fn new(shape: ModelShape, data: &'a LabeledDataset, mu: f64) -> Self {
        CrossEntropy {
            shape,
            data,
            mu,
            rows: None,
        }
    }

    fn row(&self, i: usize) -> usize {
        self.rows.map_or(i, |r| r[i])
    }
}

impl Objective for CrossEntropy<'_> {
    fn param_len(&self) -> usize {
        self.shape.param_len()
    }

    fn len(&self) -> usize {
        self.rows.map_or(self.data.len(), |r| r.len())
    }

    fn classes(&self) -> usize {
        self.data.classes()
    }

    fn label(&self, i: usize) -> usize {
        self.data.label(self.row(i))
    }

    fn sample(&self, params: &[f64], i: usize, grad: &mut [f64]) -> (f64, bool) {
        let r = self.row(i);
        let y = self.data.label(r);
        let (loss, pred) = self
            .shape
            .sample_loss_grad(params, self.data.row(r), y, self.mu, grad);
        (loss, pred == y)
    }
}

/// `1/2 ||w - target||^2` as a single-sample objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub target: Vec<f64>,
}

impl Objective for Quadratic {
    fn param_len(&self) -> usize {
        self.target.len()
    }

    fn len(&self) -> usize {
        1
    }

    fn sample(&self, params: &[f64], _i: usize, grad: &mut [f64]) -> (f64, bool) {
        let mut loss = 0.0;
        for ((g, w), t) in grad.iter_mut().zip(params).zip(&self.target) {
            *g = w - t;
            loss += 0.5 * *g * *g;
        }
        (loss, false)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scales `g` onto the ball of radius `bound`; returns whether it was clipped.
pub fn clip(g: &mut [f64], bound: f64) -> bool {
    let n = norm(g);
    if n > bound {
        let s = bound / n;
        g.iter_mut().for_each(|x| *x *= s);
        true
    } else {
        false
    }
}

/// Mean clipped gradient per label class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGradients {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub clipped: usize,
    pub max_raw_norm: f64,
}

impl ClassGradients {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `sum_i weight_i * mean_i`.
    pub fn combine(&self, label_weights: &[f64]) -> Vec<f64> {
        let len = self.means.first().map_or(0, |m| m.len());
        let mut out = vec![0.0; len];
        for (m, &w) in self.means.iter().zip(label_weights) {
            if w != 0.0 {
                out.iter_mut().zip(m).for_each(|(o, x)| *o += w * x);
            }
        }
        out
    }

    pub fn empirical_weights(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Per-class averages of per-sample gradients clipped at `g_bound`.
pub fn class_gradients(
    params: &[f64],
    obj: &impl Objective,
    g_bound: f64,
    epoch: usize,
) -> Result<ClassGradients> {
    let p = obj.param_len();
    if params.len() != p {
        return Err(Error::Dimension {
            expected: p,
            actual: params.len(),
        });
    }
    let c = obj.classes();
    let mut sums = vec![vec![0.0; p]; c];
    let mut counts = vec![0usize; c];
    let mut g = vec![0.0; p];
    let (mut loss, mut correct, mut clipped, mut max_raw) = (0.0, 0usize, 0usize, 0.0f64);
    for i in 0..obj.len() {
        let (l, ok) = obj.sample(params, i, &mut g);
        if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFault {
                what: "gradient",
                epoch,
            });
        }
        max_raw = max_raw.max(norm(&g));
        if clip(&mut g, g_bound) {
            clipped += 1;
        }
        debug_assert!(norm(&g) <= g_bound * (1.0 + 1e-12));
        let y = obj.label(i);
        sums[y].iter_mut().zip(&g).for_each(|(s, x)| *s += x);
        counts[y] += 1;
        loss += l;
        correct += ok as usize;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    let n = obj.len().max(1) as f64;
    Ok(ClassGradients {
        means: sums,
        counts,
        mean_loss: loss / n,
        accuracy: correct as f64 / n,
        clipped,
        max_raw_norm: max_raw,
    })
}

/// Clipped full-batch gradient of `obj`, assembled from the class means
/// weighted by the empirical label frequencies.
pub fn local_gradient(
    params: &[f64],
    obj: &impl Objective,
    g_bound: f64,
    epoch: usize,
) -> Result<(Vec<f64>, ClassGradients)> {
    let cg = class_gradients(params, obj, g_bound, epoch)?;
    let g = cg.combine(&cg.empirical_weights());
    Ok((g, cg))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub max_raw_norm: f64,
    pub clipped: usize,
}

/// One SGD step `w <- w - eta * g` with `g` the label-weighted clipped
/// gradient of `obj` at `w`.
pub fn local_sgd_step(
    params: &mut [f64],
    obj: &impl Objective,
    eta: f64,
    g_bound: f64,
    epoch: usize,
) -> Result<StepStats> {
    if !(eta > 0.0) {
        return Err(Error::Domain {
            what: "eta",
            value: eta,
            domain: "(0, inf)",
        });
    }
    if !(g_bound > 0.0) {
        return Err(Error::Domain {
            what: "G",
            value: g_bound,
            domain: "(0, inf)",
        });
    }
    let (g, cg) = local_gradient(params, obj, g_bound, epoch)?;
    for (w, d) in params.iter_mut().zip(&g) {
        *w -= eta * d;
    }
    if params.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFault {
            what: "parameters",
            epoch,
        });
    }
    Ok(StepStats {
        loss: cg.mean_loss,
        accuracy: cg.accuracy,
        grad_norm: norm(&g),
        max_raw_norm: cg.max_raw_norm,
        clipped: cg.clipped,
    })
}

fn check_weights(count: usize, weights: &[f64]) -> Result<()> {
    if count != weights.len() {
        return Err(Error::Dimension {
            expected: count,
            actual: weights.len(),
        });
    }
    if count == 0 {
        return Err(Error::config("weights", "no models to aggregate"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::config("weights", "must be non-negative"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "weights",
            format!("sum to {s}, expected 1 within 1e-9"),
        ));
    }
    Ok(())
}

/// Entry-wise weighted average of flat parameter vectors.
pub fn aggregate<M: AsRef<[f64]>>(models: &[M], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(models.len(), weights)?;
    let len = models[0].as_ref().len();
    let mut out = vec![0.0; len];
    for (m, &w) in models.iter().zip(weights) {
        let m = m.as_ref();
        if m.len() != len {
            return Err(Error::Dimension {
                expected: len,
                actual: m.len(),
            });
        }
        out.iter_mut().zip(m).for_each(|(o, x)| *o += w * x);
    }
    Ok(out)
}

/// `sum_k p_k ||w_bar - w_k||^2`.
pub fn measure_divergence<M: AsRef<[f64]>>(models: &[M], weights: &[f64]) -> Result<f64> {
    let avg = aggregate(models, weights)?;
    Ok(models
        .iter()
        .zip(weights)
        .map(|(m, p)| p * sq_dist(&avg, m.as_ref()))
        .sum())
}

/// `||grad F_k - grad F||^2` per agent, with `grad F_k = sum_i p_k(i) g_i`
/// over shared class gradients `g_i` and `grad F = sum_k p_k grad F_k`.
pub fn gradient_gaps(
    class_grads: &[Vec<f64>],
    dists: &[LabelDistribution],
    weights: &[f64],
) -> Result<Vec<f64>> {
    check_weights(dists.len(), weights)?;
    let combine = |lw: &[f64]| -> Vec<f64> {
        let len = class_grads.first().map_or(0, |g| g.len());
        let mut out = vec![0.0; len];
        for (g, &w) in class_grads.iter().zip(lw) {
            out.iter_mut().zip(g).for_each(|(o, x)| *o += w * x);
        }
        out
    };
    for d in dists {
        if d.len() != class_grads.len() {
            return Err(Error::Dimension {
                expected: class_grads.len(),
                actual: d.len(),
            });
        }
    }
    let per_agent: Vec<Vec<f64>> = dists.iter().map(|d| combine(d.probs())).collect();
    let global = aggregate(&per_agent, weights)?;
    Ok(per_agent.iter().map(|g| sq_dist(g, &global)).collect())
}

/// Gradient-gap diagnostics at one shared model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientGapReport {
    /// Gaps from the class-conditional decomposition over the pooled data.
    pub gaps: Vec<f64>,
    /// `delta_k` of each agent's label distribution against the weighted mixture.
    pub mixture_deltas: Vec<f64>,
    /// `4 G^2 delta_k^2` for the entries of `mixture_deltas`.
    pub bounds: Vec<f64>,
    /// Gaps between agents' own full clipped gradients and their weighted mean.
    pub direct_gaps: Vec<f64>,
    /// Norm of each agent's own clipped gradient.
    pub raw_norms: Vec<f64>,
    /// Largest unclipped per-sample gradient norm seen per agent.
    pub max_sample_norms: Vec<f64>,
}

/// Measures gradient gaps at the shared point `params`.
pub fn measure_gradient_gap(
    shape: ModelShape,
    params: &[f64],
    datasets: &[&LabeledDataset],
    weights: &[f64],
    mu: f64,
    g_bound: f64,
    epoch: usize,
) -> Result<GradientGapReport> {
    check_weights(datasets.len(), weights)?;
    let pool = LabeledDataset::concat(datasets)?;
    let pooled = class_gradients(params, &CrossEntropy::new(shape, &pool, mu), g_bound, epoch)?;
    let dists: Vec<LabelDistribution> = datasets
        .iter()
        .map(|d| d.empirical_dist().clone())
        .collect();
    let gaps = gradient_gaps(&pooled.means, &dists, weights)?;
    let mixture = LabelDistribution::mixture(&dists, weights)?;
    let mixture_deltas = dists
        .iter()
        .map(|d| wasserstein_delta(d, &mixture))
        .collect::<Result<Vec<_>>>()?;
    let bounds = mixture_deltas
        .iter()
        .map(|&d| grad_variance_bound(d, g_bound))
        .collect();

    let mut own = Vec::with_capacity(datasets.len());
    let mut max_sample_norms = Vec::with_capacity(datasets.len());
    for d in datasets {
        let (g, cg) = local_gradient(params, &CrossEntropy::new(shape, d, mu), g_bound, epoch)?;
        max_sample_norms.push(cg.max_raw_norm);
        own.push(g);
    }
    let mean = aggregate(&own, weights)?;
    Ok(GradientGapReport {
        gaps,
        mixture_deltas,
        bounds,
        direct_gaps: own.iter().map(|g| sq_dist(g, &mean)).collect(),
        raw_norms: own.iter().map(|g| norm(g)).collect(),
        max_sample_norms,
    })
}

/// Variance of the clipped per-sample gradient around its mean, divided by
/// the number of samples: the noise of the full working-set gradient as an
/// estimate of the local population gradient.
pub fn estimate_local_variance(params: &[f64], obj: &impl Objective, g_bound: f64) -> Result<f64> {
    let (mean, _) = local_gradient(params, obj, g_bound, 0)?;
    let mut g = vec![0.0; obj.param_len()];
    let mut acc = 0.0;
    for i in 0..obj.len() {
        obj.sample(params, i, &mut g);
        clip(&mut g, g_bound);
        acc += sq_dist(&g, &mean);
    }
    let n = obj.len() as f64;
    Ok(acc / (n * n))
}

/// Runs one closure per agent. Results come back in agent order whatever
/// the execution order.
pub trait Executor {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs agents one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hp: HyperParams,
    pub arch: Architecture,
    /// Samples each agent draws from its partition at the start of a round.
    pub working_set: usize,
    /// Mini-batch size per local step; the whole working set when absent.
    pub batch_size: Option<usize>,
    /// Measure gradient gaps at every aggregation epoch.
    pub gradient_gaps: bool,
    /// Evaluate every local model on the test set before aggregation.
    pub local_test_eval: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            hp: HyperParams::default(),
            arch: Architecture::Softmax,
            working_set: 500,
            batch_size: None,
            gradient_gaps: true,
            local_test_eval: true,
        }
    }
}

/// One participating agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub data: LabeledDataset,
    pub weight: f64,
    /// Root of the agent's resampling and batching streams.
    pub stream: RngStream,
}

/// Everything a run consumes besides the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub agents: Vec<Agent>,
    /// Held-out data standing in for `D_c`.
    pub test: LabeledDataset,
    /// Label distribution `p^(c)` used for the per-agent `delta_k`.
    pub reference: LabelDistribution,
    /// Stream for model initialization.
    pub init_stream: RngStream,
}

impl TrainingSetup {
    /// Agents with uniform weights and streams `resample/agent-k` under `seed`.
    pub fn new(
        partitions: Vec<LabeledDataset>,
        test: LabeledDataset,
        reference: LabelDistribution,
        seed: u64,
    ) -> Self {
        let n = partitions.len().max(1);
        let agents = partitions
            .into_iter()
            .enumerate()
            .map(|(k, data)| Agent {
                data,
                weight: 1.0 / n as f64,
                stream: RngStream::indexed(seed, "resample", k),
            })
            .collect();
        TrainingSetup {
            agents,
            test,
            reference,
            init_stream: RngStream::new(seed, "init"),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.weight).collect()
    }
}

/// State of global epoch `t`. Records at multiples of `E` hold the freshly
/// aggregated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub round: usize,
    pub eta: f64,
    pub aggregation: bool,
    /// Working-set loss and accuracy of each agent's model at this epoch.
    pub agent_loss: Vec<f64>,
    pub agent_accuracy: Vec<f64>,
    /// `sum_k p_k ||w_bar_t - w_t^k||^2`.
    pub divergence: f64,
    pub divergence_bound: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub gradient_gap: Option<GradientGapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `delta_k` of each working set against the reference distribution.
    pub deltas: Vec<f64>,
    /// Divergence of the local models after `E` steps, just before averaging.
    pub pre_aggregation_divergence: f64,
    /// `F_c` loss and accuracy of each local model before averaging.
    pub local_test_loss: Vec<f64>,
    pub local_test_accuracy: Vec<f64>,
    /// Largest `||g_{j+1} - g_j|| / ||w_{j+1} - w_j||` over the round's local steps.
    pub empirical_lipschitz: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    pub final_model: ModelParams,
    pub weights: Vec<f64>,
}

impl TrainingTrace {
    pub fn final_test(&self) -> Option<(f64, f64)> {
        let last = self.epochs.last()?;
        Some((last.test_loss?, last.test_accuracy?))
    }

    /// Test accuracy after each aggregation, starting from the initial model.
    pub fn test_accuracy_curve(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.test_accuracy).collect()
    }

    pub fn max_divergence_ratio(&self) -> f64 {
        self.epochs
            .iter()
            .filter(|e| e.divergence > 0.0)
            .map(|e| e.divergence / e.divergence_bound)
            .fold(0.0, f64::max)
    }
}

struct LocalRun {
    working: LabeledDataset,
    states: Vec<Vec<f64>>,
    stats: Vec<StepStats>,
    lipschitz: f64,
    clipped: usize,
    samples: usize,
}

fn train_locally(
    cfg: &TrainingConfig,
    shape: ModelShape,
    global: &[f64],
    agent: &Agent,
    round: usize,
) -> Result<LocalRun> {
    let hp = &cfg.hp;
    let round_stream = agent.stream.child(&format!("round-{round}"));
    let working = agent
        .data
        .resample(cfg.working_set, &mut round_stream.rng())?;
    let mut w = global.to_vec();
    let mut states = Vec::with_capacity(hp.local_epochs_E);
    let mut stats = Vec::with_capacity(hp.local_epochs_E);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let (mut lipschitz, mut clipped, mut samples) = (0.0f64, 0usize, 0usize);
    for j in 0..hp.local_epochs_E {
        let t = round * hp.local_epochs_E + j;
        let rows: Option<Vec<usize>> = cfg.batch_size.filter(|&b| b < working.len()).map(|b| {
            let mut rng = round_stream.child(&format!("batch-{j}")).rng();
            index::sample(&mut rng, working.len(), b).into_vec()
        });
        let obj = CrossEntropy {
            shape,
            data: &working,
            mu: hp.mu,
            rows: rows.as_deref(),
        };
        let (g, cg) = local_gradient(&w, &obj, hp.grad_bound_G, t)?;
        if let Some((pw, pg)) = &prev {
            let dw = libm::sqrt(sq_dist(&w, pw));
            if dw > 0.0 {
                lipschitz = lipschitz.max(libm::sqrt(sq_dist(&g, pg)) / dw);
            }
        }
        let before = w.clone();
        let eta = learning_rate(t, hp);
        for (x, d) in w.iter_mut().zip(&g) {
            *x -= eta * d;
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFault {
                what: "parameters",
                epoch: t,
            });
        }
        clipped += cg.clipped;
        samples += obj.len();
        stats.push(StepStats {
            loss: cg.mean_loss,
            accuracy: cg.accuracy,
            grad_norm: norm(&g),
            max_raw_norm: cg.max_raw_norm,
            clipped: cg.clipped,
        });
        prev = Some((before, g));
        states.push(w.clone());
    }
    Ok(LocalRun {
        working,
        states,
        stats,
        lipschitz,
        clipped,
        samples,
    })
}

fn validate_setup(cfg: &TrainingConfig, setup: &TrainingSetup) -> Result<()> {
    let violations = crate::config::validate_config(&cfg.hp);
    if let Some(v) = violations
        .iter()
        .find(|v| v.severity == crate::config::Severity::Error)
    {
        return Err(Error::config(v.field.clone(), v.constraint.clone()));
    }
    if setup.agents.is_empty() {
        return Err(Error::config("agents", "at least one agent required"));
    }
    if cfg.working_set == 0 {
        return Err(Error::config("working_set", "must be >= 1"));
    }
    check_weights(setup.agents.len(), &setup.weights())?;
    let (d, c) = (setup.test.dim(), setup.test.classes());
    for a in &setup.agents {
        if a.data.dim() != d || a.data.classes() != c {
            return Err(Error::Dimension {
                expected: d,
                actual: a.data.dim(),
            });
        }
    }
    if setup.reference.len() != c {
        return Err(Error::Dimension {
            expected: c,
            actual: setup.reference.len(),
        });
    }
    Ok(())
}

/// Runs `T` FedAvg rounds of `E` local steps each and records every epoch.
pub fn run_training(
    cfg: &TrainingConfig,
    setup: &TrainingSetup,
    exec: &impl Executor,
) -> Result<TrainingTrace> {
    validate_setup(cfg, setup)?;
    let hp = &cfg.hp;
    let e = hp.local_epochs_E;
    let weights = setup.weights();
    let (dim, classes) = (setup.test.dim(), setup.test.classes());
    let mut model = match cfg.arch {
        Architecture::Softmax => ModelParams::zeros(cfg.arch, dim, classes),
        Architecture::Mlp { .. } => {
            ModelParams::random_init(cfg.arch, dim, classes, &mut setup.init_stream.rng())
        }
    };
    let shape = model.shape();
    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(hp.rounds_T * e + 1);
    let mut rounds = Vec::with_capacity(hp.rounds_T);
    let mut last_working: Vec<LabeledDataset> = Vec::new();
    let mut last_deltas: Vec<f64> = vec![0.0; weights.len()];

    for r in 0..hp.rounds_T {
        let runs: Vec<LocalRun> = exec
            .map(setup.agents.len(), |k| {
                train_locally(cfg, shape, model.flat(), &setup.agents[k], r)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let deltas = runs
            .iter()
            .map(|run| wasserstein_delta(run.working.empirical_dist(), &setup.reference))
            .collect::<Result<Vec<_>>>()?;

        // Epoch r*E: the shared model about to be trained from.
        let t0 = r * e;
        let gap = if cfg.gradient_gaps {
            let sets: Vec<&LabeledDataset> = runs.iter().map(|run| &run.working).collect();
            Some(measure_gradient_gap(
                shape,
                model.flat(),
                &sets,
                &weights,
                hp.mu,
                hp.grad_bound_G,
                t0,
            )?)
        } else {
            None
        };
        let (tl, ta) = model.evaluate(&setup.test);
        epochs.push(EpochRecord {
            epoch: t0,
            round: r,
            eta: learning_rate(t0, hp),
            aggregation: true,
            agent_loss: runs.iter().map(|run| run.stats[0].loss).collect(),
            agent_accuracy: runs.iter().map(|run| run.stats[0].accuracy).collect(),
            divergence: 0.0,
            divergence_bound: divergence_bound(hp, &deltas, &weights, t0)?.value,
            test_loss: Some(tl),
            test_accuracy: Some(ta),
            gradient_gap: gap,
        });

        for j in 1..e {
            let t = t0 + j;
            let states: Vec<&[f64]> = runs
                .iter()
                .map(|run| run.states[j - 1].as_slice())
                .collect();
            epochs.push(EpochRecord {
                epoch: t,
                round: r,
                eta: learning_rate(t, hp),
                aggregation: false,
                agent_loss: runs.iter().map(|run| run.stats[j].loss).collect(),
                agent_accuracy: runs.iter().map(|run| run.stats[j].accuracy).collect(),
                divergence: measure_divergence(&states, &weights)?,
                divergence_bound: divergence_bound(hp, &deltas, &weights, t)?.value,
                test_loss: None,
                test_accuracy: None,
                gradient_gap: None,
            });
        }

        let finals: Vec<&[f64]> = runs
            .iter()
            .map(|run| run.states[e - 1].as_slice())
            .collect();
        let pre_aggregation_divergence = measure_divergence(&finals, &weights)?;
        let (mut local_test_loss, mut local_test_accuracy) = (Vec::new(), Vec::new());
        if cfg.local_test_eval {
            for f in &finals {
                let m = ModelParams::from_flat(cfg.arch, dim, classes, f.to_vec())?;
                let (l, a) = m.evaluate(&setup.test);
                local_test_loss.push(l);
                local_test_accuracy.push(a);
            }
        }
        let samples: usize = runs.iter().map(|run| run.samples).sum();
        rounds.push(RoundRecord {
            round: r,
            deltas: deltas.clone(),
            pre_aggregation_divergence,
            local_test_loss,
            local_test_accuracy,
            empirical_lipschitz: runs.iter().map(|run| run.lipschitz).fold(0.0, f64::max),
            clipped_fraction: runs.iter().map(|run| run.clipped).sum::<usize>() as f64
                / samples.max(1) as f64,
        });
        model = ModelParams::from_flat(cfg.arch, dim, classes, aggregate(&finals, &weights)?)?;
        if !model.is_finite() {
            return Err(Error::NumericalFault {
                what: "aggregated model",
                epoch: (r + 1) * e,
            });
        }
        last_deltas = deltas;
        last_working = runs.into_iter().map(|run| run.working).collect();
    }

    // Final epoch T*E: the last aggregate, scored on the last working sets.
    let t_end = hp.rounds_T * e;
    let (tl, ta) = model.evaluate(&setup.test);
    let per_agent: Vec<(f64, f64)> = last_working.iter().map(|w| model.evaluate(w)).collect();
    let gap = match (cfg.gradient_gaps, last_working.is_empty()) {
        (true, false) => {
            let sets: Vec<&LabeledDataset> = last_working.iter().collect();
            Some(measure_gradient_gap(
                shape,
                model.flat(),
                &sets,
                &weights,
                hp.mu,
                hp.grad_bound_G,
                t_end,
            )?)
        }
        _ => None,
    };
    epochs.push(EpochRecord {
        epoch: t_end,
        round: hp.rounds_T,
        eta: learning_rate(t_end, hp),
        aggregation: true,
        agent_loss: per_agent.iter().map(|p| p.0).collect(),
        agent_accuracy: per_agent.iter().map(|p| p.1).collect(),
        divergence: 0.0,
        divergence_bound: divergence_bound(hp, &last_deltas, &weights, t_end)?.value,
        test_loss: Some(tl),
        test_accuracy: Some(ta),
        gradient_gap: gap,
    });

    Ok(TrainingTrace {
        epochs,
        rounds,
        final_model: model,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, GaussianTask};
    use crate::dist::{make_label_distribution, PartitionSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn quadratic_step() {
        let mut w = vec![0.0];
        let obj = Quadratic { target: vec![3.0] };
        local_sgd_step(&mut w, &obj, 0.1, 100.0, 0).unwrap();
        assert_relative_eq!(w[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn clipping_halves_norm_twenty() {
        // Gradient at w = 0 is (-12, -16), norm 20.
        let obj = Quadratic {
            target: vec![12.0, 16.0],
        };
        let mut w = vec![0.0, 0.0];
        let s = local_sgd_step(&mut w, &obj, 1.0, 10.0, 0).unwrap();
        assert_relative_eq!(s.grad_norm, 10.0, epsilon = 1e-12);
        assert_relative_eq!(w[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], 8.0, epsilon = 1e-12);
        assert_eq!(s.clipped, 1);
    }

    #[test]
    fn zero_gradient_leaves_model() {
        let obj = Quadratic {
            target: vec![1.5, -2.0],
        };
        let mut w = vec![1.5, -2.0];
        local_sgd_step(&mut w, &obj, 0.5, 1.0, 0).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
    }

    #[test]
    fn non_finite_gradient_is_numerical_fault() {
        let obj = Quadratic {
            target: vec![f64::NAN],
        };
        let mut w = vec![0.0];
        let err = local_sgd_step(&mut w, &obj, 0.1, 1.0, 17).unwrap_err();
        assert_eq!(
            err,
            Error::NumericalFault {
                what: "gradient",
                epoch: 17
            }
        );
    }

    #[test]
    fn rejects_bad_step_parameters() {
        let obj = Quadratic { target: vec![1.0] };
        assert!(local_sgd_step(&mut [0.0], &obj, 0.0, 1.0, 0).is_err());
        assert!(local_sgd_step(&mut [0.0], &obj, 0.1, -1.0, 0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[[0.0], [2.0]], &[0.5, 0.5]).unwrap(), vec![1.0]);
        assert_relative_eq!(
            aggregate(&[[1.0], [2.0], [4.0]], &[0.2, 0.3, 0.5]).unwrap()[0],
            2.8,
            epsilon = 1e-12
        );
        let same = [vec![0.25, -1.0], vec![0.25, -1.0]];
        assert_eq!(aggregate(&same, &[0.9, 0.1]).unwrap(), vec![0.25, -1.0]);
        assert!(matches!(
            aggregate(&[[0.0], [1.0]], &[0.5, 0.6]),
            Err(Error::Config { .. })
        ));
        assert!(aggregate(&[[0.0], [1.0]], &[1.0 + 1e-10, 0.0]).is_ok());
    }

    #[test]
    fn divergence_examples() {
        assert_eq!(
            measure_divergence(&[[3.0], [3.0]], &[0.5, 0.5]).unwrap(),
            0.0
        );
        assert_relative_eq!(
            measure_divergence(&[[0.0], [2.0]], &[0.5, 0.5]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let third = 1.0 / 3.0;
        assert_relative_eq!(
            measure_divergence(&[[0.0], [0.0], [3.0]], &[third, third, 1.0 - 2.0 * third]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_class_gap_example() {
        let g = vec![vec![1.0], vec![-1.0]];
        let d = vec![
            LabelDistribution::one_hot(2, 0).unwrap(),
            LabelDistribution::one_hot(2, 1).unwrap(),
        ];
        let gaps = gradient_gaps(&g, &d, &[0.5, 0.5]).unwrap();
        assert_eq!(gaps, vec![1.0, 1.0]);
    }

    fn gaussian(dist: &LabelDistribution, n: usize, seed: u64, id: &str) -> LabeledDataset {
        sample_dataset(dist, n, &GaussianTask::default(), &RngStream::new(seed, id)).unwrap()
    }

    #[test]
    fn shared_dataset_has_zero_gaps() {
        let u = LabelDistribution::uniform(10).unwrap();
        let ds = gaussian(&u, 200, 1, "d");
        let shape = ModelShape {
            arch: Architecture::Softmax,
            dim: 32,
            classes: 10,
        };
        let mut rng = RngStream::new(1, "w").rng();
        let w: Vec<f64> = (0..shape.param_len())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let r = measure_gradient_gap(shape, &w, &[&ds, &ds], &[0.5, 0.5], 0.01, 10.0, 0).unwrap();
        assert!(r.gaps.iter().all(|&g| g < 1e-24));
        assert!(r.direct_gaps.iter().all(|&g| g < 1e-24));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gaps_respect_clipping_and_delta_bounds(seed in 0u64..1000, g_bound in 0.1f64..5.0, delta in 0.0f64..0.9) {
            let shape = ModelShape { arch: Architecture::Softmax, dim: 32, classes: 10 };
            let a = make_label_distribution(&PartitionSpec::majority_longtail(delta, 1.0, 0), 10).unwrap();
            let b = make_label_distribution(&PartitionSpec::majority_longtail(delta, 1.0, 5), 10).unwrap();
            let da = gaussian(&a, 80, seed, "a");
            let db = gaussian(&b, 80, seed, "b");
            let mut rng = RngStream::new(seed, "w").rng();
            let w: Vec<f64> = (0..shape.param_len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let r = measure_gradient_gap(shape, &w, &[&da, &db], &[0.3, 0.7], 0.01, g_bound, 0).unwrap();
            let cap = 4.0 * g_bound * g_bound * (1.0 + 1e-12);
            for k in 0..2 {
                prop_assert!(r.gaps[k] <= cap && r.direct_gaps[k] <= cap);
                prop_assert!(r.gaps[k] <= r.bounds[k] * (1.0 + 1e-9) + 1e-15);
                prop_assert!(r.raw_norms[k] <= g_bound * (1.0 + 1e-12));
            }
        }
    }

    fn small_config(n_agents: usize, e: usize, t: usize) -> TrainingConfig {
        TrainingConfig {
            hp: HyperParams {
                local_epochs_E: e,
                rounds_T: t,
                num_agents_N: n_agents,
                ..HyperParams::default()
            },
            working_set: 100,
            ..TrainingConfig::default()
        }
    }

    fn setup(dists: &[LabelDistribution], seed: u64) -> TrainingSetup {
        let parts = dists
            .iter()
            .enumerate()
            .map(|(k, d)| gaussian(d, 300, seed, &format!("data/agent-{k}")))
            .collect();
        let u = LabelDistribution::uniform(10).unwrap();
        TrainingSetup::new(parts, gaussian(&u, 400, seed, "test"), u, seed)
    }

    fn skewed(k: usize) -> LabelDistribution {
        make_label_distribution(&PartitionSpec::majority_longtail(0.6, 1.0, k), 10).unwrap()
    }

    #[test]
    fn single_agent_never_diverges() {
        let cfg = small_config(1, 5, 3);
        let trace = run_training(&cfg, &setup(&[skewed(0)], 3), &Sequential).unwrap();
        assert_eq!(trace.epochs.len(), 16);
        assert!(trace.epochs.iter().all(|e| e.divergence == 0.0));
        assert!(trace.epochs.iter().enumerate().all(|(i, e)| e.epoch == i));
    }

    #[test]
    fn single_local_epoch_never_diverges() {
        let cfg = small_config(3, 1, 4);
        let trace = run_training(
            &cfg,
            &setup(&[skewed(0), skewed(3), skewed(6)], 4),
            &Sequential,
        )
        .unwrap();
        assert!(trace
            .epochs
            .iter()
            .all(|e| e.divergence == 0.0 && e.aggregation));
        assert!(trace
            .rounds
            .iter()
            .all(|r| r.pre_aggregation_divergence > 0.0));
    }

    #[test]
    fn identical_agents_track_each_other() {
        let cfg = small_config(2, 4, 3);
        let mut s = setup(&[skewed(2), skewed(2)], 5);
        s.agents[1].data = s.agents[0].data.clone();
        s.agents[1].stream = s.agents[0].stream.clone();
        let trace = run_training(&cfg, &s, &Sequential).unwrap();
        assert!(trace.epochs.iter().all(|e| e.divergence == 0.0));
        assert!(trace
            .rounds
            .iter()
            .all(|r| r.pre_aggregation_divergence == 0.0));
    }

    #[test]
    fn heterogeneous_divergence_stays_below_bound() {
        let cfg = small_config(3, 5, 4);
        let trace = run_training(
            &cfg,
            &setup(&[skewed(0), skewed(4), skewed(8)], 6),
            &Sequential,
        )
        .unwrap();
        let mut positive = 0;
        for e in &trace.epochs {
            assert!(e.divergence <= e.divergence_bound, "epoch {}", e.epoch);
            if e.aggregation {
                assert_eq!(e.divergence, 0.0);
            } else {
                positive += (e.divergence > 0.0) as usize;
            }
        }
        assert!(positive > 0);
        assert!(trace
            .epochs
            .iter()
            .all(|e| e.gradient_gap.is_none() == !e.aggregation));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config(2, 2, 2);
        let s = setup(&[skewed(0), skewed(5)], 8);
        assert_eq!(
            run_training(&cfg, &s, &Sequential).unwrap(),
            run_training(&cfg, &s, &Sequential).unwrap()
        );
    }

    #[test]
    fn mini_batches_and_mlp_run() {
        let mut cfg = small_config(2, 2, 2);
        cfg.batch_size = Some(32);
        cfg.arch = Architecture::Mlp { hidden: 8 };
        let trace = run_training(&cfg, &setup(&[skewed(0), skewed(5)], 9), &Sequential).unwrap();
        assert!(trace.final_model.is_finite());
    }

    #[test]
    fn iid_training_learns() {
        let u = LabelDistribution::uniform(10).unwrap();
        let cfg = small_config(2, 5, 10);
        let trace = run_training(&cfg, &setup(&[u.clone(), u], 10), &Sequential).unwrap();
        let (_, acc) = trace.final_test().unwrap();
        assert!(acc > 0.8, "accuracy {acc}");
    }
}
