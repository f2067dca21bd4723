//! TOML run configuration with `FEDGAME_*` environment overrides.
//!
//! Sections: `[hyper]` (field names of `HyperParams`), `[training]`, `[data]`,
//! `[mechanism]`, `[experiment]`. Every leaf of the fully populated tree can
//! be overridden by `FEDGAME_<SECTION>_<KEY>`, e.g. `FEDGAME_HYPER_ETA0=0.02`
//! or `FEDGAME_HYPER_SCHEDULE_KIND=decaying`. Values are parsed as TOML and
//! fall back to plain strings.

use std::path::{Path, PathBuf};

use fedgame_core::mechanism::{AgentProfile, DynamicsOptions, MechanismConfig, PaymentForm};
use fedgame_core::train::TrainingConfig;
use fedgame_core::{
    validate_config, Architecture, GaussianTask, HyperParams, LabelDistribution, PartitionSpec,
    Severity,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const ENV_PREFIX: &str = "FEDGAME_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub arch: Architecture,
    pub working_set: usize,
    pub batch_size: Option<usize>,
    pub gradient_gaps: bool,
    pub local_test_eval: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainingSection {
            arch: t.arch,
            working_set: t.working_set,
            batch_size: t.batch_size,
            gradient_gaps: t.gradient_gaps,
            local_test_eval: t.local_test_eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub task: GaussianTask,
    /// Size of each agent's partition (the pool working sets are drawn from).
    pub samples_per_agent: usize,
    pub test_samples: usize,
    /// Partition shared by all agents unless an experiment overrides it.
    pub partition: PartitionSpec,
    /// Shift the majority class by one per agent instead of sharing it.
    pub rotate_majority: bool,
    /// Reference distribution for `delta_k`; uniform when absent.
    pub reference: Option<Vec<f64>>,
    pub idx: Option<IdxPaths>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            task: GaussianTask::default(),
            samples_per_agent: 2000,
            test_samples: 2000,
            partition: PartitionSpec::default(),
            rotate_majority: false,
            reference: None,
            idx: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsSource {
    /// `hyper.phi` and `hyper.upsilon` as written.
    #[default]
    Configured,
    /// Simplified `6 E G^2` and `2 G^2 / mu`.
    Simplified,
    /// Exact sums over `E` epochs; a non-positive Upsilon falls back to the simplified value.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismSection {
    pub payment_form: PaymentForm,
    pub constants: ConstantsSource,
    pub cost_scale: f64,
    pub reward_scale: f64,
    /// Marginal cost per agent; a single entry applies to every agent.
    pub costs: Vec<f64>,
    pub delta0: f64,
    pub initial_effort: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub damping: bool,
    pub q_tol: f64,
}

impl Default for MechanismSection {
    fn default() -> Self {
        MechanismSection {
            payment_form: PaymentForm::Logarithmic,
            constants: ConstantsSource::Configured,
            cost_scale: 1.0,
            reward_scale: 1.0,
            costs: vec![1.0],
            delta0: 1.0,
            initial_effort: 0.0,
            tol: 1e-6,
            max_iters: 1000,
            damping: false,
            q_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Majority-class mass of `majority_longtail` partitions.
    #[default]
    Delta,
    /// Number of equally weighted classes per agent.
    ClassCount,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::ClassCount => "class_count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub axis: SweepAxis,
    pub deltas: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub seeds: usize,
    /// Rounds per utility average.
    pub window: usize,
    /// Majority masses of the two agents in the peer-gap study.
    pub peer_deltas: Vec<f64>,
    /// Rounds skipped before comparing the two peers.
    pub burn_in: usize,
    /// Seed of the peer-selection stream, kept apart from the training seed.
    pub peer_seed: u64,
    pub deviation_grid: Vec<f64>,
    pub deviator: usize,
    /// Train models in the equilibrium simulations (payments never depend on it).
    pub train: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            axis: SweepAxis::Delta,
            deltas: vec![0.1, 0.5, 0.9],
            class_counts: vec![10, 5, 1],
            seeds: 3,
            window: 5,
            peer_deltas: vec![0.1, 0.9],
            burn_in: 5,
            peer_seed: 0,
            deviation_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            deviator: 0,
            train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub hyper: HyperParams,
    pub training: TrainingSection,
    pub data: DataSection,
    pub mechanism: MechanismSection,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            hp: self.hyper.clone(),
            arch: self.training.arch,
            working_set: self.training.working_set,
            batch_size: self.training.batch_size,
            gradient_gaps: self.training.gradient_gaps,
            local_test_eval: self.training.local_test_eval,
        }
    }

    pub fn reference(&self) -> Result<LabelDistribution> {
        Ok(match &self.data.reference {
            Some(p) => LabelDistribution::new(p.clone())?,
            None => LabelDistribution::uniform(self.hyper.num_classes_I)?,
        })
    }

    /// Mechanism parameters with Phi and Upsilon resolved per `mechanism.constants`.
    pub fn mechanism_config(&self) -> MechanismConfig {
        use fedgame_core::bounds::{
            phi_report, upsilon_report, upsilon_with_fallback, ConstantMode,
        };
        let hp = &self.hyper;
        let e = hp.local_epochs_E;
        let (phi, upsilon) = match self.mechanism.constants {
            ConstantsSource::Configured => (hp.phi, hp.upsilon),
            ConstantsSource::Simplified => (
                phi_report(hp, ConstantMode::Simplified, e).value,
                upsilon_report(hp, ConstantMode::Simplified, e).value,
            ),
            ConstantsSource::Exact => (
                phi_report(hp, ConstantMode::Exact, e).value,
                upsilon_with_fallback(hp, e).value,
            ),
        };
        MechanismConfig {
            payment_form: self.mechanism.payment_form,
            q: hp.payment_Q,
            phi,
            upsilon,
            cost_scale: self.mechanism.cost_scale,
            reward_scale: self.mechanism.reward_scale,
            omega: hp.omega,
            bound_coeff: hp.bound_coeff,
            rounds_T: hp.rounds_T,
        }
    }

    pub fn agent_profiles(&self) -> Vec<AgentProfile> {
        let n = self.hyper.num_agents_N;
        (0..n)
            .map(|k| {
                let c = self
                    .mechanism
                    .costs
                    .get(k)
                    .or(self.mechanism.costs.last())
                    .copied()
                    .unwrap_or(1.0);
                AgentProfile {
                    effort: self.mechanism.initial_effort,
                    delta0: self.mechanism.delta0,
                    ..AgentProfile::new(k, 1.0 / n as f64, c)
                }
            })
            .collect()
    }

    pub fn dynamics_options(&self) -> DynamicsOptions {
        DynamicsOptions {
            tol: self.mechanism.tol,
            max_iters: self.mechanism.max_iters,
            damping: self.mechanism.damping,
            ..DynamicsOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let errors: Vec<String> = validate_config(&self.hyper)
            .into_iter()
            .filter(|v| v.severity == Severity::Error)
            .map(|v| format!("hyper.{}: {}", v.field, v.constraint))
            .collect();
        if !errors.is_empty() {
            return Err(HarnessError::Config(errors.join("; ")));
        }
        let ex = &self.experiment;
        if ex.seeds == 0 {
            return Err(HarnessError::Config("experiment.seeds must be >= 1".into()));
        }
        if ex.window == 0 {
            return Err(HarnessError::Config(
                "experiment.window must be >= 1".into(),
            ));
        }
        if ex.peer_deltas.len() != 2 {
            return Err(HarnessError::Config(
                "experiment.peer_deltas needs exactly two entries".into(),
            ));
        }
        if ex.deviator >= self.hyper.num_agents_N {
            return Err(HarnessError::Config(format!(
                "experiment.deviator {} not below N = {}",
                ex.deviator, self.hyper.num_agents_N
            )));
        }
        if let Some(d) = ex
            .deltas
            .iter()
            .chain(&ex.peer_deltas)
            .find(|d| !(0.0..=1.0).contains(*d))
        {
            return Err(HarnessError::Config(format!(
                "experiment delta {d} outside [0, 1]"
            )));
        }
        if let Some(e) = ex.deviation_grid.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(HarnessError::Config(format!(
                "experiment.deviation_grid effort {e} outside [0, 1]"
            )));
        }
        if let Some(&p) = ex
            .class_counts
            .iter()
            .find(|&&p| p == 0 || p > self.hyper.num_classes_I)
        {
            return Err(HarnessError::Config(format!(
                "experiment.class_counts entry {p} outside [1, I]"
            )));
        }
        if self.data.samples_per_agent == 0
            || self.data.test_samples == 0
            || self.training.working_set == 0
        {
            return Err(HarnessError::Config(
                "data sizes and training.working_set must be >= 1".into(),
            ));
        }
        if self.data.task.classes != self.hyper.num_classes_I {
            return Err(HarnessError::Config(format!(
                "data.task.classes = {} differs from hyper.num_classes_I = {}",
                self.data.task.classes, self.hyper.num_classes_I
            )));
        }
        if self.mechanism.costs.is_empty() {
            return Err(HarnessError::Config(
                "mechanism.costs needs at least one entry".into(),
            ));
        }
        self.data.partition.validate(self.hyper.num_classes_I)?;
        self.reference()?;
        self.mechanism_config().validate()?;
        for p in self.agent_profiles() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| HarnessError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        from_table(table)
    }
}

fn from_table(table: toml::Table) -> Result<RunConfig> {
    RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| HarnessError::Config(e.to_string()))
}

fn to_table(cfg: &RunConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| HarnessError::Config(e.to_string()))
}

fn leaf_paths(table: &toml::Table, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        match v {
            toml::Value::Table(t) => leaf_paths(t, prefix, out),
            _ => out.push(prefix.clone()),
        }
        prefix.pop();
    }
}

fn env_key(path: &[String]) -> String {
    format!("{ENV_PREFIX}{}", path.join("_").to_uppercase())
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) {
    match path {
        [leaf] => {
            table.insert(leaf.clone(), value);
        }
        [head, rest @ ..] => {
            if let Some(toml::Value::Table(t)) = table.get_mut(head) {
                set_path(t, rest, value);
            }
        }
        [] => {}
    }
}

/// Applies `FEDGAME_*` overrides to `cfg`. Unknown `FEDGAME_*` names are
/// rejected. Returns the applied variable names.
pub fn apply_env_overrides(
    cfg: &RunConfig,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(RunConfig, Vec<String>)> {
    let mut table = to_table(cfg)?;
    let mut paths = Vec::new();
    leaf_paths(&table, &mut Vec::new(), &mut paths);
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path = paths
            .iter()
            .find(|p| env_key(p) == key)
            .ok_or_else(|| HarnessError::Config(format!("unknown override {key}")))?;
        set_path(&mut table, path, parse_env_value(&raw));
        applied.push(key);
    }
    let out = from_table(table)
        .map_err(|e| HarnessError::Config(format!("after environment overrides: {e}")))?;
    Ok((out, applied))
}

/// Resolves `--config`: the literal `default`, a TOML file, or a run
/// manifest (`.json`) whose config snapshot is reused. Applies environment
/// overrides and validates.
pub fn load_config(
    spec: &str,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let base = if spec == "default" {
        RunConfig::default()
    } else {
        let path = Path::new(spec);
        let mut text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| HarnessError::format(path, e.to_string()))?;
            text = v
                .get("config_toml")
                .and_then(|c| c.as_str())
                .ok_or_else(|| HarnessError::format(path, "manifest lacks `config_toml`"))?
                .to_string();
        }
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?
    };
    let (cfg, _) = apply_env_overrides(&base, env)?;
    cfg.validate()?;
    Ok(cfg)
}
