//! `fedgame` subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedgame_core::bounds::{
    convergence_bound, divergence_bound, gap_report, grad_variance_report, phi_report,
    upsilon_report, BoundReport, ConstantMode,
};
use fedgame_core::{wasserstein_delta, Schedule};
use serde::Serialize;

use crate::config::{load_config, RunConfig, SweepAxis};
use crate::error::{HarnessError, Result};
use crate::exec::Rayon;
use crate::experiments::{
    agent_specs, build_data, plan_of, run_plan, solve_game, summarize_plan, table, train_bundle,
    PlanKind, Table,
};
use crate::formats::{encode_fgds, summarize, TraceFile};
use crate::manifest::{ArtifactWriter, DatasetFingerprint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "fedgame",
    version,
    about = "Federated-learning simulator and incentive-mechanism solver"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `default`, a TOML file, or a run manifest to reproduce.
    #[arg(long, global = true, default_value = "default")]
    pub config: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated sweep values, e.g. `0.1,0.5,0.9`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Repetitions per experiment point.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Per-agent label distributions and their distances to the reference.
    Partition,
    /// One training run; writes the trace.
    Train,
    /// Bound values for the configuration.
    Bounds,
    /// Equilibrium efforts and the learner's payment scale.
    Solve,
    /// Runs an experiment plan end to end.
    Experiment {
        #[arg(value_enum)]
        plan: PlanKind,
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
    },
    /// Rebuilds the summaries of an experiment directory from its traces.
    Report { dir: PathBuf },
}

const DEFAULT_OUT: &str = "fedgame-out";

/// Parses `argv`, runs the command and returns the exit status.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, std::env::vars(), &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Configuration after file, environment and flags.
pub fn resolve_config(
    common: &Common,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let mut cfg = load_config(&common.config, env)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.deltas {
        cfg.experiment.deltas = d.clone();
    }
    if let Some(n) = common.seeds {
        cfg.experiment.seeds = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(
    cli: &Cli,
    env: impl IntoIterator<Item = (String, String)>,
    out: &mut impl Write,
) -> Result<()> {
    if let Command::Report { dir } = &cli.command {
        return report(dir, &cli.common, out);
    }
    let mut cfg = resolve_config(&cli.common, env)?;
    match &cli.command {
        Command::Partition => partition(&cfg, &cli.common, out),
        Command::Train => train(&cfg, &cli.common, out),
        Command::Bounds => bounds(&cfg, cli.common.format, out),
        Command::Solve => solve(&cfg, cli.common.format, out),
        Command::Experiment { plan, axis } => {
            if let Some(a) = axis {
                cfg.experiment.axis = *a;
            }
            experiment(*plan, &cfg, &cli.common, out)
        }
        Command::Report { .. } => unreachable!(),
    }
}

fn emit(out: &mut impl Write, bytes: &[u8]) -> Result<()> {
    out.write_all(bytes)
        .map_err(|e| HarnessError::io("<stdout>", e))
}

fn emit_table(out: &mut impl Write, t: &Table, format: Format) -> Result<()> {
    match format {
        Format::Csv => emit(out, t.csv.as_bytes()),
        Format::Json => emit(out, json_string(&t.json)?.as_bytes()),
    }
}

fn json_string(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)
        .map_err(|e| HarnessError::format("<json>", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn out_dir(common: &Common, sub: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| Path::new(DEFAULT_OUT).join(sub))
}

fn command_line(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

#[derive(Serialize)]
struct PartitionRow {
    agent: usize,
    majority_class: usize,
    target_delta: f64,
    empirical_delta: f64,
    /// Label probabilities, `;`-separated.
    probs: String,
}

fn partition(cfg: &RunConfig, common: &Common, out: &mut impl Write) -> Result<()> {
    let specs = agent_specs(cfg, &cfg.data.partition, cfg.hyper.num_agents_N);
    let bundle = build_data(cfg, &specs, cfg.seed)?;
    let reference = cfg.reference()?;
    let rows = specs
        .iter()
        .zip(bundle.dists.iter().zip(&bundle.partitions))
        .enumerate()
        .map(|(k, (s, (d, p)))| {
            Ok(PartitionRow {
                agent: k,
                majority_class: s.majority_class,
                target_delta: wasserstein_delta(d, &reference)?,
                empirical_delta: wasserstein_delta(p.empirical_dist(), &reference)?,
                probs: d
                    .probs()
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = table("partitions", &rows)?;
    if let Some(dir) = &common.out {
        let mut w = ArtifactWriter::new(dir)?;
        w.write("partitions.csv", table.csv.as_bytes())?;
        for (k, p) in bundle.partitions.iter().enumerate() {
            w.write(&format!("data/agent-{k}.fgds"), &encode_fgds(p))?;
        }
        w.write("data/test.fgds", &encode_fgds(&bundle.test))?;
        let toml = cfg.to_toml_string()?;
        w.write("config.toml", toml.as_bytes())?;
        w.finish(
            command_line(&["partition"]),
            toml,
            vec![cfg.seed],
            bundle.fingerprints("partition"),
            BTreeMap::new(),
        )?;
    }
    emit_table(out, &table, common.format)
}

fn train(cfg: &RunConfig, common: &Common, out: &mut impl Write) -> Result<()> {
    let start = Instant::now();
    let specs = agent_specs(cfg, &cfg.data.partition, cfg.hyper.num_agents_N);
    let bundle = build_data(cfg, &specs, cfg.seed)?;
    let trace = train_bundle(cfg, &bundle, cfg.seed, &Rayon)?;
    let elapsed = start.elapsed().as_secs_f64();
    let meta = BTreeMap::from([
        ("kind".to_string(), "training".to_string()),
        ("plan".to_string(), "train".to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);
    let file = TraceFile::from_trace(&trace, meta);
    let summary = summarize(&file);
    let dir = out_dir(common, "train");
    let mut w = ArtifactWriter::new(&dir)?;
    let stem = format!("traces/train-seed{}", cfg.seed);
    w.write(&format!("{stem}.csv"), file.render().as_bytes())?;
    w.write(&format!("{stem}.json"), json_string(&summary)?.as_bytes())?;
    let toml = cfg.to_toml_string()?;
    w.write("config.toml", toml.as_bytes())?;
    let fps = bundle.fingerprints(&format!("train-seed{}", cfg.seed));
    w.finish(
        command_line(&["train"]),
        toml,
        vec![cfg.seed],
        fps,
        BTreeMap::from([("train".to_string(), elapsed)]),
    )?;
    match common.format {
        Format::Json => emit(out, json_string(&summary)?.as_bytes()),
        Format::Csv => emit(out, table("summary", &[summary])?.csv.as_bytes()),
    }
}

#[derive(Serialize)]
struct BoundRow {
    formula: String,
    mode: String,
    value: f64,
    flags: String,
}

/// Every bound the configuration determines: divergence at epoch 0 with the
/// partition's target distances, Phi and Upsilon in both modes, the gap bound
/// for two such agents, the gradient-variance bound, and the convergence bound
/// when the schedule decays.
pub fn bound_reports(cfg: &RunConfig) -> Result<Vec<(String, BoundReport)>> {
    let hp = &cfg.hyper;
    let reference = cfg.reference()?;
    let specs = agent_specs(cfg, &cfg.data.partition, hp.num_agents_N);
    let deltas = specs
        .iter()
        .map(|s| {
            wasserstein_delta(
                &fedgame_core::make_label_distribution(s, hp.num_classes_I)?,
                &reference,
            )
        })
        .collect::<fedgame_core::Result<Vec<f64>>>()?;
    let weights = hp.uniform_weights();
    let mech = cfg.mechanism_config();
    let d = deltas[0];
    let mut out = vec![("-".to_string(), divergence_bound(hp, &deltas, &weights, 0)?)];
    for (mode, name) in [
        (ConstantMode::Exact, "exact"),
        (ConstantMode::Simplified, "simplified"),
    ] {
        out.push((name.to_string(), phi_report(hp, mode, hp.local_epochs_E)));
        out.push((
            name.to_string(),
            upsilon_report(hp, mode, hp.local_epochs_E),
        ));
    }
    out.push((
        "mechanism".to_string(),
        gap_report(d, d, mech.phi, mech.upsilon),
    ));
    out.push(("-".to_string(), grad_variance_report(d, hp.grad_bound_G)));
    if matches!(hp.schedule, Schedule::Decaying { .. }) {
        out.push((
            "-".to_string(),
            convergence_bound(hp, &deltas, &weights, hp.rounds_T * hp.local_epochs_E, None)?,
        ));
    }
    Ok(out)
}

fn bounds(cfg: &RunConfig, format: Format, out: &mut impl Write) -> Result<()> {
    let reports = bound_reports(cfg)?;
    match format {
        Format::Json => {
            let v: Vec<_> = reports
                .iter()
                .map(|(mode, r)| serde_json::json!({ "mode": mode, "report": r }))
                .collect();
            emit(out, json_string(&v)?.as_bytes())
        }
        Format::Csv => {
            let rows: Vec<BoundRow> = reports
                .iter()
                .map(|(mode, r)| {
                    let mut flags = Vec::new();
                    if r.flags.upsilon_nonpositive {
                        flags.push("upsilon_nonpositive");
                    }
                    if r.flags.w_init_surrogate {
                        flags.push("w_init_surrogate");
                    }
                    BoundRow {
                        formula: format!("{:?}", r.formula_id).to_lowercase(),
                        mode: mode.clone(),
                        value: r.value,
                        flags: flags.join(";"),
                    }
                })
                .collect();
            emit(out, table("bounds", &rows)?.csv.as_bytes())
        }
    }
}

#[derive(Serialize)]
struct SolveRow {
    agent: usize,
    cost: f64,
    effort: f64,
    delta: f64,
    expected_utility: f64,
}

fn solve(cfg: &RunConfig, format: Format, out: &mut impl Write) -> Result<()> {
    let g = solve_game(cfg)?;
    match format {
        Format::Json => emit(out, json_string(&g)?.as_bytes()),
        Format::Csv => {
            let rows: Vec<SolveRow> = g
                .profiles
                .iter()
                .enumerate()
                .map(|(k, p)| SolveRow {
                    agent: k,
                    cost: p.cost,
                    effort: g.efforts[k],
                    delta: g.deltas[k],
                    expected_utility: g.expected_utilities[k],
                })
                .collect();
            let mut text = format!(
                "# q={}\n# converged={}\n# iterations={}\n# max_deviation_gain={}\n",
                g.mechanism.q,
                g.q_choice
                    .as_ref()
                    .map(|q| q.equilibrium_converged)
                    .unwrap_or(g.equilibrium.converged),
                g.equilibrium.iterations,
                g.equilibrium
                    .deviation_audit
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            );
            if let Some(q) = &g.q_choice {
                text.push_str(&format!(
                    "# closed_form_q={}\n# binding_agent={}\n",
                    q.closed_form_q, q.binding_agent
                ));
            }
            text.push_str(&table("solve", &rows)?.csv);
            emit(out, text.as_bytes())
        }
    }
}

/// Runs a plan and writes its traces, summaries and manifest below `dir`.
pub fn run_experiment(kind: PlanKind, cfg: &RunConfig, dir: &Path) -> Result<Vec<Table>> {
    let start = Instant::now();
    let run = run_plan(kind, cfg, &Rayon)?;
    let ran = start.elapsed().as_secs_f64();
    let tables = write_experiment(
        kind,
        cfg,
        &run.traces,
        run.datasets.clone(),
        run.game.as_ref(),
        dir,
        ran,
    )?;
    Ok(tables)
}

fn write_experiment(
    kind: PlanKind,
    cfg: &RunConfig,
    traces: &[crate::experiments::NamedTrace],
    datasets: Vec<DatasetFingerprint>,
    game: Option<&crate::experiments::GameSolution>,
    dir: &Path,
    ran: f64,
) -> Result<Vec<Table>> {
    let start = Instant::now();
    let mut w = ArtifactWriter::new(dir)?;
    let toml = cfg.to_toml_string()?;
    w.write("config.toml", toml.as_bytes())?;
    for t in traces {
        w.write(
            &format!("traces/{}.csv", t.name),
            t.file.render().as_bytes(),
        )?;
        if t.file.meta.get("kind").is_some_and(|k| k == "training") {
            w.write(
                &format!("traces/{}.json", t.name),
                json_string(&summarize(&t.file))?.as_bytes(),
            )?;
        }
    }
    let files: Vec<TraceFile> = traces.iter().map(|t| t.file.clone()).collect();
    let tables = summarize_plan(kind, &files)?;
    write_tables(&mut w, &tables)?;
    if let Some(g) = game {
        w.write("game.json", json_string(g)?.as_bytes())?;
    }
    let timings = BTreeMap::from([
        ("run".to_string(), ran),
        ("write".to_string(), start.elapsed().as_secs_f64()),
    ]);
    w.finish(
        command_line(&["experiment", kind.name()]),
        toml,
        crate::experiments::seeds(cfg),
        datasets,
        timings,
    )?;
    Ok(tables)
}

fn write_tables(w: &mut ArtifactWriter, tables: &[Table]) -> Result<()> {
    for t in tables {
        w.write(&format!("{}.csv", t.name), t.csv.as_bytes())?;
    }
    let all: serde_json::Map<String, serde_json::Value> = tables
        .iter()
        .map(|t| (t.name.to_string(), t.json.clone()))
        .collect();
    w.write("summary.json", json_string(&all)?.as_bytes())?;
    Ok(())
}

fn experiment(
    kind: PlanKind,
    cfg: &RunConfig,
    common: &Common,
    out: &mut impl Write,
) -> Result<()> {
    let dir = out_dir(common, kind.name());
    let tables = run_experiment(kind, cfg, &dir)?;
    emit_table(out, &tables[0], common.format)
}

/// Reads `dir/traces/*.csv` in name order.
pub fn read_traces(dir: &Path) -> Result<Vec<TraceFile>> {
    let tdir = dir.join("traces");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&tdir)
        .map_err(|e| HarnessError::io(&tdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::format(&tdir, "no trace files"));
    }
    paths.iter().map(|p| TraceFile::read(p)).collect()
}

/// Summary tables rebuilt from the traces of an experiment directory.
pub fn report_tables(dir: &Path) -> Result<Vec<Table>> {
    let traces = read_traces(dir)?;
    let kind = plan_of(&traces)?;
    summarize_plan(kind, &traces)
}

fn report(dir: &Path, common: &Common, out: &mut impl Write) -> Result<()> {
    let tables = report_tables(dir)?;
    if let Some(o) = &common.out {
        let mut w = ArtifactWriter::new(o)?;
        write_tables(&mut w, &tables)?;
        w.finish(
            vec!["report".to_string(), dir.display().to_string()],
            String::new(),
            vec![],
            vec![],
            BTreeMap::new(),
        )?;
    }
    emit_table(out, &tables[0], common.format)
}
