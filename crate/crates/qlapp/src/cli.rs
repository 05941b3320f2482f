use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qlapp_core::asymptotics::{
    check_identifiability_m, default_step, gamma_matrix, limit_intensity, limit_intensity_star, y_limit_and_chi0,
    Chi0Options, Chi0Result, GammaMatrix, IdentifiabilityReport, Provenance,
};
use qlapp_core::estimate::{qbe, qmle, Prior, QbeOptions, QmleOptions};
use qlapp_core::lob::{book_replay_events, BookState, EventMap, EventMapEntry};
use qlapp_core::model::validate_model;
use qlapp_core::simulate::{simulate, SimOptions};
use qlapp_core::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::harness::{export, mc_study, pldi_probe, McConfig, ModelSource, PldiOptions};
use crate::io::{
    format_sig17, read_covariate_csv, read_events_csv, read_json, read_model, write_covariate_csv, write_events_csv,
    write_json, write_trajectory_csv,
};

#[derive(Debug, Parser)]
#[command(name = "qlapp", version, about = "Point-process regression: simulation, quasi-likelihood estimation and asymptotics")]
pub struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the one in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location: a directory, or a JSON file for `estimate` and `asymptotics`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for Monte Carlo loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one path and write it as `events.csv`.
    Simulate(SimulateArgs),
    /// Fit a model to an event file by QMLE or QBE.
    Estimate(EstimateArgs),
    /// Limit intensity, information matrix, identifiability report and χ₀.
    Asymptotics(AsymptoticsArgs),
    /// Monte Carlo study of the estimators; configured by `--config`.
    McStudy,
    /// Large-deviation probe of the local likelihood ratio; configured by `--config`.
    PldiProbe,
    /// Replay events through an order book.
    LobReplay(LobArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimMethodArg {
    Thinning,
    ExpExact,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// θ as a JSON array.
    #[arg(long)]
    pub theta: String,
    #[arg(long, value_enum)]
    pub method: Option<SimMethodArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    Qmle,
    Qbe,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PriorArg {
    Uniform,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Event file with `component,time` rows.
    #[arg(long)]
    pub path: PathBuf,
    /// Covariate levels for models with an external covariate.
    #[arg(long)]
    pub covariate: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "qmle")]
    pub method: EstimatorArg,
    #[arg(long, value_enum, default_value = "uniform")]
    pub prior: PriorArg,
    /// Write the optimizer trace as CSV next to the output.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct AsymptoticsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// θ* as a JSON array.
    #[arg(long = "theta-star")]
    pub theta_star: String,
    /// Skip the χ₀ search.
    #[arg(long)]
    pub no_chi0: bool,
}

#[derive(Debug, Args)]
pub struct LobArgs {
    /// Event file with `component,time` rows; overrides the configuration.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Event-map JSON array; overrides the configuration.
    #[arg(long = "event-map")]
    pub event_map: Option<PathBuf>,
}

/// Configuration of `pldi-probe`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PldiConfig {
    pub model: ModelSource,
    pub theta_star: Vec<f64>,
    pub n: u64,
    pub r_grid: Vec<f64>,
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub options: PldiOptions,
}

/// Configuration of `lob-replay`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LobConfig {
    pub ask_queues: Vec<u64>,
    pub bid_queues: Vec<u64>,
    pub q: u64,
    #[serde(default)]
    pub event_map: Option<Vec<EventMapEntry>>,
    #[serde(default)]
    pub event_map_file: Option<PathBuf>,
    #[serde(default)]
    pub events: Option<PathBuf>,
    /// Time stamp of the initial snapshot.
    #[serde(default)]
    pub start: f64,
}

#[derive(Serialize)]
struct AsymptoticsOut {
    lambda_inf_csv: PathBuf,
    provenance: Provenance,
    gamma: GammaMatrix,
    identifiability: Option<IdentifiabilityReport>,
    chi0: Option<Chi0Result>,
}

#[derive(Serialize)]
struct LobOut {
    events: usize,
    violations: usize,
    final_state: BookState,
    trajectory_csv: PathBuf,
}

fn parse_vec(s: &str, what: &str) -> Result<Vec<f64>> {
    serde_json::from_str(s).map_err(|e| AppError::Invalid(format!("{what} must be a JSON array of numbers: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| AppError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| AppError::io(path, e))
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn out_file(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn need_config(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().ok_or_else(|| AppError::Invalid("this subcommand needs --config".into()))
}

fn checked_model(path: &Path) -> Result<ModelSpec> {
    let m = read_model(path)?;
    let report = validate_model(&m);
    if !report.passed() {
        return Err(AppError::Invalid(format!("model fails validation: {report:?}")));
    }
    Ok(m)
}

fn simulate_cmd(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let model = checked_model(&a.model)?;
    let theta = parse_vec(&a.theta, "--theta")?;
    let seed = cli.seed.unwrap_or(0);
    let opts = match a.method {
        Some(SimMethodArg::Thinning) => SimOptions::thinning(seed),
        Some(SimMethodArg::ExpExact) => SimOptions::exp_exact(seed),
        None => SimOptions::thinning(seed),
    };
    let path = simulate(&model, &theta, &opts)?;
    let dir = out_dir(cli);
    write_events_csv(create(&dir.join("events.csv"))?, &path)?;
    let dim = model.covariate.external_dim();
    if dim > 0 {
        write_covariate_csv(create(&dir.join("covariate.csv"))?, &path.external, dim)?;
    }
    Ok(())
}

fn estimate_cmd(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    let model = checked_model(&a.model)?;
    let mut path = read_events_csv(open(&a.path)?, &model)?;
    if let Some(c) = &a.covariate {
        path.external = read_covariate_csv(open(c)?)?;
    }
    let out = out_file(cli, "estimate.json");
    let mut qopts = QmleOptions { trace: a.trace, ..QmleOptions::default() };
    if let Some(s) = cli.seed {
        qopts.seed = s;
    }
    match a.method {
        EstimatorArg::Qmle => {
            let fit = qmle(&model, &path, &qopts)?;
            if a.trace {
                let tpath = out.with_extension("trace.csv");
                let mut w = csv::Writer::from_writer(create(&tpath)?);
                w.write_record(["start", "iter", "theta", "loglik", "grad_norm"])?;
                for t in &fit.trace {
                    let th: Vec<String> = t.theta.iter().map(|x| format_sig17(*x)).collect();
                    w.write_record([
                        t.start.to_string(),
                        t.iter.to_string(),
                        th.join(" "),
                        format_sig17(t.loglik),
                        format_sig17(t.grad_norm),
                    ])?;
                }
                w.flush().map_err(|e| AppError::io(&tpath, e))?;
            }
            write_json(&out, &fit)
        }
        EstimatorArg::Qbe => {
            let prior = match a.prior {
                PriorArg::Uniform => Prior::uniform(),
            };
            let mut opts = QbeOptions { qmle: qopts, ..QbeOptions::default() };
            if let Some(s) = cli.seed {
                opts.seed = s;
            }
            write_json(&out, &qbe(&model, &path, &prior, &opts)?)
        }
    }
}

fn asymptotics_cmd(cli: &Cli, a: &AsymptoticsArgs) -> Result<()> {
    let model = checked_model(&a.model)?;
    let theta = parse_vec(&a.theta_star, "--theta-star")?;
    let step = default_step(&model.horizon);
    let lim = limit_intensity(&model, &theta, step)?;
    let gamma = gamma_matrix(&lim)?;
    let identifiability = match check_identifiability_m(&model, &theta) {
        Ok(r) => Some(r),
        Err(qlapp_core::Error::UnsupportedMethod(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let chi0 = if a.no_chi0 {
        None
    } else {
        let star = limit_intensity_star(&model, &theta, step)?;
        let mut opts = Chi0Options::default();
        if let Some(s) = cli.seed {
            opts.seed = s;
        }
        Some(y_limit_and_chi0(&model, &star, &opts)?)
    };
    let out = out_file(cli, "asymptotics.json");
    let csv_path = out.with_extension("lambda_inf.csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    let mut header = vec!["time".to_string()];
    header.extend((0..model.d).map(|a| format!("lambda_{a}")));
    w.write_record(&header)?;
    for (t, v) in lim.grid.points.iter().zip(&lim.values) {
        let mut rec = vec![format_sig17(*t)];
        rec.extend(v.iter().map(|x| format_sig17(*x)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| AppError::io(&csv_path, e))?;
    write_json(
        &out,
        &AsymptoticsOut { lambda_inf_csv: csv_path, provenance: lim.provenance, gamma, identifiability, chi0 },
    )
}

fn mc_study_cmd(cli: &Cli) -> Result<()> {
    let mut cfg: McConfig = read_json(need_config(cli)?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    let summary = mc_study(&cfg)?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    export(&summary, &dir)?;
    Ok(())
}

fn pldi_cmd(cli: &Cli) -> Result<()> {
    let mut cfg: PldiConfig = read_json(need_config(cli)?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let model = cfg.model.load()?;
    let table = pldi_probe(&model, &cfg.theta_star, cfg.n, &cfg.r_grid, cfg.replicates, cfg.seed, &cfg.options)?;
    let dir = out_dir(cli);
    std::fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    let csv_path = dir.join("pldi.csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| AppError::io(&csv_path, e))?;
    write_json(&dir.join("pldi.json"), &table)
}

fn lob_cmd(cli: &Cli, a: &LobArgs) -> Result<()> {
    let cfg: LobConfig = read_json(need_config(cli)?)?;
    let book = BookState::new(cfg.ask_queues, cfg.bid_queues, cfg.q)?;
    let entries: Vec<EventMapEntry> = match (&a.event_map, &cfg.event_map_file, cfg.event_map) {
        (Some(p), _, _) | (None, Some(p), _) => read_json(p)?,
        (None, None, Some(v)) => v,
        (None, None, None) => return Err(AppError::Invalid("no event map given".into())),
    };
    let d = entries.len();
    let map = EventMap::new(entries, d, &book)?;
    let events_path =
        a.events.clone().or(cfg.events).ok_or_else(|| AppError::Invalid("no event file given".into()))?;
    let mut rd = csv::Reader::from_reader(open(&events_path)?);
    let mut events: Vec<(f64, usize)> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let comp: usize = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| AppError::Invalid(format!("bad row {rec:?}")))?;
        let t: f64 = rec.get(1).and_then(|s| s.trim().parse().ok()).ok_or_else(|| AppError::Invalid(format!("bad row {rec:?}")))?;
        events.push((t, comp));
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let replay = book_replay_events(&book, cfg.start, &events, &map)?;
    let dir = out_dir(cli);
    let traj = dir.join("trajectory.csv");
    write_trajectory_csv(create(&traj)?, &replay)?;
    write_json(
        &dir.join("replay.json"),
        &LobOut {
            events: events.len(),
            violations: replay.violations,
            final_state: replay.final_state().clone(),
            trajectory_csv: traj,
        },
    )
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(cli, a),
        Command::Estimate(a) => estimate_cmd(cli, a),
        Command::Asymptotics(a) => asymptotics_cmd(cli, a),
        Command::McStudy => mc_study_cmd(cli),
        Command::PldiProbe => pldi_cmd(cli),
        Command::LobReplay(a) => lob_cmd(cli, a),
    }
}

/// Runs a parsed command line, on a dedicated pool when `--threads` is given.
pub fn run(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| AppError::Invalid(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}
