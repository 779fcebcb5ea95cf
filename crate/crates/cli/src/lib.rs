//! Command implementations behind the `dynexit` binary.

pub mod config;

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dynexit::bo::{optimize, read_history, write_history, BoRecord, BoState, SearchSpace, ThresholdObjective};
use dynexit::cost::CostModel;
use dynexit::exit::{run_dynamic, trajectory_costs, ExitProfile, ExitThresholds, ModelPolicy};
use dynexit::model::Model;
use dynexit::navsim::{
    eval_closed_loop, gen_world, load_dataset, make_dataset, write_dataset, Dataset, Target, World,
};
use dynexit::selector::saliency_image;
use dynexit::trainer::{evaluate, train, EvalReport};
use rayon::prelude::*;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dynexit", version, about = "Early-exit goal-conditioned navigation: data, training, tuning, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert episodes and a train/test split.
    GenData(GenDataArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Tune exit thresholds on the test split.
    Tune(TuneArgs),
    /// Print held-out metrics and costs.
    Eval(EvalArgs),
    /// Write saliency maps and kept-pixel/exit-layer pairs.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation budget; defaults to the config's `bo_budget`.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Defaults to the config's `bo_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optimization history; defaults to `<out>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Continue from an existing history file.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "static_mode", required_unless_present = "static_mode")]
    pub thresholds: Option<PathBuf>,
    /// Full-depth inference with every exit disabled.
    #[arg(long = "static")]
    pub static_mode: bool,
    /// Metrics CSV path; the table is always printed.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Closed-loop worlds; defaults to the config's `closed_loop_worlds`, 0 skips.
    #[arg(long)]
    pub worlds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Exit thresholds for the exit-layer column; all exits disabled if absent.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Test samples to render saliency maps for.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long)]
    pub force: bool,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<dynexit::Error> for CliError {
    fn from(e: dynexit::Error) -> Self {
        use dynexit::Error as E;
        let code = match &e {
            E::InvalidArgument(_) => EXIT_USAGE,
            E::Data(_) | E::Format(_) | E::Io(_) => EXIT_DATA,
            _ => EXIT_NUMERIC,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: EXIT_DATA, message: e.to_string() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError { code: EXIT_DATA, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, f: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_dir(path))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| CliError::from(e.error))?;
    Ok(())
}

/// Builds a directory under a temporary name, then renames it into place.
fn atomic_dir(out: &Path, force: bool, f: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    if out.exists() {
        let empty = out.is_dir() && fs::read_dir(out)?.next().is_none();
        if !empty && !force {
            return Err(CliError::usage(format!("{} exists and is not empty (use --force)", out.display())));
        }
    }
    let parent = parent_dir(out);
    fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".dynexit-").tempdir_in(parent)?;
    f(tmp.path())?;
    if out.exists() {
        if out.is_dir() {
            fs::remove_dir_all(out)?;
        } else {
            fs::remove_file(out)?;
        }
    }
    let path = tmp.keep();
    if let Err(e) = fs::rename(&path, out) {
        let _ = fs::remove_dir_all(&path);
        return Err(e.into());
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model(ckpt: &Path, cfg: &RunConfig) -> CliResult<Model> {
    let f = fs::File::open(ckpt).map_err(|e| CliError { code: EXIT_DATA, message: format!("{}: {e}", ckpt.display()) })?;
    Ok(Model::load(BufReader::new(f), cfg.model())?)
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    load_dataset(dir).map_err(|e| CliError { code: EXIT_DATA, message: format!("{}: {e}", dir.display()) })
}

fn load_thresholds(path: &Path, model: &Model) -> CliResult<ExitThresholds> {
    let text = fs::read_to_string(path)?;
    let th: ExitThresholds = serde_json::from_str(&text)
        .map_err(|e| CliError { code: EXIT_DATA, message: format!("{}: {e}", path.display()) })?;
    th.validate(model)?;
    Ok(th)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let ds = make_dataset(a.episodes, a.seed, a.split, &cfg.sim())?;
    atomic_dir(&a.out, a.force, |dir| Ok(write_dataset(dir, &ds)?))?;
    println!(
        "wrote {} episodes ({} train / {} test) to {}",
        ds.episodes.len(),
        ds.manifest.train.len(),
        ds.manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let ds = load_data(&a.data)?;
    let model = Model::new(cfg.model(), cfg.model_seed);
    let mut log = Vec::new();
    let out = train(model, &ds.train, &cfg.train(), Some(&mut log))?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    atomic_write(&a.out, |w| Ok(out.model.save(w)?))?;
    atomic_write(&log_path, |w| Ok(w.write_all(&log)?))?;
    let last = out.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs: loss {:.6} -> {:.6}, best val Sim(w) at epoch {}; checkpoint {}",
        out.log.len(),
        out.initial_loss,
        last.train_loss,
        out.best_epoch,
        a.out.display()
    );
    Ok(())
}

/// Exit profiles and targets of the test split.
fn test_profiles(model: &Model, ds: &Dataset) -> CliResult<(Vec<ExitProfile>, Vec<Target>)> {
    let profiles =
        ds.test.par_iter().map(|s| ExitProfile::build(model, &s.input)).collect::<dynexit::Result<Vec<_>>>()?;
    Ok((profiles, ds.test.iter().map(|s| s.target.clone()).collect()))
}

/// Layer thresholds in `[0, eta_max]`, then the gate distance threshold.
fn search_space(cfg: &RunConfig, profiles: &[ExitProfile]) -> CliResult<SearchSpace> {
    let l = cfg.layers;
    let eta_hi = if cfg.layer_exit { cfg.eta_max } else { 0.0 };
    let (dist_lo, dist_hi) = if !cfg.pre_decoder {
        (0.0, 0.0)
    } else if cfg.dist_range_from_data {
        let d = profiles.iter().map(|p| p.gate.feature_dist);
        let lo = d.clone().fold(f64::INFINITY, f64::min);
        let hi = d.fold(0.0, f64::max);
        // slightly below the minimum so the lower corner keeps the gate closed
        (0.99 * lo, hi)
    } else {
        (0.0, cfg.dist_threshold_max)
    };
    let mut lower = vec![0.0; l - 1];
    lower.push(dist_lo);
    let mut upper = vec![eta_hi; l - 1];
    upper.push(dist_hi);
    Ok(SearchSpace::new(lower, upper)?)
}

pub fn cmd_tune(a: &TuneArgs) -> CliResult<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let budget = a.budget.unwrap_or(cfg.bo_budget);
    let seed = a.seed.unwrap_or(cfg.bo_seed);
    let l = cfg.layers;
    if budget < l + 2 {
        return Err(CliError::usage(format!("budget {budget} below dimension {l} + 2")));
    }
    let model = load_model(&a.ckpt, &cfg)?;
    let ds = load_data(&a.data)?;
    if ds.test.is_empty() {
        return Err(CliError { code: EXIT_DATA, message: "empty test split".into() });
    }
    let (profiles, targets) = test_profiles(&model, &ds)?;
    let space = search_space(&cfg, &profiles)?;
    let cost_model = CostModel::default();
    let disabled = ExitThresholds::disabled(l);
    let static_traces: Vec<_> = profiles.iter().map(|p| p.simulate(&model, &disabled, &cost_model)).collect();
    let static_cost = trajectory_costs(&static_traces)?;
    let objective = ThresholdObjective {
        model: &model,
        profiles: &profiles,
        targets: &targets,
        cost_model: &cost_model,
        constraints: cfg.constraints(&static_cost),
        lambda: cfg.lambda,
        max_masked_obs: cfg.max_masked_obs,
        max_masked_goal: cfg.max_masked_goal,
        pre_decoder: cfg.pre_decoder,
        layer_exit: cfg.layer_exit,
    };
    objective.constraints.validate()?;
    let history_path = a.history.clone().unwrap_or_else(|| with_suffix(&a.out, ".history.jsonl"));
    let mut state = BoState::default();
    if a.resume && history_path.exists() {
        state.history = read_history(BufReader::new(fs::File::open(&history_path)?))?;
    }
    let mut records: Vec<BoRecord> = state.history.clone();
    let mut eval = |x: &[f64]| objective.evaluate(x);
    let mut sink = |r: &BoRecord| -> dynexit::Result<()> {
        records.push(r.clone());
        atomic_write(&history_path, |w| Ok(write_history(w, &records)?))
            .map_err(|e| dynexit::Error::Data(e.message))
    };
    let existed = history_path.exists();
    let (best, state) = match optimize(&space, budget, seed, state, &mut eval, &mut sink) {
        Ok(r) => r,
        Err(e) => {
            if !existed {
                let _ = fs::remove_file(&history_path);
            }
            return Err(e.into());
        }
    };
    let th = objective.thresholds(&best);
    atomic_write(&a.out, |w| {
        serde_json::to_writer_pretty(&mut *w, &th).map_err(|e| CliError { code: EXIT_DATA, message: e.to_string() })?;
        Ok(w.write_all(b"\n")?)
    })?;
    let inc = state.incumbent().expect("nonempty history");
    println!(
        "best V {:.6} (J {:.6}, P {:.6}) after {} evaluations; thresholds {}",
        inc.v,
        inc.j,
        inc.p,
        state.history.len(),
        a.out.display()
    );
    Ok(())
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub sim_a: f64,
    pub sim_w: f64,
    pub loss_action: f64,
    pub loss_dist: f64,
    pub mean_flops: f64,
    pub mean_time_units: f64,
    pub peak_mem_units: f64,
    pub mean_exit_layer: f64,
    pub success_rate: Option<f64>,
}

impl MetricsRow {
    fn new(r: &EvalReport, success_rate: Option<f64>) -> Self {
        MetricsRow {
            sim_a: r.metrics.sim_a,
            sim_w: r.metrics.sim_w,
            loss_action: r.metrics.loss_action,
            loss_dist: r.metrics.loss_dist,
            mean_flops: r.costs.mean_flops,
            mean_time_units: r.costs.mean_time_units,
            peak_mem_units: r.costs.peak_mem_units,
            mean_exit_layer: r.mean_exit_layer,
            success_rate,
        }
    }
}

pub fn closed_loop_worlds(cfg: &RunConfig, n: usize) -> CliResult<Vec<World>> {
    let sim = cfg.sim();
    Ok((0..n).map(|i| gen_world(cfg.closed_loop_seed + i as u64, &sim)).collect::<dynexit::Result<_>>()?)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<MetricsRow> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model = load_model(&a.ckpt, &cfg)?;
    let ds = load_data(&a.data)?;
    let th = match &a.thresholds {
        Some(p) => load_thresholds(p, &model)?,
        None => ExitThresholds::disabled(cfg.layers),
    };
    let report = evaluate(&model, &ds.test, &th, &CostModel::default())?;
    let n_worlds = a.worlds.unwrap_or(cfg.closed_loop_worlds);
    let success = if n_worlds > 0 {
        let worlds = closed_loop_worlds(&cfg, n_worlds)?;
        let mut policy = ModelPolicy::new(&model, th);
        Some(eval_closed_loop(&mut policy, &worlds, cfg.closed_loop_max_steps, &cfg.sim())?.success_rate)
    } else {
        None
    };
    let row = MetricsRow::new(&report, success);
    let mode = if a.static_mode { "static" } else { "dynamic" };
    println!(
        "{:<8} {:>8} {:>8} {:>11} {:>9} {:>12} {:>10} {:>9} {:>10} {:>8}",
        "mode", "Sim(a)", "Sim(w)", "L_action", "L_dist", "FLOPs", "time", "mem", "exit", "success"
    );
    println!(
        "{:<8} {:>8.3} {:>8.3} {:>11.5} {:>9.5} {:>12.4e} {:>10.4} {:>9.2} {:>10.3} {:>8}",
        mode,
        row.sim_a,
        row.sim_w,
        row.loss_action,
        row.loss_dist,
        row.mean_flops,
        row.mean_time_units,
        row.peak_mem_units,
        row.mean_exit_layer,
        row.success_rate.map_or("-".to_string(), |s| format!("{s:.3}"))
    );
    if let Some(path) = &a.csv {
        atomic_write(path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.serialize(&row)?;
            csv.flush()?;
            Ok(())
        })?;
    }
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VizRow {
    pub traj: usize,
    pub t: usize,
    pub kept_pixels: usize,
    pub exit_layer: usize,
}

pub fn cmd_viz(a: &VizArgs) -> CliResult<Vec<VizRow>> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let model = load_model(&a.ckpt, &cfg)?;
    let ds = load_data(&a.data)?;
    let th = match &a.thresholds {
        Some(p) => load_thresholds(p, &model)?,
        None => ExitThresholds::disabled(cfg.layers),
    };
    let cost = CostModel::default();
    let rows = ds
        .test
        .par_iter()
        .map(|s| {
            let t = run_dynamic(&model, &s.input, &th, &cost)?;
            Ok(VizRow { traj: s.episode, t: s.t, kept_pixels: t.kept_pixels, exit_layer: t.exit_layer })
        })
        .collect::<dynexit::Result<Vec<_>>>()?;
    let size = cfg.image_size;
    atomic_dir(&a.out, a.force, |dir| {
        for s in ds.test.iter().take(a.samples) {
            let masks = model.eval_masks(&s.input)?;
            for (source, mask) in model.cfg.sources().into_iter().zip(&masks) {
                let img = saliency_image(mask, size, size)?;
                let path = dir.join(format!("saliency_{}_{}_{}.pgm", s.episode, s.t, source.label()));
                let mut f = std::io::BufWriter::new(fs::File::create(path)?);
                img.write_pnm(&mut f)?;
                f.flush()?;
            }
        }
        let mut csv = csv::Writer::from_path(dir.join("kept_vs_exit.csv"))?;
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let mean = rows.iter().map(|r| r.exit_layer as f64).sum::<f64>() / rows.len().max(1) as f64;
    println!("{} samples, mean exit layer {mean:.3}; output in {}", rows.len(), a.out.display());
    Ok(rows)
}

/// Caps rayon's worker count from `DYNEXIT_THREADS`.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("DYNEXIT_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::usage(format!("DYNEXIT_THREADS={v} is not a count")))?;
        if n == 0 {
            return Err(CliError::usage("DYNEXIT_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    init_threads()?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Viz(a) => cmd_viz(a).map(|_| ()),
    }
}
