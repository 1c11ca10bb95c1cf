//! Library side of the `acopf-learn` command: datasets, run configs and
//! one function per subcommand. The binary only parses arguments and maps
//! [`CliError`] to exit codes.

mod dataset;
pub mod gradcheck;

pub use dataset::{DatasetFile, DatasetHeader, Perturbation, DATASET_FORMAT};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::acopf::{
    feasibility_check, solve_acopf, solve_acopf_soft, AcopfError, ControlVector, StateVector, ViolationReport,
};
use crate::cases;
use crate::grid::{dimensions, load_network, LoadVector, Network};
use crate::learn::{
    self, evaluate, init_model, metrics_csv, Checkpoint, EvalReport, LearnError, TrainConfig, TrainState,
};
use crate::powerflow::{newton_pf, solve_relaxed_pf, RelaxedPfOptions};
use crate::qcqp::{SolveStatus, SolverOptions};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 1 usage, 2 data or I/O, 3 solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<AcopfError> for CliError {
    fn from(e: AcopfError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Config(m) => CliError::Usage(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

pub const BUNDLED_CASES: [&str; 3] = ["two_bus", "case30", "case118"];

/// A case by bundled name or file path, with its id (name or file stem).
pub fn load_case(spec: &str) -> Result<(Network, String), CliError> {
    match spec {
        "two_bus" => Ok((cases::two_bus(), spec.into())),
        "case30" => Ok((cases::case30(), spec.into())),
        "case118" => Ok((cases::case118(), spec.into())),
        path => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(CliError::Data(format!("case file {path} does not exist")));
            }
            let net = load_network(p).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or(path).to_string();
            Ok((net, id))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// A load file holds either `{"values": [...]}` or a bare array.
#[derive(Deserialize)]
#[serde(untagged)]
enum LoadFile {
    Wrapped(LoadVector),
    Bare(Vec<f64>),
}

pub fn read_load(path: &Path, net: &Network) -> Result<LoadVector, CliError> {
    let values = match read_json::<LoadFile>(path)? {
        LoadFile::Wrapped(l) => l.values,
        LoadFile::Bare(v) => v,
    };
    LoadVector::new(net, values).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// A control file holds `{"p_gen": [...], "v_mag": [...]}` or a flat array.
#[derive(Deserialize)]
#[serde(untagged)]
enum ControlFile {
    Split(ControlVector),
    Flat(Vec<f64>),
}

pub fn read_control(path: &Path, net: &Network) -> Result<ControlVector, CliError> {
    let y = match read_json::<ControlFile>(path)? {
        ControlFile::Split(c) => c,
        ControlFile::Flat(v) => ControlVector::from_slice(net, &v)?,
    };
    y.check(net)?;
    Ok(y)
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone)]
pub struct GenDataOptions {
    pub n_samples: usize,
    pub perturb_scale: f64,
    pub seed: u64,
    /// Cost per p.u. of balance slack in the softened fallback.
    pub soft_penalty: f64,
    pub feas_tol: f64,
    /// Keep loads whose softened optimum still needs balance slack (no
    /// feasible operating point). Off by default, so every record passes
    /// the feasibility check.
    pub keep_softened: bool,
    pub workers: usize,
    pub solver: SolverOptions,
}

/// Draws allowed per requested record before gen-data gives up.
pub const MAX_DRAWS_PER_SAMPLE: usize = 20;

impl Default for GenDataOptions {
    fn default() -> Self {
        GenDataOptions {
            n_samples: 100,
            perturb_scale: 1.0,
            seed: 0,
            soft_penalty: 1e4,
            feas_tol: 1e-5,
            keep_softened: false,
            workers: 1,
            solver: SolverOptions::default(),
        }
    }
}

/// A discarded sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
    pub load: Vec<f64>,
}

/// Load of sample `index`: each nominal coordinate times `1 + scale·u`.
pub fn perturbed_load(net: &Network, scale: f64, seed: u64, index: usize) -> LoadVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let values = net.nominal_load().values.iter().map(|d| d * (1.0 + scale * rng.random_range(-1.0..1.0))).collect();
    LoadVector::new(net, values).expect("nominal load has the right length")
}

fn reference_sample(net: &Network, x: LoadVector, opts: &GenDataOptions) -> Result<learn::Sample, String> {
    let sol = solve_acopf_soft(net, &x, opts.soft_penalty, &opts.solver).map_err(|e| e.to_string())?;
    if sol.status != SolveStatus::Optimal {
        return Err(format!("solver status {:?} (KKT residual {:.2e})", sol.status, sol.kkt_residual));
    }
    if sol.softened && !opts.keep_softened {
        return Err(format!("no feasible operating point: balance slack {:.3e} p.u.", sol.balance_slack_l1));
    }
    if !sol.softened {
        let rep = feasibility_check(net, &x, &sol.control, &sol.state, opts.feas_tol).map_err(|e| e.to_string())?;
        if !rep.feasible {
            return Err(format!("solution violates constraints by {:.2e}", rep.max_violation()));
        }
    }
    Ok(learn::Sample {
        x,
        y_c_star: sol.control,
        y_s_star: Some(sol.state),
        objective_star: Some(sol.objective),
        softened: sol.softened,
    })
}

/// Draws and solves perturbed loads until `n_samples` are accepted (or
/// `MAX_DRAWS_PER_SAMPLE · n_samples` draws are spent). Accepted samples are
/// kept in draw order; the rest are returned as rejections. Each round draws
/// exactly as many loads as are still missing, so the output does not depend
/// on the worker count.
pub fn gen_data(net: &Network, case_id: &str, opts: &GenDataOptions) -> Result<(DatasetFile, Vec<Rejection>), CliError> {
    if opts.n_samples == 0 {
        return Err(CliError::Usage("n_samples must be positive".into()));
    }
    if !(opts.perturb_scale >= 0.0) {
        return Err(CliError::Usage("perturb_scale must be nonnegative".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers.max(1)).build().expect("thread pool");
    let max_draws = MAX_DRAWS_PER_SAMPLE * opts.n_samples;
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut drawn = 0;
    while records.len() < opts.n_samples && drawn < max_draws {
        let round = (opts.n_samples - records.len()).min(max_draws - drawn);
        let results: Vec<Result<learn::Sample, String>> = pool.install(|| {
            (drawn..drawn + round)
                .into_par_iter()
                .map(|i| reference_sample(net, perturbed_load(net, opts.perturb_scale, opts.seed, i), opts))
                .collect()
        });
        for (index, r) in (drawn..).zip(results) {
            match r {
                Ok(s) => records.push(s),
                Err(reason) => {
                    debug!("draw {index} rejected: {reason}");
                    let load = perturbed_load(net, opts.perturb_scale, opts.seed, index).values;
                    rejected.push(Rejection { index, reason, load });
                }
            }
        }
        drawn += round;
        info!("{} of {} samples accepted after {drawn} draws", records.len(), opts.n_samples);
    }
    if records.is_empty() {
        return Err(CliError::Solver("no sample converged".into()));
    }
    if records.len() < opts.n_samples {
        warn!("only {} of {} samples accepted after {drawn} draws", records.len(), opts.n_samples);
    }
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        case_id: case_id.into(),
        base_mva: net.base_mva,
        dims: dimensions(net),
        perturbation: Perturbation::multiplicative(opts.perturb_scale),
        seed: opts.seed,
        n_requested: opts.n_samples,
        n_drawn: drawn,
        n_rejected: rejected.len(),
        n_softened: records.iter().filter(|s| s.softened).count(),
    };
    info!("{} samples kept, {} rejected, {} softened", records.len(), rejected.len(), header.n_softened);
    Ok((DatasetFile { header, records }, rejected))
}

/// `gen_data`, writing the dataset to `out` and rejections (one JSON object
/// per line) to `out` with a `.rejected.jsonl` suffix.
pub fn cmd_gen_data(net: &Network, case_id: &str, opts: &GenDataOptions, out: &Path) -> Result<DatasetHeader, CliError> {
    let (data, rejected) = gen_data(net, case_id, opts)?;
    data.write(out)?;
    let log_path = rejection_log_path(out);
    let log: String = rejected.iter().map(|r| serde_json::to_string(r).expect("serializes") + "\n").collect();
    std::fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
    Ok(data.header)
}

pub fn rejection_log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".rejected.jsonl");
    out.with_file_name(name)
}

// ---------------------------------------------------------------- train / eval

fn one() -> usize {
    1
}

/// Everything a training run needs. Relative paths are resolved against the
/// directory of the config file; `case` may also name a bundled case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: String,
    pub train_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    /// Write the checkpoint every this many epochs (and after the last).
    #[serde(default = "one")]
    pub save_every: usize,
    /// Evaluate on the test set every this many epochs; 0 disables.
    #[serde(default = "one")]
    pub eval_every: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if !BUNDLED_CASES.contains(&self.case.as_str()) && Path::new(&self.case).is_relative() {
            self.case = base.join(&self.case).to_string_lossy().into_owned();
        }
        fix(&mut self.train_data);
        if let Some(t) = self.test_data.as_mut() {
            fix(t);
        }
        fix(&mut self.out_dir);
    }

    pub fn check_paths(&self) -> Result<(), CliError> {
        let mut paths = vec![&self.train_data];
        paths.extend(self.test_data.as_ref());
        for p in paths {
            if !p.exists() {
                return Err(CliError::Data(format!("dataset {} does not exist", p.display())));
            }
        }
        if !BUNDLED_CASES.contains(&self.case.as_str()) && !Path::new(&self.case).exists() {
            return Err(CliError::Data(format!("case file {} does not exist", self.case)));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn test_metrics_path(&self) -> PathBuf {
        self.out_dir.join("test_metrics.csv")
    }
}

fn load_dataset(path: &Path, net: &Network) -> Result<DatasetFile, CliError> {
    let d = DatasetFile::read(path)?;
    d.check_network(net)?;
    if d.records.is_empty() {
        return Err(CliError::Data(format!("{} has no records", path.display())));
    }
    Ok(d)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Trains per `cfg`, optionally resuming from a checkpoint, and writes the
/// checkpoint, `metrics.csv` and `test_metrics.csv` into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Checkpoint, CliError> {
    cfg.train.validate()?;
    let (net, _) = load_case(&cfg.case)?;
    let train = load_dataset(&cfg.train_data, &net)?;
    let test = match &cfg.test_data {
        Some(p) if cfg.eval_every > 0 => Some(load_dataset(p, &net)?),
        _ => None,
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;

    let mut ck = match resume {
        Some(path) => {
            let ck: Checkpoint = read_json(path)?;
            if ck.config_hash != cfg.train.hash() {
                return Err(CliError::Usage(format!(
                    "{} was written with a different training config",
                    path.display()
                )));
            }
            learn::check_shape(&ck.state.model, &net)?;
            ck
        }
        None => {
            let model = init_model(&net, &train.records, &cfg.train);
            let state = TrainState { adam: learn::AdamState::new(model.n_params()), model, epoch: 0 };
            Checkpoint::new(&cfg.train, state)
        }
    };
    let start_state = ck.state.clone();
    let mut history = std::mem::take(&mut ck.history);
    let mut test_history = std::mem::take(&mut ck.test_history);
    let (state, _) = learn::train_from(&net, &train.records, &cfg.train, start_state, |st, m| {
        history.push(m.clone());
        write_text(&cfg.metrics_path(), &metrics_csv(&history)).map_err(|e| LearnError::Callback(e.to_string()))?;
        if let Some(test) = &test {
            if st.epoch % cfg.eval_every == 0 || st.epoch == cfg.train.epochs {
                let rep = evaluate(&net, &st.model, &test.records, &cfg.train, false)?;
                let mut tm = rep.metrics;
                tm.epoch = st.epoch;
                info!("epoch {}: test feasibility ratio {:.4}", st.epoch, tm.feasibility_ratio);
                test_history.push(tm);
                write_text(&cfg.test_metrics_path(), &metrics_csv(&test_history))
                    .map_err(|e| LearnError::Callback(e.to_string()))?;
            }
        }
        if st.epoch % cfg.save_every.max(1) == 0 || st.epoch == cfg.train.epochs {
            let mut ck = Checkpoint::new(&cfg.train, st.clone());
            ck.history = history.clone();
            ck.test_history = test_history.clone();
            write_json(&cfg.checkpoint_path(), &ck).map_err(|e| LearnError::Callback(e.to_string()))?;
        }
        Ok(())
    })?;
    let mut out = Checkpoint::new(&cfg.train, state);
    out.history = history;
    out.test_history = test_history;
    Ok(out)
}

/// Evaluates a checkpoint on `data` (default: the config's test set, else
/// its training set).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, detail: bool) -> Result<EvalReport, CliError> {
    let (net, _) = load_case(&cfg.case)?;
    let ck: Checkpoint = read_json(checkpoint)?;
    learn::check_shape(&ck.state.model, &net)?;
    let path = data.map(Path::to_path_buf).or_else(|| cfg.test_data.clone()).unwrap_or_else(|| cfg.train_data.clone());
    let set = load_dataset(&path, &net)?;
    Ok(evaluate(&net, &ck.state.model, &set.records, &cfg.train, detail)?)
}

// ---------------------------------------------------------------- solve / pf

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub case_id: String,
    pub status: SolveStatus,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub softened: bool,
    pub control: ControlVector,
    pub state: StateVector,
    pub violations: ViolationReport,
}

/// Solves the ACOPF at `load` (default: nominal). With `soft`, falls back
/// to the softened problem when the strict one fails.
pub fn cmd_solve(
    net: &Network,
    case_id: &str,
    load: Option<LoadVector>,
    opts: &SolverOptions,
    soft: Option<f64>,
    feas_tol: f64,
) -> Result<SolveReport, CliError> {
    let x = load.unwrap_or_else(|| net.nominal_load());
    let sol = match soft {
        Some(penalty) => solve_acopf_soft(net, &x, penalty, opts)?,
        None => solve_acopf(net, &x, opts)?,
    };
    let violations = feasibility_check(net, &x, &sol.control, &sol.state, feas_tol)?;
    Ok(SolveReport {
        case_id: case_id.into(),
        status: sol.status,
        objective: sol.objective,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        softened: sol.softened,
        control: sol.control,
        state: sol.state,
        violations,
    })
}

/// Newton power flow, or the slack-relaxed one, as JSON.
pub fn cmd_pf(
    net: &Network,
    y_c: &ControlVector,
    x: &LoadVector,
    relaxed: bool,
    opts: &RelaxedPfOptions,
) -> Result<serde_json::Value, CliError> {
    let v = if relaxed {
        let r = solve_relaxed_pf(net, y_c, x, opts).map_err(|e| CliError::Solver(e.to_string()))?;
        serde_json::to_value(r)
    } else {
        let r = newton_pf(net, y_c, x, &opts.newton).map_err(|e| CliError::Solver(e.to_string()))?;
        serde_json::to_value(r)
    };
    Ok(v.expect("result serializes"))
}

/// Midpoint of the control box, the default control for `pf`.
pub fn box_midpoint(net: &Network) -> ControlVector {
    let (low, high) = crate::acopf::control_box(net);
    let mid: Vec<f64> = low.iter().zip(&high).map(|(a, b)| 0.5 * (a + b)).collect();
    ControlVector::from_slice(net, &mid).expect("box matches the network")
}
