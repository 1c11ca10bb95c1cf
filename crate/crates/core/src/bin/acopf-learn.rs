use std::path::PathBuf;
use std::process::ExitCode;

use acopf_learn::cli::{self, gradcheck, CliError, GenDataOptions, RunConfig};
use acopf_learn::powerflow::RelaxedPfOptions;
use acopf_learn::qcqp::{SolveStatus, SolverOptions};
use clap::{Parser, Subcommand};

/// Learning ACOPF solutions through a differentiable relaxed power flow.
#[derive(Parser)]
#[command(name = "acopf-learn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve perturbed ACOPF instances and write a JSON Lines dataset.
    GenData {
        /// Bundled case name (two_bus, case30, case118) or case file path.
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = 100)]
        n_samples: usize,
        /// Each demand is scaled by 1 + scale·u, u ~ U(−1, 1).
        #[arg(long, default_value_t = 1.0)]
        perturb_scale: f64,
        /// Keep loads that only the softened ACOPF can serve, tagged as such.
        #[arg(long)]
        keep_softened: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Solver options as a JSON file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the predictor described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to evaluate on (default: the config's test set).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Include per-sample violation reports.
        #[arg(long)]
        detail: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one ACOPF instance; prints a JSON solution.
    Solve {
        #[arg(long)]
        case: String,
        /// Load vector as JSON (default: the case's nominal load).
        #[arg(long)]
        load_file: Option<PathBuf>,
        /// Solver options as a JSON file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fall back to softened balance rows with this slack cost.
        #[arg(long)]
        soft: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        feas_tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power flow at a given control; prints JSON.
    Pf {
        #[arg(long)]
        case: String,
        /// Control vector as JSON (default: the control-box midpoint).
        #[arg(long)]
        control_file: Option<PathBuf>,
        #[arg(long)]
        load_file: Option<PathBuf>,
        /// Solve the minimum-slack relaxation instead of plain Newton.
        #[arg(long)]
        relaxed: bool,
        /// Power-flow options (newton, solver) as a JSON file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        /// Parameter family for the random sweep: p0, q0, p, q, r, d, h, g.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n_instances: usize,
        /// random, circle, least-norm, powerflow or pipeline (default: all).
        #[arg(long)]
        instance: Option<String>,
        /// Print JSON instead of text lines.
        #[arg(long)]
        json: bool,
    },
}

fn read_options<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        Some(p) => cli::write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
            Ok(())
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::GenData { case, n_samples, perturb_scale, keep_softened, seed, workers, config, out } => {
            let (net, id) = cli::load_case(&case)?;
            let solver: SolverOptions = read_options(config.as_ref())?;
            let opts = GenDataOptions { n_samples, perturb_scale, keep_softened, seed, workers, solver, ..Default::default() };
            let header = cli::cmd_gen_data(&net, &id, &opts, &out)?;
            eprintln!(
                "wrote {} samples to {} ({} drawn, {} rejected, {} softened)",
                header.n_drawn - header.n_rejected,
                out.display(),
                header.n_drawn,
                header.n_rejected,
                header.n_softened
            );
        }
        Command::Train { config, resume, seed, workers, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(w) = workers {
                cfg.train.worker_count = w;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let ck = cli::cmd_train(&cfg, resume.as_deref())?;
            if let Some(m) = ck.history.last() {
                eprintln!("epoch {}: total loss {:.6e}, train feasibility {:.4}", m.epoch, m.total_loss, m.feasibility_ratio);
            }
            if let Some(m) = ck.test_history.last() {
                eprintln!("epoch {}: test feasibility {:.4}", m.epoch, m.feasibility_ratio);
            }
            eprintln!("outputs in {}", cfg.out_dir.display());
        }
        Command::Eval { config, checkpoint, data, detail, workers, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(w) = workers {
                cfg.train.worker_count = w;
            }
            let rep = cli::cmd_eval(&cfg, &checkpoint, data.as_deref(), detail)?;
            emit(&rep, out.as_ref())?;
        }
        Command::Solve { case, load_file, config, soft, feas_tol, out } => {
            let (net, id) = cli::load_case(&case)?;
            let load = load_file.map(|p| cli::read_load(&p, &net)).transpose()?;
            let opts: SolverOptions = read_options(config.as_ref())?;
            let rep = cli::cmd_solve(&net, &id, load, &opts, soft, feas_tol)?;
            emit(&rep, out.as_ref())?;
            if rep.status != SolveStatus::Optimal {
                eprintln!("solver finished with status {:?}", rep.status);
                return Ok(ExitCode::from(3));
            }
        }
        Command::Pf { case, control_file, load_file, relaxed, config, out } => {
            let (net, _) = cli::load_case(&case)?;
            let y_c = match control_file {
                Some(p) => cli::read_control(&p, &net)?,
                None => cli::box_midpoint(&net),
            };
            let load = match load_file {
                Some(p) => cli::read_load(&p, &net)?,
                None => net.nominal_load(),
            };
            let opts: RelaxedPfOptions = read_options(config.as_ref())?;
            emit(&cli::cmd_pf(&net, &y_c, &load, relaxed, &opts)?, out.as_ref())?;
        }
        Command::Gradcheck { h, param, seed, n_instances, instance, json } => {
            if let Some(i) = &instance {
                if !gradcheck::INSTANCES.contains(&i.as_str()) {
                    return Err(CliError::Usage(format!("unknown instance {i:?}")));
                }
            }
            let lines = gradcheck::run(&gradcheck::GradcheckOptions { h, param, seed, n_instances, instance });
            if json {
                emit(&lines, None)?;
            } else {
                for l in &lines {
                    let verdict = if l.pass { "PASS" } else { "FAIL" };
                    println!("{verdict} {}: {:.3e} (threshold {:.0e}) {}", l.name, l.value, l.threshold, l.note);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
