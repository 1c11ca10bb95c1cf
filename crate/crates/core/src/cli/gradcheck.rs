//! Numerical checks of every analytic gradient in the crate.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acopf::{control_box, ControlVector, StateVector};
use crate::cases;
use crate::grid::Network;
use crate::learn::{self, pipeline_gradient_check, Sample, TrainConfig};
use crate::linalg;
use crate::powerflow::{backward_control, solve_relaxed_pf, NewtonOptions, RelaxedPfOptions};
use crate::qcqp::SolverOptions;
use crate::qcqp_diff::instances::{circle, duplicated_constraint, random_instance, regular_solution};
use crate::qcqp_diff::{
    backward, backward_with, build_kkt_matrix, finite_diff_check, forward_with, LinearLoss, Param, QuadraticLoss,
};

/// One reported comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub note: String,
}

impl CheckLine {
    fn at_most(name: &str, value: f64, threshold: f64, note: String) -> Self {
        CheckLine { name: name.into(), value, threshold, pass: value <= threshold, note }
    }

    fn at_least(name: &str, value: f64, threshold: f64, note: String) -> Self {
        CheckLine { name: name.into(), value, threshold, pass: value >= threshold, note }
    }
}

/// Finite-difference and transpose-consistency results over random
/// regular QCQPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n_instances: usize,
    pub n_screened_out: usize,
    pub n_entries: usize,
    /// `(tol, fraction of entries with rel err ≤ tol)`.
    pub pass_fractions: Vec<(f64, f64)>,
    pub max_rel_err: f64,
    /// Largest `|⟨∂ℓ/∂z, dz⟩ − ∂ℓ/∂θ| / max(1, |⟨∂ℓ/∂z, dz⟩|)` over all parameters.
    pub max_transpose_err: f64,
}

impl SweepResult {
    pub fn pass_fraction(&self, tol: f64) -> f64 {
        self.pass_fractions.iter().find(|(t, _)| *t == tol).map_or(f64::NAN, |p| p.1)
    }
}

pub const SWEEP_TOLS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Draws instances from `seed` upwards until `n_instances` pass the
/// regularity screen (giving up after `20 · n_instances` draws).
pub fn sweep(n_instances: usize, seed: u64, h: f64, family: Option<&str>) -> SweepResult {
    let opts = SolverOptions { kkt_tol: 1e-12, ..Default::default() };
    let (mut used, mut screened, mut errs) = (0usize, 0usize, Vec::new());
    let mut max_transpose_err = 0.0f64;
    let mut s = seed;
    while used < n_instances && s < seed + 20 * n_instances as u64 {
        let p = random_instance(s);
        s += 1;
        let Some(sol) = regular_solution(&p) else {
            screened += 1;
            continue;
        };
        let Ok(kkt) = build_kkt_matrix(&p, &sol) else {
            screened += 1;
            continue;
        };
        if kkt.singular {
            screened += 1;
            continue;
        }
        used += 1;
        let params: Vec<Param> = Param::all(&p).into_iter().filter(|q| family.is_none_or(|f| q.family() == f)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xabc);
        let grad: Vec<f64> = (0..p.k).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(g) = backward_with(&kkt, &sol, &grad) {
            for &param in &params {
                if let Ok((dz, _, _)) = forward_with(&kkt, &sol, &param.unit_differential(&p)) {
                    let fwd: f64 = grad.iter().zip(&dz).map(|(a, b)| a * b).sum();
                    max_transpose_err = max_transpose_err.max((fwd - g.get(param)).abs() / fwd.abs().max(1.0));
                }
            }
        }

        let loss = QuadraticLoss { target: vec![0.3; p.k], weight: 1.0 };
        if let Ok(rep) = finite_diff_check(&p, &sol, &loss, h, &params, &opts) {
            errs.extend(rep.entries.iter().map(|e| e.rel_err.unwrap_or(f64::INFINITY)));
        }
    }
    let frac = |tol: f64| {
        if errs.is_empty() {
            1.0
        } else {
            errs.iter().filter(|e| **e <= tol).count() as f64 / errs.len() as f64
        }
    };
    SweepResult {
        n_instances: used,
        n_screened_out: screened,
        n_entries: errs.len(),
        pass_fractions: SWEEP_TOLS.iter().map(|&t| (t, frac(t))).collect(),
        max_rel_err: errs.iter().copied().fold(0.0, f64::max),
        max_transpose_err,
    }
}

/// `(analytic, numeric)` derivative of `z*` with respect to the circle
/// constant `g`.
pub fn circle_check(h: f64) -> (f64, f64) {
    let (p, s) = circle();
    let loss = LinearLoss { c: vec![1.0] };
    let analytic = backward(&p, &s, &[1.0]).map(|g| g.g_g(0)).unwrap_or(f64::NAN);
    let numeric = finite_diff_check(&p, &s, &loss, h, &[Param::G(0)], &SolverOptions::default())
        .ok()
        .and_then(|r| r.entries[0].numeric)
        .unwrap_or(f64::NAN);
    (analytic, numeric)
}

/// Least-norm path on the duplicated-constraint instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastNormResult {
    pub singular: bool,
    pub subgradient: bool,
    /// `‖Mᵀd + [∂ℓ/∂z; 0]‖`.
    pub residual: f64,
    /// Largest `|⟨d, n⟩|` over a basis `n` of `null(Mᵀ)`.
    pub null_projection: f64,
    pub null_dim: usize,
}

pub fn least_norm_check() -> LeastNormResult {
    let (p, s) = duplicated_constraint();
    let kkt = build_kkt_matrix(&p, &s).expect("fixed instance");
    let grad = [1.0, 0.0];
    let g = backward(&p, &s, &grad).expect("least-norm path");
    let d: Vec<f64> = g.d_z.iter().chain(&g.d_nu).chain(&g.d_lambda).copied().collect();
    let m = kkt.matrix();
    let mut rhs = DVector::zeros(d.len());
    rhs[0] = grad[0];
    rhs[1] = grad[1];
    let residual = (m.transpose() * DVector::from_column_slice(&d) + rhs).norm();
    let null = linalg::null_space(&m.transpose(), 1e-10);
    let null_projection = null
        .column_iter()
        .map(|c| c.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max);
    LeastNormResult { singular: kkt.singular, subgradient: g.subgradient, residual, null_projection, null_dim: null.ncols() }
}

fn tight_newton() -> RelaxedPfOptions {
    RelaxedPfOptions { newton: NewtonOptions { tol: 1e-12, ..Default::default() }, ..Default::default() }
}

/// Worst relative error of [`backward_control`] against central differences
/// of `cᵀ ŷ_s(y_c)` over the non-slack controls, at the box midpoint of
/// `net`'s controls. `None` if the relaxed solve fails.
pub fn control_gradient_check(net: &Network, h: f64, seed: u64) -> Option<f64> {
    let (low, high) = control_box(net);
    let mid: Vec<f64> = low.iter().zip(&high).map(|(a, b)| 0.5 * (a + b)).collect();
    let y_c = ControlVector::from_slice(net, &mid).ok()?;
    let x = net.nominal_load();
    let opts = tight_newton();
    let lay = net.state_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..lay.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let value = |yc: &ControlVector| -> Option<f64> {
        let r = solve_relaxed_pf(net, yc, &x, &opts).ok()?;
        Some(r.y_s.to_vec().iter().zip(&c).map(|(a, b)| a * b).sum())
    };
    let res = solve_relaxed_pf(net, &y_c, &x, &opts).ok()?;
    let grad = backward_control(net, &y_c, &x, &res, &StateVector::from_slice(lay, &c).ok()?).ok()?.grad;
    let slack: Vec<usize> = net.index_maps.ref_gens.clone();
    let mut worst = 0.0f64;
    for j in (0..mid.len()).filter(|j| !slack.contains(j)) {
        let mut up = mid.clone();
        let mut dn = mid.clone();
        up[j] += h;
        dn[j] -= h;
        let fu = value(&ControlVector::from_slice(net, &up).ok()?)?;
        let fd = value(&ControlVector::from_slice(net, &dn).ok()?)?;
        let num = (fu - fd) / (2.0 * h);
        worst = worst.max((num - grad[j]).abs() / num.abs().max(1.0));
    }
    Some(worst)
}

/// The 2-bus fixture with a tight reactive limit and line rating, so that
/// the state penalty is active near nominal load.
pub fn penalized_two_bus() -> Network {
    let mut net = cases::two_bus();
    net.generators[1].q_max = 0.1;
    net.branches[0].s_max = 0.4;
    net
}

/// End-to-end check of the per-sample training loss on the penalized
/// 2-bus fixture over every `stride`-th network parameter.
pub fn pipeline_check(h: f64, seed: u64, stride: usize) -> Vec<learn::PipelineFdEntry> {
    let net = penalized_two_bus();
    let cfg = TrainConfig { hidden_sizes: (8, 6), seed, pf: tight_newton(), ..Default::default() };
    let (low, high) = control_box(&net);
    let mut model = learn::MlpModel::new(4, cfg.hidden_sizes, low, high, seed);
    model.input_shift = vec![0.0, 0.6, 0.0, 0.2];
    model.input_scale = vec![1.0, 0.2, 1.0, 0.1];
    let sample = Sample {
        x: crate::grid::LoadVector::new(&net, vec![0.0, 0.85, 0.0, 0.3]).expect("fixture load"),
        y_c_star: ControlVector::from_slice(&net, &[0.3, 0.6, 1.02]).expect("fixture control"),
        y_s_star: None,
        objective_star: None,
        softened: false,
    };
    let idx: Vec<usize> = (0..model.n_params()).step_by(stride.max(1)).collect();
    pipeline_gradient_check(&net, &model, &sample, &cfg, &idx, h)
}

/// Options of the `gradcheck` command.
#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Restrict the random sweep to one parameter family (`p0`, `q0`, `p`,
    /// `q`, `r`, `d`, `h`, `g`).
    pub param: Option<String>,
    pub seed: u64,
    pub n_instances: usize,
    /// `random`, `circle`, `least-norm`, `powerflow`, `pipeline`, or all.
    pub instance: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { h: 1e-6, param: None, seed: 0, n_instances: 200, instance: None }
    }
}

pub const INSTANCES: [&str; 5] = ["random", "circle", "least-norm", "powerflow", "pipeline"];

/// Runs the selected checks. Report-only: failing comparisons are recorded
/// in the lines, never returned as errors.
pub fn run(opts: &GradcheckOptions) -> Vec<CheckLine> {
    let on = |name: &str| opts.instance.as_deref().is_none_or(|i| i == name);
    let mut lines = Vec::new();
    if on("random") {
        let r = sweep(opts.n_instances, opts.seed, opts.h, opts.param.as_deref());
        let note = format!("{} instances ({} screened out), {} entries", r.n_instances, r.n_screened_out, r.n_entries);
        for &(tol, frac) in &r.pass_fractions {
            lines.push(CheckLine::at_least(&format!("random fd pass fraction @ {tol:e}"), frac, 0.95, note.clone()));
        }
        lines.push(CheckLine::at_most("random transpose consistency", r.max_transpose_err, 1e-10, note));
    }
    if on("circle") && opts.param.as_deref().is_none_or(|f| f == "g") {
        let (a, n) = circle_check(opts.h);
        lines.push(CheckLine::at_most(
            "circle dz*/dg",
            (a - n).abs(),
            1e-5,
            format!("analytic {a:.9}, numeric {n:.9}"),
        ));
    }
    if on("least-norm") {
        let r = least_norm_check();
        let note = format!("singular {}, subgradient {}, null dim {}", r.singular, r.subgradient, r.null_dim);
        lines.push(CheckLine::at_most("least-norm residual", r.residual, 1e-8, note.clone()));
        lines.push(CheckLine::at_most("least-norm null-space projection", r.null_projection, 1e-8, note));
    }
    if on("powerflow") {
        let h = opts.h.max(1e-5);
        for (name, net) in [("two_bus", cases::two_bus()), ("case30", cases::case30())] {
            let err = control_gradient_check(&net, h, opts.seed).unwrap_or(f64::INFINITY);
            lines.push(CheckLine::at_most(&format!("control gradient {name}"), err, 1e-4, format!("h = {h:e}")));
        }
    }
    if on("pipeline") {
        let entries = pipeline_check(opts.h, opts.seed, 3);
        let kinks = entries.iter().filter(|e| e.kink).count();
        let worst = entries.iter().filter(|e| !e.kink).map(|e| e.rel_err).fold(0.0, f64::max);
        lines.push(CheckLine::at_most(
            "pipeline loss gradient",
            worst,
            1e-3,
            format!("{} weights, {kinks} skipped at kinks", entries.len()),
        ));
    }
    lines
}
