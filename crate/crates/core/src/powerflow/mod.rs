//! Power flow for a fixed control: Newton-Raphson on the square system, and
//! the slack-relaxed QCQP that always has a solution.
//!
//! Both use the same model. The REF bus holds `|V| = v_set` and angle 0, and
//! its generators' real power is the slack `p_slack`. PV buses hold
//! `|V|² = v²`, and generators sharing a bus split reactive (and slack) power
//! in proportion to their ranges.
//!
//! Relaxed decision vector: `(state, p_slack, σ⁺, σ⁻)` with `σ = σ⁺ − σ⁻` added
//! to the demand of every balance row.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::acopf::rows::{self, RealPower, StateCols};
use crate::acopf::{AcopfError, ControlVector, StateVector};
use crate::grid::{LoadVector, Network};
use crate::linalg::{self, LuFactor, SparseVec};
use crate::qcqp::{self, QcqpProblem, QcqpSolution, SolveStatus, SolverOptions, WarmStart};
use crate::qcqp_diff::{self, DiffError};

#[derive(Debug, thiserror::Error)]
pub enum PfError {
    #[error(transparent)]
    Model(#[from] AcopfError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Qcqp(#[from] qcqp::QcqpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings allowed per iteration before giving up.
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 30, max_halvings: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfOutcome {
    pub converged: bool,
    pub y_s: Option<StateVector>,
    /// Real power of the REF generators when converged.
    pub p_slack: Option<Vec<f64>>,
    pub iterations: usize,
    pub final_residual: f64,
    /// Residual norm after each accepted iterate, starting point first.
    pub residual_trace: Vec<f64>,
}

/// Column bookkeeping for the relaxed problem.
#[derive(Debug, Clone, Copy)]
pub struct PfLayout {
    pub n_state: usize,
    pub n_slack_gen: usize,
    pub n_bus: usize,
}

impl PfLayout {
    pub fn new(net: &Network) -> Self {
        Self { n_state: net.state_layout().len(), n_slack_gen: net.index_maps.ref_gens.len(), n_bus: net.n_bus() }
    }

    /// Unknowns of the square system: state and slack generation.
    pub fn n_core(&self) -> usize {
        self.n_state + self.n_slack_gen
    }

    pub fn len(&self) -> usize {
        self.n_core() + 4 * self.n_bus
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p_slack(&self, r: usize) -> usize {
        self.n_state + r
    }

    pub fn sigma_plus(&self, row: usize) -> usize {
        self.n_core() + row
    }

    pub fn sigma_minus(&self, row: usize) -> usize {
        self.n_core() + 2 * self.n_bus + row
    }
}

/// How one control coordinate enters the relaxed problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ControlEntry {
    /// `p_g` subtracted from the constant of this real balance row.
    Balance { row: usize },
    /// `−v²` is the constant of this voltage row.
    Voltage { row: usize },
    /// REF generator: its real power is decided by the flow, not the control.
    Slack,
}

/// The relaxed power-flow QCQP together with the control-to-row map.
#[derive(Debug, Clone)]
pub struct RelaxedPfProblem {
    pub problem: QcqpProblem,
    pub layout: PfLayout,
    /// One entry per control coordinate in [`ControlVector::to_vec`] order.
    pub control_map: Vec<ControlEntry>,
}

fn gen_slack_index(net: &Network) -> Vec<Option<usize>> {
    let mut idx = vec![None; net.n_gen()];
    for (r, &g) in net.index_maps.ref_gens.iter().enumerate() {
        idx[g] = Some(r);
    }
    idx
}

pub fn build_relaxed_pf_qcqp(net: &Network, y_c: &ControlVector, x: &LoadVector) -> Result<RelaxedPfProblem, PfError> {
    y_c.check(net)?;
    if x.values.len() != 2 * net.n_bus() {
        return Err(AcopfError::Dimension { what: "load", expected: 2 * net.n_bus(), got: x.values.len() }.into());
    }
    let lay = PfLayout::new(net);
    let k = lay.len();
    let cols = StateCols { layout: net.state_layout(), offset: 0 };
    let slack_of = gen_slack_index(net);

    let mut p = QcqpProblem::new(k);
    p.q0 = SparseVec::from_pairs(k, (lay.n_core()..k).map(|j| (j, 1.0)));

    let mut balance = rows::balance_rows(net, &x.values, k, cols, &|g| match slack_of[g] {
        Some(r) => RealPower::Var(lay.p_slack(r)),
        None => RealPower::Fixed(y_c.p_gen[g]),
    });
    for (r, row) in balance.iter_mut().enumerate() {
        row.lin.add(lay.sigma_plus(r), 1.0);
        row.lin.add(lay.sigma_minus(r), -1.0);
    }
    let mut control_map: Vec<ControlEntry> = net
        .generators
        .iter()
        .enumerate()
        .map(|(g, gen)| match slack_of[g] {
            Some(_) => ControlEntry::Slack,
            None => ControlEntry::Balance { row: gen.bus },
        })
        .collect();
    p.equalities = balance;
    p.equalities.extend(rows::flow_rows(net, k, cols));
    for (&b, &v) in net.pv_buses.iter().zip(&y_c.v_mag) {
        control_map.push(ControlEntry::Voltage { row: p.equalities.len() });
        p.equalities.push(rows::voltage_row(k, cols, b, v));
    }
    p.equalities.extend(rows::reference_rows(net, k, cols));
    let q_range = |g: usize| (net.generators[g].q_min, net.generators[g].q_max);
    p.equalities.extend(rows::sharing_rows(net, k, &|g| cols.q_gen(g), &q_range, None));
    let p_range = |g: usize| (net.generators[g].p_min, net.generators[g].p_max);
    let slack_col = |g: usize| lay.p_slack(slack_of[g].expect("REF generator"));
    p.equalities.extend(rows::sharing_rows(net, k, &slack_col, &p_range, Some(net.ref_bus)));

    p.inequalities = (lay.n_core()..k).map(|j| rows::bound_row(k, j, -1.0, 0.0)).collect();
    debug_assert_eq!(p.m_e(), lay.n_core());
    Ok(RelaxedPfProblem { problem: p, layout: lay, control_map })
}

/// Flat start: `e` at the voltage targets, `f = 0`, mid-range reactive power,
/// consistent flows and mid-range slack generation.
fn flat_start(net: &Network, y_c: &ControlVector, lay: &PfLayout) -> Vec<f64> {
    let mut state = StateVector::zeros(net.state_layout());
    state.e.iter_mut().for_each(|e| *e = 1.0);
    for (&b, &v) in net.pv_buses.iter().zip(&y_c.v_mag) {
        state.e[b] = v;
    }
    state.e[net.ref_bus] = net.buses[net.ref_bus].v_set;
    for (q, g) in state.q_gen.iter_mut().zip(&net.generators) {
        *q = 0.5 * (g.q_min + g.q_max);
    }
    let mut z = state.with_flows_from_voltages(net).to_vec();
    for &g in &net.index_maps.ref_gens {
        let gen = &net.generators[g];
        z.push(0.5 * (gen.p_min + gen.p_max));
    }
    z.resize(lay.len(), 0.0);
    z
}

/// Residuals of the equality rows with zero slack, and their Jacobian over
/// the core unknowns (row-major).
fn core_system(p: &QcqpProblem, n: usize, z: &[f64], with_jac: bool) -> (Vec<f64>, Vec<f64>) {
    let mut res = Vec::with_capacity(p.m_e());
    let mut jac = if with_jac { vec![0.0; p.m_e() * n] } else { Vec::new() };
    for (r, row) in p.equalities.iter().enumerate() {
        res.push(row.value(z));
        if with_jac {
            for (c, v) in row.grad_sparse(z) {
                if c < n {
                    jac[r * n + c] += v;
                }
            }
        }
    }
    (res, jac)
}

/// Damped Newton-Raphson from a flat start.
pub fn newton_pf(net: &Network, y_c: &ControlVector, x: &LoadVector, opts: &NewtonOptions) -> Result<PfOutcome, PfError> {
    let rp = build_relaxed_pf_qcqp(net, y_c, x)?;
    let z0 = flat_start(net, y_c, &rp.layout);
    Ok(newton_core(net, &rp, z0, opts))
}

fn newton_core(net: &Network, rp: &RelaxedPfProblem, mut z: Vec<f64>, opts: &NewtonOptions) -> PfOutcome {
    let p = &rp.problem;
    let n = rp.layout.n_core();
    assert_eq!(p.m_e(), n, "power-flow system must be square");
    let (mut res, _) = core_system(p, n, &z, false);
    let mut norm = linalg::norm_inf(&res);
    let mut trace = vec![norm];
    let mut iterations = 0;
    while norm > opts.tol && iterations < opts.max_iter && norm.is_finite() {
        iterations += 1;
        let (_, jac) = core_system(p, n, &z, true);
        let Ok(lu) = LuFactor::from_row_major(n, jac) else {
            debug!("singular power-flow Jacobian at iteration {iterations}");
            break;
        };
        let step = lu.solve(&res);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> =
                z.iter().enumerate().map(|(i, &v)| if i < n { v - t * step[i] } else { v }).collect();
            let (r, _) = core_system(p, n, &trial, false);
            let nn = linalg::norm_inf(&r);
            if nn < norm {
                z = trial;
                res = r;
                norm = nn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(norm);
    }
    let converged = norm <= opts.tol;
    let (y_s, p_slack) = if converged {
        let lay = net.state_layout();
        let ys = StateVector::from_slice(lay, &z[..lay.len()]).expect("layout");
        (Some(ys), Some(z[rp.layout.n_state..n].to_vec()))
    } else {
        (None, None)
    };
    PfOutcome { converged, y_s, p_slack, iterations, final_residual: norm, residual_trace: trace }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedPfResult {
    pub y_s: StateVector,
    pub p_slack: Vec<f64>,
    /// `σ⁺ − σ⁻`, real rows then reactive rows.
    pub sigma: Vec<f64>,
    pub sigma_l1: f64,
    pub solve_status: SolveStatus,
    /// Set when the Newton solution was used directly.
    pub from_newton: bool,
    pub qcqp_solution: QcqpSolution,
}

impl RelaxedPfResult {
    /// The control actually realized: REF generators at their slack output.
    pub fn realized_control(&self, net: &Network, y_c: &ControlVector) -> ControlVector {
        let mut out = y_c.clone();
        for (r, &g) in net.index_maps.ref_gens.iter().enumerate() {
            out.p_gen[g] = self.p_slack[r];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RelaxedPfOptions {
    pub newton: NewtonOptions,
    pub solver: SolverOptions,
}

/// Minimum-‖σ‖₁ power flow. A converged Newton solution with `σ = 0` is an
/// exact KKT point (multipliers `λ = 0`, `ν = 1`) and is returned as is;
/// otherwise the QCQP is solved from a flat start with `σ` set to the
/// flat-start mismatches.
pub fn solve_relaxed_pf(
    net: &Network,
    y_c: &ControlVector,
    x: &LoadVector,
    opts: &RelaxedPfOptions,
) -> Result<RelaxedPfResult, PfError> {
    let rp = build_relaxed_pf_qcqp(net, y_c, x)?;
    let lay = rp.layout;
    let z0 = flat_start(net, y_c, &lay);
    let newton = newton_core(net, &rp, z0.clone(), &opts.newton);
    let p = &rp.problem;

    let mut from_newton = false;
    let sol = if newton.converged {
        let mut z = newton.y_s.as_ref().expect("converged").to_vec();
        z.extend(newton.p_slack.as_ref().expect("converged"));
        z.resize(lay.len(), 0.0);
        let s = QcqpSolution::from_point(
            p,
            z,
            vec![1.0; p.m_i()],
            vec![0.0; p.m_e()],
            SolveStatus::Optimal,
            opts.solver.activity_tol,
        );
        if s.kkt_residual <= opts.solver.kkt_tol.max(opts.newton.tol) {
            from_newton = true;
            s
        } else {
            qcqp::solve_warm(p, &WarmStart::from(&s), &opts.solver)?
        }
    } else {
        let mut z = z0;
        let (_, eq) = p.eval_constraints(&z)?;
        for r in 0..2 * lay.n_bus {
            if eq[r] < 0.0 {
                z[lay.sigma_plus(r)] = -eq[r];
            } else {
                z[lay.sigma_minus(r)] = eq[r];
            }
        }
        qcqp::solve(p, Some(&z), &opts.solver)?
    };

    let state_len = lay.n_state;
    let y_s = StateVector::from_slice(net.state_layout(), &sol.z[..state_len])?;
    let sigma: Vec<f64> =
        (0..2 * lay.n_bus).map(|r| sol.z[lay.sigma_plus(r)] - sol.z[lay.sigma_minus(r)]).collect();
    let sigma_l1 = sigma.iter().map(|v| v.abs()).sum();
    Ok(RelaxedPfResult {
        y_s,
        p_slack: sol.z[state_len..lay.n_core()].to_vec(),
        sigma,
        sigma_l1,
        solve_status: sol.status,
        from_newton,
        qcqp_solution: sol,
    })
}

/// Control gradient together with the least-norm flag of the underlying solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGradient {
    pub grad: Vec<f64>,
    pub subgradient: bool,
}

/// `∂ℓ/∂y_c` given `∂ℓ/∂y_s` at a relaxed power-flow solution.
pub fn backward_control(
    net: &Network,
    y_c: &ControlVector,
    x: &LoadVector,
    result: &RelaxedPfResult,
    grad_state: &StateVector,
) -> Result<ControlGradient, PfError> {
    let rp = build_relaxed_pf_qcqp(net, y_c, x)?;
    let gs = grad_state.to_vec();
    let mut grad_z = vec![0.0; rp.layout.len()];
    grad_z[..gs.len()].copy_from_slice(&gs);
    let n_control = y_c.len();
    if gs.iter().all(|g| *g == 0.0) {
        return Ok(ControlGradient { grad: vec![0.0; n_control], subgradient: false });
    }
    let fast = if result.from_newton { newton_adjoint(&rp, &result.qcqp_solution.z, &grad_z) } else { None };
    let (gg, subgradient) = match fast {
        Some(d_lambda) => (d_lambda, false),
        None => {
            let g = qcqp_diff::backward(&rp.problem, &result.qcqp_solution, &grad_z)?;
            (g.d_lambda, g.subgradient)
        }
    };
    Ok(ControlGradient { grad: map_to_control(&rp, y_c, &gg), subgradient })
}

/// `∂ℓ/∂g_j` of the row constants mapped onto the control coordinates.
fn map_to_control(rp: &RelaxedPfProblem, y_c: &ControlVector, gg: &[f64]) -> Vec<f64> {
    let n_gen = y_c.p_gen.len();
    rp.control_map
        .iter()
        .enumerate()
        .map(|(c, entry)| match *entry {
            ControlEntry::Balance { row } => -gg[row],
            ControlEntry::Voltage { row } => -2.0 * y_c.v_mag[c - n_gen] * gg[row],
            ControlEntry::Slack => 0.0,
        })
        .collect()
}

/// Equality adjoint at a zero-slack Newton point.
///
/// There `λ = 0`, `ν = 1` and every Hessian term vanishes, so the transposed
/// KKT system decouples: `d_z = 0`, `Jᵀ d_λ = −∂ℓ/∂y` with `J` the square
/// power-flow Jacobian, and `d_ν` follows from `d_λ`. Only `d_λ` is needed
/// for the row-constant gradients. Returns `None` if `J` is singular.
fn newton_adjoint(rp: &RelaxedPfProblem, z: &[f64], grad_z: &[f64]) -> Option<Vec<f64>> {
    let n = rp.layout.n_core();
    let (_, jac) = core_system(&rp.problem, n, z, true);
    let lu = LuFactor::from_row_major(n, jac).ok()?;
    let rhs: Vec<f64> = grad_z[..n].iter().map(|g| -g).collect();
    Some(lu.solve_transpose(&rhs))
}

/// [`backward_control`] forced through the general KKT backward pass.
pub fn backward_control_general(
    net: &Network,
    y_c: &ControlVector,
    x: &LoadVector,
    result: &RelaxedPfResult,
    grad_state: &StateVector,
) -> Result<ControlGradient, PfError> {
    let rp = build_relaxed_pf_qcqp(net, y_c, x)?;
    let gs = grad_state.to_vec();
    let mut grad_z = vec![0.0; rp.layout.len()];
    grad_z[..gs.len()].copy_from_slice(&gs);
    let g = qcqp_diff::backward(&rp.problem, &result.qcqp_solution, &grad_z)?;
    Ok(ControlGradient { grad: map_to_control(&rp, y_c, &g.d_lambda), subgradient: g.subgradient })
}
