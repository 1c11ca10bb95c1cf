//! AC optimal power flow as a QCQP, the control/state split, and the state
//! penalty used by the learning loss.
//!
//! The ACOPF decision vector is `(p_gen, q_gen, e, f, p_fwd, q_fwd, p_rev, q_rev)`:
//! the real powers first, then the state block in [`StateLayout`] order.

pub(crate) mod rows;

use serde::{Deserialize, Serialize};

use crate::grid::{GridError, LoadVector, Network, StateLayout};
use crate::linalg::{SparseMat, SparseVec};
use crate::qcqp::{self, QcqpError, QcqpProblem, QcqpSolution, QuadForm, SolveStatus, SolverOptions};
use rows::{RealPower, StateCols};

/// Default tolerance of the feasibility ratio, in p.u.
pub const DEFAULT_FEAS_TOL: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum AcopfError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Qcqp(#[from] QcqpError),
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AcopfError> {
    if expected == got {
        Ok(())
    } else {
        Err(AcopfError::Dimension { what, expected, got })
    }
}

/// Generator real powers and PV-bus voltage magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    pub p_gen: Vec<f64>,
    pub v_mag: Vec<f64>,
}

impl ControlVector {
    pub fn len(&self) -> usize {
        self.p_gen.len() + self.v_mag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(p_gen, v_mag)` concatenated.
    pub fn to_vec(&self) -> Vec<f64> {
        self.p_gen.iter().chain(&self.v_mag).copied().collect()
    }

    pub fn from_slice(net: &Network, v: &[f64]) -> Result<Self, AcopfError> {
        check_len("control", net.n_gen() + net.n_pv(), v.len())?;
        let g = net.n_gen();
        Ok(Self { p_gen: v[..g].to_vec(), v_mag: v[g..].to_vec() })
    }

    pub fn check(&self, net: &Network) -> Result<(), AcopfError> {
        check_len("control p_gen", net.n_gen(), self.p_gen.len())?;
        check_len("control v_mag", net.n_pv(), self.v_mag.len())
    }
}

/// Every non-control decision variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub q_gen: Vec<f64>,
    pub e: Vec<f64>,
    pub f: Vec<f64>,
    pub p_fwd: Vec<f64>,
    pub q_fwd: Vec<f64>,
    pub p_rev: Vec<f64>,
    pub q_rev: Vec<f64>,
}

impl StateVector {
    pub fn zeros(layout: StateLayout) -> Self {
        Self {
            q_gen: vec![0.0; layout.n_gen],
            e: vec![0.0; layout.n_bus],
            f: vec![0.0; layout.n_bus],
            p_fwd: vec![0.0; layout.n_branch],
            q_fwd: vec![0.0; layout.n_branch],
            p_rev: vec![0.0; layout.n_branch],
            q_rev: vec![0.0; layout.n_branch],
        }
    }

    /// Flat vector in [`StateLayout`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.q_gen, &self.e, &self.f, &self.p_fwd, &self.q_fwd, &self.p_rev, &self.q_rev]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn from_slice(layout: StateLayout, v: &[f64]) -> Result<Self, AcopfError> {
        check_len("state", layout.len(), v.len())?;
        let (g, b, l) = (layout.n_gen, layout.n_bus, layout.n_branch);
        let mut rest = v;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        Ok(Self {
            q_gen: take(g),
            e: take(b),
            f: take(b),
            p_fwd: take(l),
            q_fwd: take(l),
            p_rev: take(l),
            q_rev: take(l),
        })
    }

    pub fn check(&self, net: &Network) -> Result<(), AcopfError> {
        check_len("state", net.state_layout().len(), self.to_vec().len())?;
        check_len("state q_gen", net.n_gen(), self.q_gen.len())?;
        check_len("state e", net.n_bus(), self.e.len())?;
        check_len("state f", net.n_bus(), self.f.len())?;
        check_len("state p_fwd", net.n_branch(), self.p_fwd.len())
    }

    pub fn v_mag(&self, bus: usize) -> f64 {
        self.e[bus].hypot(self.f[bus])
    }

    /// Flows recomputed from the voltages.
    pub fn with_flows_from_voltages(mut self, net: &Network) -> Self {
        for (l, br) in net.branches.iter().enumerate() {
            let (i, j) = (br.from_bus, br.to_bus);
            let (ei, fi, ej, fj) = (self.e[i], self.f[i], self.e[j], self.f[j]);
            self.p_fwd[l] = br.flow_coeffs_fwd.p.eval(ei, fi, ej, fj);
            self.q_fwd[l] = br.flow_coeffs_fwd.q.eval(ei, fi, ej, fj);
            self.p_rev[l] = br.flow_coeffs_rev.p.eval(ej, fj, ei, fi);
            self.q_rev[l] = br.flow_coeffs_rev.q.eval(ej, fj, ei, fi);
        }
        self
    }
}

/// Maximum and summed absolute violation of one constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FamilyViolation {
    pub max: f64,
    pub total: f64,
}

impl FamilyViolation {
    fn push(&mut self, v: f64) {
        let v = if v.is_nan() { f64::INFINITY } else { v.max(0.0) };
        self.max = self.max.max(v);
        self.total += v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub p_balance: FamilyViolation,
    pub q_balance: FamilyViolation,
    /// Mismatch between stored flows and flows implied by the voltages.
    pub flow_definition: FamilyViolation,
    /// `|V_i| = v_i` at PV buses.
    pub pv_setpoint: FamilyViolation,
    pub line_limits: FamilyViolation,
    /// Voltage bounds at PV and REF buses.
    pub voltage_bounds: FamilyViolation,
    /// Voltage bounds at PQ buses. These are not part of the state set used by
    /// the learning penalty.
    pub voltage_bounds_pq: FamilyViolation,
    pub gen_p_bounds: FamilyViolation,
    pub gen_q_bounds: FamilyViolation,
    pub tol: f64,
    pub feasible: bool,
}

impl ViolationReport {
    pub fn families(&self) -> [(&'static str, FamilyViolation); 9] {
        [
            ("p_balance", self.p_balance),
            ("q_balance", self.q_balance),
            ("flow_definition", self.flow_definition),
            ("pv_setpoint", self.pv_setpoint),
            ("line_limits", self.line_limits),
            ("voltage_bounds", self.voltage_bounds),
            ("voltage_bounds_pq", self.voltage_bounds_pq),
            ("gen_p_bounds", self.gen_p_bounds),
            ("gen_q_bounds", self.gen_q_bounds),
        ]
    }

    pub fn max_violation(&self) -> f64 {
        self.families().iter().map(|(_, f)| f.max).fold(0.0, f64::max)
    }
}

/// Index bookkeeping for the ACOPF problem.
#[derive(Debug, Clone, Copy)]
pub struct AcopfLayout {
    pub n_gen: usize,
    pub state: StateLayout,
}

impl AcopfLayout {
    pub fn new(net: &Network) -> Self {
        Self { n_gen: net.n_gen(), state: net.state_layout() }
    }

    pub fn len(&self) -> usize {
        self.n_gen + self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p_gen(&self, g: usize) -> usize {
        g
    }

    pub(crate) fn state_cols(&self) -> StateCols {
        StateCols { layout: self.state, offset: self.n_gen }
    }
}

/// The ACOPF QCQP.
///
/// Equalities: real balance (B), reactive balance (B), flow definitions
/// (4L), angle reference, REF magnitude. Inequalities: forward and reverse
/// line limits (2L), voltage lower and upper (2B), then generator
/// `p ≥ p̲, p ≤ p̄, q ≥ q̲, q ≤ q̄` (4G).
pub fn build_acopf_qcqp(net: &Network, load: &LoadVector) -> Result<QcqpProblem, AcopfError> {
    check_len("load", 2 * net.n_bus(), load.values.len())?;
    let lay = AcopfLayout::new(net);
    let k = lay.len();
    let cols = lay.state_cols();
    let (nb, ng, nl) = (net.n_bus(), net.n_gen(), net.n_branch());

    let mut p = QcqpProblem::new(k);
    p.p0 = SparseMat::from_triplets(k, net.generators.iter().enumerate().map(|(g, gen)| (g, g, 2.0 * gen.c2)));
    p.q0 = SparseVec::from_pairs(k, net.generators.iter().enumerate().map(|(g, gen)| (g, gen.c1)));

    p.equalities = rows::balance_rows(net, &load.values, k, cols, &|g| RealPower::Var(lay.p_gen(g)));
    p.equalities.extend(rows::flow_rows(net, k, cols));
    p.equalities.extend(rows::reference_rows(net, k, cols));

    let mut ineq = Vec::with_capacity(2 * nl + 2 * nb + 4 * ng);
    for rev in [false, true] {
        for (l, br) in net.branches.iter().enumerate() {
            let (pc, qc) = if rev { (cols.p_rev(l), cols.q_rev(l)) } else { (cols.p_fwd(l), cols.q_fwd(l)) };
            let mat = SparseMat::from_triplets(k, [(pc, pc, 2.0), (qc, qc, 2.0)]);
            ineq.push(QuadForm::new(mat, SparseVec::zeros(k), -br.s_max * br.s_max));
        }
    }
    for upper in [false, true] {
        for (i, bus) in net.buses.iter().enumerate() {
            let sign = if upper { 1.0 } else { -1.0 };
            let bound = if upper { bus.v_max } else { bus.v_min };
            let mat = SparseMat::from_triplets(k, [(cols.e(i), cols.e(i), 2.0 * sign), (cols.f(i), cols.f(i), 2.0 * sign)]);
            ineq.push(QuadForm::new(mat, SparseVec::zeros(k), -sign * bound * bound));
        }
    }
    for (g, gen) in net.generators.iter().enumerate() {
        ineq.push(rows::bound_row(k, lay.p_gen(g), -1.0, gen.p_min));
    }
    for (g, gen) in net.generators.iter().enumerate() {
        ineq.push(rows::bound_row(k, lay.p_gen(g), 1.0, -gen.p_max));
    }
    for (g, gen) in net.generators.iter().enumerate() {
        ineq.push(rows::bound_row(k, cols.q_gen(g), -1.0, gen.q_min));
    }
    for (g, gen) in net.generators.iter().enumerate() {
        ineq.push(rows::bound_row(k, cols.q_gen(g), 1.0, -gen.q_max));
    }
    p.inequalities = ineq;
    Ok(p)
}

/// `Σ c₂ p² + c₁ p`.
pub fn generation_cost(net: &Network, p_gen: &[f64]) -> Result<f64, AcopfError> {
    check_len("p_gen", net.n_gen(), p_gen.len())?;
    Ok(net.generators.iter().zip(p_gen).map(|(g, &p)| g.c2 * p * p + g.c1 * p).sum())
}

/// State penalty: hinge on reactive generation bounds plus hinge on squared
/// apparent-power line limits, with its subgradient (zero at kinks).
pub fn penalty_r_cs(net: &Network, y_s: &StateVector) -> Result<(f64, StateVector), AcopfError> {
    y_s.check(net)?;
    let mut grad = StateVector::zeros(net.state_layout());
    let mut value = 0.0;
    for (g, gen) in net.generators.iter().enumerate() {
        let q = y_s.q_gen[g];
        if q < gen.q_min {
            value += gen.q_min - q;
            grad.q_gen[g] = -1.0;
        } else if q > gen.q_max {
            value += q - gen.q_max;
            grad.q_gen[g] = 1.0;
        }
    }
    for (l, br) in net.branches.iter().enumerate() {
        let s2 = br.s_max * br.s_max;
        let fwd = y_s.p_fwd[l].powi(2) + y_s.q_fwd[l].powi(2) - s2;
        if fwd > 0.0 {
            value += fwd;
            grad.p_fwd[l] = 2.0 * y_s.p_fwd[l];
            grad.q_fwd[l] = 2.0 * y_s.q_fwd[l];
        }
        let rev = y_s.p_rev[l].powi(2) + y_s.q_rev[l].powi(2) - s2;
        if rev > 0.0 {
            value += rev;
            grad.p_rev[l] = 2.0 * y_s.p_rev[l];
            grad.q_rev[l] = 2.0 * y_s.q_rev[l];
        }
    }
    Ok((value, grad))
}

/// Splits an ACOPF decision vector; PV magnitudes come from `|e + jf|`.
pub fn split_solution(net: &Network, z: &[f64]) -> Result<(ControlVector, StateVector), AcopfError> {
    let lay = AcopfLayout::new(net);
    check_len("z", lay.len(), z.len())?;
    let state = StateVector::from_slice(lay.state, &z[lay.n_gen..])?;
    let v_mag = net.pv_buses.iter().map(|&b| state.v_mag(b)).collect();
    Ok((ControlVector { p_gen: z[..lay.n_gen].to_vec(), v_mag }, state))
}

/// Inverse of [`split_solution`]; `v_mag` is implied by the state.
pub fn assemble_solution(y_c: &ControlVector, y_s: &StateVector) -> Vec<f64> {
    let mut z = y_c.p_gen.clone();
    z.extend(y_s.to_vec());
    z
}

/// Box `C_c` as `(low, high)` in [`ControlVector::to_vec`] order.
pub fn control_box(net: &Network) -> (Vec<f64>, Vec<f64>) {
    let mut low: Vec<f64> = net.generators.iter().map(|g| g.p_min).collect();
    let mut high: Vec<f64> = net.generators.iter().map(|g| g.p_max).collect();
    for &b in &net.pv_buses {
        low.push(net.buses[b].v_min);
        high.push(net.buses[b].v_max);
    }
    (low, high)
}

pub fn project_control_to_box(net: &Network, y_c: &ControlVector) -> Result<ControlVector, AcopfError> {
    y_c.check(net)?;
    let (low, high) = control_box(net);
    let clipped: Vec<f64> = y_c.to_vec().iter().zip(low.iter().zip(&high)).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect();
    ControlVector::from_slice(net, &clipped)
}

/// Residuals of every ACOPF constraint at `(y_c, y_s)`.
pub fn feasibility_check(
    net: &Network,
    load: &LoadVector,
    y_c: &ControlVector,
    y_s: &StateVector,
    tol: f64,
) -> Result<ViolationReport, AcopfError> {
    y_c.check(net)?;
    y_s.check(net)?;
    check_len("load", 2 * net.n_bus(), load.values.len())?;
    let lay = AcopfLayout::new(net);
    let z = assemble_solution(y_c, y_s);
    let k = lay.len();
    let cols = lay.state_cols();
    let nb = net.n_bus();

    let mut rep = ViolationReport {
        p_balance: FamilyViolation::default(),
        q_balance: FamilyViolation::default(),
        flow_definition: FamilyViolation::default(),
        pv_setpoint: FamilyViolation::default(),
        line_limits: FamilyViolation::default(),
        voltage_bounds: FamilyViolation::default(),
        voltage_bounds_pq: FamilyViolation::default(),
        gen_p_bounds: FamilyViolation::default(),
        gen_q_bounds: FamilyViolation::default(),
        tol,
        feasible: false,
    };
    let balance = rows::balance_rows(net, &load.values, k, cols, &|g| RealPower::Var(lay.p_gen(g)));
    for (r, row) in balance.iter().enumerate() {
        let v = row.value(&z).abs();
        if r < nb {
            rep.p_balance.push(v);
        } else {
            rep.q_balance.push(v);
        }
    }
    for row in rows::flow_rows(net, k, cols) {
        rep.flow_definition.push(row.value(&z).abs());
    }
    for (&b, &v) in net.pv_buses.iter().zip(&y_c.v_mag) {
        rep.pv_setpoint.push((y_s.v_mag(b) - v).abs());
    }
    for (l, br) in net.branches.iter().enumerate() {
        rep.line_limits.push(y_s.p_fwd[l].hypot(y_s.q_fwd[l]) - br.s_max);
        rep.line_limits.push(y_s.p_rev[l].hypot(y_s.q_rev[l]) - br.s_max);
    }
    for (i, bus) in net.buses.iter().enumerate() {
        let v = y_s.v_mag(i);
        let viol = (bus.v_min - v).max(v - bus.v_max);
        if net.index_maps.gens_at_bus[i].is_empty() {
            rep.voltage_bounds_pq.push(viol);
        } else {
            rep.voltage_bounds.push(viol);
        }
    }
    for (g, gen) in net.generators.iter().enumerate() {
        rep.gen_p_bounds.push((gen.p_min - y_c.p_gen[g]).max(y_c.p_gen[g] - gen.p_max));
        rep.gen_q_bounds.push((gen.q_min - y_s.q_gen[g]).max(y_s.q_gen[g] - gen.q_max));
    }
    rep.feasible = rep.max_violation() <= tol;
    Ok(rep)
}

/// Flat-start point for the ACOPF: mid-range generation, `e = v_set` at the
/// reference and 1 elsewhere, `f = 0`, consistent flows.
pub fn flat_start(net: &Network) -> Vec<f64> {
    let lay = AcopfLayout::new(net);
    let mut state = StateVector::zeros(lay.state);
    for (i, bus) in net.buses.iter().enumerate() {
        state.e[i] = if i == net.ref_bus { bus.v_set } else { 1.0 };
    }
    for (g, gen) in net.generators.iter().enumerate() {
        state.q_gen[g] = 0.5 * (gen.q_min + gen.q_max);
    }
    let state = state.with_flows_from_voltages(net);
    let p_gen: Vec<f64> = net.generators.iter().map(|g| 0.5 * (g.p_min + g.p_max)).collect();
    assemble_solution(&ControlVector { p_gen, v_mag: vec![1.0; net.n_pv()] }, &state)
}

/// A solved ACOPF instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcopfSolution {
    pub control: ControlVector,
    pub state: StateVector,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Set when the strict problem failed and the balance rows were softened.
    pub softened: bool,
    /// `‖σ‖₁` of the balance slacks when softened.
    pub balance_slack_l1: f64,
}

/// Solves the ACOPF from a flat start.
pub fn solve_acopf(net: &Network, load: &LoadVector, opts: &SolverOptions) -> Result<AcopfSolution, AcopfError> {
    let p = build_acopf_qcqp(net, load)?;
    let sol = qcqp::solve(&p, Some(&flat_start(net)), opts)?;
    let (control, state) = split_solution(net, &sol.z)?;
    Ok(AcopfSolution {
        objective: generation_cost(net, &control.p_gen)?,
        control,
        state,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        softened: false,
        balance_slack_l1: 0.0,
    })
}

/// ACOPF with the balance rows softened by `σ = σ⁺ − σ⁻` on the demands and
/// `penalty · Σ(σ⁺ + σ⁻)` added to the cost.
pub fn build_soft_acopf_qcqp(net: &Network, load: &LoadVector, penalty: f64) -> Result<QcqpProblem, AcopfError> {
    let strict = build_acopf_qcqp(net, load)?;
    let nb = net.n_bus();
    let k0 = strict.k;
    let k = k0 + 4 * nb;
    let mut p = QcqpProblem::new(k);
    let widen = |q: &QuadForm| QuadForm::new(q.mat.widened(k), q.lin.widened(k), q.constant);
    p.p0 = strict.p0.widened(k);
    let mut q0 = strict.q0.widened(k);
    for j in k0..k {
        q0.add(j, penalty);
    }
    p.q0 = q0;
    p.equalities = strict.equalities.iter().map(widen).collect();
    for r in 0..2 * nb {
        p.equalities[r].lin.add(k0 + r, 1.0);
        p.equalities[r].lin.add(k0 + 2 * nb + r, -1.0);
    }
    p.inequalities = strict.inequalities.iter().map(widen).collect();
    for j in k0..k {
        p.inequalities.push(rows::bound_row(k, j, -1.0, 0.0));
    }
    Ok(p)
}

/// Balance slack below which a softened solution counts as strictly feasible.
const ZERO_SLACK: f64 = 1e-8;

/// Strict ACOPF, falling back to the softened problem when the strict solve
/// does not reach optimality. A softened optimum without slack is re-solved
/// strictly from that point and reported unsoftened if that succeeds.
pub fn solve_acopf_soft(
    net: &Network,
    load: &LoadVector,
    penalty: f64,
    opts: &SolverOptions,
) -> Result<AcopfSolution, AcopfError> {
    let strict = solve_acopf(net, load, opts)?;
    if strict.status == SolveStatus::Optimal {
        return Ok(strict);
    }
    let p = build_soft_acopf_qcqp(net, load, penalty)?;
    let mut x0 = flat_start(net);
    let k0 = x0.len();
    x0.resize(p.k, 0.0);
    let (_, eq) = p.eval_constraints(&x0)?;
    for (r, &res) in eq.iter().take(2 * net.n_bus()).enumerate() {
        // Row value with zero slacks is `res`; start the slack pair at −res.
        if res < 0.0 {
            x0[k0 + r] = -res;
        } else {
            x0[k0 + 2 * net.n_bus() + r] = res;
        }
    }
    let sol: QcqpSolution = qcqp::solve(&p, Some(&x0), opts)?;
    let balance_slack_l1: f64 = sol.z[k0..].iter().map(|v| v.abs()).sum();

    // A zero-slack soft optimum is a strict KKT point up to the slack rows,
    // so the strict problem usually converges from it.
    if sol.status == SolveStatus::Optimal && balance_slack_l1 <= ZERO_SLACK {
        let strict_p = build_acopf_qcqp(net, load)?;
        let warm = qcqp::WarmStart {
            z: sol.z[..k0].to_vec(),
            nu: sol.nu[..strict_p.m_i()].to_vec(),
            lambda: sol.lambda[..strict_p.m_e()].to_vec(),
        };
        let polished = qcqp::solve_warm(&strict_p, &warm, opts)?;
        if polished.status == SolveStatus::Optimal {
            let (control, state) = split_solution(net, &polished.z)?;
            return Ok(AcopfSolution {
                objective: generation_cost(net, &control.p_gen)?,
                control,
                state,
                status: polished.status,
                kkt_residual: polished.kkt_residual,
                iterations: strict.iterations + sol.iterations + polished.iterations,
                softened: false,
                balance_slack_l1: 0.0,
            });
        }
    }

    let (control, state) = split_solution(net, &sol.z[..k0])?;
    Ok(AcopfSolution {
        objective: generation_cost(net, &control.p_gen)?,
        control,
        state,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations + strict.iterations,
        softened: true,
        balance_slack_l1,
    })
}

#[cfg(test)]
mod tests;
