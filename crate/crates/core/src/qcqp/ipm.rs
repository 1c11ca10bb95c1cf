//! Primal-dual interior-point method with slack variables.
//!
//! Each iteration solves the reduced Newton system
//!
//! ```text
//! [ W + J_Iᵀ S⁻¹N J_I + δ_w I    J_Eᵀ  ] [dx]   [ −(∇f + J_Eᵀλ) − J_Iᵀ S⁻¹(γe + N(h + s)) ]
//! [ J_E                         −δ_c I ] [dλ] = [ −g                                      ]
//! ```
//!
//! with `δ_w` raised until the matrix has inertia `(k, m_E, 0)`. Steps are
//! cut by fraction-to-the-boundary and an ℓ1 merit line search. Once the
//! barrier parameter is small the active set is guessed and an equality-
//! constrained Newton polish drives the KKT residual to round-off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{kkt_components, QcqpError, QcqpProblem, QcqpSolution, QuadForm, RestartPolicy, SolveStatus, SolverOptions};
use crate::linalg::{self, LdlFactor, LuFactor, SparseVec};

const TAU: f64 = 0.99995;
const SIGMA: f64 = 0.1;
const MAX_GRAD_SCALE: f64 = 100.0;

/// Primal-dual starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl From<&QcqpSolution> for WarmStart {
    fn from(s: &QcqpSolution) -> Self {
        Self { z: s.z.clone(), nu: s.nu.clone(), lambda: s.lambda.clone() }
    }
}

struct Attempt {
    z: Vec<f64>,
    nu: Vec<f64>,
    lambda: Vec<f64>,
    status: SolveStatus,
    iters: usize,
    residual: f64,
}

/// Solves from a primal start (zeros when absent) with perturbed restarts.
pub fn solve(p: &QcqpProblem, init: Option<&[f64]>, opts: &SolverOptions) -> Result<QcqpSolution, QcqpError> {
    p.validate()?;
    let x0 = match init {
        Some(z) => {
            if z.len() != p.k {
                return Err(QcqpError::Dimension { what: "init".into(), expected: p.k, got: z.len() });
            }
            z.to_vec()
        }
        None => vec![0.0; p.k],
    };
    Ok(multistart(p, &x0, opts))
}

/// Returns immediately when the start already satisfies the KKT tolerance;
/// otherwise tries an active-set polish from it before falling back to [`solve`].
pub fn solve_warm(p: &QcqpProblem, warm: &WarmStart, opts: &SolverOptions) -> Result<QcqpSolution, QcqpError> {
    p.validate()?;
    for (what, got, expected) in
        [("z", warm.z.len(), p.k), ("nu", warm.nu.len(), p.m_i()), ("lambda", warm.lambda.len(), p.m_e())]
    {
        if got != expected {
            return Err(QcqpError::Dimension { what: what.into(), expected, got });
        }
    }
    let res = kkt_components(p, &warm.z, &warm.nu, &warm.lambda).max();
    if res <= opts.kkt_tol {
        return Ok(finish(p, warm.z.clone(), warm.nu.clone(), warm.lambda.clone(), SolveStatus::Optimal, 0, opts));
    }
    let active: Vec<usize> = (0..p.m_i()).filter(|&i| warm.nu[i] > 1e-10).collect();
    if let Some((z, nu, lambda)) = polish(p, &warm.z, &warm.lambda, &warm.nu, &active, opts) {
        return Ok(finish(p, z, nu, lambda, SolveStatus::Optimal, 0, opts));
    }
    Ok(multistart(p, &warm.z, opts))
}

fn finish(
    p: &QcqpProblem,
    z: Vec<f64>,
    nu: Vec<f64>,
    lambda: Vec<f64>,
    status: SolveStatus,
    iterations: usize,
    opts: &SolverOptions,
) -> QcqpSolution {
    let mut s = QcqpSolution::from_point(p, z, nu, lambda, status, opts.activity_tol);
    s.iterations = iterations;
    s
}

fn multistart(p: &QcqpProblem, x0: &[f64], opts: &SolverOptions) -> QcqpSolution {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut budget = opts.max_iter;
    let mut used = 0;
    let mut best: Option<Attempt> = None;
    let mut fallback: Option<Attempt> = None;
    let mut all_diverged = true;

    for r in 0..=opts.n_restarts {
        if budget == 0 {
            break;
        }
        let start: Vec<f64> = if r == 0 {
            x0.to_vec()
        } else {
            let amp = 0.25 * r as f64;
            x0.iter().map(|&v| v + amp * (1.0 + v.abs()) * rng.random_range(-1.0..1.0)).collect()
        };
        let att = ipm(p, &start, opts, budget);
        budget -= att.iters.min(budget);
        used += att.iters;
        if att.status != SolveStatus::Diverged {
            all_diverged = false;
        }
        if att.status == SolveStatus::Optimal {
            let better = best.as_ref().is_none_or(|b| p.objective(&att.z) < p.objective(&b.z));
            if better {
                best = Some(att);
            }
            if opts.restart_policy == RestartPolicy::OnFailure {
                break;
            }
        } else if fallback.as_ref().is_none_or(|f| att.residual < f.residual || f.residual.is_nan()) {
            fallback = Some(att);
        }
    }

    if let Some(b) = best {
        return finish(p, b.z, b.nu, b.lambda, SolveStatus::Optimal, used, opts);
    }
    let f = fallback.expect("at least one attempt ran");
    let status = if all_diverged {
        SolveStatus::Diverged
    } else if is_infeasible(p, &f.z, opts) {
        SolveStatus::Infeasible
    } else {
        SolveStatus::MaxIter
    };
    log::debug!("qcqp solve failed: {status:?}, residual {:.3e} after {used} iterations", f.residual);
    finish(p, f.z, f.nu, f.lambda, status, used, opts)
}

/// Phase-1 check: minimizes the ℓ1 constraint violation with elastic
/// variables and reports whether the minimum stays above the tolerance.
fn is_infeasible(p: &QcqpProblem, z: &[f64], opts: &SolverOptions) -> bool {
    let (k, mi, me) = (p.k, p.m_i(), p.m_e());
    let n = k + 2 * me + mi;
    let (h, g) = p.constraints(z);
    let widen = |c: &QuadForm| QuadForm::new(c.mat.widened(n), c.lin.widened(n), c.constant);
    let mut e = QcqpProblem::new(n);
    e.q0 = SparseVec::from_pairs(n, (k..n).map(|i| (i, 1.0)));
    for (j, c) in p.equalities.iter().enumerate() {
        let mut f = widen(c);
        f.lin.add(k + j, -1.0);
        f.lin.add(k + me + j, 1.0);
        e.equalities.push(f);
    }
    for (i, c) in p.inequalities.iter().enumerate() {
        let mut f = widen(c);
        f.lin.add(k + 2 * me + i, -1.0);
        e.inequalities.push(f);
    }
    for v in k..n {
        e.inequalities.push(QuadForm::linear(SparseVec::from_pairs(n, [(v, -1.0)]), 0.0));
    }
    let mut x0 = z.to_vec();
    x0.extend(g.iter().map(|v| v.max(0.0)));
    x0.extend(g.iter().map(|v| (-v).max(0.0)));
    x0.extend(h.iter().map(|v| v.max(0.0)));
    let phase1_opts = SolverOptions { kkt_tol: opts.kkt_tol.max(1e-9), ..opts.clone() };
    let att = ipm(&e, &x0, &phase1_opts, opts.max_iter.max(100));
    let violation: f64 = att.z[k..].iter().sum();
    log::debug!("phase-1 status {:?}, violation {violation:.3e}", att.status);
    att.status == SolveStatus::Optimal && violation > opts.infeasibility_tol
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn ipm(p: &QcqpProblem, x0: &[f64], opts: &SolverOptions, budget: usize) -> Attempt {
    let (k, mi, me) = (p.k, p.m_i(), p.m_e());
    let n = k + me;
    let mut x = x0.to_vec();

    let g0 = linalg::norm_inf(&p.objective_grad(&x));
    let sf = if g0 > MAX_GRAD_SCALE { MAX_GRAD_SCALE / g0 } else { 1.0 };

    let (h, _) = p.constraints(&x);
    let mut s: Vec<f64> = h.iter().map(|&v| (-v).max(1.0)).collect();
    let mut nu: Vec<f64> = s.iter().map(|&si| 1.0 / si).collect();
    let mut lam = vec![0.0; me];
    let mut rho: f64 = 1.0;
    let mut delta_last = 0.0;
    let mut last_polish_mu = f64::INFINITY;
    let mut short_steps = 0;
    let unscale = |v: &[f64]| v.iter().map(|x| x / sf).collect::<Vec<f64>>();

    let mut iters = 0;
    let mut status = SolveStatus::MaxIter;
    let mut kkt = vec![0.0; n * n];
    loop {
        let (h, g) = p.constraints(&x);
        if !all_finite(&x) || !all_finite(&h) || !all_finite(&g) || linalg::norm_inf(&x) > 1e12 {
            status = SolveStatus::Diverged;
            break;
        }
        let (nu_u, lam_u) = (unscale(&nu), unscale(&lam));
        let res = kkt_components(p, &x, &nu_u, &lam_u).max();
        if res <= opts.kkt_tol {
            status = SolveStatus::Optimal;
            break;
        }
        let mu = if mi > 0 { linalg::dot(&s, &nu) / mi as f64 } else { 0.0 };
        let feas = h.iter().fold(linalg::norm_inf(&g), |m, &v| m.max(v));
        if mu < 1e-3 && feas < 1e-3 && (mu < 0.1 * last_polish_mu || (mi == 0 && last_polish_mu.is_infinite())) {
            last_polish_mu = mu.max(f64::MIN_POSITIVE);
            let active: Vec<usize> = (0..mi).filter(|&i| nu[i] > s[i]).collect();
            if let Some((z2, nu2, lam2)) = polish(p, &x, &lam_u, &nu_u, &active, opts) {
                return Attempt { z: z2, nu: nu2, lambda: lam2, status: SolveStatus::Optimal, iters, residual: 0.0 };
            }
        }
        if iters >= budget {
            break;
        }
        iters += 1;

        let jac_i: Vec<Vec<(usize, f64)>> = p.inequalities.iter().map(|c| c.grad_sparse(&x)).collect();
        let jac_e: Vec<Vec<(usize, f64)>> = p.equalities.iter().map(|c| c.grad_sparse(&x)).collect();
        let gamma = SIGMA * mu;
        let mut grad_f = p.objective_grad(&x);
        grad_f.iter_mut().for_each(|v| *v *= sf);

        kkt.iter_mut().for_each(|v| *v = 0.0);
        p.p0.sym_add_to(sf, &mut kkt, n, 0);
        for (c, &w) in p.inequalities.iter().zip(&nu) {
            c.mat.sym_add_to(w, &mut kkt, n, 0);
        }
        for (c, &w) in p.equalities.iter().zip(&lam) {
            if w != 0.0 {
                c.mat.sym_add_to(w, &mut kkt, n, 0);
            }
        }
        for i in 0..mi {
            let w = nu[i] / s[i];
            for &(a, va) in &jac_i[i] {
                for &(b, vb) in &jac_i[i] {
                    kkt[a * n + b] += w * va * vb;
                }
            }
        }
        for (j, row) in jac_e.iter().enumerate() {
            for &(a, va) in row {
                kkt[(k + j) * n + a] += va;
                kkt[a * n + k + j] += va;
            }
        }

        let mut rhs = vec![0.0; n];
        for a in 0..k {
            rhs[a] = -grad_f[a];
        }
        for (j, row) in jac_e.iter().enumerate() {
            for &(a, va) in row {
                rhs[a] -= lam[j] * va;
            }
            rhs[k + j] = -g[j];
        }
        for i in 0..mi {
            let coef = (gamma + nu[i] * (h[i] + s[i])) / s[i];
            for &(a, va) in &jac_i[i] {
                rhs[a] -= coef * va;
            }
        }

        let Some((fact, delta_w)) = factor_with_inertia(&kkt, k, me, mu, &mut delta_last) else {
            break;
        };
        let sol = fact.solve(&rhs);
        if !all_finite(&sol) {
            status = SolveStatus::Diverged;
            break;
        }
        let dx = &sol[..k];
        let dlam = &sol[k..];
        let jdx: Vec<f64> = jac_i.iter().map(|row| row.iter().map(|&(a, v)| v * dx[a]).sum()).collect();
        let ds: Vec<f64> = (0..mi).map(|i| -(h[i] + s[i]) - jdx[i]).collect();
        let dnu: Vec<f64> = (0..mi).map(|i| -nu[i] + (gamma - nu[i] * ds[i]) / s[i]).collect();

        let mut alpha_p: f64 = 1.0;
        let mut alpha_d: f64 = 1.0;
        for i in 0..mi {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-TAU * s[i] / ds[i]);
            }
            if dnu[i] < 0.0 {
                alpha_d = alpha_d.min(-TAU * nu[i] / dnu[i]);
            }
        }

        // ℓ1 merit on the scaled barrier problem.
        let infeas = |g: &[f64], h: &[f64], s: &[f64]| -> f64 {
            g.iter().map(|v| v.abs()).sum::<f64>() + h.iter().zip(s).map(|(a, b)| (a + b).abs()).sum::<f64>()
        };
        let barrier = |s: &[f64]| -> f64 { s.iter().map(|v| v.ln()).sum::<f64>() };
        let inf0 = infeas(&g, &h, &s);
        let mut lin = linalg::dot(&grad_f, dx);
        for i in 0..mi {
            lin -= gamma * ds[i] / s[i];
        }
        if inf0 > 1e-14 {
            let mut curv = sf * p.p0.quad(dx) + delta_w * linalg::dot(dx, dx);
            for (c, &w) in p.inequalities.iter().zip(&nu) {
                curv += w * c.mat.quad(dx);
            }
            for (c, &w) in p.equalities.iter().zip(&lam) {
                curv += w * c.mat.quad(dx);
            }
            for i in 0..mi {
                curv += nu[i] / s[i] * jdx[i] * jdx[i];
            }
            let need = (lin + 0.5 * curv.max(0.0)) / (0.9 * inf0);
            if need > rho {
                rho = (2.0 * need).max(rho * 1.5);
            }
        }
        let slope = lin - rho * inf0;
        let phi0 = sf * p.objective(&x) - gamma * barrier(&s) + rho * inf0;
        let mut alpha = alpha_p;
        let mut accepted = slope >= 0.0;
        let (mut xt, mut st) = (x.clone(), s.clone());
        for _ in 0..30 {
            for a in 0..k {
                xt[a] = x[a] + alpha * dx[a];
            }
            for i in 0..mi {
                st[i] = s[i] + alpha * ds[i];
            }
            if accepted {
                break;
            }
            let (ht, gt) = p.constraints(&xt);
            let phi = sf * p.objective(&xt) - gamma * barrier(&st) + rho * infeas(&gt, &ht, &st);
            if phi.is_finite() && phi <= phi0 + 1e-4 * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No merit decrease along the Newton direction; take the short step anyway.
            short_steps += 1;
        } else if alpha < 1e-8 {
            short_steps += 1;
        } else {
            short_steps = 0;
        }
        if short_steps >= 8 {
            break;
        }
        let alpha_dual = if alpha < alpha_p { alpha_d.min(alpha.max(1e-3 * alpha_d)) } else { alpha_d };
        x = xt;
        s = st;
        for i in 0..mi {
            nu[i] += alpha_dual * dnu[i];
        }
        for j in 0..me {
            lam[j] += alpha_dual * dlam[j];
        }
    }

    let (nu_u, lam_u) = (unscale(&nu), unscale(&lam));
    let residual = kkt_components(p, &x, &nu_u, &lam_u).max();
    Attempt { z: x, nu: nu_u, lambda: lam_u, status, iters, residual }
}

/// Factors the reduced KKT matrix, adding `δ_w I` to the primal block (and
/// `−δ_c I` to the dual block for rank-deficient equality Jacobians) until
/// the inertia is `(k, m_E, 0)`.
fn factor_with_inertia(
    kkt: &[f64],
    k: usize,
    me: usize,
    mu: f64,
    delta_last: &mut f64,
) -> Option<(LdlFactor, f64)> {
    let n = k + me;
    let mut dw = 0.0;
    let mut dc = 0.0;
    for _ in 0..80 {
        let mut a = kkt.to_vec();
        for i in 0..k {
            a[i * n + i] += dw;
        }
        for j in k..n {
            a[j * n + j] -= dc;
        }
        let f = LdlFactor::new(n, a);
        let inr = f.inertia();
        if inr.positive == k && inr.negative == me && inr.zero == 0 {
            if dw > 0.0 {
                *delta_last = dw;
            }
            return Some((f, dw));
        }
        if inr.zero > 0 && dc == 0.0 && me > 0 {
            dc = 1e-8 * mu.max(1e-12).powf(0.25);
            continue;
        }
        dw = if dw == 0.0 {
            if *delta_last == 0.0 {
                1e-4
            } else {
                (*delta_last / 3.0).max(1e-20)
            }
        } else if *delta_last == 0.0 {
            dw * 100.0
        } else {
            dw * 8.0
        };
        if dw > 1e40 {
            return None;
        }
    }
    None
}

/// Active-set Newton on `∇f + J_Eᵀλ + J_Aᵀν_A = 0, g = 0, h_A = 0`.
/// Succeeds when the full KKT residual reaches the tolerance with correct signs.
fn polish(
    p: &QcqpProblem,
    z: &[f64],
    lambda: &[f64],
    nu: &[f64],
    active: &[usize],
    opts: &SolverOptions,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (k, mi, me, na) = (p.k, p.m_i(), p.m_e(), active.len());
    let n = k + me + na;
    if me + na > k {
        return None;
    }
    let mut x = z.to_vec();
    let mut lam = lambda.to_vec();
    let mut nua: Vec<f64> = active.iter().map(|&i| nu[i]).collect();
    let full_nu = |nua: &[f64]| {
        let mut v = vec![0.0; mi];
        for (a, &i) in active.iter().enumerate() {
            v[i] = nua[a];
        }
        v
    };
    let scale = 1.0 + linalg::norm_inf(z);
    let mut prev = f64::INFINITY;
    for _ in 0..12 {
        let nu_full = full_nu(&nua);
        let res = kkt_components(p, &x, &nu_full, &lam).max();
        if res <= opts.kkt_tol {
            let dist = x.iter().zip(z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if dist > 1e-2 * scale {
                return None;
            }
            return Some((x, nu_full, lam));
        }
        if !(res < prev * 0.9 || prev.is_infinite()) {
            return None;
        }
        prev = res;

        let mut m = vec![0.0; n * n];
        p.p0.sym_add_to(1.0, &mut m, n, 0);
        for (a, &i) in active.iter().enumerate() {
            p.inequalities[i].mat.sym_add_to(nua[a], &mut m, n, 0);
        }
        for (c, &l) in p.equalities.iter().zip(&lam) {
            if l != 0.0 {
                c.mat.sym_add_to(l, &mut m, n, 0);
            }
        }
        let mut rhs = vec![0.0; n];
        let grad = p.lagrangian_grad(&x, &nu_full, &lam);
        for a in 0..k {
            rhs[a] = -grad[a];
        }
        let rows = p.equalities.iter().chain(active.iter().map(|&i| &p.inequalities[i]));
        for (r, c) in rows.enumerate() {
            for (a, v) in c.grad_sparse(&x) {
                m[(k + r) * n + a] += v;
                m[a * n + k + r] += v;
            }
            rhs[k + r] = -c.value(&x);
        }
        let lu = LuFactor::from_row_major(n, m).ok()?;
        let d = lu.solve(&rhs);
        if !all_finite(&d) {
            return None;
        }
        for a in 0..k {
            x[a] += d[a];
        }
        for j in 0..me {
            lam[j] += d[k + j];
        }
        for a in 0..na {
            nua[a] += d[k + me + a];
        }
    }
    None
}
