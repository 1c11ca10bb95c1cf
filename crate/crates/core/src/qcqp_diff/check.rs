//! Central-difference validation of the analytic gradients.

use serde::{Deserialize, Serialize};

use super::{backward, DiffError, Param};
use crate::qcqp::{solve_warm, QcqpProblem, QcqpSolution, SolveStatus, SolverOptions, WarmStart};

/// Scalar loss of the primal solution.
pub trait DownstreamLoss {
    fn value(&self, z: &[f64]) -> f64;
    fn grad(&self, z: &[f64]) -> Vec<f64>;
}

/// `cᵀz`.
#[derive(Debug, Clone)]
pub struct LinearLoss {
    pub c: Vec<f64>,
}

impl DownstreamLoss for LinearLoss {
    fn value(&self, z: &[f64]) -> f64 {
        self.c.iter().zip(z).map(|(c, z)| c * z).sum()
    }

    fn grad(&self, _z: &[f64]) -> Vec<f64> {
        self.c.clone()
    }
}

/// `½ w ‖z − target‖²`.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub target: Vec<f64>,
    pub weight: f64,
}

impl DownstreamLoss for QuadraticLoss {
    fn value(&self, z: &[f64]) -> f64 {
        0.5 * self.weight * z.iter().zip(&self.target).map(|(z, t)| (z - t) * (z - t)).sum::<f64>()
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.target).map(|(z, t)| self.weight * (z - t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub param: Param,
    pub analytic: f64,
    /// `None` when a perturbed solve failed.
    pub numeric: Option<f64>,
    pub rel_err: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub subgradient: bool,
}

impl FdReport {
    fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().filter_map(|e| e.rel_err)
    }

    /// Largest relative error over entries whose perturbed solves succeeded.
    pub fn max_rel_err(&self) -> f64 {
        self.errors().fold(0.0, f64::max)
    }

    /// Fraction of successfully checked entries with `rel_err ≤ tol`.
    pub fn pass_fraction(&self, tol: f64) -> f64 {
        let (mut ok, mut n) = (0usize, 0usize);
        for e in self.errors() {
            n += 1;
            if e <= tol {
                ok += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            ok as f64 / n as f64
        }
    }

    pub fn n_failed(&self) -> usize {
        self.entries.iter().filter(|e| e.numeric.is_none()).count()
    }
}

/// Compares backward-mode gradients of `loss ∘ solve` against central
/// differences with step `h`, re-solving each perturbed problem warm-started
/// from `s`.
pub fn finite_diff_check(
    p: &QcqpProblem,
    s: &QcqpSolution,
    loss: &dyn DownstreamLoss,
    h: f64,
    which: &[Param],
    opts: &SolverOptions,
) -> Result<FdReport, DiffError> {
    let grads = backward(p, s, &loss.grad(&s.z))?;
    let warm = WarmStart::from(s);
    let solve_at = |param: Param, delta: f64| -> Result<f64, String> {
        let mut q = p.clone();
        param.perturb(&mut q, delta);
        match solve_warm(&q, &warm, opts) {
            Ok(sol) if sol.status == SolveStatus::Optimal => Ok(loss.value(&sol.z)),
            Ok(sol) => Err(format!("perturbed solve ended with {:?}", sol.status)),
            Err(e) => Err(e.to_string()),
        }
    };
    let entries = which
        .iter()
        .map(|&param| {
            let analytic = grads.get(param);
            match solve_at(param, h).and_then(|up| Ok((up, solve_at(param, -h)?))) {
                Ok((up, down)) => {
                    let numeric = (up - down) / (2.0 * h);
                    let rel_err = (analytic - numeric).abs() / numeric.abs().max(1.0);
                    FdEntry { param, analytic, numeric: Some(numeric), rel_err: Some(rel_err), failure: None }
                }
                Err(msg) => FdEntry { param, analytic, numeric: None, rel_err: None, failure: Some(msg) },
            }
        })
        .collect();
    Ok(FdReport { entries, subgradient: grads.subgradient })
}
