//! Load-to-control predictor trained on the bi-level loss
//!
//! ```text
//! L(g) = Σₙ ‖g(xⁿ) − y_cⁿ‖² + w · r_Cs(ŷ_sⁿ)
//! ```
//!
//! where `ŷ_sⁿ` is the state from the slack-relaxed power flow at the
//! predicted control. The penalty gradient reaches the network through
//! [`backward_control`].

mod adam;
mod mlp;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use mlp::{Dense, MlpModel, Trace};

use crate::acopf::{
    control_box, feasibility_check, generation_cost, penalty_r_cs, AcopfError, ControlVector, StateVector,
    ViolationReport,
};
use crate::grid::{LoadVector, Network};
use crate::powerflow::{backward_control, newton_pf, solve_relaxed_pf, RelaxedPfOptions};
use crate::qcqp_diff;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

/// Relaxed solutions with `‖σ‖₁` above this count as unsolvable power flows.
pub const SIGMA_SOLVABLE_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sample {index}: {source}")]
    Sample { index: usize, source: AcopfError },
    #[error("model expects input {expected_in} / output {expected_out}, network gives {got_in} / {got_out}")]
    Shape { expected_in: usize, expected_out: usize, got_in: usize, got_out: usize },
    #[error("empty dataset")]
    Empty,
    #[error("{0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Penalty weight `w`.
    pub w: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Tolerance of the feasibility ratio.
    pub feas_tol: f64,
    pub worker_count: usize,
    pub hidden_sizes: (usize, usize),
    pub pf: RelaxedPfOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w: 1.0,
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            feas_tol: 1e-5,
            worker_count: 1,
            hidden_sizes: (64, 32),
            pf: RelaxedPfOptions::default(),
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a run can be frozen.
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.into()));
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad("w must be finite and nonnegative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.feas_tol > 0.0) {
            return bad("feas_tol must be positive");
        }
        if self.hidden_sizes.0 == 0 || self.hidden_sizes.1 == 0 {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the fields that shape a training trajectory. The epoch
    /// budget and worker count are left out so that runs can be resumed
    /// with a longer budget or on another machine.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.worker_count = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One training or test example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: LoadVector,
    pub y_c_star: ControlVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_s_star: Option<StateVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_star: Option<f64>,
    /// Set when the reference came from the softened ACOPF.
    #[serde(default)]
    pub softened: bool,
}

impl Sample {
    pub fn check(&self, net: &Network) -> Result<(), AcopfError> {
        if self.x.values.len() != 2 * net.n_bus() {
            return Err(AcopfError::Dimension { what: "load", expected: 2 * net.n_bus(), got: self.x.values.len() });
        }
        self.y_c_star.check(net)?;
        if let Some(ys) = &self.y_s_star {
            ys.check(net)?;
        }
        Ok(())
    }
}

/// Per-epoch (or evaluation) summary. Losses are per-sample means, so
/// `total_loss = prediction_loss + w · penalty_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub prediction_loss: f64,
    pub penalty_loss: f64,
    pub total_loss: f64,
    /// Samples whose power flow needed a nonzero slack or whose relaxed
    /// solve failed.
    pub infeasible_pf_count: usize,
    /// Samples whose penalty term was dropped because the lower problem
    /// could not be solved or differentiated.
    pub solver_failures: usize,
    pub feasibility_ratio: f64,
    pub mean_sigma_l1: f64,
    pub wall_time: f64,
}

/// What one sample contributes to a batch.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub prediction_loss: f64,
    /// `None` when the penalty term was dropped.
    pub penalty_loss: Option<f64>,
    pub sigma_l1: f64,
    pub pf_solvable: bool,
    pub feasible: bool,
    pub subgradient: bool,
    pub grad: Vec<f64>,
}

/// Sums over a batch, in sample order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchTotals {
    pub n: usize,
    pub prediction_loss: f64,
    pub penalty_loss: f64,
    pub infeasible_pf_count: usize,
    pub solver_failures: usize,
    pub feasible_count: usize,
    pub sigma_l1: f64,
}

impl BatchTotals {
    fn add(&mut self, o: &SampleOutcome) {
        self.n += 1;
        self.prediction_loss += o.prediction_loss;
        match o.penalty_loss {
            Some(p) => self.penalty_loss += p,
            None => self.solver_failures += 1,
        }
        self.infeasible_pf_count += usize::from(!o.pf_solvable);
        self.feasible_count += usize::from(o.feasible);
        self.sigma_l1 += o.sigma_l1;
    }

    fn merge(&mut self, o: &BatchTotals) {
        self.n += o.n;
        self.prediction_loss += o.prediction_loss;
        self.penalty_loss += o.penalty_loss;
        self.infeasible_pf_count += o.infeasible_pf_count;
        self.solver_failures += o.solver_failures;
        self.feasible_count += o.feasible_count;
        self.sigma_l1 += o.sigma_l1;
    }

    /// Total loss of the batch, `Σ pred + w Σ pen`.
    pub fn total(&self, w: f64) -> f64 {
        self.prediction_loss + w * self.penalty_loss
    }

    fn metrics(&self, epoch: usize, w: f64, wall_time: f64) -> EpochMetrics {
        let n = self.n.max(1) as f64;
        let prediction_loss = self.prediction_loss / n;
        let penalty_loss = self.penalty_loss / n;
        EpochMetrics {
            epoch,
            prediction_loss,
            penalty_loss,
            total_loss: prediction_loss + w * penalty_loss,
            infeasible_pf_count: self.infeasible_pf_count,
            solver_failures: self.solver_failures,
            feasibility_ratio: self.feasible_count as f64 / n,
            mean_sigma_l1: self.sigma_l1 / n,
            wall_time,
        }
    }
}

/// Anything that maps a load vector to a control vector.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Vec<f64>;
}

impl Predictor for MlpModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x)
    }
}

/// Checks that `model` maps this network's loads to its controls.
pub fn check_shape(model: &impl Predictor, net: &Network) -> Result<(), LearnError> {
    let got_in = 2 * net.n_bus();
    let got_out = net.n_gen() + net.n_pv();
    if model.input_dim() != got_in || model.output_dim() != got_out {
        return Err(LearnError::Shape {
            expected_in: model.input_dim(),
            expected_out: model.output_dim(),
            got_in,
            got_out,
        });
    }
    Ok(())
}

/// Loss and parameter gradient of a single sample.
///
/// A lower-level failure drops the penalty term and its gradient; the
/// prediction term is always kept.
pub fn sample_loss_and_grad(model: &MlpModel, sample: &Sample, net: &Network, cfg: &TrainConfig) -> SampleOutcome {
    let trace = model.forward_trace(&sample.x.values);
    let target = sample.y_c_star.to_vec();
    let mut d_out: Vec<f64> = trace.output.iter().zip(&target).map(|(y, t)| 2.0 * (y - t)).collect();
    let prediction_loss = trace.output.iter().zip(&target).map(|(y, t)| (y - t).powi(2)).sum();
    let y_c = ControlVector::from_slice(net, &trace.output).expect("model output matches the network");

    let mut out = SampleOutcome {
        prediction_loss,
        penalty_loss: None,
        sigma_l1: 0.0,
        pf_solvable: false,
        feasible: false,
        subgradient: false,
        grad: Vec::new(),
    };
    match solve_relaxed_pf(net, &y_c, &sample.x, &cfg.pf) {
        Ok(res) if qcqp_diff::usable(&res.qcqp_solution).is_ok() => {
            out.sigma_l1 = res.sigma_l1;
            out.pf_solvable = res.sigma_l1 <= SIGMA_SOLVABLE_TOL;
            if out.pf_solvable {
                let realized = res.realized_control(net, &y_c);
                out.feasible = feasibility_check(net, &sample.x, &realized, &res.y_s, cfg.feas_tol)
                    .map(|r| r.feasible)
                    .unwrap_or(false);
            }
            let (pen, grad_state) = penalty_r_cs(net, &res.y_s).expect("state matches the network");
            if pen > 0.0 && cfg.w > 0.0 {
                match backward_control(net, &y_c, &sample.x, &res, &grad_state) {
                    Ok(cg) => {
                        out.penalty_loss = Some(pen);
                        out.subgradient = cg.subgradient;
                        for (d, g) in d_out.iter_mut().zip(&cg.grad) {
                            *d += cfg.w * g;
                        }
                    }
                    Err(e) => debug!("penalty gradient dropped: {e}"),
                }
            } else {
                out.penalty_loss = Some(pen);
            }
        }
        Ok(res) => debug!("relaxed power flow unusable: {:?}", res.solve_status),
        Err(e) => debug!("relaxed power flow failed: {e}"),
    }
    out.grad = model.backward(&trace, &d_out);
    out
}

/// Batch loss and summed parameter gradient. Samples are solved in
/// parallel on the current rayon pool and reduced in order, so the result
/// does not depend on the number of threads.
pub fn loss_and_grad(
    model: &MlpModel,
    batch: &[&Sample],
    net: &Network,
    cfg: &TrainConfig,
) -> (BatchTotals, Vec<f64>) {
    let outcomes: Vec<SampleOutcome> =
        batch.par_iter().map(|s| sample_loss_and_grad(model, s, net, cfg)).collect();
    let mut totals = BatchTotals::default();
    let mut grad = vec![0.0; model.n_params()];
    for o in &outcomes {
        totals.add(o);
        for (g, v) in grad.iter_mut().zip(&o.grad) {
            *g += v;
        }
    }
    (totals, grad)
}

/// Model plus optimizer state after some number of completed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: MlpModel,
    pub adam: AdamState,
    pub epoch: usize,
}

/// Checkpoint file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: TrainConfig,
    pub state: TrainState,
    /// Training metrics of the epochs completed so far.
    #[serde(default)]
    pub history: Vec<EpochMetrics>,
    /// Test-set metrics recorded along the way, if any.
    #[serde(default)]
    pub test_history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, state: TrainState) -> Self {
        Checkpoint { config_hash: cfg.hash(), config: cfg.clone(), state, history: Vec::new(), test_history: Vec::new() }
    }
}

/// A seeded model for `net` with inputs standardized over `data` and output
/// biases at the mean reference control.
pub fn init_model(net: &Network, data: &[Sample], cfg: &TrainConfig) -> MlpModel {
    let (low, high) = control_box(net);
    let mut model = MlpModel::new(2 * net.n_bus(), cfg.hidden_sizes, low, high, cfg.seed);
    model.fit_standardization(data.iter().map(|s| s.x.values.as_slice()));
    let targets: Vec<Vec<f64>> = data.iter().map(|s| s.y_c_star.to_vec()).collect();
    model.fit_output_bias(targets.iter().map(Vec::as_slice));
    model
}

fn check_data(net: &Network, data: &[Sample]) -> Result<(), LearnError> {
    if data.is_empty() {
        return Err(LearnError::Empty);
    }
    for (index, s) in data.iter().enumerate() {
        s.check(net).map_err(|source| LearnError::Sample { index, source })?;
    }
    Ok(())
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool")
}

/// Sample order of an epoch, a pure function of seed and epoch number.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(net: &Network, data: &[Sample], cfg: &TrainConfig) -> Result<(MlpModel, Vec<EpochMetrics>), LearnError> {
    check_data(net, data)?;
    let model = init_model(net, data, cfg);
    let state = TrainState { adam: AdamState::new(model.n_params()), model, epoch: 0 };
    let (state, metrics) = train_from(net, data, cfg, state, |_, _| Ok(()))?;
    Ok((state.model, metrics))
}

/// Continues training from `state` until `cfg.epochs` epochs are complete,
/// calling `on_epoch` after each one (checkpointing, logging).
pub fn train_from(
    net: &Network,
    data: &[Sample],
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<(), LearnError>,
) -> Result<(TrainState, Vec<EpochMetrics>), LearnError> {
    cfg.validate()?;
    check_data(net, data)?;
    check_shape(&state.model, net)?;
    let pool = pool(cfg.worker_count);
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), cfg.seed, state.epoch);
        let mut totals = BatchTotals::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (bt, grad) = pool.install(|| loss_and_grad(&state.model, &batch, net, cfg));
            totals.merge(&bt);
            let mut params = state.model.params();
            adam_step(&mut params, &grad, &mut state.adam, cfg.learning_rate);
            state.model.set_params(&params);
        }
        state.epoch += 1;
        let m = totals.metrics(state.epoch, cfg.w, start.elapsed().as_secs_f64());
        info!(
            "epoch {}: pred {:.4e} pen {:.4e} total {:.4e} infeasible_pf {} feas {:.3} ({:.1}s)",
            m.epoch, m.prediction_loss, m.penalty_loss, m.total_loss, m.infeasible_pf_count, m.feasibility_ratio, m.wall_time
        );
        on_epoch(&state, &m)?;
        history.push(m);
    }
    Ok((state, history))
}

/// Per-sample evaluation detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub prediction_loss: f64,
    pub penalty_loss: Option<f64>,
    pub sigma_l1: f64,
    pub newton_converged: bool,
    pub feasible: bool,
    pub predicted_cost: Option<f64>,
    pub reference_cost: Option<f64>,
    /// Violations at the Newton state with the realized control.
    pub violations: Option<ViolationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: EpochMetrics,
    /// Fraction of samples whose power flow Newton solves, ignoring limits.
    pub pf_solvable_ratio: f64,
    pub mean_predicted_cost: Option<f64>,
    pub mean_reference_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleEval>,
}

/// Feasibility ratio and losses of `model` on `test_set`. A sample counts
/// as feasible when Newton converges at the predicted control and the
/// resulting operating point passes [`feasibility_check`] at
/// `cfg.feas_tol`. With `detail`, per-sample results are kept.
pub fn evaluate(
    net: &Network,
    model: &impl Predictor,
    test_set: &[Sample],
    cfg: &TrainConfig,
    detail: bool,
) -> Result<EvalReport, LearnError> {
    check_data(net, test_set)?;
    check_shape(model, net)?;
    let start = Instant::now();
    let evals: Vec<SampleEval> = pool(cfg.worker_count)
        .install(|| test_set.par_iter().map(|s| evaluate_sample(net, model, s, cfg)).collect());

    let mut totals = BatchTotals::default();
    let mut solvable = 0usize;
    let (mut pred_cost, mut n_pred_cost) = (0.0, 0usize);
    let (mut ref_cost, mut n_ref_cost) = (0.0, 0usize);
    for e in &evals {
        totals.n += 1;
        totals.prediction_loss += e.prediction_loss;
        match e.penalty_loss {
            Some(p) => totals.penalty_loss += p,
            None => totals.solver_failures += 1,
        }
        totals.infeasible_pf_count += usize::from(!e.newton_converged);
        totals.feasible_count += usize::from(e.feasible);
        totals.sigma_l1 += e.sigma_l1;
        solvable += usize::from(e.newton_converged);
        if let Some(c) = e.predicted_cost {
            pred_cost += c;
            n_pred_cost += 1;
        }
        if let Some(c) = e.reference_cost {
            ref_cost += c;
            n_ref_cost += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(EvalReport {
        metrics: totals.metrics(0, cfg.w, start.elapsed().as_secs_f64()),
        pf_solvable_ratio: solvable as f64 / evals.len() as f64,
        mean_predicted_cost: mean(pred_cost, n_pred_cost),
        mean_reference_cost: mean(ref_cost, n_ref_cost),
        samples: if detail { evals } else { Vec::new() },
    })
}

fn evaluate_sample(net: &Network, model: &impl Predictor, s: &Sample, cfg: &TrainConfig) -> SampleEval {
    let y = model.predict(&s.x.values);
    let y_c = ControlVector::from_slice(net, &y).expect("model output matches the network");
    let prediction_loss = y.iter().zip(s.y_c_star.to_vec()).map(|(a, b)| (a - b).powi(2)).sum();
    let (penalty_loss, sigma_l1) = match solve_relaxed_pf(net, &y_c, &s.x, &cfg.pf) {
        Ok(res) if qcqp_diff::usable(&res.qcqp_solution).is_ok() => {
            (Some(penalty_r_cs(net, &res.y_s).expect("state matches the network").0), res.sigma_l1)
        }
        _ => (None, 0.0),
    };
    let mut out = SampleEval {
        prediction_loss,
        penalty_loss,
        sigma_l1,
        newton_converged: false,
        feasible: false,
        predicted_cost: None,
        reference_cost: s.objective_star,
        violations: None,
    };
    let Ok(pf) = newton_pf(net, &y_c, &s.x, &cfg.pf.newton) else {
        return out;
    };
    if let (true, Some(ys), Some(slack)) = (pf.converged, pf.y_s, pf.p_slack) {
        out.newton_converged = true;
        let mut realized = y_c;
        for (r, &g) in net.index_maps.ref_gens.iter().enumerate() {
            realized.p_gen[g] = slack[r];
        }
        out.predicted_cost = generation_cost(net, &realized.p_gen).ok();
        if let Ok(rep) = feasibility_check(net, &s.x, &realized, &ys, cfg.feas_tol) {
            out.feasible = rep.feasible;
            out.violations = Some(rep);
        }
    }
    out
}

/// One entry of [`pipeline_gradient_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFdEntry {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The one-sided slopes disagree: a ReLU, hinge or active-set kink lies
    /// inside the stencil and the entry is not comparable.
    pub kink: bool,
}

/// Central differences of the full per-sample loss over the chosen flat
/// parameter indices, against the backpropagated gradient. Relative error
/// is `|a − n| / max(1, |n|)`.
pub fn pipeline_gradient_check(
    net: &Network,
    model: &MlpModel,
    sample: &Sample,
    cfg: &TrainConfig,
    params: &[usize],
    h: f64,
) -> Vec<PipelineFdEntry> {
    let loss = |m: &MlpModel| {
        let o = sample_loss_and_grad(m, sample, net, cfg);
        (o.prediction_loss + cfg.w * o.penalty_loss.unwrap_or(0.0), o.grad)
    };
    let (f0, grad) = loss(model);
    let p0 = model.params();
    let mut probe = model.clone();
    let mut at = |j: usize, d: f64| {
        let mut p = p0.clone();
        p[j] += d;
        probe.set_params(&p);
        loss(&probe).0
    };
    params
        .iter()
        .map(|&j| {
            let (fu, fd) = (at(j, h), at(j, -h));
            let numeric = (fu - fd) / (2.0 * h);
            let (right, left) = ((fu - f0) / h, (f0 - fd) / h);
            let kink = (right - left).abs() > 1e-3 * (1.0 + right.abs().max(left.abs()));
            PipelineFdEntry {
                param: j,
                analytic: grad[j],
                numeric,
                rel_err: (grad[j] - numeric).abs() / numeric.abs().max(1.0),
                kink,
            }
        })
        .collect()
}

/// Metrics as CSV, one row per epoch. Floats use the shortest round-trip
/// representation, so identical runs give identical bytes apart from the
/// `seconds` column.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,pred_loss,pen_loss,total,infeasible_pf,solver_failures,feas_ratio,mean_sigma_l1,seconds\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            m.epoch,
            m.prediction_loss,
            m.penalty_loss,
            m.total_loss,
            m.infeasible_pf_count,
            m.solver_failures,
            m.feasibility_ratio,
            m.mean_sigma_l1,
            m.wall_time
        ));
    }
    s
}

#[cfg(test)]
mod tests;
