use super::*;
use crate::cases;
use crate::powerflow::NewtonOptions;

fn cfg(w: f64) -> TrainConfig {
    TrainConfig {
        w,
        learning_rate: 1e-3,
        epochs: 2,
        batch_size: 4,
        hidden_sizes: (8, 6),
        pf: RelaxedPfOptions { newton: NewtonOptions { tol: 1e-12, ..Default::default() }, ..Default::default() },
        ..Default::default()
    }
}

fn sample(net: &Network, x: Vec<f64>, y: Vec<f64>) -> Sample {
    Sample {
        x: LoadVector::new(net, x).unwrap(),
        y_c_star: ControlVector::from_slice(net, &y).unwrap(),
        y_s_star: None,
        objective_star: None,
        softened: false,
    }
}

/// 2-bus fixture with a tight reactive limit at bus 2 and a tight line
/// rating, so that the penalty is active around the nominal load.
fn tight_two_bus() -> Network {
    let mut net = cases::two_bus();
    net.generators[1].q_max = 0.1;
    net.branches[0].s_max = 0.4;
    net
}

fn small_dataset(net: &Network, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            sample(net, vec![0.0, 0.3 + 0.6 * t, 0.0, 0.1 + 0.2 * t], vec![0.2 + 0.5 * t, 0.4, 1.0 + 0.02 * t])
        })
        .collect()
}

#[test]
fn loss_arithmetic() {
    let t = BatchTotals { n: 1, prediction_loss: 0.04, penalty_loss: 0.1, ..Default::default() };
    assert!((t.total(1.0) - 0.14).abs() < 1e-15);
    let m = t.metrics(1, 1.0, 0.0);
    assert_eq!(m.total_loss, m.prediction_loss + m.penalty_loss);
}

#[test]
fn perfect_prediction_has_zero_loss_and_gradient() {
    let net = cases::two_bus();
    let (low, high) = control_box(&net);
    let model = MlpModel::zeros(4, (3, 2), low, high);
    let x = net.nominal_load().values;
    let s = sample(&net, x.clone(), model.forward(&x));
    let o = sample_loss_and_grad(&model, &s, &net, &cfg(1.0));
    assert_eq!(o.prediction_loss, 0.0);
    assert_eq!(o.penalty_loss, Some(0.0));
    assert!(o.pf_solvable && o.feasible);
    assert!(o.grad.iter().all(|g| *g == 0.0));
}

#[test]
fn penalty_gradient_reaches_the_network() {
    let net = tight_two_bus();
    let model = init_model(&net, &small_dataset(&net, 8), &cfg(1.0));
    let x = vec![0.0, 0.9, 0.0, 0.3];
    let y = model.forward(&x);
    let s = sample(&net, x, y);
    let o = sample_loss_and_grad(&model, &s, &net, &cfg(1.0));
    assert_eq!(o.prediction_loss, 0.0);
    assert!(o.penalty_loss.unwrap() > 0.0);
    assert!(o.grad.iter().any(|g| *g != 0.0));
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    let net = tight_two_bus();
    let c = cfg(1.0);
    let data = small_dataset(&net, 8);
    let model = init_model(&net, &data, &c);
    let s = sample(&net, vec![0.0, 0.85, 0.0, 0.3], vec![0.3, 0.6, 1.02]);
    let o = sample_loss_and_grad(&model, &s, &net, &c);
    assert!(o.penalty_loss.unwrap() > 0.0, "penalty should be active");
    let idx: Vec<usize> = (0..model.n_params()).step_by(3).collect();
    let entries = pipeline_gradient_check(&net, &model, &s, &c, &idx, 1e-6);
    let compared: Vec<_> = entries.iter().filter(|e| !e.kink).collect();
    assert!(compared.len() * 10 >= entries.len() * 9, "too many kinks");
    for e in compared {
        assert!(e.rel_err <= 1e-3, "{e:?}");
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let net = cases::two_bus();
    let data = small_dataset(&net, 6);
    let mut c = cfg(1.0);
    c.learning_rate = 0.0;
    let (model, metrics) = train(&net, &data, &c).unwrap();
    assert_eq!(model, init_model(&net, &data, &c));
    assert_eq!(metrics.len(), 2);
    // Same losses; only the shuffled summation order differs.
    let (a, b) = (metrics[0].prediction_loss, metrics[1].prediction_loss);
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn loss_identity_holds_every_epoch() {
    let net = tight_two_bus();
    let data = small_dataset(&net, 10);
    let c = TrainConfig { epochs: 3, w: 0.7, ..cfg(0.7) };
    let (_, metrics) = train(&net, &data, &c).unwrap();
    for m in metrics {
        assert!((m.total_loss - (m.prediction_loss + c.w * m.penalty_loss)).abs() <= 1e-9);
    }
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let net = tight_two_bus();
    let data = small_dataset(&net, 10);
    let strip = |mut v: Vec<EpochMetrics>| {
        v.iter_mut().for_each(|m| m.wall_time = 0.0);
        v
    };
    let (m1, a) = train(&net, &data, &cfg(1.0)).unwrap();
    let (m2, b) = train(&net, &data, &cfg(1.0)).unwrap();
    let (m3, c) = train(&net, &data, &TrainConfig { worker_count: 3, ..cfg(1.0) }).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1, m3);
    let a = strip(a);
    assert_eq!(a, strip(b));
    assert_eq!(a, strip(c));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let net = tight_two_bus();
    let data = small_dataset(&net, 10);
    let full = TrainConfig { epochs: 3, ..cfg(1.0) };
    let (_, straight) = train(&net, &data, &full).unwrap();

    let mut saved = None;
    let model = init_model(&net, &data, &full);
    let state = TrainState { adam: AdamState::new(model.n_params()), model, epoch: 0 };
    let first = TrainConfig { epochs: 2, ..full.clone() };
    train_from(&net, &data, &first, state, |st, _| {
        saved = Some(serde_json::to_string(&Checkpoint::new(&first, st.clone())).unwrap());
        Ok(())
    })
    .unwrap();
    let ck: Checkpoint = serde_json::from_str(&saved.unwrap()).unwrap();
    assert_eq!(ck.config_hash, full.hash());
    let (_, rest) = train_from(&net, &data, &full, ck.state, |_, _| Ok(())).unwrap();
    assert_eq!(rest.len(), 1);
    let mut a = straight[2].clone();
    let mut b = rest[0].clone();
    a.wall_time = 0.0;
    b.wall_time = 0.0;
    assert_eq!(a, b);
}

#[test]
fn unsolvable_samples_do_not_abort_training() {
    let net = cases::two_bus();
    let mut data = small_dataset(&net, 6);
    // Far beyond what the line can carry: no zero-slack power flow.
    data.push(sample(&net, vec![0.0, 30.0, 0.0, 5.0], vec![1.0, 0.5, 1.0]));
    data.push(sample(&net, vec![0.0, 25.0, 0.0, 8.0], vec![1.0, 0.5, 1.0]));
    let (_, metrics) = train(&net, &data, &cfg(1.0)).unwrap();
    for m in &metrics {
        assert!(m.infeasible_pf_count >= 2, "{m:?}");
        assert!(m.total_loss.is_finite());
        assert!(m.mean_sigma_l1 > 0.0);
    }
}

/// Looks the reference control up by load.
struct Oracle(Vec<Sample>);

impl Predictor for Oracle {
    fn input_dim(&self) -> usize {
        self.0[0].x.values.len()
    }
    fn output_dim(&self) -> usize {
        self.0[0].y_c_star.len()
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.0.iter().find(|s| s.x.values == x).expect("known load").y_c_star.to_vec()
    }
}

#[test]
fn oracle_is_fully_feasible() {
    let net = cases::two_bus();
    let data: Vec<Sample> = [0.3, 0.5, 0.8]
        .iter()
        .map(|&pd| {
            let x = LoadVector::new(&net, vec![0.0, pd, 0.0, 0.2]).unwrap();
            let sol = crate::acopf::solve_acopf(&net, &x, &Default::default()).unwrap();
            Sample {
                x,
                y_c_star: sol.control,
                y_s_star: Some(sol.state),
                objective_star: Some(sol.objective),
                softened: false,
            }
        })
        .collect();
    let rep = evaluate(&net, &Oracle(data.clone()), &data, &cfg(1.0), true).unwrap();
    assert_eq!(rep.metrics.feasibility_ratio, 1.0);
    assert_eq!(rep.samples.len(), 3);
    let (p, r) = (rep.mean_predicted_cost.unwrap(), rep.mean_reference_cost.unwrap());
    assert!((p - r).abs() < 1e-5 * r, "{p} vs {r}");
}

#[test]
fn midpoint_model_fails_under_extreme_demand() {
    let net = cases::two_bus();
    let (low, high) = control_box(&net);
    let model = MlpModel::zeros(4, (3, 2), low, high);
    let data = vec![
        sample(&net, net.nominal_load().values, vec![1.0, 0.5, 1.0]),
        sample(&net, vec![0.0, 2.8, 0.0, 0.9], vec![1.0, 0.5, 1.0]),
    ];
    let rep = evaluate(&net, &model, &data, &cfg(1.0), false).unwrap();
    assert!(rep.metrics.feasibility_ratio < 1.0);
    assert!(rep.samples.is_empty());
}

#[test]
fn shape_mismatch_is_reported() {
    let net = cases::two_bus();
    let other = cases::case30();
    let model = init_model(&other, &[], &cfg(1.0));
    let data = small_dataset(&net, 2);
    assert!(matches!(evaluate(&net, &model, &data, &cfg(1.0), false), Err(LearnError::Shape { .. })));
    assert!(matches!(evaluate(&net, &model, &[], &cfg(1.0), false), Err(LearnError::Empty)));
}

#[test]
fn metrics_csv_layout() {
    let m = BatchTotals { n: 2, prediction_loss: 0.5, penalty_loss: 0.25, ..Default::default() }.metrics(1, 2.0, 1.25);
    let csv = metrics_csv(&[m]);
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("epoch,pred_loss,pen_loss,total"));
    assert_eq!(lines.next().unwrap(), "1,0.25,0.125,0.5,0,0,0,0,1.250");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { w: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
    let a = TrainConfig::default();
    assert_eq!(a.hash(), TrainConfig { epochs: 7, worker_count: 4, ..a.clone() }.hash());
    assert_ne!(a.hash(), TrainConfig { seed: 1, ..a }.hash());
}
