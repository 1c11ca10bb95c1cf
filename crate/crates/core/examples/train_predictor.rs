//! Train the load-to-control predictor on a small freshly generated 30-bus
//! dataset and report the test feasibility ratio per epoch.
//!
//! ```text
//! cargo run --release --example train_predictor -- [n_train] [epochs]
//! ```

use acopf_learn::cases;
use acopf_learn::cli::{gen_data, GenDataOptions};
use acopf_learn::learn::{evaluate, init_model, train_from, AdamState, TrainConfig, TrainState};

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let n_train = args.next().flatten().unwrap_or(200);
    let epochs = args.next().flatten().unwrap_or(10);
    let net = cases::case30();

    let gen = |n, seed| gen_data(&net, "case30", &GenDataOptions { n_samples: n, perturb_scale: 0.1, seed, ..Default::default() }).unwrap().0;
    let train = gen(n_train, 11);
    let test = gen(n_train / 4, 12);
    println!("{} training / {} test samples", train.records.len(), test.records.len());

    let cfg = TrainConfig { epochs, ..Default::default() };
    let model = init_model(&net, &train.records, &cfg);
    let state = TrainState { adam: AdamState::new(model.n_params()), model, epoch: 0 };
    println!("epoch  pred_loss   pen_loss    infeasible_pf  test_feas");
    train_from(&net, &train.records, &cfg, state, |st, m| {
        let rep = evaluate(&net, &st.model, &test.records, &cfg, false)?;
        println!(
            "{:>5}  {:.4e}  {:.4e}  {:>13}  {:.3}",
            m.epoch, m.prediction_loss, m.penalty_loss, m.infeasible_pf_count, rep.metrics.feasibility_ratio
        );
        Ok(())
    })
    .unwrap();
}
