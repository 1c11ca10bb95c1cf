//! Draw perturbed loads, solve the ACOPF for each and write a dataset.
//!
//! ```text
//! cargo run --release --example generate_dataset -- [n_samples] [perturb_scale] [out]
//! ```

use acopf_learn::cases;
use acopf_learn::cli::{gen_data, GenDataOptions};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_samples = args.first().and_then(|a| a.parse().ok()).unwrap_or(20);
    let perturb_scale = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.2);
    let out = args.get(2).cloned().unwrap_or_else(|| "case30_sample.jsonl".into());

    let net = cases::case30();
    let opts = GenDataOptions { n_samples, perturb_scale, seed: 7, ..Default::default() };
    let (data, rejected) = gen_data(&net, "case30", &opts).expect("some sample converges");
    let costs: Vec<f64> = data.records.iter().filter_map(|s| s.objective_star).collect();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let (lo, hi) = costs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(*c), b.max(*c)));
    println!("{} kept, {} rejected, {} softened", data.records.len(), rejected.len(), data.header.n_softened);
    println!("optimal cost: mean {mean:.2}, range [{lo:.2}, {hi:.2}] $/h");
    data.write(std::path::Path::new(&out)).unwrap();
    println!("wrote {out}");
}
