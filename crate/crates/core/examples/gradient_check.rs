//! Every gradient check in one run: random QCQPs, the circle, the
//! least-norm path, power-flow control gradients and the full training loss.
//!
//! ```text
//! cargo run --release --example gradient_check -- [n_instances]
//! ```

use acopf_learn::cli::gradcheck::{run, GradcheckOptions};

fn main() {
    let n_instances = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50);
    for l in run(&GradcheckOptions { n_instances, ..Default::default() }) {
        let verdict = if l.pass { "pass" } else { "FAIL" };
        println!("{verdict}  {:<40} {:.3e}  ({})", l.name, l.value, l.note);
    }
}
