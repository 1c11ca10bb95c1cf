//! Differentiate through a QCQP solution: backward gradients with respect to
//! every parameter, checked against central finite differences.
//!
//! ```text
//! cargo run --release --example qcqp_gradients -- [seed]
//! ```

use acopf_learn::qcqp::SolverOptions;
use acopf_learn::qcqp_diff::instances::{circle, random_instance, regular_solution};
use acopf_learn::qcqp_diff::{backward, finite_diff_check, LinearLoss, Param, QuadraticLoss};

fn main() {
    // The circle: min z s.t. ½z² − ½ = 0, z* = −1.
    let (p, s) = circle();
    let g = backward(&p, &s, &[1.0]).unwrap();
    println!("circle: dz*/dg = {:+.6} (analytic)", g.g_g(0));
    let rep = finite_diff_check(&p, &s, &LinearLoss { c: vec![1.0] }, 1e-6, &[Param::G(0)], &SolverOptions::default())
        .unwrap();
    println!("circle: dz*/dg = {:+.6} (central difference)", rep.entries[0].numeric.unwrap());

    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let (p, s) = (seed..)
        .map(random_instance)
        .find_map(|p| regular_solution(&p).map(|s| (p, s)))
        .expect("some regular instance");
    println!("\nrandom instance: k = {}, m_I = {}, m_E = {}", p.k, p.m_i(), p.m_e());
    let loss = QuadraticLoss { target: vec![0.3; p.k], weight: 1.0 };
    let opts = SolverOptions { kkt_tol: 1e-12, ..Default::default() };
    let rep = finite_diff_check(&p, &s, &loss, 1e-6, &Param::all(&p), &opts).unwrap();
    println!("{} parameters, max rel err {:.2e}, pass @1e-4 {:.1}%", rep.entries.len(), rep.max_rel_err(), 100.0 * rep.pass_fraction(1e-4));
    for e in rep.entries.iter().take(8) {
        println!("  {:<16} analytic {:+.6e}  numeric {:+.6e}", format!("{:?}", e.param), e.analytic, e.numeric.unwrap_or(f64::NAN));
    }
}
