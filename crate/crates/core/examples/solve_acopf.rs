//! Solve the AC optimal power flow of a case at its nominal load.
//!
//! ```text
//! cargo run --release --example solve_acopf -- [case30|case118|two_bus]
//! ```

use acopf_learn::acopf::{feasibility_check, solve_acopf, DEFAULT_FEAS_TOL};
use acopf_learn::cases;
use acopf_learn::qcqp::SolverOptions;

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "case30".into());
    let net = match name.as_str() {
        "two_bus" => cases::two_bus(),
        "case118" => cases::case118(),
        _ => cases::case30(),
    };
    let load = net.nominal_load();
    let start = std::time::Instant::now();
    let sol = solve_acopf(&net, &load, &SolverOptions::default()).expect("well-formed case");
    let elapsed = start.elapsed();

    println!("{name}: {:?} after {} iterations in {elapsed:.2?}", sol.status, sol.iterations);
    println!("cost          {:.6} ($/h)", sol.objective);
    println!("KKT residual  {:.3e}", sol.kkt_residual);
    let rep = feasibility_check(&net, &load, &sol.control, &sol.state, DEFAULT_FEAS_TOL).unwrap();
    println!("feasible at {:.0e}: {}", DEFAULT_FEAS_TOL, rep.feasible);
    for (family, v) in rep.families() {
        println!("  {family:<18} max {:.2e}", v.max);
    }
    println!("generator set points (MW):");
    for (g, p) in net.generators.iter().zip(&sol.control.p_gen) {
        println!("  gen {:>3} at bus {:>3}: {:8.3}", g.id, net.buses[g.bus].id, p * net.base_mva);
    }
}
