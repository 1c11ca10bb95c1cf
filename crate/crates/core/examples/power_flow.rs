//! Newton power flow and the minimum-slack relaxed power flow at the box
//! midpoint control, with the control gradient of a state penalty.
//!
//! ```text
//! cargo run --release --example power_flow -- [demand scale]
//! ```

use acopf_learn::acopf::penalty_r_cs;
use acopf_learn::cases;
use acopf_learn::cli::box_midpoint;
use acopf_learn::grid::LoadVector;
use acopf_learn::powerflow::{backward_control, newton_pf, solve_relaxed_pf, NewtonOptions};

fn main() {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let net = cases::case30();
    let y_c = box_midpoint(&net);
    let x = LoadVector::new(&net, net.nominal_load().values.iter().map(|v| v * scale).collect()).unwrap();

    let pf = newton_pf(&net, &y_c, &x, &NewtonOptions::default()).unwrap();
    println!("Newton: converged {} in {} iterations, residual {:.2e}", pf.converged, pf.iterations, pf.final_residual);
    for (i, r) in pf.residual_trace.iter().enumerate() {
        println!("  iter {i:>2}  {r:.3e}");
    }

    let res = solve_relaxed_pf(&net, &y_c, &x, &Default::default()).unwrap();
    println!("relaxed: {:?}, ‖σ‖₁ = {:.3e}, from Newton {}", res.solve_status, res.sigma_l1, res.from_newton);
    println!("slack generation {:.2} MW", res.p_slack.iter().sum::<f64>() * net.base_mva);

    let (pen, grad) = penalty_r_cs(&net, &res.y_s).unwrap();
    println!("state penalty r_Cs = {pen:.4e}");
    let cg = backward_control(&net, &y_c, &x, &res, &grad).unwrap();
    println!("∂r/∂y_c (p_gen then v_mag):");
    for (i, g) in cg.grad.iter().enumerate() {
        println!("  {i:>2}  {g:+.4e}");
    }
}
