//! Parse a case file and print its dimensions and a few derived quantities.
//!
//! ```text
//! cargo run --example parse_case -- data/case30.m
//! ```

use acopf_learn::grid::{dimensions, load_network, BusKind};

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "data/case30.m".into());
    let net = match load_network(std::path::Path::new(&path)) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("{path}: {e}");
            std::process::exit(2);
        }
    };
    let d = dimensions(&net);
    println!("{path}: base {} MVA", net.base_mva);
    println!("  buses {}  generators {}  branches {}  PV buses {}", d.n_bus, d.n_gen, d.n_branch, d.n_pv);
    println!("  control dim {}  state dim {}  load dim {}", d.dim_control, d.dim_state, d.dim_load);

    let ref_bus = &net.buses[net.ref_bus];
    println!("  reference bus {} at |V| = {}", ref_bus.id, ref_bus.v_set);
    let pq = net.buses.iter().filter(|b| b.kind == BusKind::PQ).count();
    println!("  PQ buses {pq}");

    let load = net.nominal_load();
    let n = net.n_bus();
    let (p, q): (f64, f64) = (0..n).map(|i| (load.p(i), load.q(n, i))).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let cap: f64 = net.generators.iter().map(|g| g.p_max).sum();
    println!("  total demand {:.1} MW / {:.1} MVAr, capacity {:.1} MW", p * net.base_mva, q * net.base_mva, cap * net.base_mva);

    let br = &net.branches[0];
    let f = &br.flow_coeffs_fwd;
    println!(
        "  branch 0 ({} -> {}): p_fwd coeffs ({:.4}, {:.4}, {:.4})",
        net.buses[br.from_bus].id, net.buses[br.to_bus].id, f.p.a_self, f.p.a_cross, f.p.a_skew
    );
}
