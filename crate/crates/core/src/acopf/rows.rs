//! Constraint rows shared by the ACOPF and the relaxed power flow.

use crate::grid::{FlowTriple, Network, StateLayout};
use crate::linalg::{SparseMat, SparseVec};
use crate::qcqp::QuadForm;

/// How a generator's real power enters the balance rows.
#[derive(Debug, Clone, Copy)]
pub(crate) enum RealPower {
    /// Decision variable at this index.
    Var(usize),
    /// Fixed value, folded into the row constant.
    Fixed(f64),
}

/// Column offsets of the state block inside a larger decision vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StateCols {
    pub layout: StateLayout,
    pub offset: usize,
}

impl StateCols {
    pub fn q_gen(&self, g: usize) -> usize {
        self.offset + self.layout.q_gen(g)
    }
    pub fn e(&self, i: usize) -> usize {
        self.offset + self.layout.e(i)
    }
    pub fn f(&self, i: usize) -> usize {
        self.offset + self.layout.f(i)
    }
    pub fn p_fwd(&self, l: usize) -> usize {
        self.offset + self.layout.p_fwd(l)
    }
    pub fn q_fwd(&self, l: usize) -> usize {
        self.offset + self.layout.q_fwd(l)
    }
    pub fn p_rev(&self, l: usize) -> usize {
        self.offset + self.layout.p_rev(l)
    }
    pub fn q_rev(&self, l: usize) -> usize {
        self.offset + self.layout.q_rev(l)
    }
}

/// Real then reactive power balance rows, one per bus each:
/// `g_sh|V|² + Σ p_flow − Σ p_g + p_d = 0` and
/// `−b_sh|V|² + Σ q_flow − Σ q_g + q_d = 0`.
pub(crate) fn balance_rows(
    net: &Network,
    load: &[f64],
    k: usize,
    cols: StateCols,
    p_gen: &dyn Fn(usize) -> RealPower,
) -> Vec<QuadForm> {
    let n = net.n_bus();
    let mut rows = Vec::with_capacity(2 * n);
    for reactive in [false, true] {
        for (i, bus) in net.buses.iter().enumerate() {
            let shunt = if reactive { -bus.b_shunt } else { bus.g_shunt };
            let mat = if shunt != 0.0 {
                SparseMat::from_triplets(k, [(cols.e(i), cols.e(i), 2.0 * shunt), (cols.f(i), cols.f(i), 2.0 * shunt)])
            } else {
                SparseMat::zeros(k)
            };
            let mut lin = Vec::new();
            for &l in &net.index_maps.branches_from[i] {
                lin.push((if reactive { cols.q_fwd(l) } else { cols.p_fwd(l) }, 1.0));
            }
            for &l in &net.index_maps.branches_to[i] {
                lin.push((if reactive { cols.q_rev(l) } else { cols.p_rev(l) }, 1.0));
            }
            let mut constant = load[if reactive { n + i } else { i }];
            for &g in &net.index_maps.gens_at_bus[i] {
                if reactive {
                    lin.push((cols.q_gen(g), -1.0));
                } else {
                    match p_gen(g) {
                        RealPower::Var(c) => lin.push((c, -1.0)),
                        RealPower::Fixed(v) => constant -= v,
                    }
                }
            }
            rows.push(QuadForm::new(mat, SparseVec::from_pairs(k, lin), constant));
        }
    }
    rows
}

/// `flow − triple(e_a, f_a, e_b, f_b) = 0`.
fn flow_row(k: usize, flow: usize, t: &FlowTriple, (ea, fa, eb, fb): (usize, usize, usize, usize)) -> QuadForm {
    let trip = [
        (ea, ea, -2.0 * t.a_self),
        (fa, fa, -2.0 * t.a_self),
        (ea, eb, -t.a_cross),
        (eb, ea, -t.a_cross),
        (fa, fb, -t.a_cross),
        (fb, fa, -t.a_cross),
        (ea, fb, -t.a_skew),
        (fb, ea, -t.a_skew),
        (eb, fa, t.a_skew),
        (fa, eb, t.a_skew),
    ];
    let mat = SparseMat::from_triplets(k, trip.into_iter().filter(|e| e.2 != 0.0));
    QuadForm::new(mat, SparseVec::from_pairs(k, [(flow, 1.0)]), 0.0)
}

/// Flow definitions ordered `p_fwd (L), q_fwd (L), p_rev (L), q_rev (L)`.
pub(crate) fn flow_rows(net: &Network, k: usize, cols: StateCols) -> Vec<QuadForm> {
    let nl = net.n_branch();
    let mut rows = Vec::with_capacity(4 * nl);
    let ends = |l: usize| {
        let br = &net.branches[l];
        let (i, j) = (br.from_bus, br.to_bus);
        (cols.e(i), cols.f(i), cols.e(j), cols.f(j))
    };
    for l in 0..nl {
        rows.push(flow_row(k, cols.p_fwd(l), &net.branches[l].flow_coeffs_fwd.p, ends(l)));
    }
    for l in 0..nl {
        rows.push(flow_row(k, cols.q_fwd(l), &net.branches[l].flow_coeffs_fwd.q, ends(l)));
    }
    for l in 0..nl {
        let (ei, fi, ej, fj) = ends(l);
        rows.push(flow_row(k, cols.p_rev(l), &net.branches[l].flow_coeffs_rev.p, (ej, fj, ei, fi)));
    }
    for l in 0..nl {
        let (ei, fi, ej, fj) = ends(l);
        rows.push(flow_row(k, cols.q_rev(l), &net.branches[l].flow_coeffs_rev.q, (ej, fj, ei, fi)));
    }
    rows
}

/// Angle reference `f_ref = 0` and magnitude `e_ref = v_set`.
pub(crate) fn reference_rows(net: &Network, k: usize, cols: StateCols) -> [QuadForm; 2] {
    let r = net.ref_bus;
    [
        QuadForm::linear(SparseVec::from_pairs(k, [(cols.f(r), 1.0)]), 0.0),
        QuadForm::linear(SparseVec::from_pairs(k, [(cols.e(r), 1.0)]), -net.buses[r].v_set),
    ]
}

/// `|V_i|² − v² = 0`.
pub(crate) fn voltage_row(k: usize, cols: StateCols, bus: usize, v: f64) -> QuadForm {
    let mat = SparseMat::from_triplets(k, [(cols.e(bus), cols.e(bus), 2.0), (cols.f(bus), cols.f(bus), 2.0)]);
    QuadForm::new(mat, SparseVec::zeros(k), -v * v)
}

/// `a·x + b ≤ 0` for a single variable.
pub(crate) fn bound_row(k: usize, col: usize, a: f64, b: f64) -> QuadForm {
    QuadForm::linear(SparseVec::from_pairs(k, [(col, a)]), b)
}

/// Linear rows that split power among generators sharing a bus in proportion
/// to their ranges: `(x_a − x̲_a)/Δ_a = (x_b − x̲_b)/Δ_b`. With `only_bus`
/// set, just that bus is considered.
pub(crate) fn sharing_rows(
    net: &Network,
    k: usize,
    col: &dyn Fn(usize) -> usize,
    range: &dyn Fn(usize) -> (f64, f64),
    only_bus: Option<usize>,
) -> Vec<QuadForm> {
    let mut rows = Vec::new();
    for (bus, gens) in net.index_maps.gens_at_bus.iter().enumerate() {
        if only_bus.is_some_and(|b| b != bus) {
            continue;
        }
        for w in gens.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (lo_a, hi_a) = range(a);
            let (lo_b, hi_b) = range(b);
            let da = (hi_a - lo_a).max(1e-6);
            let db = (hi_b - lo_b).max(1e-6);
            rows.push(QuadForm::linear(
                SparseVec::from_pairs(k, [(col(a), 1.0 / da), (col(b), -1.0 / db)]),
                -lo_a / da + lo_b / db,
            ));
        }
    }
    rows
}
