//! Grid data model: buses, generators, branches, derived branch-flow
//! coefficients, and the flat index layout shared by the ACOPF and
//! power-flow problems.
//!
//! All quantities are per-unit on `base_mva`; conversion happens at parse
//! time only. Buses are re-indexed densely `0..n_bus` on construction while
//! the original ids stay on each [`Bus`] for reporting.

mod matpower;

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("network graph is disconnected ({reached} of {total} buses reachable from bus {start})")]
    Disconnected { reached: usize, total: usize, start: usize },
    #[error("expected exactly one REF bus, found {0}")]
    RefCount(usize),
    #[error("branch {0} has zero series impedance")]
    ZeroImpedance(usize),
    #[error("unknown bus id {id} referenced by {by}")]
    UnknownBus { id: usize, by: String },
    #[error("REF bus {0} has no generator attached")]
    RefWithoutGenerator(usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    PQ,
    PV,
    REF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Original id from the case file.
    pub id: usize,
    pub kind: BusKind,
    pub p_demand: f64,
    pub q_demand: f64,
    pub g_shunt: f64,
    pub b_shunt: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage magnitude setpoint; only the REF bus uses it (fixed magnitude
    /// of the angle-reference bus in the power-flow model).
    #[serde(default = "one")]
    pub v_set: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: usize,
    /// Bus id in a case file, dense bus position inside a [`Network`].
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub c2: f64,
    pub c1: f64,
}

/// Coefficients of `a_self·|V_i|² + a_cross·(e_i e_j + f_i f_j) + a_skew·(e_i f_j − e_j f_i)`
/// where `i` is the sending end of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowTriple {
    pub a_self: f64,
    pub a_cross: f64,
    pub a_skew: f64,
}

impl FlowTriple {
    pub fn eval(&self, ei: f64, fi: f64, ej: f64, fj: f64) -> f64 {
        self.a_self * (ei * ei + fi * fi) + self.a_cross * (ei * ej + fi * fj) + self.a_skew * (ei * fj - ej * fi)
    }

    /// Gradient with respect to `(e_i, f_i, e_j, f_j)`.
    pub fn grad(&self, ei: f64, fi: f64, ej: f64, fj: f64) -> [f64; 4] {
        [
            2.0 * self.a_self * ei + self.a_cross * ej + self.a_skew * fj,
            2.0 * self.a_self * fi + self.a_cross * fj - self.a_skew * ej,
            self.a_cross * ei - self.a_skew * fi,
            self.a_cross * fi + self.a_skew * ei,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowCoeffs {
    pub p: FlowTriple,
    pub q: FlowTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Bus ids in a case file, dense bus positions inside a [`Network`].
    pub from_bus: usize,
    pub to_bus: usize,
    pub series_r: f64,
    pub series_x: f64,
    pub charging_b: f64,
    /// Off-nominal turns ratio; 0 means nominal (1.0).
    pub tap_ratio: f64,
    /// Radians.
    pub phase_shift: f64,
    pub s_max: f64,
    #[serde(skip)]
    pub flow_coeffs_fwd: FlowCoeffs,
    #[serde(skip)]
    pub flow_coeffs_rev: FlowCoeffs,
}

impl Branch {
    pub fn effective_tap(&self) -> f64 {
        if self.tap_ratio == 0.0 {
            1.0
        } else {
            self.tap_ratio
        }
    }

    /// Series admittance `1 / (r + jx)` as `(g, b)`.
    pub fn series_admittance(&self) -> (f64, f64) {
        let d = self.series_r * self.series_r + self.series_x * self.series_x;
        (self.series_r / d, -self.series_x / d)
    }
}

/// Π-model branch flow coefficients for both directions.
///
/// With nominal tap and no charging the forward triples are `(−G, G, −B)` for
/// `p` and `(B, −B, −G)` for `q`, where `G + jB` is the bus-admittance
/// off-diagonal entry `−1/(r + jx)`.
pub fn derive_flow_coefficients(branch: &Branch) -> Result<(FlowCoeffs, FlowCoeffs), GridError> {
    let d = branch.series_r * branch.series_r + branch.series_x * branch.series_x;
    if !(d > 0.0) {
        return Err(GridError::ZeroImpedance(0));
    }
    let (gs, bs) = branch.series_admittance();
    let tau = branch.effective_tap();
    let (c, s) = (branch.phase_shift.cos(), branch.phase_shift.sin());
    let half_b = 0.5 * branch.charging_b;

    // Y_tt = y + j b/2, Y_ff = Y_tt / τ².
    let (g_tt, b_tt) = (gs, bs + half_b);
    let (g_ff, b_ff) = (g_tt / (tau * tau), b_tt / (tau * tau));
    // Y_ft = −y e^{jφ} / τ, Y_tf = −y e^{−jφ} / τ.
    let (g_ft, b_ft) = (-(gs * c - bs * s) / tau, -(gs * s + bs * c) / tau);
    let (g_tf, b_tf) = (-(gs * c + bs * s) / tau, -(bs * c - gs * s) / tau);

    let fwd = FlowCoeffs {
        p: FlowTriple { a_self: g_ff, a_cross: g_ft, a_skew: -b_ft },
        q: FlowTriple { a_self: -b_ff, a_cross: -b_ft, a_skew: -g_ft },
    };
    let rev = FlowCoeffs {
        p: FlowTriple { a_self: g_tt, a_cross: g_tf, a_skew: -b_tf },
        q: FlowTriple { a_self: -b_tt, a_cross: -b_tf, a_skew: -g_tf },
    };
    Ok((fwd, rev))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseFormat {
    Json,
    Matpower,
}

/// Canonical JSON case layout. Generator and branch bus references are bus ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
}

/// Dense position maps used to lay out flat decision vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndexMaps {
    pub bus_of_id: HashMap<usize, usize>,
    pub gens_at_bus: Vec<Vec<usize>>,
    /// Branches whose sending end (`from_bus`) is the bus: `N_i^from`.
    pub branches_from: Vec<Vec<usize>>,
    /// Branches whose receiving end (`to_bus`) is the bus: `N_i^to`.
    pub branches_to: Vec<Vec<usize>>,
    /// Position of a bus inside `pv_buses`, if any.
    pub pv_position: Vec<Option<usize>>,
    /// Generators attached to the REF bus.
    pub ref_gens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_branch: usize,
    pub n_pv: usize,
    pub dim_control: usize,
    pub dim_state: usize,
    pub dim_load: usize,
}

/// Immutable grid description; safe to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    /// Generator buses other than the REF bus, in bus order.
    pub pv_buses: Vec<usize>,
    pub ref_bus: usize,
    pub index_maps: IndexMaps,
}

pub fn parse_network(text: &str, format: CaseFormat) -> Result<Network, GridError> {
    let case = match format {
        CaseFormat::Json => serde_json::from_str::<CaseFile>(text)?,
        CaseFormat::Matpower => matpower::parse(text)?,
    };
    Network::from_case(case)
}

/// Reads a case file, picking the format from the extension (`.m` is matpower).
pub fn load_network(path: &std::path::Path) -> Result<Network, GridError> {
    let text = std::fs::read_to_string(path).map_err(|e| GridError::Field {
        field: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("m") => CaseFormat::Matpower,
        _ => CaseFormat::Json,
    };
    parse_network(&text, format)
}

impl Network {
    pub fn from_case(case: CaseFile) -> Result<Self, GridError> {
        let CaseFile { base_mva, mut buses, mut generators, mut branches } = case;
        if !(base_mva > 0.0) {
            return Err(GridError::Field { field: "base_mva".into(), msg: "must be positive".into() });
        }
        let n = buses.len();
        if n == 0 {
            return Err(GridError::Field { field: "buses".into(), msg: "empty".into() });
        }
        let mut bus_of_id = HashMap::with_capacity(n);
        for (pos, b) in buses.iter().enumerate() {
            if bus_of_id.insert(b.id, pos).is_some() {
                return Err(GridError::Field { field: "buses.id".into(), msg: format!("duplicate id {}", b.id) });
            }
            if !(b.v_min > 0.0 && b.v_min <= b.v_max) {
                return Err(GridError::Field {
                    field: format!("buses[{pos}].v_min/v_max"),
                    msg: format!("need 0 < v_min <= v_max, got {} / {}", b.v_min, b.v_max),
                });
            }
        }
        let lookup = |id: usize, by: String| bus_of_id.get(&id).copied().ok_or(GridError::UnknownBus { id, by });

        for (k, g) in generators.iter_mut().enumerate() {
            g.bus = lookup(g.bus, format!("generator {k}"))?;
            if g.p_min > g.p_max || g.q_min > g.q_max {
                return Err(GridError::Field { field: format!("generators[{k}]"), msg: "inverted bounds".into() });
            }
            if g.c2 < 0.0 || g.c1 < 0.0 {
                return Err(GridError::Field {
                    field: format!("generators[{k}].c2/c1"),
                    msg: "cost coefficients must be non-negative".into(),
                });
            }
        }
        for (k, br) in branches.iter_mut().enumerate() {
            br.from_bus = lookup(br.from_bus, format!("branch {k}"))?;
            br.to_bus = lookup(br.to_bus, format!("branch {k}"))?;
            if !(br.s_max > 0.0) {
                return Err(GridError::Field { field: format!("branches[{k}].s_max"), msg: "must be positive".into() });
            }
            if br.tap_ratio < 0.0 {
                return Err(GridError::Field { field: format!("branches[{k}].tap_ratio"), msg: "must be >= 0".into() });
            }
            let (fwd, rev) = derive_flow_coefficients(br).map_err(|_| GridError::ZeroImpedance(k))?;
            br.flow_coeffs_fwd = fwd;
            br.flow_coeffs_rev = rev;
        }

        let refs: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::REF).collect();
        if refs.len() != 1 {
            return Err(GridError::RefCount(refs.len()));
        }
        let ref_bus = refs[0];

        let mut gens_at_bus = vec![Vec::new(); n];
        for (k, g) in generators.iter().enumerate() {
            gens_at_bus[g.bus].push(k);
        }
        if gens_at_bus[ref_bus].is_empty() {
            return Err(GridError::RefWithoutGenerator(buses[ref_bus].id));
        }
        // Bus kinds follow generator attachment: generator buses other than REF are PV.
        for (i, b) in buses.iter_mut().enumerate() {
            if i != ref_bus {
                b.kind = if gens_at_bus[i].is_empty() { BusKind::PQ } else { BusKind::PV };
            }
        }
        let pv_buses: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::PV).collect();
        let mut pv_position = vec![None; n];
        for (p, &i) in pv_buses.iter().enumerate() {
            pv_position[i] = Some(p);
        }

        let mut branches_from = vec![Vec::new(); n];
        let mut branches_to = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            branches_from[br.from_bus].push(k);
            branches_to[br.to_bus].push(k);
        }

        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([ref_bus]);
        seen[ref_bus] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for &k in branches_from[i].iter().chain(&branches_to[i]) {
                let j = if branches[k].from_bus == i { branches[k].to_bus } else { branches[k].from_bus };
                if !seen[j] {
                    seen[j] = true;
                    reached += 1;
                    queue.push_back(j);
                }
            }
        }
        if reached != n {
            return Err(GridError::Disconnected { reached, total: n, start: buses[ref_bus].id });
        }

        let ref_gens = gens_at_bus[ref_bus].clone();
        Ok(Self {
            base_mva,
            buses,
            generators,
            branches,
            pv_buses,
            ref_bus,
            index_maps: IndexMaps { bus_of_id, gens_at_bus, branches_from, branches_to, pv_position, ref_gens },
        })
    }

    /// Case-file view with bus references mapped back to ids.
    pub fn to_case(&self) -> CaseFile {
        let id = |pos: usize| self.buses[pos].id;
        CaseFile {
            base_mva: self.base_mva,
            buses: self.buses.clone(),
            generators: self.generators.iter().map(|g| Generator { bus: id(g.bus), ..g.clone() }).collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch { from_bus: id(b.from_bus), to_bus: id(b.to_bus), ..b.clone() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_case()).expect("case serialization cannot fail")
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    pub fn n_pv(&self) -> usize {
        self.pv_buses.len()
    }

    /// Nominal load vector `(p_d..., q_d...)`.
    pub fn nominal_load(&self) -> LoadVector {
        let mut values: Vec<f64> = self.buses.iter().map(|b| b.p_demand).collect();
        values.extend(self.buses.iter().map(|b| b.q_demand));
        LoadVector { values }
    }

    pub fn state_layout(&self) -> StateLayout {
        StateLayout { n_gen: self.n_gen(), n_bus: self.n_bus(), n_branch: self.n_branch() }
    }
}

pub fn dimensions(net: &Network) -> Dimensions {
    let (b, g, l, pv) = (net.n_bus(), net.n_gen(), net.n_branch(), net.n_pv());
    Dimensions {
        n_bus: b,
        n_gen: g,
        n_branch: l,
        n_pv: pv,
        dim_control: g + pv,
        dim_state: g + 2 * b + 4 * l,
        dim_load: 2 * b,
    }
}

/// Offsets of the state block `(q_gen, e, f, p_fwd, q_fwd, p_rev, q_rev)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_gen: usize,
    pub n_bus: usize,
    pub n_branch: usize,
}

impl StateLayout {
    pub fn len(&self) -> usize {
        self.n_gen + 2 * self.n_bus + 4 * self.n_branch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q_gen(&self, g: usize) -> usize {
        g
    }

    pub fn e(&self, i: usize) -> usize {
        self.n_gen + i
    }

    pub fn f(&self, i: usize) -> usize {
        self.n_gen + self.n_bus + i
    }

    pub fn p_fwd(&self, l: usize) -> usize {
        self.n_gen + 2 * self.n_bus + l
    }

    pub fn q_fwd(&self, l: usize) -> usize {
        self.p_fwd(l) + self.n_branch
    }

    pub fn p_rev(&self, l: usize) -> usize {
        self.p_fwd(l) + 2 * self.n_branch
    }

    pub fn q_rev(&self, l: usize) -> usize {
        self.p_fwd(l) + 3 * self.n_branch
    }
}

/// Demand vector `(p_1^d..p_B^d, q_1^d..q_B^d)` in p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadVector {
    pub values: Vec<f64>,
}

impl LoadVector {
    pub fn new(net: &Network, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != 2 * net.n_bus() {
            return Err(GridError::Field {
                field: "load".into(),
                msg: format!("expected {} entries, got {}", 2 * net.n_bus(), values.len()),
            });
        }
        Ok(Self { values })
    }

    pub fn p(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn q(&self, n_bus: usize, i: usize) -> f64 {
        self.values[n_bus + i]
    }
}
