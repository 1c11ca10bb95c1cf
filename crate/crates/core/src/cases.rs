//! Cases bundled with the crate.

use crate::grid::{parse_network, CaseFormat, Network};

pub const CASE30_M: &str = include_str!("../data/case30.m");
pub const CASE118_M: &str = include_str!("../data/case118.m");
pub const TWO_BUS_JSON: &str = include_str!("../data/two_bus.json");

/// IEEE 30-bus system (Alsac–Stott data, 6 generators, 41 branches).
pub fn case30() -> Network {
    parse_network(CASE30_M, CaseFormat::Matpower).expect("bundled case parses")
}

/// IEEE 118-bus system (54 generators, 186 branches).
pub fn case118() -> Network {
    parse_network(CASE118_M, CaseFormat::Matpower).expect("bundled case parses")
}

/// Two buses, one line: a REF generator at bus 1 and a loaded PV generator at bus 2.
pub fn two_bus() -> Network {
    parse_network(TWO_BUS_JSON, CaseFormat::Json).expect("bundled case parses")
}
