pub mod acopf;
pub mod cases;
pub mod cli;
pub mod grid;
pub mod learn;
pub mod linalg;
pub mod powerflow;
pub mod qcqp;
pub mod qcqp_diff;
