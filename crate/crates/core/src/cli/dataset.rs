//! JSON Lines datasets: a header line followed by one sample per line.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::CliError;
use crate::grid::{dimensions, Dimensions, Network};
use crate::learn::Sample;

pub const DATASET_FORMAT: &str = "acopf-learn-dataset/1";

/// How the loads were drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Each demand coordinate is `d · (1 + scale · u)` with `u ~ U(−1, 1)`.
    pub scale: f64,
    /// Free-text statement of the sampling rule, kept with the data.
    pub rule: String,
}

impl Perturbation {
    pub fn multiplicative(scale: f64) -> Self {
        Perturbation {
            scale,
            rule: "multiplicative: d * (1 + scale * u), u ~ Uniform(-1, 1) independently per p and q coordinate".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub case_id: String,
    pub base_mva: f64,
    pub dims: Dimensions,
    pub perturbation: Perturbation,
    pub seed: u64,
    pub n_requested: usize,
    /// Loads drawn; `records.len() + n_rejected`.
    pub n_drawn: usize,
    pub n_rejected: usize,
    /// Records whose reference came from the softened ACOPF.
    pub n_softened: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<Sample>,
}

impl DatasetFile {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| CliError::Data("dataset is empty".into()))?;
        let header: DatasetHeader =
            serde_json::from_str(first).map_err(|e| CliError::Data(format!("line 1: bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(CliError::Data(format!("unknown dataset format {:?}", header.format)));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let s: Sample = serde_json::from_str(line).map_err(|e| CliError::Data(format!("line {}: {e}", i + 1)))?;
            let d = &header.dims;
            if s.x.values.len() != d.dim_load || s.y_c_star.len() != d.dim_control {
                return Err(CliError::Data(format!(
                    "line {}: sample dimensions ({}, {}) differ from header ({}, {})",
                    i + 1,
                    s.x.values.len(),
                    s.y_c_star.len(),
                    d.dim_load,
                    d.dim_control
                )));
            }
            records.push(s);
        }
        Ok(DatasetFile { header, records })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_jsonl(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| CliError::io(path, e))
    }

    /// Errors unless the header matches `net`.
    pub fn check_network(&self, net: &Network) -> Result<(), CliError> {
        let d = dimensions(net);
        if d != self.header.dims {
            return Err(CliError::Data(format!(
                "dataset for {} has dimensions {:?}, case has {:?}",
                self.header.case_id, self.header.dims, d
            )));
        }
        Ok(())
    }
}
