//! JSON report documents written by the command-line tool. Reports carry the
//! seed and toolkit version but no timestamps, so identical runs produce
//! identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{Method, OptimizerSettings, ReconstructionReport};
use crate::illposed::IllposedReport;
use crate::quant::QuantConfig;
use crate::runtime::BenchRow;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub toolkit_version: String,
    pub seed: u64,
    pub method: Method,
    pub qconfig: QuantConfig,
    pub settings: OptimizerSettings,
    pub layers: Vec<ReconstructionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLayer {
    pub layer: String,
    /// `‖W Xᵀ - W_F Xᵀ‖_F / ‖W Xᵀ‖_F`.
    pub relative_output_error: f64,
    pub max_weight_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub toolkit_version: String,
    pub qconfig: QuantConfig,
    pub layers: Vec<EvalLayer>,
    pub mean_relative_output_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllposedLayerReport {
    pub layer: String,
    #[serde(flatten)]
    pub report: IllposedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllposedDemoReport {
    pub toolkit_version: String,
    pub seed: u64,
    pub qconfig: QuantConfig,
    pub layers: Vec<IllposedLayerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub toolkit_version: String,
    pub seed: u64,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
