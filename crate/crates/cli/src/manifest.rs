//! Result manifest: one JSON document per pipeline run. Wall-clock timings
//! live in a separate `timing.json` so manifests are reproducible.

use std::path::Path;

use cpcontrol::conformal::{PredictionRegion, RegionKind, ScoreNorm};
use cpcontrol::validation::ValidationReport;
use serde::{Deserialize, Serialize};

use crate::config::{rows_of, InputRule, Rows};
use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Indirect,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Indirect => "indirect",
            Method::Baseline => "baseline",
        }
    }
}

/// Inclusive range of dataset sequence indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub first: usize,
    pub last: usize,
}

impl IndexRange {
    pub fn overlaps(&self, other: &IndexRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRecord {
    /// `generator` or the dataset file name.
    pub source: String,
    pub k: usize,
    pub k1: usize,
    pub horizon: usize,
    pub dim: usize,
    pub calibration: IndexRange,
    pub training: IndexRange,
    pub disjoint: bool,
    /// `generator` or `empirical` (resampling the dataset).
    pub validation_sampler: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub data: u64,
    pub training: u64,
    pub validation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionRecord {
    Ball { radius: f64, norm: ScoreNorm, level: f64 },
    Ellipsoid { shape: Rows, level: f64 },
}

impl RegionRecord {
    pub fn from_region(region: &PredictionRegion) -> Self {
        match &region.kind {
            RegionKind::Ball { radius, norm, .. } => RegionRecord::Ball {
                radius: *radius,
                norm: *norm,
                level: region.level,
            },
            RegionKind::Ellipsoid(e) => RegionRecord::Ellipsoid {
                shape: rows_of(e.shape()),
                level: region.level,
            },
        }
    }

    pub fn summary(&self) -> String {
        match self {
            RegionRecord::Ball { radius, norm, .. } => {
                let n = match norm {
                    ScoreNorm::Euclidean => "2",
                    ScoreNorm::Infinity => "inf",
                };
                format!("ball({n}) r={radius:.4}")
            }
            RegionRecord::Ellipsoid { shape, .. } => {
                let trace: f64 = (0..shape.len()).map(|i| shape[i][i]).sum();
                format!("ellipsoid tr={trace:.4}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TighteningRecord {
    /// Every tightened set is nonempty.
    pub feasible: bool,
    pub min_state_margin: f64,
    pub input_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectRecord {
    pub eta_e: f64,
    pub eta_u: f64,
    pub eta_e_max: f64,
    pub eta_u_max: f64,
    pub fitness: f64,
    pub feasible: bool,
    pub gamma: f64,
    pub training_level: f64,
    pub training_level_clamped: bool,
    pub generations: usize,
    pub population: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceRecord {
    pub passed: bool,
    pub sampled_max: f64,
    pub bmi_margin: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub samples: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndirectRecord {
    pub yhat: Rows,
    pub mvee_iterations: usize,
    pub c_w: f64,
    pub y: Rows,
    pub phi: Rows,
    pub phi_hat: Rows,
    pub psi: Rows,
    pub lambda0: f64,
    pub lambda1: f64,
    pub trace: f64,
    pub grid_points: usize,
    pub feasible_grid_points: usize,
    pub invariance: InvarianceRecord,
    /// `Φ − P_t` is positive definite for every `t`.
    pub phi_dominates_state_sets: bool,
    /// `√λmax(Q^½ K Φ⁻¹ Kᵀ Q^½)`; below one means the gain is admissible on E.
    pub input_admissibility: f64,
    pub input_rule: InputRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRecord {
    pub scenarios: usize,
    pub scenario_indices: IndexRange,
    pub decision_count: usize,
    pub variable_count: usize,
    pub worst_level: f64,
    pub scenarios_satisfied: bool,
    pub lags: Vec<Rows>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub method: Method,
    pub data: DataRecord,
    pub seeds: SeedRecord,
    pub theta: f64,
    pub gain: Option<Rows>,
    pub error_region: Option<RegionRecord>,
    pub input_region: Option<RegionRecord>,
    pub tightening: Option<TighteningRecord>,
    /// Cost of the nominal plan, or the mean scenario cost for the baseline.
    pub objective: f64,
    pub v_star: Vec<Vec<f64>>,
    pub validation: ValidationReport,
    pub direct: Option<DirectRecord>,
    pub indirect: Option<IndirectRecord>,
    pub baseline: Option<BaselineRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Schema {
            path: path.to_path_buf(),
            message: format!("not a JSON document: {e}"),
        })?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == MANIFEST_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::Schema {
                    path: path.to_path_buf(),
                    message: format!("manifest schema_version {v}, expected {MANIFEST_SCHEMA_VERSION}"),
                })
            }
            None => {
                return Err(CliError::Schema {
                    path: path.to_path_buf(),
                    message: "missing schema_version".into(),
                })
            }
        }
        serde_json::from_value(value).map_err(|e| CliError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

impl Timing {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
