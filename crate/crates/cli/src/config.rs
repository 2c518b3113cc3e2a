//! Run configuration: system, constraints, cost, data source and the
//! per-method parameter blocks, read from a JSON document.

use std::path::{Path, PathBuf};

use cpcontrol::conformal::ScoreNorm;
use cpcontrol::data::{CoordinateDistribution, DisturbanceGenerator, SpreadParam};
use cpcontrol::direct::TrainConfig;
use cpcontrol::{ConstraintSpec, CostSpec, Ellipsoid, LinearSystem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Row-major matrix as nested arrays.
pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: SystemBlock,
    pub constraints: ConstraintsBlock,
    pub cost: CostBlock,
    pub data: DataBlock,
    /// Norm used for the error and input scores of the direct route.
    #[serde(default)]
    pub score_norm: ScoreNorm,
    /// GA parameters. `theta` must agree with the constraints block.
    #[serde(default)]
    pub direct: TrainConfig,
    #[serde(default)]
    pub indirect: IndirectBlock,
    pub validation: ValidationBlock,
    #[serde(default)]
    pub baseline: BaselineBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Rows,
    pub b: Rows,
    pub horizon: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidBlock {
    pub shape: Rows,
    /// Defaults to the origin.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsBlock {
    /// One set shared by every step, or one set per step `t = 1..N`.
    pub state: Vec<EllipsoidBlock>,
    pub input: EllipsoidBlock,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    pub state_weight: Rows,
    pub input_weight: Rows,
    pub terminal_weight: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generator { coordinates: Vec<CoordinateDistribution> },
    /// Dataset CSV; relative paths resolve against the config file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub source: DataSource,
    /// Dataset holds `k + 1` sequences.
    pub k: usize,
    /// Calibration uses sequences `0..=k1`, training `k1+1..=k`.
    pub k1: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRule {
    /// Ball of the calibrated feedback-input radius under the synthesized gain.
    #[default]
    CalibratedBall,
    /// Image of the invariant ellipsoid under the gain.
    GainImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndirectBlock {
    pub grid_step: f64,
    /// Explicit `(λ0, λ1)` pairs; overrides `grid_step`.
    pub grid: Option<Vec<(f64, f64)>>,
    pub mvee_tol: f64,
    pub mvee_max_iter: usize,
    pub verify_samples: usize,
    pub verify_tol: f64,
    pub input_rule: InputRule,
}

impl Default for IndirectBlock {
    fn default() -> Self {
        Self {
            grid_step: 0.05,
            grid: None,
            mvee_tol: 1e-7,
            mvee_max_iter: 100_000,
            verify_samples: 720,
            verify_tol: 1e-6,
            input_rule: InputRule::CalibratedBall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationBlock {
    pub n_trials: usize,
    pub seed: u64,
    /// Number of validation trajectories written to `samples.csv`.
    #[serde(default = "default_sample_trajectories")]
    pub sample_trajectories: usize,
}

fn default_sample_trajectories() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineBlock {
    pub scenarios: usize,
    /// Confidence parameter quoted in the report note.
    pub beta: Option<f64>,
}

impl Default for BaselineBlock {
    fn default() -> Self {
        Self {
            scenarios: 100,
            beta: None,
        }
    }
}

/// Typed problem data built from a validated config.
#[derive(Debug, Clone)]
pub struct Problem {
    pub system: LinearSystem,
    pub constraints: ConstraintSpec,
    pub cost: CostSpec,
    pub x0: DVector<f64>,
}

pub fn matrix(rows: &Rows, what: &str) -> CliResult<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(CliError::Config(format!("{what} must be a nonempty matrix")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(CliError::Config(format!(
            "{what}: row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn rows_of(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn ellipsoid(block: &EllipsoidBlock, what: &str) -> CliResult<Ellipsoid> {
    let shape = matrix(&block.shape, what)?;
    let center = match &block.center {
        Some(c) => DVector::from_column_slice(c),
        None => DVector::zeros(shape.nrows()),
    };
    Ellipsoid::new(center, shape).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let DataSource::File { path: data } = &mut config.data.source {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Built-in double-integrator benchmark over 100 steps at `θ = 0.05`.
    pub fn benchmark() -> Self {
        let generator = DisturbanceGenerator::double_integrator_benchmark(SpreadParam::Variance);
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            system: SystemBlock {
                a: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
                b: vec![vec![0.0], vec![0.5]],
                horizon: 100,
                x0: vec![2.0, -1.0],
            },
            constraints: ConstraintsBlock {
                state: vec![EllipsoidBlock {
                    shape: vec![vec![0.1, 0.0], vec![0.0, 0.1]],
                    center: None,
                }],
                input: EllipsoidBlock {
                    shape: vec![vec![1.0]],
                    center: None,
                },
                theta: 0.05,
            },
            cost: CostBlock {
                state_weight: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                input_weight: vec![vec![1.0]],
                terminal_weight: vec![vec![100.0, 0.0], vec![0.0, 100.0]],
            },
            data: DataBlock {
                source: DataSource::Generator {
                    coordinates: generator.coordinates,
                },
                k: 199,
                k1: 99,
                seed: 2024,
            },
            score_norm: ScoreNorm::Euclidean,
            direct: TrainConfig {
                seed: 7,
                ..TrainConfig::default()
            },
            indirect: IndirectBlock::default(),
            validation: ValidationBlock {
                n_trials: 10_000,
                seed: 99,
                sample_trajectories: 100,
            },
            baseline: BaselineBlock::default(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.data.k1 + 1 >= self.data.k {
            return bad(format!(
                "data split needs k1 + 1 < k, got k1={}, k={}",
                self.data.k1, self.data.k
            ));
        }
        if self.direct.theta != self.constraints.theta {
            return bad(format!(
                "direct.theta ({}) must equal constraints.theta ({})",
                self.direct.theta, self.constraints.theta
            ));
        }
        let n_state = self.constraints.state.len();
        if n_state != 1 && n_state != self.system.horizon {
            return bad(format!(
                "constraints.state needs 1 or {} sets, got {n_state}",
                self.system.horizon
            ));
        }
        if self.validation.n_trials == 0 {
            return bad("validation.n_trials must be positive".into());
        }
        if self.baseline.scenarios == 0 {
            return bad("baseline.scenarios must be positive".into());
        }
        if let DataSource::Generator { coordinates } = &self.data.source {
            DisturbanceGenerator::new(coordinates.clone()).map_err(|e| CliError::Config(format!("data.source: {e}")))?;
        }
        self.direct.validate().map_err(|e| CliError::Config(format!("direct: {e}")))?;
        self.problem().map(|_| ())
    }

    pub fn problem(&self) -> CliResult<Problem> {
        let config_err = |e: cpcontrol::Error| CliError::Config(e.to_string());
        let s = &self.system;
        let system = LinearSystem::new(matrix(&s.a, "system.a")?, matrix(&s.b, "system.b")?, s.horizon)
            .map_err(config_err)?;
        let input = ellipsoid(&self.constraints.input, "constraints.input")?;
        let state = self
            .constraints
            .state
            .iter()
            .enumerate()
            .map(|(i, b)| ellipsoid(b, &format!("constraints.state[{i}]")))
            .collect::<CliResult<Vec<_>>>()?;
        let constraints = if state.len() == 1 {
            ConstraintSpec::uniform(s.horizon, state[0].clone(), input, self.constraints.theta)
        } else {
            ConstraintSpec::new(state, input, self.constraints.theta)
        }
        .map_err(config_err)?;
        constraints.check_against(&system).map_err(config_err)?;
        let c = &self.cost;
        let cost = CostSpec::new(
            matrix(&c.state_weight, "cost.state_weight")?,
            matrix(&c.input_weight, "cost.input_weight")?,
            matrix(&c.terminal_weight, "cost.terminal_weight")?,
        )
        .map_err(config_err)?;
        if cost.state_weight().nrows() != system.state_dim() || cost.input_weight().nrows() != system.input_dim() {
            return Err(CliError::Config("cost weights do not match the system dimensions".into()));
        }
        if s.x0.len() != system.state_dim() {
            return Err(CliError::Config(format!(
                "system.x0 has {} entries, expected {}",
                s.x0.len(),
                system.state_dim()
            )));
        }
        Ok(Problem {
            system,
            constraints,
            cost,
            x0: DVector::from_column_slice(&s.x0),
        })
    }

    pub fn generator(&self) -> Option<DisturbanceGenerator> {
        match &self.data.source {
            DataSource::Generator { coordinates } => Some(DisturbanceGenerator {
                coordinates: coordinates.clone(),
            }),
            DataSource::File { .. } => None,
        }
    }

    /// Replace every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.direct.seed = seed.wrapping_add(1);
        self.validation.seed = seed.wrapping_add(2);
    }
}
