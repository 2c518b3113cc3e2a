//! Dataset files: CSV with header `sample,t,coord,value`, one scalar per row.

use std::path::Path;

use cpcontrol::data::{DisturbanceDataset, DisturbanceSampler};
use cpcontrol::rng::StreamRng;
use cpcontrol::Sequence;
use nalgebra::DVector;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::output::write_atomic;

pub const DATASET_HEADER: [&str; 4] = ["sample", "t", "coord", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Row {
    sample: usize,
    t: usize,
    coord: usize,
    value: f64,
}

pub fn dataset_to_csv(dataset: &DisturbanceDataset) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (sample, seq) in dataset.sequences().iter().enumerate() {
        for (t, v) in seq.iter().enumerate() {
            for (coord, &value) in v.iter().enumerate() {
                w.serialize(Row {
                    sample,
                    t,
                    coord,
                    value,
                })
                .map_err(|e| CliError::Internal(e.to_string()))?;
            }
        }
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

pub fn write_dataset(path: &Path, dataset: &DisturbanceDataset) -> CliResult<()> {
    write_atomic(path, &dataset_to_csv(dataset)?)
}

/// Rows may come in any order; every `(sample, t, coord)` cell of the
/// bounding grid must appear exactly once.
pub fn read_dataset(path: &Path) -> CliResult<DisturbanceDataset> {
    let schema = |message: String| CliError::Schema {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => schema(format!("{other:?}")),
    })?;
    let header = reader.headers().map_err(|e| schema(e.to_string()))?.clone();
    if header.iter().ne(DATASET_HEADER) {
        return Err(schema(format!(
            "expected header `{}`, found `{}`",
            DATASET_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows = reader
        .deserialize::<Row>()
        .collect::<Result<Vec<Row>, _>>()
        .map_err(|e| schema(e.to_string()))?;
    if rows.is_empty() {
        return Err(schema("dataset has no rows".into()));
    }
    let count = rows.iter().map(|r| r.sample).max().unwrap_or(0) + 1;
    let horizon = rows.iter().map(|r| r.t).max().unwrap_or(0) + 1;
    let dim = rows.iter().map(|r| r.coord).max().unwrap_or(0) + 1;
    if rows.len() != count * horizon * dim {
        return Err(schema(format!(
            "{} rows do not fill {count} samples x {horizon} steps x {dim} coordinates",
            rows.len()
        )));
    }
    let mut cells = vec![None; rows.len()];
    for r in &rows {
        if !r.value.is_finite() {
            return Err(schema(format!("non-finite value at sample {}, t {}, coord {}", r.sample, r.t, r.coord)));
        }
        let slot = &mut cells[(r.sample * horizon + r.t) * dim + r.coord];
        if slot.replace(r.value).is_some() {
            return Err(schema(format!("duplicate cell sample {}, t {}, coord {}", r.sample, r.t, r.coord)));
        }
    }
    let values: Vec<f64> = cells.into_iter().map(|c| c.expect("all cells filled")).collect();
    let sequences: Vec<Sequence> = values
        .chunks(horizon * dim)
        .map(|seq| seq.chunks(dim).map(DVector::from_column_slice).collect())
        .collect();
    DisturbanceDataset::new(sequences).map_err(|e| schema(e.to_string()))
}

/// Draws each `w(t)` uniformly from a pool of observed disturbance vectors.
/// Used for validation when the data came from a file and no generator is
/// known.
#[derive(Debug, Clone)]
pub struct EmpiricalSampler {
    pool: Vec<DVector<f64>>,
}

impl EmpiricalSampler {
    pub fn new(dataset: &DisturbanceDataset) -> Self {
        Self {
            pool: dataset.sequences().iter().flatten().cloned().collect(),
        }
    }
}

impl DisturbanceSampler for EmpiricalSampler {
    fn dim(&self) -> usize {
        self.pool[0].len()
    }

    fn sample_sequence(&self, rng: &mut StreamRng, horizon: usize) -> Sequence {
        (0..horizon)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())].clone())
            .collect()
    }
}
