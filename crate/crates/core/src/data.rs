//! Disturbance datasets, the training/calibration split and seeded
//! disturbance generators.
//!
//! A dataset holds `k + 1` sequences `w⁽⁰⁾ … w⁽ᵏ⁾`. Splitting at `k1` puts
//! sequences `0..=k1` in the calibration set and `k1+1..=k` in the training
//! set. Training code only ever receives a [`TrainingSet`], so it cannot read
//! calibration data.

use std::ops::RangeInclusive;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};
use crate::system::{check_vectors, Sequence};

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceDataset {
    sequences: Vec<Sequence>,
    horizon: usize,
    dim: usize,
}

impl DisturbanceDataset {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no sequences".into()))?;
        let horizon = first.len();
        let dim = first
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::InvalidArgument("dataset sequences are empty".into()))?;
        for seq in &sequences {
            if seq.len() != horizon {
                return Err(Error::DimensionMismatch {
                    context: "dataset sequence length",
                    expected: horizon,
                    found: seq.len(),
                });
            }
            check_vectors(seq, dim, "dataset vector")?;
        }
        Ok(Self {
            sequences,
            horizon,
            dim,
        })
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    /// Number of sequences, `k + 1`.
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Split at `k1`: calibration `0..=k1`, training `k1+1..=k`. Requires
    /// `k1 + 1 < k`.
    pub fn split(self, k1: usize) -> Result<SplitDataset> {
        let k = self.len() - 1;
        if k1 + 1 >= k {
            return Err(Error::InvalidArgument(format!(
                "split needs k1 + 1 < k, got k1={k1}, k={k}"
            )));
        }
        let mut calibration = self.sequences;
        let training = calibration.split_off(k1 + 1);
        Ok(SplitDataset {
            calibration: CalibrationSet { sequences: calibration },
            training: TrainingSet {
                sequences: training,
                first_index: k1 + 1,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub calibration: CalibrationSet,
    pub training: TrainingSet,
}

impl SplitDataset {
    pub fn k(&self) -> usize {
        self.calibration.k1() + self.training.len()
    }

    pub fn k1(&self) -> usize {
        self.calibration.k1()
    }
}

/// Calibration sequences `w⁽⁰⁾ … w⁽ᵏ¹⁾`. Index 0 plays the role of the test
/// sample; quantiles are taken over `1..=k1` plus the `∞` sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    sequences: Vec<Sequence>,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        if sequences.len() < 2 {
            return Err(Error::InvalidArgument(
                "calibration set needs the test sequence plus at least one scoring sequence".into(),
            ));
        }
        Ok(Self { sequences })
    }

    pub fn k1(&self) -> usize {
        self.sequences.len() - 1
    }

    pub fn indices(&self) -> RangeInclusive<usize> {
        0..=self.k1()
    }

    pub fn all(&self) -> &[Sequence] {
        &self.sequences
    }

    /// Sequences `1..=k1`, the ones that produce calibration scores.
    pub fn scoring(&self) -> &[Sequence] {
        &self.sequences[1..]
    }

    /// Sequence 0.
    pub fn held_out(&self) -> &Sequence {
        &self.sequences[0]
    }
}

/// Training sequences `w⁽ᵏ¹⁺¹⁾ … w⁽ᵏ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    sequences: Vec<Sequence>,
    first_index: usize,
}

impl TrainingSet {
    pub fn new(sequences: Vec<Sequence>, first_index: usize) -> Self {
        Self {
            sequences,
            first_index,
        }
    }

    pub fn first_index(&self) -> usize {
        self.first_index
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn indices(&self) -> RangeInclusive<usize> {
        self.first_index..=self.first_index + self.sequences.len() - 1
    }

    /// Every vector `w⁽ʲ⁾(t)` of every training sequence.
    pub fn points(&self) -> Vec<DVector<f64>> {
        self.sequences.iter().flatten().cloned().collect()
    }
}

/// Source of i.i.d. disturbance sequences.
pub trait DisturbanceSampler: Sync {
    fn dim(&self) -> usize;

    fn sample_sequence(&self, rng: &mut StreamRng, horizon: usize) -> Sequence;
}

/// Whether the second parameter of a normal distribution is the variance or
/// the standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadParam {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordinateDistribution {
    Normal {
        mean: f64,
        spread: f64,
        #[serde(default)]
        spread_param: SpreadParam,
    },
    /// Gamma(shape, scale), optionally multiplied by an independent fair ±1.
    Gamma {
        shape: f64,
        scale: f64,
        #[serde(default)]
        random_sign: bool,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    Constant {
        value: f64,
    },
}

impl CoordinateDistribution {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            Self::Normal { mean, spread, .. } if !(mean.is_finite() && spread >= 0.0 && spread.is_finite()) => {
                bad(format!("normal(mean={mean}, spread={spread}) is invalid"))
            }
            Self::Gamma { shape, scale, .. } if !(shape > 0.0 && scale >= 0.0 && scale.is_finite()) => {
                bad(format!("gamma(shape={shape}, scale={scale}) is invalid"))
            }
            Self::Uniform { low, high } if !(low <= high && low.is_finite() && high.is_finite()) => {
                bad(format!("uniform({low}, {high}) is invalid"))
            }
            Self::Constant { value } if !value.is_finite() => bad(format!("constant {value} is invalid")),
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Normal {
                mean,
                spread,
                spread_param,
            } => {
                let std_dev = match spread_param {
                    SpreadParam::Variance => spread.sqrt(),
                    SpreadParam::StdDev => spread,
                };
                if std_dev == 0.0 {
                    return mean;
                }
                Normal::new(mean, std_dev).expect("validated").sample(rng)
            }
            Self::Gamma {
                shape,
                scale,
                random_sign,
            } => {
                let magnitude = if scale == 0.0 {
                    0.0
                } else {
                    Gamma::new(shape, scale).expect("validated").sample(rng)
                };
                if random_sign && rng.next_u32() & 1 == 1 {
                    -magnitude
                } else {
                    magnitude
                }
            }
            Self::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rand_distr::Uniform::new(low, high).expect("validated").sample(rng)
                }
            }
            Self::Constant { value } => value,
        }
    }
}

/// Independent per-coordinate disturbance distribution, i.i.d. over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceGenerator {
    pub coordinates: Vec<CoordinateDistribution>,
}

impl DisturbanceGenerator {
    pub fn new(coordinates: Vec<CoordinateDistribution>) -> Result<Self> {
        let gen = Self { coordinates };
        gen.validate()?;
        Ok(gen)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coordinates.is_empty() {
            return Err(Error::InvalidArgument("generator has no coordinates".into()));
        }
        self.coordinates.iter().try_for_each(CoordinateDistribution::validate)
    }

    /// First coordinate Normal(−0.01, 0.005), second Gamma(5.5, 0.005) with a
    /// random sign. `spread_param` selects how 0.005 is read.
    pub fn double_integrator_benchmark(spread_param: SpreadParam) -> Self {
        Self {
            coordinates: vec![
                CoordinateDistribution::Normal {
                    mean: -0.01,
                    spread: 0.005,
                    spread_param,
                },
                CoordinateDistribution::Gamma {
                    shape: 5.5,
                    scale: 0.005,
                    random_sign: true,
                },
            ],
        }
    }

    /// `count` sequences; sequence `j` is drawn from stream `j` of `seed`.
    pub fn generate(&self, count: usize, horizon: usize, seed: u64) -> Result<DisturbanceDataset> {
        self.validate()?;
        let sequences = (0..count)
            .map(|j| self.sample_sequence(&mut stream_rng(seed, j as u64), horizon))
            .collect();
        DisturbanceDataset::new(sequences)
    }
}

impl DisturbanceSampler for DisturbanceGenerator {
    fn dim(&self) -> usize {
        self.coordinates.len()
    }

    fn sample_sequence(&self, rng: &mut StreamRng, horizon: usize) -> Sequence {
        (0..horizon)
            .map(|_| DVector::from_iterator(self.dim(), self.coordinates.iter().map(|c| c.sample(rng))))
            .collect()
    }
}
