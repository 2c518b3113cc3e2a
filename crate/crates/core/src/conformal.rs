//! Split conformal prediction over trajectories.
//!
//! Nonconformity scores are maxima of vector norms along a trajectory, so a
//! quantile of the scores bounds every time step at once. For `k` calibration
//! scores and failure probability `θ`, the region radius is the `p`-th
//! smallest score with `p = ⌈(k+1)(1−θ)⌉`, or `+∞` when `p > k`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::system::{check_probability, Ellipsoid, LinearSystem, Sequence};

/// Slack when taking ceilings of products that are integers in exact
/// arithmetic (e.g. `20 · 0.95`).
const RANK_SLACK: f64 = 1e-9;

pub(crate) fn ceil_rank(x: f64) -> usize {
    (x - RANK_SLACK * x.abs().max(1.0)).ceil().max(0.0) as usize
}

/// Result of a conformal quantile: a finite order statistic or the `+∞`
/// sentinel contributed by the augmented empirical distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantile {
    Finite(f64),
    Infinite,
}

impl Quantile {
    pub fn value(self) -> f64 {
        match self {
            Quantile::Finite(v) => v,
            Quantile::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Quantile::Finite(v) => Some(v),
            Quantile::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Quantile::Finite(_))
    }
}

/// `p = ⌈(k+1)(1−θ)⌉`.
pub fn quantile_rank(k: usize, theta: f64) -> usize {
    ceil_rank((k as f64 + 1.0) * (1.0 - theta))
}

/// `(1−θ)`-quantile of `{scores…, ∞}`.
pub fn conformal_quantile(scores: &[f64], theta: f64) -> Result<Quantile> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score list".into()));
    }
    check_probability(theta, "theta")?;
    let p = quantile_rank(scores.len(), theta);
    if p > scores.len() {
        return Ok(Quantile::Infinite);
    }
    Ok(Quantile::Finite(order_statistic(scores, p.max(1))))
}

/// `p`-th smallest value (1-based).
pub(crate) fn order_statistic(values: &[f64], p: usize) -> f64 {
    let mut sorted = values.to_vec();
    let idx = p - 1;
    let (_, nth, _) = sorted.select_nth_unstable_by(idx, f64::total_cmp);
    *nth
}

/// Smallest `k` for which `⌈(k+1)(1−θ)⌉ ≤ k`, i.e. the quantile is finite.
pub fn min_calibration_size(theta: f64) -> usize {
    let mut k = 1;
    while quantile_rank(k, theta) > k {
        k += 1;
    }
    k
}

/// Failure level `θ − √(ln(1/β) / 2k)` that upgrades marginal coverage to
/// coverage `≥ 1−θ` with confidence `1−β` over the calibration draw.
pub fn pac_adjusted_level(theta: f64, beta: f64, k: usize) -> Result<f64> {
    check_probability(theta, "theta")?;
    if !(beta > 0.0 && beta <= 1.0) || k == 0 {
        return Err(Error::InvalidArgument(format!("invalid beta={beta} or k={k}")));
    }
    let adjusted = theta - ((1.0 / beta).ln() / (2.0 * k as f64)).sqrt();
    if adjusted <= 0.0 {
        return Err(Error::CalibrationTooSmall { theta, beta, k });
    }
    Ok(adjusted)
}

/// Vector norm used inside nonconformity scores. The ∞-norm yields box-shaped
/// regions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    #[default]
    Euclidean,
    Infinity,
}

impl ScoreNorm {
    pub fn apply(self, v: &DVector<f64>) -> f64 {
        match self {
            ScoreNorm::Euclidean => v.norm(),
            ScoreNorm::Infinity => v.amax(),
        }
    }
}

fn max_norm<'a>(items: impl Iterator<Item = DVector<f64>> + 'a, norm: ScoreNorm) -> f64 {
    items.map(|v| norm.apply(&v)).fold(0.0, f64::max)
}

/// `max_t ‖e(t)‖` over `e(1..=N)`.
pub fn score_error_trajectory(errors: &[DVector<f64>], norm: ScoreNorm) -> f64 {
    max_norm(errors.iter().cloned(), norm)
}

/// `max_t ‖K e(t)‖` over `e(0..N)`.
pub fn score_input_trajectory(gain: &DMatrix<f64>, errors_from_zero: &[DVector<f64>], norm: ScoreNorm) -> f64 {
    max_norm(errors_from_zero.iter().map(|e| gain * e), norm)
}

/// `max_t ‖Ŷ w(t)‖` over `w(0..N)`.
pub fn score_disturbance_sequence(yhat: &DMatrix<f64>, w: &[DVector<f64>], norm: ScoreNorm) -> f64 {
    max_norm(w.iter().map(|wt| yhat * wt), norm)
}

/// Shift `e(1..=N)` to `e(0..N)` using `e(0) = 0`.
pub fn errors_from_zero(errors: &[DVector<f64>]) -> Sequence {
    let Some(first) = errors.first() else {
        return Vec::new();
    };
    std::iter::once(DVector::zeros(first.len()))
        .chain(errors[..errors.len() - 1].iter().cloned())
        .collect()
}

/// Time indices covered by a prediction region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonTag {
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionKind {
    /// `{x : ‖x‖ ≤ radius}` in the score norm.
    Ball { radius: f64, dim: usize, norm: ScoreNorm },
    Ellipsoid(Ellipsoid),
}

/// A set that contains a random trajectory at every covered time step with
/// probability at least `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRegion {
    pub kind: RegionKind,
    pub level: f64,
    pub horizon: HorizonTag,
}

impl PredictionRegion {
    pub fn ball(radius: f64, dim: usize, norm: ScoreNorm, level: f64, horizon: HorizonTag) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("ball radius {radius} must be finite and nonnegative")));
        }
        check_probability(level, "confidence level")?;
        Ok(Self {
            kind: RegionKind::Ball { radius, dim, norm },
            level,
            horizon,
        })
    }

    pub fn ellipsoid(ellipsoid: Ellipsoid, level: f64, horizon: HorizonTag) -> Result<Self> {
        check_probability(level, "confidence level")?;
        Ok(Self {
            kind: RegionKind::Ellipsoid(ellipsoid),
            level,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            RegionKind::Ball { dim, .. } => *dim,
            RegionKind::Ellipsoid(e) => e.dim(),
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self.kind {
            RegionKind::Ball { radius, .. } => Some(radius),
            RegionKind::Ellipsoid(_) => None,
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match &self.kind {
            RegionKind::Ball { radius, norm, .. } => norm.apply(x) <= *radius,
            RegionKind::Ellipsoid(e) => e.contains(x),
        }
    }
}

/// Calibrated balls for the error and feedback-input processes.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedRegions {
    pub error: PredictionRegion,
    pub input: PredictionRegion,
    pub error_scores: Vec<f64>,
    pub input_scores: Vec<f64>,
}

/// Error/input scores of every scoring calibration sequence under `gain`.
pub fn calibration_scores(
    sys: &LinearSystem,
    gain: &DMatrix<f64>,
    sequences: &[Sequence],
    norm: ScoreNorm,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sys.check_gain(gain)?;
    let scored: Vec<(f64, f64)> = sequences
        .par_iter()
        .map(|w| {
            let e = sys.simulate_error(gain, w)?;
            let re = score_error_trajectory(&e, norm);
            let ru = score_input_trajectory(gain, &errors_from_zero(&e), norm);
            Ok((re, ru))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().unzip())
}

/// Balls `B(C_e)` and `B(C_Ke)` from the calibration set for a gain that was
/// fixed before looking at calibration data.
pub fn calibrate_regions(
    sys: &LinearSystem,
    gain: &DMatrix<f64>,
    calibration: &CalibrationSet,
    theta: f64,
    norm: ScoreNorm,
) -> Result<CalibratedRegions> {
    check_probability(theta, "theta")?;
    let (error_scores, input_scores) = calibration_scores(sys, gain, calibration.scoring(), norm)?;
    let k1 = error_scores.len();
    let finite = |q: Quantile| {
        q.finite().ok_or(Error::InsufficientCalibration {
            needed: min_calibration_size(theta),
            have: k1,
            theta,
        })
    };
    let c_e = finite(conformal_quantile(&error_scores, theta)?)?;
    let c_ke = finite(conformal_quantile(&input_scores, theta)?)?;
    let n = sys.state_dim();
    let m = sys.input_dim();
    let horizon = sys.horizon();
    Ok(CalibratedRegions {
        error: PredictionRegion::ball(c_e, n, norm, 1.0 - theta, HorizonTag { first: 1, last: horizon })?,
        input: PredictionRegion::ball(c_ke, m, norm, 1.0 - theta, HorizonTag { first: 0, last: horizon - 1 })?,
        error_scores,
        input_scores,
    })
}
