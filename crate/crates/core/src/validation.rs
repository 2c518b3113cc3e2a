//! Seeded Monte Carlo evaluation of closed-loop constraint satisfaction and
//! standalone conformal coverage experiments.
//!
//! Trial `i` draws from its own stream keyed by `(seed, i)` and the counts
//! are summed, so results do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::{Distribution, Exp, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_quantile, min_calibration_size, PredictionRegion, Quantile};
use crate::data::DisturbanceSampler;
use crate::error::{Error, Result};
use crate::relaxed::assemble_control;
use crate::rng::{stream_rng, StreamRng};
use crate::scenario::DisturbanceFeedback;
use crate::system::{check_probability, ConstraintSpec, LinearSystem, Sequence};

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// A causal control law. `observed` holds the disturbances `w(0..t)` recovered
/// from measured states.
pub trait Policy: Sync {
    fn horizon(&self) -> usize;
    fn input(&self, t: usize, x: &DVector<f64>, observed: &[DVector<f64>]) -> DVector<f64>;
}

/// `u(t) = K(x(t) − z*(t)) + v*(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub gain: DMatrix<f64>,
    pub v_star: Sequence,
    pub z_star: Sequence,
}

impl Policy for FeedbackPolicy {
    fn horizon(&self) -> usize {
        self.v_star.len()
    }

    fn input(&self, t: usize, x: &DVector<f64>, _observed: &[DVector<f64>]) -> DVector<f64> {
        assemble_control(&self.gain, &self.v_star, &self.z_star, x, t).expect("time index within the horizon")
    }
}

impl Policy for DisturbanceFeedback {
    fn horizon(&self) -> usize {
        self.v.len()
    }

    fn input(&self, t: usize, _x: &DVector<f64>, observed: &[DVector<f64>]) -> DVector<f64> {
        DisturbanceFeedback::input(self, t, observed)
    }
}

/// Rate with its Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl RateEstimate {
    pub fn new(successes: usize, trials: usize) -> Self {
        let (lower, upper) = wilson_interval(successes, trials, Z_95);
        Self {
            successes,
            trials,
            rate: if trials == 0 { f64::NAN } else { successes as f64 / trials as f64 },
            lower,
            upper,
        }
    }

    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_trials: usize,
    pub seed: u64,
    /// `x(t) ∈ X_t` for all `t = 1..N`.
    pub state: RateEstimate,
    /// `u(t) ∈ U` for all `t = 0..N−1`.
    pub input: RateEstimate,
    pub joint: RateEstimate,
    /// `x(t) − z*(t)` inside the error region over its horizon, when checked.
    pub error_region: Option<RateEstimate>,
}

/// Nominal trajectory and error region for the prediction-region check.
#[derive(Debug, Clone, Copy)]
pub struct ErrorRegionCheck<'a> {
    pub z_star: &'a [DVector<f64>],
    pub region: &'a PredictionRegion,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    state: usize,
    input: usize,
    joint: usize,
    region: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            state: self.state + o.state,
            input: self.input + o.input,
            joint: self.joint + o.joint,
            region: self.region + o.region,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_validate<P: Policy + ?Sized, S: DisturbanceSampler + ?Sized>(
    sys: &LinearSystem,
    policy: &P,
    x0: &DVector<f64>,
    constraints: &ConstraintSpec,
    sampler: &S,
    n_trials: usize,
    seed: u64,
    error_check: Option<ErrorRegionCheck<'_>>,
) -> Result<ValidationReport> {
    constraints.check_against(sys)?;
    let horizon = sys.horizon();
    if policy.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            context: "policy horizon",
            expected: horizon,
            found: policy.horizon(),
        });
    }
    if sampler.dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "disturbance sampler",
            expected: sys.state_dim(),
            found: sampler.dim(),
        });
    }
    if let Some(check) = &error_check {
        if check.z_star.len() != horizon + 1 || check.region.dim() != sys.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "error-region check",
                expected: horizon + 1,
                found: check.z_star.len(),
            });
        }
    }
    if n_trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }

    let counts = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, trial);
            let w = sampler.sample_sequence(&mut rng, horizon);
            let mut x = x0.clone();
            let mut observed: Vec<DVector<f64>> = Vec::with_capacity(horizon);
            let (mut state_ok, mut input_ok, mut region_ok) = (true, true, true);
            for (t, wt) in w.iter().enumerate() {
                let u = policy.input(t, &x, &observed);
                input_ok &= constraints.input_set().contains(&u);
                let drift = sys.a() * &x + sys.b() * &u;
                let next = &drift + wt;
                observed.push(&next - &drift);
                x = next;
                state_ok &= constraints.state_set(t + 1).contains(&x);
                if let Some(check) = &error_check {
                    let tag = check.region.horizon;
                    let step = t + 1;
                    if step >= tag.first && step <= tag.last {
                        region_ok &= check.region.contains(&(&x - &check.z_star[step]));
                    }
                }
            }
            Counts {
                state: state_ok as usize,
                input: input_ok as usize,
                joint: (state_ok && input_ok) as usize,
                region: region_ok as usize,
            }
        })
        .reduce(Counts::default, |a, b| a + b);

    Ok(ValidationReport {
        n_trials,
        seed,
        state: RateEstimate::new(counts.state, n_trials),
        input: RateEstimate::new(counts.input, n_trials),
        joint: RateEstimate::new(counts.joint, n_trials),
        error_region: error_check.map(|_| RateEstimate::new(counts.region, n_trials)),
    })
}

/// Validation of the feedback law `u = K(x − z*) + v*` from `x(0) = z*(0)`.
#[allow(clippy::too_many_arguments)]
pub fn validate_feedback<S: DisturbanceSampler + ?Sized>(
    sys: &LinearSystem,
    gain: &DMatrix<f64>,
    v_star: &[DVector<f64>],
    z_star: &[DVector<f64>],
    constraints: &ConstraintSpec,
    sampler: &S,
    n_trials: usize,
    seed: u64,
    error_region: Option<&PredictionRegion>,
) -> Result<ValidationReport> {
    sys.check_gain(gain)?;
    let x0 = z_star
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty nominal trajectory".into()))?
        .clone();
    let policy = FeedbackPolicy {
        gain: gain.clone(),
        v_star: v_star.to_vec(),
        z_star: z_star.to_vec(),
    };
    let check = error_region.map(|region| ErrorRegionCheck { z_star, region });
    monte_carlo_validate(sys, &policy, &x0, constraints, sampler, n_trials, seed, check)
}

/// Continuous score laws for coverage experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDistribution {
    Uniform { low: f64, high: f64 },
    Exponential { rate: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Constant { value: f64 },
}

impl ScoreDistribution {
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            ScoreDistribution::Uniform { low, high } => rng.random_range(low..high),
            ScoreDistribution::Exponential { rate } => Exp::new(rate).expect("positive rate").sample(rng),
            ScoreDistribution::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("valid lognormal").sample(rng),
            ScoreDistribution::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub k: usize,
    pub theta: f64,
    pub n_repeats: usize,
    /// Fraction of repeats where the test score was within the quantile.
    pub mean: f64,
    /// Standard deviation of the per-repeat containment indicator.
    pub std_dev: f64,
    pub interval: RateEstimate,
}

/// Repeatedly draw `k` calibration scores and one test score and record
/// whether the test score falls within the conformal quantile.
pub fn coverage_experiment<F>(score_sampler: F, k: usize, theta: f64, n_repeats: usize, seed: u64) -> Result<CoverageReport>
where
    F: Fn(&mut StreamRng) -> f64 + Sync,
{
    check_probability(theta, "theta")?;
    if k < min_calibration_size(theta) {
        return Err(Error::InsufficientCalibration {
            needed: min_calibration_size(theta),
            have: k,
            theta,
        });
    }
    if n_repeats == 0 {
        return Err(Error::InvalidArgument("need at least one repeat".into()));
    }
    let covered: usize = (0..n_repeats as u64)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(k),
            |scores, repeat| {
                let mut rng = stream_rng(seed, repeat);
                scores.clear();
                scores.extend((0..k).map(|_| score_sampler(&mut rng)));
                let test = score_sampler(&mut rng);
                let q = conformal_quantile(scores, theta).expect("validated inputs");
                usize::from(matches!(q, Quantile::Infinite) || test <= q.value())
            },
        )
        .sum();
    let mean = covered as f64 / n_repeats as f64;
    Ok(CoverageReport {
        k,
        theta,
        n_repeats,
        mean,
        std_dev: (mean * (1.0 - mean)).sqrt(),
        interval: RateEstimate::new(covered, n_repeats),
    })
}
