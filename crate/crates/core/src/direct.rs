//! Direct method: train a feedback gain on the training split.
//!
//! The gain minimizes `η_e + γ η_u`, where `η_e` and `η_u` are empirical
//! quantiles of the error and input scores of the training trajectories. The
//! program is nonconvex in `K`, so a real-coded genetic algorithm searches the
//! box `[−K_max, K_max]` entrywise. Bound violations are penalized so that any
//! candidate meeting both bounds beats any candidate that misses one.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{ceil_rank, order_statistic, ScoreNorm};
use crate::data::TrainingSet;
use crate::error::{Error, Result};
use crate::rng::stream_rng2;
use crate::system::{check_probability, ConstraintSpec, LinearSystem};

/// Scores of divergent trajectories are capped here so fitness stays finite
/// and ordered.
const SCORE_CAP: f64 = 1e100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of `η_u`; `None` selects `η_e^max / η_u^max`.
    pub gamma: Option<f64>,
    pub theta: f64,
    pub population: usize,
    pub generations: usize,
    pub gene_bound: f64,
    pub seed: u64,
    pub tournament_size: usize,
    pub crossover_alpha: f64,
    pub mutation_rate: f64,
    /// Standard deviation of Gaussian mutation; `None` selects `gene_bound / 10`.
    pub mutation_sigma: Option<f64>,
    pub elite_count: usize,
    pub penalty_weight: f64,
    pub norm: ScoreNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            theta: 0.05,
            population: 150,
            generations: 50,
            gene_bound: 10.0,
            seed: 0,
            tournament_size: 3,
            crossover_alpha: 0.5,
            mutation_rate: 0.2,
            mutation_sigma: None,
            elite_count: 2,
            penalty_weight: 1e3,
            norm: ScoreNorm::Euclidean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability(self.theta, "theta")?;
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if !(self.gene_bound > 0.0 && self.gene_bound.is_finite()) {
            return bad("gene bound must be positive");
        }
        if self.tournament_size == 0 {
            return bad("tournament size must be positive");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation rate must lie in [0, 1]");
        }
        if !(self.crossover_alpha >= 0.0) {
            return bad("crossover alpha must be nonnegative");
        }
        if matches!(self.mutation_sigma, Some(s) if !(s >= 0.0)) {
            return bad("mutation sigma must be nonnegative");
        }
        if matches!(self.gamma, Some(g) if !(g >= 0.0)) {
            return bad("gamma must be nonnegative");
        }
        if !(self.penalty_weight >= 0.0) {
            return bad("penalty weight must be nonnegative");
        }
        Ok(())
    }

    fn sigma(&self) -> f64 {
        self.mutation_sigma.unwrap_or(self.gene_bound / 10.0)
    }
}

/// Largest admissible radii for the error and input balls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaBounds {
    pub eta_e_max: f64,
    pub eta_u_max: f64,
}

/// `η_e^max = min_t 1/√λmax(P_t)` and `η_u^max = 1/√λmax(Q)`.
pub fn eta_bounds(constraints: &ConstraintSpec) -> EtaBounds {
    let eta_e_max = constraints
        .state_sets()
        .iter()
        .map(|s| s.min_semi_axis())
        .fold(f64::INFINITY, f64::min);
    EtaBounds {
        eta_e_max,
        eta_u_max: constraints.input_set().min_semi_axis(),
    }
}

/// Quantile level used on the training scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLevel {
    /// `min(1, (1 + 1/(k−k1−1))(1−θ))`.
    pub level: f64,
    /// The unclamped level exceeded one, so the maximum score is used.
    pub clamped: bool,
}

pub fn training_quantile_level(k: usize, k1: usize, theta: f64) -> Result<TrainingLevel> {
    check_probability(theta, "theta")?;
    if k < k1 + 2 {
        return Err(Error::InvalidArgument(format!(
            "need k − k1 − 1 ≥ 1, got k={k}, k1={k1}"
        )));
    }
    let raw = (1.0 + 1.0 / (k - k1 - 1) as f64) * (1.0 - theta);
    if raw > 1.0 {
        log::warn!("training quantile level {raw:.6} exceeds one; using the maximum training score");
        return Ok(TrainingLevel { level: 1.0, clamped: true });
    }
    Ok(TrainingLevel { level: raw, clamped: false })
}

/// `⌈n·level⌉`-th smallest of `n` finite scores, no `∞` augmentation.
pub fn training_quantile(scores: &[f64], level: f64) -> f64 {
    let n = scores.len();
    let p = ceil_rank(n as f64 * level).clamp(1, n);
    order_statistic(scores, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessEval {
    pub fitness: f64,
    pub eta_e: f64,
    pub eta_u: f64,
}

impl FitnessEval {
    pub fn feasible(&self, bounds: &EtaBounds) -> bool {
        self.eta_e < bounds.eta_e_max && self.eta_u < bounds.eta_u_max
    }
}

/// Everything the fitness needs apart from the gain.
#[derive(Debug, Clone)]
pub struct TrainingObjective<'a> {
    sys: &'a LinearSystem,
    training: &'a TrainingSet,
    bounds: EtaBounds,
    gamma: f64,
    level: TrainingLevel,
    penalty_weight: f64,
    norm: ScoreNorm,
}

impl<'a> TrainingObjective<'a> {
    pub fn new(
        sys: &'a LinearSystem,
        constraints: &ConstraintSpec,
        training: &'a TrainingSet,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        constraints.check_against(sys)?;
        if training.len() < 2 {
            return Err(Error::InvalidArgument("at least two training sequences are required".into()));
        }
        let first = training.first_index();
        if first == 0 {
            return Err(Error::InvalidArgument("training indices must follow the calibration block".into()));
        }
        let k = first + training.len() - 1;
        let level = training_quantile_level(k, first - 1, config.theta)?;
        let bounds = eta_bounds(constraints);
        Ok(Self {
            sys,
            training,
            bounds,
            gamma: config.gamma.unwrap_or(bounds.eta_e_max / bounds.eta_u_max),
            level,
            penalty_weight: config.penalty_weight,
            norm: config.norm,
        })
    }

    pub fn bounds(&self) -> EtaBounds {
        self.bounds
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn level(&self) -> TrainingLevel {
        self.level
    }

    /// Error and input scores of one training sequence under `gain`.
    fn scores(&self, closed_loop: &DMatrix<f64>, gain: &DMatrix<f64>, w: &[DVector<f64>]) -> (f64, f64) {
        let n = self.sys.state_dim();
        let mut e = DVector::zeros(n);
        let mut next = DVector::zeros(n);
        let mut ku = DVector::zeros(gain.nrows());
        let (mut re, mut ru) = (0.0f64, 0.0f64);
        for wt in w {
            // u-score uses e(t) before the update, starting from e(0) = 0.
            ku.gemv(1.0, gain, &e, 0.0);
            ru = ru.max(self.norm.apply(&ku));
            next.copy_from(wt);
            next.gemv(1.0, closed_loop, &e, 1.0);
            std::mem::swap(&mut e, &mut next);
            re = re.max(self.norm.apply(&e));
        }
        let cap = |s: f64| if s.is_finite() { s.min(SCORE_CAP) } else { SCORE_CAP };
        (cap(re), cap(ru))
    }

    pub fn evaluate(&self, gain: &DMatrix<f64>) -> Result<FitnessEval> {
        let closed_loop = self.sys.closed_loop(gain)?;
        let (re, ru): (Vec<f64>, Vec<f64>) = self
            .training
            .sequences()
            .iter()
            .map(|w| self.scores(&closed_loop, gain, w))
            .unzip();
        let eta_e = training_quantile(&re, self.level.level);
        let eta_u = training_quantile(&ru, self.level.level);
        let b = &self.bounds;
        let violation = (eta_e - b.eta_e_max).max(0.0) + (eta_u - b.eta_u_max).max(0.0);
        let penalty = self.penalty_weight * violation / b.eta_e_max.min(b.eta_u_max);
        Ok(FitnessEval {
            fitness: eta_e + self.gamma * eta_u + penalty,
            eta_e,
            eta_u,
        })
    }
}

/// Fitness of a single gain.
pub fn fitness(
    gain: &DMatrix<f64>,
    training: &TrainingSet,
    sys: &LinearSystem,
    constraints: &ConstraintSpec,
    config: &TrainConfig,
) -> Result<FitnessEval> {
    TrainingObjective::new(sys, constraints, training, config)?.evaluate(gain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub gain: DMatrix<f64>,
    pub eta_e: f64,
    pub eta_u: f64,
    pub fitness: f64,
    pub feasible: bool,
    /// Best fitness of the initial population followed by one entry per
    /// generation.
    pub fitness_history: Vec<f64>,
    pub bounds: EtaBounds,
    pub gamma: f64,
    pub level: TrainingLevel,
}

struct Individual {
    genes: Vec<f64>,
    eval: FitnessEval,
}

fn gain_from_genes(genes: &[f64], m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, n, genes)
}

/// Genetic-algorithm search for a gain. Only the training split is visible
/// here; calibration data cannot influence the result.
pub fn train_feedback_gain(
    sys: &LinearSystem,
    constraints: &ConstraintSpec,
    training: &TrainingSet,
    config: &TrainConfig,
) -> Result<TrainResult> {
    let objective = TrainingObjective::new(sys, constraints, training, config)?;
    let (m, n) = (sys.input_dim(), sys.state_dim());
    let genes = m * n;
    let bound = config.gene_bound;
    let mutation = Normal::new(0.0, config.sigma()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let elites = config.elite_count.min(config.population);

    let evaluate = |genes: Vec<f64>| -> Result<Individual> {
        let eval = objective.evaluate(&gain_from_genes(&genes, m, n))?;
        Ok(Individual { genes, eval })
    };

    let mut population: Vec<Individual> = (0..config.population)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng2(config.seed, 0, i as u64);
            evaluate((0..genes).map(|_| rng.random_range(-bound..=bound)).collect())
        })
        .collect::<Result<_>>()?;
    rank(&mut population);
    let mut history = vec![population[0].eval.fitness];

    for generation in 1..=config.generations {
        let parents = &population;
        let children: Vec<Individual> = (elites..config.population)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng2(config.seed, generation as u64, i as u64);
                let mut pick = || {
                    (0..config.tournament_size)
                        .map(|_| rng.random_range(0..parents.len()))
                        .min()
                        .expect("tournament size is positive")
                };
                let (a, b) = (pick(), pick());
                let (pa, pb) = (&parents[a].genes, &parents[b].genes);
                let child = pa
                    .iter()
                    .zip(pb)
                    .map(|(&x, &y)| {
                        let (lo, hi) = (x.min(y), x.max(y));
                        let d = config.crossover_alpha * (hi - lo);
                        let mut g = if hi - lo + 2.0 * d > 0.0 {
                            rng.random_range(lo - d..=hi + d)
                        } else {
                            lo
                        };
                        if rng.random_bool(config.mutation_rate) {
                            g += mutation.sample(&mut rng);
                        }
                        g.clamp(-bound, bound)
                    })
                    .collect();
                evaluate(child)
            })
            .collect::<Result<_>>()?;
        population.truncate(elites);
        population.extend(children);
        rank(&mut population);
        history.push(population[0].eval.fitness);
    }

    let best = &population[0];
    Ok(TrainResult {
        gain: gain_from_genes(&best.genes, m, n),
        eta_e: best.eval.eta_e,
        eta_u: best.eval.eta_u,
        fitness: best.eval.fitness,
        feasible: best.eval.feasible(&objective.bounds()),
        fitness_history: history,
        bounds: objective.bounds(),
        gamma: objective.gamma(),
        level: objective.level(),
    })
}

/// Sort by fitness; the stable sort keeps earlier (elite) individuals first on
/// ties, so ranking is a pure function of the population.
fn rank(population: &mut [Individual]) {
    population.sort_by(|a, b| a.eval.fitness.total_cmp(&b.eval.fitness));
}

/// Spectral radius helper used in diagnostics of trained gains.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
