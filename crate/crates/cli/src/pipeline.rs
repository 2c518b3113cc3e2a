//! End-to-end pipelines: split, design, calibrate, tighten, solve and
//! validate, with every failure attributed to its stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cpcontrol::conformal::{calibrate_regions, HorizonTag, PredictionRegion};
use cpcontrol::data::{DisturbanceDataset, DisturbanceSampler, SplitDataset};
use cpcontrol::direct::train_feedback_gain;
use cpcontrol::indirect::{
    disturbance_region, input_admissibility, synthesize_invariant_region, verify_invariance, MultiplierGrid,
};
use cpcontrol::linalg::min_eigenvalue_sym_part;
use cpcontrol::mvee::{centered_mvee, MveeOptions};
use cpcontrol::relaxed::{check_tightening_feasible, solve_relaxed_ocp, tighten, InputShrink, TightenedConstraints};
use cpcontrol::rng::stream_rng;
use cpcontrol::scenario::{build_scenario_program, scenario_requirement_note, solve_scenario_program};
use cpcontrol::validation::{monte_carlo_validate, validate_feedback, ValidationReport};
use cpcontrol::{Ellipsoid, GridOutcome, Trajectory};
use nalgebra::{DMatrix, DVector};

use crate::config::{rows_of, DataSource, InputRule, Problem, RunConfig};
use crate::dataset::{read_dataset, EmpiricalSampler};
use crate::error::{AtStage, CliError, CliResult, Stage};
use crate::manifest::{
    BaselineRecord, DataRecord, DirectRecord, IndexRange, IndirectRecord, InvarianceRecord, Manifest, Method,
    RegionRecord, SeedRecord, StageTiming, Timing, TighteningRecord, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION,
    TIMING_FILE,
};
use crate::output::{nominal_csv, region_outlines, regions_csv, samples_csv, write_atomic, write_json};

pub const NOMINAL_FILE: &str = "nominal.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const REGIONS_FILE: &str = "regions.csv";

/// Where the run's disturbance data came from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataOrigin {
    Generated,
    File(PathBuf),
}

/// Dataset from `--data`, the config's file source, or the config's
/// generator, in that order of precedence.
pub fn load_dataset(config: &RunConfig, data: Option<&Path>) -> CliResult<(DisturbanceDataset, DataOrigin)> {
    let path = data.map(Path::to_path_buf).or_else(|| match &config.data.source {
        DataSource::File { path } => Some(path.clone()),
        DataSource::Generator { .. } => None,
    });
    match path {
        Some(p) => Ok((read_dataset(&p)?, DataOrigin::File(p))),
        None => {
            let gen = config
                .generator()
                .ok_or_else(|| CliError::Config("no dataset and no generator configured".into()))?;
            let ds = gen
                .generate(config.data.k + 1, config.system.horizon, config.data.seed)
                .at(Stage::Load)?;
            Ok((ds, DataOrigin::Generated))
        }
    }
}

/// Everything a run writes to its output directory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: Manifest,
    pub timing: Timing,
    pub nominal_csv: Vec<u8>,
    pub samples_csv: Vec<u8>,
    pub regions_csv: Vec<u8>,
}

impl RunOutput {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_json(&dir.join(TIMING_FILE), &self.timing)?;
        write_atomic(&dir.join(NOMINAL_FILE), &self.nominal_csv)?;
        write_atomic(&dir.join(SAMPLES_FILE), &self.samples_csv)?;
        write_atomic(&dir.join(REGIONS_FILE), &self.regions_csv)
    }
}

struct Clock {
    start: Instant,
    last: Instant,
    stages: Vec<StageTiming>,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }

    fn finish(self) -> Timing {
        Timing {
            total_seconds: self.start.elapsed().as_secs_f64(),
            stages: self.stages,
        }
    }
}

/// Shared setup: typed problem, dataset checks, split and the sampler used
/// for validation.
struct Context {
    problem: Problem,
    split: SplitDataset,
    dataset: DisturbanceDataset,
    sampler: Box<dyn DisturbanceSampler>,
    data: DataRecord,
    seeds: SeedRecord,
}

fn prepare(config: &RunConfig, dataset: &DisturbanceDataset, origin: &DataOrigin) -> CliResult<Context> {
    let problem = config.problem()?;
    let sys = &problem.system;
    if dataset.len() != config.data.k + 1 {
        return Err(CliError::Config(format!(
            "dataset has {} sequences, config expects k + 1 = {}",
            dataset.len(),
            config.data.k + 1
        )));
    }
    if dataset.horizon() != sys.horizon() || dataset.dim() != sys.state_dim() {
        return Err(CliError::Config(format!(
            "dataset sequences are {}x{}, system needs {}x{}",
            dataset.horizon(),
            dataset.dim(),
            sys.horizon(),
            sys.state_dim()
        )));
    }
    let split = dataset.clone().split(config.data.k1).at(Stage::Split)?;
    let calibration = IndexRange {
        first: *split.calibration.indices().start(),
        last: *split.calibration.indices().end(),
    };
    let training = IndexRange {
        first: *split.training.indices().start(),
        last: *split.training.indices().end(),
    };
    if calibration.overlaps(&training) {
        return Err(CliError::Internal(format!(
            "training {training:?} and calibration {calibration:?} indices overlap"
        )));
    }
    let (sampler, sampler_name): (Box<dyn DisturbanceSampler>, &str) = match config.generator() {
        Some(gen) => (Box::new(gen), "generator"),
        None => {
            log::warn!("no generator configured; validating against resampled dataset vectors");
            (Box::new(EmpiricalSampler::new(dataset)), "empirical")
        }
    };
    let source = match origin {
        DataOrigin::Generated => "generator".to_string(),
        DataOrigin::File(p) => p
            .file_name()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()),
    };
    Ok(Context {
        data: DataRecord {
            source,
            k: split.k(),
            k1: split.k1(),
            horizon: dataset.horizon(),
            dim: dataset.dim(),
            calibration,
            training,
            disjoint: true,
            validation_sampler: sampler_name.to_string(),
        },
        seeds: SeedRecord {
            data: config.data.seed,
            training: config.direct.seed,
            validation: config.validation.seed,
        },
        problem,
        split,
        dataset: dataset.clone(),
        sampler,
    })
}

fn tightening_record(
    problem: &Problem,
    error: &PredictionRegion,
    input: InputShrink<'_>,
) -> CliResult<(TighteningRecord, TightenedConstraints)> {
    let verdict = check_tightening_feasible(&problem.constraints, error, input).at(Stage::Tighten)?;
    let tightened = tighten(&problem.constraints, error, input).at(Stage::Tighten)?;
    Ok((
        TighteningRecord {
            feasible: verdict.feasible,
            min_state_margin: verdict.state_margins.iter().copied().fold(f64::INFINITY, f64::min),
            input_margin: verdict.input_margin,
        },
        tightened,
    ))
}

/// The first `count` validation trials, replayed for plotting.
fn feedback_samples(
    ctx: &Context,
    gain: &DMatrix<f64>,
    v_star: &[DVector<f64>],
    seed: u64,
    count: usize,
) -> CliResult<Vec<Trajectory>> {
    let sys = &ctx.problem.system;
    (0..count as u64)
        .map(|trial| {
            let w = ctx.sampler.sample_sequence(&mut stream_rng(seed, trial), sys.horizon());
            sys.simulate_closed_loop(gain, v_star, &ctx.problem.x0, &w).at(Stage::Validate)
        })
        .collect()
}

fn vec_rows(seq: &[DVector<f64>]) -> Vec<Vec<f64>> {
    seq.iter().map(|v| v.iter().copied().collect()).collect()
}

struct FeedbackRun {
    objective: f64,
    v_star: Vec<DVector<f64>>,
    validation: ValidationReport,
    nominal_csv: Vec<u8>,
    samples_csv: Vec<u8>,
    regions_csv: Vec<u8>,
    tightening: TighteningRecord,
}

/// Tighten, solve and validate for a fixed gain and regions.
fn finish_feedback_run(
    config: &RunConfig,
    ctx: &Context,
    clock: &mut Clock,
    gain: &DMatrix<f64>,
    error: &PredictionRegion,
    input: InputShrink<'_>,
) -> CliResult<FeedbackRun> {
    let p = &ctx.problem;
    let (tightening, tightened) = tightening_record(p, error, input)?;
    clock.lap(Stage::Tighten);

    let sol = solve_relaxed_ocp(&p.system, &p.cost, &tightened, &p.x0)
        .and_then(|s| s.into_optimal())
        .at(Stage::Solve)?;
    clock.lap(Stage::Solve);

    let v = &config.validation;
    let validation = validate_feedback(
        &p.system,
        gain,
        &sol.v_star,
        &sol.z_star,
        &p.constraints,
        ctx.sampler.as_ref(),
        v.n_trials,
        v.seed,
        Some(error),
    )
    .at(Stage::Validate)?;
    let samples = feedback_samples(ctx, gain, &sol.v_star, v.seed, v.sample_trajectories.min(v.n_trials))?;
    clock.lap(Stage::Validate);

    Ok(FeedbackRun {
        objective: sol.objective_value,
        nominal_csv: nominal_csv(&sol.z_star, &sol.v_star)?,
        samples_csv: samples_csv(&samples)?,
        regions_csv: regions_csv(&region_outlines(&p.constraints, Some(&tightened), Some(error))?)?,
        v_star: sol.v_star,
        validation,
        tightening,
    })
}

pub fn run_direct(config: &RunConfig, dataset: &DisturbanceDataset, origin: &DataOrigin) -> CliResult<RunOutput> {
    let mut clock = Clock::new();
    let ctx = prepare(config, dataset, origin)?;
    clock.lap(Stage::Split);
    let p = &ctx.problem;
    let theta = p.constraints.theta();

    let trained = train_feedback_gain(&p.system, &p.constraints, &ctx.split.training, &config.direct).at(Stage::Train)?;
    if !trained.feasible {
        log::warn!(
            "trained gain misses the training bounds (eta_e={:.4}, eta_u={:.4})",
            trained.eta_e,
            trained.eta_u
        );
    }
    clock.lap(Stage::Train);

    let regions = calibrate_regions(&p.system, &trained.gain, &ctx.split.calibration, theta, config.score_norm)
        .at(Stage::Calibrate)?;
    clock.lap(Stage::Calibrate);

    let run = finish_feedback_run(
        config,
        &ctx,
        &mut clock,
        &trained.gain,
        &regions.error,
        InputShrink::Region(&regions.input),
    )?;

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        method: Method::Direct,
        data: ctx.data.clone(),
        seeds: ctx.seeds,
        theta,
        gain: Some(rows_of(&trained.gain)),
        error_region: Some(RegionRecord::from_region(&regions.error)),
        input_region: Some(RegionRecord::from_region(&regions.input)),
        tightening: Some(run.tightening),
        objective: run.objective,
        v_star: vec_rows(&run.v_star),
        validation: run.validation,
        direct: Some(DirectRecord {
            eta_e: trained.eta_e,
            eta_u: trained.eta_u,
            eta_e_max: trained.bounds.eta_e_max,
            eta_u_max: trained.bounds.eta_u_max,
            fitness: trained.fitness,
            feasible: trained.feasible,
            gamma: trained.gamma,
            training_level: trained.level.level,
            training_level_clamped: trained.level.clamped,
            generations: config.direct.generations,
            population: config.direct.population,
        }),
        indirect: None,
        baseline: None,
    };
    Ok(RunOutput {
        manifest,
        timing: clock.finish(),
        nominal_csv: run.nominal_csv,
        samples_csv: run.samples_csv,
        regions_csv: run.regions_csv,
    })
}

pub fn multiplier_grid(config: &RunConfig) -> CliResult<MultiplierGrid> {
    match &config.indirect.grid {
        Some(pairs) => MultiplierGrid::from_pairs(pairs.clone()),
        None => MultiplierGrid::triangular(config.indirect.grid_step),
    }
    .map_err(|e| CliError::Config(format!("indirect grid: {e}")))
}

pub fn run_indirect(config: &RunConfig, dataset: &DisturbanceDataset, origin: &DataOrigin) -> CliResult<RunOutput> {
    let mut clock = Clock::new();
    let ctx = prepare(config, dataset, origin)?;
    clock.lap(Stage::Split);
    let p = &ctx.problem;
    let cfg = &config.indirect;
    let theta = p.constraints.theta();
    let grid = multiplier_grid(config)?;

    let mvee = centered_mvee(
        &ctx.split.training.points(),
        &MveeOptions {
            tol: cfg.mvee_tol,
            max_iter: cfg.mvee_max_iter,
        },
    )
    .at(Stage::Train)?;
    clock.lap(Stage::Train);

    let region = disturbance_region(&mvee.yhat, &ctx.split.calibration, theta).at(Stage::Calibrate)?;
    clock.lap(Stage::Calibrate);

    log::info!("searching {} multiplier pairs", grid.len());
    let syn = synthesize_invariant_region(&p.system, &p.constraints, &region.y, &grid).at(Stage::Synthesize)?;
    clock.lap(Stage::Synthesize);

    let report = verify_invariance(
        &p.system,
        &syn.gain,
        &syn.phi,
        &region.y,
        cfg.verify_samples,
        cfg.verify_tol,
        Some((syn.lambda0, syn.lambda1)),
    )
    .at(Stage::Verify)?;
    if !report.passed {
        log::warn!(
            "invariance certificate failed: sampled max {:.9}, block margin {:.3e}",
            report.sampled_max,
            report.bmi_margin
        );
    }
    let phi_dominates = p
        .constraints
        .state_sets()
        .iter()
        .all(|s| min_eigenvalue_sym_part(&(&syn.phi - s.shape())) > 0.0);
    let admissibility = input_admissibility(&syn.gain, &syn.phi, p.constraints.input_set().shape()).at(Stage::Verify)?;
    clock.lap(Stage::Verify);

    let horizon = HorizonTag {
        first: 1,
        last: p.system.horizon(),
    };
    let error_region = PredictionRegion::ellipsoid(
        Ellipsoid::centered(syn.phi.clone()).at(Stage::Tighten)?,
        1.0 - theta,
        horizon,
    )
    .at(Stage::Tighten)?;
    let input_ball = match cfg.input_rule {
        InputRule::CalibratedBall => Some(
            calibrate_regions(&p.system, &syn.gain, &ctx.split.calibration, theta, config.score_norm)
                .at(Stage::Calibrate)?
                .input,
        ),
        InputRule::GainImage => None,
    };
    let input = match &input_ball {
        Some(ball) => InputShrink::Region(ball),
        None => InputShrink::GainImage(&syn.gain),
    };
    let run = finish_feedback_run(config, &ctx, &mut clock, &syn.gain, &error_region, input)?;

    let feasible_points = syn
        .statuses
        .iter()
        .filter(|s| matches!(s.outcome, GridOutcome::Feasible { .. }))
        .count();
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        method: Method::Indirect,
        data: ctx.data.clone(),
        seeds: ctx.seeds,
        theta,
        gain: Some(rows_of(&syn.gain)),
        error_region: Some(RegionRecord::from_region(&error_region)),
        input_region: input_ball.as_ref().map(RegionRecord::from_region),
        tightening: Some(run.tightening),
        objective: run.objective,
        v_star: vec_rows(&run.v_star),
        validation: run.validation,
        direct: None,
        indirect: Some(IndirectRecord {
            yhat: rows_of(&mvee.yhat),
            mvee_iterations: mvee.iterations,
            c_w: region.c_w,
            y: rows_of(&region.y),
            phi: rows_of(&syn.phi),
            phi_hat: rows_of(&syn.phi_hat),
            psi: rows_of(&syn.psi),
            lambda0: syn.lambda0,
            lambda1: syn.lambda1,
            trace: syn.trace,
            grid_points: syn.statuses.len(),
            feasible_grid_points: feasible_points,
            invariance: InvarianceRecord {
                passed: report.passed,
                sampled_max: report.sampled_max,
                bmi_margin: report.bmi_margin,
                lambda0: report.lambda0,
                lambda1: report.lambda1,
                samples: report.samples,
                tol: cfg.verify_tol,
            },
            phi_dominates_state_sets: phi_dominates,
            input_admissibility: admissibility,
            input_rule: cfg.input_rule,
        }),
        baseline: None,
    };
    Ok(RunOutput {
        manifest,
        timing: clock.finish(),
        nominal_csv: run.nominal_csv,
        samples_csv: run.samples_csv,
        regions_csv: run.regions_csv,
    })
}

/// Scenario program over the first `scenarios` dataset sequences.
pub fn run_baseline(
    config: &RunConfig,
    dataset: &DisturbanceDataset,
    origin: &DataOrigin,
    scenarios: usize,
) -> CliResult<RunOutput> {
    let mut clock = Clock::new();
    let ctx = prepare(config, dataset, origin)?;
    let p = &ctx.problem;
    if scenarios == 0 || scenarios > ctx.dataset.len() {
        return Err(CliError::Config(format!(
            "scenario count {scenarios} must be between 1 and the dataset size {}",
            ctx.dataset.len()
        )));
    }
    let used = &ctx.dataset.sequences()[..scenarios];
    clock.lap(Stage::Split);

    let program = build_scenario_program(&p.system, &p.constraints, &p.cost, &p.x0, used).at(Stage::Solve)?;
    let solution = solve_scenario_program(&program).at(Stage::Solve)?;
    clock.lap(Stage::Solve);

    let v = &config.validation;
    let validation = monte_carlo_validate(
        &p.system,
        &solution.policy,
        &p.x0,
        &p.constraints,
        ctx.sampler.as_ref(),
        v.n_trials,
        v.seed,
        None,
    )
    .at(Stage::Validate)?;
    let samples: Vec<Trajectory> = (0..v.sample_trajectories.min(v.n_trials) as u64)
        .map(|trial| {
            let w = ctx.sampler.sample_sequence(&mut stream_rng(v.seed, trial), p.system.horizon());
            let (states, inputs) = solution.policy.simulate(&p.system, &p.x0, &w);
            Trajectory { states, inputs }
        })
        .collect();
    let zero = vec![DVector::zeros(p.system.state_dim()); p.system.horizon()];
    let (nominal_states, _) = solution.policy.simulate(&p.system, &p.x0, &zero);
    clock.lap(Stage::Validate);

    let theta = p.constraints.theta();
    let decisions = program.decision_count();
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        method: Method::Baseline,
        data: ctx.data.clone(),
        seeds: ctx.seeds,
        theta,
        gain: None,
        error_region: None,
        input_region: None,
        tightening: None,
        objective: solution.objective,
        v_star: vec_rows(&solution.policy.v),
        validation,
        direct: None,
        indirect: None,
        baseline: Some(BaselineRecord {
            scenarios,
            scenario_indices: IndexRange {
                first: 0,
                last: scenarios - 1,
            },
            decision_count: decisions,
            variable_count: program.variable_count(),
            worst_level: solution.worst_level,
            scenarios_satisfied: solution.worst_level.max(0.0).sqrt() <= 1.0 + cpcontrol::relaxed::FEASIBILITY_TOL,
            lags: solution.policy.lags.iter().map(rows_of).collect(),
            note: scenario_requirement_note(theta, config.baseline.beta, decisions, scenarios),
        }),
    };
    Ok(RunOutput {
        manifest,
        timing: clock.finish(),
        nominal_csv: nominal_csv(&nominal_states, &solution.policy.v)?,
        samples_csv: samples_csv(&samples)?,
        regions_csv: regions_csv(&region_outlines(&p.constraints, None, None)?)?,
    })
}
