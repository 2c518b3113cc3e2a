//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line and then
//! asserts it. Run with `--nocapture` to see the lines.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cpcontrol::conformal::{HorizonTag, PredictionRegion, ScoreNorm};
use cpcontrol::indirect::{input_admissibility, verify_invariance};
use cpcontrol::linalg::{spd_inverse, sym_sqrt};
use cpcontrol::mvee::{centered_mvee, MveeOptions};
use cpcontrol::relaxed::{solve_relaxed_ocp, tighten, InputShrink, SolveStatus, TightenedConstraints};
use cpcontrol::rng::stream_rng;
use cpcontrol::validation::{coverage_experiment, ScoreDistribution};
use cpcontrol::{ConstraintSpec, CostSpec, Ellipsoid, LinearSystem};
use cpcontrol_cli::config::{matrix, RunConfig};
use cpcontrol_cli::manifest::{Manifest, RegionRecord, MANIFEST_FILE};
use cpcontrol_cli::pipeline::{load_dataset, run_baseline, run_direct, run_indirect};
use cpcontrol_cli::report::build_report;
use nalgebra::{DMatrix, DVector};
use rand::RngExt;

fn verdict(id: &str, name: &str, pass: bool, detail: &str) {
    println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{id} {name} failed: {detail}");
}

fn v2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![a, b])
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

fn relative_error(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

#[test]
fn c1_conformal_coverage() {
    let (k, theta, repeats) = (99, 0.1, 100_000);
    let low = 1.0 - theta - 0.005;
    let high = 1.0 - theta + 1.0 / (k as f64 + 1.0) + 0.005;
    let laws = [
        ("uniform", ScoreDistribution::Uniform { low: 0.0, high: 1.0 }),
        ("exponential", ScoreDistribution::Exponential { rate: 1.0 }),
        ("lognormal", ScoreDistribution::LogNormal { mu: 0.0, sigma: 1.0 }),
    ];
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, law)) in laws.iter().enumerate() {
        let report = coverage_experiment(|rng| law.sample(rng), k, theta, repeats, 500 + i as u64).unwrap();
        pass &= (low..=high).contains(&report.mean);
        parts.push(format!("{name} {:.4}", report.mean));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    verdict(
        "C1",
        "conformal coverage",
        pass,
        &format!("{} in [{low:.4}, {high:.4}], {secs:.1} s (< 30 s)", parts.join(", ")),
    );
}

#[test]
fn c2_direct_pipeline() {
    let config = RunConfig::benchmark();
    let start = Instant::now();
    let (dataset, origin) = load_dataset(&config, None).unwrap();
    let out = run_direct(&config, &dataset, &origin).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m = &out.manifest;
    let radius = |r: &Option<RegionRecord>| match r {
        Some(RegionRecord::Ball { radius, .. }) => *radius,
        _ => f64::NAN,
    };
    let (c_e, c_ke) = (radius(&m.error_region), radius(&m.input_region));
    let tightening = m.tightening.as_ref().is_some_and(|t| t.feasible);
    let (state, input) = (m.validation.state.rate, m.validation.input.rate);
    let (err_e, err_ke) = (relative_error(c_e, 0.5785), relative_error(c_ke, 0.1271));
    let pass = c_e.is_finite()
        && c_ke.is_finite()
        && tightening
        && !m.v_star.is_empty()
        && m.validation.n_trials == 10_000
        && state >= 0.95
        && input >= 0.95
        && err_e <= 0.10
        && err_ke <= 0.10
        && secs < 600.0;
    verdict(
        "C2",
        "direct pipeline",
        pass,
        &format!(
            "C_e {c_e:.4} ({:+.1}% vs 0.5785), C_Ke {c_ke:.4} ({:+.1}% vs 0.1271), tolerance 10%; \
             tightening feasible {tightening}, OCP optimal {}; state {state:.4}, input {input:.4} over {} trials (>= 0.95); {secs:.1} s (< 600 s)",
            100.0 * (c_e / 0.5785 - 1.0),
            100.0 * (c_ke / 0.1271 - 1.0),
            !m.v_star.is_empty(),
            m.validation.n_trials,
        ),
    );
}

fn reference_system() -> LinearSystem {
    LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
        100,
    )
    .unwrap()
}

#[test]
fn c3_indirect_pipeline() {
    let config = RunConfig::benchmark();
    let problem = config.problem().unwrap();
    let start = Instant::now();
    let (dataset, origin) = load_dataset(&config, None).unwrap();
    let out = run_indirect(&config, &dataset, &origin).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m = &out.manifest;
    let ind = m.indirect.as_ref().expect("indirect record");
    let gain = matrix(m.gain.as_ref().expect("gain"), "gain").unwrap();
    let phi = matrix(&ind.phi, "phi").unwrap();
    let y = matrix(&ind.y, "y").unwrap();

    let recheck = verify_invariance(&problem.system, &gain, &phi, &y, 720, 1e-6, None).unwrap();
    let phi_margin = problem
        .constraints
        .state_sets()
        .iter()
        .map(|s| min_eigenvalue(&(&phi - s.shape())))
        .fold(f64::INFINITY, f64::min);
    let admissibility = input_admissibility(&gain, &phi, problem.constraints.input_set().shape()).unwrap();
    let (state, input) = (m.validation.state.rate, m.validation.input.rate);

    let fixture_y = DMatrix::from_row_slice(2, 2, &[12.6733, -1.0720, -1.0720, 114.7949]);
    let fixture_phi = DMatrix::from_row_slice(2, 2, &[3.4644, 3.8069, 3.8069, 5.6494]);
    let fixture_k = DMatrix::from_row_slice(1, 2, &[-1.4140, -2.3412]);
    let fixture = verify_invariance(&reference_system(), &fixture_k, &fixture_phi, &fixture_y, 720, 1e-6, None).unwrap();

    let pass = ind.invariance.passed
        && recheck.passed
        && phi_margin > 0.0
        && admissibility < 1.0
        && m.validation.n_trials == 10_000
        && state >= 0.99
        && input >= 0.99
        && fixture.passed
        && secs < 300.0;
    verdict(
        "C3",
        "indirect pipeline",
        pass,
        &format!(
            "invariance {} (re-check {}, sampled max {:.6}, S-procedure margin {:.2e}, tol 1e-6); \
             min eig(Phi - P) {phi_margin:.4}; admissibility {admissibility:.6} (< 1); state {state:.4}, input {input:.4} (>= 0.99); \
             reference fixture {} (sampled max {:.6}, margin {:.2e}); {secs:.1} s (< 300 s)",
            ind.invariance.passed,
            recheck.passed,
            recheck.sampled_max,
            recheck.bmi_margin,
            fixture.passed,
            fixture.sampled_max,
            fixture.bmi_margin,
        ),
    );
}

/// `max log det M s.t. pᵀMp ≤ 1` over symmetric 2×2 `M = [[a, b], [b, c]]`
/// by a log-barrier method with damped Newton steps.
fn barrier_log_det(points: &[DVector<f64>]) -> f64 {
    let rows: Vec<[f64; 3]> = points.iter().map(|p| [p[0] * p[0], 2.0 * p[0] * p[1], p[1] * p[1]]).collect();
    let r2 = points.iter().map(|p| p.norm_squared()).fold(0.0, f64::max);
    let mut x = nalgebra::Vector3::new(0.5 / r2, 0.0, 0.5 / r2);
    let feasible = |x: &nalgebra::Vector3<f64>| {
        x[0] > 0.0 && x[0] * x[2] - x[1] * x[1] > 0.0 && rows.iter().all(|g| g[0] * x[0] + g[1] * x[1] + g[2] * x[2] < 1.0)
    };
    let objective = |x: &nalgebra::Vector3<f64>, t: f64| {
        let d = x[0] * x[2] - x[1] * x[1];
        -t * d.ln() - rows.iter().map(|g| (1.0 - g[0] * x[0] - g[1] * x[1] - g[2] * x[2]).ln()).sum::<f64>()
    };
    let mut t = 1.0;
    while (rows.len() as f64) / t > 1e-11 {
        for _ in 0..200 {
            let d = x[0] * x[2] - x[1] * x[1];
            let dd = nalgebra::Vector3::new(x[2], -2.0 * x[1], x[0]);
            let hd = nalgebra::Matrix3::new(0.0, 0.0, 1.0, 0.0, -2.0, 0.0, 1.0, 0.0, 0.0);
            let mut grad = -t * dd / d;
            let mut hess = t * (dd * dd.transpose() / (d * d) - hd / d);
            for g in &rows {
                let g = nalgebra::Vector3::new(g[0], g[1], g[2]);
                let s = 1.0 - g.dot(&x);
                grad += g / s;
                hess += g * g.transpose() / (s * s);
            }
            let step = hess.lu().solve(&(-grad)).expect("nonsingular barrier Hessian");
            let decrement = -grad.dot(&step);
            if decrement < 1e-14 {
                break;
            }
            let f0 = objective(&x, t);
            let mut alpha = 1.0;
            while !feasible(&(x + alpha * step)) || objective(&(x + alpha * step), t) > f0 - 0.25 * alpha * decrement {
                alpha *= 0.5;
                if alpha < 1e-16 {
                    break;
                }
            }
            x += alpha * step;
        }
        t *= 10.0;
    }
    (x[0] * x[2] - x[1] * x[1]).ln()
}

#[test]
fn c4_mvee_matches_oracle() {
    let opts = MveeOptions { tol: 1e-9, max_iter: 1_000_000 };
    let mut worst_gap: f64 = 0.0;
    for set in 0..20u64 {
        let mut rng = stream_rng(4_000, set);
        let count = 3 + (set as usize % 4);
        let points: Vec<_> = (0..count)
            .map(|_| v2(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5)))
            .collect();
        let sol = centered_mvee(&points, &opts).unwrap();
        worst_gap = worst_gap.max((sol.log_det() - barrier_log_det(&points)).abs());
    }

    let mut rng = stream_rng(4_001, 0);
    let rotation = |angle: f64, p: DVector<f64>| {
        let (s, c) = angle.sin_cos();
        v2(c * p[0] - s * p[1], s * p[0] + c * p[1])
    };
    let stress: Vec<Vec<DVector<f64>>> = vec![
        (0..1000).map(|_| v2(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
        (0..1000)
            .map(|_| rotation(0.7, v2(rng.random_range(-50.0..50.0), rng.random_range(-0.1..0.1))))
            .collect(),
        (0..1000)
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                v2(3.0 * a.cos(), 0.2 * a.sin())
            })
            .collect(),
        (0..1000)
            .map(|_| {
                let law = ScoreDistribution::LogNormal { mu: 0.0, sigma: 1.0 };
                let a = rng.random_range(0.0..2.0 * PI);
                let r = law.sample(&mut rng);
                v2(r * a.cos() + 0.5, r * a.sin() - 0.2)
            })
            .collect(),
    ];
    let mut outside = 0;
    let mut worst_level: f64 = 0.0;
    for points in &stress {
        let sol = centered_mvee(points, &MveeOptions::default()).unwrap();
        for p in points {
            let level = (p.transpose() * &sol.shape * p)[0];
            worst_level = worst_level.max(level);
            if level > 1.0 + 1e-9 {
                outside += 1;
            }
        }
    }
    let pass = worst_gap <= 1e-4 && outside == 0;
    verdict(
        "C4",
        "MVEE oracle equivalence",
        pass,
        &format!(
            "max |log det - oracle| {worst_gap:.2e} over 20 sets (<= 1e-4); {outside} points outside on {} stress sets of 1000 (max level {worst_level:.12})",
            stress.len()
        ),
    );
}

fn boundary_point(region: &PredictionRegion, angle: f64) -> DVector<f64> {
    let dir = v2(angle.cos(), angle.sin());
    match &region.kind {
        cpcontrol::conformal::RegionKind::Ball { radius, norm, .. } => match norm {
            ScoreNorm::Euclidean => dir * *radius,
            ScoreNorm::Infinity => &dir / dir.amax() * *radius,
        },
        cpcontrol::conformal::RegionKind::Ellipsoid(e) => {
            sym_sqrt(&spd_inverse(e.shape(), "region").unwrap()).unwrap() * dir
        }
    }
}

fn soundness_violations(cons: &ConstraintSpec, region: &PredictionRegion, input: &PredictionRegion, seed: u64) -> (usize, f64) {
    let t: TightenedConstraints = tighten(cons, region, InputShrink::Region(input)).unwrap();
    let mut rng = stream_rng(seed, 0);
    let (mut bad, mut worst) = (0, 0.0_f64);
    for (time, rule) in t.state_rules.iter().enumerate() {
        let set = cons.state_set(time + 1);
        let inv_sqrt = spd_inverse(&rule.shape_sqrt, "rule").unwrap();
        for _ in 0..1000 {
            let a = rng.random_range(0.0..2.0 * PI);
            let z = set.center() + &inv_sqrt * v2(a.cos(), a.sin()) * rule.rho;
            let e = boundary_point(region, rng.random_range(0.0..2.0 * PI));
            let level = set.level(&(z + e));
            worst = worst.max(level);
            if level > 1.0 + 1e-9 {
                bad += 1;
            }
        }
    }
    let q = cons.input_set();
    let v_edge = t.input_rule.rho / t.input_rule.shape_sqrt[(0, 0)];
    let radius = input.radius().unwrap();
    for (sv, se) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let level = q.level(&DVector::from_element(1, sv * v_edge + se * radius));
        worst = worst.max(level);
        if level > 1.0 + 1e-9 {
            bad += 1;
        }
    }
    (bad, worst)
}

#[test]
fn c5_tightening_soundness() {
    let tag = HorizonTag { first: 1, last: 3 };
    let cons = ConstraintSpec::new(
        vec![
            Ellipsoid::centered(DMatrix::identity(2, 2) * 0.1).unwrap(),
            Ellipsoid::new(v2(0.5, -1.0), DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2])).unwrap(),
            Ellipsoid::new(v2(-2.0, 0.3), DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 0.5])).unwrap(),
        ],
        Ellipsoid::centered(DMatrix::identity(1, 1)).unwrap(),
        0.05,
    )
    .unwrap();
    let input = PredictionRegion::ball(0.1271, 1, ScoreNorm::Euclidean, 0.95, HorizonTag { first: 0, last: 2 }).unwrap();
    let regions = [
        ("euclidean ball", PredictionRegion::ball(0.4, 2, ScoreNorm::Euclidean, 0.95, tag).unwrap()),
        ("infinity ball", PredictionRegion::ball(0.3, 2, ScoreNorm::Infinity, 0.95, tag).unwrap()),
        (
            "ellipsoid",
            PredictionRegion::ellipsoid(
                Ellipsoid::centered(DMatrix::from_row_slice(2, 2, &[30.0, 5.0, 5.0, 12.0])).unwrap(),
                0.95,
                tag,
            )
            .unwrap(),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, region)) in regions.iter().enumerate() {
        let (bad, worst) = soundness_violations(&cons, region, &input, 5_000 + i as u64);
        pass &= bad == 0;
        parts.push(format!("{name}: {bad} violations, max level {worst:.9}"));
    }
    verdict("C5", "tightening soundness", pass, &format!("{} (tol 1e-9)", parts.join("; ")));
}

fn benchmark_problem(horizon: usize) -> (LinearSystem, CostSpec, TightenedConstraints) {
    let mut config = RunConfig::benchmark();
    config.system.horizon = horizon;
    let problem = config.problem().unwrap();
    let tag = HorizonTag { first: 1, last: horizon };
    let error = PredictionRegion::ball(0.5785, 2, ScoreNorm::Euclidean, 0.95, tag).unwrap();
    let input = PredictionRegion::ball(0.1271, 1, ScoreNorm::Euclidean, 0.95, tag).unwrap();
    let t = tighten(&problem.constraints, &error, InputShrink::Region(&input)).unwrap();
    (problem.system, problem.cost, t)
}

#[test]
fn c6_relaxed_ocp_correctness() {
    let sys = LinearSystem::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 1).unwrap();
    let cost = CostSpec::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), DMatrix::zeros(1, 1)).unwrap();
    let cons = ConstraintSpec::uniform(
        1,
        Ellipsoid::centered(DMatrix::identity(1, 1)).unwrap(),
        Ellipsoid::centered(DMatrix::identity(1, 1) * 1e-4).unwrap(),
        0.1,
    )
    .unwrap();
    let tag = HorizonTag { first: 1, last: 1 };
    let error = PredictionRegion::ball(0.2, 1, ScoreNorm::Euclidean, 0.9, tag).unwrap();
    let zero = PredictionRegion::ball(0.0, 1, ScoreNorm::Euclidean, 0.9, tag).unwrap();
    let t = tighten(&cons, &error, InputShrink::Region(&zero)).unwrap();
    let sol = solve_relaxed_ocp(&sys, &cost, &t, &DVector::from_element(1, 2.0)).unwrap();
    let v = sol.v_star[0][0];
    let kkt = sol.status == SolveStatus::Optimal && (v + 1.2).abs() <= 1e-6;

    // Value function convexity along segments of initial states.
    let (sys, cost, t) = benchmark_problem(20);
    let value = |x0: &DVector<f64>| solve_relaxed_ocp(&sys, &cost, &t, x0).unwrap().into_optimal().unwrap().objective_value;
    let mut rng = stream_rng(6_000, 0);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..10 {
        let a = v2(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let b = v2(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let mid = (&a + &b) * 0.5;
        let (fa, fb, fm) = (value(&a), value(&b), value(&mid));
        worst_excess = worst_excess.max((fm - 0.5 * (fa + fb)) / fa.max(fb).max(1.0));
    }

    // Doubling the weights doubles the objective when no rule is active.
    let loose = ConstraintSpec::uniform(
        20,
        Ellipsoid::centered(DMatrix::identity(2, 2) * 1e-4).unwrap(),
        Ellipsoid::centered(DMatrix::identity(1, 1) * 1e-4).unwrap(),
        0.05,
    )
    .unwrap();
    let tag = HorizonTag { first: 1, last: 20 };
    let t_loose = tighten(
        &loose,
        &PredictionRegion::ball(0.1, 2, ScoreNorm::Euclidean, 0.95, tag).unwrap(),
        InputShrink::Region(&PredictionRegion::ball(0.1, 1, ScoreNorm::Euclidean, 0.95, tag).unwrap()),
    )
    .unwrap();
    let x0 = v2(2.0, -1.0);
    let one = solve_relaxed_ocp(&sys, &cost, &t_loose, &x0).unwrap().objective_value;
    let two = solve_relaxed_ocp(&sys, &cost.scaled(2.0), &t_loose, &x0).unwrap().objective_value;
    let doubling = relative_error(two, 2.0 * one);

    let pass = kkt && worst_excess <= 1e-6 && doubling <= 1e-6;
    verdict(
        "C6",
        "relaxed OCP correctness",
        pass,
        &format!(
            "v* {v:.8} (expected -1.2, tol 1e-6); midpoint convexity excess {worst_excess:.2e} (<= 1e-6); doubled-weight objective ratio error {doubling:.2e}"
        ),
    );
}

#[test]
fn c7_scenario_baseline() {
    let config = RunConfig::benchmark();
    let (dataset, origin) = load_dataset(&config, None).unwrap();
    let start = Instant::now();
    let out = run_baseline(&config, &dataset, &origin, 100).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let b = out.manifest.baseline.as_ref().expect("baseline record");
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    let text = build_report(&[dir.path().to_path_buf()]).unwrap().to_text();
    let pass = b.scenarios == 100 && b.scenarios_satisfied && secs <= 300.0 && text.contains("5,739");
    verdict(
        "C7",
        "scenario baseline",
        pass,
        &format!(
            "{} scenarios satisfied {} (worst level {:.9}), objective {:.4}; {secs:.1} s (<= 300 s); report mentions 5,739: {}",
            b.scenarios,
            b.scenarios_satisfied,
            b.worst_level,
            out.manifest.objective,
            text.contains("5,739")
        ),
    );
}

fn manifest_bytes(args: &[&str], out: &Path) -> Vec<u8> {
    let output = Command::new(env!("CARGO_BIN_EXE_cpcontrol"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    assert!(output.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&output.stderr));
    let bytes = std::fs::read(out.join(MANIFEST_FILE)).unwrap();
    Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    bytes
}

#[test]
fn c8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 3] = [
        &["run-direct", "--trials", "2000", "--seed", "11"],
        &["run-indirect", "--trials", "2000", "--seed", "11"],
        &["run-baseline", "--trials", "2000", "--seed", "11", "--scenarios", "30"],
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, args) in commands.iter().enumerate() {
        let first = manifest_bytes(args, &dir.path().join(format!("{i}a")));
        let second = manifest_bytes(args, &dir.path().join(format!("{i}b")));
        pass &= first == second;
        parts.push(format!("{} {}", args[0], if first == second { "identical" } else { "differs" }));
    }
    verdict("C8", "determinism", pass, &format!("{} ({} byte-level comparisons)", parts.join(", "), commands.len()));
}
