//! Indirect method: robust invariant error ellipsoid from a calibrated
//! disturbance ellipsoid.
//!
//! Training disturbances define a centered minimum-volume ellipsoid
//! `{‖Ŷw‖ ≤ 1}`. Calibration rescales it to `W = {wᵀYw ≤ 1}` with
//! `Y = ŶᵀŶ / C_w²`. For fixed S-procedure multipliers `(λ0, λ1)` the search
//! for `E = {eᵀΦe ≤ 1}` and `K` with `(A+BK)E ⊕ W ⊆ E` becomes a semidefinite
//! program in `Φ̂ = Φ⁻¹` and `Ψ = KΦ̂`; a grid over the multipliers picks the
//! smallest-trace solution.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_quantile, min_calibration_size, score_disturbance_sequence, ScoreNorm};
use crate::conic::{Affine, ConicOutcome, ConicProgram, SolveOptions};
use crate::data::CalibrationSet;
use crate::error::{Error, GridOutcome, GridPointStatus, Result};
use crate::linalg::{ensure_positive_definite, min_eigenvalue_sym_part, quad_form, spd_inverse, sym_sqrt, symmetrize};
use crate::system::{check_probability, ConstraintSpec, Ellipsoid, LinearSystem};

/// Strict LMIs are imposed as `⪰ margin·I`.
pub const LMI_MARGIN: f64 = 1e-8;
/// Acceptance threshold on the certificate eigenvalues of a returned solve.
pub const CERTIFICATE_TOL: f64 = 1e-7;

/// Calibrated disturbance ellipsoid `W = {w : wᵀYw ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceRegion {
    pub yhat: DMatrix<f64>,
    pub c_w: f64,
    pub y: DMatrix<f64>,
    pub scores: Vec<f64>,
}

impl DisturbanceRegion {
    pub fn ellipsoid(&self) -> Result<Ellipsoid> {
        Ellipsoid::centered(self.y.clone())
    }
}

pub fn disturbance_region(yhat: &DMatrix<f64>, calibration: &CalibrationSet, theta: f64) -> Result<DisturbanceRegion> {
    check_probability(theta, "theta")?;
    ensure_positive_definite(&symmetrize(yhat), "disturbance ellipsoid matrix")?;
    let scores: Vec<f64> = calibration
        .scoring()
        .par_iter()
        .map(|w| score_disturbance_sequence(yhat, w, ScoreNorm::Euclidean))
        .collect();
    let c_w = conformal_quantile(&scores, theta)?
        .finite()
        .ok_or(Error::InsufficientCalibration {
            needed: min_calibration_size(theta),
            have: scores.len(),
            theta,
        })?;
    if !(c_w > 0.0) {
        return Err(Error::InvalidArgument(
            "disturbance quantile is zero; the calibration disturbances are degenerate".into(),
        ));
    }
    let y = symmetrize(&(yhat.transpose() * yhat / (c_w * c_w)));
    Ok(DisturbanceRegion {
        yhat: yhat.clone(),
        c_w,
        y,
        scores,
    })
}

/// Multiplier pairs `(λ0, λ1)` tried by the synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierGrid {
    pairs: Vec<(f64, f64)>,
}

impl MultiplierGrid {
    /// All `(i·h, j·h)` with `i, j ≥ 1` and `λ0 + λ1 ≤ 1`.
    pub fn triangular(step: f64) -> Result<Self> {
        if !(step > 0.0 && step < 0.5) {
            return Err(Error::InvalidArgument(format!("grid step {step} must lie in (0, 0.5)")));
        }
        let count = (1.0 / step + 1e-9).floor() as usize;
        let mut pairs = Vec::new();
        for j in 1..count {
            for i in 1..count {
                let (l0, l1) = (i as f64 * step, j as f64 * step);
                if l0 + l1 <= 1.0 + 1e-12 {
                    pairs.push((l0, l1));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn from_pairs(pairs: Vec<(f64, f64)>) -> Result<Self> {
        for &(l0, l1) in &pairs {
            check_multipliers(l0, l1)?;
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl Default for MultiplierGrid {
    fn default() -> Self {
        Self::triangular(0.05).expect("valid default step")
    }
}

fn check_multipliers(lambda0: f64, lambda1: f64) -> Result<()> {
    if !(lambda0 >= 0.0 && lambda1 > 0.0 && lambda0 + lambda1 <= 1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "multipliers need λ0 ≥ 0, λ1 > 0, λ0 + λ1 ≤ 1; got ({lambda0}, {lambda1})"
        )));
    }
    Ok(())
}

/// Solution of the trace-minimization program at one multiplier pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpPoint {
    pub phi_hat: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub trace: f64,
    /// Smallest eigenvalue over the invariance, input and state LMIs.
    pub certificate_margin: f64,
}

/// The three LMI matrices, without the strictness margin.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlocks {
    pub invariance: DMatrix<f64>,
    pub input: DMatrix<f64>,
    /// `P_t⁻¹ − Φ̂` for each distinct state shape.
    pub state: Vec<DMatrix<f64>>,
}

impl LmiBlocks {
    pub fn min_eigenvalue(&self) -> f64 {
        self.state
            .iter()
            .map(min_eigenvalue_sym_part)
            .chain([min_eigenvalue_sym_part(&self.invariance), min_eigenvalue_sym_part(&self.input)])
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn lmi_blocks(
    sys: &LinearSystem,
    constraints: &ConstraintSpec,
    y: &DMatrix<f64>,
    lambda0: f64,
    lambda1: f64,
    phi_hat: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> Result<LmiBlocks> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let y_inv = spd_inverse(y, "disturbance shape")?;
    let coupling = sys.a() * phi_hat + sys.b() * psi;
    let mut inv = DMatrix::zeros(2 * n, 2 * n);
    inv.view_mut((0, 0), (n, n)).copy_from(&(phi_hat - y_inv / lambda1));
    inv.view_mut((0, n), (n, n)).copy_from(&coupling);
    inv.view_mut((n, 0), (n, n)).copy_from(&coupling.transpose());
    inv.view_mut((n, n), (n, n)).copy_from(&(phi_hat * lambda0));

    let q_half = sym_sqrt(constraints.input_set().shape())?;
    let off = psi.transpose() * &q_half;
    let mut input = DMatrix::identity(n + m, n + m);
    input.view_mut((0, 0), (n, n)).copy_from(phi_hat);
    input.view_mut((0, n), (n, m)).copy_from(&off);
    input.view_mut((n, 0), (m, n)).copy_from(&off.transpose());

    let states = distinct_state_shapes(constraints)
        .into_iter()
        .map(|p| Ok(spd_inverse(&p, "state constraint shape")? - phi_hat))
        .collect::<Result<_>>()?;
    Ok(LmiBlocks {
        invariance: inv,
        input,
        state: states,
    })
}

fn distinct_state_shapes(constraints: &ConstraintSpec) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    for s in constraints.state_sets() {
        if !out.iter().any(|p| p == s.shape()) {
            out.push(s.shape().clone());
        }
    }
    out
}

/// Minimize `trace Φ̂` subject to the invariance, input and state LMIs at
/// fixed multipliers. `Ok(None)` means the program is infeasible.
pub fn sdp_feasible_point(
    sys: &LinearSystem,
    constraints: &ConstraintSpec,
    y: &DMatrix<f64>,
    lambda0: f64,
    lambda1: f64,
) -> Result<Option<SdpPoint>> {
    check_multipliers(lambda0, lambda1)?;
    constraints.check_against(sys)?;
    let n = sys.state_dim();
    let m = sys.input_dim();
    if y.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "disturbance shape",
            expected: n,
            found: y.nrows(),
        });
    }
    let y_inv = spd_inverse(y, "disturbance shape")?;
    let q_half = sym_sqrt(constraints.input_set().shape())?;
    let (a, b) = (sys.a(), sys.b());

    // Φ̂ upper triangle first, then Ψ row-major.
    let mut sym_index = BTreeMap::new();
    for j in 0..n {
        for i in 0..=j {
            let next = sym_index.len();
            sym_index.insert((i, j), next);
        }
    }
    let nsym = sym_index.len();
    let phi = |i: usize, j: usize| sym_index[&(i.min(j), i.max(j))];
    let psi = |r: usize, c: usize| nsym + r * n + c;
    let mut prog = ConicProgram::new(nsym + m * n);
    for i in 0..n {
        prog.add_linear(phi(i, i), 1.0);
    }
    let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };

    prog.add_psd(2 * n, |i, j| {
        let mut e = Affine::default();
        match (i < n, j < n) {
            (true, true) => {
                e.constant = -y_inv[(i, j)] / lambda1 - LMI_MARGIN * delta(i, j);
                e.add_term(phi(i, j), 1.0);
            }
            (true, false) => {
                let c = j - n;
                for k in 0..n {
                    e.add_term(phi(k, c), a[(i, k)]);
                }
                for l in 0..m {
                    e.add_term(psi(l, c), b[(i, l)]);
                }
            }
            _ => {
                e.constant = -LMI_MARGIN * delta(i, j);
                e.add_term(phi(i - n, j - n), lambda0);
            }
        }
        e
    });

    prog.add_psd(n + m, |i, j| {
        let mut e = Affine::constant(-LMI_MARGIN * delta(i, j));
        match (i < n, j < n) {
            (true, true) => {
                e.add_term(phi(i, j), 1.0);
            }
            (true, false) => {
                for l in 0..m {
                    e.add_term(psi(l, i), q_half[(l, j - n)]);
                }
            }
            _ => e.constant += delta(i, j),
        }
        e
    });

    for p in distinct_state_shapes(constraints) {
        let p_inv = spd_inverse(&p, "state constraint shape")?;
        prog.add_psd(n, |i, j| {
            let mut e = Affine::constant(p_inv[(i, j)] - LMI_MARGIN * delta(i, j));
            e.add_term(phi(i, j), -1.0);
            e
        });
    }

    let x = match prog.solve(&SolveOptions::default())? {
        ConicOutcome::Infeasible => return Ok(None),
        ConicOutcome::Solved { x, .. } => x,
    };
    let phi_hat = DMatrix::from_fn(n, n, |i, j| x[phi(i, j)]);
    let psi_m = DMatrix::from_fn(m, n, |r, c| x[psi(r, c)]);
    let margin = lmi_blocks(sys, constraints, y, lambda0, lambda1, &phi_hat, &psi_m)?.min_eigenvalue();
    if margin < -CERTIFICATE_TOL {
        return Err(Error::Solver(format!(
            "returned point violates the LMIs by {:.3e}",
            -margin
        )));
    }
    if min_eigenvalue_sym_part(&phi_hat) <= 0.0 {
        return Err(Error::Solver("returned Φ̂ is not positive definite".into()));
    }
    Ok(Some(SdpPoint {
        trace: phi_hat.trace(),
        phi_hat,
        psi: psi_m,
        certificate_margin: margin,
    }))
}

/// Invariant error ellipsoid `{eᵀΦe ≤ 1}` with its gain and multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSynthesis {
    pub phi: DMatrix<f64>,
    pub phi_hat: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub lambda0: f64,
    pub lambda1: f64,
    pub trace: f64,
    pub statuses: Vec<GridPointStatus>,
}

pub fn synthesize_invariant_region(
    sys: &LinearSystem,
    constraints: &ConstraintSpec,
    y: &DMatrix<f64>,
    grid: &MultiplierGrid,
) -> Result<InvariantSynthesis> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("multiplier grid is empty".into()));
    }
    let solved: Vec<(GridPointStatus, Option<SdpPoint>)> = grid
        .pairs()
        .par_iter()
        .map(|&(lambda0, lambda1)| {
            let (outcome, point) = match sdp_feasible_point(sys, constraints, y, lambda0, lambda1) {
                Ok(Some(p)) => (GridOutcome::Feasible { trace: p.trace }, Some(p)),
                Ok(None) => (GridOutcome::Infeasible, None),
                Err(e @ (Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. })) => {
                    return Err(e)
                }
                Err(e) => (GridOutcome::SolverFailure { message: e.to_string() }, None),
            };
            Ok((GridPointStatus { lambda0, lambda1, outcome }, point))
        })
        .collect::<Result<_>>()?;

    let best = solved
        .iter()
        .filter_map(|(s, p)| p.as_ref().map(|p| (s, p)))
        .min_by(|(sa, pa), (sb, pb)| {
            pa.trace
                .total_cmp(&pb.trace)
                .then(sa.lambda0.total_cmp(&sb.lambda0))
                .then(sa.lambda1.total_cmp(&sb.lambda1))
        });
    let statuses: Vec<GridPointStatus> = solved.iter().map(|(s, _)| s.clone()).collect();
    let Some((status, point)) = best else {
        return Err(Error::SynthesisInfeasible { statuses });
    };
    let phi = spd_inverse(&symmetrize(&point.phi_hat), "error ellipsoid")?;
    Ok(InvariantSynthesis {
        gain: &point.psi * &phi,
        phi,
        phi_hat: point.phi_hat.clone(),
        psi: point.psi.clone(),
        lambda0: status.lambda0,
        lambda1: status.lambda1,
        trace: point.trace,
        statuses,
    })
}

/// Outcome of checking `(A+BK)E ⊕ W ⊆ E`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceReport {
    pub passed: bool,
    /// Largest `(Āe+w)ᵀΦ(Āe+w)` over the boundary samples.
    pub sampled_max: f64,
    pub sampled_pass: bool,
    /// Maximizing sample pair `(e, w)`.
    pub witness: (DVector<f64>, DVector<f64>),
    /// Smallest eigenvalue of the S-procedure block at the multipliers below.
    pub bmi_margin: f64,
    pub bmi_pass: bool,
    pub lambda0: f64,
    pub lambda1: f64,
    pub samples: usize,
}

/// Unit directions: an even angle grid in the plane, a Halton sequence pushed
/// through Box–Muller otherwise.
pub fn sphere_directions(dim: usize, count: usize) -> Vec<DVector<f64>> {
    if dim == 1 {
        return vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)];
    }
    if dim == 2 {
        return (0..count)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / count as f64;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect();
    }
    const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    let pairs = dim.div_ceil(2);
    assert!(2 * pairs <= PRIMES.len(), "dimension too large for the Halton table");
    (1..=count as u64)
        .map(|i| {
            let mut v = Vec::with_capacity(2 * pairs);
            for p in 0..pairs {
                let u1 = halton(i, PRIMES[2 * p]).max(1e-12);
                let u2 = halton(i, PRIMES[2 * p + 1]);
                let r = (-2.0 * u1.ln()).sqrt();
                let a = std::f64::consts::TAU * u2;
                v.push(r * a.cos());
                v.push(r * a.sin());
            }
            v.truncate(dim);
            let d = DVector::from_vec(v);
            let norm = d.norm();
            d / norm
        })
        .collect()
}

fn halton(mut index: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// S-procedure block `[[λ0Φ − ĀᵀΦĀ, −ĀᵀΦ], [−ΦĀ, λ1Y − Φ]]`.
pub fn bmi_block(closed_loop: &DMatrix<f64>, phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda0: f64, lambda1: f64) -> DMatrix<f64> {
    let n = phi.nrows();
    let at_phi = closed_loop.transpose() * phi;
    let mut blk = DMatrix::zeros(2 * n, 2 * n);
    blk.view_mut((0, 0), (n, n)).copy_from(&(phi * lambda0 - &at_phi * closed_loop));
    blk.view_mut((0, n), (n, n)).copy_from(&(-&at_phi));
    blk.view_mut((n, 0), (n, n)).copy_from(&(-at_phi.transpose()));
    blk.view_mut((n, n), (n, n)).copy_from(&(y * lambda1 - phi));
    blk
}

/// Best S-procedure margin over `λ0, λ1 ≥ 0`, `λ0 + λ1 ≤ 1`: a coarse
/// triangular scan followed by a local refinement.
pub fn best_multipliers(closed_loop: &DMatrix<f64>, phi: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, f64, f64) {
    let margin = |l0: f64, l1: f64| min_eigenvalue_sym_part(&bmi_block(closed_loop, phi, y, l0, l1));
    let scan = |l0_range: (f64, f64), l1_range: (f64, f64), steps: usize| {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            for j in 0..=steps {
                let l0 = l0_range.0 + (l0_range.1 - l0_range.0) * i as f64 / steps as f64;
                let l1 = l1_range.0 + (l1_range.1 - l1_range.0) * j as f64 / steps as f64;
                if l0 < 0.0 || l1 < 0.0 || l0 + l1 > 1.0 {
                    continue;
                }
                let mg = margin(l0, l1);
                if mg > best.0 {
                    best = (mg, l0, l1);
                }
            }
        }
        best
    };
    let (mut mg, mut l0, mut l1) = scan((0.0, 1.0), (0.0, 1.0), 200);
    let mut half = 0.005;
    for _ in 0..4 {
        let r = scan((l0 - half, l0 + half), (l1 - half, l1 + half), 20);
        if r.0 > mg {
            (mg, l0, l1) = r;
        }
        half /= 10.0;
    }
    (mg, l0, l1)
}

/// Sampled and S-procedure certificates for `(A+BK)E ⊕ W ⊆ E`. Without
/// explicit multipliers the best pair is searched.
pub fn verify_invariance(
    sys: &LinearSystem,
    gain: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n_samples: usize,
    tol: f64,
    multipliers: Option<(f64, f64)>,
) -> Result<InvarianceReport> {
    let closed_loop = sys.closed_loop(gain)?;
    ensure_positive_definite(phi, "error ellipsoid")?;
    ensure_positive_definite(y, "disturbance shape")?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let n = sys.state_dim();
    let e_map = sym_sqrt(&spd_inverse(phi, "error ellipsoid")?)?;
    let w_map = sym_sqrt(&spd_inverse(y, "disturbance shape")?)?;
    let dirs = sphere_directions(n, n_samples);
    let es: Vec<DVector<f64>> = dirs.iter().map(|d| &closed_loop * (&e_map * d)).collect();
    let ws: Vec<DVector<f64>> = dirs.iter().map(|d| &w_map * d).collect();
    let (sampled_max, ie, iw) = es
        .par_iter()
        .enumerate()
        .map(|(i, ae)| {
            ws.iter()
                .enumerate()
                .map(|(j, w)| (quad_form(phi, &(ae + w)), i, j))
                .fold((f64::NEG_INFINITY, 0, 0), |a, b| if b.0 > a.0 { b } else { a })
        })
        .reduce(
            || (f64::NEG_INFINITY, 0, 0),
            |a, b| if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a },
        );

    let (bmi_margin, lambda0, lambda1) = match multipliers {
        Some((l0, l1)) => {
            check_multipliers(l0, l1)?;
            (min_eigenvalue_sym_part(&bmi_block(&closed_loop, phi, y, l0, l1)), l0, l1)
        }
        None => best_multipliers(&closed_loop, phi, y),
    };
    let sampled_pass = sampled_max <= 1.0 + tol;
    let bmi_pass = bmi_margin >= -tol && lambda0 + lambda1 <= 1.0 + 1e-12;
    Ok(InvarianceReport {
        passed: sampled_pass && bmi_pass,
        sampled_max,
        sampled_pass,
        witness: (&e_map * &dirs[ie], ws[iw].clone()),
        bmi_margin,
        bmi_pass,
        lambda0,
        lambda1,
        samples: dirs.len(),
    })
}

/// `√λmax(Q^½ K Φ⁻¹ Kᵀ Q^½)`: the largest value of `‖Q^½Ke‖` over `E`.
pub fn input_admissibility(gain: &DMatrix<f64>, phi: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let q_half = sym_sqrt(q)?;
    let phi_inv = spd_inverse(phi, "error ellipsoid")?;
    let m = symmetrize(&(&q_half * gain * phi_inv * gain.transpose() * &q_half));
    Ok(crate::linalg::max_eigenvalue_sym_part(&m).max(0.0).sqrt())
}
