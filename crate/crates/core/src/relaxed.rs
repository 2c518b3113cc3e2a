//! Constraint tightening by prediction regions and the deterministic
//! relaxation of the chance-constrained problem.
//!
//! A state set `X_t = {‖P_t^½(x − p_t)‖ ≤ 1}` shrunk by an error region `PR`
//! is inner-approximated by `{‖P_t^½(z − p_t)‖ ≤ ρ_t}` with
//! `ρ_t = 1 − max_{e ∈ PR} ‖P_t^½ e‖`; by the triangle inequality every
//! `z + e` with `e ∈ PR` stays in `X_t`. The nominal problem is then a
//! second-order cone program.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionRegion, RegionKind, ScoreNorm};
use crate::conic::{Affine, ConicOutcome, ConicProgram, SolveOptions};
use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue_sym_part, spd_inverse, sym_sqrt, symmetrize};
use crate::system::{check_vectors, ConstraintSpec, CostSpec, Ellipsoid, LinearSystem, Sequence};

/// Feasibility tolerance for re-simulated solutions.
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// `max_{e ∈ region} ‖S^½ e‖` for a constraint ellipsoid with shape `S`.
fn region_usage(shape: &DMatrix<f64>, region: &PredictionRegion) -> Result<f64> {
    if region.dim() != shape.nrows() {
        return Err(Error::DimensionMismatch {
            context: "prediction region",
            expected: shape.nrows(),
            found: region.dim(),
        });
    }
    match &region.kind {
        RegionKind::Ball { radius, norm, dim } => {
            // Written as C / bound so a radius equal to the bound gives exactly one.
            let bound = 1.0 / max_eigenvalue_sym_part(shape).sqrt();
            let scale = match norm {
                ScoreNorm::Euclidean => 1.0,
                // The box of half-width C sits inside the ball of radius C√d.
                ScoreNorm::Infinity => (*dim as f64).sqrt(),
            };
            Ok(radius * scale / bound)
        }
        RegionKind::Ellipsoid(e) => ellipsoid_usage(shape, e.shape()),
    }
}

/// `√λmax(S^½ Φ⁻¹ S^½)`: how far `{eᵀΦe ≤ 1}` reaches in the `S` metric.
fn ellipsoid_usage(shape: &DMatrix<f64>, region_shape: &DMatrix<f64>) -> Result<f64> {
    let s_half = sym_sqrt(shape)?;
    let inv = spd_inverse(region_shape, "prediction region shape")?;
    Ok(max_eigenvalue_sym_part(&symmetrize(&(&s_half * inv * &s_half))).max(0.0).sqrt())
}

/// How the input set is shrunk.
#[derive(Debug, Clone, Copy)]
pub enum InputShrink<'a> {
    /// A calibrated input-space region, e.g. the ball `B(C_Ke)`.
    Region(&'a PredictionRegion),
    /// The image `K·E` of an ellipsoidal error region under the gain.
    GainImage(&'a DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighteningVerdict {
    pub feasible: bool,
    /// `ρ_t` for `t = 1..N`.
    pub state_margins: Vec<f64>,
    pub input_margin: f64,
}

fn input_usage(constraints: &ConstraintSpec, error: &PredictionRegion, input: InputShrink<'_>) -> Result<f64> {
    let q = constraints.input_set().shape();
    match input {
        InputShrink::Region(r) => region_usage(q, r),
        InputShrink::GainImage(gain) => {
            let RegionKind::Ellipsoid(e) = &error.kind else {
                return Err(Error::InvalidArgument(
                    "the gain-image input rule needs an ellipsoidal error region".into(),
                ));
            };
            if gain.shape() != (q.nrows(), e.dim()) {
                return Err(Error::DimensionMismatch {
                    context: "gain for input tightening",
                    expected: q.nrows(),
                    found: gain.nrows(),
                });
            }
            let q_half = sym_sqrt(q)?;
            let inv = spd_inverse(e.shape(), "prediction region shape")?;
            let m = symmetrize(&(&q_half * gain * inv * gain.transpose() * &q_half));
            Ok(max_eigenvalue_sym_part(&m).max(0.0).sqrt())
        }
    }
}

/// Margins `ρ_t`, `ρ_u`; feasible iff all are strictly positive.
pub fn check_tightening_feasible(
    constraints: &ConstraintSpec,
    error: &PredictionRegion,
    input: InputShrink<'_>,
) -> Result<TighteningVerdict> {
    let state_margins = constraints
        .state_sets()
        .iter()
        .map(|s| Ok(1.0 - region_usage(s.shape(), error)?))
        .collect::<Result<Vec<f64>>>()?;
    let input_margin = 1.0 - input_usage(constraints, error, input)?;
    let feasible = input_margin > 0.0 && state_margins.iter().all(|&r| r > 0.0);
    Ok(TighteningVerdict {
        feasible,
        state_margins,
        input_margin,
    })
}

/// `‖S^½(x − c)‖ ≤ ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeRule {
    pub center: DVector<f64>,
    pub shape_sqrt: DMatrix<f64>,
    pub rho: f64,
}

impl ConeRule {
    fn from_ellipsoid(set: &Ellipsoid, rho: f64) -> Result<Self> {
        Ok(Self {
            center: set.center().clone(),
            shape_sqrt: sym_sqrt(set.shape())?,
            rho,
        })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (&self.shape_sqrt * (x - &self.center)).norm()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.value(x) <= self.rho + tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TightenedConstraints {
    /// Rules for `z(1..N)`.
    pub state_rules: Vec<ConeRule>,
    /// Rule for `v(0..N−1)`.
    pub input_rule: ConeRule,
}

impl TightenedConstraints {
    pub fn horizon(&self) -> usize {
        self.state_rules.len()
    }

    pub fn state_rule(&self, t: usize) -> &ConeRule {
        &self.state_rules[t - 1]
    }
}

pub fn tighten(
    constraints: &ConstraintSpec,
    error: &PredictionRegion,
    input: InputShrink<'_>,
) -> Result<TightenedConstraints> {
    let verdict = check_tightening_feasible(constraints, error, input)?;
    if !verdict.feasible {
        let worst = verdict.state_margins.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::TighteningInfeasible(format!(
            "prediction regions do not fit inside the constraints (state margin {worst:.4e}, input margin {:.4e})",
            verdict.input_margin
        )));
    }
    let state_rules = constraints
        .state_sets()
        .iter()
        .zip(&verdict.state_margins)
        .map(|(s, &rho)| ConeRule::from_ellipsoid(s, rho))
        .collect::<Result<_>>()?;
    Ok(TightenedConstraints {
        state_rules,
        input_rule: ConeRule::from_ellipsoid(constraints.input_set(), verdict.input_margin)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSolution {
    pub status: SolveStatus,
    /// `v*(0..N−1)`; empty when infeasible.
    pub v_star: Sequence,
    /// `z*(0..=N)` with `z*(0) = x0`; empty when infeasible.
    pub z_star: Sequence,
    pub objective_value: f64,
}

impl RelaxedSolution {
    pub fn into_optimal(self) -> Result<Self> {
        match self.status {
            SolveStatus::Optimal => Ok(self),
            SolveStatus::Infeasible => Err(Error::Infeasible(
                "the tightened nominal problem has no feasible input sequence".into(),
            )),
        }
    }
}

/// Add `½ xᵀ(2M)x` over a block starting at `offset`.
fn add_quadratic_block(prog: &mut ConicProgram, offset: usize, weight: &DMatrix<f64>) {
    let d = weight.nrows();
    for i in 0..d {
        for j in i..d {
            let w = 2.0 * weight[(i, j)];
            if w != 0.0 {
                prog.add_quadratic(offset + i, offset + j, w);
            }
        }
    }
}

/// Second-order cone rows for `‖S^½(x − c)‖ ≤ ρ` with `x` at `offset`.
fn add_cone_rule(prog: &mut ConicProgram, offset: usize, rule: &ConeRule) {
    let d = rule.center.len();
    let rest = (0..d)
        .map(|r| {
            let mut a = Affine::constant(-(rule.shape_sqrt.row(r) * &rule.center)[0]);
            for c in 0..d {
                a.add_term(offset + c, rule.shape_sqrt[(r, c)]);
            }
            a
        })
        .collect();
    prog.add_second_order(Affine::constant(rule.rho), rest);
}

/// Minimize the nominal cost subject to exact dynamics and the tightened
/// cone constraints.
pub fn solve_relaxed_ocp(
    sys: &LinearSystem,
    cost: &CostSpec,
    tightened: &TightenedConstraints,
    x0: &DVector<f64>,
) -> Result<RelaxedSolution> {
    let (n, m, horizon) = (sys.state_dim(), sys.input_dim(), sys.horizon());
    if tightened.horizon() != horizon {
        return Err(Error::DimensionMismatch {
            context: "tightened constraint horizon",
            expected: horizon,
            found: tightened.horizon(),
        });
    }
    if x0.len() != n || cost.state_weight().nrows() != n || cost.input_weight().nrows() != m {
        return Err(Error::DimensionMismatch {
            context: "initial state or cost weights",
            expected: n,
            found: x0.len(),
        });
    }
    let v_at = |t: usize| t * m;
    let z_at = |t: usize| horizon * m + (t - 1) * n;
    let mut prog = ConicProgram::new(horizon * (m + n));

    for t in 0..horizon {
        add_quadratic_block(&mut prog, v_at(t), cost.input_weight());
    }
    for t in 1..horizon {
        add_quadratic_block(&mut prog, z_at(t), cost.state_weight());
    }
    add_quadratic_block(&mut prog, z_at(horizon), cost.terminal_weight());

    let (a, b) = (sys.a(), sys.b());
    let ax0 = a * x0;
    let mut dynamics = Vec::with_capacity(horizon * n);
    for t in 0..horizon {
        for r in 0..n {
            let mut row = Affine::term(z_at(t + 1) + r, 1.0);
            for c in 0..m {
                row.add_term(v_at(t) + c, -b[(r, c)]);
            }
            if t == 0 {
                row.constant = -ax0[r];
            } else {
                for c in 0..n {
                    row.add_term(z_at(t) + c, -a[(r, c)]);
                }
            }
            dynamics.push(row);
        }
    }
    prog.add_zero(dynamics);
    for t in 1..=horizon {
        add_cone_rule(&mut prog, z_at(t), tightened.state_rule(t));
    }
    for t in 0..horizon {
        add_cone_rule(&mut prog, v_at(t), &tightened.input_rule);
    }

    let x = match prog.solve(&SolveOptions::default())? {
        ConicOutcome::Infeasible => {
            return Ok(RelaxedSolution {
                status: SolveStatus::Infeasible,
                v_star: Vec::new(),
                z_star: Vec::new(),
                objective_value: f64::NAN,
            })
        }
        ConicOutcome::Solved { x, .. } => x,
    };
    let v_star: Sequence = (0..horizon)
        .map(|t| DVector::from_column_slice(&x[v_at(t)..v_at(t) + m]))
        .collect();
    let z_star = sys.simulate_nominal(x0, &v_star)?;
    let worst = (1..=horizon)
        .map(|t| tightened.state_rule(t).value(&z_star[t]) - tightened.state_rule(t).rho)
        .chain(v_star.iter().map(|v| tightened.input_rule.value(v) - tightened.input_rule.rho))
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > FEASIBILITY_TOL {
        return Err(Error::Solver(format!(
            "solution violates tightened constraints by {worst:.3e} after re-simulation"
        )));
    }
    Ok(RelaxedSolution {
        objective_value: cost.evaluate(&z_star, &v_star),
        status: SolveStatus::Optimal,
        v_star,
        z_star,
    })
}

/// `u(t) = K(x(t) − z*(t)) + v*(t)`.
pub fn assemble_control(
    gain: &DMatrix<f64>,
    v_star: &[DVector<f64>],
    z_star: &[DVector<f64>],
    x_t: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    if t >= v_star.len() || t >= z_star.len() {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside the horizon 0..{}",
            v_star.len()
        )));
    }
    check_vectors(std::slice::from_ref(x_t), gain.ncols(), "measured state")?;
    Ok(gain * (x_t - &z_star[t]) + &v_star[t])
}
