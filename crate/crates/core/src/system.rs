//! Linear time-invariant plant, ellipsoidal constraint sets and trajectory
//! simulation.
//!
//! The state is split as `x(t) = z(t) + e(t)`: a deterministic nominal part
//! driven by the feedforward `v`, and an error part driven by the
//! disturbance through the closed-loop matrix `A + BK`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// A sequence of vectors indexed by time.
pub type Sequence = Vec<DVector<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: usize,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let n = linalg::ensure_square(&a, "state matrix A")?;
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "input matrix B rows",
                expected: n,
                found: b.nrows(),
            });
        }
        if b.ncols() == 0 || n == 0 {
            return Err(Error::InvalidArgument("empty state or input dimension".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(Self { a, b, horizon })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Closed-loop matrix `A + BK`.
    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_gain(gain)?;
        Ok(&self.a + &self.b * gain)
    }

    pub fn check_gain(&self, gain: &DMatrix<f64>) -> Result<()> {
        if gain.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "gain rows",
                expected: self.input_dim(),
                found: gain.nrows(),
            });
        }
        if gain.ncols() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "gain columns",
                expected: self.state_dim(),
                found: gain.ncols(),
            });
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &[DVector<f64>], dim: usize, context: &'static str) -> Result<()> {
        if seq.len() != self.horizon {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.horizon,
                found: seq.len(),
            });
        }
        check_vectors(seq, dim, context)
    }

    fn check_state(&self, x: &DVector<f64>, context: &'static str) -> Result<()> {
        check_vectors(std::slice::from_ref(x), self.state_dim(), context)
    }

    /// Nominal states `z(0..=N)` with `z(0) = x0`, `z(t+1) = A z(t) + B v(t)`.
    pub fn simulate_nominal(&self, x0: &DVector<f64>, v: &[DVector<f64>]) -> Result<Sequence> {
        self.check_state(x0, "initial state")?;
        self.check_sequence(v, self.input_dim(), "feedforward sequence")?;
        let mut z = Vec::with_capacity(self.horizon + 1);
        z.push(x0.clone());
        for vt in v {
            let last = z.last().expect("nonempty");
            z.push(&self.a * last + &self.b * vt);
        }
        Ok(z)
    }

    /// Error states `e(1..=N)` from `e(0) = 0`, `e(t+1) = (A + BK) e(t) + w(t)`.
    pub fn simulate_error(&self, gain: &DMatrix<f64>, w: &[DVector<f64>]) -> Result<Sequence> {
        let closed = self.closed_loop(gain)?;
        self.check_sequence(w, self.state_dim(), "disturbance sequence")?;
        let mut e = DVector::zeros(self.state_dim());
        let mut out = Vec::with_capacity(self.horizon);
        for wt in w {
            e = &closed * &e + wt;
            out.push(e.clone());
        }
        Ok(out)
    }

    /// Closed-loop run of the plant under `u(t) = K (x(t) − z(t)) + v(t)`,
    /// where `z` is the nominal trajectory generated by `v` from `x0`.
    pub fn simulate_closed_loop(
        &self,
        gain: &DMatrix<f64>,
        v: &[DVector<f64>],
        x0: &DVector<f64>,
        w: &[DVector<f64>],
    ) -> Result<Trajectory> {
        self.check_gain(gain)?;
        self.check_sequence(w, self.state_dim(), "disturbance sequence")?;
        let z = self.simulate_nominal(x0, v)?;
        let mut states = Vec::with_capacity(self.horizon + 1);
        let mut inputs = Vec::with_capacity(self.horizon);
        states.push(x0.clone());
        for t in 0..self.horizon {
            let x = &states[t];
            let u = gain * (x - &z[t]) + &v[t];
            let next = &self.a * x + &self.b * &u + &w[t];
            inputs.push(u);
            states.push(next);
        }
        Ok(Trajectory { states, inputs })
    }
}

pub(crate) fn check_vectors(seq: &[DVector<f64>], dim: usize, context: &'static str) -> Result<()> {
    match seq.iter().find(|v| v.len() != dim) {
        Some(bad) => Err(Error::DimensionMismatch {
            context,
            expected: dim,
            found: bad.len(),
        }),
        None => Ok(()),
    }
}

/// `{x : (x − center)ᵀ shape (x − center) ≤ 1}` with `shape` symmetric
/// positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        linalg::ensure_positive_definite(&shape, "ellipsoid shape")?;
        if center.len() != shape.nrows() {
            return Err(Error::DimensionMismatch {
                context: "ellipsoid center",
                expected: shape.nrows(),
                found: center.len(),
            });
        }
        Ok(Self {
            center,
            shape: linalg::symmetrize(&shape),
        })
    }

    pub fn centered(shape: DMatrix<f64>) -> Result<Self> {
        let n = shape.nrows();
        Self::new(DVector::zeros(n), shape)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(x − c)ᵀ S (x − c)`; the point is inside when this is at most one.
    pub fn level(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        linalg::quad_form(&self.shape, &d)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.level(x) <= 1.0
    }

    /// Length of the shortest semi-axis, `1/√λmax(S)`.
    pub fn min_semi_axis(&self) -> f64 {
        1.0 / linalg::max_eigenvalue_sym_part(&self.shape).sqrt()
    }
}

/// Ellipsoidal state sets `X_1..X_N`, the input set `U` and the failure
/// probability of the chance constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    state_sets: Vec<Ellipsoid>,
    input_set: Ellipsoid,
    theta: f64,
}

impl ConstraintSpec {
    pub fn new(state_sets: Vec<Ellipsoid>, input_set: Ellipsoid, theta: f64) -> Result<Self> {
        if state_sets.is_empty() {
            return Err(Error::InvalidArgument("no state constraint sets".into()));
        }
        let n = state_sets[0].dim();
        if let Some(bad) = state_sets.iter().find(|s| s.dim() != n) {
            return Err(Error::DimensionMismatch {
                context: "state constraint set",
                expected: n,
                found: bad.dim(),
            });
        }
        if input_set.center().amax() != 0.0 {
            return Err(Error::InvalidArgument("input set must be centered at the origin".into()));
        }
        check_probability(theta, "theta")?;
        Ok(Self {
            state_sets,
            input_set,
            theta,
        })
    }

    /// The same state set at every step of the horizon.
    pub fn uniform(horizon: usize, state_set: Ellipsoid, input_set: Ellipsoid, theta: f64) -> Result<Self> {
        Self::new(vec![state_set; horizon], input_set, theta)
    }

    /// `X_t` for `t` in `1..=N`.
    pub fn state_set(&self, t: usize) -> &Ellipsoid {
        &self.state_sets[t - 1]
    }

    pub fn state_sets(&self) -> &[Ellipsoid] {
        &self.state_sets
    }

    pub fn input_set(&self) -> &Ellipsoid {
        &self.input_set
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn horizon(&self) -> usize {
        self.state_sets.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_sets[0].dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_set.dim()
    }

    pub fn check_against(&self, sys: &LinearSystem) -> Result<()> {
        if self.horizon() != sys.horizon() {
            return Err(Error::DimensionMismatch {
                context: "number of state sets vs horizon",
                expected: sys.horizon(),
                found: self.horizon(),
            });
        }
        if self.state_dim() != sys.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "state set dimension",
                expected: sys.state_dim(),
                found: self.state_dim(),
            });
        }
        if self.input_dim() != sys.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "input set dimension",
                expected: sys.input_dim(),
                found: self.input_dim(),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_probability(p: f64, name: &str) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {p}")));
    }
    Ok(())
}

/// Quadratic stage and terminal costs `xᵀWx + uᵀRu` and `xᵀW_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    state_weight: DMatrix<f64>,
    input_weight: DMatrix<f64>,
    terminal_weight: DMatrix<f64>,
}

impl CostSpec {
    pub fn new(state_weight: DMatrix<f64>, input_weight: DMatrix<f64>, terminal_weight: DMatrix<f64>) -> Result<Self> {
        for (m, ctx) in [(&state_weight, "stage state weight"), (&terminal_weight, "terminal weight")] {
            linalg::ensure_symmetric(m, ctx)?;
            let min = linalg::min_eigenvalue_sym_part(m);
            if min < -1e-12 * m.amax().max(1.0) {
                return Err(Error::NotPositiveDefinite {
                    context: ctx,
                    min_eigenvalue: min,
                });
            }
        }
        linalg::ensure_positive_definite(&input_weight, "stage input weight")?;
        if terminal_weight.nrows() != state_weight.nrows() {
            return Err(Error::DimensionMismatch {
                context: "terminal weight",
                expected: state_weight.nrows(),
                found: terminal_weight.nrows(),
            });
        }
        Ok(Self {
            state_weight: linalg::symmetrize(&state_weight),
            input_weight: linalg::symmetrize(&input_weight),
            terminal_weight: linalg::symmetrize(&terminal_weight),
        })
    }

    pub fn state_weight(&self) -> &DMatrix<f64> {
        &self.state_weight
    }

    pub fn input_weight(&self) -> &DMatrix<f64> {
        &self.input_weight
    }

    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        &self.terminal_weight
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            state_weight: &self.state_weight * factor,
            input_weight: &self.input_weight * factor,
            terminal_weight: &self.terminal_weight * factor,
        }
    }

    /// `Σ_{t<N} (z(t)ᵀ W z(t) + v(t)ᵀ R v(t)) + z(N)ᵀ W_f z(N)`.
    pub fn evaluate(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let stage: f64 = states
            .iter()
            .zip(inputs)
            .map(|(x, u)| linalg::quad_form(&self.state_weight, x) + linalg::quad_form(&self.input_weight, u))
            .sum();
        let terminal = states
            .get(inputs.len())
            .map_or(0.0, |x| linalg::quad_form(&self.terminal_weight, x));
        stage + terminal
    }
}

/// States `x(0..=N)` and inputs `u(0..N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Sequence,
    pub inputs: Sequence,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::RngExt;

    fn double_integrator(horizon: usize) -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
            horizon,
        )
        .unwrap()
    }

    fn vecs(n: usize, len: usize, value: &[f64]) -> Sequence {
        (0..len).map(|_| DVector::from_row_slice(&value[..n])).collect()
    }

    fn random_seq(rng: &mut impl rand::Rng, dim: usize, len: usize) -> Sequence {
        (0..len)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    /// `e(t) = Σ_{i=1}^{t} Āⁱ⁻¹ w(t − i)`, evaluated term by term.
    fn error_closed_form(sys: &LinearSystem, gain: &DMatrix<f64>, w: &[DVector<f64>]) -> Sequence {
        let abar = sys.a() + sys.b() * gain;
        (1..=w.len())
            .map(|t| {
                let mut sum = DVector::zeros(sys.state_dim());
                for i in 1..=t {
                    sum += abar.pow((i - 1) as u32) * &w[t - i];
                }
                sum
            })
            .collect()
    }

    #[test]
    fn identity_dynamics_hold_state() {
        let sys = LinearSystem::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 5).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let z = sys.simulate_nominal(&x0, &vecs(1, 5, &[3.0])).unwrap();
        assert_eq!(z.len(), 6);
        assert!(z.iter().all(|zt| *zt == x0));
    }

    #[test]
    fn double_integrator_one_step() {
        let sys = double_integrator(3);
        let x0 = DVector::from_vec(vec![2.0, -1.0]);
        let z = sys.simulate_nominal(&x0, &vecs(1, 3, &[0.0])).unwrap();
        assert_eq!(z[1], DVector::from_vec(vec![1.5, -1.0]));
    }

    #[test]
    fn pure_input_dynamics() {
        let sys = LinearSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), 4).unwrap();
        let c = [0.3, -0.7];
        let z = sys.simulate_nominal(&DVector::from_vec(vec![9.0, 9.0]), &vecs(2, 4, &c)).unwrap();
        for zt in &z[1..] {
            assert_eq!(zt.as_slice(), &c);
        }
    }

    #[test]
    fn nominal_rejects_wrong_lengths() {
        let sys = double_integrator(3);
        let x0 = DVector::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            sys.simulate_nominal(&x0, &vecs(1, 2, &[0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            sys.simulate_nominal(&DVector::zeros(3), &vecs(1, 3, &[0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_disturbance_gives_zero_error() {
        let sys = double_integrator(10);
        let k = DMatrix::from_row_slice(1, 2, &[-0.241, -0.787]);
        let e = sys.simulate_error(&k, &vecs(2, 10, &[0.0, 0.0])).unwrap();
        assert!(e.iter().all(|et| et.amax() == 0.0));
    }

    #[test]
    fn accumulator_error() {
        let sys = LinearSystem::new(DMatrix::identity(2, 2), DMatrix::from_element(2, 1, 1.0), 6).unwrap();
        let c = [0.25, -0.5];
        let e = sys.simulate_error(&DMatrix::zeros(1, 2), &vecs(2, 6, &c)).unwrap();
        for (t, et) in e.iter().enumerate() {
            let steps = (t + 1) as f64;
            assert_relative_eq!(et[0], steps * c[0]);
            assert_relative_eq!(et[1], steps * c[1]);
        }
    }

    #[test]
    fn error_recursion_matches_closed_form_on_double_integrator() {
        let sys = double_integrator(50);
        let k = DMatrix::from_row_slice(1, 2, &[-0.241, -0.787]);
        let mut rng = stream_rng(11, 0);
        let w = random_seq(&mut rng, 2, 50);
        let rec = sys.simulate_error(&k, &w).unwrap();
        let closed = error_closed_form(&sys, &k, &w);
        for (a, b) in rec.iter().zip(&closed) {
            assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
        }
    }

    #[test]
    fn closed_loop_without_disturbance_follows_nominal() {
        let sys = double_integrator(8);
        let k = DMatrix::from_row_slice(1, 2, &[-0.5, -1.0]);
        let x0 = DVector::from_vec(vec![2.0, -1.0]);
        let v: Sequence = (0..8).map(|t| DVector::from_element(1, 0.1 * t as f64)).collect();
        let traj = sys.simulate_closed_loop(&k, &v, &x0, &vecs(2, 8, &[0.0, 0.0])).unwrap();
        let z = sys.simulate_nominal(&x0, &v).unwrap();
        assert_eq!(traj.states, z);
        assert_eq!(traj.inputs, v);
    }

    #[test]
    fn closed_loop_from_origin_without_feedforward_is_error() {
        let sys = double_integrator(8);
        let k = DMatrix::from_row_slice(1, 2, &[-0.5, -1.0]);
        let mut rng = stream_rng(3, 1);
        let w = random_seq(&mut rng, 2, 8);
        let traj = sys
            .simulate_closed_loop(&k, &vecs(1, 8, &[0.0]), &DVector::zeros(2), &w)
            .unwrap();
        let e = sys.simulate_error(&k, &w).unwrap();
        for (x, et) in traj.states[1..].iter().zip(&e) {
            assert!((x - et).norm() <= 1e-12);
        }
    }

    #[test]
    fn cost_evaluation() {
        let cost = CostSpec::new(DMatrix::zeros(2, 2), DMatrix::identity(1, 1), DMatrix::identity(2, 2) * 100.0).unwrap();
        let states = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![0.1, 0.0]),
        ];
        let inputs = vec![DVector::from_element(1, 2.0), DVector::from_element(1, -1.0)];
        assert_relative_eq!(cost.evaluate(&states, &inputs), 4.0 + 1.0 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ellipsoid_validation() {
        assert!(Ellipsoid::centered(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        let e = Ellipsoid::centered(DMatrix::identity(2, 2) / 10.0).unwrap();
        assert_relative_eq!(e.min_semi_axis(), 10f64.sqrt(), max_relative = 1e-12);
        assert!(e.contains(&DVector::from_vec(vec![3.0, 0.0])));
        assert!(!e.contains(&DVector::from_vec(vec![3.2, 0.0])));
    }

    #[test]
    fn constraint_spec_validation() {
        let x = Ellipsoid::centered(DMatrix::identity(2, 2)).unwrap();
        let u = Ellipsoid::centered(DMatrix::identity(1, 1)).unwrap();
        assert!(ConstraintSpec::uniform(3, x.clone(), u.clone(), 0.0).is_err());
        assert!(ConstraintSpec::uniform(3, x.clone(), u.clone(), 1.0).is_err());
        let off = Ellipsoid::new(DVector::from_element(1, 0.5), DMatrix::identity(1, 1)).unwrap();
        assert!(ConstraintSpec::uniform(3, x.clone(), off, 0.1).is_err());
        let spec = ConstraintSpec::uniform(3, x, u, 0.1).unwrap();
        assert!(spec.check_against(&double_integrator(3)).is_ok());
        assert!(spec.check_against(&double_integrator(4)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn closed_form_matches_recursion(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=3, horizon in 1usize..=20) {
            let mut rng = stream_rng(seed, 0);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
            let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-0.5..0.5));
            let sys = LinearSystem::new(a, b, horizon).unwrap();
            let w = random_seq(&mut rng, n, horizon);
            let rec = sys.simulate_error(&k, &w).unwrap();
            let closed = error_closed_form(&sys, &k, &w);
            for (x, y) in rec.iter().zip(&closed) {
                prop_assert!((x - y).norm() <= 1e-9 * y.norm().max(1.0));
            }
        }

        #[test]
        fn superposition(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=3, horizon in 1usize..=20) {
            let mut rng = stream_rng(seed, 1);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let sys = LinearSystem::new(a, b, horizon).unwrap();
            let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let v = random_seq(&mut rng, m, horizon);
            let w = random_seq(&mut rng, n, horizon);
            let traj = sys.simulate_closed_loop(&k, &v, &x0, &w).unwrap();
            let z = sys.simulate_nominal(&x0, &v).unwrap();
            let e = sys.simulate_error(&k, &w).unwrap();
            for t in 1..=horizon {
                let sum = &z[t] + &e[t - 1];
                prop_assert!((&traj.states[t] - &sum).norm() <= 1e-9 * sum.norm().max(1.0));
            }
            let e_prev = |t: usize| if t == 0 { DVector::zeros(n) } else { e[t - 1].clone() };
            for (t, vt) in v.iter().enumerate() {
                let u = &k * e_prev(t) + vt;
                prop_assert!((&traj.inputs[t] - &u).norm() <= 1e-9 * u.norm().max(1.0));
            }
        }

        #[test]
        fn error_is_linear_in_disturbance(seed in any::<u64>(), n in 1usize..=4, horizon in 1usize..=20) {
            let mut rng = stream_rng(seed, 2);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
            let k = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
            let sys = LinearSystem::new(a, b, horizon).unwrap();
            let w1 = random_seq(&mut rng, n, horizon);
            let w2 = random_seq(&mut rng, n, horizon);
            let sum: Sequence = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let e1 = sys.simulate_error(&k, &w1).unwrap();
            let e2 = sys.simulate_error(&k, &w2).unwrap();
            let e12 = sys.simulate_error(&k, &sum).unwrap();
            for t in 0..horizon {
                let s = &e1[t] + &e2[t];
                prop_assert!((&e12[t] - &s).norm() <= 1e-9 * s.norm().max(1.0));
            }
        }
    }
}
