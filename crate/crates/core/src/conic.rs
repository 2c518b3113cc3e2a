//! Conic program exchange structure and its interior-point backend.
//!
//! A program is a list of cone blocks. Each block is a list of affine rows
//! `s = c + Σ a_i x_i` that must lie in the block's cone. The objective is
//! `½ xᵀPx + qᵀx`. Semidefinite blocks are given as symmetric matrices of
//! affine entries and packed internally.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
    SupportedConeT::{NonnegativeConeT, PSDTriangleConeT, SecondOrderConeT, ZeroConeT},
};

use crate::error::{Error, Result};

/// Affine expression `constant + Σ coef·x[index]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    pub fn var(index: usize) -> Self {
        Self::term(index, 1.0)
    }

    pub fn term(index: usize, coef: f64) -> Self {
        Self { constant: 0.0, terms: vec![(index, coef)] }
    }

    pub fn add_term(&mut self, index: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((index, coef));
        }
        self
    }

    pub fn add(&mut self, other: &Affine, scale: f64) -> &mut Self {
        self.constant += scale * other.constant;
        for &(i, c) in &other.terms {
            self.add_term(i, scale * c);
        }
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            constant: s * self.constant,
            terms: self.terms.iter().map(|&(i, c)| (i, s * c)).collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// Every row equals zero.
    Zero,
    /// Every row is nonnegative.
    Nonnegative,
    /// `rows[0] ≥ ‖rows[1..]‖`.
    SecondOrder,
    /// Packed upper triangle (column-major, off-diagonals scaled by √2) of a
    /// PSD matrix of the given dimension.
    Psd { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeBlock {
    pub kind: ConeKind,
    pub rows: Vec<Affine>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-9,
            tol_feas: 1e-9,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConicOutcome {
    Solved {
        x: Vec<f64>,
        objective: f64,
        /// Reduced-accuracy termination reported by the backend.
        reduced_accuracy: bool,
    },
    Infeasible,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    num_vars: usize,
    quadratic: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    blocks: Vec<ConeBlock>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            linear: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn blocks(&self) -> &[ConeBlock] {
        &self.blocks
    }

    /// Adds `value` to `P[i][j]` and `P[j][i]` (once on the diagonal).
    pub fn add_quadratic(&mut self, i: usize, j: usize, value: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.quadratic.push((r, c, value));
    }

    pub fn add_linear(&mut self, i: usize, value: f64) {
        self.linear[i] += value;
    }

    pub fn add_block(&mut self, kind: ConeKind, rows: Vec<Affine>) {
        if !rows.is_empty() {
            self.blocks.push(ConeBlock { kind, rows });
        }
    }

    pub fn add_zero(&mut self, rows: Vec<Affine>) {
        self.add_block(ConeKind::Zero, rows);
    }

    pub fn add_nonnegative(&mut self, rows: Vec<Affine>) {
        self.add_block(ConeKind::Nonnegative, rows);
    }

    /// `t ≥ ‖rest‖`.
    pub fn add_second_order(&mut self, t: Affine, rest: Vec<Affine>) {
        let mut rows = Vec::with_capacity(rest.len() + 1);
        rows.push(t);
        rows.extend(rest);
        self.add_block(ConeKind::SecondOrder, rows);
    }

    /// Symmetric matrix with entries `entry(i, j)` (read for `i ≤ j`) is PSD.
    pub fn add_psd(&mut self, dim: usize, entry: impl Fn(usize, usize) -> Affine) {
        let mut rows = Vec::with_capacity(dim * (dim + 1) / 2);
        for j in 0..dim {
            for i in 0..=j {
                let e = entry(i, j);
                rows.push(if i == j { e } else { e.scaled(std::f64::consts::SQRT_2) });
            }
        }
        self.add_block(ConeKind::Psd { dim }, rows);
    }

    fn check_indices(&self) -> Result<()> {
        let n = self.num_vars;
        let bad_quad = self.quadratic.iter().any(|&(_, c, _)| c >= n);
        let bad_rows = self
            .blocks
            .iter()
            .flat_map(|b| &b.rows)
            .any(|r| r.terms.iter().any(|&(i, _)| i >= n));
        if bad_quad || bad_rows {
            return Err(Error::InvalidArgument("conic program references an unknown variable".into()));
        }
        for b in &self.blocks {
            let ok = match b.kind {
                ConeKind::Psd { dim } => b.rows.len() == dim * (dim + 1) / 2,
                _ => true,
            };
            if !ok {
                return Err(Error::InvalidArgument("PSD block has the wrong number of rows".into()));
            }
        }
        Ok(())
    }

    pub fn solve(&self, options: &SolveOptions) -> Result<ConicOutcome> {
        self.check_indices()?;
        let n = self.num_vars;
        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for &(r, c, v) in &self.quadratic {
            pi.push(r);
            pj.push(c);
            pv.push(v);
        }
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let (mut ai, mut aj, mut av, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut cones: Vec<SupportedConeT<f64>> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for row in &block.rows {
                let r = b.len();
                for &(i, c) in &row.terms {
                    ai.push(r);
                    aj.push(i);
                    av.push(-c);
                }
                b.push(row.constant);
            }
            cones.push(match block.kind {
                ConeKind::Zero => ZeroConeT(block.rows.len()),
                ConeKind::Nonnegative => NonnegativeConeT(block.rows.len()),
                ConeKind::SecondOrder => SecondOrderConeT(block.rows.len()),
                ConeKind::Psd { dim } => PSDTriangleConeT(dim),
            });
        }
        let a = CscMatrix::new_from_triplets(b.len(), n, ai, aj, av);

        let settings = DefaultSettings {
            verbose: false,
            max_iter: options.max_iter,
            tol_gap_abs: options.tol_gap_abs,
            tol_gap_rel: options.tol_gap_rel,
            tol_feas: options.tol_feas,
            max_threads: 1,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &self.linear, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("problem setup rejected: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(ConicOutcome::Solved {
                x: sol.x.clone(),
                objective: sol.obj_val,
                reduced_accuracy: sol.status == SolverStatus::AlmostSolved,
            }),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Ok(ConicOutcome::Infeasible),
            other => Err(Error::Solver(format!("interior-point solver stopped with status {other:?}"))),
        }
    }
}
