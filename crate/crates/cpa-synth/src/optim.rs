//! Backend-neutral conic problem assembly and solving.
//!
//! Three problem classes are emitted by the toolkit: linear programs (input
//! polytope extents), convex quadratic programs (the min-norm online
//! controller), and semidefinite programs (the convex-overbounding
//! iteration). All are expressed as one [`ConicProblem`] and handed to
//! Clarabel; results are re-checked by an independent residual pass before
//! being reported as optimal.
//!
//! Problem dump format (`ConicProblem::dump_sparse`): a line-oriented sparse
//! text listing with sections `vars`, `minimize` (quad triplets `q i j v`
//! and linear terms `l i v`), `eq` / `ge` rows (one row per line, entries
//! `var:coeff`, trailing `const:value`) and `psd` blocks; written for
//! offline debugging.

use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

/// Affine expression `sum coeff_k x_k + constant`.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(k: usize) -> Self {
        Self {
            terms: vec![(k, 1.0)],
            constant: 0.0,
        }
    }

    pub fn push(&mut self, var: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((var, coeff));
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) {
        self.constant += scale * other.constant;
        for &(k, c) in &other.terms {
            self.push(k, scale * c);
        }
    }

    pub fn scaled(&self, scale: f64) -> LinExpr {
        LinExpr {
            terms: self.terms.iter().map(|&(k, c)| (k, c * scale)).collect(),
            constant: self.constant * scale,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(k, c)| acc + c * x[k])
    }

    /// Merges duplicate variable entries (keeps assembly code simple).
    fn compacted(&self) -> LinExpr {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|&(k, _)| k);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (k, c) in terms {
            match merged.last_mut() {
                Some((lk, lc)) if *lk == k => *lc += c,
                _ => merged.push((k, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        LinExpr {
            terms: merged,
            constant: self.constant,
        }
    }
}

/// An affine symmetric-matrix map constrained to the PSD cone. Entries are
/// given for the lower triangle (`row >= col`); the upper triangle is
/// implied.
#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub dim: usize,
    pub entries: Vec<(usize, usize, LinExpr)>,
}

impl PsdBlock {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, row: usize, col: usize, expr: LinExpr) {
        assert!(row >= col && row < self.dim, "lower triangle only");
        self.entries.push((row, col, expr));
    }

    /// Dense symmetric realization at the point `x`.
    pub fn realize(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, e) in &self.entries {
            let v = e.eval(x);
            m[(*r, *c)] = v;
            m[(*c, *r)] = v;
        }
        m
    }
}

/// A conic optimization problem: `min 0.5 x'Px + q'x` subject to affine
/// equality rows, nonnegativity rows and PSD blocks.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub num_vars: usize,
    pub linear_objective: Vec<f64>,
    /// Triplets of the symmetric quadratic form `P` (lower triangle).
    pub quad_objective: Vec<(usize, usize, f64)>,
    /// `expr == 0`.
    pub equalities: Vec<LinExpr>,
    /// `expr >= 0`.
    pub nonneg: Vec<LinExpr>,
    /// `M(x)` positive semidefinite.
    pub psd_blocks: Vec<PsdBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub max_residual: f64,
}

/// Solver knobs. `tol` is the acceptance threshold of the independent
/// residual pass; the interior-point tolerances are set two orders tighter.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 200,
        }
    }
}

impl ConicProblem {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            linear_objective: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    /// Worst constraint violation of `x` over all cones.
    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.equalities {
            worst = worst.max(e.eval(x).abs());
        }
        for e in &self.nonneg {
            worst = worst.max(-e.eval(x));
        }
        for b in &self.psd_blocks {
            let m = b.realize(x);
            let eig = m.symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            worst = worst.max(-min);
        }
        worst.max(0.0)
    }

    /// Objective `0.5 x'Px + q'x`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut obj = 0.0;
        for (k, &q) in self.linear_objective.iter().enumerate() {
            obj += q * x[k];
        }
        for &(r, c, v) in &self.quad_objective {
            if r == c {
                obj += 0.5 * v * x[r] * x[c];
            } else {
                obj += v * x[r] * x[c];
            }
        }
        obj
    }

    /// Line-oriented sparse text dump for offline debugging.
    pub fn dump_sparse<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "vars {}", self.num_vars)?;
        for &(r, c, v) in &self.quad_objective {
            writeln!(w, "minimize q {r} {c} {v}")?;
        }
        for (k, &v) in self.linear_objective.iter().enumerate() {
            if v != 0.0 {
                writeln!(w, "minimize l {k} {v}")?;
            }
        }
        for (tag, rows) in [("eq", &self.equalities), ("ge", &self.nonneg)] {
            for e in rows {
                write!(w, "{tag}")?;
                for &(k, c) in &e.terms {
                    write!(w, " {k}:{c}")?;
                }
                writeln!(w, " const:{}", e.constant)?;
            }
        }
        for b in &self.psd_blocks {
            writeln!(w, "psd dim {}", b.dim)?;
            for (r, c, e) in &b.entries {
                write!(w, "  entry {r} {c}")?;
                for &(k, cf) in &e.terms {
                    write!(w, " {k}:{cf}")?;
                }
                writeln!(w, " const:{}", e.constant)?;
            }
        }
        Ok(())
    }

    /// Solves the problem with Clarabel and re-checks the reported solution
    /// with the independent residual pass.
    pub fn solve(&self, opts: SolverOptions) -> SolveResult {
        let n = self.num_vars;

        // Quadratic objective, upper-triangular CSC.
        let mut p_triplets: Vec<(usize, usize, f64)> = self
            .quad_objective
            .iter()
            .map(|&(r, c, v)| if r >= c { (c, r, v) } else { (r, c, v) })
            .collect();
        p_triplets.sort_by_key(|&(r, c, _)| (c, r));
        let p = csc_from_triplets(n, n, &p_triplets);

        // Constraint rows: zero cone, nonneg cone, PSD triangles.
        let mut a_triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b_vec: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut row = 0usize;

        if !self.equalities.is_empty() {
            for e in &self.equalities {
                let e = e.compacted();
                for &(k, c) in &e.terms {
                    a_triplets.push((row, k, c));
                }
                b_vec.push(-e.constant);
                row += 1;
            }
            cones.push(SupportedConeT::ZeroConeT(self.equalities.len()));
        }
        if !self.nonneg.is_empty() {
            for e in &self.nonneg {
                let e = e.compacted();
                for &(k, c) in &e.terms {
                    a_triplets.push((row, k, -c));
                }
                b_vec.push(e.constant);
                row += 1;
            }
            cones.push(SupportedConeT::NonnegativeConeT(self.nonneg.len()));
        }
        let sqrt2 = std::f64::consts::SQRT_2;
        for block in &self.psd_blocks {
            let d = block.dim;
            let svec_len = d * (d + 1) / 2;
            let base = row;
            let mut b_block = vec![0.0; svec_len];
            for (r, c, e) in &block.entries {
                let e = e.compacted();
                // Lower (r, c) maps to the packed upper-triangle entry
                // (c, r): column-major index r(r+1)/2 + c.
                let idx = r * (r + 1) / 2 + c;
                let scale = if r == c { 1.0 } else { sqrt2 };
                for &(k, cf) in &e.terms {
                    a_triplets.push((base + idx, k, -cf * scale));
                }
                b_block[idx] += e.constant * scale;
            }
            b_vec.extend_from_slice(&b_block);
            row += svec_len;
            cones.push(SupportedConeT::PSDTriangleConeT(d));
        }

        a_triplets.sort_by_key(|&(r, c, _)| (c, r));
        let a = csc_from_triplets(row, n, &a_triplets);

        let settings = DefaultSettings {
            verbose: false,
            max_iter: opts.max_iter,
            tol_feas: (opts.tol * 1e-2).max(1e-12),
            tol_gap_abs: (opts.tol * 1e-2).max(1e-12),
            tol_gap_rel: (opts.tol * 1e-2).max(1e-12),
            ..DefaultSettings::default()
        };

        let Ok(mut solver) =
            DefaultSolver::new(&p, &self.linear_objective, &a, &b_vec, &cones, settings)
        else {
            return SolveResult {
                status: SolveStatus::NumericalFailure,
                primal: vec![0.0; n],
                objective: f64::NAN,
                max_residual: f64::NAN,
            };
        };
        solver.solve();

        let primal = solver.solution.x.clone();
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            _ => SolveStatus::NumericalFailure,
        };
        let (objective, max_residual) = if status == SolveStatus::Optimal {
            (self.objective_value(&primal), self.max_residual(&primal))
        } else {
            (f64::NAN, f64::NAN)
        };
        // The optimal label is only kept when the independent pass agrees.
        let status = if status == SolveStatus::Optimal && max_residual > opts.tol {
            SolveStatus::NumericalFailure
        } else {
            status
        };
        SolveResult {
            status,
            primal,
            objective,
            max_residual,
        }
    }
}

/// `min u' H u + h' u` subject to `A u <= b`. `H` must be positive definite.
pub fn solve_qp(
    h_mat: &DMatrix<f64>,
    h_vec: &[f64],
    a_rows: &[Vec<f64>],
    b: &[f64],
    opts: SolverOptions,
) -> SolveResult {
    let m = h_mat.nrows();
    let mut problem = ConicProblem::new(m);
    // u'Hu + h'u maps to 0.5 u' (2H) u + h'u.
    for r in 0..m {
        for c in 0..=r {
            let v = 2.0 * h_mat[(r, c)];
            if v != 0.0 {
                problem.quad_objective.push((r, c, v));
            }
        }
    }
    problem.linear_objective = h_vec.to_vec();
    for (arow, &bi) in a_rows.iter().zip(b) {
        let mut e = LinExpr::constant(bi);
        for (k, &c) in arow.iter().enumerate() {
            e.push(k, -c);
        }
        problem.nonneg.push(e);
    }
    problem.solve(opts)
}

/// Linear program `min c'x` over `rows(x) >= 0`; thin wrapper used for the
/// input-polytope extent queries.
pub fn solve_lp(c: &[f64], rows: Vec<LinExpr>, opts: SolverOptions) -> SolveResult {
    let mut problem = ConicProblem::new(c.len());
    problem.linear_objective = c.to_vec();
    problem.nonneg = rows;
    problem.solve(opts)
}

fn csc_from_triplets(m: usize, n: usize, sorted: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(sorted.len());
    let mut nzval = Vec::with_capacity(sorted.len());
    let mut prev: Option<(usize, usize)> = None;
    for &(r, c, v) in sorted {
        if prev == Some((r, c)) {
            let last = nzval.len() - 1;
            nzval[last] += v;
            continue;
        }
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
        prev = Some((r, c));
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}
