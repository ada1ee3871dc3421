//! Constrained control-affine plants `xdot = f(x) + G(x) u` with the
//! second-derivative bound oracles feeding the per-simplex interpolation
//! error coefficients.
//!
//! Bound oracles operate on the axis-aligned bounding box of a simplex
//! rather than the simplex itself; box maxima over-approximate the simplex
//! maxima, which keeps the certificates sound.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{Simplex, Triangulation};
use crate::optim::{solve_lp, LinExpr, SolveStatus, SolverOptions};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("input polytope is unbounded along axis {0}")]
    UnboundedInputSet(usize),
    #[error("invalid input constraint: {0}")]
    InvalidInputSet(String),
    #[error("extent LP failed along axis {0}")]
    ExtentSolveFailure(usize),
}

/// Axis-aligned box, the domain handed to the bound oracles.
#[derive(Debug, Clone)]
pub struct Aabb {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Aabb {
    pub fn of_points<'a>(mut points: impl Iterator<Item = &'a DVector<f64>>) -> Self {
        let first = points.next().expect("empty point set");
        let (mut lo, mut hi) = (first.clone(), first.clone());
        for p in points {
            for k in 0..lo.len() {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Self { lo, hi }
    }

    pub fn of_simplex(tri: &Triangulation, simplex: &Simplex) -> Self {
        Self::of_points(simplex.vertex_ids.iter().map(|&v| tri.vertex(v)))
    }

    /// Largest absolute value of coordinate `k` over the box.
    pub fn max_abs(&self, k: usize) -> f64 {
        self.lo[k].abs().max(self.hi[k].abs())
    }
}

/// A control-affine plant with pure evaluators and box bound oracles.
///
/// All methods must be pure; models are shared read-only across parallel
/// per-simplex workers.
pub trait ControlAffineModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Drift `f(x)`, with `f(0) = 0`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Input matrix `G(x)`, `n x m`.
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Upper bound on `max_{p,q,r} max_{xi in box} |d2 f^(p) / dx^(q) dx^(r)|`.
    fn hess_f_bound(&self, bx: &Aabb) -> f64;

    /// Upper bound on `max_{p,q,r} max_{xi in box} |d2 G^(p,s) / dx^(q) dx^(r)|`.
    fn hess_g_bound(&self, bx: &Aabb, s: usize) -> f64;

    /// Upper bound on `max_{p,q} max_{xi in box} |d G^(p,s) / dx^(q)|`.
    /// Exactly zero for constant columns.
    fn grad_g_bound(&self, bx: &Aabb, s: usize) -> f64;

    /// Analytic Jacobian of `f`, when available.
    fn jacobian_f(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// `(A, B)` of the linearization around the origin: analytic Jacobian when
/// the model provides one, central differences (step `1e-6`) otherwise;
/// `B = G(0)`.
pub fn linearize(model: &dyn ControlAffineModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.state_dim();
    let zero = DVector::zeros(n);
    let a = model.jacobian_f(&zero).unwrap_or_else(|| {
        let h = 1e-6;
        DMatrix::from_fn(n, n, |r, c| {
            let mut xp = DVector::zeros(n);
            xp[c] = h;
            let mut xm = DVector::zeros(n);
            xm[c] = -h;
            (model.drift(&xp)[r] - model.drift(&xm)[r]) / (2.0 * h)
        })
    });
    let b = model.input_matrix(&zero);
    (a, b)
}

/// Polytopic input set `{u | H u <= h_c}` with precomputed per-axis extents.
#[derive(Debug, Clone)]
pub struct InputConstraint {
    h: DMatrix<f64>,
    h_c: DVector<f64>,
    extents: Vec<f64>,
}

impl InputConstraint {
    /// Builds the constraint, normalizing rows to unit norm and solving the
    /// `2m` extent LPs. Requires the origin strictly inside.
    pub fn new(h: DMatrix<f64>, h_c: DVector<f64>) -> Result<Self, SystemError> {
        if h.nrows() != h_c.len() {
            return Err(SystemError::InvalidInputSet(format!(
                "H has {} rows but h_c has {} entries",
                h.nrows(),
                h_c.len()
            )));
        }
        let mut h = h;
        let mut h_c = h_c;
        for r in 0..h.nrows() {
            let norm = h.row(r).norm();
            if norm < 1e-14 {
                return Err(SystemError::InvalidInputSet(format!("zero row {r} in H")));
            }
            for c in 0..h.ncols() {
                h[(r, c)] /= norm;
            }
            h_c[r] /= norm;
            if h_c[r] <= 0.0 {
                return Err(SystemError::InvalidInputSet(format!(
                    "origin not strictly inside: normalized offset {} <= 0 in row {r}",
                    h_c[r]
                )));
            }
        }
        let m = h.ncols();
        let mut extents = Vec::with_capacity(m);
        for s in 0..m {
            extents.push(axis_extent_of(&h, &h_c, s)?);
        }
        Ok(Self { h, h_c, extents })
    }

    /// Box input set `|u_s| <= bounds[s]`.
    pub fn box_bounds(bounds: &[f64]) -> Result<Self, SystemError> {
        let m = bounds.len();
        let mut h = DMatrix::zeros(2 * m, m);
        let mut h_c = DVector::zeros(2 * m);
        for s in 0..m {
            h[(2 * s, s)] = 1.0;
            h[(2 * s + 1, s)] = -1.0;
            h_c[2 * s] = bounds[s];
            h_c[2 * s + 1] = bounds[s];
        }
        Self::new(h, h_c)
    }

    pub fn input_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.h_c
    }

    /// `max(|max_{u in U} u_s|, |min_{u in U} u_s|)`, precomputed by LPs.
    pub fn axis_extent(&self, s: usize) -> f64 {
        self.extents[s]
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        let lhs = &self.h * u;
        (0..lhs.len()).all(|r| lhs[r] <= self.h_c[r] + tol)
    }

    /// Scales `u` toward the origin until every row holds exactly. The set
    /// is convex with the origin inside, so the scaled point is admissible.
    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        let lhs = &self.h * u;
        let mut scale = 1.0_f64;
        for r in 0..lhs.len() {
            if lhs[r] > self.h_c[r] {
                scale = scale.min(self.h_c[r] / lhs[r]);
            }
        }
        u * scale
    }
}

fn axis_extent_of(h: &DMatrix<f64>, h_c: &DVector<f64>, s: usize) -> Result<f64, SystemError> {
    let m = h.ncols();
    let rows = || -> Vec<LinExpr> {
        (0..h.nrows())
            .map(|r| {
                let mut e = LinExpr::constant(h_c[r]);
                for c in 0..m {
                    e.push(c, -h[(r, c)]);
                }
                e
            })
            .collect()
    };
    let mut extreme = [0.0_f64; 2];
    for (k, sign) in [(0usize, 1.0), (1, -1.0)] {
        let mut obj = vec![0.0; m];
        obj[s] = sign; // minimize +-u_s
        let res = solve_lp(&obj, rows(), SolverOptions::default());
        match res.status {
            SolveStatus::Optimal => extreme[k] = res.primal[s],
            SolveStatus::Unbounded => return Err(SystemError::UnboundedInputSet(s)),
            _ => return Err(SystemError::ExtentSolveFailure(s)),
        }
    }
    Ok(extreme[0].abs().max(extreme[1].abs()))
}

/// Per-simplex Taylor-remainder coefficients of the Dini-derivative bound.
#[derive(Debug, Clone)]
pub struct SimplexBounds {
    /// Drift Hessian term plus input-column Hessians weighted by the input
    /// extents.
    pub mu: f64,
    /// Input-matrix gradient term; exactly zero when `G` is constant on the
    /// simplex box.
    pub eta: f64,
    /// Geometry coefficients, `c[0] = 0`.
    pub c: Vec<f64>,
}

/// Assembles `mu_i`, `eta_i` and `c_{i,j}` for one simplex.
pub fn simplex_bounds(
    model: &dyn ControlAffineModel,
    tri: &Triangulation,
    simplex_idx: usize,
    u_set: &InputConstraint,
) -> SimplexBounds {
    let simplex = tri.simplex(simplex_idx);
    let bx = Aabb::of_simplex(tri, simplex);
    let m = model.input_dim();
    let mut mu = model.hess_f_bound(&bx);
    let mut eta = 0.0;
    for s in 0..m {
        mu += model.hess_g_bound(&bx, s) * u_set.axis_extent(s);
        eta += 2.0 * model.grad_g_bound(&bx, s);
    }
    SimplexBounds {
        mu,
        eta,
        c: simplex.c_coeffs.clone(),
    }
}

/// Largest `|sin|` over the interval `[a, b]`.
fn interval_max_abs_sin(a: f64, b: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let k_lo = ((a - FRAC_PI_2) / PI).ceil();
    let k_hi = ((b - FRAC_PI_2) / PI).floor();
    if k_hi >= k_lo {
        1.0
    } else {
        a.sin().abs().max(b.sin().abs())
    }
}

/// The inverted pendulum of the numerical study:
/// `x1dot = x2`, `x2dot = 4.9 sin(x1) - 0.3 x2 + u`. Constant `G`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pendulum;

impl ControlAffineModel for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], 4.9 * x[0].sin() - 0.3 * x[1]])
    }

    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }

    fn hess_f_bound(&self, bx: &Aabb) -> f64 {
        // The only nonzero second derivative is d2(4.9 sin x1)/dx1^2.
        4.9 * interval_max_abs_sin(bx.lo[0], bx.hi[0])
    }

    fn hess_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
        0.0
    }

    fn grad_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
        0.0
    }

    fn jacobian_f(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, 4.9 * x[0].cos(), -0.3],
        ))
    }
}

/// State-dependent input gain test plant:
/// `x1dot = x2`, `x2dot = -x1 + (1 + 0.25 x1^2) u`. Exercises the
/// gradient-of-G path of the synthesis LMIs.
#[derive(Debug, Clone, Copy, Default)]
pub struct StateDependentGain;

impl ControlAffineModel for StateDependentGain {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], -x[0]])
    }

    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0 + 0.25 * x[0] * x[0]])
    }

    fn hess_f_bound(&self, _bx: &Aabb) -> f64 {
        0.0
    }

    fn hess_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
        // d2 G^(2,1) / dx1^2 = 0.5 everywhere.
        0.5
    }

    fn grad_g_bound(&self, bx: &Aabb, _s: usize) -> f64 {
        // d G^(2,1) / dx1 = 0.5 x1.
        0.5 * bx.max_abs(0)
    }

    fn jacobian_f(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polytope;
    use approx::assert_abs_diff_eq;

    fn unit_input() -> InputConstraint {
        InputConstraint::box_bounds(&[5.0]).unwrap()
    }

    #[test]
    fn pendulum_eta_zero_everywhere() {
        let x = Polytope::bounding_box_poly(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let t = Triangulation::build(&x, 0.5).unwrap();
        let u = unit_input();
        for i in 0..t.num_simplexes() {
            let b = simplex_bounds(&Pendulum, &t, i, &u);
            assert_eq!(b.eta, 0.0);
            assert_eq!(b.c[0], 0.0);
        }
    }

    #[test]
    fn pendulum_mu_on_small_box() {
        // Simplex with x1 in [0, 0.13]: the interval maximum of |sin| sits
        // at the right endpoint.
        let t = Triangulation::from_parts(
            0.13,
            vec![
                nalgebra::DVector::from_vec(vec![0.0, 0.0]),
                nalgebra::DVector::from_vec(vec![0.13, 0.0]),
                nalgebra::DVector::from_vec(vec![0.13, 0.13]),
            ],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let b = simplex_bounds(&Pendulum, &t, 0, &unit_input());
        assert_abs_diff_eq!(b.mu, 4.9 * 0.13_f64.sin(), epsilon = 1e-12);
    }

    #[test]
    fn interval_sin_bound_spans_peak() {
        assert_eq!(interval_max_abs_sin(1.0, 2.0), 1.0);
        assert_eq!(interval_max_abs_sin(-2.0, -1.0), 1.0);
        assert_abs_diff_eq!(
            interval_max_abs_sin(0.1, 0.4),
            0.4_f64.sin(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            interval_max_abs_sin(-0.5, 0.2),
            0.5_f64.sin(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn c_coefficients_on_unit_right_simplex() {
        // co{0, (1,0), (1,1)}: c_1 = 1 + sqrt(2), c_2 = 4.
        let t = Triangulation::from_parts(
            1.0,
            vec![
                nalgebra::DVector::from_vec(vec![0.0, 0.0]),
                nalgebra::DVector::from_vec(vec![1.0, 0.0]),
                nalgebra::DVector::from_vec(vec![1.0, 1.0]),
            ],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let b = simplex_bounds(&Pendulum, &t, 0, &unit_input());
        assert_abs_diff_eq!(b.c[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.c[1], 1.0 + 2.0_f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.c[2], 4.0, epsilon = 1e-12);

        // Independent reimplementation of the c formula.
        let verts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        let n = 2.0;
        let dist = |j: usize| {
            let dx: f64 = verts[j][0] - verts[0][0];
            let dy: f64 = verts[j][1] - verts[0][1];
            (dx * dx + dy * dy).sqrt()
        };
        let dmax = dist(1).max(dist(2));
        for j in 0..3 {
            let expect = n / 2.0 * dist(j) * (dmax + dist(j));
            assert_abs_diff_eq!(b.c[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn axis_extent_examples() {
        // |u| <= 5.
        let u = unit_input();
        assert_abs_diff_eq!(u.axis_extent(0), 5.0, epsilon = 1e-6);

        // Box [-1, 2] x [-3, 1]: extent along the second axis is 3.
        let h = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let hc = DVector::from_vec(vec![2.0, 1.0, 1.0, 3.0]);
        let u = InputConstraint::new(h, hc).unwrap();
        assert_abs_diff_eq!(u.axis_extent(0), 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(u.axis_extent(1), 3.0, epsilon = 1e-6);

        // Triangle u1 + u2 <= 1, -u1 <= 1, -u2 <= 1: vertices (2,-1),
        // (-1,2), (-1,-1), so the axis-1 extent is 2.
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let hc = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let u = InputConstraint::new(h, hc).unwrap();
        assert_abs_diff_eq!(u.axis_extent(0), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn axis_extent_matches_vertex_enumeration() {
        // Random bounded 2-D input polytopes: LP extent equals the vertex
        // enumeration maximum.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let k = 5;
            let mut rows = Vec::new();
            for i in 0..k {
                let ang =
                    i as f64 / k as f64 * std::f64::consts::TAU + rng.random_range(-0.2..0.2);
                rows.push((vec![ang.cos(), ang.sin()], rng.random_range(0.5..2.0)));
            }
            let poly = Polytope::from_halfspaces(rows.clone());
            let Ok(poly) = poly else { continue };
            let h = DMatrix::from_fn(k, 2, |r, c| rows[r].0[c]);
            let hc = DVector::from_fn(k, |r, _| rows[r].1);
            let u = InputConstraint::new(h, hc).unwrap();
            for s in 0..2 {
                let want = poly
                    .vertices()
                    .iter()
                    .map(|v| v[s].abs())
                    .fold(0.0, f64::max);
                assert_abs_diff_eq!(u.axis_extent(s), want, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn unbounded_input_rejected() {
        // Single halfspace u <= 1 leaves -u unbounded.
        let h = DMatrix::from_row_slice(1, 1, &[1.0]);
        let hc = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            InputConstraint::new(h, hc),
            Err(SystemError::UnboundedInputSet(_))
        ));
    }

    #[test]
    fn linearize_pendulum() {
        let (a, b) = linearize(&Pendulum);
        let want_a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 4.9, -0.3]);
        assert!((a - want_a).norm() < 1e-12);
        assert_abs_diff_eq!(b[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[(1, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn finite_difference_jacobian_matches_analytic() {
        // Cubic vector field with a known Jacobian, exposed through a model
        // that hides its analytic derivative.
        struct Cubic;
        impl ControlAffineModel for Cubic {
            fn state_dim(&self) -> usize {
                2
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0].powi(3) - x[1], 2.0 * x[0] + x[1].powi(3)])
            }
            fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
            }
            fn hess_f_bound(&self, bx: &Aabb) -> f64 {
                6.0 * bx.max_abs(0).max(bx.max_abs(1))
            }
            fn hess_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
                0.0
            }
            fn grad_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
                0.0
            }
        }
        let (a, _) = linearize(&Cubic);
        let want = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 2.0, 0.0]);
        assert!((a - want).norm() < 1e-6);
    }

    #[test]
    fn zero_drift_identity_gain() {
        struct Integrators;
        impl ControlAffineModel for Integrators {
            fn state_dim(&self) -> usize {
                2
            }
            fn input_dim(&self) -> usize {
                2
            }
            fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(2)
            }
            fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::identity(2, 2)
            }
            fn hess_f_bound(&self, _bx: &Aabb) -> f64 {
                0.0
            }
            fn hess_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
                0.0
            }
            fn grad_g_bound(&self, _bx: &Aabb, _s: usize) -> f64 {
                0.0
            }
        }
        let (a, b) = linearize(&Integrators);
        assert!(a.norm() < 1e-9);
        assert!((b - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn bound_soundness_by_sampling() {
        // Dense sampling of the true derivatives never exceeds the box
        // oracles on a mesh over the pendulum's working range.
        let x = Polytope::bounding_box_poly(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let t = Triangulation::build(&x, 0.5).unwrap();
        let u = unit_input();
        for i in 0..t.num_simplexes() {
            let s = t.simplex(i);
            let b = simplex_bounds(&Pendulum, &t, i, &u);
            let bg = simplex_bounds(&StateDependentGain, &t, i, &u);
            for wa in 0..10 {
                for wb in 0..(10 - wa) {
                    let w = [
                        1.0 - (wa as f64 + wb as f64) / 10.0,
                        wa as f64 / 10.0,
                        wb as f64 / 10.0,
                    ];
                    let mut p = DVector::zeros(2);
                    for (j, &vid) in s.vertex_ids.iter().enumerate() {
                        p += t.vertex(vid) * w[j];
                    }
                    // Pendulum drift Hessian: |4.9 sin x1| <= mu.
                    assert!(4.9 * p[0].sin().abs() <= b.mu + 1e-12);
                    // Gain plant gradient: |0.5 x1| <= eta / 2.
                    assert!(0.5 * p[0].abs() <= bg.eta / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bound_monotonicity_in_box_inclusion() {
        let small = Aabb {
            lo: DVector::from_vec(vec![-0.2, -0.2]),
            hi: DVector::from_vec(vec![0.3, 0.3]),
        };
        let large = Aabb {
            lo: DVector::from_vec(vec![-0.5, -0.5]),
            hi: DVector::from_vec(vec![0.8, 0.8]),
        };
        assert!(Pendulum.hess_f_bound(&small) <= Pendulum.hess_f_bound(&large));
        assert!(
            StateDependentGain.grad_g_bound(&small, 0)
                <= StateDependentGain.grad_g_bound(&large, 0)
        );
    }

    #[test]
    fn clamp_projects_into_the_set() {
        let u = unit_input();
        let inside = DVector::from_vec(vec![3.0]);
        assert_eq!(u.clamp(&inside)[0], 3.0);
        let outside = DVector::from_vec(vec![7.5]);
        let clamped = u.clamp(&outside);
        assert_abs_diff_eq!(clamped[0], 5.0, epsilon = 1e-12);
        assert!(u.contains(&clamped, 0.0));
    }
}
