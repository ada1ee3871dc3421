//! The synthesis engine: feasible initializations, the Dini-derivative
//! constraint algebra, the convex-overbounding SDP iteration, the two-phase
//! search loop, the negative-rate fallback, and the refinement loop.

pub mod algorithm;
pub mod riccati;
pub mod sdp;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpa::{CpaError, CpaScalarField, CpaVectorField, SublevelSet};
use crate::geometry::Triangulation;
use crate::system::{simplex_bounds, ControlAffineModel, InputConstraint, SimplexBounds};

pub use algorithm::{
    algorithm1, algorithm2, corollary1_check, Algorithm1Outcome, Algorithm2Outcome,
    AlgorithmOptions, InitSpec, IterationRecord, SynthesisFailure,
};
pub use riccati::{solve_care, RiccatiError};
pub use sdp::{assemble_step, margin_step, step, StepOutcome, StepVars};

/// Strict positivity floor for `b1` (the standard SDP relaxation of the
/// strict inequality, held constant across iterations).
pub const EPS_POS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Cpa(#[from] CpaError),
    #[error("triangulation has no origin vertex")]
    NoOrigin,
}

/// Immutable per-triangulation data shared by every constraint evaluation:
/// the plant samples at vertices and the Taylor-remainder coefficients per
/// simplex.
pub struct SynthesisContext<'a> {
    pub tri: &'a Triangulation,
    pub model: &'a dyn ControlAffineModel,
    pub u_set: &'a InputConstraint,
    pub bounds: Vec<SimplexBounds>,
    pub f_at: Vec<DVector<f64>>,
    pub g_at: Vec<DMatrix<f64>>,
    pub norms: Vec<f64>,
    pub origin: usize,
}

impl<'a> SynthesisContext<'a> {
    pub fn new(
        tri: &'a Triangulation,
        model: &'a dyn ControlAffineModel,
        u_set: &'a InputConstraint,
    ) -> Result<Self, SynthesisError> {
        let origin = tri.origin_vertex().ok_or(SynthesisError::NoOrigin)?;
        let bounds = (0..tri.num_simplexes())
            .map(|i| simplex_bounds(model, tri, i, u_set))
            .collect();
        let f_at = tri.vertices().iter().map(|x| model.drift(x)).collect();
        let g_at = tri.vertices().iter().map(|x| model.input_matrix(x)).collect();
        let norms = tri.vertices().iter().map(|x| x.norm()).collect();
        Ok(Self {
            tri,
            model,
            u_set,
            bounds,
            f_at,
            g_at,
            norms,
            origin,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.tri.num_vertices()
    }

    pub fn num_simplexes(&self) -> usize {
        self.tri.num_simplexes()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
}

/// The full unknown vector advanced by each SDP iteration.
#[derive(Debug, Clone)]
pub struct DecisionPoint {
    /// Lyapunov vertex values.
    pub v: Vec<f64>,
    /// Per-simplex gradient bounds `l_i >= |grad V_i|`.
    pub l: Vec<DVector<f64>>,
    /// Controller vertex values.
    pub u: Vec<DVector<f64>>,
    /// Per-simplex controller gradient bounds `z_i >= |grad u_i^(s)|`.
    pub z: Vec<f64>,
    /// Fixed norm exponent.
    pub a_exp: f64,
    pub b1: f64,
    pub b2: f64,
}

/// Per-simplex gradients of `V` and `u` derived from a decision point.
pub struct PointGradients {
    pub v: Vec<DVector<f64>>,
    /// `n x m` per simplex; column `s` is the gradient of `u^(s)`.
    pub u: Vec<DMatrix<f64>>,
}

impl DecisionPoint {
    pub fn gradients(&self, ctx: &SynthesisContext) -> PointGradients {
        let n = ctx.tri.dim();
        let m = ctx.input_dim();
        let mut gv = Vec::with_capacity(ctx.num_simplexes());
        let mut gu = Vec::with_capacity(ctx.num_simplexes());
        for s in ctx.tri.simplexes() {
            let anchor = s.vertex_ids[0];
            let vbar = DVector::from_fn(n, |j, _| self.v[s.vertex_ids[j + 1]] - self.v[anchor]);
            gv.push(&s.shape_inv * vbar);
            let mut grad_u = DMatrix::zeros(n, m);
            for ch in 0..m {
                let ubar = DVector::from_fn(n, |j, _| {
                    self.u[s.vertex_ids[j + 1]][ch] - self.u[anchor][ch]
                });
                grad_u.set_column(ch, &(&s.shape_inv * ubar));
            }
            gu.push(grad_u);
        }
        PointGradients { v: gv, u: gu }
    }

    pub fn v_field(&self, ctx: &SynthesisContext) -> Result<CpaScalarField, CpaError> {
        CpaScalarField::interpolate(ctx.tri, &self.v)
    }

    pub fn u_field(&self, ctx: &SynthesisContext) -> Result<CpaVectorField, CpaError> {
        let m = ctx.input_dim();
        let per_channel: Vec<Vec<f64>> = (0..m)
            .map(|s| self.u.iter().map(|u| u[s]).collect())
            .collect();
        CpaVectorField::interpolate(ctx.tri, &per_channel)
    }
}

/// Upper bound on the Dini derivative of `V` at vertex `j` of simplex `i`:
/// `f'gradV + u'G'gradV + c (mu 1'l + eta z 1'l)`. Exactly zero at the
/// origin vertex.
pub fn dini_upper(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    grads: &PointGradients,
    i: usize,
    j: usize,
) -> f64 {
    let ids = &ctx.tri.simplex(i).vertex_ids;
    let vid = ids[j];
    let b = &ctx.bounds[i];
    let grad_v = &grads.v[i];
    let ones_l = y.l[i].sum();
    let phi = ctx.f_at[vid].dot(grad_v) + b.c[j] * b.mu * ones_l;
    let control = (ctx.g_at[vid].transpose() * grad_v).dot(&y.u[vid]);
    phi + control + b.c[j] * b.eta * y.z[i] * ones_l
}

/// Largest `b2` satisfying the decrease constraint in every simplex:
/// `min over (i, j), x_{i,j} != 0 of -D+_{i,j}V / V_{x_{i,j}}`.
pub fn max_feasible_b2(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    grads: &PointGradients,
) -> f64 {
    max_feasible_b2_in(ctx, y, grads, 0..ctx.num_simplexes())
}

pub fn max_feasible_b2_in(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    grads: &PointGradients,
    simplexes: impl IntoIterator<Item = usize>,
) -> f64 {
    let mut best = f64::INFINITY;
    for i in simplexes {
        let ids = &ctx.tri.simplex(i).vertex_ids;
        for j in 0..ids.len() {
            if ids[j] == ctx.origin {
                continue;
            }
            let d = dini_upper(ctx, y, grads, i, j);
            let v = y.v[ids[j]];
            debug_assert!(v > 0.0, "V must be positive off the origin");
            best = best.min(-d / v);
        }
    }
    best
}

/// Feasible start with `V = b1 ||x||^a` and an admissible controller
/// (zeros, or uniform rejection samples from the input polytope).
pub fn init_simple(
    ctx: &SynthesisContext,
    a_exp: f64,
    b1: f64,
    seed: Option<u64>,
) -> DecisionPoint {
    assert!(a_exp > 0.0 && b1 > 0.0);
    let m = ctx.input_dim();
    let v: Vec<f64> = ctx.norms.iter().map(|&r| b1 * r.powf(a_exp)).collect();
    let mut u = vec![DVector::zeros(m); ctx.num_vertices()];
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extents: Vec<f64> = (0..m).map(|s| ctx.u_set.axis_extent(s)).collect();
        for (vid, slot) in u.iter_mut().enumerate() {
            if vid == ctx.origin {
                continue;
            }
            // Rejection sampling from the extents box.
            for _ in 0..64 {
                let cand = DVector::from_fn(m, |s, _| rng.random_range(-extents[s]..=extents[s]));
                if ctx.u_set.contains(&cand, 0.0) {
                    *slot = cand;
                    break;
                }
            }
        }
    }
    finish_init(ctx, v, u, a_exp, b1)
}

/// LQR start: CARE solution sampled at vertices, gain scaled into the input
/// polytope, `a = 2`, `b1 = lambda_min(P)`.
pub fn init_lqr(
    ctx: &SynthesisContext,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DecisionPoint, SynthesisError> {
    let (a_mat, b_mat) = crate::system::linearize(ctx.model);
    let p = solve_care(&a_mat, &b_mat, q, r)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| RiccatiError::NotStabilizing("R is singular".into()))?;
    let k = r_inv * b_mat.transpose() * &p;

    let v: Vec<f64> = ctx
        .tri
        .vertices()
        .iter()
        .map(|x| (x.transpose() * &p * x)[(0, 0)])
        .collect();
    let b1 = p
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);

    // Scale the gain uniformly until every vertex input is admissible.
    let h = ctx.u_set.matrix();
    let h_c = ctx.u_set.offsets();
    let mut kappa = 1.0_f64;
    for x in ctx.tri.vertices() {
        let u_lqr = -(&k * x);
        let lhs = h * &u_lqr;
        for row in 0..lhs.len() {
            if lhs[row] > h_c[row] {
                kappa = kappa.max(lhs[row] / h_c[row]);
            }
        }
    }
    let u: Vec<DVector<f64>> = ctx
        .tri
        .vertices()
        .iter()
        .map(|x| -(&k * x) / kappa)
        .collect();
    Ok(finish_init(ctx, v, u, 2.0, b1))
}

fn finish_init(
    ctx: &SynthesisContext,
    v: Vec<f64>,
    mut u: Vec<DVector<f64>>,
    a_exp: f64,
    b1: f64,
) -> DecisionPoint {
    u[ctx.origin] = DVector::zeros(ctx.input_dim());
    let mut y = DecisionPoint {
        v,
        l: Vec::new(),
        u,
        z: Vec::new(),
        a_exp,
        b1,
        b2: 0.0,
    };
    y.v[ctx.origin] = 0.0;
    let grads = y.gradients(ctx);
    y.l = grads.v.iter().map(|g| g.abs()).collect();
    y.z = (0..ctx.num_simplexes())
        .map(|i| grads.u[i].abs().max())
        .collect();
    y.b2 = max_feasible_b2(ctx, &y, &grads);
    y
}

/// Restores exact feasibility of (the checkable part of) the constraint set
/// after a solver step: inputs clamped into the polytope, gradient bounds
/// refreshed upward, `b1` tightened to the largest valid value.
///
/// `b2` is NOT touched: the iteration carries the solver's rate forward, so
/// the gap between the carried rate and the largest feasible rate (opened by
/// the convex overbounding) stays available as slack for the next step.
/// Eating that gap after every step starves the binding decrease rows and
/// stalls the search.
pub fn repair(ctx: &SynthesisContext, y: &mut DecisionPoint) {
    y.v[ctx.origin] = 0.0;
    for (vid, u) in y.u.iter_mut().enumerate() {
        if vid == ctx.origin {
            *u = DVector::zeros(ctx.input_dim());
        } else {
            *u = ctx.u_set.clamp(u);
        }
    }
    let grads = y.gradients(ctx);
    for i in 0..ctx.num_simplexes() {
        let gabs = grads.v[i].abs();
        for p in 0..gabs.len() {
            y.l[i][p] = y.l[i][p].max(gabs[p]);
        }
        let zmin = grads.u[i].abs().max();
        if ctx.bounds[i].eta == 0.0 {
            // z never enters a constraint here; keep it definitionally tight.
            y.z[i] = zmin;
        } else {
            y.z[i] = y.z[i].max(zmin);
        }
    }
    let b1_max = (0..ctx.num_vertices())
        .filter(|&vid| vid != ctx.origin)
        .map(|vid| y.v[vid] / ctx.norms[vid].powf(y.a_exp))
        .fold(f64::INFINITY, f64::min);
    y.b1 = b1_max;
}

/// Maximum violations of each feasibility condition, recomputed from raw
/// data with no solver state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `|V_0|`.
    pub origin_v: f64,
    /// `max(0, eps_pos - b1)` (strict positivity floor).
    pub b1_floor: f64,
    /// Lower-bound condition `b1 ||x||^a <= V_x`.
    pub v_lower: f64,
    /// Gradient bound `|grad V_i| <= l_i`.
    pub grad_v_bound: f64,
    /// `|u_0|`.
    pub origin_u: f64,
    /// Input admissibility `H u_x <= h_c`.
    pub input_polytope: f64,
    /// Controller gradient bound `|grad u_i^(s)| <= z_i`.
    pub grad_u_bound: f64,
    /// Decrease condition `D+V_{i,j} <= -b2 V_{x_{i,j}}`.
    pub decrease: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        [
            self.origin_v,
            self.b1_floor,
            self.v_lower,
            self.grad_v_bound,
            self.origin_u,
            self.input_polytope,
            self.grad_u_bound,
            self.decrease,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Residuals of the full constraint set over a simplex subset (the whole
/// mesh for the main path).
pub fn constraint_residuals(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    domain: &[usize],
) -> ResidualReport {
    let grads = y.gradients(ctx);
    let mut rep = ResidualReport {
        origin_v: y.v[ctx.origin].abs(),
        b1_floor: (EPS_POS - y.b1).max(0.0),
        origin_u: y.u[ctx.origin].amax(),
        ..Default::default()
    };
    // Vertex set of the domain.
    let mut in_domain = vec![false; ctx.num_vertices()];
    for &i in domain {
        for &vid in &ctx.tri.simplex(i).vertex_ids {
            in_domain[vid] = true;
        }
    }
    let h = ctx.u_set.matrix();
    let h_c = ctx.u_set.offsets();
    for vid in 0..ctx.num_vertices() {
        if !in_domain[vid] || vid == ctx.origin {
            continue;
        }
        rep.v_lower = rep
            .v_lower
            .max(y.b1 * ctx.norms[vid].powf(y.a_exp) - y.v[vid]);
        let lhs = h * &y.u[vid];
        for row in 0..lhs.len() {
            rep.input_polytope = rep.input_polytope.max(lhs[row] - h_c[row]);
        }
    }
    for &i in domain {
        let gv = grads.v[i].abs();
        for p in 0..gv.len() {
            rep.grad_v_bound = rep.grad_v_bound.max(gv[p] - y.l[i][p]);
        }
        if ctx.bounds[i].eta != 0.0 {
            rep.grad_u_bound = rep.grad_u_bound.max(grads.u[i].abs().max() - y.z[i]);
        }
        let ids = &ctx.tri.simplex(i).vertex_ids;
        for j in 0..ids.len() {
            if ids[j] == ctx.origin {
                continue;
            }
            let d = dini_upper(ctx, y, &grads, i, j);
            rep.decrease = rep.decrease.max(d + y.b2 * y.v[ids[j]]);
        }
    }
    rep
}

/// Synthesis provenance recorded in the certificate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Mesh scales visited: `(rho, coverage, attempted)`.
    pub rho_history: Vec<(f64, f64, bool)>,
    pub attempts: usize,
    pub phase1_iterations: usize,
    pub phase2_iterations: usize,
    /// Set when the certificate came from the negative-rate fallback.
    pub fallback: bool,
    pub solver_tolerance: f64,
    pub solver_version: String,
}

/// The synthesized controller, Lyapunov function and certified region with
/// every quantity needed for independent re-verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub b1: f64,
    pub b2: f64,
    pub a_exp: f64,
    /// Sublevel radius of the invariant region.
    pub r: f64,
    pub region: SublevelSet,
    /// Simplexes on which the decrease condition is certified.
    pub domain: Vec<usize>,
    /// Lyapunov vertex values.
    pub v_values: Vec<f64>,
    /// Controller vertex values, one inner vector per input channel.
    pub u_values: Vec<Vec<f64>>,
    /// Per-simplex Lyapunov gradient bounds.
    pub l_bounds: Vec<Vec<f64>>,
    /// Per-simplex controller gradient bounds.
    pub z_bounds: Vec<f64>,
    pub residuals: ResidualReport,
    pub triangulation_fingerprint: String,
    pub provenance: Provenance,
}

impl Certificate {
    pub fn decision_point(&self) -> DecisionPoint {
        let m = self.u_values.len();
        let nv = self.v_values.len();
        DecisionPoint {
            v: self.v_values.clone(),
            l: self
                .l_bounds
                .iter()
                .map(|l| DVector::from_vec(l.clone()))
                .collect(),
            u: (0..nv)
                .map(|vid| DVector::from_fn(m, |s, _| self.u_values[s][vid]))
                .collect(),
            z: self.z_bounds.clone(),
            a_exp: self.a_exp,
            b1: self.b1,
            b2: self.b2,
        }
    }

    pub fn v_field(&self, tri: &Triangulation) -> Result<CpaScalarField, CpaError> {
        CpaScalarField::interpolate(tri, &self.v_values)
    }

    pub fn u_field(&self, tri: &Triangulation) -> Result<CpaVectorField, CpaError> {
        CpaVectorField::interpolate(tri, &self.u_values)
    }

    /// State-norm bound prefactor `(r / b1)^(1/a)`.
    pub fn norm_bound_radius(&self) -> f64 {
        (self.r / self.b1).powf(1.0 / self.a_exp)
    }

    /// Decay rate `b2 / a` of the state-norm bound.
    pub fn decay_rate(&self) -> f64 {
        self.b2 / self.a_exp
    }
}

/// Builds a certificate from a feasible decision point on a simplex domain.
pub fn certify(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    domain: Vec<usize>,
    shrink: f64,
    provenance: Provenance,
) -> Result<Certificate, SynthesisError> {
    let v_field = y.v_field(ctx)?;
    let region = v_field.sublevel_set_within(ctx.tri, &domain, shrink)?;
    let residuals = constraint_residuals(ctx, y, &domain);
    let m = ctx.input_dim();
    Ok(Certificate {
        b1: y.b1,
        b2: y.b2,
        a_exp: y.a_exp,
        r: region.radius,
        region,
        domain,
        v_values: y.v.clone(),
        u_values: (0..m)
            .map(|s| y.u.iter().map(|u| u[s]).collect())
            .collect(),
        l_bounds: y.l.iter().map(|l| l.as_slice().to_vec()).collect(),
        z_bounds: y.z.clone(),
        residuals,
        triangulation_fingerprint: ctx.tri.fingerprint(),
        provenance,
    })
}

/// Report of the independent certificate re-verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub residuals: ResidualReport,
    pub residuals_pass: bool,
    /// Dense-sampling results.
    pub samples: usize,
    pub samples_skipped: usize,
    pub v_lower_violations: usize,
    pub dini_violations: usize,
    pub worst_dini_slack: f64,
    pub sampling_pass: bool,
    pub fingerprint_match: bool,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.residuals_pass && self.sampling_pass && self.fingerprint_match
    }
}

/// Residual tolerance of the certificate re-verification pass.
pub const VERIFY_RESIDUAL_TOL: f64 = 1e-6;
/// Slack of the sampled Dini-quotient check.
pub const DINI_SAMPLING_SLACK: f64 = 1e-4;
/// Step of the sampled Dini quotient.
pub const DINI_SAMPLING_STEP: f64 = 1e-5;

/// Independently re-verifies a certificate: recomputes every constraint
/// residual from raw data and dense-samples the certified region for the
/// Lyapunov lower bound and the decrease of `V` along the CPA closed loop.
pub fn verify_certificate(
    cert: &Certificate,
    model: &dyn ControlAffineModel,
    u_set: &InputConstraint,
    tri: &Triangulation,
    samples: usize,
) -> Result<VerificationReport, SynthesisError> {
    let ctx = SynthesisContext::new(tri, model, u_set)?;
    let y = cert.decision_point();
    let residuals = constraint_residuals(&ctx, &y, &cert.domain);
    let residuals_pass = residuals.max() <= VERIFY_RESIDUAL_TOL;
    let fingerprint_match = cert.triangulation_fingerprint == tri.fingerprint();

    let v_field = cert.v_field(tri)?;
    let u_field = cert.u_field(tri)?;
    let h = DINI_SAMPLING_STEP;

    // Volume-weighted sampling over the certified simplexes.
    let weights: Vec<f64> = cert
        .domain
        .iter()
        .map(|&i| tri.simplex(i).volume())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let n = tri.dim();
    let mut skipped = 0usize;
    let mut v_lower_violations = 0usize;
    let mut dini_violations = 0usize;
    let mut worst_slack = f64::NEG_INFINITY;
    let mut in_domain = vec![false; tri.num_simplexes()];
    for &i in &cert.domain {
        in_domain[i] = true;
    }

    for _ in 0..samples {
        // Pick a simplex by volume, then a Dirichlet barycentric point.
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = cert.domain[cert.domain.len() - 1];
        for (k, &i) in cert.domain.iter().enumerate() {
            if pick < weights[k] {
                chosen = i;
                break;
            }
            pick -= weights[k];
        }
        let mut alpha: Vec<f64> = (0..=n)
            .map(|_| -f64::ln(rng.random_range(1e-12..1.0)))
            .collect();
        let s: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= s);
        let ids = &tri.simplex(chosen).vertex_ids;
        let mut x = DVector::zeros(n);
        for (j, &vid) in ids.iter().enumerate() {
            x += tri.vertex(vid) * alpha[j];
        }

        let v_here = match v_field.evaluate(tri, &x) {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if v_here < cert.b1 * x.norm().powf(cert.a_exp) - 1e-9 {
            v_lower_violations += 1;
        }

        // CPA closed loop g(x) = f(x) + G(x) u(x).
        let u_here = match u_field.evaluate(tri, &x) {
            Ok(u) => u,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let g = model.drift(&x) + model.input_matrix(&x) * u_here;
        let x_next = &x + &g * h;
        // The forward point must stay inside the certified simplexes.
        let inside = match tri.locate(&x_next) {
            Ok(hits) => hits.iter().any(|(i, _)| in_domain[*i]),
            Err(_) => false,
        };
        if !inside {
            skipped += 1;
            continue;
        }
        let v_next = match v_field.evaluate(tri, &x_next) {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let quotient = (v_next - v_here) / h;
        let slack = quotient + cert.b2 * v_here;
        worst_slack = worst_slack.max(slack);
        if slack > DINI_SAMPLING_SLACK {
            dini_violations += 1;
        }
    }

    Ok(VerificationReport {
        residuals,
        residuals_pass,
        samples,
        samples_skipped: skipped,
        v_lower_violations,
        dini_violations,
        worst_dini_slack: worst_slack,
        sampling_pass: v_lower_violations == 0 && dini_violations == 0,
        fingerprint_match,
    })
}
