//! Online controllers and the closed-loop simulator.
//!
//! Two controllers run against a certificate: direct CPA evaluation of the
//! synthesized vertex inputs, and a min-norm QP that picks the smallest
//! admissible input satisfying the Lyapunov decrease constraint of every
//! simplex containing the state. The simulator integrates with classical
//! RK4, re-evaluating the controller at each stage state, and annotates
//! every sample with constraint and decay-bound flags recomputed from raw
//! data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpa::{CpaError, CpaScalarField, CpaVectorField};
use crate::geometry::{GeometryError, Polytope, Triangulation};
use crate::optim::{solve_qp, SolveStatus, SolverOptions};
use crate::synthesis::Certificate;
use crate::system::{ControlAffineModel, InputConstraint};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("state left the triangulated domain")]
    OutOfDomain,
    #[error("decrease QP infeasible at state {state:?}; the state is outside the invariant region or the certificate is corrupted")]
    InfeasibleAtState { state: Vec<f64> },
    #[error("initial state is not in the interior of the invariant region")]
    StartOutsideRegion,
    #[error("controller solve failed: {0}")]
    SolverBreakdown(String),
}

impl From<GeometryError> for RuntimeError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::OutOfDomain => RuntimeError::OutOfDomain,
            other => RuntimeError::SolverBreakdown(other.to_string()),
        }
    }
}

impl From<CpaError> for RuntimeError {
    fn from(e: CpaError) -> Self {
        match e {
            CpaError::Geometry(g) => g.into(),
            other => RuntimeError::SolverBreakdown(other.to_string()),
        }
    }
}

/// A state-feedback law evaluated along the closed loop.
pub trait Controller: Sync {
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>, RuntimeError>;
}

impl<F> Controller for F
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, RuntimeError> + Sync,
{
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>, RuntimeError> {
        self(x)
    }
}

/// Direct evaluation of the synthesized CPA controller. Vertex inputs are
/// admissible and the input polytope is convex, so interpolated values stay
/// admissible; outputs are clamped to strip the last floating-point ulps.
pub struct CpaController<'a> {
    pub tri: &'a Triangulation,
    pub field: &'a CpaVectorField,
    pub u_set: &'a InputConstraint,
}

impl Controller for CpaController<'_> {
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>, RuntimeError> {
        let u = self.field.evaluate(self.tri, x)?;
        Ok(clamp_exact(self.u_set, u))
    }
}

/// Min-norm controller: `argmin u' H u + h' u` over the input polytope and
/// the decrease constraint `grad V_i . (f(x) + G(x) u) <= -b2 V(x)` for
/// every simplex containing `x`.
pub struct QpController<'a> {
    pub tri: &'a Triangulation,
    pub v_field: &'a CpaScalarField,
    pub b2: f64,
    pub model: &'a dyn ControlAffineModel,
    pub u_set: &'a InputConstraint,
    /// Quadratic weight, positive definite. Identity for pure min-norm.
    pub h_mat: DMatrix<f64>,
    /// Linear weight, zero for pure min-norm.
    pub h_vec: DVector<f64>,
    pub solver: SolverOptions,
}

impl<'a> QpController<'a> {
    pub fn min_norm(
        tri: &'a Triangulation,
        v_field: &'a CpaScalarField,
        b2: f64,
        model: &'a dyn ControlAffineModel,
        u_set: &'a InputConstraint,
    ) -> Self {
        let m = model.input_dim();
        Self {
            tri,
            v_field,
            b2,
            model,
            u_set,
            h_mat: DMatrix::identity(m, m),
            h_vec: DVector::zeros(m),
            solver: SolverOptions::default(),
        }
    }
}

impl Controller for QpController<'_> {
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>, RuntimeError> {
        let m = self.model.input_dim();
        let hits = self.tri.locate(x)?;
        let v_here = self.v_field.evaluate(self.tri, x)?;
        let f_here = self.model.drift(x);
        let g_here = self.model.input_matrix(x);

        let h = self.u_set.matrix();
        let h_c = self.u_set.offsets();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(h.nrows() + hits.len());
        let mut rhs: Vec<f64> = Vec::with_capacity(h.nrows() + hits.len());
        for r in 0..h.nrows() {
            rows.push((0..m).map(|s| h[(r, s)]).collect());
            rhs.push(h_c[r]);
        }
        for (i, _) in &hits {
            let grad = self.v_field.gradient(*i);
            let coeff = g_here.transpose() * grad;
            rows.push(coeff.as_slice().to_vec());
            rhs.push(-self.b2 * v_here - grad.dot(&f_here));
        }

        let result = solve_qp(
            &self.h_mat,
            self.h_vec.as_slice(),
            &rows,
            &rhs,
            self.solver,
        );
        match result.status {
            SolveStatus::Optimal => {
                Ok(clamp_exact(self.u_set, DVector::from_vec(result.primal)))
            }
            SolveStatus::Infeasible => Err(RuntimeError::InfeasibleAtState {
                state: x.as_slice().to_vec(),
            }),
            other => Err(RuntimeError::SolverBreakdown(format!("{other:?}"))),
        }
    }
}

/// Clamp with a deterministic nudge so the polytope test passes with zero
/// tolerance even after rounding.
fn clamp_exact(u_set: &InputConstraint, u: DVector<f64>) -> DVector<f64> {
    let mut u = u_set.clamp(&u);
    for _ in 0..4 {
        if u_set.contains(&u, 0.0) {
            break;
        }
        u *= 1.0 - 1e-15;
    }
    u
}

/// A sampled closed-loop run with per-sample constraint flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// `x(t_k)` in the certified sublevel region.
    pub in_region: Vec<bool>,
    /// `x(t_k)` in the state polytope.
    pub in_state_set: Vec<bool>,
    /// `H u(t_k) <= h_c`, zero tolerance.
    pub input_admissible: Vec<bool>,
    /// `||x(t_k)||` within the certified exponential envelope (1e-6 slack).
    pub bound_satisfied: Vec<bool>,
    /// False when the run aborted by leaving the mesh.
    pub complete: bool,
}

/// Raw RK4 closed-loop integration; the controller is re-evaluated at each
/// internal stage state. Returns the sample path and whether the horizon
/// was completed.
pub fn integrate_rk4(
    model: &dyn ControlAffineModel,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    dt: f64,
    steps: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, bool) {
    assert!(dt > 0.0);
    let closed = |x: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>), RuntimeError> {
        let u = controller.control(x)?;
        let dx = model.drift(x) + model.input_matrix(x) * &u;
        Ok((dx, u))
    };
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for _ in 0..steps {
        let Ok((k1, u_here)) = closed(&x) else {
            return (states, inputs, false);
        };
        states.push(x.clone());
        inputs.push(u_here);
        let Ok((k2, _)) = closed(&(&x + &k1 * (dt / 2.0))) else {
            return (states, inputs, false);
        };
        let Ok((k3, _)) = closed(&(&x + &k2 * (dt / 2.0))) else {
            return (states, inputs, false);
        };
        let Ok((k4, _)) = closed(&(&x + &k3 * dt)) else {
            return (states, inputs, false);
        };
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    match closed(&x) {
        Ok((_, u_final)) => {
            states.push(x);
            inputs.push(u_final);
            (states, inputs, true)
        }
        Err(_) => (states, inputs, false),
    }
}

/// Simulates a controller against a certificate and annotates every sample.
/// The initial state must lie strictly inside the certified region.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &dyn ControlAffineModel,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    dt: f64,
    t_final: f64,
    cert: &Certificate,
    tri: &Triangulation,
    x_set: &Polytope,
    u_set: &InputConstraint,
) -> Result<Trajectory, RuntimeError> {
    let v_field = cert.v_field(tri)?;
    if !cert.region.contains(tri, &v_field, x0, true) {
        return Err(RuntimeError::StartOutsideRegion);
    }
    let steps = (t_final / dt).round() as usize;
    let (states, inputs, complete) = integrate_rk4(model, controller, x0, dt, steps);

    let radius = cert.norm_bound_radius();
    let rate = cert.decay_rate();
    let mut traj = Trajectory {
        dt,
        times: (0..states.len()).map(|k| k as f64 * dt).collect(),
        states: states.iter().map(|x| x.as_slice().to_vec()).collect(),
        inputs: inputs.iter().map(|u| u.as_slice().to_vec()).collect(),
        in_region: Vec::new(),
        in_state_set: Vec::new(),
        input_admissible: Vec::new(),
        bound_satisfied: Vec::new(),
        complete,
    };
    for (k, x) in states.iter().enumerate() {
        let t = traj.times[k];
        traj.in_region
            .push(cert.region.contains(tri, &v_field, x, false));
        traj.in_state_set.push(x_set.contains(x, 0.0));
        traj.input_admissible.push(u_set.contains(&inputs[k], 0.0));
        traj.bound_satisfied
            .push(x.norm() <= radius * (-rate * t).exp() + 1e-6);
    }
    Ok(traj)
}

/// Earliest time after which every component of every later sample stays in
/// `[-band, band]`; `+inf` when the trajectory never settles.
pub fn settling_time(traj: &Trajectory, band: f64) -> f64 {
    assert!(band > 0.0);
    let mut last_violation: Option<usize> = None;
    for (k, x) in traj.states.iter().enumerate() {
        if x.iter().any(|c| c.abs() > band) {
            last_violation = Some(k);
        }
    }
    match last_violation {
        None => 0.0,
        Some(k) if k + 1 < traj.times.len() => traj.times[k + 1],
        Some(_) => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polytope;
    use crate::synthesis::sdp::CostSpec;
    use crate::synthesis::{algorithm1, Algorithm1Outcome, AlgorithmOptions, SynthesisContext};
    use approx::assert_abs_diff_eq;

    struct Scalar;
    impl ControlAffineModel for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![-x[0]])
        }
        fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
        fn hess_f_bound(&self, _bx: &crate::system::Aabb) -> f64 {
            0.0
        }
        fn hess_g_bound(&self, _bx: &crate::system::Aabb, _s: usize) -> f64 {
            0.0
        }
        fn grad_g_bound(&self, _bx: &crate::system::Aabb, _s: usize) -> f64 {
            0.0
        }
        fn jacobian_f(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_element(1, 1, -1.0))
        }
    }

    fn zero_controller(_x: &DVector<f64>) -> Result<DVector<f64>, RuntimeError> {
        Ok(DVector::zeros(1))
    }

    #[test]
    fn rk4_single_step_accuracy() {
        // xdot = -x from 1: one 0.01 step matches exp(-0.01) to 1e-10.
        let ctrl = zero_controller as fn(&DVector<f64>) -> Result<DVector<f64>, RuntimeError>;
        let (states, _, complete) =
            integrate_rk4(&Scalar, &ctrl, &DVector::from_vec(vec![1.0]), 0.01, 1);
        assert!(complete);
        assert_abs_diff_eq!(states[1][0], (-0.01_f64).exp(), epsilon = 1e-10);
        assert_abs_diff_eq!(states[1][0], 0.990049834, epsilon = 1e-9);
    }

    fn certified_scalar() -> (
        Polytope,
        InputConstraint,
        Triangulation,
        crate::synthesis::Certificate,
    ) {
        let x = Polytope::interval(-0.5, 0.5).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let tri = Triangulation::build(&x, 0.25).unwrap();
        let model = Scalar;
        let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
        let y0 = crate::synthesis::init_lqr(
            &ctx,
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let opts = AlgorithmOptions {
            b2_target: 0.5,
            ..Default::default()
        };
        let cert = match algorithm1(&ctx, y0, &CostSpec::default_performance(), &opts).unwrap() {
            Algorithm1Outcome::Success { certificate, .. } => certificate,
            Algorithm1Outcome::Failure { .. } => panic!("scalar plant must certify"),
        };
        (x, u_set, tri, cert)
    }

    #[test]
    fn cpa_controller_matches_vertices_and_midpoints() {
        let (_, u_set, tri, cert) = certified_scalar();
        let field = cert.u_field(&tri).unwrap();
        let ctrl = CpaController {
            tri: &tri,
            field: &field,
            u_set: &u_set,
        };
        for (vid, x) in tri.vertices().iter().enumerate() {
            let u = ctrl.control(x).unwrap();
            assert_abs_diff_eq!(u[0], cert.u_values[0][vid], epsilon = 1e-12);
        }
        // Edge midpoint: mean of the endpoint inputs.
        let ids: Vec<usize> = tri.simplex(0).vertex_ids.clone();
        let mid = (tri.vertex(ids[0]) + tri.vertex(ids[1])) / 2.0;
        let u = ctrl.control(&mid).unwrap();
        let want = (cert.u_values[0][ids[0]] + cert.u_values[0][ids[1]]) / 2.0;
        assert_abs_diff_eq!(u[0], want, epsilon = 1e-12);
        // Interior points stay admissible with zero tolerance.
        for k in 0..50 {
            let x = DVector::from_vec(vec![-0.49 + 0.98 * (k as f64) / 49.0]);
            let u = ctrl.control(&x).unwrap();
            assert!(u_set.contains(&u, 0.0));
        }
    }

    #[test]
    fn qp_controller_zero_when_decrease_inactive() {
        // Stable scalar plant: wherever the open-loop decrease already meets
        // the rate, the min-norm input is exactly zero.
        let (_, u_set, tri, cert) = certified_scalar();
        let v_field = cert.v_field(&tri).unwrap();
        let model = Scalar;
        let qp = QpController::min_norm(&tri, &v_field, cert.b2, &model, &u_set);
        let x = DVector::from_vec(vec![0.3]);
        let grad = v_field.gradient(tri.locate(&x).unwrap()[0].0);
        let slack = grad.dot(&model.drift(&x)) + cert.b2 * v_field.evaluate(&tri, &x).unwrap();
        if slack < -1e-9 {
            let u = qp.control(&x).unwrap();
            assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn qp_controller_rides_unique_feasible_point() {
        // Driftless integrator with V = |x|: at x = 0.5 the decrease
        // constraint with b2 = 2 demands u <= -1, exactly the input floor.
        struct Integrator;
        impl ControlAffineModel for Integrator {
            fn state_dim(&self) -> usize {
                1
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 1.0)
            }
            fn hess_f_bound(&self, _bx: &crate::system::Aabb) -> f64 {
                0.0
            }
            fn hess_g_bound(&self, _bx: &crate::system::Aabb, _s: usize) -> f64 {
                0.0
            }
            fn grad_g_bound(&self, _bx: &crate::system::Aabb, _s: usize) -> f64 {
                0.0
            }
        }
        let x_set = Polytope::interval(-1.0, 1.0).unwrap();
        let tri = Triangulation::build(&x_set, 1.0).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let values: Vec<f64> = tri.vertices().iter().map(|v| v[0].abs()).collect();
        let v_field = CpaScalarField::interpolate(&tri, &values).unwrap();
        let model = Integrator;
        let qp = QpController::min_norm(&tri, &v_field, 2.0, &model, &u_set);
        let u = qp.control(&DVector::from_vec(vec![0.5])).unwrap();
        assert_abs_diff_eq!(u[0], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn qp_infeasible_outside_certified_rate() {
        // Demanding an impossible rate reports infeasibility.
        let x_set = Polytope::interval(-1.0, 1.0).unwrap();
        let tri = Triangulation::build(&x_set, 1.0).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let values: Vec<f64> = tri.vertices().iter().map(|v| v[0].abs()).collect();
        let v_field = CpaScalarField::interpolate(&tri, &values).unwrap();
        let model = Scalar;
        let qp = QpController::min_norm(&tri, &v_field, 100.0, &model, &u_set);
        match qp.control(&DVector::from_vec(vec![0.9])) {
            Err(RuntimeError::InfeasibleAtState { .. }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn simulation_respects_certificate() {
        let (x_set, u_set, tri, cert) = certified_scalar();
        let model = Scalar;
        let u_field = cert.u_field(&tri).unwrap();
        let ctrl = CpaController {
            tri: &tri,
            field: &u_field,
            u_set: &u_set,
        };
        let x0 = DVector::from_vec(vec![0.2]);
        let traj = simulate(&model, &ctrl, &x0, 0.01, 5.0, &cert, &tri, &x_set, &u_set).unwrap();
        assert!(traj.complete);
        assert!(traj.bound_satisfied.iter().all(|&b| b));
        assert!(traj.in_state_set.iter().all(|&b| b));
        assert!(traj.input_admissible.iter().all(|&b| b));
        assert!(traj.in_region.iter().all(|&b| b));

        // V decays along the sampled path within the discretization slack.
        let v_field = cert.v_field(&tri).unwrap();
        let mut prev = f64::INFINITY;
        let v0 = v_field.evaluate(&tri, &x0).unwrap();
        for (k, xs) in traj.states.iter().enumerate() {
            let v = v_field
                .evaluate(&tri, &DVector::from_vec(xs.clone()))
                .unwrap();
            assert!(v <= prev + 1e-4);
            let envelope = v0 * (-cert.b2 * traj.times[k]).exp() * (1.0 + 1e-2);
            assert!(v <= envelope, "sample {k}: {v} > {envelope}");
            prev = v;
        }
    }

    #[test]
    fn qp_feasible_along_certified_trajectory() {
        let (x_set, u_set, tri, cert) = certified_scalar();
        let model = Scalar;
        let v_field = cert.v_field(&tri).unwrap();
        let qp = QpController::min_norm(&tri, &v_field, cert.b2, &model, &u_set);
        let x0 = DVector::from_vec(vec![0.2]);
        let traj = simulate(&model, &qp, &x0, 0.01, 5.0, &cert, &tri, &x_set, &u_set).unwrap();
        assert!(traj.complete, "QP controller must stay feasible in the region");
        assert!(traj.input_admissible.iter().all(|&b| b));
        assert!(traj.bound_satisfied.iter().all(|&b| b));
    }

    #[test]
    fn start_outside_region_refused() {
        let (x_set, u_set, tri, cert) = certified_scalar();
        let model = Scalar;
        let u_field = cert.u_field(&tri).unwrap();
        let ctrl = CpaController {
            tri: &tri,
            field: &u_field,
            u_set: &u_set,
        };
        let outside = DVector::from_vec(vec![0.499]);
        let v_field = cert.v_field(&tri).unwrap();
        if !cert.region.contains(&tri, &v_field, &outside, true) {
            match simulate(
                &model, &ctrl, &outside, 0.01, 1.0, &cert, &tri, &x_set, &u_set,
            ) {
                Err(RuntimeError::StartOutsideRegion) => {}
                other => panic!("expected refusal, got {:?}", other.map(|t| t.complete)),
            }
        }
    }

    #[test]
    fn settling_time_examples() {
        let make = |states: Vec<Vec<f64>>, dt: f64| {
            let n = states.len();
            Trajectory {
                dt,
                times: (0..n).map(|k| k as f64 * dt).collect(),
                states,
                inputs: vec![vec![0.0]; n],
                in_region: vec![true; n],
                in_state_set: vec![true; n],
                input_admissible: vec![true; n],
                bound_satisfied: vec![true; n],
                complete: true,
            }
        };
        // Constant zero trajectory settles immediately.
        let zeros = make(vec![vec![0.0]; 100], 0.01);
        assert_eq!(settling_time(&zeros, 0.05), 0.0);

        // exp(-t) enters the 0.05 band at ln(20) ~ 2.9957.
        let dt = 0.001;
        let decay = make(
            (0..5000).map(|k| vec![(-(k as f64) * dt).exp()]).collect(),
            dt,
        );
        let t = settling_time(&decay, 0.05);
        assert_abs_diff_eq!(t, 20.0_f64.ln(), epsilon = 2.0 * dt);

        // Never settles.
        let flat = make(vec![vec![1.0]; 10], 0.01);
        assert!(settling_time(&flat, 0.05).is_infinite());
    }
}
