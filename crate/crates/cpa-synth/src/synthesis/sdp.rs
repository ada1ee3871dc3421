//! Assembly of one convex-overbounding iteration as a standard-form SDP.
//!
//! The decision variables are the perturbations of the current feasible
//! point. Absolute-value constraints are split into two-sided linear rows;
//! each bilinear decrease constraint becomes a PSD block whose Schur
//! complement over-bounds the leftover quadratic cross terms. Origin vertex
//! perturbations are eliminated structurally, and the decrease block of an
//! origin vertex is skipped outright: its Dini bound is identically zero for
//! any admissible perturbation, so it constrains nothing.

use serde::{Deserialize, Serialize};

use crate::optim::{ConicProblem, LinExpr, PsdBlock, SolveResult, SolveStatus, SolverOptions};

use super::{repair, DecisionPoint, PointGradients, SynthesisContext, EPS_POS};

/// Linear/quadratic weights over the decision-point coordinates. The
/// quadratic part is a nonnegative diagonal, so the form stays PSD.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostSpec {
    /// Weight on `b1`.
    #[serde(default)]
    pub w_b1: f64,
    /// Weight on `b2`.
    #[serde(default)]
    pub w_b2: f64,
    /// Weight on the sum of controller gradient bounds `z_i` (only
    /// simplexes where `z` is an active unknown contribute).
    #[serde(default)]
    pub w_z: f64,
    /// Weight on the sum of Lyapunov gradient bounds `1'l_i`.
    #[serde(default)]
    pub w_l: f64,
    /// Weight on the summed squared controller vertex values.
    #[serde(default)]
    pub w_u_sq: f64,
}

impl CostSpec {
    /// Phase-1 objective: maximize the decrease rate.
    pub fn neg_b2() -> Self {
        Self {
            w_b1: 0.0,
            w_b2: -1.0,
            w_z: 0.0,
            w_l: 0.0,
            w_u_sq: 0.0,
        }
    }

    /// Default phase-2 objective: smooth, small controllers.
    pub fn default_performance() -> Self {
        Self {
            w_b1: 0.0,
            w_b2: 0.0,
            w_z: 1.0,
            w_l: 0.0,
            w_u_sq: 1e-2,
        }
    }

    /// Direct evaluation on a decision point, consistent with the terms the
    /// SDP objective carries (`z` counts only where it is an unknown).
    pub fn evaluate(&self, ctx: &SynthesisContext, y: &DecisionPoint) -> f64 {
        let mut j = self.w_b1 * y.b1 + self.w_b2 * y.b2;
        for i in 0..ctx.num_simplexes() {
            if ctx.bounds[i].eta != 0.0 {
                j += self.w_z * y.z[i];
            }
            j += self.w_l * y.l[i].sum();
        }
        for u in &y.u {
            j += self.w_u_sq * u.norm_squared();
        }
        j
    }
}

impl Default for CostSpec {
    fn default() -> Self {
        Self::default_performance()
    }
}

/// Variable layout of one iteration's SDP.
#[derive(Debug, Clone)]
pub struct StepVars {
    /// Per-vertex Lyapunov perturbation; `None` pins the origin.
    pub dv: Vec<Option<usize>>,
    /// Start of the `n`-vector perturbation of `l_i`.
    pub dl: Vec<usize>,
    /// Per-vertex controller perturbation block; `None` pins the origin.
    pub du: Vec<Option<usize>>,
    /// Controller gradient bound perturbation; `None` where `eta_i = 0`.
    pub dz: Vec<Option<usize>>,
    pub db1: usize,
    /// `None` when the decrease rate is frozen (phase 2).
    pub db2: Option<usize>,
    pub total: usize,
}

impl StepVars {
    fn layout(ctx: &SynthesisContext, pin_b2: bool) -> Self {
        let n = ctx.tri.dim();
        let m = ctx.input_dim();
        let mut next = 0usize;
        let mut dv = vec![None; ctx.num_vertices()];
        for (vid, slot) in dv.iter_mut().enumerate() {
            if vid != ctx.origin {
                *slot = Some(next);
                next += 1;
            }
        }
        let mut dl = Vec::with_capacity(ctx.num_simplexes());
        for _ in 0..ctx.num_simplexes() {
            dl.push(next);
            next += n;
        }
        let mut du = vec![None; ctx.num_vertices()];
        for (vid, slot) in du.iter_mut().enumerate() {
            if vid != ctx.origin {
                *slot = Some(next);
                next += m;
            }
        }
        let mut dz = vec![None; ctx.num_simplexes()];
        for (i, slot) in dz.iter_mut().enumerate() {
            if ctx.bounds[i].eta != 0.0 {
                *slot = Some(next);
                next += 1;
            }
        }
        let db1 = next;
        next += 1;
        let db2 = if pin_b2 {
            None
        } else {
            let k = next;
            next += 1;
            Some(k)
        };
        Self {
            dv,
            dl,
            du,
            dz,
            db1,
            db2,
            total: next,
        }
    }

    /// Perturbation of `grad V_i` as affine expressions, per component.
    fn dgrad_v(&self, ctx: &SynthesisContext, i: usize) -> Vec<LinExpr> {
        let s = ctx.tri.simplex(i);
        let n = ctx.tri.dim();
        (0..n)
            .map(|p| {
                let mut e = LinExpr::default();
                for j in 1..=n {
                    let coeff = s.shape_inv[(p, j - 1)];
                    if let Some(k) = self.dv[s.vertex_ids[j]] {
                        e.push(k, coeff);
                    }
                    if let Some(k0) = self.dv[s.vertex_ids[0]] {
                        e.push(k0, -coeff);
                    }
                }
                e
            })
            .collect()
    }

    /// Perturbation of `grad u_i^(ch)` as affine expressions, per component.
    fn dgrad_u(&self, ctx: &SynthesisContext, i: usize, ch: usize) -> Vec<LinExpr> {
        let s = ctx.tri.simplex(i);
        let n = ctx.tri.dim();
        (0..n)
            .map(|p| {
                let mut e = LinExpr::default();
                for j in 1..=n {
                    let coeff = s.shape_inv[(p, j - 1)];
                    if let Some(k) = self.du[s.vertex_ids[j]] {
                        e.push(k + ch, coeff);
                    }
                    if let Some(k0) = self.du[s.vertex_ids[0]] {
                        e.push(k0 + ch, -coeff);
                    }
                }
                e
            })
            .collect()
    }
}

/// Emits the full iteration SDP around the feasible point `y`.
pub fn assemble_step(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    grads: &PointGradients,
    cost: &CostSpec,
    pin_b2: bool,
) -> (ConicProblem, StepVars) {
    assemble_step_inner(ctx, y, grads, cost, pin_b2, false)
}

/// Like [`assemble_step`], with an extra margin variable added to the (0,0)
/// entry of every decrease block. Used by the tie-break pass that picks the
/// most interior point of the optimal face.
fn assemble_step_inner(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    grads: &PointGradients,
    cost: &CostSpec,
    pin_b2: bool,
    with_margin: bool,
) -> (ConicProblem, StepVars) {
    let n = ctx.tri.dim();
    let m = ctx.input_dim();
    let mut vars = StepVars::layout(ctx, pin_b2);
    let margin_var = if with_margin {
        let k = vars.total;
        vars.total += 1;
        Some(k)
    } else {
        None
    };
    let mut problem = ConicProblem::new(vars.total);

    // Objective J(y + dy), constants dropped.
    problem.linear_objective[vars.db1] += cost.w_b1;
    if let Some(k) = vars.db2 {
        problem.linear_objective[k] += cost.w_b2;
    }
    for i in 0..ctx.num_simplexes() {
        if let Some(k) = vars.dz[i] {
            problem.linear_objective[k] += cost.w_z;
        }
        for p in 0..n {
            problem.linear_objective[vars.dl[i] + p] += cost.w_l;
        }
    }
    if cost.w_u_sq != 0.0 {
        for vid in 0..ctx.num_vertices() {
            if let Some(k) = vars.du[vid] {
                for s in 0..m {
                    problem.quad_objective.push((k + s, k + s, 2.0 * cost.w_u_sq));
                    problem.linear_objective[k + s] += 2.0 * cost.w_u_sq * y.u[vid][s];
                }
            }
        }
    }

    // Positivity floor for b1.
    let mut floor = LinExpr::constant(y.b1 - EPS_POS);
    floor.push(vars.db1, 1.0);
    problem.nonneg.push(floor);

    // Lower bound of V at every non-origin vertex.
    for vid in 0..ctx.num_vertices() {
        let Some(kv) = vars.dv[vid] else { continue };
        let pow = ctx.norms[vid].powf(y.a_exp);
        let mut e = LinExpr::constant(y.v[vid] - y.b1 * pow);
        e.push(kv, 1.0);
        e.push(vars.db1, -pow);
        problem.nonneg.push(e);
    }

    // Two-sided gradient bounds for V, and input admissibility rows.
    for i in 0..ctx.num_simplexes() {
        let dgv = vars.dgrad_v(ctx, i);
        for p in 0..n {
            for sign in [1.0, -1.0] {
                let mut e = LinExpr::constant(y.l[i][p] + sign * grads.v[i][p]);
                e.push(vars.dl[i] + p, 1.0);
                e.add_scaled(&dgv[p], sign);
                problem.nonneg.push(e);
            }
        }
        if let Some(kz) = vars.dz[i] {
            for ch in 0..m {
                let dgu = vars.dgrad_u(ctx, i, ch);
                for p in 0..n {
                    for sign in [1.0, -1.0] {
                        let mut e =
                            LinExpr::constant(y.z[i] + sign * grads.u[i][(p, ch)]);
                        e.push(kz, 1.0);
                        e.add_scaled(&dgu[p], sign);
                        problem.nonneg.push(e);
                    }
                }
            }
        }
    }
    let h = ctx.u_set.matrix();
    let h_c = ctx.u_set.offsets();
    for vid in 0..ctx.num_vertices() {
        let Some(ku) = vars.du[vid] else { continue };
        for row in 0..h.nrows() {
            let mut lhs = 0.0;
            let mut e = LinExpr::default();
            for s in 0..m {
                lhs += h[(row, s)] * y.u[vid][s];
                e.push(ku + s, -h[(row, s)]);
            }
            e.constant = h_c[row] - lhs;
            problem.nonneg.push(e);
        }
    }

    // Decrease blocks.
    for i in 0..ctx.num_simplexes() {
        let ids = &ctx.tri.simplex(i).vertex_ids;
        let b = &ctx.bounds[i];
        let dgv = vars.dgrad_v(ctx, i);
        let ones_l = y.l[i].sum();
        for j in 0..ids.len() {
            let vid = ids[j];
            if vid == ctx.origin {
                // Dini bound at the origin vertex is identically zero.
                continue;
            }
            let g_j = &ctx.g_at[vid];
            let closed_drift = &ctx.f_at[vid] + g_j * &y.u[vid];
            let cj = b.c[j];

            // Linearized decrease expression around y (the (0,0) entry).
            let mut phi = LinExpr::constant(grads.v[i].dot(&closed_drift));
            for p in 0..n {
                phi.add_scaled(&dgv[p], closed_drift[p]);
            }
            let w = g_j.transpose() * &grads.v[i];
            if let Some(ku) = vars.du[vid] {
                for s in 0..m {
                    phi.push(ku + s, w[s]);
                }
            }
            phi.constant += cj * b.mu * ones_l;
            for p in 0..n {
                phi.push(vars.dl[i] + p, cj * b.mu);
            }
            if b.eta != 0.0 {
                phi.constant += cj * b.eta * y.z[i] * ones_l;
                if let Some(kz) = vars.dz[i] {
                    phi.push(kz, cj * b.eta * ones_l);
                }
                for p in 0..n {
                    phi.push(vars.dl[i] + p, cj * b.eta * y.z[i]);
                }
            }
            phi.constant += y.b2 * y.v[vid];
            if let Some(kv) = vars.dv[vid] {
                phi.push(kv, y.b2);
            }
            if let Some(kb2) = vars.db2 {
                phi.push(kb2, y.v[vid]);
            }

            // Negated block: -P (or -Q) must be PSD.
            let use_q = b.eta != 0.0 && j != 0;
            let dim = if use_q { 2 * n + 5 } else { 2 * n + 3 };
            let mut block = PsdBlock::new(dim);
            let mut head = phi.scaled(-1.0);
            if let Some(k) = margin_var {
                // Relative decrease margin: phi + t V <= Schur bound, so the
                // maximized t lower-bounds the rate the next point supports.
                head.push(k, -y.v[vid]);
            }
            block.set(0, 0, head);
            for p in 0..n {
                block.set(1 + p, 0, dgv[p].scaled(-1.0));
                block.set(1 + p, 1 + p, LinExpr::constant(2.0));
            }
            for p in 0..n {
                let mut e = LinExpr::default();
                if let Some(ku) = vars.du[vid] {
                    for s in 0..m {
                        e.push(ku + s, -g_j[(p, s)]);
                    }
                }
                block.set(1 + n + p, 0, e);
                block.set(1 + n + p, 1 + n + p, LinExpr::constant(2.0));
            }
            {
                let mut e = LinExpr::default();
                if let Some(kv) = vars.dv[vid] {
                    e.push(kv, -1.0);
                }
                block.set(2 * n + 1, 0, e);
                block.set(2 * n + 1, 2 * n + 1, LinExpr::constant(2.0));
            }
            {
                let mut e = LinExpr::default();
                if let Some(kb2) = vars.db2 {
                    e.push(kb2, -1.0);
                }
                block.set(2 * n + 2, 0, e);
                block.set(2 * n + 2, 2 * n + 2, LinExpr::constant(2.0));
            }
            if use_q {
                let etac = b.eta * cj;
                let mut sum_dl = LinExpr::default();
                for p in 0..n {
                    sum_dl.push(vars.dl[i] + p, -1.0);
                }
                block.set(2 * n + 3, 0, sum_dl);
                block.set(2 * n + 3, 2 * n + 3, LinExpr::constant(2.0 / etac));
                let mut e = LinExpr::default();
                if let Some(kz) = vars.dz[i] {
                    e.push(kz, -1.0);
                }
                block.set(2 * n + 4, 0, e);
                block.set(2 * n + 4, 2 * n + 4, LinExpr::constant(2.0 / etac));
            }
            problem.psd_blocks.push(block);
        }
    }

    (problem, vars)
}

/// Outcome of one convex-overbounding iteration.
#[derive(Debug)]
pub enum StepOutcome {
    /// The solver advanced; the point has been repaired back to exact
    /// feasibility.
    Advanced {
        point: DecisionPoint,
        solve: SolveResult,
    },
    /// Backend breakdown; the caller keeps the previous point.
    SolverFailed { solve: SolveResult },
}

/// Runs one iteration around `y`. With `fix_b2`, the rate is frozen at its
/// current value (phase 2).
///
/// In phase 1 the objective pins only the rate gain, so the optimal face is
/// large; with `tie_break`, a second solve walks along that face (rate gain
/// held at its optimum) to the point of maximum uniform decrease margin,
/// which conditions the next linearization. Both stages return the same
/// objective value, so the descent guarantee is untouched.
pub fn step(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    cost: &CostSpec,
    fix_b2: bool,
    tie_break: bool,
    opts: SolverOptions,
) -> StepOutcome {
    let grads = y.gradients(ctx);
    let (problem, vars) = assemble_step(ctx, y, &grads, cost, fix_b2);
    let solve = problem.solve(opts);
    if solve.status != SolveStatus::Optimal {
        return StepOutcome::SolverFailed { solve };
    }
    if tie_break && !fix_b2 {
        if let Some(db2) = vars.db2 {
            let achieved = solve.primal[db2];
            let (mut margin_problem, margin_vars) =
                assemble_step_inner(ctx, y, &grads, cost, fix_b2, true);
            let t_var = margin_vars.total - 1;
            margin_problem.linear_objective = vec![0.0; margin_vars.total];
            margin_problem.linear_objective[t_var] = -1.0;
            margin_problem.quad_objective.clear();
            let mut pin = LinExpr::constant(-achieved);
            pin.push(margin_vars.db2.expect("layout matches"), 1.0);
            margin_problem.equalities.push(pin);
            let second = margin_problem.solve(opts);
            if second.status == SolveStatus::Optimal {
                let point = apply_deltas(ctx, y, &margin_vars, &second.primal);
                return StepOutcome::Advanced {
                    point,
                    solve: second,
                };
            }
        }
    }
    let point = apply_deltas(ctx, y, &vars, &solve.primal);
    StepOutcome::Advanced { point, solve }
}

/// Experimental maximin variant of one iteration: the rate perturbation is
/// pinned and the step instead maximizes the uniform relative decrease
/// margin `t` over all blocks (`phi + t V <= Schur bound`). The rate is
/// re-derived from the new point analytically, so the per-step quadratic
/// penalty on the rate variable disappears.
pub fn margin_step(ctx: &SynthesisContext, y: &DecisionPoint, opts: SolverOptions) -> StepOutcome {
    let grads = y.gradients(ctx);
    let (mut problem, vars) =
        assemble_step_inner(ctx, y, &grads, &CostSpec::neg_b2(), true, true);
    let t_var = vars.total - 1;
    problem.linear_objective = vec![0.0; vars.total];
    problem.linear_objective[t_var] = -1.0;
    problem.quad_objective.clear();
    let solve = problem.solve(opts);
    if solve.status != SolveStatus::Optimal {
        return StepOutcome::SolverFailed { solve };
    }
    let point = apply_deltas(ctx, y, &vars, &solve.primal);
    StepOutcome::Advanced { point, solve }
}

fn apply_deltas(
    ctx: &SynthesisContext,
    y: &DecisionPoint,
    vars: &StepVars,
    delta: &[f64],
) -> DecisionPoint {
    let n = ctx.tri.dim();
    let m = ctx.input_dim();
    let mut out = y.clone();
    for vid in 0..ctx.num_vertices() {
        if let Some(k) = vars.dv[vid] {
            out.v[vid] += delta[k];
        }
        if let Some(k) = vars.du[vid] {
            for s in 0..m {
                out.u[vid][s] += delta[k + s];
            }
        }
    }
    for i in 0..ctx.num_simplexes() {
        for p in 0..n {
            out.l[i][p] += delta[vars.dl[i] + p];
        }
        if let Some(k) = vars.dz[i] {
            out.z[i] += delta[k];
        }
    }
    out.b1 += delta[vars.db1];
    if let Some(k) = vars.db2 {
        out.b2 += delta[k];
    }
    repair(ctx, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Polytope, Triangulation};
    use crate::synthesis::{
        constraint_residuals, dini_upper, init_lqr, init_simple, max_feasible_b2,
        SynthesisContext,
    };
    use crate::system::{InputConstraint, Pendulum, StateDependentGain};
    use nalgebra::DMatrix;

    fn pendulum_ctx<'a>(
        tri: &'a Triangulation,
        u_set: &'a InputConstraint,
    ) -> SynthesisContext<'a> {
        SynthesisContext::new(tri, &Pendulum, u_set).unwrap()
    }

    #[test]
    fn zero_delta_is_feasible() {
        let x = Polytope::bounding_box_poly(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let tri = Triangulation::build(&x, 0.5).unwrap();
        let u_set = InputConstraint::box_bounds(&[5.0]).unwrap();
        let ctx = pendulum_ctx(&tri, &u_set);
        let q = DMatrix::identity(2, 2) * 2.0;
        let r = DMatrix::identity(1, 1);
        let y = init_lqr(&ctx, &q, &r).unwrap();
        let grads = y.gradients(&ctx);
        let (problem, vars) = assemble_step(&ctx, &y, &grads, &CostSpec::neg_b2(), false);
        let zeros = vec![0.0; vars.total];
        assert!(
            problem.max_residual(&zeros) <= 1e-9,
            "residual {}",
            problem.max_residual(&zeros)
        );
    }

    #[test]
    fn block_sizes_and_counts() {
        let x = Polytope::bounding_box_poly(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let tri = Triangulation::build(&x, 0.5).unwrap();
        let u_set = InputConstraint::box_bounds(&[5.0]).unwrap();
        let n = 2;

        // Constant G: every block is a P block of size 2n+3.
        let ctx = pendulum_ctx(&tri, &u_set);
        let y = init_simple(&ctx, 2.0, 1.0, None);
        let grads = y.gradients(&ctx);
        let (problem, _) = assemble_step(&ctx, &y, &grads, &CostSpec::neg_b2(), false);
        for b in &problem.psd_blocks {
            assert_eq!(b.dim, 2 * n + 3);
        }
        // One decrease constraint per (simplex, vertex) pair minus the
        // vacuous origin-vertex pairs, one per origin-incident simplex.
        let origin_simplexes = tri
            .incident_simplexes(tri.origin_vertex().unwrap())
            .len();
        assert_eq!(
            problem.psd_blocks.len(),
            tri.num_simplexes() * (n + 1) - origin_simplexes
        );

        // State-dependent G: Q blocks of size 2n+5 appear for j >= 1.
        let model = StateDependentGain;
        let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
        let y = init_simple(&ctx, 2.0, 1.0, None);
        let grads = y.gradients(&ctx);
        let (problem, _) = assemble_step(&ctx, &y, &grads, &CostSpec::neg_b2(), false);
        let q_blocks = problem
            .psd_blocks
            .iter()
            .filter(|b| b.dim == 2 * n + 5)
            .count();
        let p_blocks = problem
            .psd_blocks
            .iter()
            .filter(|b| b.dim == 2 * n + 3)
            .count();
        assert!(q_blocks > 0, "eta > 0 must produce Q blocks");
        assert_eq!(
            p_blocks + q_blocks,
            tri.num_simplexes() * (n + 1) - origin_simplexes
        );
        // Anchor (j = 0) rows of non-origin simplexes stay P blocks.
        assert!(p_blocks >= tri.num_simplexes() - origin_simplexes);
    }

    #[test]
    fn phase1_step_does_not_decrease_b2() {
        let x = Polytope::interval(-0.5, 0.5).unwrap();
        let tri = Triangulation::build(&x, 0.25).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let model = crate::synthesis::tests::Scalar;
        let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let y = init_lqr(&ctx, &q, &r).unwrap();
        let before = y.b2;
        match step(&ctx, &y, &CostSpec::neg_b2(), false, false, SolverOptions::default()) {
            StepOutcome::Advanced { point, .. } => {
                assert!(point.b2 >= before - 1e-7, "{} -> {}", before, point.b2);
                let domain: Vec<usize> = (0..ctx.num_simplexes()).collect();
                let rep = constraint_residuals(&ctx, &point, &domain);
                assert!(rep.max() <= 1e-6, "feasibility after step: {rep:?}");
            }
            StepOutcome::SolverFailed { solve } => {
                panic!("solver failed: {:?}", solve.status)
            }
        }
    }

    #[test]
    fn schur_blocks_imply_decrease_constraint() {
        // Random small instances: whenever the PSD blocks accept a random
        // perturbation, the bilinear decrease inequality holds at y + dy.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let x = Polytope::interval(-1.0, 1.0).unwrap();
        let tri = Triangulation::build(&x, 0.5).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let model = crate::synthesis::tests::Scalar;
        let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();

        let mut accepted = 0usize;
        for trial in 0..400 {
            let mut y = init_simple(&ctx, 2.0, 1.0, Some(trial));
            // Strictly feasible decrease rate.
            y.b2 -= 0.05;
            let grads = y.gradients(&ctx);
            let (problem, vars) = assemble_step(&ctx, &y, &grads, &CostSpec::neg_b2(), false);
            let delta: Vec<f64> = (0..vars.total)
                .map(|_| rng.random_range(-0.02..0.02))
                .collect();
            let psd_ok = problem.psd_blocks.iter().all(|b| {
                let m = b.realize(&delta);
                m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-9)
            });
            if !psd_ok {
                continue;
            }
            accepted += 1;
            let shifted = apply_raw(&ctx, &y, &vars, &delta);
            let sg = shifted.gradients(&ctx);
            for i in 0..ctx.num_simplexes() {
                let ids = &ctx.tri.simplex(i).vertex_ids;
                for j in 0..ids.len() {
                    if ids[j] == ctx.origin {
                        continue;
                    }
                    let d = dini_upper(&ctx, &shifted, &sg, i, j);
                    assert!(
                        d <= -shifted.b2 * shifted.v[ids[j]] + 1e-7,
                        "trial {trial}: decrease violated at ({i}, {j})"
                    );
                }
            }
        }
        assert!(accepted >= 50, "only {accepted} random trials accepted");
    }

    /// Applies deltas without the feasibility repair (test-only).
    fn apply_raw(
        ctx: &SynthesisContext,
        y: &DecisionPoint,
        vars: &StepVars,
        delta: &[f64],
    ) -> DecisionPoint {
        let mut out = y.clone();
        for vid in 0..ctx.num_vertices() {
            if let Some(k) = vars.dv[vid] {
                out.v[vid] += delta[k];
            }
            if let Some(k) = vars.du[vid] {
                for s in 0..ctx.input_dim() {
                    out.u[vid][s] += delta[k + s];
                }
            }
        }
        for i in 0..ctx.num_simplexes() {
            for p in 0..ctx.tri.dim() {
                out.l[i][p] += delta[vars.dl[i] + p];
            }
            if let Some(k) = vars.dz[i] {
                out.z[i] += delta[k];
            }
        }
        out.b1 += delta[vars.db1];
        if let Some(k) = vars.db2 {
            out.b2 += delta[k];
        }
        out
    }

    #[test]
    fn pinned_b2_emits_no_rate_variable() {
        let x = Polytope::interval(-0.5, 0.5).unwrap();
        let tri = Triangulation::build(&x, 0.25).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let model = crate::synthesis::tests::Scalar;
        let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
        let y = init_simple(&ctx, 2.0, 1.0, None);
        let grads = y.gradients(&ctx);
        let (p1, v1) = assemble_step(&ctx, &y, &grads, &CostSpec::neg_b2(), false);
        let (p2, v2) = assemble_step(&ctx, &y, &grads, &CostSpec::default_performance(), true);
        assert!(v1.db2.is_some());
        assert!(v2.db2.is_none());
        assert_eq!(p1.num_vars, p2.num_vars + 1);
    }

    #[test]
    fn cost_evaluation_matches_sdp_objective_shift() {
        // For a linear cost, J(y + dy) - J(y) equals the SDP objective at dy.
        let x = Polytope::interval(-1.0, 1.0).unwrap();
        let tri = Triangulation::build(&x, 0.5).unwrap();
        let u_set = InputConstraint::box_bounds(&[1.0]).unwrap();
        let model = crate::synthesis::tests::Scalar;
        let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
        let y = init_simple(&ctx, 2.0, 1.0, Some(1));
        let grads = y.gradients(&ctx);
        let cost = CostSpec {
            w_b1: 0.5,
            w_b2: -1.0,
            w_z: 0.0,
            w_l: 0.25,
            w_u_sq: 0.0,
        };
        let (problem, vars) = assemble_step(&ctx, &y, &grads, &cost, false);
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let delta: Vec<f64> = (0..vars.total)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        let shifted = apply_raw(&ctx, &y, &vars, &delta);
        let want = cost.evaluate(&ctx, &shifted) - cost.evaluate(&ctx, &y);
        let got = problem.objective_value(&delta);
        approx::assert_abs_diff_eq!(want, got, epsilon = 1e-9);
    }

    #[test]
    fn max_feasible_b2_brute_force_on_pendulum() {
        // LQR initialization on a coarse pendulum mesh: record the formula
        // value against the independent double loop.
        let x = Polytope::bounding_box_poly(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let tri = Triangulation::build(&x, 0.5).unwrap();
        let u_set = InputConstraint::box_bounds(&[5.0]).unwrap();
        let ctx = pendulum_ctx(&tri, &u_set);
        let q = DMatrix::identity(2, 2) * 2.0;
        let r = DMatrix::identity(1, 1);
        let y = init_lqr(&ctx, &q, &r).unwrap();
        let grads = y.gradients(&ctx);
        let fast = max_feasible_b2(&ctx, &y, &grads);
        let mut brute = f64::INFINITY;
        for i in 0..ctx.num_simplexes() {
            let ids = &ctx.tri.simplex(i).vertex_ids;
            for j in 0..ids.len() {
                if ids[j] == ctx.origin {
                    continue;
                }
                brute = brute.min(-dini_upper(&ctx, &y, &grads, i, j) / y.v[ids[j]]);
            }
        }
        approx::assert_abs_diff_eq!(fast, brute, epsilon = 1e-12);
        assert_eq!(y.b2, fast);
    }
}
