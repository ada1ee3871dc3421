// Scratch calibration harness (not part of the deliverable).
use cpa_synth::geometry::{Polytope, Triangulation};
use cpa_synth::synthesis::sdp::CostSpec;
use cpa_synth::synthesis::{init_lqr, max_feasible_b2, step, AlgorithmOptions, StepOutcome, SynthesisContext};
use cpa_synth::system::{InputConstraint, Pendulum};
use nalgebra::DMatrix;

fn poly_variant(which: usize) -> (&'static str, Vec<[f64; 2]>) {
    match which {
        // Current big hexagon.
        0 => ("big hexagon", vec![
            [0.95, -0.1], [0.75, -1.5], [-0.25, -1.45],
            [-0.95, 0.1], [-0.75, 1.5], [0.25, 1.45],
        ]),
        // Short-valley hexagon.
        1 => ("short hexagon", vec![
            [0.95, -0.1], [0.7, -1.15], [-0.3, -1.1],
            [-0.95, 0.1], [-0.7, 1.15], [0.3, 1.1],
        ]),
        // Near-round dodecagon with mild diagonal bulge.
        2 => ("dodecagon", {
            (0..12).map(|k| {
                let th = std::f64::consts::TAU * (k as f64) / 12.0;
                let (c, s) = (th.cos(), th.sin());
                // bulge along +-(0.55,-0.835)
                let align = (c * 0.55 - s * 0.835).abs();
                let r = 1.0 + 0.3 * align * align;
                [c * r, s * r]
            }).collect()
        }),
        // Small round octagon.
        _ => ("small octagon", {
            (0..8).map(|k| {
                let th = std::f64::consts::TAU * (k as f64) / 8.0 + 0.2;
                [th.cos() * 1.05, th.sin() * 1.05]
            }).collect()
        }),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let rho: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1048576);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (name, pts) = poly_variant(which);
    let x = Polytope::from_vertices_2d(&pts).unwrap();
    let tri = Triangulation::build(&x, rho).unwrap();
    let u_set = InputConstraint::box_bounds(&[5.0]).unwrap();
    let model = Pendulum;
    let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
    let q = DMatrix::identity(2, 2) * 2.0;
    let r = DMatrix::identity(1, 1);
    let mut y = init_lqr(&ctx, &q, &r).unwrap();
    println!("{name} rho {rho:.6} ({} simplexes, cov {:.3}): init {:+.3}",
        tri.num_simplexes(), tri.coverage_ratio(&x).unwrap(), y.b2);
    let opts = AlgorithmOptions::default();
    for k in 0..iters {
        let grads = y.gradients(&ctx);
        let mf0 = max_feasible_b2(&ctx, &y, &grads);
        y.b2 = mf0 - 0.25;
        match step(&ctx, &y, &CostSpec::neg_b2(), false, false, opts.solver) {
            StepOutcome::Advanced { point, .. } => {
                y = point;
                let grads = y.gradients(&ctx);
                let mf = max_feasible_b2(&ctx, &y, &grads);
                println!("  iter {}: feasible {:+.5}  b1 {:.4}", k + 1, mf, y.b1);
                if mf >= 0.3 { println!("  TARGET"); break; }
            }
            StepOutcome::SolverFailed { solve } => {
                println!("  iter {}: solver failed {:?}", k + 1, solve.status);
                break;
            }
        }
    }
}
