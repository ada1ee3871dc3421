// Scratch: step-schedule experiments (not part of the deliverable).
use cpa_synth::geometry::{Polytope, Triangulation};
use cpa_synth::synthesis::sdp::CostSpec;
use cpa_synth::synthesis::{init_lqr, margin_step, max_feasible_b2, step, AlgorithmOptions, StepOutcome, SynthesisContext};
use cpa_synth::system::{InputConstraint, Pendulum};
use nalgebra::DMatrix;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rho: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.131072);
    let schedule: String = args.get(2).cloned().unwrap_or("mmmmm".into());
    let gap: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let hex: Vec<[f64; 2]> = vec![
        [0.95, -0.1], [0.75, -1.5], [-0.25, -1.45],
        [-0.95, 0.1], [-0.75, 1.5], [0.25, 1.45],
    ];
    let x = Polytope::from_vertices_2d(&hex).unwrap();
    let tri = Triangulation::build(&x, rho).unwrap();
    let u_set = InputConstraint::box_bounds(&[5.0]).unwrap();
    let model = Pendulum;
    let ctx = SynthesisContext::new(&tri, &model, &u_set).unwrap();
    let q = DMatrix::identity(2, 2) * 2.0;
    let r = DMatrix::identity(1, 1);
    let mut y = init_lqr(&ctx, &q, &r).unwrap();
    print!("rho {rho:.4} gap {gap} schedule {schedule}: init {:+.2}  ", y.b2);
    let opts = AlgorithmOptions::default();
    for step_kind in schedule.chars() {
        let grads = y.gradients(&ctx);
        let mf0 = max_feasible_b2(&ctx, &y, &grads);
        y.b2 = mf0 - gap;
        let outcome = match step_kind {
            'm' => margin_step(&ctx, &y, opts.solver),
            _ => step(&ctx, &y, &CostSpec::neg_b2(), false, false, opts.solver),
        };
        match outcome {
            StepOutcome::Advanced { point, .. } => {
                y = point;
                let grads = y.gradients(&ctx);
                let mf = max_feasible_b2(&ctx, &y, &grads);
                print!("{:+.4}  ", mf);
            }
            StepOutcome::SolverFailed { solve } => {
                print!("[solver failed {:?}]", solve.status);
                break;
            }
        }
    }
    println!();
}
