//! Offline synthesis of continuous piecewise-affine (CPA) Lyapunov functions
//! and stabilizing state-feedback controllers for state- and input-constrained
//! control-affine systems.
//!
//! The toolkit triangulates the admissible state polytope with a scaled Kuhn
//! lattice mesh, searches for a CPA controller and a CPA Lyapunov function by
//! an iterative convex-overbounding SDP, refines the mesh when the search
//! fails, and exports a certificate (decrease rate, norm bound, invariant
//! sublevel set) together with two online controllers: direct CPA evaluation
//! and a min-norm QP that reuses the certified Lyapunov function.

pub mod cpa;
pub mod geometry;
pub mod optim;
pub mod runtime;
pub mod synthesis;
pub mod system;

pub mod cli;
