//! Configuration parsing, pipeline orchestration, and artifact emission.
//!
//! One JSON config drives four commands: `synthesize` runs the refinement
//! loop end to end and writes `certificate.json`, `triangulation.json` and
//! `iteration_log.csv`; `verify` re-checks an existing certificate and
//! writes `verification_report.json`; `simulate` integrates the CPA and QP
//! controllers and writes one trajectory CSV per controller plus a settling
//! report; `export-plots` emits plot-ready mesh/region CSVs and small SVG
//! renderings.

pub mod expr;

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpa::CpaError;
use crate::geometry::{GeometryError, Polytope, Triangulation, TriangulationExport};
use crate::optim::SolverOptions;
use crate::runtime::{
    settling_time, simulate, CpaController, QpController, RuntimeError, Trajectory,
};
use crate::synthesis::sdp::CostSpec;
use crate::synthesis::{
    algorithm2, verify_certificate, AlgorithmOptions, Certificate, InitSpec, SynthesisError,
    SynthesisFailure,
};
use crate::system::{ControlAffineModel, InputConstraint, Pendulum, StateDependentGain, SystemError};

use expr::{ExprModel, ExprModelError, ExprModelSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Expr(#[from] ExprModelError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error("synthesis failed: {0}")]
    Failure(#[from] SynthesisFailure),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Cpa(#[from] CpaError),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

/// Model selection: a named built-in or an expression-defined plant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Builtin(String),
    Expression(ExprModelSpec),
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn ControlAffineModel>, CliError> {
        match self {
            ModelSpec::Builtin(name) => match name.as_str() {
                "pendulum" => Ok(Box::new(Pendulum)),
                "state_dependent_gain" => Ok(Box::new(StateDependentGain)),
                other => Err(CliError::Config(format!(
                    "unknown builtin model `{other}` (available: pendulum, state_dependent_gain)"
                ))),
            },
            ModelSpec::Expression(spec) => Ok(Box::new(ExprModel::new(spec)?)),
        }
    }
}

/// State polytope selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolytopeSpec {
    /// 2-D polygon by vertices (hull taken, any order).
    Vertices(Vec<[f64; 2]>),
    /// Axis-aligned box; works in any dimension.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Halfspace rows `normal . x <= offset`.
    Halfspaces {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
    /// 1-D interval.
    Interval { lo: f64, hi: f64 },
}

impl PolytopeSpec {
    pub fn build(&self) -> Result<Polytope, CliError> {
        Ok(match self {
            PolytopeSpec::Vertices(pts) => Polytope::from_vertices_2d(pts)?,
            PolytopeSpec::Box { lo, hi } => Polytope::bounding_box_poly(lo, hi)?,
            PolytopeSpec::Halfspaces { normals, offsets } => {
                if normals.len() != offsets.len() {
                    return Err(CliError::Config(
                        "state_polytope.halfspaces: normals and offsets differ in length".into(),
                    ));
                }
                Polytope::from_halfspaces(
                    normals.iter().cloned().zip(offsets.iter().cloned()).collect(),
                )?
            }
            PolytopeSpec::Interval { lo, hi } => Polytope::interval(*lo, *hi)?,
        })
    }
}

/// Input polytope selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    /// `|u_s| <= bounds[s]`.
    Box(Vec<f64>),
    /// General `H u <= h_c`.
    Halfspaces { h: Vec<Vec<f64>>, h_c: Vec<f64> },
}

impl InputSpec {
    pub fn build(&self) -> Result<InputConstraint, CliError> {
        Ok(match self {
            InputSpec::Box(bounds) => InputConstraint::box_bounds(bounds)?,
            InputSpec::Halfspaces { h, h_c } => {
                let rows = h.len();
                let cols = h.first().map(Vec::len).unwrap_or(0);
                let mat = DMatrix::from_fn(rows, cols, |r, c| h[r][c]);
                InputConstraint::new(mat, DVector::from_vec(h_c.clone()))?
            }
        })
    }
}

/// Closed-loop simulation block of the config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub x0: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    /// Diagonal of the QP objective weight (identity by default).
    #[serde(default)]
    pub qp_weight_diag: Option<Vec<f64>>,
    /// Linear QP objective term (zero by default).
    #[serde(default)]
    pub qp_linear: Option<Vec<f64>>,
    #[serde(default = "default_band")]
    pub settle_band: f64,
}

fn default_dt() -> f64 {
    0.01
}

fn default_t_final() -> f64 {
    10.0
}

fn default_band() -> f64 {
    0.05
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub state_polytope: PolytopeSpec,
    pub input_constraint: InputSpec,
    pub rho0: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_eps_c")]
    pub eps_c: f64,
    pub rho_min: f64,
    pub initialization: InitSpec,
    #[serde(default = "default_phase_cap")]
    pub max_iter_phase1: usize,
    #[serde(default = "default_phase_cap")]
    pub max_iter_phase2: usize,
    #[serde(default = "default_b2_target")]
    pub b2_target: f64,
    #[serde(default = "default_stall_tol")]
    pub stall_tol: f64,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    #[serde(default = "default_tie_break")]
    pub tie_break: bool,
    #[serde(default)]
    pub j_hat: CostSpec,
    #[serde(default)]
    pub simulation: Option<SimulationSpec>,
    #[serde(default = "default_verify_samples")]
    pub verify_samples: usize,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
}

fn default_gamma() -> f64 {
    0.8
}

fn default_eps_c() -> f64 {
    0.85
}

fn default_phase_cap() -> usize {
    5
}

fn default_b2_target() -> f64 {
    0.3
}

fn default_stall_tol() -> f64 {
    1e-4
}

fn default_shrink() -> f64 {
    0.99
}

fn default_tie_break() -> bool {
    true
}

fn default_verify_samples() -> usize {
    10_000
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!(
                "{} at line {}, column {}",
                e,
                e.line(),
                e.column()
            ))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: String| Err(CliError::Config(format!("{field}: {why}")));
        if !(self.rho0 > 0.0) {
            return bad("rho0", format!("must be positive, got {}", self.rho0));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", format!("must be in (0, 1), got {}", self.gamma));
        }
        if !(self.eps_c > 0.0 && self.eps_c <= 1.0) {
            return bad("eps_c", format!("must be in (0, 1], got {}", self.eps_c));
        }
        if !(self.rho_min > 0.0 && self.rho_min < self.rho0) {
            return bad(
                "rho_min",
                format!("must satisfy 0 < rho_min < rho0, got {}", self.rho_min),
            );
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink", format!("must be in (0, 1), got {}", self.shrink));
        }
        if !(self.b2_target > 0.0) {
            return bad(
                "b2_target",
                format!("must be positive, got {}", self.b2_target),
            );
        }
        if let InitSpec::Simple { a_exp, b1, .. } = &self.initialization {
            if !(*a_exp > 0.0 && *b1 > 0.0) {
                return bad(
                    "initialization.simple",
                    format!("a_exp and b1 must be positive, got {a_exp}, {b1}"),
                );
            }
        }
        if let Some(sim) = &self.simulation {
            if !(sim.dt > 0.0 && sim.t_final > sim.dt) {
                return bad(
                    "simulation",
                    format!("need 0 < dt < t_final, got dt {}, t_final {}", sim.dt, sim.t_final),
                );
            }
            if !(sim.settle_band > 0.0) {
                return bad(
                    "simulation.settle_band",
                    format!("must be positive, got {}", sim.settle_band),
                );
            }
        }
        Ok(())
    }

    fn algorithm_options(&self, solver_tol_override: Option<f64>) -> AlgorithmOptions {
        let mut solver = self.solver.unwrap_or_default();
        if let Some(tol) = solver_tol_override {
            solver.tol = tol;
        }
        AlgorithmOptions {
            max_iter_phase1: self.max_iter_phase1,
            max_iter_phase2: self.max_iter_phase2,
            b2_target: self.b2_target,
            stall_tol: self.stall_tol,
            shrink: self.shrink,
            tie_break: self.tie_break,
            solver,
        }
    }
}

/// Environment variable overriding the solver acceptance tolerance.
pub const SOLVER_TOL_ENV: &str = "CPA_SYNTH_SOLVER_TOL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synthesize,
    Verify,
    Simulate,
    ExportPlots,
}

impl std::str::FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthesize" => Ok(Command::Synthesize),
            "verify" => Ok(Command::Verify),
            "simulate" => Ok(Command::Simulate),
            "export-plots" => Ok(Command::ExportPlots),
            other => Err(format!(
                "unknown command `{other}` (expected synthesize | verify | simulate | export-plots)"
            )),
        }
    }
}

/// Runs one command against a loaded config. Artifacts land in `out_dir`.
pub fn run(
    command: Command,
    config: &RunConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let solver_tol = std::env::var(SOLVER_TOL_ENV)
        .ok()
        .and_then(|v| v.parse::<f64>().ok());
    match command {
        Command::Synthesize => synthesize(config, out_dir, seed_override, solver_tol),
        Command::Verify => verify(config, out_dir, solver_tol),
        Command::Simulate => simulate_cmd(config, out_dir),
        Command::ExportPlots => export_plots(config, out_dir),
    }
}

fn synthesize(
    config: &RunConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
    solver_tol: Option<f64>,
) -> Result<(), CliError> {
    let model = config.model.build()?;
    let x_set = config.state_polytope.build()?;
    let u_set = config.input_constraint.build()?;
    let mut init = config.initialization.clone();
    if let (Some(seed), InitSpec::Simple { seed: slot, .. }) = (seed_override, &mut init) {
        *slot = Some(seed);
    }
    let opts = config.algorithm_options(solver_tol);
    let outcome = algorithm2(
        &x_set,
        model.as_ref(),
        &u_set,
        &config.j_hat,
        config.rho0,
        config.gamma,
        config.eps_c,
        config.rho_min,
        &init,
        &opts,
    )?;

    write_json(out_dir.join("certificate.json"), &outcome.certificate)?;
    write_json(
        out_dir.join("triangulation.json"),
        &outcome.triangulation.export(),
    )?;
    let mut log = String::from("phase,iteration,b2,b2_feasible,objective,max_residual,solver_residual,solver_status\n");
    for rec in &outcome.log {
        log.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            rec.phase,
            rec.iteration,
            rec.b2,
            rec.b2_feasible,
            rec.objective,
            rec.max_residual,
            rec.solver_residual,
            rec.solver_status
        ));
    }
    write_text(out_dir.join("iteration_log.csv"), &log)?;
    Ok(())
}

/// Loads `certificate.json` + `triangulation.json` from the artifact
/// directory.
pub fn load_artifacts(out_dir: &Path) -> Result<(Certificate, Triangulation), CliError> {
    let cert: Certificate = read_json(&out_dir.join("certificate.json"))?;
    let export: TriangulationExport = read_json(&out_dir.join("triangulation.json"))?;
    let vertices = export
        .vertices
        .iter()
        .map(|v| DVector::from_vec(v.clone()))
        .collect();
    let tri = Triangulation::from_parts(export.rho, vertices, export.simplexes)?;
    Ok((cert, tri))
}

fn verify(config: &RunConfig, out_dir: &Path, solver_tol: Option<f64>) -> Result<(), CliError> {
    let _ = solver_tol;
    let model = config.model.build()?;
    let u_set = config.input_constraint.build()?;
    let (cert, tri) = load_artifacts(out_dir)?;
    let report = verify_certificate(
        &cert,
        model.as_ref(),
        &u_set,
        &tri,
        config.verify_samples,
    )?;
    write_json(out_dir.join("verification_report.json"), &report)?;
    if report.pass() {
        Ok(())
    } else {
        Err(CliError::VerificationFailed(format!(
            "residuals_pass={}, sampling_pass={}, fingerprint_match={}",
            report.residuals_pass, report.sampling_pass, report.fingerprint_match
        )))
    }
}

#[derive(Debug, Serialize)]
struct SettlingReport {
    band: f64,
    cpa_settling_time: f64,
    qp_settling_time: f64,
    cpa_complete: bool,
    qp_complete: bool,
    cpa_all_flags_ok: bool,
    qp_all_flags_ok: bool,
}

fn simulate_cmd(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let sim = config
        .simulation
        .as_ref()
        .ok_or_else(|| CliError::Config("simulation block missing".into()))?;
    let model = config.model.build()?;
    let x_set = config.state_polytope.build()?;
    let u_set = config.input_constraint.build()?;
    let (cert, tri) = load_artifacts(out_dir)?;
    let x0 = DVector::from_vec(sim.x0.clone());

    let u_field = cert.u_field(&tri)?;
    let v_field = cert.v_field(&tri)?;

    let cpa_ctrl = CpaController {
        tri: &tri,
        field: &u_field,
        u_set: &u_set,
    };
    let cpa_traj = simulate(
        model.as_ref(),
        &cpa_ctrl,
        &x0,
        sim.dt,
        sim.t_final,
        &cert,
        &tri,
        &x_set,
        &u_set,
    )?;

    let m = model.input_dim();
    let mut qp_ctrl = QpController::min_norm(&tri, &v_field, cert.b2, model.as_ref(), &u_set);
    if let Some(diag) = &sim.qp_weight_diag {
        if diag.len() != m {
            return Err(CliError::Config(format!(
                "simulation.qp_weight_diag: expected {m} entries, got {}",
                diag.len()
            )));
        }
        qp_ctrl.h_mat = DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
    }
    if let Some(lin) = &sim.qp_linear {
        if lin.len() != m {
            return Err(CliError::Config(format!(
                "simulation.qp_linear: expected {m} entries, got {}",
                lin.len()
            )));
        }
        qp_ctrl.h_vec = DVector::from_vec(lin.clone());
    }
    let qp_traj = simulate(
        model.as_ref(),
        &qp_ctrl,
        &x0,
        sim.dt,
        sim.t_final,
        &cert,
        &tri,
        &x_set,
        &u_set,
    )?;

    write_text(
        out_dir.join("trajectory_cpa.csv"),
        &trajectory_csv(&cpa_traj),
    )?;
    write_text(out_dir.join("trajectory_qp.csv"), &trajectory_csv(&qp_traj))?;
    let all_ok = |t: &Trajectory| {
        t.complete
            && t.in_region.iter().all(|&b| b)
            && t.in_state_set.iter().all(|&b| b)
            && t.input_admissible.iter().all(|&b| b)
            && t.bound_satisfied.iter().all(|&b| b)
    };
    let report = SettlingReport {
        band: sim.settle_band,
        cpa_settling_time: settling_time(&cpa_traj, sim.settle_band),
        qp_settling_time: settling_time(&qp_traj, sim.settle_band),
        cpa_complete: cpa_traj.complete,
        qp_complete: qp_traj.complete,
        cpa_all_flags_ok: all_ok(&cpa_traj),
        qp_all_flags_ok: all_ok(&qp_traj),
    };
    write_json(out_dir.join("settling_report.json"), &report)?;
    Ok(())
}

/// One row per sample: time, states, inputs, flags.
fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states.first().map(Vec::len).unwrap_or(0);
    let m = traj.inputs.first().map(Vec::len).unwrap_or(0);
    let mut head = vec!["t".to_string()];
    head.extend((1..=n).map(|k| format!("x{k}")));
    head.extend((1..=m).map(|k| format!("u{k}")));
    head.extend(
        ["in_region", "in_state_set", "input_admissible", "bound_satisfied"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut out = head.join(",");
    out.push('\n');
    for k in 0..traj.times.len() {
        let mut row = vec![format!("{}", traj.times[k])];
        row.extend(traj.states[k].iter().map(|v| format!("{v}")));
        row.extend(traj.inputs[k].iter().map(|v| format!("{v}")));
        for flag in [
            traj.in_region[k],
            traj.in_state_set[k],
            traj.input_admissible[k],
            traj.bound_satisfied[k],
        ] {
            row.push(if flag { "1".into() } else { "0".into() });
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn export_plots(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let (cert, tri) = load_artifacts(out_dir)?;
    let x_set = config.state_polytope.build()?;

    // Mesh edges, one segment per row.
    let mut mesh = String::from("x0,y0,x1,y1\n");
    if tri.dim() == 2 {
        for s in tri.simplexes() {
            for a in 0..3 {
                for b in (a + 1)..3 {
                    let p = tri.vertex(s.vertex_ids[a]);
                    let q = tri.vertex(s.vertex_ids[b]);
                    mesh.push_str(&format!("{},{},{},{}\n", p[0], p[1], q[0], q[1]));
                }
            }
        }
    }
    write_text(out_dir.join("mesh_edges.csv"), &mesh)?;

    // Region boundary polyline.
    let mut boundary = String::from("x0,y0,x1,y1\n");
    for seg in &cert.region.boundary_segments {
        boundary.push_str(&format!("{},{},{},{}\n", seg[0], seg[1], seg[2], seg[3]));
    }
    write_text(out_dir.join("region_boundary.csv"), &boundary)?;

    // State polytope outline.
    let mut outline = String::from("x,y\n");
    if x_set.dim() == 2 {
        for v in x_set.vertices() {
            outline.push_str(&format!("{},{}\n", v[0], v[1]));
        }
        if let Some(first) = x_set.vertices().first() {
            outline.push_str(&format!("{},{}\n", first[0], first[1]));
        }
    }
    write_text(out_dir.join("state_polytope.csv"), &outline)?;

    if tri.dim() == 2 {
        let svg = region_svg(&x_set, &tri, &cert);
        write_text(out_dir.join("region.svg"), &svg)?;
    }

    // Time-series SVG when trajectories exist.
    for name in ["trajectory_cpa", "trajectory_qp"] {
        let path = out_dir.join(format!("{name}.csv"));
        if let Ok(text) = fs::read_to_string(&path) {
            let svg = timeseries_svg(&text);
            write_text(out_dir.join(format!("{name}.svg")), &svg)?;
        }
    }
    Ok(())
}

/// Minimal SVG rendering of the mesh, state polytope and region boundary.
fn region_svg(x_set: &Polytope, tri: &Triangulation, cert: &Certificate) -> String {
    let (lo, hi) = x_set.bounding_box();
    let pad = 0.1 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let (x0, y0, x1, y1) = (lo[0] - pad, lo[1] - pad, hi[0] + pad, hi[1] + pad);
    let w = 640.0;
    let h = w * (y1 - y0) / (x1 - x0);
    let sx = move |x: f64| (x - x0) / (x1 - x0) * w;
    let sy = move |y: f64| h - (y - y0) / (y1 - y0) * h;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    );
    for s in tri.simplexes() {
        for a in 0..3 {
            for b in (a + 1)..3 {
                let p = tri.vertex(s.vertex_ids[a]);
                let q = tri.vertex(s.vertex_ids[b]);
                svg.push_str(&format!(
                    "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#ccd\" stroke-width=\"0.5\"/>\n",
                    sx(p[0]), sy(p[1]), sx(q[0]), sy(q[1])
                ));
            }
        }
    }
    let ring = x_set.vertices();
    for i in 0..ring.len() {
        let p = &ring[i];
        let q = &ring[(i + 1) % ring.len()];
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333\" stroke-width=\"1.5\"/>\n",
            sx(p[0]), sy(p[1]), sx(q[0]), sy(q[1])
        ));
    }
    for seg in &cert.region.boundary_segments {
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#c22\" stroke-width=\"1.5\"/>\n",
            sx(seg[0]), sy(seg[1]), sx(seg[2]), sy(seg[3])
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Tiny polyline rendering of a trajectory CSV (states and inputs vs time).
fn timeseries_svg(csv_text: &str) -> String {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in csv_text.lines().skip(1) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|tok| tok.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if vals.len() > 1 {
            rows.push(vals);
        }
    }
    let (w, h) = (640.0, 360.0);
    if rows.is_empty() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"/>");
    }
    let cols = rows[0].len().saturating_sub(4); // trailing flags
    let t_max = rows.last().unwrap()[0].max(1e-9);
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for r in &rows {
        for c in 1..cols {
            v_min = v_min.min(r[c]);
            v_max = v_max.max(r[c]);
        }
    }
    let span = (v_max - v_min).max(1e-9);
    let sx = move |t: f64| t / t_max * (w - 20.0) + 10.0;
    let sy = move |v: f64| h - 10.0 - (v - v_min) / span * (h - 20.0);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    );
    for c in 1..cols {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r[0]), sy(r[c])))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>\n",
            palette[(c - 1) % palette.len()],
            pts.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: PathBuf, text: &str) -> Result<(), CliError> {
    let mut file = fs::File::create(&path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    file.write_all(text.as_bytes())
        .map_err(|source| CliError::Io { path, source })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!(
            "{}: {} at line {}, column {}",
            path.display(),
            e,
            e.line(),
            e.column()
        ))
    })
}

/// Machine-readable error artifact written next to the other outputs.
pub fn write_error_artifact(out_dir: &Path, error: &CliError) {
    #[derive(Serialize)]
    struct ErrorArtifact {
        kind: String,
        message: String,
    }
    let kind = match error {
        CliError::Config(_) => "config",
        CliError::Io { .. } => "io",
        CliError::Geometry(_) => "geometry",
        CliError::System(_) => "system",
        CliError::Expr(_) => "expression",
        CliError::Synthesis(_) => "synthesis",
        CliError::Failure(_) => "synthesis_failure",
        CliError::Runtime(_) => "runtime",
        CliError::Cpa(_) => "cpa",
        CliError::VerificationFailed(_) => "verification",
    };
    let artifact = ErrorArtifact {
        kind: kind.to_string(),
        message: error.to_string(),
    };
    if let Ok(text) = serde_json::to_string_pretty(&artifact) {
        let _ = fs::write(out_dir.join("error.json"), text + "\n");
    }
}
