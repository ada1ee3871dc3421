//! Expression-defined plants.
//!
//! Models in the config are given as arithmetic expression strings
//! (`+ - * / ^`, `sin`, `cos`, `exp`, `abs`, `sqrt`, `min`, `max`) over the
//! state variables `x1..xn`. Derivative bound oracles are expressions over
//! the box corners `lo1..lon`, `hi1..hin`; supplying sound over-bounds is
//! the config author's responsibility (e.g. `4.9*min(1, max(abs(lo1),
//! abs(hi1)))` bounds `|4.9 sin x1|` on any interval).

use meval::{Context, Expr};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::system::{Aabb, ControlAffineModel};

#[derive(Debug, Error)]
pub enum ExprModelError {
    #[error("failed to parse expression `{expr}`: {message}")]
    Parse { expr: String, message: String },
    #[error("expression `{expr}` failed to evaluate: {message}")]
    Eval { expr: String, message: String },
    #[error("drift must vanish at the origin: |f(0)| = {0}")]
    DriftAtOrigin(f64),
    #[error("expected {expected} {what}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Serializable expression-model description (the config schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExprModelSpec {
    pub state_dim: usize,
    pub input_dim: usize,
    /// One expression per state derivative, variables `x1..xn`.
    pub drift: Vec<String>,
    /// Row-major `n x m` input-matrix entries, variables `x1..xn`.
    pub input_matrix: Vec<Vec<String>>,
    /// Bound on the largest drift Hessian entry over a box, variables
    /// `lo1..lon`, `hi1..hin`.
    pub hess_f_bound: String,
    /// Per input column: bound on the largest G-column Hessian entry.
    pub hess_g_bound: Vec<String>,
    /// Per input column: bound on the largest G-column gradient entry.
    pub grad_g_bound: Vec<String>,
}

struct Compiled {
    source: String,
    expr: Expr,
}

impl Compiled {
    fn new(source: &str) -> Result<Self, ExprModelError> {
        let expr: Expr = source.parse().map_err(|e| ExprModelError::Parse {
            expr: source.to_string(),
            message: format!("{e}"),
        })?;
        Ok(Self {
            source: source.to_string(),
            expr,
        })
    }

    fn eval(&self, ctx: &Context) -> Result<f64, ExprModelError> {
        self.expr
            .eval_with_context(ctx)
            .map_err(|e| ExprModelError::Eval {
                expr: self.source.clone(),
                message: format!("{e}"),
            })
    }
}

/// A plant whose evaluators and bound oracles are interpreted expressions.
pub struct ExprModel {
    n: usize,
    m: usize,
    drift: Vec<Compiled>,
    gmat: Vec<Vec<Compiled>>,
    hess_f: Compiled,
    hess_g: Vec<Compiled>,
    grad_g: Vec<Compiled>,
}

impl ExprModel {
    pub fn new(spec: &ExprModelSpec) -> Result<Self, ExprModelError> {
        let (n, m) = (spec.state_dim, spec.input_dim);
        if spec.drift.len() != n {
            return Err(ExprModelError::Shape {
                what: "drift expressions",
                expected: n,
                got: spec.drift.len(),
            });
        }
        if spec.input_matrix.len() != n {
            return Err(ExprModelError::Shape {
                what: "input-matrix rows",
                expected: n,
                got: spec.input_matrix.len(),
            });
        }
        for row in &spec.input_matrix {
            if row.len() != m {
                return Err(ExprModelError::Shape {
                    what: "input-matrix columns",
                    expected: m,
                    got: row.len(),
                });
            }
        }
        for (what, v) in [
            ("hess_g_bound entries", &spec.hess_g_bound),
            ("grad_g_bound entries", &spec.grad_g_bound),
        ] {
            if v.len() != m {
                return Err(ExprModelError::Shape {
                    what,
                    expected: m,
                    got: v.len(),
                });
            }
        }
        let model = Self {
            n,
            m,
            drift: spec
                .drift
                .iter()
                .map(|s| Compiled::new(s))
                .collect::<Result<_, _>>()?,
            gmat: spec
                .input_matrix
                .iter()
                .map(|row| row.iter().map(|s| Compiled::new(s)).collect())
                .collect::<Result<_, _>>()?,
            hess_f: Compiled::new(&spec.hess_f_bound)?,
            hess_g: spec
                .hess_g_bound
                .iter()
                .map(|s| Compiled::new(s))
                .collect::<Result<_, _>>()?,
            grad_g: spec
                .grad_g_bound
                .iter()
                .map(|s| Compiled::new(s))
                .collect::<Result<_, _>>()?,
        };
        // Evaluate everything once to surface unknown variables early, and
        // enforce the equilibrium convention.
        let zero = DVector::zeros(n);
        let f0 = model.try_drift(&zero)?;
        if f0.amax() > 1e-12 {
            return Err(ExprModelError::DriftAtOrigin(f0.amax()));
        }
        let unit = Aabb {
            lo: DVector::from_element(n, -0.1),
            hi: DVector::from_element(n, 0.1),
        };
        model.try_box_eval(&model.hess_f, &unit)?;
        for s in 0..m {
            model.try_box_eval(&model.hess_g[s], &unit)?;
            model.try_box_eval(&model.grad_g[s], &unit)?;
        }
        model.try_gmat(&zero)?;
        Ok(model)
    }

    fn state_ctx(&self, x: &DVector<f64>) -> Context<'static> {
        let mut ctx = Context::new();
        for k in 0..self.n {
            ctx.var(format!("x{}", k + 1), x[k]);
        }
        ctx
    }

    fn box_ctx(&self, bx: &Aabb) -> Context<'static> {
        let mut ctx = Context::new();
        for k in 0..self.n {
            ctx.var(format!("lo{}", k + 1), bx.lo[k]);
            ctx.var(format!("hi{}", k + 1), bx.hi[k]);
        }
        ctx
    }

    fn try_drift(&self, x: &DVector<f64>) -> Result<DVector<f64>, ExprModelError> {
        let ctx = self.state_ctx(x);
        let mut out = DVector::zeros(self.n);
        for (k, e) in self.drift.iter().enumerate() {
            out[k] = e.eval(&ctx)?;
        }
        Ok(out)
    }

    fn try_gmat(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ExprModelError> {
        let ctx = self.state_ctx(x);
        let mut out = DMatrix::zeros(self.n, self.m);
        for r in 0..self.n {
            for c in 0..self.m {
                out[(r, c)] = self.gmat[r][c].eval(&ctx)?;
            }
        }
        Ok(out)
    }

    fn try_box_eval(&self, e: &Compiled, bx: &Aabb) -> Result<f64, ExprModelError> {
        e.eval(&self.box_ctx(bx))
    }
}

impl ControlAffineModel for ExprModel {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.try_drift(x).expect("drift expression evaluation")
    }

    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.try_gmat(x).expect("input-matrix expression evaluation")
    }

    fn hess_f_bound(&self, bx: &Aabb) -> f64 {
        self.try_box_eval(&self.hess_f, bx)
            .expect("hess_f_bound evaluation")
    }

    fn hess_g_bound(&self, bx: &Aabb, s: usize) -> f64 {
        self.try_box_eval(&self.hess_g[s], bx)
            .expect("hess_g_bound evaluation")
    }

    fn grad_g_bound(&self, bx: &Aabb, s: usize) -> f64 {
        self.try_box_eval(&self.grad_g[s], bx)
            .expect("grad_g_bound evaluation")
    }
}
