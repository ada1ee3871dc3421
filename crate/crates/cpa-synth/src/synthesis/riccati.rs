//! Continuous algebraic Riccati equation solver for the LQR initialization.
//!
//! `A'P + PA - P B R^{-1} B' P + Q = 0`, solved via the matrix sign function
//! of the Hamiltonian with determinant scaling, followed by Newton polish
//! steps (each a Kronecker-product Lyapunov solve) to push the residual to
//! machine precision.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("matrix sign iteration did not converge")]
    SignIterationDiverged,
    #[error("Hamiltonian is singular during sign iteration")]
    SingularIterate,
    #[error("stable subspace extraction failed")]
    SubspaceExtraction,
    #[error("no stabilizing solution: {0}")]
    NotStabilizing(String),
}

/// Solves the CARE and returns the stabilizing positive-definite `P`.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| RiccatiError::NotStabilizing("R is singular".into()))?;
    let s_mat = b * &r_inv * b.transpose();

    // Hamiltonian [[A, -S], [-Q, -A']].
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-&s_mat));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    // Newton iteration for sign(H) with determinant scaling.
    let mut s = ham.clone();
    let mut converged = false;
    for _ in 0..100 {
        let det = s.determinant().abs();
        if !det.is_finite() || det == 0.0 {
            return Err(RiccatiError::SingularIterate);
        }
        let c = det.powf(1.0 / (2.0 * n as f64));
        let scaled = &s / c;
        let inv = scaled
            .clone()
            .try_inverse()
            .ok_or(RiccatiError::SingularIterate)?;
        let next = (&scaled + &inv) * 0.5;
        let delta = (&next - &s).norm() / (1.0 + s.norm());
        s = next;
        if delta < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RiccatiError::SignIterationDiverged);
    }

    // Stable subspace: (S + I) [I; P] = 0, solved in least squares.
    let s11 = s.view((0, 0), (n, n)).into_owned();
    let s12 = s.view((0, n), (n, n)).into_owned();
    let s21 = s.view((n, 0), (n, n)).into_owned();
    let s22 = s.view((n, n), (n, n)).into_owned();
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&s12);
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(&s22 + DMatrix::identity(n, n)));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(&s11 + DMatrix::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-&s21));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|_| RiccatiError::SubspaceExtraction)?;
    let mut p = (&p + p.transpose()) * 0.5;

    // Newton polish: (A - S P)' D + D (A - S P) = -residual(P).
    for _ in 0..3 {
        let res = care_residual(a, &s_mat, q, &p);
        if res.norm() < 1e-13 {
            break;
        }
        let acl = a - &s_mat * &p;
        if let Some(d) = solve_lyapunov(&acl.transpose(), &(-&res)) {
            p += &d;
            p = (&p + p.transpose()) * 0.5;
        } else {
            break;
        }
    }

    // Validate: symmetric positive definite and stabilizing.
    let eigs = p.symmetric_eigenvalues();
    if eigs.iter().any(|&e| e <= 0.0) {
        return Err(RiccatiError::NotStabilizing(
            "P is not positive definite".into(),
        ));
    }
    let acl = a - &s_mat * &p;
    let cl_eigs = acl.complex_eigenvalues();
    if cl_eigs.iter().any(|e| e.re >= -1e-12) {
        return Err(RiccatiError::NotStabilizing(
            "closed loop is not Hurwitz".into(),
        ));
    }
    Ok(p)
}

/// `A'P + PA - P S P + Q` with `S = B R^{-1} B'`.
pub fn care_residual(
    a: &DMatrix<f64>,
    s_mat: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * s_mat * p + q
}

/// Solves `M' X + X M = C` by the Kronecker linear system (small n only).
fn solve_lyapunov(m_t: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m_t.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(M'X) = (I (x) M') vec(X), vec(X M) = (M' (x) I) vec(X).
    let big = eye.kronecker(m_t) + m_t.kronecker(&eye);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = big.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_care_closed_form() {
        // A = -1, B = 1, Q = 1, R = 1: P^2 + 2P - 1 = 0, P = sqrt(2) - 1.
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let p = solve_care(&a, &b, &q, &r).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 2.0_f64.sqrt() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pendulum_care_residual() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 4.9, -0.3]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2) * 2.0;
        let r = DMatrix::identity(1, 1);
        let p = solve_care(&a, &b, &q, &r).unwrap();
        let s = &b * &b.transpose();
        let res = care_residual(&a, &s, &q, &p);
        assert!(res.norm() < 1e-8, "residual {}", res.norm());
        // Stabilizing gain: the closed loop must be Hurwitz.
        let k = b.transpose() * &p;
        let acl = &a - &b * k;
        for e in acl.complex_eigenvalues().iter() {
            assert!(e.re < 0.0);
        }
        // P is positive definite with both eigenvalues positive.
        for e in p.symmetric_eigenvalues().iter() {
            assert!(*e > 0.0);
        }
    }

    #[test]
    fn lyapunov_kronecker_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0]);
        let x = solve_lyapunov(&m.transpose(), &c).unwrap();
        let res = m.transpose() * &x + &x * &m - c;
        assert!(res.norm() < 1e-12);
    }

    #[test]
    fn unstabilizable_pair_rejected() {
        // B = 0 cannot stabilize an unstable A.
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 0.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        assert!(solve_care(&a, &b, &q, &r).is_err());
    }
}
