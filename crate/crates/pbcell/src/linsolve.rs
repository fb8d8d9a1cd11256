//! Sparse symmetric linear solves: direct LDLT factorization at desk scale,
//! Jacobi-preconditioned conjugate gradients beyond it, and a pinned-dof
//! path for the singular pure-Neumann/periodic systems.

use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::fem::{dot, spmv};

/// Above this dof count direct factorization gives way to CG.
pub const DIRECT_DOF_LIMIT: usize = 200_000;

#[derive(Debug, Error)]
pub enum LinSolveError {
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("conjugate gradients stalled after {iters} iterations, residual {residual:e}")]
    NotConverged { iters: usize, residual: f64 },
    #[error("incompatible right-hand side for singular system, defect {0:e}")]
    IncompatibleRhs(f64),
}

/// Solves a symmetric positive definite system to the given relative
/// residual tolerance.
pub fn solve_spd(a: &CsMat<f64>, b: &[f64], tol: f64) -> Result<Vec<f64>, LinSolveError> {
    if a.rows() <= DIRECT_DOF_LIMIT {
        solve_direct(a, b)
    } else {
        solve_cg(a, b, tol)
    }
}

fn solve_direct(a: &CsMat<f64>, b: &[f64]) -> Result<Vec<f64>, LinSolveError> {
    let ldl = sprs_ldl::Ldl::new()
        .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
        .fill_in_reduction(sprs::FillInReduction::ReverseCuthillMcKee)
        .numeric(a.view())
        .map_err(|e| LinSolveError::Factorization(format!("{e:?}")))?;
    let mut x = ldl.solve(b);
    // one step of iterative refinement to shave factorization round-off
    let ax = spmv(a, &x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let dx = ldl.solve(&r);
    for (xi, di) in x.iter_mut().zip(&dx) {
        *xi += di;
    }
    Ok(x)
}

fn solve_cg(a: &CsMat<f64>, b: &[f64], tol: f64) -> Result<Vec<f64>, LinSolveError> {
    let n = a.rows();
    let diag: Vec<f64> = (0..n)
        .map(|i| a.get(i, i).copied().unwrap_or(0.0))
        .collect();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(LinSolveError::Factorization(
            "nonpositive diagonal entry in CG preconditioner".into(),
        ));
    }
    let bnorm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let max_iters = 20 * n;
    for it in 0..max_iters {
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        let ap = spmv(a, &p);
        let alpha = rz / dot(&p, &ap);
        if !alpha.is_finite() {
            return Err(LinSolveError::NotConverged { iters: it, residual: rnorm });
        }
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinSolveError::NotConverged {
        iters: max_iters,
        residual: dot(&r, &r).sqrt(),
    })
}

/// Solves the singular pure-Neumann/periodic system `A x = b` (kernel =
/// constants) and normalizes the mass-weighted mean of `x` to `mean`.
///
/// The right-hand side is projected onto the compatible subspace first; the
/// discarded defect must be below `compat_tol` times the rhs scale.
pub fn solve_singular_neumann(
    a: &CsMat<f64>,
    b: &[f64],
    mass: &[f64],
    mean: f64,
    tol: f64,
    compat_tol: f64,
) -> Result<Vec<f64>, LinSolveError> {
    let n = a.rows();
    let defect: f64 = b.iter().sum();
    let scale = b.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    if defect.abs() > compat_tol * scale {
        return Err(LinSolveError::IncompatibleRhs(defect));
    }
    let shift = defect / n as f64;
    let b_proj: Vec<f64> = b.iter().map(|v| v - shift).collect();

    // pin dof 0: drop its row and column, solve the SPD remainder with x0 = 0
    let mut tri = TriMat::new((n - 1, n - 1));
    for (row, vec) in a.outer_iterator().enumerate() {
        if row == 0 {
            continue;
        }
        for (col, &v) in vec.iter() {
            if col != 0 {
                tri.add_triplet(row - 1, col - 1, v);
            }
        }
    }
    let reduced = tri.to_csr();
    let xr = solve_spd(&reduced, &b_proj[1..], tol)?;
    let mut x = Vec::with_capacity(n);
    x.push(0.0);
    x.extend(xr);

    let total: f64 = mass.iter().sum();
    let current = dot(mass, &x) / total;
    for v in &mut x {
        *v += mean - current;
    }
    Ok(x)
}
