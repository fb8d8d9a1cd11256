//! Nonlinear solves of the periodic-cell Poisson-Boltzmann problems with
//! Neumann (surface charge) and Dirichlet (zeta potential) boundary data,
//! the auxiliary Neumann problem for the L-infinity envelope, and the linear
//! reduced problems of the asymptotic expansions.
//!
//! Everything runs through one damped-Newton loop on the convex energy
//! J(psi) = 1/2 psi'A psi + sum_i m_i E(psi_i) + b'psi with Armijo
//! backtracking, so energy decrease per step is guaranteed.

use std::time::Instant;

use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::electrolyte::{Electrolyte, ElectrolyteError};
use crate::fem::{dot, spmv, FemSpace, Field};
use crate::geometry::{BcKind, CellMesh, SurfaceData};
use crate::linsolve::{self, LinSolveError};

/// Continuation is mandatory outside this beta range.
pub const LADDER_HIGH: f64 = 1e4;
pub const LADDER_LOW: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Residual infinity-norm target.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Backtracking factor of the Armijo line search.
    pub ls_factor: f64,
    /// Sufficient-decrease constant of the Armijo line search.
    pub ls_c: f64,
    pub linear_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            newton_tol: 1e-10,
            max_newton: 50,
            ls_factor: 0.5,
            ls_c: 1e-4,
            linear_tol: 1e-12,
        }
    }
}

/// Convergence record of one nonlinear solve. The energy history is
/// nonincreasing by construction of the line search.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub energy_history: Vec<f64>,
    pub residual_history: Vec<f64>,
    pub final_residual: f64,
    /// |beta int Phi(psi) dy + int_S sigma dS| for Neumann solves.
    pub balance_residual: Option<f64>,
    pub wall_time_s: f64,
}

/// Positive Debye parameter beta = (L / lambda_D)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionlessBeta(f64);

impl DimensionlessBeta {
    pub fn new(beta: f64) -> Result<Self, SolverError> {
        if beta > 0.0 && beta.is_finite() {
            Ok(DimensionlessBeta(beta))
        } else {
            Err(SolverError::BadData(format!("beta must be positive, got {beta}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("Newton stalled after {iterations} iterations, residual {residual:e}")]
    NewtonStalled { iterations: usize, residual: f64 },
    #[error(transparent)]
    LinearSolve(#[from] LinSolveError),
    #[error(transparent)]
    Overflow(#[from] ElectrolyteError),
    #[error("incompatible right-hand side, defect {0:e}")]
    IncompatibleRhs(f64),
    #[error("bad solver input: {0}")]
    BadData(String),
}

/// Pointwise convex nonlinearity: `energy` is the antiderivative of
/// `gradient`, `curvature` its nonnegative derivative.
pub(crate) trait PointNonlinearity {
    fn energy(&self, x: f64) -> Result<f64, ElectrolyteError>;
    fn gradient(&self, x: f64) -> Result<f64, ElectrolyteError>;
    fn curvature(&self, x: f64) -> Result<f64, ElectrolyteError>;
}

/// beta-scaled electrolyte nonlinearity of the full problem.
struct FullNonlinearity<'a> {
    elec: &'a Electrolyte,
    beta: f64,
}

impl PointNonlinearity for FullNonlinearity<'_> {
    fn energy(&self, x: f64) -> Result<f64, ElectrolyteError> {
        Ok(self.beta * self.elec.cpotential(x)?)
    }

    fn gradient(&self, x: f64) -> Result<f64, ElectrolyteError> {
        Ok(self.beta * self.elec.phi(x)?)
    }

    fn curvature(&self, x: f64) -> Result<f64, ElectrolyteError> {
        Ok(self.beta * self.elec.phi_prime(x)?)
    }
}

/// Fixed (Dirichlet) dofs: mask plus prescribed values.
#[derive(Debug, Clone)]
pub(crate) struct FixedDofs {
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

impl FixedDofs {
    /// Fixes every surface dof to the facet zeta value (nodes shared by two
    /// facets take the value of one of them; constant data is unaffected).
    fn from_surface(mesh: &CellMesh, data: &SurfaceData) -> Self {
        let mut mask = vec![false; mesh.n_dofs()];
        let mut values = vec![0.0; mesh.n_dofs()];
        for (k, f) in mesh.facets().iter().enumerate() {
            let d0 = mesh.node_dof(f.nodes[0]);
            mask[d0] = true;
            values[d0] = data.values[k];
            if !f.is_point() {
                let d1 = mesh.node_dof(f.nodes[1]);
                mask[d1] = true;
                values[d1] = data.values[k];
            }
        }
        FixedDofs { mask, values }
    }
}

/// Adds `extra` to the diagonal of `a`, optionally restricted to the free
/// dofs of `fixed`; returns the (possibly reduced) matrix and the map from
/// reduced index to full dof.
fn jacobian_matrix(
    a: &CsMat<f64>,
    extra_diag: &[f64],
    fixed: Option<&FixedDofs>,
) -> (CsMat<f64>, Vec<usize>) {
    let n = a.rows();
    let keep: Vec<usize> = match fixed {
        None => (0..n).collect(),
        Some(f) => (0..n).filter(|&i| !f.mask[i]).collect(),
    };
    let mut pos = vec![usize::MAX; n];
    for (r, &i) in keep.iter().enumerate() {
        pos[i] = r;
    }
    let m = keep.len();
    let mut tri = TriMat::new((m, m));
    for (row, vec) in a.outer_iterator().enumerate() {
        if pos[row] == usize::MAX {
            continue;
        }
        for (col, &v) in vec.iter() {
            if pos[col] != usize::MAX {
                tri.add_triplet(pos[row], pos[col], v);
            }
        }
    }
    for (r, &i) in keep.iter().enumerate() {
        tri.add_triplet(r, r, extra_diag[i]);
    }
    (tri.to_csr(), keep)
}

/// Damped Newton on J over the free dofs. `load` is the linear term b of
/// the energy; `fixed` entries of the iterate are held at their values.
pub(crate) fn newton_solve(
    space: &FemSpace,
    nonlin: &dyn PointNonlinearity,
    load: &[f64],
    fixed: Option<&FixedDofs>,
    x0: Option<&Field>,
    opts: &SolverOptions,
) -> Result<(Field, SolveReport), SolverError> {
    let start = Instant::now();
    let n = space.mesh.n_dofs();
    let mut x = match x0 {
        Some(f) => f.values.clone(),
        None => vec![0.0; n],
    };
    if let Some(f) = fixed {
        for i in 0..n {
            if f.mask[i] {
                x[i] = f.values[i];
            }
        }
    }

    let energy = |x: &[f64]| -> Result<f64, ElectrolyteError> {
        let mut e = 0.5 * dot(x, &spmv(&space.stiffness, x)) + dot(load, x);
        for (m, &xi) in space.mass.iter().zip(x) {
            e += m * nonlin.energy(xi)?;
        }
        Ok(e)
    };
    // absolute-value majorant of the energy terms: decreases smaller than
    // round-off on this scale cannot be resolved by the line search
    let energy_major = |x: &[f64]| -> Result<f64, ElectrolyteError> {
        let mut e = 0.0;
        for (row, vec) in space.stiffness.outer_iterator().enumerate() {
            let mut sa = 0.0;
            for (col, &v) in vec.iter() {
                sa += (v * x[col]).abs();
            }
            e += 0.5 * (sa * x[row]).abs() + (load[row] * x[row]).abs();
        }
        for (m, &xi) in space.mass.iter().zip(x) {
            e += (m * nonlin.energy(xi)?).abs();
        }
        Ok(e)
    };

    let mut energy_history = Vec::new();
    let mut residual_history = Vec::new();
    let mut iterations = 0;
    let mut polished = false;
    loop {
        // gradient of J plus an absolute-value majorant of its terms; the
        // majorant bounds the cancellation round-off and caps how small a
        // residual can meaningfully get
        let mut grad = vec![0.0; n];
        let mut major = vec![0.0; n];
        for (row, vec) in space.stiffness.outer_iterator().enumerate() {
            let mut s = 0.0;
            let mut sa = 0.0;
            for (col, &v) in vec.iter() {
                s += v * x[col];
                sa += (v * x[col]).abs();
            }
            grad[row] = s;
            major[row] = sa;
        }
        let mut curv = vec![0.0; n];
        for i in 0..n {
            let g = space.mass[i] * nonlin.gradient(x[i])?;
            grad[i] += g + load[i];
            major[i] += g.abs() + load[i].abs();
            curv[i] = space.mass[i] * nonlin.curvature(x[i])?;
            if curv[i] < 0.0 {
                return Err(SolverError::BadData(format!(
                    "negative curvature {} at dof {i}",
                    curv[i]
                )));
            }
        }
        let free = |i: &usize| fixed.map_or(true, |f| !f.mask[*i]);
        let res = (0..n)
            .filter(free)
            .map(|i| grad[i].abs())
            .fold(0.0_f64, f64::max);
        let major_max = (0..n).filter(free).map(|i| major[i]).fold(0.0_f64, f64::max);
        let tight = res <= opts.newton_tol;
        // per-dof floors: each row's residual is only meaningful down to the
        // round-off of its own terms, which varies by orders of magnitude on
        // graded meshes; the floors only apply once iteration stops improving,
        // so well-conditioned problems still converge to the full tolerance
        let floored = (0..n).filter(free).all(|i| {
            grad[i].abs() <= opts.newton_tol.max(64.0 * f64::EPSILON * major[i])
        });
        residual_history.push(res);
        energy_history.push(energy(&x)?);

        // stagnation at a residual that is tiny relative to the term
        // magnitudes means the linear solves are round-off limited
        let k = residual_history.len();
        let stagnated = k >= 3 && residual_history[k - 3] < 2.0 * res;
        let roundoff_limited =
            stagnated && (floored || res <= 4096.0 * f64::EPSILON * major_max.max(1.0));
        if roundoff_limited {
            break;
        }
        if tight {
            if polished {
                break;
            }
            // one extra step after reaching tolerance scrubs the correlated
            // part of the residual, which would otherwise bias integral
            // quantities such as the charge balance
            polished = true;
        }
        if iterations >= opts.max_newton {
            return Err(SolverError::NewtonStalled { iterations, residual: res });
        }

        let (jac, keep) = jacobian_matrix(&space.stiffness, &curv, fixed);
        let rhs: Vec<f64> = keep.iter().map(|&i| -grad[i]).collect();
        let delta_r = linsolve::solve_spd(&jac, &rhs, opts.linear_tol)?;
        let mut delta = vec![0.0; n];
        for (r, &i) in keep.iter().enumerate() {
            delta[i] = delta_r[r];
        }

        // Armijo backtracking on J; overflowing trials are treated as
        // infinite energy and rejected.
        let slope = dot(&grad, &delta);
        let j0 = *energy_history.last().unwrap();
        // when the Armijo decrease is below energy round-off the test cannot
        // resolve progress; take the full Newton step (quadratic phase)
        let unresolvable = opts.ls_c * slope.abs() <= 16.0 * f64::EPSILON * energy_major(&x)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..80 {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(xi, di)| xi + t * di).collect();
            if let Ok(jt) = energy(&trial) {
                if unresolvable || jt <= j0 + opts.ls_c * t * slope {
                    x = trial;
                    accepted = true;
                    break;
                }
            }
            t *= opts.ls_factor;
        }
        if !accepted {
            // no descent direction left: declare convergence if the residual
            // sits inside the round-off band of its own terms, else give up
            if res <= 4096.0 * f64::EPSILON * major_max.max(1.0) {
                break;
            }
            return Err(SolverError::NewtonStalled { iterations, residual: res });
        }
        iterations += 1;
    }

    let report = SolveReport {
        iterations,
        final_residual: *residual_history.last().unwrap(),
        energy_history,
        residual_history,
        balance_residual: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((Field { values: x }, report))
}

/// Solves the Neumann problem -Delta psi + beta Phi(psi) = 0, grad psi . n =
/// -sigma on S, periodic outside, by Newton on the convex energy.
pub fn solve_neumann(
    space: &FemSpace,
    elec: &Electrolyte,
    data: &SurfaceData,
    beta: DimensionlessBeta,
    opts: &SolverOptions,
    warm_start: Option<&Field>,
) -> Result<(Field, SolveReport), SolverError> {
    if data.kind != BcKind::Sigma {
        return Err(SolverError::BadData("Neumann solve needs sigma data".into()));
    }
    let b = crate::fem::assemble_surface_load(space.mesh, data);
    let nl = FullNonlinearity { elec, beta: beta.get() };
    let (field, mut report) = newton_solve(space, &nl, &b, None, warm_start, opts)?;
    let mut phi_int = 0.0;
    for (m, &v) in space.mass.iter().zip(&field.values) {
        phi_int += m * elec.phi(v)?;
    }
    let sigma_int = crate::geometry::surface_integral(space.mesh, data);
    report.balance_residual = Some((beta.get() * phi_int + sigma_int).abs());
    Ok((field, report))
}

/// Solves the Dirichlet problem with psi = zeta on S imposed by dof
/// elimination, periodic outside.
pub fn solve_dirichlet(
    space: &FemSpace,
    elec: &Electrolyte,
    data: &SurfaceData,
    beta: DimensionlessBeta,
    opts: &SolverOptions,
    warm_start: Option<&Field>,
) -> Result<(Field, SolveReport), SolverError> {
    if data.kind != BcKind::Zeta {
        return Err(SolverError::BadData("Dirichlet solve needs zeta data".into()));
    }
    let fixed = FixedDofs::from_surface(space.mesh, data);
    let b = vec![0.0; space.mesh.n_dofs()];
    let nl = FullNonlinearity { elec, beta: beta.get() };
    newton_solve(space, &nl, &b, Some(&fixed), warm_start, opts)
}

/// Solves the auxiliary Neumann problem -Delta U = mean(sigma), grad U . n =
/// -sigma, periodic, with zero mean over the fluid domain.
pub fn solve_auxiliary_u(space: &FemSpace, data: &SurfaceData) -> Result<Field, SolverError> {
    if data.kind != BcKind::Sigma {
        return Err(SolverError::BadData("auxiliary problem needs sigma data".into()));
    }
    let b = crate::fem::assemble_surface_load(space.mesh, data);
    let sigma_int = crate::geometry::surface_integral(space.mesh, data);
    let area: f64 = space.mass.iter().sum();
    let sigma_bar = sigma_int / area;
    // A U = sigma_bar M 1 - b_sigma, compatible by construction
    let rhs: Vec<f64> = space
        .mass
        .iter()
        .zip(&b)
        .map(|(m, bi)| sigma_bar * m - bi)
        .collect();
    let x = linsolve::solve_singular_neumann(&space.stiffness, &rhs, &space.mass, 0.0, 1e-12, 1e-8)?;
    Ok(Field { values: x })
}

/// Boundary handling of the linear reduced problems.
#[derive(Debug, Clone, Copy)]
pub enum ReducedBc {
    /// Pure Neumann/periodic with zero flux on S; if the reaction vanishes
    /// the solution is normalized to zero mean.
    ZeroFlux,
    /// Homogeneous Dirichlet values on S.
    DirichletZero,
}

/// Solves (A + M diag(reaction)) x = rhs for the linear reduced and
/// corrector problems of the asymptotic expansions.
pub fn solve_linear_reduced(
    space: &FemSpace,
    reaction: &[f64],
    rhs: &[f64],
    bc: ReducedBc,
    linear_tol: f64,
) -> Result<Field, SolverError> {
    let n = space.mesh.n_dofs();
    if reaction.len() != n || rhs.len() != n {
        return Err(SolverError::BadData("reaction/rhs size mismatch".into()));
    }
    if let Some(i) = reaction.iter().position(|&r| r < 0.0) {
        return Err(SolverError::BadData(format!(
            "negative reaction coefficient {} at dof {i}",
            reaction[i]
        )));
    }
    let extra: Vec<f64> = space
        .mass
        .iter()
        .zip(reaction)
        .map(|(m, r)| m * r)
        .collect();
    match bc {
        ReducedBc::ZeroFlux => {
            let singular = reaction.iter().all(|&r| r == 0.0);
            if singular {
                let defect: f64 = rhs.iter().sum();
                if defect.abs() > 1e-10 * rhs.iter().map(|v| v.abs()).sum::<f64>().max(1.0) {
                    return Err(SolverError::IncompatibleRhs(defect));
                }
                let x = linsolve::solve_singular_neumann(
                    &space.stiffness,
                    rhs,
                    &space.mass,
                    0.0,
                    linear_tol,
                    1e-9,
                )?;
                Ok(Field { values: x })
            } else {
                let (jac, _) = jacobian_matrix(&space.stiffness, &extra, None);
                let x = linsolve::solve_spd(&jac, rhs, linear_tol)?;
                Ok(Field { values: x })
            }
        }
        ReducedBc::DirichletZero => {
            let mut mask = vec![false; n];
            for f in space.mesh.facets() {
                mask[space.mesh.node_dof(f.nodes[0])] = true;
                if !f.is_point() {
                    mask[space.mesh.node_dof(f.nodes[1])] = true;
                }
            }
            let fixed = FixedDofs { mask, values: vec![0.0; n] };
            let (jac, keep) = jacobian_matrix(&space.stiffness, &extra, Some(&fixed));
            let rhs_r: Vec<f64> = keep.iter().map(|&i| rhs[i]).collect();
            let xr = linsolve::solve_spd(&jac, &rhs_r, linear_tol)?;
            let mut x = vec![0.0; n];
            for (r, &i) in keep.iter().enumerate() {
                x[i] = xr[r];
            }
            Ok(Field { values: x })
        }
    }
}

/// Solves at `beta_target` along a geometric beta-ladder (factor 10) from
/// beta = 1, warm-starting each rung; required above 1e4 and below 1e-4.
pub fn continuation_solve(
    space: &FemSpace,
    elec: &Electrolyte,
    data: &SurfaceData,
    beta_target: f64,
    opts: &SolverOptions,
) -> Result<(Field, SolveReport), SolverError> {
    let target = DimensionlessBeta::new(beta_target)?;
    let solve_at = |beta: DimensionlessBeta,
                    warm: Option<&Field>|
     -> Result<(Field, SolveReport), SolverError> {
        match data.kind {
            BcKind::Sigma => solve_neumann(space, elec, data, beta, opts, warm),
            BcKind::Zeta => solve_dirichlet(space, elec, data, beta, opts, warm),
        }
    };
    let mut rungs = vec![];
    let mut b = 1.0;
    if beta_target > 1.0 {
        while b * 10.0 < beta_target {
            b *= 10.0;
            rungs.push(b);
        }
    } else if beta_target < 1.0 {
        while b * 0.1 > beta_target {
            b *= 0.1;
            rungs.push(b);
        }
    }
    let mut current: Option<Field> = None;
    if !rungs.is_empty() || (beta_target - 1.0).abs() > 0.0 {
        let (f, _) = solve_at(DimensionlessBeta::new(1.0)?, None)?;
        current = Some(f);
    }
    for b in rungs {
        let (f, _) = solve_at(DimensionlessBeta::new(b)?, current.as_ref())?;
        current = Some(f);
    }
    solve_at(target, current.as_ref())
}
