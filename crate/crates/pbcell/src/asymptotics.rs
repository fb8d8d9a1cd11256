//! Asymptotic approximations of the cell problem in the Debye parameter:
//! small-beta reduced problems and correctors for all three signs of the
//! total surface charge, and large-beta boundary-layer fields for both
//! boundary conditions (exponential Neumann profile, first-integral ODE
//! profile in the Dirichlet case).

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::electrolyte::{Electrolyte, ElectrolyteError, EXP_CAP};
use crate::fem::{FemSpace, Field};
use crate::geometry::{surface_integral, BcKind, SurfaceData};
use crate::solver::{self, ReducedBc, SolverError, SolverOptions};

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("surface charge sign is incompatible with case {0:?}")]
    WrongSign(SmallBetaCase),
    #[error("integral identity violated: defect {0:e}")]
    IdentityViolated(f64),
    #[error("expected {0} boundary data")]
    WrongBcKind(&'static str),
    #[error("zeta must be constant per facet set, found values {0} and {1}")]
    NonConstantZeta(f64, f64),
    #[error("electrolyte needs at least {0} species for this corrector")]
    TooFewSpecies(usize),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Electrolyte(#[from] ElectrolyteError),
}

/// Sign classification of the total surface charge, which selects the
/// structure of the small-beta expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallBetaCase {
    NegativeMean,
    PositiveMean,
    ZeroMean,
}

impl SmallBetaCase {
    /// Valence of the species dominating the singular part: the most
    /// negative one when the surface is negatively charged, the most
    /// positive one in the opposite case.
    pub fn dominant_valence(self, e: &Electrolyte) -> Option<i32> {
        match self {
            SmallBetaCase::NegativeMean => Some(e.most_negative_valence()),
            SmallBetaCase::PositiveMean => Some(e.most_positive_valence()),
            SmallBetaCase::ZeroMean => None,
        }
    }
}

/// Sign tolerance for the classification: 1e-10 times the surface measure.
pub fn mean_tol(mesh: &crate::geometry::CellMesh) -> f64 {
    1e-10 * mesh.surface_measure()
}

pub fn classify_small_beta(
    mesh: &crate::geometry::CellMesh,
    data: &SurfaceData,
) -> SmallBetaCase {
    let total = surface_integral(mesh, data);
    let tol = mean_tol(mesh);
    if total < -tol {
        SmallBetaCase::NegativeMean
    } else if total > tol {
        SmallBetaCase::PositiveMean
    } else {
        SmallBetaCase::ZeroMean
    }
}

/// Single-species convex nonlinearity n e^{-z x} of the reduced problem.
struct ReducedNonlinearity {
    z: f64,
    n: f64,
}

impl solver::PointNonlinearity for ReducedNonlinearity {
    fn energy(&self, x: f64) -> Result<f64, ElectrolyteError> {
        let a = -self.z * x;
        if a > EXP_CAP {
            return Err(ElectrolyteError::Overflow(x));
        }
        Ok(self.n * a.exp())
    }

    fn gradient(&self, x: f64) -> Result<f64, ElectrolyteError> {
        Ok(-self.z * self.energy(x)?)
    }

    fn curvature(&self, x: f64) -> Result<f64, ElectrolyteError> {
        Ok(self.z * self.z * self.energy(x)?)
    }
}

fn dominant_species(e: &Electrolyte, case: SmallBetaCase) -> Option<(f64, f64)> {
    case.dominant_valence(e).map(|z| {
        let n = e
            .species()
            .iter()
            .find(|s| s.valence == z)
            .map(|s| s.concentration)
            .unwrap();
        (z as f64, n)
    })
}

/// Next-strongest species on the dominant side: z2 when z1 dominates, the
/// second-most-positive valence in the positive case.
fn subdominant_species(e: &Electrolyte, case: SmallBetaCase) -> Option<(f64, f64)> {
    let sp = e.species();
    match case {
        SmallBetaCase::NegativeMean if sp.len() >= 2 => {
            Some((sp[1].valence as f64, sp[1].concentration))
        }
        SmallBetaCase::PositiveMean if sp.len() >= 2 => {
            let s = &sp[sp.len() - 2];
            Some((s.valence as f64, s.concentration))
        }
        _ => None,
    }
}

/// Solves the reduced problem -Delta phi0 - z n e^{-z phi0} = 0 with the
/// surface flux of the full problem, z the dominant valence, and post-checks
/// the integral identity z n int e^{-z phi0} = int_S sigma dS.
pub fn solve_phi0(
    space: &FemSpace,
    e: &Electrolyte,
    data: &SurfaceData,
    case: SmallBetaCase,
    opts: &SolverOptions,
) -> Result<Field, AsymptoticsError> {
    if data.kind != BcKind::Sigma {
        return Err(AsymptoticsError::WrongBcKind("sigma"));
    }
    let total = surface_integral(space.mesh, data);
    let tol = mean_tol(space.mesh);
    let compatible = match case {
        SmallBetaCase::NegativeMean => total < -tol,
        SmallBetaCase::PositiveMean => total > tol,
        SmallBetaCase::ZeroMean => false,
    };
    if !compatible {
        return Err(AsymptoticsError::WrongSign(case));
    }
    let (z, n) = dominant_species(e, case).unwrap();
    let nl = ReducedNonlinearity { z, n };
    let b = crate::fem::assemble_surface_load(space.mesh, data);
    let (phi0, _) = solver::newton_solve(space, &nl, &b, None, None, opts)?;

    let mut mass_exp = 0.0;
    for (m, &v) in space.mass.iter().zip(&phi0.values) {
        mass_exp += m * (-z * v).exp();
    }
    let defect = z * n * mass_exp - total;
    if defect.abs() > 1e-8 * total.abs().max(1.0) {
        return Err(AsymptoticsError::IdentityViolated(defect));
    }
    Ok(phi0)
}

/// Solves the linear corrector problem
/// -Delta phi1 + z^2 n e^{-z phi0} phi1 = z' n' e^{-z' phi0}, zero flux,
/// with (z, n) the dominant and (z', n') the subdominant species.
pub fn solve_phi1(
    space: &FemSpace,
    e: &Electrolyte,
    phi0: &Field,
    case: SmallBetaCase,
    linear_tol: f64,
) -> Result<Field, AsymptoticsError> {
    let (z, n) = dominant_species(e, case).ok_or(AsymptoticsError::WrongSign(case))?;
    let (z2, n2) = subdominant_species(e, case).ok_or(AsymptoticsError::TooFewSpecies(2))?;
    let reaction: Vec<f64> = phi0
        .values
        .iter()
        .map(|&v| z * z * n * (-z * v).exp())
        .collect();
    let rhs: Vec<f64> = space
        .mass
        .iter()
        .zip(&phi0.values)
        .map(|(m, &v)| m * z2 * n2 * (-z2 * v).exp())
        .collect();
    Ok(solver::solve_linear_reduced(
        space,
        &reaction,
        &rhs,
        ReducedBc::ZeroFlux,
        linear_tol,
    )?)
}

/// The zero-total-charge limit: Psi0 harmonic with the surface flux and its
/// additive constant fixed by int Phi(Psi0) = 0; Psi1 solves
/// -Delta Psi1 = -Phi(Psi0) with the constant fixed by
/// int Phi'(Psi0) Psi1 = 0.
pub fn solve_zero_mean_limit(
    space: &FemSpace,
    e: &Electrolyte,
    data: &SurfaceData,
    linear_tol: f64,
) -> Result<(Field, Field), AsymptoticsError> {
    if data.kind != BcKind::Sigma {
        return Err(AsymptoticsError::WrongBcKind("sigma"));
    }
    let total = surface_integral(space.mesh, data);
    if total.abs() > mean_tol(space.mesh) {
        return Err(AsymptoticsError::Solver(SolverError::IncompatibleRhs(total)));
    }
    let b = crate::fem::assemble_surface_load(space.mesh, data);
    let rhs: Vec<f64> = b.iter().map(|v| -v).collect();
    let zero = vec![0.0; space.mesh.n_dofs()];
    let psi0_raw = solver::solve_linear_reduced(space, &zero, &rhs, ReducedBc::ZeroFlux, linear_tol)?;

    // fix the constant by the strictly increasing map c -> int Phi(psi + c)
    let f = |c: f64| -> Result<f64, ElectrolyteError> {
        let mut s = 0.0;
        for (m, &v) in space.mass.iter().zip(&psi0_raw.values) {
            s += m * e.phi(v + c)?;
        }
        Ok(s)
    };
    let c0 = monotone_root(&f)?;
    let psi0 = psi0_raw.shifted(c0);

    let mut phi_vals = Vec::with_capacity(psi0.values.len());
    for &v in &psi0.values {
        phi_vals.push(e.phi(v)?);
    }
    let rhs1: Vec<f64> = space
        .mass
        .iter()
        .zip(&phi_vals)
        .map(|(m, p)| -m * p)
        .collect();
    let psi1_raw = solver::solve_linear_reduced(space, &zero, &rhs1, ReducedBc::ZeroFlux, linear_tol)?;
    // normalize: int Phi'(Psi0) (Psi1 + c) = 0
    let mut wsum = 0.0;
    let mut wval = 0.0;
    for ((m, &v0), &v1) in space.mass.iter().zip(&psi0.values).zip(&psi1_raw.values) {
        let w = m * e.phi_prime(v0)?;
        wsum += w;
        wval += w * v1;
    }
    let psi1 = psi1_raw.shifted(-wval / wsum);
    Ok((psi0, psi1))
}

/// Root of a strictly increasing scalar function by bracket growth,
/// bisection, and a Newton-free polish.
fn monotone_root(f: &dyn Fn(f64) -> Result<f64, ElectrolyteError>) -> Result<f64, ElectrolyteError> {
    let mut lo = -1.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        if f(lo)? <= 0.0 {
            break;
        }
        lo *= 2.0;
    }
    for _ in 0..200 {
        if f(hi)? >= 0.0 {
            break;
        }
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The singular logarithmic shift (log beta)/z of the signed cases.
pub fn singular_shift(case: SmallBetaCase, e: &Electrolyte, beta: f64) -> f64 {
    match case.dominant_valence(e) {
        Some(z) => beta.ln() / z as f64,
        None => 0.0,
    }
}

/// Exponent of the first corrector term: 1 - z2/z1 (or its positive-side
/// mirror image).
pub fn corrector_exponent(case: SmallBetaCase, e: &Electrolyte) -> Option<f64> {
    let (z, _) = dominant_species(e, case)?;
    let (z2, _) = subdominant_species(e, case)?;
    Some(1.0 - z2 / z)
}

/// Assembles the small-beta approximant at a given beta: the log shift plus
/// phi0 (plus the beta-power corrector) for signed cases, Psi0 (+ beta Psi1)
/// for the zero-mean case.
pub fn small_beta_approximant(
    case: SmallBetaCase,
    e: &Electrolyte,
    base: &Field,
    corrector: Option<&Field>,
    beta: f64,
) -> Field {
    match case {
        SmallBetaCase::ZeroMean => match corrector {
            Some(c) => base.plus_scaled(beta, c),
            None => base.clone(),
        },
        _ => {
            let shifted = base.shifted(singular_shift(case, e, beta));
            match corrector {
                Some(c) => {
                    let p = corrector_exponent(case, e).unwrap();
                    shifted.plus_scaled(beta.powf(p), c)
                }
                None => shifted,
            }
        }
    }
}

/// The Neumann boundary-layer field
/// -sigma / sqrt(beta Phi'(0)) * exp(-d(y) sqrt(beta Phi'(0)))
/// with sigma taken at the nearest surface facet.
pub fn neumann_layer_field(
    space: &FemSpace,
    e: &Electrolyte,
    data: &SurfaceData,
    beta: f64,
) -> Result<Field, AsymptoticsError> {
    if data.kind != BcKind::Sigma {
        return Err(AsymptoticsError::WrongBcKind("sigma"));
    }
    let k = (beta * e.phi_prime_zero()).sqrt();
    let mesh = space.mesh;
    let values = mesh
        .dof_nodes()
        .iter()
        .map(|&node| {
            let sigma = data.values[mesh.nearest_surface(node)];
            -sigma / k * (-k * mesh.distance(node)).exp()
        })
        .collect();
    Ok(Field { values })
}

/// Screening and amplitude constants of the Dirichlet layer decay bounds:
/// C_s = min(anion, cation screening sums), C_0 = 2 max |Phi(zeta)|.
#[derive(Debug, Clone, Copy)]
pub struct DecayConstants {
    pub c_s: f64,
    pub c_0: f64,
}

impl DecayConstants {
    pub fn new(e: &Electrolyte, zeta_max_abs: f64) -> Result<Self, ElectrolyteError> {
        let c_s = e.anion_screening().min(e.cation_screening());
        let c_0 = 2.0 * e.phi(zeta_max_abs)?.abs().max(e.phi(-zeta_max_abs)?.abs());
        Ok(DecayConstants { c_s, c_0 })
    }
}

/// The semi-infinite layer profile Psi_{0,zeta}: solution of
/// Psi'' = Phi(Psi), Psi(0) = zeta, Psi(inf) = 0, integrated through its
/// first integral Psi' = -sign(zeta) sqrt(2 (C(Psi) - C(0))).
#[derive(Debug, Clone)]
pub struct LayerProfile {
    pub zeta: f64,
    pub xi_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub derivative_at_0: f64,
}

/// Switch to the linearized exponential tail below this fraction of |zeta|.
const LINEAR_SWITCH: f64 = 1e-8;
/// Fine spacing near the wall where the profile curvature is largest.
const H_FINE: f64 = 4e-5;
/// Coarse spacing in the exponential tail.
const H_COARSE: f64 = 1e-3;

/// C(x) - C(0) without cancellation, via expm1.
fn cgap(e: &Electrolyte, x: f64) -> Result<f64, ElectrolyteError> {
    let mut s = 0.0;
    for sp in e.species() {
        let a = -(sp.valence as f64) * x;
        if a > EXP_CAP {
            return Err(ElectrolyteError::Overflow(x));
        }
        s += sp.concentration * a.exp_m1();
    }
    Ok(s)
}

impl LayerProfile {
    pub fn compute(e: &Electrolyte, zeta: f64) -> Result<Self, AsymptoticsError> {
        let c_s = e.anion_screening().min(e.cation_screening());
        let xi_max = (40.0 / c_s.sqrt()).max(20.0);
        let sqrt_phi0 = e.phi_prime_zero().sqrt();

        // piecewise-uniform grid: fine where the profile is steep, coarse in
        // the tail; the fine zone ends once the decay bound guarantees
        // |Psi| <~ 1e-6 |zeta|
        let xi_fine_end = (14.0 / c_s.sqrt() + 1.0).min(xi_max);
        let n_fine = (xi_fine_end / H_FINE).ceil() as usize;
        let h_fine = xi_fine_end / n_fine as f64;
        let n_coarse = ((xi_max - xi_fine_end) / H_COARSE).ceil() as usize;
        let h_coarse = (xi_max - xi_fine_end) / n_coarse as f64;

        let mut xi_grid = Vec::with_capacity(n_fine + n_coarse + 1);
        for i in 0..=n_fine {
            xi_grid.push(i as f64 * h_fine);
        }
        for i in 1..=n_coarse {
            xi_grid.push(xi_fine_end + i as f64 * h_coarse);
        }

        if zeta == 0.0 {
            let n = xi_grid.len();
            return Ok(LayerProfile {
                zeta,
                xi_grid,
                values: vec![0.0; n],
                derivative_at_0: 0.0,
            });
        }

        let sign = zeta.signum();
        let rhs = |psi: f64| -> Result<f64, ElectrolyteError> {
            Ok(-sign * (2.0 * cgap(e, psi)?.max(0.0)).sqrt())
        };
        let derivative_at_0 = rhs(zeta)?;

        let mut values = Vec::with_capacity(xi_grid.len());
        values.push(zeta);
        let mut psi = zeta;
        let mut tail_from: Option<(usize, f64, f64)> = None;
        for w in xi_grid.windows(2) {
            let h = w[1] - w[0];
            if let Some((_, psi_s, xi_s)) = tail_from {
                values.push(psi_s * (-sqrt_phi0 * (w[1] - xi_s)).exp());
                continue;
            }
            // classical RK4 on the autonomous first-order ODE
            let k1 = rhs(psi)?;
            let k2 = rhs(psi + 0.5 * h * k1)?;
            let k3 = rhs(psi + 0.5 * h * k2)?;
            let k4 = rhs(psi + h * k3)?;
            psi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            values.push(psi);
            if psi.abs() < LINEAR_SWITCH * zeta.abs() {
                tail_from = Some((values.len() - 1, psi, w[1]));
            }
        }
        Ok(LayerProfile { zeta, xi_grid, values, derivative_at_0 })
    }

    /// Linear interpolation of the profile; zero beyond the grid.
    pub fn eval(&self, xi: f64) -> f64 {
        if xi <= 0.0 {
            return self.zeta;
        }
        let last = *self.xi_grid.last().unwrap();
        if xi >= last {
            return 0.0;
        }
        let i = match self
            .xi_grid
            .binary_search_by(|x| x.partial_cmp(&xi).unwrap())
        {
            Ok(i) => return self.values[i],
            Err(i) => i,
        };
        let (x0, x1) = (self.xi_grid[i - 1], self.xi_grid[i]);
        let t = (xi - x0) / (x1 - x0);
        self.values[i - 1] * (1.0 - t) + self.values[i] * t
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        writeln!(out, "pblayer 1 {}", self.xi_grid.len()).unwrap();
        for (x, v) in self.xi_grid.iter().zip(&self.values) {
            writeln!(out, "{x:.17e} {v:.17e}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.serialize())
    }
}

/// The Gouy-Chapman closed form of the symmetric 1:1 layer profile,
/// Psi = 4 artanh(tanh(zeta/4) e^{-xi}).
pub fn gouy_chapman(zeta: f64, xi: f64) -> f64 {
    4.0 * ((zeta / 4.0).tanh() * (-xi).exp()).atanh()
}

/// The Dirichlet boundary-layer field Psi_{0,zeta}(sqrt(beta) d(y)), with
/// zeta read at the nearest surface facet; one profile per distinct zeta.
pub fn dirichlet_layer_field(
    space: &FemSpace,
    e: &Electrolyte,
    data: &SurfaceData,
    beta: f64,
) -> Result<Field, AsymptoticsError> {
    if data.kind != BcKind::Zeta {
        return Err(AsymptoticsError::WrongBcKind("zeta"));
    }
    let mut profiles: Vec<(u64, LayerProfile)> = Vec::new();
    for &z in &data.values {
        let key = z.to_bits();
        if !profiles.iter().any(|(k, _)| *k == key) {
            profiles.push((key, LayerProfile::compute(e, z)?));
        }
    }
    let mesh = space.mesh;
    let sqrt_beta = beta.sqrt();
    let values = mesh
        .dof_nodes()
        .iter()
        .map(|&node| {
            let z = data.values[mesh.nearest_surface(node)];
            let profile = &profiles.iter().find(|(k, _)| *k == z.to_bits()).unwrap().1;
            profile.eval(sqrt_beta * mesh.distance(node))
        })
        .collect();
    Ok(Field { values })
}

/// First-order Dirichlet corrector Psi1: -Delta Psi1 = -Phi(zeta) with
/// Psi1 = 0 on S. Requires a single constant zeta; returns (zeta, Psi1).
pub fn dirichlet_psi1(
    space: &FemSpace,
    e: &Electrolyte,
    data: &SurfaceData,
    linear_tol: f64,
) -> Result<(f64, Field), AsymptoticsError> {
    if data.kind != BcKind::Zeta {
        return Err(AsymptoticsError::WrongBcKind("zeta"));
    }
    let zeta = data.values[0];
    for &v in &data.values {
        if v != zeta {
            return Err(AsymptoticsError::NonConstantZeta(zeta, v));
        }
    }
    let phi_z = e.phi(zeta)?;
    let zero = vec![0.0; space.mesh.n_dofs()];
    let rhs: Vec<f64> = space.mass.iter().map(|m| -m * phi_z).collect();
    let psi1 = solver::solve_linear_reduced(space, &zero, &rhs, ReducedBc::DirichletZero, linear_tol)?;
    Ok((zeta, psi1))
}

/// First-order small-beta Dirichlet approximant zeta + beta Psi1.
pub fn dirichlet_small_beta(
    space: &FemSpace,
    e: &Electrolyte,
    data: &SurfaceData,
    beta: f64,
    linear_tol: f64,
) -> Result<Field, AsymptoticsError> {
    let (zeta, psi1) = dirichlet_psi1(space, e, data, linear_tol)?;
    Ok(Field {
        values: psi1.values.iter().map(|v| zeta + beta * v).collect(),
    })
}
