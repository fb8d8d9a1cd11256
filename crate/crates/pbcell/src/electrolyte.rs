//! Chemical species data and the pointwise nonlinearities of the model:
//! the charge density `phi`, its derivative, the convex potential and the
//! Boltzmann concentrations.

use thiserror::Error;

/// Cap on each exponent `z_j * x` before an evaluation reports overflow.
/// Solutions stay far below this; hitting it signals a solver bug.
pub const EXP_CAP: f64 = 500.0;

/// Absolute tolerance on the bulk electroneutrality sum after construction.
pub const NEUTRALITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ElectrolyteError {
    #[error("species list needs at least one anion and one cation")]
    AllSameSign,
    #[error("duplicate valence {0}")]
    DuplicateValence(i32),
    #[error("nonpositive concentration {0} for valence {1}")]
    NonpositiveConcentration(f64, i32),
    #[error("valence must be nonzero")]
    ZeroValence,
    #[error("empty species list")]
    Empty,
    #[error("exponent {0} exceeds cap {EXP_CAP} in nonlinearity evaluation")]
    Overflow(f64),
}

/// One ionic species: valence `z_j` and infinite-dilution concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Species {
    pub valence: i32,
    pub concentration: f64,
}

impl Species {
    pub fn new(valence: i32, concentration: f64) -> Self {
        Species {
            valence,
            concentration,
        }
    }
}

/// A neutral electrolyte. Species are sorted by increasing valence and the
/// concentrations satisfy the bulk electroneutrality condition; raw inputs
/// that violate it are shifted at construction time.
#[derive(Debug, Clone)]
pub struct Electrolyte {
    species: Vec<Species>,
    shift: f64,
}

impl Electrolyte {
    /// Builds an electrolyte from raw species data. If the raw constants are
    /// not electroneutral, the unique root `psi0` of `phi` is found (bracketed
    /// bisection polished by Newton; `phi` is strictly monotone so this is
    /// globally safe) and the concentrations are replaced by
    /// `n_j <- n_j * exp(-z_j psi0)`.
    pub fn new(mut species: Vec<Species>) -> Result<Self, ElectrolyteError> {
        if species.is_empty() {
            return Err(ElectrolyteError::Empty);
        }
        for s in &species {
            if s.valence == 0 {
                return Err(ElectrolyteError::ZeroValence);
            }
            if !(s.concentration > 0.0) {
                return Err(ElectrolyteError::NonpositiveConcentration(
                    s.concentration,
                    s.valence,
                ));
            }
        }
        species.sort_by_key(|s| s.valence);
        for w in species.windows(2) {
            if w[0].valence == w[1].valence {
                return Err(ElectrolyteError::DuplicateValence(w[0].valence));
            }
        }
        if species.first().unwrap().valence >= 0 || species.last().unwrap().valence <= 0 {
            return Err(ElectrolyteError::AllSameSign);
        }
        let mut e = Electrolyte { species, shift: 0.0 };
        let raw_sum: f64 = e.species.iter().map(|s| s.valence as f64 * s.concentration).sum();
        if raw_sum.abs() > NEUTRALITY_TOL {
            let psi0 = e.neutrality_root();
            for s in &mut e.species {
                s.concentration *= (-(s.valence as f64) * psi0).exp();
            }
            e.shift = psi0;
        }
        Ok(e)
    }

    /// Root of `phi` for the raw constants, by geometric bracket growth,
    /// bisection to 1e-14 and three Newton polish steps.
    fn neutrality_root(&self) -> f64 {
        let f = |x: f64| {
            -self
                .species
                .iter()
                .map(|s| {
                    let z = s.valence as f64;
                    z * s.concentration * (-z * x).exp()
                })
                .sum::<f64>()
        };
        let mut b = 1.0;
        while f(-b) * f(b) > 0.0 {
            b *= 2.0;
            assert!(b < 1e6, "neutrality root bracket failed to grow");
        }
        let (mut lo, mut hi) = (-b, b);
        while hi - lo > 1e-14 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..3 {
            let fp: f64 = self
                .species
                .iter()
                .map(|s| {
                    let z = s.valence as f64;
                    z * z * s.concentration * (-z * x).exp()
                })
                .sum();
            x -= f(x) / fp;
        }
        x
    }

    /// Species sorted by increasing valence.
    pub fn species(&self) -> &[Species] {
        &self.species
    }

    /// The Remark-1 neutrality shift applied at construction (0 when the raw
    /// constants were already neutral). Retained for reporting only.
    pub fn neutrality_shift(&self) -> f64 {
        self.shift
    }

    pub fn most_negative_valence(&self) -> i32 {
        self.species.first().unwrap().valence
    }

    pub fn most_positive_valence(&self) -> i32 {
        self.species.last().unwrap().valence
    }

    fn check_cap(&self, x: f64) -> Result<(), ElectrolyteError> {
        for s in &self.species {
            let ex = s.valence as f64 * x;
            if ex.abs() > EXP_CAP {
                return Err(ElectrolyteError::Overflow(ex));
            }
        }
        Ok(())
    }

    /// Bulk charge density `Phi(x) = -sum_j z_j n_j exp(-z_j x)`.
    /// Strictly increasing; zero at `x = 0` for a neutral electrolyte.
    pub fn phi(&self, x: f64) -> Result<f64, ElectrolyteError> {
        self.check_cap(x)?;
        Ok(-self
            .species
            .iter()
            .map(|s| {
                let z = s.valence as f64;
                z * s.concentration * (-z * x).exp()
            })
            .sum::<f64>())
    }

    /// `Phi'(x) = sum_j z_j^2 n_j exp(-z_j x) > 0`.
    pub fn phi_prime(&self, x: f64) -> Result<f64, ElectrolyteError> {
        self.check_cap(x)?;
        Ok(self
            .species
            .iter()
            .map(|s| {
                let z = s.valence as f64;
                z * z * s.concentration * (-z * x).exp()
            })
            .sum::<f64>())
    }

    /// Convex potential `C(x) = sum_j n_j exp(-z_j x)`, the primitive of `phi`.
    pub fn cpotential(&self, x: f64) -> Result<f64, ElectrolyteError> {
        self.check_cap(x)?;
        Ok(self
            .species
            .iter()
            .map(|s| s.concentration * (-(s.valence as f64) * x).exp())
            .sum::<f64>())
    }

    /// Equilibrium concentrations `n_j(x) = n_j exp(-z_j x)`.
    pub fn concentrations(&self, x: f64) -> Result<Vec<f64>, ElectrolyteError> {
        self.check_cap(x)?;
        Ok(self
            .species
            .iter()
            .map(|s| s.concentration * (-(s.valence as f64) * x).exp())
            .collect())
    }

    /// `Phi'(0) = sum_j z_j^2 n_j`, the linearized screening coefficient.
    pub fn phi_prime_zero(&self) -> f64 {
        self.phi_prime(0.0).unwrap()
    }

    /// `sum_{j in j-} z_j^2 n_j` over the anions.
    pub fn anion_screening(&self) -> f64 {
        self.species
            .iter()
            .filter(|s| s.valence < 0)
            .map(|s| {
                let z = s.valence as f64;
                z * z * s.concentration
            })
            .sum()
    }

    /// `sum_{j in j+} z_j^2 n_j` over the cations.
    pub fn cation_screening(&self) -> f64 {
        self.species
            .iter()
            .filter(|s| s.valence > 0)
            .map(|s| {
                let z = s.valence as f64;
                z * z * s.concentration
            })
            .sum()
    }

    /// Lower-bound constant `H^2 = min(z_1^2 n_1, z_N^2 n_N)` in
    /// `phi(x) sign(x) >= H^2 |x|`.
    pub fn monotonicity_constant(&self) -> f64 {
        let a = self.species.first().unwrap();
        let c = self.species.last().unwrap();
        let za = a.valence as f64;
        let zc = c.valence as f64;
        (za * za * a.concentration).min(zc * zc * c.concentration)
    }
}

/// The symmetric 1:1 electrolyte with `n = 1/2` each, for which
/// `phi(x) = sinh(x)`.
pub fn symmetric_1_1() -> Electrolyte {
    Electrolyte::new(vec![Species::new(-1, 0.5), Species::new(1, 0.5)]).unwrap()
}
