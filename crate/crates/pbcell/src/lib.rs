//! Periodic-cell Poisson-Boltzmann solver: finite element discretization of
//! the dimensionless double-layer problem on porous unit cells, asymptotic
//! approximations in the Debye parameter, and error-rate verification tools.

pub mod analysis;
pub mod cli;
pub mod asymptotics;
pub mod config;
pub mod electrolyte;
pub mod fem;
pub mod geometry;
pub mod linsolve;
pub mod solver;
