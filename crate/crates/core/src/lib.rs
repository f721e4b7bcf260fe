//! Numerical laboratory for a few impurities coupled to a dense ideal Fermi
//! gas in a periodic box.
//!
//! The crate provides the momentum lattice and Fermi ball, interaction
//! profiles with assumption certificates, the fermion-mediated pair
//! potential (continuum quadrature and finite-volume lattice sum), the
//! effective impurity dynamics, truncated particle-hole Fock-space dynamics
//! of the full system, the transition-amplitude sums and error functionals
//! that control the effective description, and an experiment harness.

pub mod error;
pub mod lattice;
pub mod potentials;
pub mod quadrature;
pub mod effective_potential;
pub mod effective_dynamics;
pub mod krylov;
pub mod fock;
pub mod bounds;
pub mod harness;

pub use error::{Error, Result};
