//! Self-consistent tight-binding laboratory.
//!
//! Assembles two-centre tight-binding Hamiltonians with a density-dependent
//! on-site term, solves the self-consistency equation, differentiates
//! self-consistent site observables analytically, and turns exponential
//! locality statements into measurements: resolvent decay fits, defect
//! comparisons, Bloch band structure and finite-temperature limits of relaxed
//! geometries.

pub mod bloch;
pub mod error;
pub mod lattice;
pub mod locality;
pub mod model;
pub mod response;
pub mod scf;
pub mod spectral;

pub use error::{Error, Result};
