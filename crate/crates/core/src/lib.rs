//! Constructive KAM workbench for the cubic nonlinear Schrödinger equation on T².
//!
//! The crate covers resonance geometry on Z², the Birkhoff normal form around
//! the tangential sites, the homological equations of a KAM step, a finite
//! Galerkin KAM iteration, and Monte-Carlo measure estimates for the excluded
//! parameter sets.

pub mod hamiltonian_algebra;
pub mod homological_solver;
pub mod kam_engine;
pub mod lattice_resonance;
pub mod measure_estimator;
pub mod normal_form;
