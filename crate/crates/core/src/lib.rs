//! Desk-scale toolkit for digital quantum simulation of 2D Fermi-Hubbard
//! quench dynamics.
//!
//! The crate covers the full pipeline of such an experiment in software:
//!
//! * [`model`] — lattices, flux patterns, Hamiltonian parameters, initial
//!   states.
//! * [`circuits`] — second-order Trotter circuits over a fermionic swap
//!   network, native-gate compilation, twirling, gate accounting.
//! * [`statevec`] — dense state-vector reference engine, exact sector
//!   dynamics, synthetic noise.
//! * [`flo`] — fermionic-linear-optics engine for the non-interacting
//!   sector: correlators, determinant amplitudes, exact sampling.
//! * [`majorana`] — Heisenberg-picture Majorana propagation with weight
//!   and coefficient truncation.
//! * [`mitigation`] — post-selection, readout untwirling, training-based
//!   rescaling, maximum-entropy shot reweighting, GP smoothing, error
//!   propagation.
//! * [`observables`] — shot- and expectation-based physics estimators.
//! * [`xeb`] — linear cross-entropy benchmarking against the FLO oracle.
//! * [`experiment`] — experiment configs, pipeline orchestration, claim
//!   reproduction.

pub mod circuits;
pub mod experiment;
pub mod flo;
pub mod linalg;
pub mod majorana;
pub mod mitigation;
pub mod model;
pub mod observables;
pub mod shots;
pub mod statevec;
pub mod xeb;

/// Complex double, the scalar type of every engine in the crate.
pub type C64 = num_complex::Complex64;
