//! Axisymmetric Casimir and Casimir-Polder force computations.
//!
//! The crate solves the imaginary-frequency vector Maxwell equation
//! (curl curl + xi^2 eps) E = S on a staggered (r, z) grid, one azimuthal
//! mode at a time, and builds fluctuation forces out of the resulting
//! Green's function responses:
//!
//! * [`stress`] integrates the Maxwell stress tensor over a closed surface
//!   around a body (full finite-size force),
//! * [`dipole`] evaluates the Casimir-Polder energy of a small polarizable
//!   particle and its vertical force,
//! * [`ring`] couples N identical particles arranged on a ring through a
//!   scattering determinant.
//!
//! Internal units set hbar = c = 1; lengths are in a caller-chosen unit and
//! forces come out in hbar*c / length^2. [`units`] converts to SI.

pub mod dipole;
pub mod geometry;
pub mod materials;
mod search;
pub mod solver;
pub mod spectral;
pub mod units;
