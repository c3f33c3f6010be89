//! Nonlinear Poisson–Boltzmann electrostatics for a protein embedded near a
//! charged bilayer, with the dielectric boundary force on the membrane
//! faces computed from the shape derivative of the free energy.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds parameters, the ionic energy `B(φ)` and source charges.
//! * [`geometry`] provides parametric surfaces, velocity fields and the
//!   transformation `T_t(X) = X + tV(X)`.
//! * [`radial`] solves the spherical and planar reductions on fitted meshes,
//!   together with closed-form linearised references.
//! * [`grid3d`] solves on a Cartesian grid for geometries given by signed
//!   distance functions.
//! * [`energy`], [`lipid`] and [`force`] evaluate the functional, the lipid
//!   density and the boundary force.
//! * [`verify`] bundles the cross-checks into reports.

pub mod acceptance;
pub mod energy;
pub mod error;
pub mod force;
pub mod geometry;
pub mod grid3d;
pub mod lipid;
pub mod model;
pub mod radial;
pub mod verify;

pub use error::{Error, Result};
