//! Spherical and planar reductions on interface-fitted meshes.
//!
//! The discrete system is a vertex-centred finite-volume scheme whose
//! Newton equations are exactly the stationarity conditions of the
//! discrete energy, so the energy, weak-form and force evaluations in the
//! rest of the crate see the same discretisation the solver used.

mod closed_form;
mod mesh;
mod solver;

pub use closed_form::{erfcx, screened_gaussian, solve_linearized_spherical, LinearizedReference};
pub use mesh::{Grading, RadialGeometry, RadialMesh, Region, Symmetry};
pub use solver::{
    solve_planar, solve_problem, solve_spherical, traces, FaceInfo, FaceTrace, Linearization,
    NewtonOutcome, PotentialSolution, RadialProblem, SolveDiagnostics, SolverOptions, TraceMethod,
};
