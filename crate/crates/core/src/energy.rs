//! Electrostatic free energy `G`, bending energy and their sum `Π`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ParametricSurface;
use crate::lipid::Face;
use crate::radial::{PotentialSolution, RadialProblem};

/// A labelled contribution, e.g. the entropy of one lipid pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTerm {
    pub name: String,
    pub value: f64,
}

impl NamedTerm {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// `-∫ ε|∇φ|²/2`
    pub field_term: f64,
    /// `∫ f φ`
    pub source_term: f64,
    /// `-∫ χ_s B(φ)`
    pub ionic_term: f64,
    /// One entry per lipid pool.
    pub surface_entropy: Vec<NamedTerm>,
    /// One entry per face.
    pub bending: Vec<NamedTerm>,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "Pi")]
    pub pi: f64,
}

impl EnergyBreakdown {
    pub fn new(
        field_term: f64,
        source_term: f64,
        ionic_term: f64,
        surface_entropy: Vec<NamedTerm>,
    ) -> Self {
        let g = field_term
            + source_term
            + ionic_term
            + surface_entropy.iter().map(|t| t.value).sum::<f64>();
        Self {
            field_term,
            source_term,
            ionic_term,
            surface_entropy,
            bending: Vec::new(),
            g,
            pi: g,
        }
    }

    /// Bending energy of each face; replaces any previous terms.
    pub fn with_bending(mut self, bending: Vec<NamedTerm>) -> Self {
        self.bending = bending;
        self.pi = total_energy(&self);
        self
    }

    pub fn entropy_total(&self) -> f64 {
        self.surface_entropy.iter().map(|t| t.value).sum()
    }

    pub fn bending_total(&self) -> f64 {
        self.bending.iter().map(|t| t.value).sum()
    }
}

/// `Π = Σ E_face + G`.
pub fn total_energy(breakdown: &EnergyBreakdown) -> f64 {
    breakdown.bending_total() + breakdown.g
}

pub(crate) fn pool_name(faces: &[Face]) -> String {
    faces.iter().map(|f| f.name()).collect::<Vec<_>>().join("+")
}

/// Discrete `G_h[φ]` of a radial problem for an arbitrary nodal field.
///
/// The solver's nodal equations are the stationarity conditions of this
/// functional, so a converged solution is its discrete maximiser.
pub fn radial_energy(problem: &RadialProblem, phi: &[f64]) -> Result<EnergyBreakdown> {
    let n = problem.mesh.nodes.len();
    if phi.len() != n {
        return Err(Error::invalid(
            "phi",
            format!("expected {n} nodal values, got {}", phi.len()),
        ));
    }
    let m = problem.measure();
    let field: f64 = problem
        .conductance
        .iter()
        .enumerate()
        .map(|(k, a)| a * (phi[k + 1] - phi[k]).powi(2))
        .sum();
    let mut source = 0.0;
    let mut ionic = 0.0;
    for (i, v) in phi.iter().enumerate() {
        source += (problem.source_left[i] + problem.source_right[i]) * v;
        let vol = problem.solvent_left[i] + problem.solvent_right[i];
        if vol > 0.0 {
            ionic += vol * problem.ion_energy(*v)?;
        }
    }
    let entropy = problem
        .entropy_terms(phi)?
        .into_iter()
        .map(|(faces, v)| NamedTerm::new(pool_name(&faces), v))
        .collect();
    Ok(EnergyBreakdown::new(
        -0.5 * m * field,
        m * source,
        -m * ionic,
        entropy,
    ))
}

/// `G` of a converged radial or planar solution.
pub fn electrostatic_energy(solution: &PotentialSolution) -> Result<EnergyBreakdown> {
    let r = solution.diagnostics.residual;
    if !(r <= 1e-8) {
        return Err(Error::invalid(
            "solution",
            format!("not converged (residual {r:e})"),
        ));
    }
    radial_energy(&solution.problem, &solution.phi)
}

/// Canham-Helfrich parameters `𝒦_C`, `𝒦_G` and spontaneous curvature `C₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BendingParams {
    pub k_c: f64,
    pub k_g: f64,
    #[serde(default)]
    pub c0: f64,
}

impl BendingParams {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("bending.k_c", self.k_c),
            ("bending.k_g", self.k_g),
            ("bending.c0", self.c0),
        ] {
            if !v.is_finite() {
                out.push((name.to_string(), "must be finite".to_string()));
            }
        }
        out
    }
}

/// `∫ ½𝒦_C(2H - C₀)² + 𝒦_G K dS`.
pub fn bending_energy(surface: &ParametricSurface, params: &BendingParams) -> Result<f64> {
    surface.integrate(|f| 0.5 * params.k_c * (2.0 * f.h - params.c0).powi(2) + params.k_g * f.k)
}
