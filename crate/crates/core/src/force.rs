//! Normal dielectric boundary force on the membrane faces.
//!
//! Three forms are evaluated from the same one-sided traces: the
//! shape-derivative form, its alternative obtained by eliminating the
//! other normal derivative, and the jump of the Maxwell stress. They agree
//! whenever the traces satisfy the interface condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ParametricSurface, Vec3, VelocityField};
use crate::lipid::{pool_groups, Face};
use crate::model::{b_energy, GammaKind, PhysicalParams};
use crate::radial::{FaceTrace, PotentialSolution, Symmetry};

/// Interface data at one face node. Normal derivatives are along the
/// normal pointing into the solvent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub phi: f64,
    pub grad_s_n: f64,
    pub grad_m_n: f64,
    /// Tangential gradient, shared by both sides.
    pub grad_t: Option<[f64; 3]>,
    pub rho: f64,
}

impl From<&FaceTrace> for TraceSample {
    fn from(t: &FaceTrace) -> Self {
        Self {
            phi: t.phi,
            grad_s_n: t.grad_s_n,
            grad_m_n: t.grad_m_n,
            grad_t: Some(t.grad_t),
            rho: t.rho,
        }
    }
}

impl TraceSample {
    fn tangential_sq(&self) -> Result<f64> {
        let t = self.grad_t.ok_or(Error::MissingTangential)?;
        Ok(t.iter().map(|x| x * x).sum())
    }

    /// `ε_s ∂φˢ/∂n - ε_m ∂φᵐ/∂n + q_l ρ`.
    pub fn jump_residual(&self, params: &PhysicalParams) -> f64 {
        params.eps_s * self.grad_s_n - params.eps_m * self.grad_m_n + params.lipid_charge * self.rho
    }
}

pub fn force_paper(params: &PhysicalParams, t: &TraceSample) -> Result<f64> {
    let tt = t.tangential_sq()?;
    let (a, b) = (t.grad_s_n, t.grad_m_n);
    let (es, em) = (params.eps_s, params.eps_m);
    Ok(
        -0.5 * es * (tt + a * a) + 0.5 * em * (tt + b * b) - em * b * b + em * a * b
            - b_energy(t.phi, params)?
            - params.lipid_charge * t.rho * a,
    )
}

pub fn force_alt(params: &PhysicalParams, t: &TraceSample) -> Result<f64> {
    let tt = t.tangential_sq()?;
    let (a, b) = (t.grad_s_n, t.grad_m_n);
    let (es, em) = (params.eps_s, params.eps_m);
    Ok(
        -0.5 * es * (tt + a * a) + 0.5 * em * (tt + b * b) + es * a * a
            - es * a * b
            - b_energy(t.phi, params)?
            - params.lipid_charge * t.rho * b,
    )
}

/// `n·Mˢn - n·Mᵐn` with `M = εE⊗E - (ε/2)|E|²I - χ_s B I`.
pub fn force_mst(params: &PhysicalParams, t: &TraceSample) -> Result<f64> {
    let tt = t.tangential_sq()?;
    let side = |eps: f64, dn: f64| 0.5 * eps * (dn * dn - tt);
    Ok(side(params.eps_s, t.grad_s_n) - b_energy(t.phi, params)? - side(params.eps_m, t.grad_m_n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub face: Face,
    /// Radius or height of the face in one dimension; chart node index otherwise.
    pub position: f64,
    pub f_paper: f64,
    pub f_alt: f64,
    pub f_mst: f64,
    pub trace: TraceSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceProfile {
    pub samples: Vec<ForceSample>,
}

fn rel_dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

impl ForceProfile {
    pub fn from_traces(
        params: &PhysicalParams,
        samples: impl IntoIterator<Item = (Face, f64, TraceSample)>,
    ) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|(face, position, trace)| {
                Ok(ForceSample {
                    face,
                    position,
                    f_paper: force_paper(params, &trace)?,
                    f_alt: force_alt(params, &trace)?,
                    f_mst: force_mst(params, &trace)?,
                    trace,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn face(&self, face: Face) -> impl Iterator<Item = &ForceSample> {
        self.samples.iter().filter(move |s| s.face == face)
    }

    /// `max |F_paper - F_mst| / (1 + |F_mst|)`.
    pub fn max_paper_mst_deviation(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| rel_dev(s.f_paper, s.f_mst))
            .fold(0.0, f64::max)
    }

    /// `max |F_paper - F_alt| / (1 + |F_alt|)`.
    pub fn max_paper_alt_deviation(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| rel_dev(s.f_paper, s.f_alt))
            .fold(0.0, f64::max)
    }
}

/// Force at both faces of a one-dimensional solution.
pub fn radial_force_profile(solution: &PotentialSolution) -> Result<ForceProfile> {
    ForceProfile::from_traces(
        &solution.problem.params,
        solution
            .faces
            .iter()
            .map(|t| (t.face, t.position, TraceSample::from(t))),
    )
}

/// `δ_Γ G = ∫_Γ -F_n (V·n) dS` with `F_n` sampled at the quadrature nodes.
pub fn shape_derivative_integral(
    surface: &ParametricSurface,
    f_n: &[f64],
    velocity: &VelocityField,
) -> Result<f64> {
    let frames = surface.frames()?;
    if frames.len() != f_n.len() {
        return Err(Error::invalid(
            "f_n",
            format!("expected {} node values, got {}", frames.len(), f_n.len()),
        ));
    }
    let mut k = 0;
    surface.closed_surface_integral(|fr| {
        let v = -f_n[k] * velocity.eval(&fr.r).dot(&fr.n);
        k += 1;
        v
    })
}

/// Normal velocity `V·n` at a one-dimensional face.
pub fn radial_normal_velocity(
    symmetry: Symmetry,
    position: f64,
    normal_sign: f64,
    velocity: &VelocityField,
) -> f64 {
    // The radial and planar reductions both run along e_z.
    let x = Vec3::new(0.0, 0.0, position);
    let v = velocity.eval(&x);
    match symmetry {
        Symmetry::Spherical | Symmetry::Planar => normal_sign * v.z,
    }
}

/// One-dimensional counterpart of [`shape_derivative_integral`]:
/// `Σ_faces -F_n (V·n) |Γ|` using the given force per face.
pub fn radial_shape_derivative(
    solution: &PotentialSolution,
    force: impl Fn(&ForceSample) -> f64,
    velocity: &VelocityField,
) -> Result<f64> {
    let profile = radial_force_profile(solution)?;
    let sym = solution.problem.mesh.symmetry;
    Ok(profile
        .samples
        .iter()
        .zip(&solution.problem.faces)
        .map(|(s, info)| {
            -force(s)
                * radial_normal_velocity(sym, info.position, info.normal_sign, velocity)
                * info.area
        })
        .sum())
}

/// Area-change contribution of the surface entropy that the force does not
/// carry: `s (C/β) [∫(∇·n) γ V_n / ∫γ - ∫(∇·n) V_n / |Γ|]` per pool, with
/// `s = -1` for the Boltzmann kind and `+1` otherwise.
///
/// It vanishes whenever the density is uniform over each pool, which for
/// radial solves holds with independent pools but not with a shared one.
pub fn radial_curvature_term(
    solution: &PotentialSolution,
    velocity: &VelocityField,
) -> Result<f64> {
    let p = &solution.problem;
    let params = &p.params;
    let sym = p.mesh.symmetry;
    let mut total = 0.0;
    for (faces, pool) in pool_groups(params) {
        if pool == 0.0 {
            continue;
        }
        let members: Vec<_> = p.faces.iter().filter(|f| faces.contains(&f.face)).collect();
        // γ relative to its maximum over the pool, to keep exp in range.
        let log_gamma = |phi: f64| match params.gamma_kind {
            GammaKind::Boltzmann => Ok(-params.lipid_charge * params.beta * phi),
            GammaKind::Custom { gamma, .. } => {
                let g = gamma(phi);
                if g > 0.0 {
                    Ok(g.ln())
                } else {
                    Err(Error::Normalization(g))
                }
            }
        };
        let logs = members
            .iter()
            .map(|f| log_gamma(solution.phi[f.node]))
            .collect::<Result<Vec<_>>>()?;
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut wsum, mut wcurv, mut area, mut curv) = (0.0, 0.0, 0.0, 0.0);
        for (f, l) in members.iter().zip(&logs) {
            let div_n = match sym {
                Symmetry::Spherical => 2.0 * f.normal_sign / f.position,
                Symmetry::Planar => 0.0,
            };
            let vn = radial_normal_velocity(sym, f.position, f.normal_sign, velocity);
            let w = (l - top).exp() * f.area;
            wsum += w;
            wcurv += div_n * vn * w;
            area += f.area;
            curv += div_n * vn * f.area;
        }
        let sign = match params.gamma_kind {
            GammaKind::Boltzmann => -1.0,
            GammaKind::Custom { .. } => 1.0,
        };
        total += sign * pool / params.beta * (wcurv / wsum - curv / area);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{QuadratureRule, Shape};
    use crate::model::IonSpecies;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn sample(phi: f64, a: f64, b: f64, rho: f64) -> TraceSample {
        TraceSample {
            phi,
            grad_s_n: a,
            grad_m_n: b,
            grad_t: Some([0.3, -0.1, 0.2]),
            rho,
        }
    }

    #[test]
    fn no_contrast_no_charge_vanishes() {
        let p = PhysicalParams {
            eps_m: 80.0,
            ..Default::default()
        };
        let t = sample(0.4, 0.7, 0.7, 0.0);
        for f in [force_paper, force_alt, force_mst] {
            assert!(f(&p, &t).unwrap().abs() < 1e-13);
        }
        let zero = sample(0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            force_mst(
                &p,
                &TraceSample {
                    grad_t: Some([0.0; 3]),
                    ..zero
                }
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn forms_agree_under_jump_condition() {
        let p = PhysicalParams {
            ions: vec![IonSpecies::new(1.0, 0.5), IonSpecies::new(-1.0, 0.5)],
            lipid_charge: -1.0,
            ..Default::default()
        };
        let b = 0.9;
        let rho = 0.35;
        let a = (p.eps_m * b - p.lipid_charge * rho) / p.eps_s;
        let t = sample(-0.2, a, b, rho);
        assert!(t.jump_residual(&p).abs() < 1e-15);
        let fp = force_paper(&p, &t).unwrap();
        assert_relative_eq!(fp, force_mst(&p, &t).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(fp, force_alt(&p, &t).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn jump_violation_shows_linearly() {
        let p = PhysicalParams {
            lipid_charge: -1.0,
            ..Default::default()
        };
        let (b, rho) = (0.9, 0.35);
        let a = (p.eps_m * b - p.lipid_charge * rho) / p.eps_s;
        let diff = |d: f64| {
            let t = sample(0.0, a + d, b, rho);
            force_paper(&p, &t).unwrap() - force_alt(&p, &t).unwrap()
        };
        let (d1, d2) = (diff(1e-4), diff(2e-4));
        assert!(d1.abs() > 1e-8);
        assert_relative_eq!(d2 / d1, 2.0, max_relative = 1e-3);
    }

    #[test]
    fn missing_tangential_is_an_error() {
        let p = PhysicalParams::default();
        let t = TraceSample {
            grad_t: None,
            ..sample(0.0, 1.0, 1.0, 0.0)
        };
        assert_eq!(force_paper(&p, &t), Err(Error::MissingTangential));
    }

    #[test]
    fn shape_integral_examples() {
        let s =
            ParametricSurface::new(Shape::sphere(1.0)).with_quadrature(QuadratureRule::new(32, 32));
        let n = s.nodes().len();
        let ones = vec![1.0; n];
        let v = shape_derivative_integral(&s, &ones, &VelocityField::dilation()).unwrap();
        assert_relative_eq!(v, -4.0 * PI, max_relative = 1e-12);
        let rot = VelocityField::rotation([0.2, -0.4, 1.0]);
        assert!(shape_derivative_integral(&s, &ones, &rot).unwrap().abs() < 1e-12);
        assert_eq!(
            shape_derivative_integral(&s, &vec![0.0; n], &VelocityField::dilation()).unwrap(),
            0.0
        );
    }
}
