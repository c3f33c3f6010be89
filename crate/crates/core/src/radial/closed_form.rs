use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::{erf, erfc};

use super::mesh::{RadialGeometry, Region, Symmetry};
use super::solver::{
    region_eps, FaceTrace, Linearization, PotentialSolution, RadialProblem, SolveDiagnostics,
};
use crate::error::{Error, Result};
use crate::lipid::Face;
use crate::model::{
    debye_kappa_sq, gaussian_enclosed_fraction, BoundaryData, GammaKind, PhysicalParams,
    SourceCharge,
};

/// Scaled complementary error function `e^{x²} erfc(x)` for `x ≥ 0`.
pub fn erfcx(x: f64) -> f64 {
    if x < 26.0 {
        (x * x).exp() * erfc(x)
    } else {
        let x2 = x * x;
        (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)) / (x * PI.sqrt())
    }
}

/// Free-space potential of a unit-normalised Gaussian of total charge `q`
/// in a medium `(ε, κ)`, with its radial derivative.
pub fn screened_gaussian(q: f64, sigma: f64, eps: f64, kappa: f64, r: f64) -> (f64, f64) {
    let g = (-r * r / (2.0 * sigma * sigma)).exp();
    let s2 = std::f64::consts::SQRT_2 * sigma;
    if r == 0.0 {
        let inner = if kappa == 0.0 {
            sigma * sigma
        } else {
            sigma * sigma
                - kappa
                    * sigma.powi(3)
                    * (PI / 2.0).sqrt()
                    * erfcx(kappa * sigma / std::f64::consts::SQRT_2)
        };
        return (
            q * inner / ((2.0 * PI).powf(1.5) * sigma.powi(3) * eps),
            0.0,
        );
    }
    let (u, du) = if kappa == 0.0 {
        (
            q * erf(r / s2) / (4.0 * PI * eps),
            q / (4.0 * PI * eps) * (2.0 / PI).sqrt() / sigma * g,
        )
    } else {
        let y = (kappa * sigma * sigma - r) / s2;
        let x = (kappa * sigma * sigma + r) / s2;
        let t1 = if y > 0.0 {
            g * erfcx(y)
        } else {
            (0.5 * kappa * kappa * sigma * sigma - kappa * r).exp() * erfc(y)
        };
        let t2 = g * erfcx(x);
        let c = q / (8.0 * PI * eps);
        (
            c * (t1 - t2),
            c * (-kappa * t1 - kappa * t2 + 2.0 * (2.0 / PI).sqrt() / sigma * g),
        )
    };
    let phi = u / r;
    (phi, (du - phi) / r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    a: f64,
    b: f64,
    eps: f64,
    kappa: f64,
    /// Segment contains the symmetry centre and has one regular mode.
    centre: bool,
    coeffs: [f64; 2],
}

impl Segment {
    fn modes(&self) -> usize {
        if self.centre {
            1
        } else {
            2
        }
    }

    fn basis(&self, sym: Symmetry, x: f64) -> [(f64, f64); 2] {
        let (a, b, k) = (self.a, self.b, self.kappa);
        match (sym, k == 0.0, self.centre) {
            (Symmetry::Spherical, true, true) => [(1.0, 0.0), (0.0, 0.0)],
            (Symmetry::Spherical, false, true) => {
                let kr = k * x;
                let damp = (-k * b).exp();
                if kr < 1e-3 {
                    let v = k * (1.0 + kr * kr / 6.0 + kr.powi(4) / 120.0);
                    let d = k.powi(3) * x / 3.0 * (1.0 + kr * kr / 10.0);
                    [(v * damp, d * damp), (0.0, 0.0)]
                } else {
                    // sinh(kr) e^{-kb} without overflow
                    let s = 0.5 * ((k * (x - b)).exp() - (-k * (x + b)).exp());
                    let c = 0.5 * ((k * (x - b)).exp() + (-k * (x + b)).exp());
                    [(s / x, (kr * c - s) / (x * x)), (0.0, 0.0)]
                }
            }
            (Symmetry::Spherical, true, false) => [(1.0, 0.0), (1.0 / x, -1.0 / (x * x))],
            (Symmetry::Spherical, false, false) => {
                let e1 = (-k * (x - a)).exp();
                let e2 = (-k * (b - x)).exp();
                [
                    (e1 / x, -e1 * (k * x + 1.0) / (x * x)),
                    (e2 / x, e2 * (k * x - 1.0) / (x * x)),
                ]
            }
            (Symmetry::Planar, true, _) => [(1.0, 0.0), (x - a, 1.0)],
            (Symmetry::Planar, false, _) => {
                let e1 = (-k * (x - a)).exp();
                let e2 = (-k * (b - x)).exp();
                [(e1, -k * e1), (e2, k * e2)]
            }
        }
    }
}

/// Piecewise closed-form solution of the linearised problem with constant
/// face charges.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedReference {
    symmetry: Symmetry,
    segments: Vec<Segment>,
    /// `(q, σ)` of each Gaussian, all inside the first segment.
    gaussians: Vec<(f64, f64)>,
    /// Face charge `q_l ρ` at the membrane faces.
    sigma: Vec<(f64, f64)>,
    outer_value: f64,
}

impl LinearizedReference {
    pub fn new(
        params: &PhysicalParams,
        geometry: &RadialGeometry,
        source: &SourceCharge,
        bc: &BoundaryData,
    ) -> Result<Self> {
        params.validate()?;
        geometry.validate()?;
        let sym = geometry.symmetry;
        let (points, regions) = geometry.segments();
        let kappa_s = (debye_kappa_sq(params) / params.eps_s).sqrt();
        let mut segments: Vec<Segment> = regions
            .iter()
            .enumerate()
            .map(|(j, reg)| Segment {
                a: points[j],
                b: points[j + 1],
                eps: region_eps(params, *reg),
                kappa: if *reg == Region::Solvent {
                    kappa_s
                } else {
                    0.0
                },
                centre: sym == Symmetry::Spherical && j == 0,
                coeffs: [0.0; 2],
            })
            .collect();
        if sym == Symmetry::Spherical {
            if !source.is_centered() {
                return Err(Error::invalid(
                    "source.centers",
                    "closed form needs a centred source",
                ));
            }
            let b0 = segments[0].b;
            for (_, _, s) in source.iter() {
                if 1.0 - gaussian_enclosed_fraction(b0, s) > 1e-12 {
                    return Err(Error::invalid(
                        "source.widths",
                        format!(
                            "Gaussian of width {s} leaks out of the innermost region (r < {b0})"
                        ),
                    ));
                }
            }
        } else if !source.is_empty() {
            return Err(Error::invalid(
                "source",
                "planar closed form takes no volume source",
            ));
        }
        let mut sigma = Vec::new();
        if let Some(faces) = geometry.membrane {
            if params.lipid_pool.shared || params.gamma_kind != GammaKind::Boltzmann {
                return Err(Error::invalid(
                    "lipid_pool",
                    "closed form needs independent Boltzmann pools (potential-independent ρ)",
                ));
            }
            for (x, c) in faces
                .iter()
                .zip([params.lipid_pool.cytosolic, params.lipid_pool.exoplasmic])
            {
                let area = match sym {
                    Symmetry::Spherical => 4.0 * PI * x * x,
                    Symmetry::Planar => 1.0,
                };
                sigma.push((*x, params.lipid_charge * c / area));
            }
        }
        let gaussians: Vec<(f64, f64)> = source.iter().map(|(_, q, s)| (q, s)).collect();
        let outer_value = bc.eval([0.0, 0.0, geometry.outer], source);
        let mut me = Self {
            symmetry: sym,
            segments: segments.clone(),
            gaussians,
            sigma,
            outer_value,
        };

        let offsets: Vec<usize> = segments
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.modes();
                Some(o)
            })
            .collect();
        let unknowns: usize = segments.iter().map(|s| s.modes()).sum();
        let mut m = DMatrix::<f64>::zeros(unknowns, unknowns);
        let mut rhs = DVector::<f64>::zeros(unknowns);
        let mut row = 0;
        if sym == Symmetry::Planar {
            let s = &segments[0];
            for (k, (v, _)) in s.basis(sym, s.a).iter().enumerate().take(s.modes()) {
                m[(row, offsets[0] + k)] = *v;
            }
            rhs[row] = bc.eval([0.0; 3], source);
            row += 1;
        }
        for j in 0..segments.len() - 1 {
            let (l, r) = (&segments[j], &segments[j + 1]);
            let x = l.b;
            let bl = l.basis(sym, x);
            let br = r.basis(sym, x);
            let (pl, dpl) = me.particular(j, x);
            for k in 0..l.modes() {
                m[(row, offsets[j] + k)] = bl[k].0;
                m[(row + 1, offsets[j] + k)] = -l.eps * bl[k].1;
            }
            for k in 0..r.modes() {
                m[(row, offsets[j + 1] + k)] = -br[k].0;
                m[(row + 1, offsets[j + 1] + k)] = r.eps * br[k].1;
            }
            rhs[row] = -pl;
            rhs[row + 1] = -me.face_charge(x) + l.eps * dpl;
            row += 2;
        }
        let last = segments.len() - 1;
        let s = &segments[last];
        for (k, (v, _)) in s.basis(sym, s.b).iter().enumerate().take(s.modes()) {
            m[(row, offsets[last] + k)] = *v;
        }
        rhs[row] = outer_value - me.particular(last, s.b).0;

        let lu = m.lu();
        let c = lu.solve(&rhs).ok_or_else(|| {
            Error::SingularSystem("matching system has no unique solution".into())
        })?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem(
                "non-finite matching coefficients".into(),
            ));
        }
        for (j, seg) in segments.iter_mut().enumerate() {
            for k in 0..seg.modes() {
                seg.coeffs[k] = c[offsets[j] + k];
            }
        }
        me.segments = segments;
        Ok(me)
    }

    fn face_charge(&self, x: f64) -> f64 {
        self.sigma
            .iter()
            .find(|(f, _)| *f == x)
            .map(|(_, s)| *s)
            .unwrap_or(0.0)
    }

    fn particular(&self, seg: usize, x: f64) -> (f64, f64) {
        if seg != 0 || self.symmetry != Symmetry::Spherical {
            return (0.0, 0.0);
        }
        let s = &self.segments[0];
        self.gaussians.iter().fold((0.0, 0.0), |(v, d), (q, w)| {
            let (pv, pd) = screened_gaussian(*q, *w, s.eps, s.kappa, x);
            (v + pv, d + pd)
        })
    }

    fn locate(&self, x: f64, from_left: bool) -> usize {
        let n = self.segments.len();
        for (j, s) in self.segments.iter().enumerate() {
            if x < s.b || (x == s.b && (from_left || j == n - 1)) {
                return j;
            }
        }
        n - 1
    }

    fn eval_in(&self, j: usize, x: f64) -> (f64, f64) {
        let s = &self.segments[j];
        let basis = s.basis(self.symmetry, x);
        let (mut v, mut d) = self.particular(j, x);
        for k in 0..s.modes() {
            v += s.coeffs[k] * basis[k].0;
            d += s.coeffs[k] * basis[k].1;
        }
        (v, d)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_in(self.locate(x, true), x).0
    }

    /// Derivative along the coordinate, one-sided at interfaces.
    pub fn derivative(&self, x: f64, from_left: bool) -> f64 {
        self.eval_in(self.locate(x, from_left), x).1
    }

    /// Continuity and flux-jump residuals at every interface, plus the
    /// outer Dirichlet mismatch, each scaled by the size of its terms.
    pub fn matching_residuals(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for j in 0..self.segments.len() - 1 {
            let x = self.segments[j].b;
            let (vl, dl) = self.eval_in(j, x);
            let (vr, dr) = self.eval_in(j + 1, x);
            let (el, er) = (self.segments[j].eps, self.segments[j + 1].eps);
            out.push((vl - vr).abs() / vl.abs().max(vr.abs()).max(1e-300));
            let sigma = self.face_charge(x);
            let flux = (er * dr - el * dl + sigma).abs();
            out.push(flux / (er * dr.abs() + el * dl.abs() + sigma.abs()).max(1e-300));
        }
        let last = self.segments.len() - 1;
        let b = self.segments[last].b;
        out.push(
            (self.eval_in(last, b).0 - self.outer_value).abs() / self.outer_value.abs().max(1.0),
        );
        out
    }
}

/// Closed-form linearised solution sampled on the geometry's mesh, with
/// exact interface traces.
pub fn solve_linearized_spherical(
    params: &PhysicalParams,
    geometry: &RadialGeometry,
    source: &SourceCharge,
    bc: &BoundaryData,
) -> Result<PotentialSolution> {
    if geometry.symmetry != Symmetry::Spherical {
        return Err(Error::invalid("geometry.symmetry", "expected spherical"));
    }
    sample_reference(params, geometry, source, bc)
}

pub(crate) fn sample_reference(
    params: &PhysicalParams,
    geometry: &RadialGeometry,
    source: &SourceCharge,
    bc: &BoundaryData,
) -> Result<PotentialSolution> {
    let reference = LinearizedReference::new(params, geometry, source, bc)?;
    let problem = RadialProblem::assemble(params, geometry, source, bc, Linearization::Linearized)?;
    let phi: Vec<f64> = problem.nodes().iter().map(|x| reference.eval(*x)).collect();
    let rho = problem.face_densities(&phi)?;
    let faces = problem
        .faces
        .iter()
        .zip(&rho)
        .map(|(info, r)| {
            let x = info.position;
            let s = info.normal_sign;
            let left = reference.derivative(x, true);
            let right = reference.derivative(x, false);
            let (grad_s_n, grad_m_n) = if s > 0.0 {
                (s * right, s * left)
            } else {
                (s * left, s * right)
            };
            FaceTrace {
                face: info.face,
                node: info.node,
                position: x,
                normal_sign: s,
                phi: reference.eval(x),
                grad_s_n,
                grad_m_n,
                grad_t: [0.0; 3],
                rho: *r,
                jump_residual: params.eps_s * grad_s_n - params.eps_m * grad_m_n
                    + params.lipid_charge * r,
            }
        })
        .collect::<Vec<_>>();
    debug_assert!(faces
        .iter()
        .all(|f| f.face == Face::Cytosolic || f.face == Face::Exoplasmic));
    Ok(PotentialSolution {
        problem,
        phi,
        rho,
        faces,
        diagnostics: SolveDiagnostics {
            newton_iterations: 0,
            fixed_point_iterations: 0,
            residual: 0.0,
            residual_history: Vec::new(),
            damping_history: Vec::new(),
            rho_change: 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IonSpecies, LipidPool};
    use approx::assert_relative_eq;

    #[test]
    fn erfcx_is_continuous_at_switch() {
        let a = erfcx(26.0 - 1e-9);
        let b = erfcx(26.0 + 1e-9);
        assert_relative_eq!(a, b, max_relative = 1e-9);
        assert_relative_eq!(erfcx(0.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn screened_gaussian_far_field_and_centre() {
        let (q, s, eps, k) = (2.0, 0.5, 80.0, 0.7);
        let r = 9.0;
        let (v, d) = screened_gaussian(q, s, eps, k, r);
        let far = q * (0.5 * k * k * s * s - k * r).exp() / (4.0 * PI * eps * r);
        assert_relative_eq!(v, far, max_relative = 1e-12);
        assert_relative_eq!(d, -far * (k + 1.0 / r), max_relative = 1e-10);
        let (v0, _) = screened_gaussian(q, s, eps, k, 0.0);
        let (v1, _) = screened_gaussian(q, s, eps, k, 1e-4);
        assert_relative_eq!(v0, v1, max_relative = 1e-7);
        let (c0, _) = screened_gaussian(q, s, eps, 0.0, 0.0);
        let (c1, _) = screened_gaussian(q, s, eps, 0.0, 1e-5);
        assert_relative_eq!(c0, c1, max_relative = 1e-9);
    }

    #[test]
    fn no_contrast_reduces_to_screened_coulomb() {
        let p = PhysicalParams {
            eps_m: 80.0,
            ions: vec![IonSpecies::new(1.0, 0.1), IonSpecies::new(-1.0, 0.1)],
            ..Default::default()
        };
        let g = RadialGeometry::spherical(5.0, 7.0, 30.0, 100);
        let src = SourceCharge::central(1.0, 0.5);
        let bc = BoundaryData::ScreenedCoulomb {
            eps: 80.0,
            kappa: (0.2f64 / 80.0).sqrt(),
        };
        let r = LinearizedReference::new(&p, &g, &src, &bc).unwrap();
        let k = (0.2f64 / 80.0).sqrt();
        // Outside the solvent ball the membrane is ion-free, so only compare inside Γ_c.
        for x in [1.0, 2.5, 4.9] {
            let (ex, _) = screened_gaussian(1.0, 0.5, 80.0, k, x);
            let got = r.eval(x);
            assert!((got - ex).abs() < 0.2 * ex.abs(), "{x}: {got} vs {ex}");
        }
        assert!(r.matching_residuals().iter().all(|e| *e < 1e-12));
    }

    #[test]
    fn piecewise_coulomb_without_ions() {
        let p = PhysicalParams {
            lipid_charge: -1.0,
            lipid_pool: LipidPool {
                cytosolic: 0.3,
                exoplasmic: 0.2,
                shared: false,
            },
            ..Default::default()
        };
        let g = RadialGeometry::spherical(5.0, 7.0, 30.0, 100);
        let r = LinearizedReference::new(
            &p,
            &g,
            &SourceCharge::central(1.0, 0.5),
            &BoundaryData::zero(),
        )
        .unwrap();
        // Between the faces: D = Q_enclosed / (4π r²) with Q_enclosed = 1 - 0.3.
        let x = 6.0;
        assert_relative_eq!(
            -2.0 * r.derivative(x, true),
            0.7 / (4.0 * PI * x * x),
            max_relative = 1e-12
        );
        // Outside: enclosed charge 0.5.
        let x = 20.0;
        assert_relative_eq!(
            -80.0 * r.derivative(x, true),
            0.5 / (4.0 * PI * x * x),
            max_relative = 1e-12
        );
        assert!(r.matching_residuals().iter().all(|e| *e < 1e-12));
    }
}
