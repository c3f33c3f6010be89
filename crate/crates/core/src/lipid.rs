//! Charged-lipid surface density, its conservation, and the steady-state
//! surface electrodiffusion residual.
//!
//! Densities are computed from weighted samples `(dS_k, φ_k)` so the same
//! code serves quadrature nodes on a parametric face, a single node of a
//! radial solve, and the union of both faces when they share a pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EdgeRule, ParametricSurface};
use crate::model::{GammaKind, PhysicalParams};

/// Identifies a membrane face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    /// Inner face `Γ_c`.
    Cytosolic,
    /// Outer face `Γ_e`.
    Exoplasmic,
}

impl Face {
    pub const BOTH: [Face; 2] = [Face::Cytosolic, Face::Exoplasmic];

    pub fn index(self) -> usize {
        match self {
            Face::Cytosolic => 0,
            Face::Exoplasmic => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::Cytosolic => "cytosolic",
            Face::Exoplasmic => "exoplasmic",
        }
    }
}

/// Weighted samples of one face: area weights `dS_k` and potential `φ_k`.
#[derive(Debug, Clone, Copy)]
pub struct FaceSamples<'a> {
    pub weights: &'a [f64],
    pub phi: &'a [f64],
}

/// How the two face pools are grouped for normalisation.
pub fn pool_groups(params: &PhysicalParams) -> Vec<(Vec<Face>, f64)> {
    let pool = params.lipid_pool;
    if pool.shared {
        vec![(Face::BOTH.to_vec(), pool.cytosolic + pool.exoplasmic)]
    } else {
        vec![
            (vec![Face::Cytosolic], pool.cytosolic),
            (vec![Face::Exoplasmic], pool.exoplasmic),
        ]
    }
}

struct Normalisation {
    /// `ln(∫γ / |Γ|)`, shifted back to the true value.
    log_mean: f64,
    /// Per-sample density.
    rho: Vec<Vec<f64>>,
}

fn normalise(
    params: &PhysicalParams,
    pool: f64,
    groups: &[FaceSamples<'_>],
) -> Result<Normalisation> {
    let area: f64 = groups.iter().flat_map(|g| g.weights.iter()).sum();
    if !(area > 0.0) {
        return Err(Error::Normalization(area));
    }
    match params.gamma_kind {
        GammaKind::Boltzmann => {
            let scale = -params.lipid_charge * params.beta;
            let shift = groups
                .iter()
                .flat_map(|g| g.phi.iter())
                .map(|p| scale * p)
                .fold(f64::NEG_INFINITY, f64::max);
            let shift = if shift.is_finite() { shift } else { 0.0 };
            let mut total = 0.0;
            let weights: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    g.phi
                        .iter()
                        .zip(g.weights)
                        .map(|(p, w)| {
                            let e = (scale * p - shift).exp();
                            total += w * e;
                            e
                        })
                        .collect()
                })
                .collect();
            if !(total > 0.0) {
                return Err(Error::Normalization(total));
            }
            Ok(Normalisation {
                log_mean: shift + (total / area).ln(),
                rho: weights
                    .into_iter()
                    .map(|g| g.into_iter().map(|e| pool * e / total).collect())
                    .collect(),
            })
        }
        GammaKind::Custom { gamma, gamma_prime } => {
            let total: f64 = groups
                .iter()
                .flat_map(|g| g.phi.iter().zip(g.weights))
                .map(|(p, w)| w * gamma(*p))
                .sum();
            if !(total > 0.0) {
                return Err(Error::Normalization(total));
            }
            let coupling = params.beta * params.lipid_charge;
            if coupling == 0.0 {
                return Err(Error::invalid(
                    "lipid_charge",
                    "custom coupling needs q_l != 0",
                ));
            }
            Ok(Normalisation {
                log_mean: (total / area).ln(),
                rho: groups
                    .iter()
                    .map(|g| {
                        g.phi
                            .iter()
                            .map(|p| pool * gamma_prime(*p) / (coupling * total))
                            .collect()
                    })
                    .collect(),
            })
        }
    }
}

/// Lipid density on each group of samples drawing from one pool of size `pool`.
///
/// For the Boltzmann kind `ρ = C w / ∫w` with `w = e^{-q_l β φ}`, so that
/// `∫ρ dS = C`. Custom kinds use `ρ = C γ'(φ) / (β q_l ∫γ)`.
pub fn density(
    params: &PhysicalParams,
    pool: f64,
    groups: &[FaceSamples<'_>],
) -> Result<Vec<Vec<f64>>> {
    Ok(normalise(params, pool, groups)?.rho)
}

/// Surface entropy contribution to `G` for one pool.
///
/// Boltzmann kind: `-(C/β) ln(∫w dS / |Γ|)`. Custom kind:
/// `(C/β) ln(∫γ dS / |Γ|)`.
pub fn surface_entropy(
    params: &PhysicalParams,
    pool: f64,
    groups: &[FaceSamples<'_>],
) -> Result<f64> {
    if pool == 0.0 {
        return Ok(0.0);
    }
    let norm = normalise(params, pool, groups)?;
    let sign = match params.gamma_kind {
        GammaKind::Boltzmann => -1.0,
        GammaKind::Custom { .. } => 1.0,
    };
    Ok(sign * pool / params.beta * norm.log_mean)
}

/// A sampled surface density on a parametric face.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceChargeDensity {
    pub face: Face,
    pub pool: f64,
    pub gamma: GammaKind,
    /// Density at the quadrature nodes, in node order.
    pub rho: Vec<f64>,
    /// `dS` weights at the same nodes.
    pub weights: Vec<f64>,
}

/// `ρ[Γ]` on one face at its quadrature nodes for an independent pool.
pub fn lipid_density(
    params: &PhysicalParams,
    face: Face,
    surface: &ParametricSurface,
    phi_trace: &[f64],
) -> Result<SurfaceChargeDensity> {
    let weights = surface.area_weights()?;
    if weights.len() != phi_trace.len() {
        return Err(Error::invalid(
            "phi_trace",
            format!(
                "expected {} samples, got {}",
                weights.len(),
                phi_trace.len()
            ),
        ));
    }
    let pool = match face {
        Face::Cytosolic => params.lipid_pool.cytosolic,
        Face::Exoplasmic => params.lipid_pool.exoplasmic,
    };
    let mut rho = density(
        params,
        pool,
        &[FaceSamples {
            weights: &weights,
            phi: phi_trace,
        }],
    )?;
    Ok(SurfaceChargeDensity {
        face,
        pool,
        gamma: params.gamma_kind,
        rho: rho.pop().unwrap_or_default(),
        weights,
    })
}

/// `∫_Γ ρ dS`.
pub fn lipid_conservation(density: &SurfaceChargeDensity) -> f64 {
    density
        .rho
        .iter()
        .zip(&density.weights)
        .map(|(r, w)| r * w)
        .sum()
}

/// Steady-state residual `∇_s·(D ∇_s ρ + D β q_l ρ ∇_s φ)` at every node of
/// a uniform cell-centred chart grid.
///
/// Fluxes live on cell faces in parameter space and the divergence is the
/// conservative difference `(1/√a) ∂_α(√a J^α)`. Faces where the metric
/// degenerates (sphere poles) carry zero flux.
pub fn electrodiffusion_residual(
    params: &PhysicalParams,
    surface: &ParametricSurface,
    rho: &[f64],
    phi: &[f64],
) -> Result<Vec<f64>> {
    let q = surface.quadrature;
    let [pu, pv] = surface.shape.periodic();
    if (!pu || !pv) && q.edge_rule != EdgeRule::Midpoint {
        return Err(Error::invalid(
            "quadrature.edge_rule",
            "electrodiffusion residual needs a uniform midpoint grid",
        ));
    }
    if !pv {
        return Err(Error::invalid("surface", "chart must be periodic in v"));
    }
    let (nu, nv) = (q.n_u, q.n_v);
    if rho.len() != nu * nv || phi.len() != nu * nv {
        return Err(Error::invalid(
            "rho",
            "sample count does not match the quadrature grid",
        ));
    }
    if params.diffusion == 0.0 {
        return Ok(vec![0.0; nu * nv]);
    }
    let [[u0, u1], [v0, v1]] = surface.shape.domain();
    let hu = (u1 - u0) / nu as f64;
    let hv = (v1 - v0) / nv as f64;
    let drift = params.beta * params.lipid_charge;
    let at = |i: usize, j: usize| i * nv + j;
    let wrap_v = |j: isize| j.rem_euclid(nv as isize) as usize;

    let dv = |f: &[f64], i: usize, j: usize| {
        (f[at(i, wrap_v(j as isize + 1))] - f[at(i, wrap_v(j as isize - 1))]) / (2.0 * hv)
    };
    let du = |f: &[f64], i: usize, j: usize| -> f64 {
        if pu {
            let ip = (i + 1) % nu;
            let im = (i + nu - 1) % nu;
            (f[at(ip, j)] - f[at(im, j)]) / (2.0 * hu)
        } else if i == 0 {
            (f[at(1, j)] - f[at(0, j)]) / hu
        } else if i == nu - 1 {
            (f[at(nu - 1, j)] - f[at(nu - 2, j)]) / hu
        } else {
            (f[at(i + 1, j)] - f[at(i - 1, j)]) / (2.0 * hu)
        }
    };

    // u-faces: face i sits between cells i-1 and i (face 0 at u0).
    let n_ufaces = if pu { nu } else { nu + 1 };
    let mut flux_u = vec![0.0; n_ufaces * nv];
    for f in 0..n_ufaces {
        let (lo, hi) = if pu {
            ((f + nu - 1) % nu, f % nu)
        } else if f == 0 || f == nu {
            continue;
        } else {
            (f - 1, f)
        };
        let u = u0 + f as f64 * hu;
        for j in 0..nv {
            let v = v0 + (j as f64 + 0.5) * hv;
            let frame = match surface.frame(u, v) {
                Ok(fr) => fr,
                Err(Error::DegenerateMetric { .. }) => continue,
                Err(e) => return Err(e),
            };
            let [auu, auv, _] = frame.inverse_metric();
            let r = 0.5 * (rho[at(lo, j)] + rho[at(hi, j)]);
            let dru = (rho[at(hi, j)] - rho[at(lo, j)]) / hu;
            let dpu = (phi[at(hi, j)] - phi[at(lo, j)]) / hu;
            let drv = 0.5 * (dv(rho, lo, j) + dv(rho, hi, j));
            let dpv = 0.5 * (dv(phi, lo, j) + dv(phi, hi, j));
            flux_u[f * nv + j] =
                frame.area_weight * (auu * (dru + drift * r * dpu) + auv * (drv + drift * r * dpv));
        }
    }
    // v-faces: face j between cells j-1 and j, periodic.
    let mut flux_v = vec![0.0; nu * nv];
    for i in 0..nu {
        let u = u0 + (i as f64 + 0.5) * hu;
        for f in 0..nv {
            let (lo, hi) = ((f + nv - 1) % nv, f);
            let v = v0 + f as f64 * hv;
            let frame = surface.frame(u, v)?;
            let [_, auv, avv] = frame.inverse_metric();
            let r = 0.5 * (rho[at(i, lo)] + rho[at(i, hi)]);
            let drv = (rho[at(i, hi)] - rho[at(i, lo)]) / hv;
            let dpv = (phi[at(i, hi)] - phi[at(i, lo)]) / hv;
            let dru = 0.5 * (du(rho, i, lo) + du(rho, i, hi));
            let dpu = 0.5 * (du(phi, i, lo) + du(phi, i, hi));
            flux_v[i * nv + f] =
                frame.area_weight * (auv * (dru + drift * r * dpu) + avv * (drv + drift * r * dpv));
        }
    }
    let mut out = vec![0.0; nu * nv];
    for i in 0..nu {
        let u = u0 + (i as f64 + 0.5) * hu;
        let (fl, fr) = if pu { (i, (i + 1) % nu) } else { (i, i + 1) };
        for j in 0..nv {
            let v = v0 + (j as f64 + 0.5) * hv;
            let sqrt_a = surface.frame(u, v)?.area_weight;
            let div_u = (flux_u[fr * nv + j] - flux_u[fl * nv + j]) / hu;
            let div_v = (flux_v[i * nv + (j + 1) % nv] - flux_v[i * nv + j]) / hv;
            out[at(i, j)] = params.diffusion * (div_u + div_v) / sqrt_a;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{QuadratureRule, Shape};
    use crate::model::LipidPool;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn params(q_l: f64, c: f64) -> PhysicalParams {
        PhysicalParams {
            lipid_charge: q_l,
            lipid_pool: LipidPool {
                cytosolic: c,
                exoplasmic: c,
                shared: false,
            },
            diffusion: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn constant_potential_gives_uniform_density() {
        let s =
            ParametricSurface::new(Shape::sphere(2.0)).with_quadrature(QuadratureRule::new(16, 16));
        let p = params(-1.0, 3.0);
        let d = lipid_density(&p, Face::Exoplasmic, &s, &vec![0.7; 256]).unwrap();
        for r in &d.rho {
            assert_relative_eq!(*r, 3.0 / (16.0 * PI), max_relative = 1e-12);
        }
        assert_relative_eq!(lipid_conservation(&d), 3.0, max_relative = 1e-13);
    }

    #[test]
    fn uncharged_lipids_ignore_potential() {
        let s =
            ParametricSurface::new(Shape::sphere(1.0)).with_quadrature(QuadratureRule::new(16, 16));
        let p = params(0.0, 1.0);
        let phi: Vec<f64> = s.nodes().iter().map(|n| n.u.cos() * 5.0).collect();
        let d = lipid_density(&p, Face::Cytosolic, &s, &phi).unwrap();
        let area = s.area().unwrap();
        assert!(d.rho.iter().all(|r| (r - 1.0 / area).abs() < 1e-14));
    }

    #[test]
    fn entropy_is_linear_for_single_sample() {
        // One sample: -(C/β) ln(e^{-q β φ}) = C q φ.
        let p = params(-1.0, 2.0);
        let e = surface_entropy(
            &p,
            2.0,
            &[FaceSamples {
                weights: &[5.0],
                phi: &[0.3],
            }],
        )
        .unwrap();
        assert_relative_eq!(e, -0.6, max_relative = 1e-14);
    }

    #[test]
    fn shared_pool_splits_by_weight() {
        let p = params(1.0, 1.0);
        let rho = density(
            &p,
            2.0,
            &[
                FaceSamples {
                    weights: &[1.0],
                    phi: &[0.0],
                },
                FaceSamples {
                    weights: &[1.0],
                    phi: &[(2f64).ln()],
                },
            ],
        )
        .unwrap();
        assert_relative_eq!(rho[0][0], 4.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(rho[1][0], 2.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn custom_kind_rejects_nonpositive_normalisation() {
        fn g(_: f64) -> f64 {
            -1.0
        }
        let mut p = params(1.0, 1.0);
        p.gamma_kind = GammaKind::Custom {
            gamma: g,
            gamma_prime: g,
        };
        let r = density(
            &p,
            1.0,
            &[FaceSamples {
                weights: &[1.0],
                phi: &[0.0],
            }],
        );
        assert!(matches!(r, Err(Error::Normalization(_))));
    }

    #[test]
    fn zero_diffusion_gives_zero_residual() {
        let s = ParametricSurface::new(Shape::torus(2.0, 0.5))
            .with_quadrature(QuadratureRule::new(8, 8));
        let mut p = params(1.0, 1.0);
        p.diffusion = 0.0;
        let r = electrodiffusion_residual(&p, &s, &[1.0; 64], &[0.5; 64]).unwrap();
        assert!(r.iter().all(|x| *x == 0.0));
    }
}
