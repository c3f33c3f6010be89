use std::f64::consts::PI;

use memforce::geometry::{ParametricSurface, QuadratureRule, Shape};
use memforce::lipid::{electrodiffusion_residual, lipid_conservation, lipid_density, Face};
use memforce::model::{LipidPool, PhysicalParams};

fn params(q_l: f64, pool: f64, beta: f64) -> PhysicalParams {
    PhysicalParams {
        beta,
        lipid_charge: q_l,
        lipid_pool: LipidPool {
            cytosolic: pool,
            exoplasmic: pool,
            shared: false,
        },
        diffusion: 1.0,
        ..Default::default()
    }
}

fn surfaces(q: QuadratureRule) -> Vec<ParametricSurface> {
    [
        Shape::sphere(1.5),
        Shape::ellipsoid(1.5, 1.0, 0.7),
        Shape::torus(2.0, 0.7),
    ]
    .into_iter()
    .map(|s| ParametricSurface::new(s).with_quadrature(q))
    .collect()
}

fn field(s: &ParametricSurface) -> Vec<f64> {
    s.nodes()
        .iter()
        .map(|n| {
            let x = s.shape.point(n.u, n.v);
            1.3 * x.x - 0.4 * x.y * x.z + (0.8 * x.z).sin()
        })
        .collect()
}

#[test]
fn density_integrates_to_pool() {
    let p = params(-1.0, 37.0, 2.0);
    for s in surfaces(QuadratureRule::new(64, 64)) {
        let d = lipid_density(&p, Face::Cytosolic, &s, &field(&s)).unwrap();
        assert!(((lipid_conservation(&d) - 37.0) / 37.0).abs() <= 1e-10);
        assert!(d.rho.iter().all(|r| *r > 0.0 && r.is_finite()));
        let doubled = memforce::lipid::SurfaceChargeDensity {
            rho: d.rho.iter().map(|r| 2.0 * r).collect(),
            ..d
        };
        assert!((lipid_conservation(&doubled) - 74.0).abs() < 1e-9);
    }
}

#[test]
fn density_is_gauge_invariant() {
    let p = params(1.0, 5.0, 1.0);
    for s in surfaces(QuadratureRule::new(48, 48)) {
        let phi = field(&s);
        let base = lipid_density(&p, Face::Exoplasmic, &s, &phi).unwrap();
        for c in [-20.0, 0.3, 50.0] {
            let shifted: Vec<f64> = phi.iter().map(|v| v + c).collect();
            let d = lipid_density(&p, Face::Exoplasmic, &s, &shifted).unwrap();
            for (a, b) in d.rho.iter().zip(&base.rho) {
                assert!((a - b).abs() <= 1e-12 * b.abs(), "{c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn boltzmann_density_on_unit_sphere() {
    let s = ParametricSurface::new(Shape::sphere(1.0)).with_quadrature(QuadratureRule::new(64, 16));
    let p = params(1.0, 1.0, 1.0);
    let phi: Vec<f64> = s.nodes().iter().map(|n| n.u.cos()).collect();
    let d = lipid_density(&p, Face::Cytosolic, &s, &phi).unwrap();
    let norm = 4.0 * PI * 1f64.sinh();
    for (n, r) in s.nodes().iter().zip(&d.rho) {
        let exact = (-n.u.cos()).exp() / norm;
        assert!((r - exact).abs() <= 1e-12 * exact);
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn orders(errs: &[f64]) -> Vec<f64> {
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

#[test]
fn boltzmann_density_is_stationary_to_second_order() {
    let p = params(-1.0, 3.0, 1.7);
    for shape in [Shape::sphere(1.5), Shape::torus(2.0, 0.7)] {
        let (mut rms, mut linf) = (Vec::new(), Vec::new());
        for n in [32, 64, 128, 256] {
            let s = ParametricSurface::new(shape.clone())
                .with_quadrature(QuadratureRule::midpoint(n, n));
            let phi = field(&s);
            let rho = lipid_density(&p, Face::Cytosolic, &s, &phi).unwrap().rho;
            let r = electrodiffusion_residual(&p, &s, &rho, &phi).unwrap();
            let w = s.area_weights().unwrap();
            let area: f64 = w.iter().sum();
            let scale = max_abs(&rho);
            rms.push((r.iter().zip(&w).map(|(x, w)| x * x * w).sum::<f64>() / area).sqrt() / scale);
            // Cells touching a sphere pole are only first-order consistent.
            let away: Vec<f64> = match shape {
                Shape::Sphere { .. } => r
                    .iter()
                    .zip(s.nodes())
                    .filter(|(_, n)| n.u > 0.3 && n.u < PI - 0.3)
                    .map(|(x, _)| *x)
                    .collect(),
                _ => r,
            };
            linf.push(max_abs(&away) / scale);
        }
        let name = shape.name();
        assert!(orders(&rms).iter().all(|q| *q >= 1.9), "{name}: {rms:?}");
        assert!(orders(&linf).iter().all(|q| *q >= 1.9), "{name}: {linf:?}");
    }
}

#[test]
fn first_harmonic_is_an_eigenfunction() {
    let d = 0.8;
    let mut p = params(-1.0, 1.0, 1.0);
    p.diffusion = d;
    let s = ParametricSurface::new(Shape::sphere(1.0))
        .with_quadrature(QuadratureRule::midpoint(256, 256));
    let nodes = s.nodes();
    let y1: Vec<f64> = nodes.iter().map(|n| n.u.cos()).collect();
    let phi = vec![0.25; nodes.len()];
    let r = electrodiffusion_residual(&p, &s, &y1, &phi).unwrap();
    let err = r
        .iter()
        .zip(&y1)
        .fold(0.0f64, |m, (a, y)| m.max((a + 2.0 * d * y).abs()));
    assert!(err <= 1e-4 * 2.0 * d, "{err}");
    let none = electrodiffusion_residual(
        &PhysicalParams {
            diffusion: 0.0,
            ..p
        },
        &s,
        &y1,
        &phi,
    )
    .unwrap();
    assert!(none.iter().all(|x| *x == 0.0));
}
