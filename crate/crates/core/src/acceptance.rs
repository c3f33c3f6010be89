//! The acceptance criteria, each evaluated into one pass/fail verdict.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::{bending_energy, BendingParams};
use crate::error::Result;
use crate::geometry::{ParametricSurface, QuadratureRule, Shape};
use crate::grid3d::{assemble_and_solve_3d, RegionSdf, Solver3dOptions};
use crate::lipid::{electrodiffusion_residual, lipid_conservation, lipid_density, Face};
use crate::model::{BoundaryData, LipidPool, PhysicalParams, SourceCharge};
use crate::radial::{LinearizedReference, PotentialSolution, SolverOptions};
use crate::verify::{
    check_maximizer, check_mst_equivalence, check_weak_form, fd_refinement_ladder,
    geometry_suite, ladder_is_monotone, lemma_checks, volume_transform_checks, BumpPlacement,
    CheckResult, ConcentricCase, RadialCase,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: u8,
    pub title: String,
    pub pass: bool,
    pub seconds: f64,
    pub checks: Vec<CheckResult>,
    /// Set when the evaluation itself failed.
    pub error: Option<String>,
}

impl Criterion {
    fn evaluate(id: u8, title: &str, f: impl FnOnce() -> Result<Vec<CheckResult>>) -> Self {
        let start = Instant::now();
        let out = f();
        let seconds = start.elapsed().as_secs_f64();
        let (checks, error) = match out {
            Ok(c) => (c, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        Self {
            id,
            title: title.into(),
            pass: error.is_none() && !checks.is_empty() && checks.iter().all(|c| c.pass),
            seconds,
            checks,
            error,
        }
    }

    /// The gated check closest to (or furthest past) its tolerance.
    pub fn tightest(&self) -> Option<&CheckResult> {
        let margin = |c: &CheckResult| -> f64 {
            match c.tolerance {
                None => f64::NEG_INFINITY,
                Some(t) if c.pass && c.metric == crate::verify::Metric::LowerBound => {
                    t / c.value.abs().max(1e-300)
                }
                Some(_) if !c.pass => f64::INFINITY,
                Some(t) => c.error() / t.abs().max(1e-300),
            }
        };
        self.checks
            .iter()
            .filter(|c| c.tolerance.is_some())
            .max_by(|a, b| margin(a).total_cmp(&margin(b)))
    }

    pub fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let detail = match (&self.error, self.tightest()) {
            (Some(e), _) => format!("error: {e}"),
            (None, Some(c)) => format!(
                "{} checks, tightest {} = {:.3e} (tol {:.1e})",
                self.checks.len(),
                c.name,
                c.error(),
                c.tolerance.unwrap_or(f64::NAN)
            ),
            (None, None) => "no checks".into(),
        };
        format!(
            "{status} {:>2}. {}: {detail}, {:.1} s",
            self.id, self.title, self.seconds
        )
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

pub fn criterion_geometry() -> Criterion {
    Criterion::evaluate(1, "geometry theorem suite", || {
        let (mut checks, secs) = timed(|| geometry_suite(QuadratureRule::new(128, 128), 1e-5))?;
        checks.push(CheckResult::upper_bound("geometry_suite.seconds", secs, 5.0));
        Ok(checks)
    })
}

pub fn criterion_lemma() -> Criterion {
    Criterion::evaluate(2, "surface divergence diagnostic", || {
        lemma_checks(QuadratureRule::new(128, 128))
    })
}

pub fn criterion_volume(seed: u64) -> Criterion {
    Criterion::evaluate(3, "volume transformation rates", || {
        volume_transform_checks(seed, 10, 1e-5)
    })
}

fn linf_rel(s: &PotentialSolution, exact: impl Fn(f64) -> f64) -> f64 {
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for (x, v) in s.nodes().iter().zip(&s.phi) {
        let e = exact(*x);
        err = err.max((v - e).abs());
        scale = scale.max(e.abs());
    }
    err / scale
}

pub fn criterion_radial() -> Criterion {
    Criterion::evaluate(4, "one-dimensional solver accuracy", || {
        let mut checks = Vec::new();
        let mut errors = Vec::new();
        let mut slowest = 0.0f64;
        for n in [1024, 2048, 4096] {
            let mut case = RadialCase::reference(n);
            case.options = SolverOptions::linearized();
            let (s, secs) = timed(|| case.solve())?;
            slowest = slowest.max(secs);
            let r = LinearizedReference::new(&case.params, &case.geometry, &case.source, &case.bc)?;
            errors.push(linf_rel(&s, |x| r.eval(x)));
        }
        checks.push(CheckResult::upper_bound(
            "linearized.linf_rel[4096]",
            errors[2],
            1e-6,
        ));
        for (k, w) in errors.windows(2).enumerate() {
            checks.push(CheckResult::lower_bound(
                format!("linearized.order[{}->{}]", 1024 << k, 2048 << k),
                (w[0] / w[1]).log2(),
                1.9,
            ));
        }
        let (s, secs) = timed(|| RadialCase::reference(4096).solve())?;
        slowest = slowest.max(secs);
        checks.push(CheckResult::upper_bound(
            "newton.residual",
            s.diagnostics.residual,
            1e-12,
        ));
        // The reference converges before a tail is visible above round-off;
        // a stronger buried charge gives one.
        let mut strong = RadialCase::reference(4096);
        strong.source = SourceCharge::central(2000.0, 0.5);
        let (s, secs) = timed(|| strong.solve())?;
        slowest = slowest.max(secs);
        checks.push(CheckResult::upper_bound(
            "newton.residual[strong]",
            s.diagnostics.residual,
            1e-12,
        ));
        let orders = s.diagnostics.newton_orders(1e-3, 1e-15);
        checks.push(CheckResult::lower_bound(
            "newton.tail_order[strong]",
            orders.iter().cloned().fold(f64::NAN, f64::min),
            1.8,
        ));
        checks.push(CheckResult::upper_bound("solve.seconds", slowest, 1.0));
        Ok(checks)
    })
}

pub fn criterion_weak_form(seed: u64) -> Criterion {
    Criterion::evaluate(5, "weak form and maximiser", || {
        let start = Instant::now();
        let sol = RadialCase::reference(4096).solve()?;
        let mut checks = vec![
            check_weak_form("reference", &sol, 20, seed, BumpPlacement::AwayFromFaces)?,
            check_maximizer("reference", &sol, 20, seed, 1e-2)?,
        ];
        checks.push(CheckResult::upper_bound(
            "weak_form.seconds",
            start.elapsed().as_secs_f64(),
            5.0,
        ));
        Ok(checks)
    })
}

pub fn criterion_mst() -> Criterion {
    Criterion::evaluate(6, "force form equivalence", || {
        let mut checks = Vec::new();
        for (label, case) in [
            ("spherical", RadialCase::reference(4096)),
            ("shared", RadialCase::reference_shared(4096)),
            ("planar", RadialCase::reference_planar(4096)),
        ] {
            checks.extend(check_mst_equivalence(label, &case.solve()?)?);
        }
        Ok(checks)
    })
}

pub fn criterion_shape_derivative() -> Criterion {
    Criterion::evaluate(7, "shape derivative against energy differences", || {
        let case = RadialCase::reference(4096);
        let v = case.reference_velocity();
        let (ladder, secs) = timed(|| {
            fd_refinement_ladder(&case, &v, &[(1024, 4e-3), (2048, 2e-3), (4096, 1e-3)])
        })?;
        let last = ladder[ladder.len() - 1];
        Ok(vec![
            CheckResult::upper_bound("fd_shape.rel[4096]", last.rel_discrepancy, 1e-2),
            CheckResult::upper_bound(
                "fd_shape.monotone_violations",
                if ladder_is_monotone(&ladder, 1e-10) { 0.0 } else { 1.0 },
                0.0,
            ),
            CheckResult::upper_bound("fd_shape.seconds", secs, 30.0),
            CheckResult::report("fd_shape.fd_value", last.fd_value, last.formula_value),
        ])
    })
}

fn lipid_params(q_l: f64, pool: f64, beta: f64, diffusion: f64) -> PhysicalParams {
    PhysicalParams {
        beta,
        lipid_charge: q_l,
        lipid_pool: LipidPool {
            cytosolic: pool,
            exoplasmic: pool,
            shared: false,
        },
        diffusion,
        ..Default::default()
    }
}

fn test_field(s: &ParametricSurface) -> Vec<f64> {
    s.nodes()
        .iter()
        .map(|n| {
            let x = s.shape.point(n.u, n.v);
            1.3 * x.x - 0.4 * x.y * x.z + (0.8 * x.z).sin()
        })
        .collect()
}

/// Area-weighted RMS and pointwise maximum of the electrodiffusion residual
/// of the Boltzmann density, relative to `max ρ`. On the sphere the maximum
/// skips nodes within 0.3 of a pole, where the chart cells are first order.
pub fn stationarity_errors(shape: &Shape, n: usize) -> Result<(f64, f64)> {
    let p = lipid_params(-1.0, 3.0, 1.7, 1.0);
    let s = ParametricSurface::new(shape.clone()).with_quadrature(QuadratureRule::midpoint(n, n));
    let phi = test_field(&s);
    let rho = lipid_density(&p, Face::Cytosolic, &s, &phi)?.rho;
    let r = electrodiffusion_residual(&p, &s, &rho, &phi)?;
    let w = s.area_weights()?;
    let area: f64 = w.iter().sum();
    let scale = rho.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rms = (r.iter().zip(&w).map(|(x, w)| x * x * w).sum::<f64>() / area).sqrt() / scale;
    let polar = matches!(shape, Shape::Sphere { .. });
    let linf = r
        .iter()
        .zip(s.nodes())
        .filter(|(_, n)| !polar || (n.u > 0.3 && n.u < PI - 0.3))
        .fold(0.0f64, |m, (x, _)| m.max(x.abs()))
        / scale;
    Ok((rms, linf))
}

pub fn criterion_lipid() -> Criterion {
    Criterion::evaluate(8, "lipid density suite", || {
        let mut checks = Vec::new();
        let p = lipid_params(-1.0, 37.0, 2.0, 1.0);
        let shapes = [
            Shape::sphere(1.5),
            Shape::ellipsoid(1.5, 1.0, 0.7),
            Shape::torus(2.0, 0.7),
        ];
        for shape in &shapes {
            let s = ParametricSurface::new(shape.clone()).with_quadrature(QuadratureRule::new(64, 64));
            let phi = test_field(&s);
            let d = lipid_density(&p, Face::Cytosolic, &s, &phi)?;
            checks.push(CheckResult::relative(
                format!("conservation[{}]", shape.name()),
                lipid_conservation(&d),
                37.0,
                1e-10,
            ));
            let mut worst = 0.0f64;
            for c in [-20.0, 0.3, 50.0] {
                let moved: Vec<f64> = phi.iter().map(|v| v + c).collect();
                let m = lipid_density(&p, Face::Cytosolic, &s, &moved)?;
                for (a, b) in m.rho.iter().zip(&d.rho) {
                    worst = worst.max((a - b).abs() / b.abs());
                }
            }
            checks.push(CheckResult::upper_bound(
                format!("gauge[{}]", shape.name()),
                worst,
                1e-12,
            ));
        }
        for shape in [Shape::sphere(1.5), Shape::torus(2.0, 0.7)] {
            let errs = [32, 64, 128, 256]
                .iter()
                .map(|n| stationarity_errors(&shape, *n))
                .collect::<Result<Vec<_>>>()?;
            let order = |f: fn(&(f64, f64)) -> f64| {
                errs.windows(2)
                    .map(|w| (f(&w[0]) / f(&w[1])).log2())
                    .fold(f64::INFINITY, f64::min)
            };
            checks.push(CheckResult::lower_bound(
                format!("stationarity.rms_order[{}]", shape.name()),
                order(|e| e.0),
                1.9,
            ));
            checks.push(CheckResult::lower_bound(
                format!("stationarity.max_order[{}]", shape.name()),
                order(|e| e.1),
                1.9,
            ));
        }
        let d = 0.8;
        let s = ParametricSurface::new(Shape::sphere(1.0))
            .with_quadrature(QuadratureRule::midpoint(256, 256));
        let y1: Vec<f64> = s.nodes().iter().map(|n| n.u.cos()).collect();
        let r = electrodiffusion_residual(
            &lipid_params(-1.0, 1.0, 1.0, d),
            &s,
            &y1,
            &vec![0.25; y1.len()],
        )?;
        let (num, den) = r
            .iter()
            .zip(&y1)
            .fold((0.0, 0.0), |(a, b), (r, y)| (a + r * y, b + y * y));
        checks.push(CheckResult::relative("y1.eigenvalue", num / den, -2.0 * d, 1e-4));
        let pointwise = r
            .iter()
            .zip(&y1)
            .fold(0.0f64, |m, (a, y)| m.max((a + 2.0 * d * y).abs()));
        checks.push(CheckResult::upper_bound(
            "y1.pointwise",
            pointwise / (2.0 * d),
            1e-4,
        ));
        Ok(checks)
    })
}

pub fn criterion_bending() -> Criterion {
    Criterion::evaluate(9, "bending energy", || {
        let q = QuadratureRule::new(128, 128);
        let (k_c, k_g) = (1.3, -0.7);
        let sphere = ParametricSurface::new(Shape::sphere(1.7)).with_quadrature(q);
        let e = bending_energy(&sphere, &BendingParams { k_c, k_g, c0: 0.0 })?;
        let torus = ParametricSurface::new(Shape::torus(2.0, 0.7)).with_quadrature(q);
        let g = bending_energy(
            &torus,
            &BendingParams {
                k_c: 0.0,
                k_g: 1.0,
                c0: 0.0,
            },
        )?;
        Ok(vec![
            CheckResult::relative("bending[sphere]", e, 8.0 * PI * k_c + 4.0 * PI * k_g, 1e-6),
            CheckResult::absolute("bending[torus].gaussian", g, 0.0, 1e-8),
        ])
    })
}

/// Uniform ε, no charges, affine Dirichlet data: worst nodal deviation.
pub fn affine_grid_error(n: usize) -> Result<f64> {
    let params = PhysicalParams {
        ions: vec![],
        eps_s: 3.0,
        eps_m: 3.0,
        eps_p: 3.0,
        lipid_charge: 0.0,
        ..Default::default()
    };
    let bc = BoundaryData::Affine {
        offset: 0.3,
        gradient: [0.2, -0.1, 0.05],
    };
    let sol = assemble_and_solve_3d(
        &params,
        &RegionSdf::concentric(2.0, 4.0, 6.0, n),
        &SourceCharge::none(),
        &bc,
        &Solver3dOptions::default(),
    )?;
    let g = sol.grid();
    let mut worst = 0.0f64;
    for (idx, phi) in sol.phi.iter().enumerate() {
        let [i, j, k] = g.coords(idx);
        let x = g.point(i, j, k);
        worst = worst.max((phi - bc.eval([x.x, x.y, x.z], &SourceCharge::none())).abs());
    }
    Ok(worst)
}

pub fn criterion_grid() -> Criterion {
    Criterion::evaluate(10, "Cartesian solver against the spherical reduction", || {
        let case = ConcentricCase::reference();
        let one = case.solve_reference()?;
        let coarse = case.compare(&one, 65)?;
        let fine = case.compare(&one, 129)?;
        let mut checks = vec![
            CheckResult::upper_bound("grid.field_linf_rel[129]", fine.field_rel_linf, 2e-2),
            CheckResult::upper_bound("grid.trace_rel[129]", fine.trace_error(), 5e-2),
            CheckResult::lower_bound(
                "grid.refinement_ratio[65->129]",
                coarse.field_rel_linf / fine.field_rel_linf,
                2.0,
            ),
            CheckResult::upper_bound("grid.affine_error", affine_grid_error(33)?, 1e-10),
            CheckResult::upper_bound("grid.seconds[129]", fine.seconds, 300.0),
        ];
        for f in &fine.faces {
            let face = f.face.name();
            checks.push(CheckResult::report(
                format!("grid.probe_only_trace_rel[{face}]"),
                f.probe_grad_s_n.max(f.probe_grad_m_n),
                0.0,
            ));
            checks.push(CheckResult::upper_bound(
                format!("grid.probe_only_paper_vs_mst[{face}]"),
                f.probe_paper_mst,
                5e-2,
            ));
            checks.push(CheckResult::report(
                format!("grid.force_rel[{face}]"),
                f.force_rel,
                0.0,
            ));
        }
        Ok(checks)
    })
}

/// All criteria in order. Criteria that use random samples take `seed`.
pub fn acceptance_suite(seed: u64) -> Vec<Criterion> {
    vec![
        criterion_geometry(),
        criterion_lemma(),
        criterion_volume(seed),
        criterion_radial(),
        criterion_weak_form(seed),
        criterion_mst(),
        criterion_shape_derivative(),
        criterion_lipid(),
        criterion_bending(),
        criterion_grid(),
    ]
}
