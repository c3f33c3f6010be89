//! Oracle harness: finite-difference shape derivatives, geometry theorem
//! checks, force-form equivalence and weak-form residuals.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{electrostatic_energy, radial_energy};
use crate::error::{Error, Result};
use crate::force::{
    force_mst, force_paper, radial_curvature_term, radial_force_profile, radial_shape_derivative,
    ForceProfile,
};
use crate::geometry::{
    divergence_integrals, surface_jacobian_fd, ParametricSurface, QuadratureRule, Shape,
    TransformState, Vec3, VelocityField,
};
use crate::grid3d::{
    assemble_and_solve_3d, extract_traces_3d_with, GridSolution, GridTraceMethod, RegionSdf,
    Solver3dOptions,
};
use crate::lipid::Face;
use crate::model::{BoundaryData, IonSpecies, LipidPool, PhysicalParams, SourceCharge};
use crate::radial::{
    solve_planar, solve_spherical, PotentialSolution, RadialGeometry, SolverOptions, Symmetry,
};

pub const SCHEMA_VERSION: u32 = 1;

/// How a check turns its value into a pass/fail decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `|value - reference| ≤ tol`
    Absolute,
    /// `|value - reference| / |reference| ≤ tol`
    Relative,
    /// `value ≤ tol`
    UpperBound,
    /// `value ≥ tol`
    LowerBound,
    /// Reported without a tolerance.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub metric: Metric,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

impl CheckResult {
    fn build(
        name: impl Into<String>,
        value: f64,
        reference: f64,
        metric: Metric,
        tolerance: Option<f64>,
    ) -> Self {
        let abs_error = (value - reference).abs();
        let rel_error = if reference == 0.0 {
            abs_error
        } else {
            abs_error / reference.abs()
        };
        let mut c = Self {
            name: name.into(),
            value,
            reference,
            abs_error,
            rel_error,
            metric,
            tolerance,
            pass: true,
        };
        if let Some(t) = tolerance {
            // NaN errors fail.
            c.pass = match metric {
                Metric::LowerBound => c.value >= t,
                _ => c.error() <= t,
            };
        }
        c
    }

    pub fn absolute(name: impl Into<String>, value: f64, reference: f64, tol: f64) -> Self {
        Self::build(name, value, reference, Metric::Absolute, Some(tol))
    }

    pub fn relative(name: impl Into<String>, value: f64, reference: f64, tol: f64) -> Self {
        Self::build(name, value, reference, Metric::Relative, Some(tol))
    }

    pub fn upper_bound(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self::build(name, value, 0.0, Metric::UpperBound, Some(tol))
    }

    pub fn lower_bound(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self::build(name, value, 0.0, Metric::LowerBound, Some(tol))
    }

    pub fn report(name: impl Into<String>, value: f64, reference: f64) -> Self {
        Self::build(name, value, reference, Metric::Report, None)
    }

    /// The quantity compared against the tolerance.
    pub fn error(&self) -> f64 {
        match self.metric {
            Metric::Absolute | Metric::Report => self.abs_error,
            Metric::Relative => self.rel_error,
            Metric::UpperBound | Metric::LowerBound => self.value,
        }
    }

    pub fn line(&self) -> String {
        let status = match (self.tolerance, self.pass) {
            (None, _) => "INFO",
            (Some(_), true) => "PASS",
            (Some(_), false) => "FAIL",
        };
        let tol = self
            .tolerance
            .map(|t| format!("{t:.1e}"))
            .unwrap_or_else(|| "-".into());
        format!(
            "{status} {:<44} value={:.6e} ref={:.6e} err={:.3e} tol={tol} ({:?})",
            self.name,
            self.value,
            self.reference,
            self.error(),
            self.metric
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub fingerprint: String,
    pub seed: u64,
    /// Left unset when the report must be byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn new(fingerprint: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            fingerprint: fingerprint.into(),
            seed,
            runtime_seconds: None,
            checks: Vec::new(),
        }
    }

    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, checks: impl IntoIterator<Item = CheckResult>) {
        self.checks.extend(checks);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        let failed = self.failures().count();
        let _ = write!(
            s,
            "{} checks, {failed} failed, fingerprint {}",
            self.checks.len(),
            self.fingerprint
        );
        if let Some(t) = self.runtime_seconds {
            let _ = write!(s, ", {t:.2} s");
        }
        s.push('\n');
        s
    }
}

/// Short SHA-256 fingerprint of a configuration's canonical bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Geometry

pub struct CorpusPair {
    pub name: &'static str,
    pub surface: ParametricSurface,
    pub velocity: VelocityField,
}

/// The surface/velocity pairs used for the surface Jacobian checks.
pub fn geometry_corpus(quadrature: QuadratureRule) -> Vec<CorpusPair> {
    let pair = |name, shape, velocity| CorpusPair {
        name,
        surface: ParametricSurface::new(shape).with_quadrature(quadrature),
        velocity,
    };
    vec![
        pair(
            "sphere+radial",
            Shape::sphere(1.0),
            VelocityField::dilation(),
        ),
        pair(
            "sphere+translation",
            Shape::sphere(1.0),
            VelocityField::Uniform {
                v: [0.3, -0.2, 0.5],
            },
        ),
        pair(
            "sphere+rotation",
            Shape::sphere(1.0),
            VelocityField::rotation([0.2, -0.5, 1.0]),
        ),
        pair(
            "ellipsoid+shear",
            Shape::ellipsoid(1.5, 1.0, 0.7),
            VelocityField::shear(0.8),
        ),
        pair(
            "torus+normal_bump",
            Shape::torus(2.0, 0.7),
            VelocityField::TorusNormalBump {
                major: 2.0,
                amplitude: 0.3,
                modulation: 0.5,
                wave: [1.0, 0.5, 0.7],
            },
        ),
    ]
}

/// Largest node error `|(J_s(τ) - J_s(-τ))/(2τ) - ∇_s·V|`.
pub fn theorem_s1_error(
    surface: &ParametricSurface,
    velocity: &VelocityField,
    tau: f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for fr in surface.frames()? {
        let fd = surface_jacobian_fd(&fr, velocity, tau)?;
        let exact = fr.divergence(&velocity.jacobian(&fr.r));
        worst = worst.max((fd - exact).abs());
    }
    Ok(worst)
}

pub fn check_theorem_s1(pair: &CorpusPair, tau: f64) -> Result<CheckResult> {
    let e = theorem_s1_error(&pair.surface, &pair.velocity, tau)?;
    Ok(CheckResult::upper_bound(
        format!("surface_jacobian_rate[{}]", pair.name),
        e,
        1e-6,
    ))
}

pub fn check_gauss_bonnet(name: &str, surface: &ParametricSurface) -> Result<CheckResult> {
    let chi = surface
        .shape
        .euler_characteristic()
        .ok_or_else(|| Error::invalid("surface", "Gauss-Bonnet needs a closed surface"))?;
    let total = surface.total_gaussian_curvature()?;
    let exact = 2.0 * PI * f64::from(chi);
    let label = format!("gauss_bonnet[{name}]");
    Ok(if exact == 0.0 {
        CheckResult::absolute(label, total, exact, 1e-6)
    } else {
        CheckResult::relative(label, total, exact, 1e-6)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaDiagnostic {
    /// `∫ ∇_s·F dS`
    pub divergence_integral: f64,
    /// `∫ 2H (F·n) dS`
    pub curvature_integral: f64,
}

pub fn lemma_diagnostic(
    surface: &ParametricSurface,
    field: &VelocityField,
) -> Result<LemmaDiagnostic> {
    let (divergence_integral, curvature_integral) = divergence_integrals(surface, field)?;
    Ok(LemmaDiagnostic {
        divergence_integral,
        curvature_integral,
    })
}

/// Tangential fields integrate to zero; `F = x` on the unit sphere gives
/// `8π`, matching the curvature term rather than zero.
pub fn lemma_checks(quadrature: QuadratureRule) -> Result<Vec<CheckResult>> {
    let sphere = ParametricSurface::new(Shape::sphere(1.0)).with_quadrature(quadrature);
    let torus = ParametricSurface::new(Shape::torus(2.0, 0.7)).with_quadrature(quadrature);
    let rot = lemma_diagnostic(&sphere, &VelocityField::rotation([0.3, 1.0, -0.4]))?;
    let x = lemma_diagnostic(&sphere, &VelocityField::dilation())?;
    let bump = lemma_diagnostic(
        &torus,
        &VelocityField::TorusNormalBump {
            major: 2.0,
            amplitude: 0.3,
            modulation: 0.5,
            wave: [1.0, 0.5, 0.7],
        },
    )?;
    Ok(vec![
        CheckResult::absolute(
            "lemma[sphere+rotation].divergence",
            rot.divergence_integral,
            0.0,
            1e-8,
        ),
        CheckResult::absolute(
            "lemma[sphere+rotation].curvature",
            rot.curvature_integral,
            0.0,
            1e-8,
        ),
        CheckResult::absolute(
            "lemma[sphere+x].divergence",
            x.divergence_integral,
            8.0 * PI,
            1e-6,
        ),
        CheckResult::absolute(
            "lemma[sphere+x].vs_curvature",
            x.divergence_integral,
            x.curvature_integral,
            1e-6,
        ),
        CheckResult::absolute(
            "lemma[torus+normal_bump].vs_curvature",
            bump.divergence_integral,
            bump.curvature_integral,
            1e-6,
        ),
        CheckResult::report(
            "lemma[torus+normal_bump].divergence",
            bump.divergence_integral,
            0.0,
        ),
    ])
}

pub fn geometry_suite(quadrature: QuadratureRule, tau: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for pair in geometry_corpus(quadrature) {
        out.push(check_theorem_s1(&pair, tau)?);
    }
    for (name, shape) in [
        ("sphere", Shape::sphere(1.3)),
        ("ellipsoid", Shape::ellipsoid(1.5, 1.0, 0.7)),
        ("torus", Shape::torus(2.0, 0.7)),
    ] {
        let s = ParametricSurface::new(shape).with_quadrature(quadrature);
        out.push(check_gauss_bonnet(name, &s)?);
    }
    Ok(out)
}

fn random_matrix(rng: &mut ChaCha8Rng, scale: f64) -> [[f64; 3]; 3] {
    let mut a = [[0.0; 3]; 3];
    for row in &mut a {
        for v in row.iter_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
    a
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| scale * rng.random_range(-1.0..1.0))
}

/// Central differences of `J_t` and `A(t)` against their analytic rates
/// on `n` seeded `(V, X)` samples. Each entry is the worst sample.
pub fn volume_transform_checks(seed: u64, n: usize, tau: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e_j0, mut e_jt, mut e_a) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..n {
        let v = if k % 2 == 0 {
            VelocityField::Trig {
                l: random_matrix(&mut rng, 0.5),
                amplitude: random_vec(&mut rng, 0.5),
                wave: random_vec(&mut rng, 2.0),
            }
        } else {
            VelocityField::Linear {
                a: random_matrix(&mut rng, 0.8),
                b: random_vec(&mut rng, 1.0),
            }
        };
        let x = Vec3::from(random_vec(&mut rng, 1.0));
        let at = |t: f64| TransformState::new(t, &v);

        let j0 = at(0.0).volume_jacobian(&x)?;
        let fd0 = (at(tau).volume_jacobian(&x)?.j - at(-tau).volume_jacobian(&x)?.j) / (2.0 * tau);
        e_j0 = e_j0.max((fd0 - j0.dj_dt).abs());

        let t = rng.random_range(-0.1..0.1);
        let jt = at(t).volume_jacobian(&x)?;
        let fdt =
            (at(t + tau).volume_jacobian(&x)?.j - at(t - tau).volume_jacobian(&x)?.j) / (2.0 * tau);
        e_jt = e_jt.max((fdt - jt.dj_dt_map).abs());

        let a0 = at(0.0).transform_tensor(&x)?;
        let fda =
            (at(tau).transform_tensor(&x)?.a - at(-tau).transform_tensor(&x)?.a) / (2.0 * tau);
        e_a = e_a.max((fda - a0.a_prime_0).abs().max());
    }
    Ok(vec![
        CheckResult::upper_bound("volume_jacobian_rate[t=0]", e_j0, 1e-6),
        CheckResult::upper_bound("volume_jacobian_rate[random t]", e_jt, 1e-6),
        CheckResult::upper_bound("transform_tensor_rate[t=0]", e_a, 1e-6),
    ])
}

// ---------------------------------------------------------------------------
// One-dimensional electrostatics

/// A complete one-dimensional problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialCase {
    pub params: PhysicalParams,
    pub geometry: RadialGeometry,
    #[serde(default)]
    pub source: SourceCharge,
    #[serde(default)]
    pub bc: BoundaryData,
    #[serde(default)]
    pub options: SolverOptions,
}

impl RadialCase {
    /// Charged membrane shell around a buried charge in 0.1 M-like salt:
    /// `ε_s = 80`, `ε_m = 2`, `κ = 0.5`, `Q = 500`, `C = 50` per face.
    pub fn reference(cells: usize) -> Self {
        Self {
            params: PhysicalParams {
                ions: vec![IonSpecies::new(1.0, 10.0), IonSpecies::new(-1.0, 10.0)],
                lipid_charge: -1.0,
                lipid_pool: LipidPool {
                    cytosolic: 50.0,
                    exoplasmic: 50.0,
                    shared: false,
                },
                ..Default::default()
            },
            geometry: RadialGeometry::spherical(5.0, 7.0, 30.0, cells),
            source: SourceCharge::central(500.0, 0.5),
            bc: BoundaryData::zero(),
            options: SolverOptions::default(),
        }
    }

    /// The reference case with the lipids drawn from one shared pool.
    pub fn reference_shared(cells: usize) -> Self {
        let mut c = Self::reference(cells);
        c.params.lipid_pool.shared = true;
        c
    }

    /// A charged slab in salt with unequal face charges.
    pub fn reference_planar(cells: usize) -> Self {
        Self {
            params: PhysicalParams {
                ions: vec![IonSpecies::new(1.0, 10.0), IonSpecies::new(-1.0, 10.0)],
                lipid_charge: -1.0,
                lipid_pool: LipidPool {
                    cytosolic: 2.0,
                    exoplasmic: 0.5,
                    shared: false,
                },
                ..Default::default()
            },
            geometry: RadialGeometry::planar(20.0, 24.0, 44.0, cells),
            source: SourceCharge::none(),
            bc: BoundaryData::Affine {
                offset: 0.2,
                gradient: [0.0, 0.0, -0.01],
            },
            options: SolverOptions::default(),
        }
    }

    /// Bumps centred on both faces, moving them by different amounts.
    pub fn reference_velocity(&self) -> VelocityField {
        let [c, e] = self.geometry.membrane.unwrap_or([0.0, 0.0]);
        let support = 0.45 * (e - c);
        match self.geometry.symmetry {
            Symmetry::Spherical => VelocityField::RadialBumps {
                center: [0.0; 3],
                radii: vec![c, e],
                amplitudes: vec![1.0, 0.6],
                support,
            },
            Symmetry::Planar => VelocityField::PlanarBumps {
                positions: vec![c, e],
                amplitudes: vec![1.0, 0.6],
                support,
            },
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_vec(self).unwrap_or_default())
    }

    pub fn solve(&self) -> Result<PotentialSolution> {
        match self.geometry.symmetry {
            Symmetry::Spherical => solve_spherical(
                &self.params,
                &self.geometry,
                &self.source,
                &self.bc,
                &self.options,
            ),
            Symmetry::Planar => solve_planar(&self.params, &self.geometry, &self.bc, &self.options),
        }
    }

    fn source_extent(&self) -> f64 {
        match self.geometry.symmetry {
            Symmetry::Spherical if !self.source.is_empty() => self.source.support_radius(1e-12),
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdShapeDerivative {
    pub cells: usize,
    pub tau: f64,
    pub g_plus: f64,
    pub g_minus: f64,
    /// `(G(+τ) - G(-τ)) / 2τ`
    pub fd_value: f64,
    /// `∫ -F_n (V·n) dS` with each force form.
    pub formula_value: f64,
    pub alt_value: f64,
    pub mst_value: f64,
    pub abs_discrepancy: f64,
    pub rel_discrepancy: f64,
    /// Area-change entropy term missing from the force integral; zero
    /// unless a pool spans faces of different curvature.
    pub curvature_value: f64,
    /// Discrepancy of `formula_value + curvature_value` relative to `|fd_value|`.
    pub completed_rel_discrepancy: f64,
}

/// Compares the difference quotient of `G` under face displacements
/// `±τ (V·n)` with the force integral at the unperturbed faces.
pub fn fd_shape_derivative(
    case: &RadialCase,
    velocity: &VelocityField,
    tau: f64,
) -> Result<FdShapeDerivative> {
    let faces = case.geometry.membrane.ok_or_else(|| {
        Error::invalid("geometry.membrane", "shape derivative needs membrane faces")
    })?;
    velocity.check_separation(&faces, case.source_extent(), case.geometry.outer)?;
    let base = case.solve()?;
    let formula_value = radial_shape_derivative(&base, |s| s.f_paper, velocity)?;
    let alt_value = radial_shape_derivative(&base, |s| s.f_alt, velocity)?;
    let mst_value = radial_shape_derivative(&base, |s| s.f_mst, velocity)?;
    let curvature_value = radial_curvature_term(&base, velocity)?;

    let counts = case.geometry.segment_counts()?;
    let energy_at = |t: f64| -> Result<f64> {
        // Moving along n by τ(V·n) is moving along e_z by τ V_z in both reductions.
        let moved = faces.map(|x| x + t * velocity.eval(&Vec3::new(0.0, 0.0, x)).z);
        let gap = faces[1] - faces[0];
        let too_far = moved
            .iter()
            .zip(faces)
            .any(|(m, f)| (m - f).abs() >= 0.25 * gap);
        if too_far || moved[0] <= case.source_extent() || moved[1] >= case.geometry.outer {
            return Err(Error::SupportViolation(format!(
                "τ = {tau} moves the faces too far: {moved:?}"
            )));
        }
        let mut c = case.clone();
        c.geometry = c
            .geometry
            .with_faces(moved)
            .with_segment_cells(Some(counts.clone()));
        Ok(electrostatic_energy(&c.solve()?)?.g)
    };
    let g_plus = energy_at(tau)?;
    let g_minus = energy_at(-tau)?;
    let fd_value = (g_plus - g_minus) / (2.0 * tau);
    let abs_discrepancy = (fd_value - formula_value).abs();
    let relative = |d: f64| {
        if fd_value == 0.0 {
            d
        } else {
            d / fd_value.abs()
        }
    };
    let rel_discrepancy = relative(abs_discrepancy);
    let completed_rel_discrepancy = relative((fd_value - formula_value - curvature_value).abs());
    Ok(FdShapeDerivative {
        cells: case.geometry.cells,
        tau,
        g_plus,
        g_minus,
        fd_value,
        formula_value,
        alt_value,
        mst_value,
        abs_discrepancy,
        rel_discrepancy,
        curvature_value,
        completed_rel_discrepancy,
    })
}

/// Runs [`fd_shape_derivative`] over `(cells, τ)` pairs.
pub fn fd_refinement_ladder(
    case: &RadialCase,
    velocity: &VelocityField,
    ladder: &[(usize, f64)],
) -> Result<Vec<FdShapeDerivative>> {
    ladder
        .iter()
        .map(|(n, tau)| {
            let mut c = case.clone();
            c.geometry = c.geometry.with_cells(*n).with_segment_cells(None);
            fd_shape_derivative(&c, velocity, *tau)
        })
        .collect()
}

/// Discrepancies must not grow along the ladder beyond `floor`.
pub fn ladder_is_monotone(ladder: &[FdShapeDerivative], floor: f64) -> bool {
    ladder
        .windows(2)
        .all(|w| w[1].abs_discrepancy <= w[0].abs_discrepancy + floor)
}

pub fn mst_checks(label: &str, profile: &ForceProfile, tol: f64) -> Vec<CheckResult> {
    vec![
        CheckResult::upper_bound(
            format!("force_paper_vs_mst[{label}]"),
            profile.max_paper_mst_deviation(),
            tol,
        ),
        CheckResult::upper_bound(
            format!("force_paper_vs_alt[{label}]"),
            profile.max_paper_alt_deviation(),
            tol,
        ),
    ]
}

pub fn check_mst_equivalence(
    label: &str,
    solution: &PotentialSolution,
) -> Result<Vec<CheckResult>> {
    Ok(mst_checks(label, &radial_force_profile(solution)?, 1e-10))
}

/// Cubic B-spline with support `[-2, 2]`.
pub fn cubic_bspline(s: f64) -> f64 {
    let a = s.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// Where seeded test functions may sit relative to the membrane faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpPlacement {
    /// Support at least two cells away from every interface node.
    AwayFromFaces,
    /// Support straddling a face.
    AcrossFaces,
    Anywhere,
}

/// Nodal values of `n` seeded B-spline bumps, each vanishing on
/// Dirichlet nodes.
pub fn seeded_bumps(
    solution: &PotentialSolution,
    n: usize,
    seed: u64,
    placement: BumpPlacement,
) -> Vec<Vec<f64>> {
    let x = solution.nodes();
    let (lo, hi) = solution.problem.free();
    let (x0, x1) = (x[0], x[x.len() - 1]);
    let face_nodes: Vec<usize> = solution.problem.faces.iter().map(|f| f.node).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 100_000 {
        attempts += 1;
        let w = rng.random_range(0.1..1.5);
        let c = match placement {
            BumpPlacement::AcrossFaces if !face_nodes.is_empty() => {
                let f = solution.problem.faces[rng.random_range(0..face_nodes.len())].position;
                f + rng.random_range(-1.5..1.5) * w
            }
            _ => rng.random_range(x0..x1),
        };
        let psi: Vec<f64> = x.iter().map(|xi| cubic_bspline((xi - c) / w)).collect();
        let support: Vec<usize> = (0..x.len()).filter(|i| psi[*i] != 0.0).collect();
        let (Some(&s0), Some(&s1)) = (support.first(), support.last()) else {
            continue;
        };
        if s0 < lo || s1 >= hi {
            continue;
        }
        let near_face = face_nodes.iter().any(|f| *f + 2 >= s0 && *f <= s1 + 2);
        let ok = match placement {
            BumpPlacement::AwayFromFaces => !near_face,
            BumpPlacement::AcrossFaces => face_nodes.iter().any(|f| psi[*f] != 0.0),
            BumpPlacement::Anywhere => true,
        };
        if ok {
            out.push(psi);
        }
    }
    out
}

/// Discrete weak-form residual
/// `-Σ a_k Δφ Δψ - Σ v B'(φ) ψ + Σ q ψ + Σ σ ψ`, normalised by the sum of
/// the absolute values of its individual products.
pub fn weak_form_residual(solution: &PotentialSolution, psi: &[f64]) -> Result<f64> {
    let p = &solution.problem;
    let phi = &solution.phi;
    let mut total = 0.0;
    let mut scale = 0.0;
    let mut add = |t: f64| {
        total += t;
        scale += t.abs();
    };
    for (k, a) in p.conductance.iter().enumerate() {
        add(-a * (phi[k + 1] - phi[k]) * (psi[k + 1] - psi[k]));
    }
    for i in 0..phi.len() {
        let vol = p.solvent_left[i] + p.solvent_right[i];
        if vol > 0.0 {
            add(-vol * p.ion_force(phi[i])? * psi[i]);
        }
        add((p.source_left[i] + p.source_right[i]) * psi[i]);
    }
    for (f, s) in p.faces.iter().zip(p.face_sources(&solution.rho)) {
        add(s * psi[f.node]);
    }
    Ok(if scale == 0.0 {
        0.0
    } else {
        total.abs() / scale
    })
}

pub fn check_weak_form(
    label: &str,
    solution: &PotentialSolution,
    n_tests: usize,
    seed: u64,
    placement: BumpPlacement,
) -> Result<CheckResult> {
    let bumps = seeded_bumps(solution, n_tests, seed, placement);
    if bumps.len() < n_tests {
        return Err(Error::UnderResolved(format!(
            "placed only {} of {n_tests} test functions",
            bumps.len()
        )));
    }
    let mut worst = 0.0f64;
    for psi in &bumps {
        worst = worst.max(weak_form_residual(solution, psi)?);
    }
    Ok(CheckResult::upper_bound(
        format!("weak_form[{label}]"),
        worst,
        1e-8,
    ))
}

/// Largest `G[φ + δψ] - G[φ]` over seeded perturbations of relative size
/// `amplitude`; non-positive at a maximiser. The tolerance is round-off
/// in `G`.
pub fn check_maximizer(
    label: &str,
    solution: &PotentialSolution,
    n_tests: usize,
    seed: u64,
    amplitude: f64,
) -> Result<CheckResult> {
    let base = radial_energy(&solution.problem, &solution.phi)?;
    let scale = base.field_term.abs()
        + base.source_term.abs()
        + base.ionic_term.abs()
        + base.entropy_total().abs();
    let size = amplitude
        * solution
            .phi
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-3);
    let mut worst = f64::NEG_INFINITY;
    for psi in seeded_bumps(solution, n_tests, seed, BumpPlacement::Anywhere) {
        let trial: Vec<f64> = solution
            .phi
            .iter()
            .zip(&psi)
            .map(|(p, d)| p + size * d)
            .collect();
        let g = radial_energy(&solution.problem, &trial)?.g;
        worst = worst.max(g - base.g);
    }
    Ok(CheckResult::upper_bound(
        format!("maximizer[{label}]"),
        worst,
        1e-12 * scale.max(1.0),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_results_follow_their_metric() {
        assert!(CheckResult::relative("a", 1.0 + 1e-7, 1.0, 1e-6).pass);
        assert!(!CheckResult::absolute("b", 1.0, 0.0, 0.5).pass);
        assert!(CheckResult::upper_bound("c", -3.0, 1e-9).pass);
        assert!(!CheckResult::upper_bound("d", f64::NAN, 1e-9).pass);
        assert!(CheckResult::report("e", 5.0, 0.0).pass);
        assert!(CheckResult::lower_bound("f", 2.0, 1.9).pass);
        assert!(!CheckResult::lower_bound("g", f64::NAN, 1.9).pass);
    }

    #[test]
    fn report_round_trips() {
        let mut r = VerificationReport::new("abc", 7);
        r.push(CheckResult::relative("x", 2.0, 2.0, 1e-9));
        let back: VerificationReport =
            serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(back.all_pass());
    }

    #[test]
    fn bspline_partition_of_unity() {
        for s in [0.0, 0.3, 0.77] {
            let sum: f64 = (-3..=3).map(|k| cubic_bspline(s - k as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_velocity_gives_zero_derivative() {
        let case = RadialCase::reference(512);
        let fd = fd_shape_derivative(&case, &VelocityField::zero(), 1e-3).unwrap();
        assert_eq!(fd.fd_value, 0.0);
        assert_eq!(fd.formula_value, 0.0);
    }

    #[test]
    fn neutral_uniform_case_has_no_force() {
        let mut case = RadialCase::reference(512);
        case.params.ions.clear();
        case.params.eps_m = case.params.eps_s;
        case.params.lipid_pool = LipidPool::default();
        case.source = SourceCharge::none();
        let v = case.reference_velocity();
        let fd = fd_shape_derivative(&case, &v, 1e-3).unwrap();
        assert!(
            fd.fd_value.abs() < 1e-10 && fd.formula_value.abs() < 1e-10,
            "{fd:?}"
        );
    }

    #[test]
    fn perturbed_solution_fails_weak_form() {
        let case = RadialCase::reference(512);
        let mut sol = case.solve().unwrap();
        assert!(
            check_weak_form("ok", &sol, 20, 1, BumpPlacement::AwayFromFaces)
                .unwrap()
                .pass
        );
        let bump = seeded_bumps(&sol, 1, 99, BumpPlacement::AwayFromFaces).remove(0);
        for (p, b) in sol.phi.iter_mut().zip(&bump) {
            *p += 1e-3 * b;
        }
        let c = check_weak_form("perturbed", &sol, 20, 99, BumpPlacement::AwayFromFaces).unwrap();
        assert!(c.value > 1e-6, "{}", c.line());
    }
}

// ---------------------------------------------------------------------------
// Three-dimensional cross-check

/// Concentric membrane shell in a box, solved on the grid and compared with
/// the spherical reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentricCase {
    pub params: PhysicalParams,
    pub source: SourceCharge,
    /// Cytosolic and exoplasmic radii.
    pub radii: [f64; 2],
    pub half_width: f64,
    /// Outer radius and cell count of the one-dimensional reference.
    pub reference_outer: f64,
    pub reference_cells: usize,
    pub quadrature: QuadratureRule,
    #[serde(default)]
    pub options: Solver3dOptions,
}

impl ConcentricCase {
    /// Shell `4 < r < 6` around a buried charge, in a box of half width 8
    /// whose boundary data come from the spherical solution.
    pub fn reference() -> Self {
        Self {
            params: PhysicalParams {
                ions: vec![IonSpecies::new(1.0, 10.0), IonSpecies::new(-1.0, 10.0)],
                lipid_charge: -1.0,
                lipid_pool: LipidPool {
                    cytosolic: 60.0,
                    exoplasmic: 30.0,
                    shared: false,
                },
                ..Default::default()
            },
            source: SourceCharge::central(300.0, 1.0),
            radii: [4.0, 6.0],
            half_width: 8.0,
            reference_outer: 14.0,
            reference_cells: 8192,
            quadrature: QuadratureRule::new(24, 24),
            options: Solver3dOptions::default(),
        }
    }

    pub fn solve_reference(&self) -> Result<PotentialSolution> {
        if self.reference_outer < self.half_width * 3f64.sqrt() {
            return Err(Error::invalid(
                "reference_outer",
                "the reference must cover the box corners",
            ));
        }
        solve_spherical(
            &self.params,
            &RadialGeometry::spherical(
                self.radii[0],
                self.radii[1],
                self.reference_outer,
                self.reference_cells,
            ),
            &self.source,
            &BoundaryData::zero(),
            &SolverOptions::default(),
        )
    }

    pub fn solve_grid(&self, reference: &PotentialSolution, n: usize) -> Result<GridSolution> {
        let bc = BoundaryData::RadialProfile {
            radii: reference.nodes().to_vec(),
            values: reference.phi.clone(),
        };
        assemble_and_solve_3d(
            &self.params,
            &RegionSdf::concentric(self.radii[0], self.radii[1], self.half_width, n),
            &self.source,
            &bc,
            &self.options,
        )
    }

    pub fn compare(&self, reference: &PotentialSolution, n: usize) -> Result<ConcentricComparison> {
        let start = std::time::Instant::now();
        let grid = self.solve_grid(reference, n)?;
        let seconds = start.elapsed().as_secs_f64();
        let g = grid.grid();
        let scale = reference.phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut err = 0.0f64;
        for (idx, phi) in grid.phi.iter().enumerate() {
            let [i, j, k] = g.coords(idx);
            err = err.max((phi - reference.eval(g.point(i, j, k).norm())).abs());
        }
        let forces = radial_force_profile(reference)?;
        let mut faces = Vec::new();
        for (face, radius) in [(Face::Cytosolic, self.radii[0]), (Face::Exoplasmic, self.radii[1])] {
            let mut surface =
                ParametricSurface::new(Shape::sphere(radius)).with_quadrature(self.quadrature);
            if face == Face::Cytosolic {
                surface = surface.flipped();
            }
            let one = reference
                .face(face)
                .ok_or_else(|| Error::invalid("reference", "missing face trace"))?;
            let f_one = forces
                .face(face)
                .next()
                .ok_or_else(|| Error::invalid("reference", "missing face force"))?
                .f_paper;
            let rel = |v: f64, r: f64| (v - r).abs() / r.abs();
            let max_rel = |tr: &[crate::force::TraceSample], f: fn(&crate::force::TraceSample) -> f64, r: f64| {
                tr.iter().map(|s| rel(f(s), r)).fold(0.0f64, f64::max)
            };
            let rec = extract_traces_3d_with(&grid, face, &surface, GridTraceMethod::JumpRecovery)?;
            let raw = extract_traces_3d_with(&grid, face, &surface, GridTraceMethod::Probes)?;
            let mut force_rel = 0.0f64;
            for t in &rec.samples {
                force_rel = force_rel.max(rel(force_paper(&self.params, t)?, f_one));
            }
            let mut probe_mst = 0.0f64;
            for t in &raw.samples {
                let (a, b) = (force_paper(&self.params, t)?, force_mst(&self.params, t)?);
                probe_mst = probe_mst.max((a - b).abs() / (1.0 + b.abs()));
            }
            faces.push(FaceTraceErrors {
                face,
                phi: max_rel(&rec.samples, |s| s.phi, one.phi),
                grad_s_n: max_rel(&rec.samples, |s| s.grad_s_n, one.grad_s_n),
                grad_m_n: max_rel(&rec.samples, |s| s.grad_m_n, one.grad_m_n),
                rho: max_rel(&rec.samples, |s| s.rho, one.rho),
                max_jump_residual: rec.max_jump_residual(),
                probe_grad_s_n: max_rel(&raw.samples, |s| s.grad_s_n, one.grad_s_n),
                probe_grad_m_n: max_rel(&raw.samples, |s| s.grad_m_n, one.grad_m_n),
                probe_max_jump_residual: raw.max_jump_residual(),
                probe_paper_mst: probe_mst,
                force_rel,
            });
        }
        Ok(ConcentricComparison {
            n,
            seconds,
            newton_iterations: grid.diagnostics.newton_iterations,
            linear_iterations: grid.diagnostics.linear_iterations.clone(),
            field_rel_linf: err / scale,
            faces,
        })
    }
}

/// Worst relative deviation from the spherical traces over the nodes of one face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceTraceErrors {
    pub face: Face,
    pub phi: f64,
    pub grad_s_n: f64,
    pub grad_m_n: f64,
    pub rho: f64,
    pub max_jump_residual: f64,
    /// Both normal traces from probes alone.
    pub probe_grad_s_n: f64,
    pub probe_grad_m_n: f64,
    pub probe_max_jump_residual: f64,
    pub probe_paper_mst: f64,
    /// `F_paper` against the spherical value.
    pub force_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentricComparison {
    pub n: usize,
    pub seconds: f64,
    pub newton_iterations: usize,
    pub linear_iterations: Vec<usize>,
    /// `max |φ_h - φ_1D| / max |φ_1D|` over grid nodes.
    pub field_rel_linf: f64,
    pub faces: Vec<FaceTraceErrors>,
}

impl ConcentricComparison {
    /// Largest of the φ and normal-trace errors over both faces.
    pub fn trace_error(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| f.phi.max(f.grad_s_n).max(f.grad_m_n))
            .fold(0.0, f64::max)
    }

    pub fn probe_trace_error(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| f.phi.max(f.probe_grad_s_n).max(f.probe_grad_m_n))
            .fold(0.0, f64::max)
    }
}
