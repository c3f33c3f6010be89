//! Physical parameters, the mobile-ion energy `B(φ)` and its derivatives,
//! regularised source charges and Dirichlet data.
//!
//! Every equation is written in reduced units: potentials in units of
//! `1/(β q)` for a unit charge, lengths and dielectric coefficients in
//! whatever consistent system the caller picks. [`ReducedUnits`] provides
//! one such system (Å, k_BT, elementary charge) for callers that start
//! from SI quantities.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest exponent accepted by the Boltzmann factors before signalling overflow.
pub const MAX_EXPONENT: f64 = 700.0;

/// A mobile ionic species in the bulk solvent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonSpecies {
    /// Valence in elementary charges.
    pub charge: f64,
    /// Bulk number density `c∞`.
    pub concentration: f64,
}

impl IonSpecies {
    pub fn new(charge: f64, concentration: f64) -> Self {
        Self {
            charge,
            concentration,
        }
    }
}

/// Selector for the lipid coupling function `γ(φ)`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaKind {
    /// `γ(φ) = exp(-q_l β φ)` with the surface entropy term carrying a
    /// negative prefactor, so that `ρ = C w / ∫w` is positive and `∫ρ = C`.
    #[default]
    Boltzmann,
    /// The literal coupling `ρ = C γ'(φ) / (β q_l ∫γ)` with a user-supplied
    /// pair `(γ, γ')`.
    #[serde(skip)]
    Custom {
        gamma: fn(f64) -> f64,
        gamma_prime: fn(f64) -> f64,
    },
}

impl PartialEq for GammaKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (GammaKind::Boltzmann, GammaKind::Boltzmann) => true,
            (
                GammaKind::Custom {
                    gamma: a,
                    gamma_prime: da,
                },
                GammaKind::Custom {
                    gamma: b,
                    gamma_prime: db,
                },
            ) => std::ptr::fn_addr_eq(*a, *b) && std::ptr::fn_addr_eq(*da, *db),
            _ => false,
        }
    }
}

/// Charged-lipid pool per membrane face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipidPool {
    /// Pool `C_c` on the cytosolic (inner) face.
    pub cytosolic: f64,
    /// Pool `C_e` on the exoplasmic (outer) face.
    pub exoplasmic: f64,
    /// When set, both faces draw from one pool of size `cytosolic + exoplasmic`.
    #[serde(default)]
    pub shared: bool,
}

impl Default for LipidPool {
    fn default() -> Self {
        Self {
            cytosolic: 0.0,
            exoplasmic: 0.0,
            shared: false,
        }
    }
}

/// Material and thermodynamic constants of the protein-membrane system.
/// Missing fields take the [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// Inverse thermal energy `β`.
    pub beta: f64,
    /// Solvent dielectric coefficient.
    pub eps_s: f64,
    /// Membrane dielectric coefficient.
    pub eps_m: f64,
    /// Protein dielectric coefficient.
    pub eps_p: f64,
    #[serde(default)]
    pub ions: Vec<IonSpecies>,
    /// Charge of one lipid, `q_l`.
    #[serde(default)]
    pub lipid_charge: f64,
    #[serde(default)]
    pub lipid_pool: LipidPool,
    #[serde(default)]
    pub gamma_kind: GammaKind,
    /// Surface diffusion coefficient `D`.
    #[serde(default)]
    pub diffusion: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps_s: 80.0,
            eps_m: 2.0,
            eps_p: 2.0,
            ions: Vec::new(),
            lipid_charge: 0.0,
            lipid_pool: LipidPool::default(),
            gamma_kind: GammaKind::Boltzmann,
            diffusion: 0.0,
        }
    }
}

impl PhysicalParams {
    /// Collects every violated invariant as `(field, reason)` pairs.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut positive = |name: &str, value: f64| {
            if !(value > 0.0 && value.is_finite()) {
                out.push((
                    name.to_string(),
                    format!("must be positive and finite, got {value}"),
                ));
            }
        };
        positive("beta", self.beta);
        positive("eps_s", self.eps_s);
        positive("eps_m", self.eps_m);
        positive("eps_p", self.eps_p);
        if !(self.diffusion >= 0.0) {
            out.push((
                "diffusion".into(),
                format!("must be non-negative, got {}", self.diffusion),
            ));
        }
        for (j, ion) in self.ions.iter().enumerate() {
            if !(ion.concentration >= 0.0) {
                out.push((
                    format!("ions[{j}].concentration"),
                    format!("must be non-negative, got {}", ion.concentration),
                ));
            }
            if !ion.charge.is_finite() {
                out.push((format!("ions[{j}].charge"), "must be finite".into()));
            }
        }
        if !self.lipid_charge.is_finite() {
            out.push(("lipid_charge".into(), "must be finite".into()));
        }
        for (name, c) in [
            ("lipid_pool.cytosolic", self.lipid_pool.cytosolic),
            ("lipid_pool.exoplasmic", self.lipid_pool.exoplasmic),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                out.push((name.into(), format!("must be non-negative, got {c}")));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some((field, reason)) => Err(Error::Invalid { field, reason }),
        }
    }

    /// `Σ c_j q_j`, zero for an electroneutral bulk.
    pub fn bulk_charge(&self) -> f64 {
        self.ions.iter().map(|s| s.concentration * s.charge).sum()
    }

    /// Total lipid charge `q_l (C_c + C_e)`.
    pub fn total_lipid_charge(&self) -> f64 {
        self.lipid_charge * (self.lipid_pool.cytosolic + self.lipid_pool.exoplasmic)
    }
}

fn boltzmann_exponent(params: &PhysicalParams, species: usize, phi: f64) -> Result<f64> {
    let ion = &params.ions[species];
    let exponent = -params.beta * ion.charge * phi;
    if exponent > MAX_EXPONENT || exponent.is_nan() {
        return Err(Error::Range { species, exponent });
    }
    Ok(exponent)
}

/// Mobile-ion energy density `B(φ) = β⁻¹ Σ c_j (e^{-β q_j φ} - 1)`.
pub fn b_energy(phi: f64, params: &PhysicalParams) -> Result<f64> {
    let mut sum = 0.0;
    for (j, ion) in params.ions.iter().enumerate() {
        let e = boltzmann_exponent(params, j, phi)?;
        sum += ion.concentration * e.exp_m1();
    }
    Ok(sum / params.beta)
}

/// `B'(φ) = -Σ c_j q_j e^{-β q_j φ}`; minus the mobile charge density.
pub fn b_prime(phi: f64, params: &PhysicalParams) -> Result<f64> {
    let mut sum = 0.0;
    for (j, ion) in params.ions.iter().enumerate() {
        let e = boltzmann_exponent(params, j, phi)?;
        sum -= ion.concentration * ion.charge * e.exp();
    }
    Ok(sum)
}

/// `B''(φ) = β Σ c_j q_j² e^{-β q_j φ}`, always non-negative.
pub fn b_double_prime(phi: f64, params: &PhysicalParams) -> Result<f64> {
    let mut sum = 0.0;
    for (j, ion) in params.ions.iter().enumerate() {
        let e = boltzmann_exponent(params, j, phi)?;
        sum += ion.concentration * ion.charge * ion.charge * e.exp();
    }
    Ok(params.beta * sum)
}

/// Linearisation coefficient `B''(0) = β Σ c_j q_j²`. Divided by `ε_s`
/// this is the squared inverse Debye length.
pub fn debye_kappa_sq(params: &PhysicalParams) -> f64 {
    params.beta
        * params
            .ions
            .iter()
            .map(|s| s.concentration * s.charge * s.charge)
            .sum::<f64>()
}

/// Inverse Debye length in the solvent, `sqrt(B''(0)/ε_s)`.
pub fn debye_kappa(params: &PhysicalParams) -> f64 {
    (debye_kappa_sq(params) / params.eps_s).sqrt()
}

/// Conversion from laboratory quantities to the reduced units used by the
/// solvers: lengths in Å, energies in k_BT, charges in elementary charges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedUnits {
    /// Temperature in kelvin.
    pub temperature: f64,
}

impl ReducedUnits {
    const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
    const BOLTZMANN: f64 = 1.380_649e-23;
    const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
    const AVOGADRO: f64 = 6.022_140_76e23;
    const ANGSTROM: f64 = 1e-10;

    pub fn new(temperature: f64) -> Self {
        Self { temperature }
    }

    /// `β` is unity when energies are measured in k_BT.
    pub fn beta(&self) -> f64 {
        1.0
    }

    /// Reduced dielectric coefficient for a relative permittivity.
    pub fn permittivity(&self, relative: f64) -> f64 {
        relative * Self::VACUUM_PERMITTIVITY * Self::BOLTZMANN * self.temperature * Self::ANGSTROM
            / (Self::ELEMENTARY_CHARGE * Self::ELEMENTARY_CHARGE)
    }

    /// Number density in Å⁻³ for a molar concentration.
    pub fn concentration(&self, molar: f64) -> f64 {
        molar * Self::AVOGADRO * 1e3 * Self::ANGSTROM.powi(3)
    }
}

/// Fixed charges regularised as normalised Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SourceCharge {
    pub centers: Vec<[f64; 3]>,
    pub magnitudes: Vec<f64>,
    pub widths: Vec<f64>,
}

/// Default Gaussian spread for point charges.
pub const DEFAULT_SOURCE_WIDTH: f64 = 0.5;

impl SourceCharge {
    pub fn none() -> Self {
        Self::default()
    }

    /// A single Gaussian at the origin.
    pub fn central(magnitude: f64, width: f64) -> Self {
        Self {
            centers: vec![[0.0; 3]],
            magnitudes: vec![magnitude],
            widths: vec![width],
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_charge(&self) -> f64 {
        self.magnitudes.iter().sum()
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.magnitudes.len() != self.centers.len() || self.widths.len() != self.centers.len() {
            out.push((
                "source".into(),
                format!(
                    "centers ({}), magnitudes ({}) and widths ({}) must have equal length",
                    self.centers.len(),
                    self.magnitudes.len(),
                    self.widths.len()
                ),
            ));
        }
        for (i, w) in self.widths.iter().enumerate() {
            if !(*w > 0.0 && w.is_finite()) {
                out.push((
                    format!("source.widths[{i}]"),
                    format!("must be strictly positive, got {w}"),
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some((field, reason)) => Err(Error::Invalid { field, reason }),
        }
    }

    /// True when every Gaussian sits at the origin.
    pub fn is_centered(&self) -> bool {
        self.centers.iter().all(|c| c.iter().all(|x| *x == 0.0))
    }

    /// Charge density `f(x)`.
    pub fn density(&self, x: [f64; 3]) -> f64 {
        self.iter()
            .map(|(c, q, s)| {
                let r2 = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>();
                q * (-r2 / (2.0 * s * s)).exp() / ((2.0 * PI).powf(1.5) * s.powi(3))
            })
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 3], f64, f64)> + '_ {
        self.centers
            .iter()
            .zip(&self.magnitudes)
            .zip(&self.widths)
            .map(|((c, q), s)| (*c, *q, *s))
    }

    /// Radius beyond which every Gaussian's density has dropped below
    /// `rel_tol` of its peak.
    pub fn support_radius(&self, rel_tol: f64) -> f64 {
        self.iter()
            .map(|(c, _, s)| {
                let r0 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                r0 + s * (2.0 * (1.0 / rel_tol).ln()).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Charge enclosed in the ball of radius `r` around the origin, valid
    /// for centred sources.
    pub fn enclosed_charge(&self, r: f64) -> f64 {
        self.iter()
            .map(|(_, q, s)| q * gaussian_enclosed_fraction(r, s))
            .sum()
    }

    /// Exact charge inside the axis-aligned box `[lo, hi]`.
    pub fn box_charge(&self, lo: [f64; 3], hi: [f64; 3]) -> f64 {
        self.iter()
            .map(|(c, q, s)| {
                let a = std::f64::consts::SQRT_2 * s;
                q * (0..3)
                    .map(|k| 0.5 * (erf((hi[k] - c[k]) / a) - erf((lo[k] - c[k]) / a)))
                    .product::<f64>()
            })
            .sum()
    }
}

/// Fraction of a unit 3-D Gaussian of spread `sigma` inside radius `r`.
pub fn gaussian_enclosed_fraction(r: f64, sigma: f64) -> f64 {
    let x = r / sigma;
    erf(x / std::f64::consts::SQRT_2) - (2.0 / PI).sqrt() * x * (-0.5 * x * x).exp()
}

/// Dirichlet data `g` on the outer boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryData {
    Constant {
        value: f64,
    },
    Affine {
        offset: f64,
        gradient: [f64; 3],
    },
    /// Far field of the source: `Σ Q e^{κ²σ²/2} e^{-κ d} / (4π ε d)`.
    ScreenedCoulomb {
        eps: f64,
        kappa: f64,
    },
    /// Radial profile `g(|x|)` sampled at increasing radii, linearly interpolated.
    RadialProfile {
        radii: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Default for BoundaryData {
    fn default() -> Self {
        BoundaryData::Constant { value: 0.0 }
    }
}

impl BoundaryData {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn eval(&self, x: [f64; 3], source: &SourceCharge) -> f64 {
        match self {
            BoundaryData::Constant { value } => *value,
            BoundaryData::Affine { offset, gradient } => {
                offset + (0..3).map(|k| gradient[k] * x[k]).sum::<f64>()
            }
            BoundaryData::ScreenedCoulomb { eps, kappa } => source
                .iter()
                .map(|(c, q, s)| {
                    let d = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>().sqrt();
                    q * (0.5 * kappa * kappa * s * s - kappa * d).exp() / (4.0 * PI * eps * d)
                })
                .sum(),
            BoundaryData::RadialProfile { radii, values } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                interpolate(radii, values, r)
            }
        }
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match self {
            BoundaryData::Constant { value } if !value.is_finite() => {
                out.push(("boundary.value".into(), "must be finite".into()))
            }
            BoundaryData::Affine { offset, gradient }
                if !offset.is_finite() || gradient.iter().any(|g| !g.is_finite()) =>
            {
                out.push((
                    "boundary".into(),
                    "affine coefficients must be finite".into(),
                ))
            }
            BoundaryData::ScreenedCoulomb { eps, kappa } => {
                if !(*eps > 0.0) {
                    out.push(("boundary.eps".into(), "must be positive".into()));
                }
                if !(*kappa >= 0.0) {
                    out.push(("boundary.kappa".into(), "must be non-negative".into()));
                }
            }
            BoundaryData::RadialProfile { radii, values } => {
                if radii.len() != values.len() || radii.len() < 2 {
                    out.push((
                        "boundary.radii".into(),
                        "need at least two samples matching values".into(),
                    ));
                } else if radii.windows(2).any(|w| w[1] <= w[0]) {
                    out.push((
                        "boundary.radii".into(),
                        "must be strictly increasing".into(),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    out.push(("boundary.values".into(), "must be finite".into()));
                }
            }
            _ => {}
        }
        out
    }
}

/// Piecewise-linear interpolation clamped to the end values.
pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|v| *v <= x) - 1;
    let t = (x - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + t * (ys[k + 1] - ys[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn symmetric(beta: f64) -> PhysicalParams {
        PhysicalParams {
            beta,
            ions: vec![IonSpecies::new(1.0, 1.0), IonSpecies::new(-1.0, 1.0)],
            ..Default::default()
        }
    }

    #[test]
    fn b_energy_examples() {
        let p = symmetric(1.0);
        assert_eq!(b_energy(0.0, &p).unwrap(), 0.0);
        // 2 (cosh 1 - 1)
        assert_relative_eq!(
            b_energy(1.0, &p).unwrap(),
            2.0 * (1f64.cosh() - 1.0),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            b_energy(1.0, &p).unwrap(),
            1.086_161_270_2,
            max_relative = 1e-9
        );
        let dilute = PhysicalParams {
            beta: 2.0,
            ions: vec![IonSpecies::new(1.0, 0.0)],
            ..Default::default()
        };
        assert_eq!(b_energy(0.5, &dilute).unwrap(), 0.0);
        assert_eq!(b_energy(3.0, &PhysicalParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn b_prime_examples() {
        let p = symmetric(1.0);
        assert_eq!(b_prime(0.0, &p).unwrap(), 0.0);
        assert_relative_eq!(
            b_prime(1.0, &p).unwrap(),
            2.0 * 1f64.sinh(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            b_prime(1.0, &p).unwrap(),
            2.350_402_387_3,
            max_relative = 1e-9
        );
        assert_eq!(b_prime(-4.2, &PhysicalParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(debye_kappa_sq(&symmetric(1.0)), 2.0);
        assert_eq!(debye_kappa_sq(&PhysicalParams::default()), 0.0);
        let p = PhysicalParams {
            beta: 2.0,
            ions: vec![IonSpecies::new(2.0, 3.0)],
            ..Default::default()
        };
        assert_eq!(debye_kappa_sq(&p), 24.0);
    }

    #[test]
    fn overflow_is_reported_with_species() {
        let p = symmetric(1.0);
        match b_energy(800.0, &p) {
            Err(Error::Range { species, .. }) => assert_eq!(species, 1),
            other => panic!("expected range error, got {other:?}"),
        }
        assert!(b_prime(-800.0, &p).is_err());
    }

    #[test]
    fn invalid_params_are_listed() {
        let p = PhysicalParams {
            beta: 0.0,
            eps_m: -2.0,
            diffusion: -1.0,
            ..Default::default()
        };
        let fields: Vec<_> = p.violations().into_iter().map(|v| v.0).collect();
        assert_eq!(fields, vec!["beta", "eps_m", "diffusion"]);
    }

    #[test]
    fn source_box_charge_covers_total() {
        let s = SourceCharge::central(3.0, 0.5);
        let q = s.box_charge([-10.0; 3], [10.0; 3]);
        assert_relative_eq!(q, 3.0, max_relative = 1e-14);
        assert_relative_eq!(s.enclosed_charge(20.0), 3.0, max_relative = 1e-14);
        // half space
        assert_relative_eq!(
            s.box_charge([0.0, -10.0, -10.0], [10.0; 3]),
            1.5,
            max_relative = 1e-14
        );
    }

    #[test]
    fn reduced_units_bjerrum_length() {
        // Bjerrum length of water at 298.15 K is about 7.1 Å.
        let u = ReducedUnits::new(298.15);
        let lb = 1.0 / (4.0 * PI * u.permittivity(78.5));
        assert!((lb - 7.14).abs() < 0.05, "{lb}");
        assert_relative_eq!(u.concentration(1.0), 6.022e-4, max_relative = 1e-3);
    }

    #[test]
    fn interpolation_clamps() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [1.0, 3.0, -1.0];
        assert_eq!(interpolate(&xs, &ys, -1.0), 1.0);
        assert_eq!(interpolate(&xs, &ys, 0.5), 2.0);
        assert_eq!(interpolate(&xs, &ys, 2.0), 1.0);
        assert_eq!(interpolate(&xs, &ys, 5.0), -1.0);
    }
}
