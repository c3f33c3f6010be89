use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::mesh::{RadialGeometry, RadialMesh, Region, Symmetry};
use crate::error::{Error, Result};
use crate::lipid::{self, Face, FaceSamples};
use crate::model::{
    b_double_prime, b_energy, b_prime, debye_kappa_sq, gaussian_enclosed_fraction, BoundaryData,
    PhysicalParams, SourceCharge,
};

/// Treatment of the mobile-ion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearization {
    #[default]
    Nonlinear,
    /// `B'(φ)` replaced by `B''(0) φ` and `B(φ)` by `B''(0) φ²/2`.
    Linearized,
}

/// How interface normal derivatives are recovered from nodal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMethod {
    /// Balance of the half control volume on each side of the face node.
    /// Satisfies the discrete jump condition to solver tolerance.
    #[default]
    FluxRecovery,
    /// Second-order one-sided differences through three nodes per side.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Target for `max|R_i| / max_i Σ|terms of R_i|`.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Relaxation weight on the lipid-density fixed point.
    pub damping: f64,
    pub rho_tol: f64,
    pub max_fixed_point: usize,
    pub linearization: Linearization,
    pub traces: TraceMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-12,
            max_newton: 60,
            damping: 0.5,
            rho_tol: 1e-10,
            max_fixed_point: 2000,
            linearization: Linearization::Nonlinear,
            traces: TraceMethod::FluxRecovery,
        }
    }
}

impl SolverOptions {
    pub fn linearized() -> Self {
        Self {
            linearization: Linearization::Linearized,
            ..Self::default()
        }
    }
}

/// Membrane face data used by the discrete system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceInfo {
    pub face: Face,
    pub node: usize,
    pub position: f64,
    /// `n = normal_sign · e_r`, pointing into the solvent.
    pub normal_sign: f64,
    /// `|Γ|`: `4πR²` in spherical symmetry, unit area for slabs.
    pub area: f64,
}

/// The assembled finite-volume system.
///
/// Everything is stored per steradian (spherical) or per unit area
/// (planar); [`RadialProblem::measure`] converts to totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProblem {
    pub params: PhysicalParams,
    pub mesh: RadialMesh,
    pub linearization: Linearization,
    /// `ε_k r̄_k² / h_k` with `r̄_k` the cell midpoint, or `ε_k / h_k` for slabs.
    pub conductance: Vec<f64>,
    /// Solvent volume of the half cells left and right of each node.
    pub solvent_left: Vec<f64>,
    pub solvent_right: Vec<f64>,
    /// Fixed charge in the half cells left and right of each node.
    pub source_left: Vec<f64>,
    pub source_right: Vec<f64>,
    /// Dirichlet values at the left and right ends.
    pub dirichlet: [Option<f64>; 2],
    pub faces: Vec<FaceInfo>,
}

fn half_volume(sym: Symmetry, a: f64, b: f64) -> f64 {
    match sym {
        Symmetry::Spherical => (b.powi(3) - a.powi(3)) / 3.0,
        Symmetry::Planar => b - a,
    }
}

pub(crate) fn region_eps(params: &PhysicalParams, region: Region) -> f64 {
    match region {
        Region::Solvent => params.eps_s,
        Region::Membrane => params.eps_m,
        Region::Protein => params.eps_p,
    }
}

impl RadialProblem {
    pub fn assemble(
        params: &PhysicalParams,
        geometry: &RadialGeometry,
        source: &SourceCharge,
        bc: &BoundaryData,
        linearization: Linearization,
    ) -> Result<Self> {
        params.validate()?;
        source.validate()?;
        if let Some((field, reason)) = bc.violations().into_iter().next() {
            return Err(Error::Invalid { field, reason });
        }
        let mesh = geometry.build_mesh()?;
        let sym = mesh.symmetry;
        if sym == Symmetry::Spherical && !source.is_centered() {
            return Err(Error::invalid(
                "source.centers",
                "radial solves need sources at the origin",
            ));
        }
        if sym == Symmetry::Planar && !source.is_empty() {
            return Err(Error::invalid(
                "source",
                "planar solves take no volume source",
            ));
        }
        let n = mesh.nodes.len();
        let x = &mesh.nodes;
        let mut conductance = Vec::with_capacity(n - 1);
        let mut solvent_left = vec![0.0; n];
        let mut solvent_right = vec![0.0; n];
        let mut source_left = vec![0.0; n];
        let mut source_right = vec![0.0; n];
        let enclosed = |r: f64| -> f64 {
            source
                .iter()
                .map(|(_, q, s)| q * gaussian_enclosed_fraction(r, s))
                .sum::<f64>()
                / (4.0 * PI)
        };
        for (k, region) in mesh.cell_region.iter().enumerate() {
            let (a, b) = (x[k], x[k + 1]);
            let h = b - a;
            let eps = region_eps(params, *region);
            conductance.push(match sym {
                Symmetry::Spherical => eps * 0.25 * (a + b) * (a + b) / h,
                Symmetry::Planar => eps / h,
            });
            let m = 0.5 * (a + b);
            if *region == Region::Solvent {
                solvent_right[k] = half_volume(sym, a, m);
                solvent_left[k + 1] = half_volume(sym, m, b);
            }
            if sym == Symmetry::Spherical && !source.is_empty() {
                source_right[k] = enclosed(m) - enclosed(a);
                source_left[k + 1] = enclosed(b) - enclosed(m);
            }
        }
        let at = |z: f64| bc.eval([0.0, 0.0, z], source);
        let dirichlet = match sym {
            Symmetry::Spherical => [None, Some(at(geometry.outer))],
            Symmetry::Planar => [Some(at(0.0)), Some(at(geometry.outer))],
        };
        let mut faces = Vec::new();
        if let Some(nodes) = mesh.membrane_faces {
            for (face, node) in Face::BOTH.into_iter().zip(nodes) {
                let position = x[node];
                let normal_sign = match mesh.sides(node) {
                    (_, Some(Region::Solvent)) => 1.0,
                    (Some(Region::Solvent), _) => -1.0,
                    _ => {
                        return Err(Error::invalid(
                            "geometry",
                            "membrane face without adjacent solvent",
                        ))
                    }
                };
                faces.push(FaceInfo {
                    face,
                    node,
                    position,
                    normal_sign,
                    area: match sym {
                        Symmetry::Spherical => 4.0 * PI * position * position,
                        Symmetry::Planar => 1.0,
                    },
                });
            }
        }
        if linearization == Linearization::Linearized && params.bulk_charge() != 0.0 {
            log::warn!("linearised solve with a non-neutral bulk drops B'(0)");
        }
        Ok(Self {
            params: params.clone(),
            mesh,
            linearization,
            conductance,
            solvent_left,
            solvent_right,
            source_left,
            source_right,
            dirichlet,
            faces,
        })
    }

    /// `4π` for spheres, `1` for slabs.
    pub fn measure(&self) -> f64 {
        match self.mesh.symmetry {
            Symmetry::Spherical => 4.0 * PI,
            Symmetry::Planar => 1.0,
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.mesh.nodes
    }

    /// Free node range `[lo, hi)`.
    pub(crate) fn free(&self) -> (usize, usize) {
        let n = self.mesh.nodes.len();
        let lo = usize::from(self.dirichlet[0].is_some());
        let hi = if self.dirichlet[1].is_some() {
            n - 1
        } else {
            n
        };
        (lo, hi)
    }

    pub fn ion_force(&self, phi: f64) -> Result<f64> {
        match self.linearization {
            Linearization::Nonlinear => b_prime(phi, &self.params),
            Linearization::Linearized => Ok(debye_kappa_sq(&self.params) * phi),
        }
    }

    fn ion_stiffness(&self, phi: f64) -> Result<f64> {
        match self.linearization {
            Linearization::Nonlinear => b_double_prime(phi, &self.params),
            Linearization::Linearized => Ok(debye_kappa_sq(&self.params)),
        }
    }

    pub fn ion_energy(&self, phi: f64) -> Result<f64> {
        match self.linearization {
            Linearization::Nonlinear => b_energy(phi, &self.params),
            Linearization::Linearized => Ok(0.5 * debye_kappa_sq(&self.params) * phi * phi),
        }
    }

    /// Surface charge per steradian (or per area) `q_l ρ_f R_f²` at each face.
    pub(crate) fn face_sources(&self, rho: &[f64]) -> Vec<f64> {
        self.faces
            .iter()
            .zip(rho)
            .map(|(f, r)| self.params.lipid_charge * r * f.area / self.measure())
            .collect()
    }

    /// Lipid density at each face for the nodal potential `phi`.
    pub fn face_densities(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.faces.len()];
        if self.faces.is_empty() {
            return Ok(out);
        }
        let areas: Vec<[f64; 1]> = self.faces.iter().map(|f| [f.area]).collect();
        let phis: Vec<[f64; 1]> = self.faces.iter().map(|f| [phi[f.node]]).collect();
        for (faces, pool) in lipid::pool_groups(&self.params) {
            let samples: Vec<FaceSamples<'_>> = faces
                .iter()
                .map(|f| FaceSamples {
                    weights: &areas[f.index()],
                    phi: &phis[f.index()],
                })
                .collect();
            let rho = lipid::density(&self.params, pool, &samples)?;
            for (f, r) in faces.iter().zip(rho) {
                out[f.index()] = r[0];
            }
        }
        Ok(out)
    }

    /// Surface entropy of each lipid pool with the faces it covers.
    pub fn entropy_terms(&self, phi: &[f64]) -> Result<Vec<(Vec<Face>, f64)>> {
        if self.faces.is_empty() {
            return Ok(Vec::new());
        }
        let areas: Vec<[f64; 1]> = self.faces.iter().map(|f| [f.area]).collect();
        let phis: Vec<[f64; 1]> = self.faces.iter().map(|f| [phi[f.node]]).collect();
        lipid::pool_groups(&self.params)
            .into_iter()
            .map(|(faces, pool)| {
                let samples: Vec<FaceSamples<'_>> = faces
                    .iter()
                    .map(|f| FaceSamples {
                        weights: &areas[f.index()],
                        phi: &phis[f.index()],
                    })
                    .collect();
                let value = lipid::surface_entropy(&self.params, pool, &samples)?;
                Ok((faces, value))
            })
            .collect()
    }

    /// Surface entropy summed over pools.
    pub fn surface_entropy(&self, phi: &[f64]) -> Result<f64> {
        Ok(self.entropy_terms(phi)?.iter().map(|(_, v)| v).sum())
    }

    /// Nodal residual `R_i` of the discrete equations and the scale
    /// `S_i = Σ|terms|`, with the face charges held at `rho`.
    pub fn residual(&self, phi: &[f64], rho: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = phi.len();
        let a = &self.conductance;
        let mut res = vec![0.0; n];
        let mut scale = vec![0.0; n];
        for k in 0..n - 1 {
            let flux = a[k] * (phi[k + 1] - phi[k]);
            res[k] += flux;
            res[k + 1] -= flux;
            let mag = a[k] * (phi[k + 1].abs() + phi[k].abs());
            scale[k] += mag;
            scale[k + 1] += mag;
        }
        for i in 0..n {
            let vol = self.solvent_left[i] + self.solvent_right[i];
            if vol > 0.0 {
                let ion = vol * self.ion_force(phi[i])?;
                res[i] -= ion;
                scale[i] += ion.abs();
            }
            let q = self.source_left[i] + self.source_right[i];
            res[i] += q;
            scale[i] += q.abs();
        }
        for (f, s) in self.faces.iter().zip(self.face_sources(rho)) {
            res[f.node] += s;
            scale[f.node] += s.abs();
        }
        let (lo, hi) = self.free();
        for i in (0..lo).chain(hi..n) {
            res[i] = 0.0;
        }
        Ok((res, scale))
    }

    fn normalised(res: &[f64], scale: &[f64]) -> f64 {
        let r = res.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let s = scale.iter().fold(0.0f64, |m, x| m.max(*x));
        if s == 0.0 {
            r
        } else {
            r / s
        }
    }

    /// Initial guess satisfying the Dirichlet data.
    pub fn initial_guess(&self) -> Vec<f64> {
        let n = self.mesh.nodes.len();
        let x = &self.mesh.nodes;
        match self.dirichlet {
            [Some(l), Some(r)] => x
                .iter()
                .map(|z| l + (r - l) * (z - x[0]) / (x[n - 1] - x[0]))
                .collect(),
            [_, Some(r)] => vec![r; n],
            _ => vec![0.0; n],
        }
    }

    /// Newton iteration with backtracking for fixed face charges.
    pub fn newton(
        &self,
        mut phi: Vec<f64>,
        rho: &[f64],
        opts: &SolverOptions,
    ) -> Result<NewtonOutcome> {
        let n = phi.len();
        if let Some(v) = self.dirichlet[0] {
            phi[0] = v;
        }
        if let Some(v) = self.dirichlet[1] {
            phi[n - 1] = v;
        }
        let (lo, hi) = self.free();
        let (mut res, mut scale) = self.residual(&phi, rho)?;
        let mut history = vec![Self::normalised(&res, &scale)];
        let mut damping = Vec::new();
        let a = &self.conductance;
        // Rows near the centre carry small weights, so one full step is
        // taken past the tolerance to bring them to round-off as well.
        let mut polished = false;
        for _ in 0..opts.max_newton {
            let converged = *history.last().unwrap() <= opts.newton_tol;
            if converged && polished {
                return Ok(NewtonOutcome {
                    phi,
                    residual_history: history,
                    damping,
                });
            }
            // -J is symmetric positive definite and tridiagonal.
            let m = hi - lo;
            let mut diag = vec![0.0; m];
            let mut off = vec![0.0; m.saturating_sub(1)];
            for i in lo..hi {
                let mut d =
                    self.ion_stiffness(phi[i])? * (self.solvent_left[i] + self.solvent_right[i]);
                if i > 0 {
                    d += a[i - 1];
                }
                if i + 1 < n {
                    d += a[i];
                }
                diag[i - lo] = d;
                if i + 1 < hi {
                    off[i - lo] = -a[i];
                }
            }
            let delta = thomas(&off, &diag, &off, &res[lo..hi])?;
            if converged {
                polished = true;
                let mut trial = phi.clone();
                for (k, d) in delta.iter().enumerate() {
                    trial[lo + k] += d;
                }
                if let Ok((r, s)) = self.residual(&trial, rho) {
                    if l2(&r) <= l2(&res) {
                        phi = trial;
                        res = r;
                        scale = s;
                        damping.push(1.0);
                        history.push(Self::normalised(&res, &scale));
                    }
                }
                continue;
            }
            let norm0 = l2(&res);
            let mut lambda = 1.0;
            loop {
                let mut trial = phi.clone();
                for (k, d) in delta.iter().enumerate() {
                    trial[lo + k] += lambda * d;
                }
                match self.residual(&trial, rho) {
                    Ok((r, s))
                        if l2(&r) <= (1.0 - 1e-4 * lambda) * norm0
                            || Self::normalised(&r, &s) <= opts.newton_tol =>
                    {
                        phi = trial;
                        res = r;
                        scale = s;
                        break;
                    }
                    Ok(_) | Err(Error::Range { .. }) => {
                        lambda *= 0.5;
                        if lambda < 1e-12 {
                            return Err(Error::NewtonDiverged {
                                iterations: history.len() - 1,
                                residual: *history.last().unwrap(),
                                damping,
                            });
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            damping.push(lambda);
            history.push(Self::normalised(&res, &scale));
        }
        if *history.last().unwrap() <= opts.newton_tol {
            return Ok(NewtonOutcome {
                phi,
                residual_history: history,
                damping,
            });
        }
        Err(Error::NewtonDiverged {
            iterations: opts.max_newton,
            residual: *history.last().unwrap(),
            damping,
        })
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves a tridiagonal system with sub-, main and super-diagonals.
pub(crate) fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 {
        return Err(Error::SingularSystem(
            "zero pivot in tridiagonal solve".into(),
        ));
    }
    if n > 1 {
        c[0] = sup[0] / piv;
    }
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - sub[i - 1] * c[i - 1];
        if piv == 0.0 {
            return Err(Error::SingularSystem(
                "zero pivot in tridiagonal solve".into(),
            ));
        }
        if i + 1 < n {
            c[i] = sup[i] / piv;
        }
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub phi: Vec<f64>,
    pub residual_history: Vec<f64>,
    pub damping: Vec<f64>,
}

/// One-sided normal derivatives and potential at a membrane face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceTrace {
    pub face: Face,
    pub node: usize,
    pub position: f64,
    pub normal_sign: f64,
    pub phi: f64,
    /// `∇φˢ·n`.
    pub grad_s_n: f64,
    /// `∇φᵐ·n`.
    pub grad_m_n: f64,
    /// Tangential gradient; zero by symmetry in one dimension.
    pub grad_t: [f64; 3],
    pub rho: f64,
    /// `ε_s ∂φˢ/∂n - ε_m ∂φᵐ/∂n + q_l ρ`.
    pub jump_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub newton_iterations: usize,
    pub fixed_point_iterations: usize,
    /// Normalised residual after the final Newton solve.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub damping_history: Vec<f64>,
    /// Last change of the face densities in the fixed point.
    pub rho_change: f64,
}

impl SolveDiagnostics {
    /// Observed convergence orders `log(r_{k+1}/r_k) / log(r_k/r_{k-1})`
    /// over the tail of the final Newton history, once `r_{k-1} < start`.
    /// Steps that land below `floor` are skipped as round-off dominated.
    pub fn newton_orders(&self, start: f64, floor: f64) -> Vec<f64> {
        self.residual_history
            .windows(3)
            .filter(|w| w[0] < start && w[2] > floor)
            .map(|w| (w[2] / w[1]).ln() / (w[1] / w[0]).ln())
            .collect()
    }
}

/// A converged radial or planar solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSolution {
    pub problem: RadialProblem,
    pub phi: Vec<f64>,
    /// Face densities the final Newton solve used.
    pub rho: Vec<f64>,
    pub faces: Vec<FaceTrace>,
    pub diagnostics: SolveDiagnostics,
}

impl PotentialSolution {
    pub fn nodes(&self) -> &[f64] {
        &self.problem.mesh.nodes
    }

    pub fn face(&self, face: Face) -> Option<&FaceTrace> {
        self.faces.iter().find(|f| f.face == face)
    }

    /// Linear interpolation of `φ` at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        crate::model::interpolate(self.nodes(), &self.phi, x)
    }
}

/// Damped fixed point on the face densities around Newton.
pub fn solve_problem(problem: RadialProblem, opts: &SolverOptions) -> Result<PotentialSolution> {
    let mut phi = problem.initial_guess();
    let mut rho = problem.face_densities(&phi)?;
    let mut total_newton = 0;
    let mut change = f64::INFINITY;
    for sweep in 1..=opts.max_fixed_point {
        let out = problem.newton(phi, &rho, opts)?;
        total_newton += out.damping.len();
        phi = out.phi;
        let fresh = problem.face_densities(&phi)?;
        change = fresh
            .iter()
            .zip(&rho)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if change <= opts.rho_tol {
            let faces = traces(&problem, &phi, &rho, opts.traces)?;
            let residual = *out.residual_history.last().unwrap();
            return Ok(PotentialSolution {
                problem,
                phi,
                rho,
                faces,
                diagnostics: SolveDiagnostics {
                    newton_iterations: total_newton,
                    fixed_point_iterations: sweep,
                    residual,
                    residual_history: out.residual_history,
                    damping_history: out.damping,
                    rho_change: change,
                },
            });
        }
        for (r, f) in rho.iter_mut().zip(&fresh) {
            *r += opts.damping * (f - *r);
        }
    }
    Err(Error::FixedPointStagnation {
        iterations: opts.max_fixed_point,
        change,
    })
}

/// Nonlinear (or linearised, per `opts`) solve in spherical symmetry.
pub fn solve_spherical(
    params: &PhysicalParams,
    geometry: &RadialGeometry,
    source: &SourceCharge,
    bc: &BoundaryData,
    opts: &SolverOptions,
) -> Result<PotentialSolution> {
    if geometry.symmetry != Symmetry::Spherical {
        return Err(Error::invalid("geometry.symmetry", "expected spherical"));
    }
    let problem = RadialProblem::assemble(params, geometry, source, bc, opts.linearization)?;
    solve_problem(problem, opts)
}

/// Slab solve with Dirichlet data at `z = 0` and `z = L`.
pub fn solve_planar(
    params: &PhysicalParams,
    geometry: &RadialGeometry,
    bc: &BoundaryData,
    opts: &SolverOptions,
) -> Result<PotentialSolution> {
    if geometry.symmetry != Symmetry::Planar {
        return Err(Error::invalid("geometry.symmetry", "expected planar"));
    }
    let problem = RadialProblem::assemble(
        params,
        geometry,
        &SourceCharge::none(),
        bc,
        opts.linearization,
    )?;
    solve_problem(problem, opts)
}

/// `ε x² φ'` immediately left and right of node `i` from the half-cell balances.
fn recovered_fluxes(problem: &RadialProblem, phi: &[f64], i: usize) -> Result<(f64, f64)> {
    let a = &problem.conductance;
    let force = problem.ion_force(phi[i])?;
    let left =
        a[i - 1] * (phi[i] - phi[i - 1]) + problem.solvent_left[i] * force - problem.source_left[i];
    let right =
        a[i] * (phi[i + 1] - phi[i]) - problem.solvent_right[i] * force + problem.source_right[i];
    Ok((left, right))
}

fn one_sided(x: &[f64], f: &[f64], i: usize, dir: isize) -> f64 {
    let j1 = (i as isize + dir) as usize;
    let j2 = (i as isize + 2 * dir) as usize;
    let h1 = (x[j1] - x[i]).abs();
    let h2 = (x[j2] - x[j1]).abs();
    let c0 = (2.0 * h1 + h2) / (h1 * (h1 + h2));
    let c1 = -(h1 + h2) / (h1 * h2);
    let c2 = h1 / (h2 * (h1 + h2));
    -(dir as f64) * (c0 * f[i] + c1 * f[j1] + c2 * f[j2])
}

/// Interface traces of a nodal solution.
pub fn traces(
    problem: &RadialProblem,
    phi: &[f64],
    rho: &[f64],
    method: TraceMethod,
) -> Result<Vec<FaceTrace>> {
    let x = &problem.mesh.nodes;
    let p = &problem.params;
    let mut out = Vec::with_capacity(problem.faces.len());
    for (info, r) in problem.faces.iter().zip(rho) {
        let i = info.node;
        let (lreg, rreg) = problem.mesh.sides(i);
        let (lreg, rreg) = (
            lreg.ok_or(Error::InsufficientNodes { found: 0 })?,
            rreg.ok_or(Error::InsufficientNodes { found: 0 })?,
        );
        let (d_left, d_right) = match method {
            TraceMethod::FluxRecovery => {
                let (fl, fr) = recovered_fluxes(problem, phi, i)?;
                let w = match problem.mesh.symmetry {
                    Symmetry::Spherical => x[i] * x[i],
                    Symmetry::Planar => 1.0,
                };
                (
                    fl / (region_eps(p, lreg) * w),
                    fr / (region_eps(p, rreg) * w),
                )
            }
            TraceMethod::OneSided => {
                let cells = &problem.mesh.cell_region;
                let left_ok = i >= 2 && cells[i - 2] == lreg;
                let right_ok = i + 2 < x.len() && cells[i + 1] == rreg;
                if !left_ok || !right_ok {
                    return Err(Error::InsufficientNodes {
                        found: if left_ok { 2 } else { 1 },
                    });
                }
                (one_sided(x, phi, i, -1), one_sided(x, phi, i, 1))
            }
        };
        let s = info.normal_sign;
        let (grad_s_n, grad_m_n) = if s > 0.0 {
            (s * d_right, s * d_left)
        } else {
            (s * d_left, s * d_right)
        };
        out.push(FaceTrace {
            face: info.face,
            node: i,
            position: x[i],
            normal_sign: s,
            phi: phi[i],
            grad_s_n,
            grad_m_n,
            grad_t: [0.0; 3],
            rho: *r,
            jump_residual: p.eps_s * grad_s_n - p.eps_m * grad_m_n + p.lipid_charge * r,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IonSpecies, LipidPool};
    use approx::assert_relative_eq;

    #[test]
    fn thomas_solves_small_system() {
        let x = thomas(
            &[-1.0, -1.0],
            &[2.0, 2.0, 2.0],
            &[-1.0, -1.0],
            &[1.0, 0.0, 1.0],
        )
        .unwrap();
        for v in x {
            assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn planar_laplace_is_linear() {
        let p = PhysicalParams {
            eps_m: 80.0,
            ..Default::default()
        };
        let g = RadialGeometry::planar(3.0, 5.0, 10.0, 64);
        let bc = BoundaryData::Affine {
            offset: 0.0,
            gradient: [0.0, 0.0, 0.1],
        };
        let s = solve_planar(&p, &g, &bc, &SolverOptions::default()).unwrap();
        for (z, v) in s.nodes().iter().zip(&s.phi) {
            assert_relative_eq!(*v, z / 10.0, epsilon = 1e-13);
        }
        for f in &s.faces {
            assert_relative_eq!(f.grad_s_n, f.normal_sign * 0.1, epsilon = 1e-12);
            assert_relative_eq!(f.grad_m_n, f.grad_s_n, epsilon = 1e-12);
        }
    }

    #[test]
    fn gauss_shell_cancels_outside() {
        // Q = 1 at the centre, lipid charge -0.5 on each face.
        let p = PhysicalParams {
            eps_m: 80.0,
            lipid_charge: -1.0,
            lipid_pool: LipidPool {
                cytosolic: 0.5,
                exoplasmic: 0.5,
                shared: false,
            },
            ..Default::default()
        };
        let g = RadialGeometry::spherical(4.0, 6.0, 20.0, 800);
        let s = solve_spherical(
            &p,
            &g,
            &SourceCharge::central(1.0, 0.5),
            &BoundaryData::zero(),
            &SolverOptions::default(),
        )
        .unwrap();
        for (r, v) in s.nodes().iter().zip(&s.phi) {
            if *r > 6.0 {
                assert!(v.abs() < 1e-8, "phi({r}) = {v}");
            }
        }
        for f in &s.faces {
            assert!(f.jump_residual.abs() < 1e-10);
        }
        let e = s.face(Face::Exoplasmic).unwrap();
        // Just outside Γ_e the field vanishes; inside it carries -0.5 net.
        assert!(e.grad_s_n.abs() < 1e-8);
    }

    #[test]
    fn newton_tail_is_quadratic() {
        let p = PhysicalParams {
            ions: vec![IonSpecies::new(1.0, 10.0), IonSpecies::new(-1.0, 10.0)],
            lipid_charge: -1.0,
            lipid_pool: LipidPool {
                cytosolic: 50.0,
                exoplasmic: 50.0,
                shared: false,
            },
            ..Default::default()
        };
        let g = RadialGeometry::spherical(5.0, 7.0, 30.0, 1024);
        let s = solve_spherical(
            &p,
            &g,
            &SourceCharge::central(2000.0, 0.5),
            &BoundaryData::zero(),
            &SolverOptions::default(),
        )
        .unwrap();
        let h = &s.diagnostics.residual_history;
        assert!(s.diagnostics.residual <= 1e-12, "{h:?}");
        let orders = s.diagnostics.newton_orders(1e-3, 1e-15);
        assert!(!orders.is_empty(), "{h:?}");
        assert!(orders.iter().all(|q| *q >= 1.8), "{orders:?} from {h:?}");
    }

    #[test]
    fn shared_pool_converges() {
        let p = PhysicalParams {
            ions: vec![IonSpecies::new(1.0, 0.1), IonSpecies::new(-1.0, 0.1)],
            lipid_charge: -1.0,
            lipid_pool: LipidPool {
                cytosolic: 20.0,
                exoplasmic: 20.0,
                shared: true,
            },
            ..Default::default()
        };
        let g = RadialGeometry::spherical(5.0, 7.0, 40.0, 512);
        let s = solve_spherical(
            &p,
            &g,
            &SourceCharge::central(50.0, 0.5),
            &BoundaryData::zero(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(s.diagnostics.fixed_point_iterations > 1);
        let total: f64 = s
            .faces
            .iter()
            .zip(&s.problem.faces)
            .map(|(t, f)| t.rho * f.area)
            .sum();
        assert_relative_eq!(total, 40.0, max_relative = 1e-12);
    }
}
